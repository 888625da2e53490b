use std::time::Duration;

use cannula_core::autonomy::{PerceptionConfig, SurgicalState};
use cannula_core::harness::{plan_for_seed, CampaignReport, SandboxConfig};
use cannula_core::scene::create_scene;
use cannula_gateway::{decode_frame_packet, Gateway, GatewayConfig, ServerMessage, CLOSE_INVALID_PAYLOAD};
use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const SCENE: u64 = 21;
const TRIAL: u64 = 4;

fn sandbox() -> SandboxConfig {
    let mut cfg = SandboxConfig::default();
    cfg.autonomy.perception = PerceptionConfig::oracle();
    cfg.autonomy.hold_s = 0.3;
    cfg
}

async fn start() -> (String, tokio::sync::oneshot::Sender<()>) {
    start_with(Duration::from_millis(2)).await
}

async fn start_with(tick_period: Duration) -> (String, tokio::sync::oneshot::Sender<()>) {
    let gw = Gateway::start(GatewayConfig {
        sandbox: sandbox(),
        scene_seed: SCENE,
        trial_seed: TRIAL,
        tick_period,
        model: None,
    })
    .unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(gw.serve(listener, async move {
        let _ = stop_rx.await;
    }));
    (addr, stop_tx)
}

async fn http_get(addr: &str, path: &str) -> (String, String) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").as_bytes()).await.unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).await.unwrap();
    let (head, body) = buf.split_once("\r\n\r\n").unwrap();
    (head.lines().next().unwrap().to_string(), body.to_string())
}

/// Next JSON message, skipping frames.
async fn next_json(ws: &mut Ws) -> ServerMessage {
    loop {
        let m = tokio::time::timeout(Duration::from_secs(30), ws.next()).await.expect("message in time").unwrap().unwrap();
        if let Message::Text(t) = m {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn wait_for(ws: &mut Ws, pred: impl Fn(&ServerMessage) -> bool) -> ServerMessage {
    loop {
        let m = next_json(ws).await;
        if pred(&m) {
            return m;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn streams_frames_and_runs_a_clicked_trial() {
    let (addr, _stop) = start().await;
    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();

    // binary frames carry seq, t and a PNG
    let packet = loop {
        if let Message::Binary(b) = ws.next().await.unwrap().unwrap() {
            break b;
        }
    };
    let (seq, t, png) = decode_frame_packet(&packet).unwrap();
    assert!(seq >= 1 && t >= 0.0);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    // teleoperation is refused in autonomous mode
    ws.send(Message::text(r#"{"type":"teleop","axes":[1,0,0],"pedal":1}"#)).await.unwrap();
    let m = wait_for(&mut ws, |m| matches!(m, ServerMessage::Rejected { .. })).await;
    assert!(matches!(m, ServerMessage::Rejected { reason } if reason.contains("robot-assisted")));

    // an off-frame click is refused
    ws.send(Message::text(r#"{"type":"click_goal","px":[9000,10]}"#)).await.unwrap();
    wait_for(&mut ws, |m| matches!(m, ServerMessage::Rejected { .. })).await;

    let cfg = sandbox();
    let plan = plan_for_seed(&create_scene(&cfg.scene, SCENE).unwrap(), &cfg, TRIAL).unwrap();
    let click = serde_json::json!({"type": "click_goal", "px": plan.goal_px});
    ws.send(Message::text(click.to_string())).await.unwrap();

    let ev = wait_for(&mut ws, |m| matches!(m, ServerMessage::Event { .. })).await;
    assert!(matches!(ev, ServerMessage::Event { event: cannula_core::autonomy::SurgicalEvent::GoalClicked { .. }, .. }));

    // a second click after the goal is set is refused
    ws.send(Message::text(click.to_string())).await.unwrap();
    wait_for(&mut ws, |m| matches!(m, ServerMessage::Rejected { .. })).await;

    let done = wait_for(&mut ws, |m| matches!(m, ServerMessage::State(s) if s.metrics.is_some())).await;
    let ServerMessage::State(s) = done else { unreachable!() };
    assert_eq!(s.state, SurgicalState::Done);
    assert!(s.metrics.unwrap().success);

    let (status, body) = http_get(&addr, "/report").await;
    assert!(status.contains("200"), "{status}");
    let report: CampaignReport = serde_json::from_str(&body).unwrap();
    assert_eq!(report.aggregate.trials, 1);
    assert_eq!(report.aggregate.success_rate, 1.0);

    let (status, body) = http_get(&addr, "/health").await;
    assert!(status.contains("200") && body.contains("\"ok\""));

    // a new trial can be started once the last one ended
    ws.send(Message::text(r#"{"type":"start_trial","seed":77}"#)).await.unwrap();
    let m = wait_for(&mut ws, |m| matches!(m, ServerMessage::TrialStarted { .. })).await;
    assert!(matches!(m, ServerMessage::TrialStarted { trial_seed: 77, scene_seed: SCENE }));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn report_starts_empty() {
    let (addr, _stop) = start().await;
    let (status, body) = http_get(&addr, "/report").await;
    assert!(status.contains("200"));
    let report: CampaignReport = serde_json::from_str(&body).unwrap();
    assert_eq!(report.aggregate.trials, 0);
    assert!(report.trials.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_message_closes_the_socket() {
    let (addr, _stop) = start().await;
    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    ws.send(Message::text("{not json")).await.unwrap();
    let code = loop {
        match tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap() {
            Some(Ok(Message::Close(Some(frame)))) => break u16::from(frame.code),
            Some(Ok(_)) => continue,
            other => panic!("expected a close frame, got {other:?}"),
        }
    };
    assert_eq!(code, CLOSE_INVALID_PAYLOAD);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn robot_assisted_teleop_moves_the_needle() {
    let (addr, _stop) = start().await;
    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    ws.send(Message::text(r#"{"type":"set_mode","mode":"robot_assisted"}"#)).await.unwrap();
    ws.send(Message::text(r#"{"type":"teleop","axes":[1,0,0],"pedal":0}"#)).await.unwrap();
    let still = wait_for(&mut ws, |m| matches!(m, ServerMessage::State(s) if s.mode == cannula_core::autonomy::ControlMode::RobotAssisted)).await;
    let ServerMessage::State(still) = still else { unreachable!() };
    for _ in 0..10 {
        if let ServerMessage::State(s) = wait_for(&mut ws, |m| matches!(m, ServerMessage::State(_))).await {
            assert_eq!(s.tip_px_est, still.tip_px_est, "zero pedal gain moved the needle");
        }
    }
    ws.send(Message::text(r#"{"type":"teleop","axes":[1,0,0],"pedal":0.5}"#)).await.unwrap();
    let first = wait_for(&mut ws, |m| matches!(m, ServerMessage::State(_))).await;
    let ServerMessage::State(a) = first else { unreachable!() };
    let mut b = a.clone();
    for _ in 0..20 {
        if let ServerMessage::State(s) = wait_for(&mut ws, |m| matches!(m, ServerMessage::State(_))).await {
            b = s;
        }
    }
    let (pa, pb) = (a.tip_px_est.unwrap(), b.tip_px_est.unwrap());
    assert!(pb[0] > pa[0] + 1.0, "tip did not move right: {pa:?} -> {pb:?}");
    // clicking a goal is an autonomous-mode action
    ws.send(Message::text(r#"{"type":"click_goal","px":[100,100]}"#)).await.unwrap();
    wait_for(&mut ws, |m| matches!(m, ServerMessage::Rejected { .. })).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn clients_share_the_same_frames() {
    let (addr, _stop) = start_with(Duration::from_millis(30)).await;
    let (mut a, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let (mut b, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    async fn frames(ws: &mut Ws, n: usize) -> std::collections::BTreeMap<u64, Vec<u8>> {
        let mut out = std::collections::BTreeMap::new();
        while out.len() < n {
            if let Message::Binary(bytes) = ws.next().await.unwrap().unwrap() {
                let (seq, _, _) = decode_frame_packet(&bytes).unwrap();
                out.insert(seq, bytes.to_vec());
            }
        }
        out
    }
    let (fa, fb) = tokio::join!(frames(&mut a, 8), frames(&mut b, 8));
    let common: Vec<_> = fa.keys().filter(|k| fb.contains_key(k)).collect();
    assert!(!common.is_empty(), "no shared frames: {:?} vs {:?}", fa.keys(), fb.keys());
    for k in common {
        assert_eq!(fa[k], fb[k]);
    }
}
