//! Clip datasets, Adam training and clip-level evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossParts, ModelShape, PunctureModel, Sequence};
use crate::error::{Error, Result};

/// Subsampled insertion frames cropped around the tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PunctureClip {
    pub side: usize,
    pub crops: Vec<Vec<u8>>,
    pub labels: Vec<bool>,
    pub t: Vec<f64>,
    pub robot_z: Vec<f64>,
    /// Robot z on the first full-rate frame where the vein was punctured.
    pub puncture_robot_z: Option<f64>,
}

impl PunctureClip {
    /// Index of the first subsampled frame labelled punctured.
    pub fn puncture_index(&self) -> Option<usize> {
        self.labels.iter().position(|&l| l)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.crops.len();
        if n == 0 || self.labels.len() != n || self.t.len() != n || self.robot_z.len() != n {
            return Err(Error::Contract("clip fields have inconsistent lengths".into()));
        }
        if self.crops.iter().any(|c| c.len() != self.side * self.side) {
            return Err(Error::Contract("clip crop has the wrong size".into()));
        }
        Ok(())
    }

    pub fn to_sequence(&self) -> Sequence {
        Sequence {
            frames: self.crops.iter().map(|c| normalize(c)).collect(),
            labels: self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
        }
    }
}

pub fn normalize(crop: &[u8]) -> Vec<f64> {
    crop.iter().map(|&v| v as f64 / 255.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub w_rec: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            batch_size: 8,
            learning_rate: 3e-3,
            w_rec: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<LossParts>,
    pub clips: usize,
    pub frames: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Mini-batch Adam on the per-clip sequence loss.
pub fn train(shape: ModelShape, clips: &[PunctureClip], cfg: &TrainConfig) -> Result<(PunctureModel, TrainReport)> {
    if clips.is_empty() {
        return Err(Error::Training("no training clips".into()));
    }
    for c in clips {
        c.validate()?;
        if c.side != shape.input_side {
            return Err(Error::Training(format!("clip side {} differs from model input {}", c.side, shape.input_side)));
        }
    }
    let positives = clips.iter().flat_map(|c| &c.labels).filter(|&&l| l).count();
    let frames: usize = clips.iter().map(|c| c.labels.len()).sum();
    if positives == 0 || positives == frames {
        return Err(Error::Training("training frames are all of one class".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size, epochs and learning rate must be positive".into()));
    }

    let mut model = PunctureModel::new(shape, cfg.seed)?;
    let seqs: Vec<Sequence> = clips.iter().map(PunctureClip::to_sequence).collect();
    let n = model.param_count();
    let mut adam = Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts { total: 0.0, bce: 0.0, reconstruction: 0.0 };
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; n];
            for &i in batch {
                let (l, g) = model.loss_and_grad(&seqs[i], cfg.w_rec)?;
                if !l.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training(format!("non-finite loss or gradient in epoch {epoch}")));
                }
                sum.total += l.total;
                sum.bce += l.bce;
                sum.reconstruction += l.reconstruction;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / batch.len() as f64);
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    grad.iter_mut().for_each(|v| *v *= clip / norm);
                }
            }
            adam.step(&mut model.params, &grad, cfg);
        }
        let k = seqs.len() as f64;
        let mean = LossParts { total: sum.total / k, bce: sum.bce / k, reconstruction: sum.reconstruction / k };
        log::debug!("epoch {epoch}: loss {:.4} (bce {:.4}, rec {:.4})", mean.total, mean.bce, mean.reconstruction);
        epoch_losses.push(mean);
    }
    if model.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("parameters diverged".into()));
    }
    Ok((model, TrainReport { epoch_losses, clips: clips.len(), frames }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    /// A positive clip is correct when detection lands at most this many
    /// subsampled frames after the first punctured one.
    pub tolerance_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, tolerance_frames: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOutcome {
    pub detection: Option<usize>,
    pub puncture: Option<usize>,
    pub correct: bool,
    /// Robot z travelled between the puncture and the detection.
    pub delay_um: Option<f64>,
}

/// Positive clips must fire within `[k, k + tolerance]`; negative clips must not fire.
pub fn clip_correct(puncture: Option<usize>, detection: Option<usize>, tolerance: usize) -> bool {
    match (puncture, detection) {
        (None, d) => d.is_none(),
        (Some(k), Some(d)) => d >= k && d - k <= tolerance,
        (Some(_), None) => false,
    }
}

pub fn evaluate_clip(model: &PunctureModel, clip: &PunctureClip, cfg: &EvalConfig) -> Result<ClipOutcome> {
    clip.validate()?;
    let probs = model.predict(&clip.to_sequence().frames)?;
    let detection = probs.iter().position(|&p| p >= cfg.threshold);
    let puncture = clip.puncture_index();
    let correct = clip_correct(puncture, detection, cfg.tolerance_frames);
    let delay_um = match (clip.puncture_robot_z, detection, puncture) {
        (Some(z), Some(d), Some(k)) if d >= k => Some(z - clip.robot_z[d]),
        _ => None,
    };
    Ok(ClipOutcome { detection, puncture, correct, delay_um })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvaluation {
    pub clips: usize,
    pub accuracy: f64,
    /// Share of puncture clips detected within the tolerance window.
    pub within_tolerance: f64,
    /// Share of clips without puncture that fired anyway.
    pub false_alarms: f64,
    pub mean_delay_um: f64,
    pub outcomes: Vec<ClipOutcome>,
}

pub fn evaluate(model: &PunctureModel, clips: &[PunctureClip], cfg: &EvalConfig) -> Result<DetectorEvaluation> {
    if clips.is_empty() {
        return Err(Error::Contract("no clips to evaluate".into()));
    }
    let outcomes: Vec<ClipOutcome> = clips.iter().map(|c| evaluate_clip(model, c, cfg)).collect::<Result<_>>()?;
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let pos: Vec<&ClipOutcome> = outcomes.iter().filter(|o| o.puncture.is_some()).collect();
    let neg = outcomes.len() - pos.len();
    let delays: Vec<f64> = pos.iter().filter(|o| o.correct).filter_map(|o| o.delay_um).collect();
    Ok(DetectorEvaluation {
        clips: outcomes.len(),
        accuracy: rate(outcomes.iter().filter(|o| o.correct).count(), outcomes.len()),
        within_tolerance: rate(pos.iter().filter(|o| o.correct).count(), pos.len()),
        false_alarms: rate(outcomes.iter().filter(|o| o.puncture.is_none() && o.detection.is_some()).count(), neg),
        mean_delay_um: if delays.is_empty() { f64::NAN } else { delays.iter().sum::<f64>() / delays.len() as f64 },
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::puncture::Temporal;

    /// Synthetic clips: a bright blob appears once punctured.
    fn toy_clip(len: usize, puncture: Option<usize>, phase: u8) -> PunctureClip {
        let side = 8;
        let crops = (0..len)
            .map(|t| {
                let on = puncture.is_some_and(|k| t >= k);
                (0..side * side)
                    .map(|i| {
                        let base = 60u8.wrapping_add(((i as u8).wrapping_mul(37) ^ phase) % 40);
                        if on && (i % side) >= 4 && (i / side) >= 4 { 230 } else { base }
                    })
                    .collect()
            })
            .collect();
        PunctureClip {
            side,
            crops,
            labels: (0..len).map(|t| puncture.is_some_and(|k| t >= k)).collect(),
            t: (0..len).map(|t| t as f64 / 7.0).collect(),
            robot_z: (0..len).map(|t| 100.0 - 8.0 * t as f64).collect(),
            puncture_robot_z: puncture.map(|k| 100.0 - 8.0 * k as f64 + 3.0),
        }
    }

    fn shape() -> ModelShape {
        ModelShape { input_side: 8, enc_channels: vec![3, 4], feature_dim: 6, hidden_dim: 4, temporal: Temporal::Gru, decoder: true }
    }

    #[test]
    fn rejects_one_class_data() {
        let clips = vec![toy_clip(5, None, 1), toy_clip(6, None, 2)];
        assert!(matches!(train(shape(), &clips, &TrainConfig::default()), Err(Error::Training(_))));
    }

    #[test]
    fn learns_a_visible_event() {
        let clips: Vec<PunctureClip> = (0..24)
            .map(|i| toy_clip(8, if i % 3 == 0 { None } else { Some(2 + i % 4) }, i as u8))
            .collect();
        let cfg = TrainConfig { epochs: 40, learning_rate: 1e-2, ..TrainConfig::default() };
        let (model, report) = train(shape(), &clips, &cfg).unwrap();
        assert!(report.epoch_losses.last().unwrap().total < report.epoch_losses[0].total);
        let eval = evaluate(&model, &clips, &EvalConfig::default()).unwrap();
        assert!(eval.accuracy >= 0.9, "accuracy {}", eval.accuracy);
        assert_eq!(eval.false_alarms, 0.0);
        // same seed, same model
        let (again, _) = train(shape(), &clips, &cfg).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn clip_outcome_rules() {
        assert!(clip_correct(Some(3), Some(3), 2));
        assert!(clip_correct(Some(3), Some(5), 2));
        assert!(!clip_correct(Some(3), Some(6), 2));
        assert!(!clip_correct(Some(3), Some(1), 2));
        assert!(!clip_correct(Some(3), None, 2));
        assert!(clip_correct(None, None, 2));
        assert!(!clip_correct(None, Some(0), 2));
        assert_eq!(toy_clip(8, Some(3), 0).puncture_index(), Some(3));
    }
}
