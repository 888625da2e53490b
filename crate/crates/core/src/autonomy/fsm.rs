//! Surgical workflow state machine.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurgicalState {
    AwaitGoal,
    NavigatePlanar,
    LowerZ,
    InsertAxial,
    Hold,
    Retract,
    Done,
    Aborted,
}

impl SurgicalState {
    pub const ALL: [SurgicalState; 8] = [
        SurgicalState::AwaitGoal,
        SurgicalState::NavigatePlanar,
        SurgicalState::LowerZ,
        SurgicalState::InsertAxial,
        SurgicalState::Hold,
        SurgicalState::Retract,
        SurgicalState::Done,
        SurgicalState::Aborted,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, SurgicalState::Done | SurgicalState::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurgicalEvent {
    GoalClicked { px: [f64; 2] },
    AlignedXY,
    ContactDetected,
    PunctureDetected,
    HoldElapsed,
    RetractComplete,
    TrackingLost,
    Abort,
}

impl SurgicalEvent {
    /// One representative of every event kind.
    pub const KINDS: [SurgicalEvent; 8] = [
        SurgicalEvent::GoalClicked { px: [0.0, 0.0] },
        SurgicalEvent::AlignedXY,
        SurgicalEvent::ContactDetected,
        SurgicalEvent::PunctureDetected,
        SurgicalEvent::HoldElapsed,
        SurgicalEvent::RetractComplete,
        SurgicalEvent::TrackingLost,
        SurgicalEvent::Abort,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SurgicalEvent::GoalClicked { .. } => "GoalClicked",
            SurgicalEvent::AlignedXY => "AlignedXY",
            SurgicalEvent::ContactDetected => "ContactDetected",
            SurgicalEvent::PunctureDetected => "PunctureDetected",
            SurgicalEvent::HoldElapsed => "HoldElapsed",
            SurgicalEvent::RetractComplete => "RetractComplete",
            SurgicalEvent::TrackingLost => "TrackingLost",
            SurgicalEvent::Abort => "Abort",
        }
    }
}

/// Total transition function. Pairs outside the workflow leave the state unchanged.
pub fn next_state(s: SurgicalState, e: SurgicalEvent) -> SurgicalState {
    use SurgicalEvent as E;
    use SurgicalState as S;
    match (s, e) {
        (S::Done | S::Aborted, _) => s,
        (_, E::TrackingLost | E::Abort) => S::Aborted,
        (S::AwaitGoal, E::GoalClicked { .. }) => S::NavigatePlanar,
        (S::NavigatePlanar, E::AlignedXY) => S::LowerZ,
        (S::LowerZ, E::ContactDetected) => S::InsertAxial,
        (S::InsertAxial, E::PunctureDetected) => S::Hold,
        (S::Hold, E::HoldElapsed) => S::Retract,
        (S::Retract, E::RetractComplete) => S::Done,
        _ => s,
    }
}
