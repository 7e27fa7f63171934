//! Episode records: tactile frames, phase-indicator actions and reward labels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Channels in one tactile frame.
pub const OBS_DIM: usize = 44;
/// Length of the one-hot phase vector.
pub const ACTION_DIM: usize = 3;
/// Number of discrete control decisions.
pub const NUM_DECISIONS: usize = 2;

/// Phases of the nominal plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    BeforeRotation,
    Rotation,
    Stopped,
}

impl Phase {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![0.0; ACTION_DIM];
        v[self.index()] = 1.0;
        v
    }

    /// Reads a one-hot phase row; anything else is rejected.
    pub fn from_one_hot(v: &[f64]) -> Option<Phase> {
        if v.len() != ACTION_DIM || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return None;
        }
        if v.iter().sum::<f64>() != 1.0 {
            return None;
        }
        match v.iter().position(|&x| x == 1.0)? {
            0 => Some(Phase::BeforeRotation),
            1 => Some(Phase::Rotation),
            _ => Some(Phase::Stopped),
        }
    }
}

/// The controller's choice at each step: keep executing the current phase or
/// shift to the stopped phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decision {
    Stay = 0,
    Advance = 1,
}

impl Decision {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Decision> {
        match i {
            0 => Some(Decision::Stay),
            1 => Some(Decision::Advance),
            _ => None,
        }
    }
}

/// Decision that turns phase vector `prev` into `next`.
///
/// Only entering the stopped phase counts as advancing; the automatic
/// before-rotation to rotation switch is part of executing the plan.
pub fn decision_between(prev: &[f64], next: &[f64]) -> Decision {
    let prev = Phase::from_one_hot(prev);
    let next = Phase::from_one_hot(next);
    if next == Some(Phase::Stopped) && prev != Some(Phase::Stopped) {
        Decision::Advance
    } else {
        Decision::Stay
    }
}

/// Phase vector that follows `current` when `chosen` is taken, given the
/// recorded successor. Used when exploring decisions the data did not take.
pub fn action_after(current: &[f64], recorded_next: &[f64], chosen: Decision) -> Vec<f64> {
    if decision_between(current, recorded_next) == chosen {
        recorded_next.to_vec()
    } else if chosen == Decision::Advance {
        Phase::Stopped.one_hot()
    } else {
        current.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HapticSequence {
    pub id: String,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub success: bool,
}

impl HapticSequence {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Checks lengths, bounds, one-hot actions and reward labels.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t < 2 {
            return Err(invalid(format!("sequence {}: length {t} < 2", self.id)));
        }
        if self.actions.len() != t || self.rewards.len() != t {
            return Err(invalid(format!(
                "sequence {}: {} observations, {} actions, {} rewards",
                self.id,
                t,
                self.actions.len(),
                self.rewards.len()
            )));
        }
        for (i, o) in self.observations.iter().enumerate() {
            if o.len() != OBS_DIM {
                return Err(invalid(format!("sequence {} step {i}: {} channels", self.id, o.len())));
            }
            if o.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(invalid(format!("sequence {} step {i}: observation outside [-1, 1]", self.id)));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if Phase::from_one_hot(a).is_none() {
                return Err(invalid(format!("sequence {} step {i}: action is not one-hot", self.id)));
            }
        }
        for (i, r) in self.rewards.iter().enumerate() {
            if ![-1.0, 0.0, 1.0].contains(r) {
                return Err(invalid(format!("sequence {} step {i}: reward {r}", self.id)));
            }
        }
        Ok(())
    }

    /// Decision recorded between steps `t` and `t + 1`.
    pub fn decision(&self, t: usize) -> Decision {
        decision_between(&self.actions[t], &self.actions[t + 1])
    }
}
