use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::psychometry::{UserCalibration, CALIBRATION_RATIOS};

pub const W_STEP: f64 = 0.02;
/// Largest step count from 0.5 that stays strictly inside (0.01, 0.99).
pub const MAX_W_STEPS: i32 = 24;
pub const INVERTED_FLASH_MS: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationInput {
    Increase,
    Decrease,
    Accept,
}

/// Weight on the 0.02 grid around 0.5, computed from integers so that
/// equal step counts always give bit-identical weights.
pub fn weight_for_steps(steps: i32) -> f64 {
    f64::from(50 + 2 * steps) / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedWeight {
    pub r: u32,
    pub w_steps: i32,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Position in the descending ratio sequence.
    pub ratio_index: usize,
    pub w_steps: i32,
    /// Set when the last step was refused at the weight bound.
    pub clamped: bool,
    pub fits: Vec<FittedWeight>,
}

impl Default for CalibrationState {
    fn default() -> Self {
        Self::new()
    }
}

impl CalibrationState {
    pub fn new() -> Self {
        Self {
            ratio_index: 0,
            w_steps: 0,
            clamped: false,
            fits: Vec::new(),
        }
    }

    pub fn current_r(&self) -> Option<u32> {
        CALIBRATION_RATIOS.get(self.ratio_index).copied()
    }

    pub fn w(&self) -> f64 {
        weight_for_steps(self.w_steps)
    }

    pub fn is_complete(&self) -> bool {
        self.ratio_index >= CALIBRATION_RATIOS.len()
    }

    /// Records an accepted fit read back from storage.
    pub fn replay_fit(&mut self, fit: FittedWeight) -> Result<(), SessionError> {
        if self.current_r() != Some(fit.r) || fit.w != weight_for_steps(fit.w_steps) || fit.w_steps.abs() > MAX_W_STEPS {
            return Err(SessionError::SequenceViolation(format!(
                "calibration fit at r={} does not continue the sequence",
                fit.r
            )));
        }
        self.fits.push(fit);
        self.ratio_index += 1;
        self.w_steps = 0;
        self.clamped = false;
        Ok(())
    }

    pub fn to_user_calibration(&self, participant: &str) -> UserCalibration {
        UserCalibration {
            participant: participant.to_string(),
            fits: self.fits.iter().map(|f| (f.r, f.w)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub state: CalibrationState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<FittedWeight>,
    /// Duration of the inverted frame to show before the next ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverted_flash_ms: Option<u32>,
    pub complete: bool,
}

pub fn step_calibration(state: &CalibrationState, input: CalibrationInput) -> Result<StepOutcome, SessionError> {
    let Some(r) = state.current_r() else {
        return Err(SessionError::SequenceViolation("calibration already complete".into()));
    };
    let mut next = state.clone();
    let mut accepted = None;
    match input {
        CalibrationInput::Increase | CalibrationInput::Decrease => {
            let delta = if input == CalibrationInput::Increase { 1 } else { -1 };
            let target = next.w_steps + delta;
            next.clamped = target.abs() > MAX_W_STEPS;
            if !next.clamped {
                next.w_steps = target;
            }
        }
        CalibrationInput::Accept => {
            let fit = FittedWeight {
                r,
                w_steps: next.w_steps,
                w: next.w(),
            };
            next.replay_fit(fit)?;
            accepted = Some(fit);
        }
    }
    let complete = next.is_complete();
    Ok(StepOutcome {
        state: next,
        accepted,
        inverted_flash_ms: accepted.map(|_| INVERTED_FLASH_MS),
        complete,
    })
}
