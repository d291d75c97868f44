//! JSON bodies exchanged with the participant UI. Every body carries
//! `version`; requests with another version are refused.

use serde::{Deserialize, Serialize};

use super::calibration::{CalibrationInput, FittedWeight, StepOutcome};
use super::plan::{StudyKind, TrialSpec};
use super::{SessionError, SessionPhase};
use crate::gaze::Point2;
use crate::psychometry::PerceptState;

pub const API_VERSION: u32 = 1;

pub fn check_version(version: u32) -> Result<(), SessionError> {
    if version == API_VERSION {
        Ok(())
    } else {
        Err(SessionError::UnsupportedVersion {
            found: version.to_string(),
            expected: API_VERSION.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusRef {
    pub id: String,
    /// Relative URLs of the two PNG frames.
    pub frame_a: String,
    pub frame_b: String,
}

impl StimulusRef {
    pub fn new(id: String) -> Self {
        Self {
            frame_a: format!("/stimulus/{id}/a"),
            frame_b: format!("/stimulus/{id}/b"),
            id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationView {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<u32>,
    pub w: f64,
    pub w_steps: i32,
    pub clamped: bool,
    pub fits: Vec<FittedWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStateView {
    pub participant: String,
    pub kind: StudyKind,
    pub seed: u64,
    pub phase: SessionPhase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<u32>,
    pub completed: usize,
    pub total: usize,
    pub calibration: CalibrationView,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus: Option<StimulusRef>,
}

/// `GET /session/state`. `session` is absent before the first start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionStateView>,
}

/// `POST /session/start`. With `resume`, an existing log for the same
/// participant and study is reopened instead of refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRequest {
    pub version: u32,
    pub participant: String,
    pub kind: StudyKind,
    pub seed: u64,
    #[serde(default)]
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartResponse {
    pub version: u32,
    pub session: SessionStateView,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// `GET /trial/current`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentTrialView {
    pub version: u32,
    pub trial: u32,
    pub phase: SessionPhase,
    pub spec: TrialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus: Option<StimulusRef>,
    pub fixation_s: f64,
    pub search_limit_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponsePayload {
    /// Threshold trial judgment; `location` (1..=4) only for peripheral trials.
    Threshold {
        state: PerceptState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        location: Option<u8>,
    },
    /// Guidance search click in image pixel coordinates.
    Click { x: f64, y: f64 },
}

impl ResponsePayload {
    pub fn click_point(&self) -> Option<Point2> {
        match *self {
            ResponsePayload::Click { x, y } => Some(Point2::new(x, y)),
            ResponsePayload::Threshold { .. } => None,
        }
    }
}

/// `POST /trial/response`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseRequest {
    pub version: u32,
    pub response: ResponsePayload,
}

/// `POST /calibration/step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStepRequest {
    pub version: u32,
    pub input: CalibrationInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStepResponse {
    pub version: u32,
    pub outcome: StepOutcome,
    pub session: SessionStateView,
}

/// `POST /questionnaire`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireRequest {
    pub version: u32,
    pub naturalness: u8,
    pub obtrusiveness: u8,
}

/// `POST /trial/advance`: leaves a break or confirms the target preview.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub version: u32,
}

/// Reply to the trial-level POSTs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResponse {
    pub version: u32,
    pub session: SessionStateView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub version: u32,
    /// Stable machine-readable kind, e.g. `sequence_violation`.
    pub error: String,
    pub message: String,
}

impl From<&SessionError> for ErrorBody {
    fn from(e: &SessionError) -> Self {
        Self {
            version: API_VERSION,
            error: e.code().to_string(),
            message: e.to_string(),
        }
    }
}
