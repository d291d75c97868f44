use serde::{Deserialize, Serialize};

use super::plan::{GuidanceTrial, ThresholdTrial, TrialSpec};
use super::SessionError;
use crate::gaze::{completion_time, Point2, SearchOutcome};
use crate::psychometry::{PerceptState, TrialResponse};

pub const LIKERT_RANGE: (u8, u8) = (1, 7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Likert {
    pub naturalness: u8,
    pub obtrusiveness: u8,
}

impl Likert {
    pub fn new(naturalness: u8, obtrusiveness: u8) -> Result<Self, SessionError> {
        for (field, value) in [("naturalness", naturalness), ("obtrusiveness", obtrusiveness)] {
            if !(LIKERT_RANGE.0..=LIKERT_RANGE.1).contains(&value) {
                return Err(SessionError::InvalidLikert { field, value });
            }
        }
        Ok(Self { naturalness, obtrusiveness })
    }
}

/// Phase timestamps in seconds on the service clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixation_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_s: Option<f64>,
    /// Onset of the vibrating stimulus (search onset for guidance trials).
    pub stimulus_s: f64,
    pub response_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questionnaire_s: Option<f64>,
}

impl PhaseTimes {
    pub fn is_strictly_ordered(&self) -> bool {
        let seq: Vec<f64> = [
            self.fixation_s,
            self.target_s,
            Some(self.stimulus_s),
            Some(self.response_s),
            self.questionnaire_s,
        ]
        .into_iter()
        .flatten()
        .collect();
        seq.iter().all(|t| t.is_finite()) && seq.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrialOutcome {
    Threshold {
        spec: ThresholdTrial,
        /// Calibrated weight used for the pair.
        w: f64,
        state: PerceptState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        location_chosen: Option<u8>,
    },
    Guidance {
        spec: GuidanceTrial,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        click: Option<Point2>,
        correct: bool,
        timed_out: bool,
        completion_time_s: f64,
        likert: Likert,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u32,
    pub times: PhaseTimes,
    pub outcome: TrialOutcome,
}

impl TrialRecord {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !self.times.is_strictly_ordered() {
            return Err(SessionError::InvalidRecord(format!("trial {}: timestamps not strictly ordered", self.trial)));
        }
        if let TrialOutcome::Guidance { likert, .. } = &self.outcome {
            Likert::new(likert.naturalness, likert.obtrusiveness)?;
        }
        Ok(())
    }

    pub fn spec(&self) -> TrialSpec {
        match &self.outcome {
            TrialOutcome::Threshold { spec, .. } => TrialSpec::Threshold(*spec),
            TrialOutcome::Guidance { spec, .. } => TrialSpec::Guidance(*spec),
        }
    }

    /// Threshold trials as input for the psychometric fit.
    pub fn to_response(&self, participant: &str) -> Option<TrialResponse> {
        match &self.outcome {
            TrialOutcome::Threshold {
                spec,
                state,
                location_chosen,
                ..
            } => Some(TrialResponse {
                r: spec.r,
                d_mm: spec.d_mm,
                l_mm: spec.l_mm,
                state: *state,
                location_chosen: *location_chosen,
                location_actual: spec.vibrating_index,
                participant: participant.to_string(),
                latency_s: self.times.response_s - self.times.stimulus_s,
            }),
            TrialOutcome::Guidance { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    /// Threshold stimulus on screen, waiting for the judgment.
    Presenting,
    Fixation,
    Target,
    Search,
    Questionnaire,
}

/// ROI disk in image pixels, used to score clicks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiDisk {
    pub center: Point2,
    pub radius_px: f64,
}

impl RoiDisk {
    pub fn contains(&self, p: Point2) -> bool {
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        dx * dx + dy * dy <= self.radius_px * self.radius_px
    }
}

/// Trial timing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialTiming {
    pub fixation_s: f64,
    pub search_limit_s: f64,
}

/// A trial in progress. Guidance trials run Fixation, Target, Search,
/// Questionnaire in that order; threshold trials only Presenting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveTrial {
    pub index: u32,
    pub spec: TrialSpec,
    pub phase: TrialPhase,
    pub fixation_s: Option<f64>,
    pub target_s: Option<f64>,
    pub stimulus_s: Option<f64>,
    pub response_s: Option<f64>,
    pub click: Option<Point2>,
    pub correct: bool,
    pub timed_out: bool,
}

fn violation(expected: &str, phase: TrialPhase) -> SessionError {
    SessionError::SequenceViolation(format!("{expected} not accepted during {phase:?}"))
}

impl ActiveTrial {
    pub fn begin(index: u32, spec: TrialSpec, now: f64) -> Self {
        let guidance = matches!(spec, TrialSpec::Guidance(_));
        Self {
            index,
            spec,
            phase: if guidance { TrialPhase::Fixation } else { TrialPhase::Presenting },
            fixation_s: guidance.then_some(now),
            target_s: None,
            stimulus_s: (!guidance).then_some(now),
            response_s: None,
            click: None,
            correct: false,
            timed_out: false,
        }
    }

    /// Applies the transitions that happen on their own: end of fixation
    /// and the search time limit. Transition times are the scheduled ones,
    /// not `now`.
    pub fn tick(&mut self, now: f64, timing: &TrialTiming) {
        if self.phase == TrialPhase::Fixation {
            let due = self.fixation_s.unwrap_or(now) + timing.fixation_s;
            if now >= due {
                self.target_s = Some(due);
                self.phase = TrialPhase::Target;
            }
        }
        if self.phase == TrialPhase::Search {
            let due = self.stimulus_s.unwrap_or(now) + timing.search_limit_s;
            if now >= due {
                self.response_s = Some(due);
                self.timed_out = true;
                self.correct = false;
                self.phase = TrialPhase::Questionnaire;
            }
        }
    }

    /// Participant confirms the target preview.
    pub fn advance(&mut self, now: f64) -> Result<(), SessionError> {
        match self.phase {
            TrialPhase::Target if self.target_s.is_some_and(|t| now > t) => {
                self.stimulus_s = Some(now);
                self.phase = TrialPhase::Search;
                Ok(())
            }
            phase => Err(violation("advance", phase)),
        }
    }

    pub fn respond_threshold(
        &mut self,
        now: f64,
        state: PerceptState,
        location_chosen: Option<u8>,
        w: f64,
    ) -> Result<TrialRecord, SessionError> {
        let (TrialPhase::Presenting, TrialSpec::Threshold(spec)) = (self.phase, self.spec) else {
            return Err(violation("a perceptual judgment", self.phase));
        };
        match (spec.l_mm > 0, location_chosen) {
            (true, Some(i)) if (1..=4).contains(&i) => {}
            (false, None) => {}
            (true, _) => {
                return Err(SessionError::InvalidResponse("peripheral trials need a location in 1..=4".into()));
            }
            (false, Some(_)) => {
                return Err(SessionError::InvalidResponse("central trials take no location".into()));
            }
        }
        let record = TrialRecord {
            trial: self.index,
            times: PhaseTimes {
                fixation_s: None,
                target_s: None,
                stimulus_s: self.stimulus_s.unwrap_or(now),
                response_s: now,
                questionnaire_s: None,
            },
            outcome: TrialOutcome::Threshold {
                spec,
                w,
                state,
                location_chosen,
            },
        };
        record.validate()?;
        Ok(record)
    }

    pub fn click(&mut self, now: f64, p: Point2, roi: &RoiDisk) -> Result<(), SessionError> {
        if self.phase != TrialPhase::Search {
            return Err(violation("a search click", self.phase));
        }
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(SessionError::InvalidResponse("click coordinates must be finite".into()));
        }
        self.click = Some(p);
        self.correct = roi.contains(p);
        self.response_s = Some(now);
        self.phase = TrialPhase::Questionnaire;
        Ok(())
    }

    pub fn questionnaire(&mut self, now: f64, likert: Likert, timing: &TrialTiming) -> Result<TrialRecord, SessionError> {
        let (TrialPhase::Questionnaire, TrialSpec::Guidance(spec)) = (self.phase, self.spec) else {
            return Err(violation("questionnaire answers", self.phase));
        };
        let stimulus_s = self.stimulus_s.unwrap_or(now);
        let response_s = self.response_s.unwrap_or(now);
        let latency = (!self.timed_out).then_some(response_s - stimulus_s);
        let outcome = SearchOutcome {
            correct: self.correct,
            latency_s: latency,
        };
        let record = TrialRecord {
            trial: self.index,
            times: PhaseTimes {
                fixation_s: self.fixation_s,
                target_s: self.target_s,
                stimulus_s,
                response_s,
                questionnaire_s: Some(now),
            },
            outcome: TrialOutcome::Guidance {
                spec,
                click: self.click,
                correct: self.correct,
                timed_out: self.timed_out,
                completion_time_s: completion_time(&outcome, timing.search_limit_s),
                likert,
            },
        };
        record.validate()?;
        Ok(record)
    }
}
