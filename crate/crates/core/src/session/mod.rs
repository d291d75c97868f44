//! Experiment protocol engine: calibration, threshold and guidance trial
//! sequencing, phase timing, and the persistent session log. The HTTP layer
//! lives in the service crate and drives a [`Session`] through its methods.

pub mod api;
pub mod calibration;
pub mod clock;
pub mod config;
pub mod log;
pub mod plan;
pub mod render;
pub mod trial;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psychometry::{interpolate_weight, PsychometryError, UserCalibration};
use crate::stimulus::StimulusError;
use api::{CalibrationView, ResponsePayload, SessionStateView, StimulusRef};
use calibration::{step_calibration, CalibrationInput, CalibrationState, FittedWeight, StepOutcome};
use config::ProtocolConfig;
use log::{LogEntry, SessionHeader, SessionLog};
use plan::{plan_study, ProtocolPlan, TrialSpec};
use render::StimulusId;
use trial::{ActiveTrial, Likert, RoiDisk, TrialPhase, TrialRecord, TrialTiming};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("sequence violation: {0}")]
    SequenceViolation(String),
    #[error("{field} rating {value} outside 1..=7")]
    InvalidLikert { field: &'static str, value: u8 },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("duplicate record: {0}")]
    DuplicateRecord(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("session log line {line} is damaged: {reason}")]
    LogCorrupt { line: usize, reason: String },
    #[error("unsupported version {found}, expected {expected}")]
    UnsupportedVersion { found: String, expected: String },
    #[error("unknown stimulus {0}")]
    UnknownStimulus(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Stimulus(#[from] StimulusError),
    #[error(transparent)]
    Psychometry(#[from] PsychometryError),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::SequenceViolation(_) => "sequence_violation",
            SessionError::InvalidLikert { .. } => "invalid_likert",
            SessionError::InvalidResponse(_) => "invalid_response",
            SessionError::InvalidRecord(_) => "invalid_record",
            SessionError::DuplicateRecord(_) => "duplicate_record",
            SessionError::StorageFailure(_) => "storage_failure",
            SessionError::LogCorrupt { .. } => "log_corrupt",
            SessionError::UnsupportedVersion { .. } => "unsupported_version",
            SessionError::UnknownStimulus(_) => "unknown_stimulus",
            SessionError::Config(_) => "config",
            SessionError::Stimulus(_) => "stimulus",
            SessionError::Psychometry(_) => "psychometry",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Calibration,
    InvertedFlash,
    Break,
    /// Threshold stimulus awaiting a judgment.
    Presenting,
    FixationCross,
    TargetPreview,
    Search,
    Questionnaire,
    Complete,
}

/// Per-deployment inputs the engine needs besides the log.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionEnv {
    pub protocol: ProtocolConfig,
    /// Click targets of the guidance image sets, by set index.
    pub rois: Vec<RoiDisk>,
}

impl SessionEnv {
    pub fn new(protocol: ProtocolConfig) -> Self {
        Self {
            protocol,
            rois: Vec::new(),
        }
    }

    fn timing(&self) -> TrialTiming {
        TrialTiming {
            fixation_s: self.protocol.fixation_s,
            search_limit_s: self.protocol.search_limit_s,
        }
    }
}

/// The persisted part of a session; equal snapshots mean equal sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSnapshot {
    pub header: SessionHeader,
    pub fits: Vec<FittedWeight>,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug)]
pub struct Session {
    header: SessionHeader,
    plan: ProtocolPlan,
    calibration: CalibrationState,
    records: Vec<TrialRecord>,
    active: Option<ActiveTrial>,
    on_break: bool,
    flash_until: Option<f64>,
    env: SessionEnv,
    log: Option<SessionLog>,
}

impl Session {
    /// New session; with `log_path` every record is persisted there.
    pub fn start(header: SessionHeader, env: SessionEnv, log_path: Option<&Path>) -> Result<Self, SessionError> {
        if header.kind == plan::StudyKind::Guidance && env.rois.len() < header.image_sets as usize {
            return Err(SessionError::Config(format!(
                "guidance study needs {} image sets, {} configured",
                header.image_sets,
                env.rois.len()
            )));
        }
        let log = log_path.map(|p| SessionLog::create(p, &header)).transpose()?;
        Ok(Self::empty(header, env, log))
    }

    fn empty(header: SessionHeader, env: SessionEnv, log: Option<SessionLog>) -> Self {
        Self {
            plan: plan_study(header.kind, header.seed, header.image_sets),
            header,
            calibration: CalibrationState::new(),
            records: Vec::new(),
            active: None,
            on_break: false,
            flash_until: None,
            env,
            log,
        }
    }

    /// Reopens a log. A session interrupted mid-study resumes on a break
    /// screen; the interrupted trial is rerun from its start.
    pub fn resume(path: &Path, env: SessionEnv) -> Result<(Self, Vec<String>), SessionError> {
        let (log, loaded) = SessionLog::open(path)?;
        let mut session = Self::replay(loaded.header, &loaded.entries, env)?;
        session.log = Some(log);
        Ok((session, loaded.warnings))
    }

    /// Rebuilds the in-memory session from log entries.
    pub fn replay(header: SessionHeader, entries: &[LogEntry], env: SessionEnv) -> Result<Self, SessionError> {
        let mut s = Self::empty(header, env, None);
        for e in entries {
            match e {
                LogEntry::CalibrationFit(f) => s.calibration.replay_fit(*f)?,
                LogEntry::Trial(t) => {
                    if !s.calibration.is_complete() {
                        return Err(SessionError::SequenceViolation("trial record before calibration finished".into()));
                    }
                    if t.trial as usize != s.records.len() || s.plan.trials.get(t.trial as usize) != Some(&t.spec()) {
                        return Err(SessionError::SequenceViolation(format!("trial {} does not match the plan", t.trial)));
                    }
                    t.validate()?;
                    s.records.push(t.clone());
                }
            }
        }
        s.on_break = s.calibration.is_complete() && s.records.len() < s.plan.len();
        Ok(s)
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn plan(&self) -> &ProtocolPlan {
        &self.plan
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn calibration(&self) -> &CalibrationState {
        &self.calibration
    }

    pub fn env(&self) -> &SessionEnv {
        &self.env
    }

    pub fn active_trial(&self) -> Option<&ActiveTrial> {
        self.active.as_ref()
    }

    pub fn user_calibration(&self) -> Option<UserCalibration> {
        self.calibration
            .is_complete()
            .then(|| self.calibration.to_user_calibration(&self.header.participant))
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            header: self.header.clone(),
            fits: self.calibration.fits.clone(),
            records: self.records.clone(),
        }
    }

    /// Entries in log order.
    pub fn log_entries(&self) -> Vec<LogEntry> {
        self.calibration
            .fits
            .iter()
            .map(|f| LogEntry::CalibrationFit(*f))
            .chain(self.records.iter().cloned().map(LogEntry::Trial))
            .collect()
    }

    fn begin_next(&mut self, now: f64) {
        let index = self.records.len();
        self.active = self
            .plan
            .trials
            .get(index)
            .map(|spec| ActiveTrial::begin(index as u32, *spec, now));
    }

    /// Applies time-driven transitions up to `now`.
    pub fn tick(&mut self, now: f64) {
        if let Some(until) = self.flash_until {
            if now < until {
                return;
            }
            self.flash_until = None;
            if self.calibration.is_complete() && self.records.is_empty() && self.active.is_none() {
                self.begin_next(until);
            }
        }
        let timing = self.env.timing();
        if let Some(a) = self.active.as_mut() {
            a.tick(now, &timing);
        }
    }

    /// Phase as of the last tick.
    pub fn phase(&self) -> SessionPhase {
        if self.flash_until.is_some() {
            return SessionPhase::InvertedFlash;
        }
        if !self.calibration.is_complete() {
            return SessionPhase::Calibration;
        }
        if self.records.len() >= self.plan.len() {
            return SessionPhase::Complete;
        }
        if self.on_break {
            return SessionPhase::Break;
        }
        match self.active.as_ref().map(|a| a.phase) {
            Some(TrialPhase::Presenting) => SessionPhase::Presenting,
            Some(TrialPhase::Fixation) => SessionPhase::FixationCross,
            Some(TrialPhase::Target) => SessionPhase::TargetPreview,
            Some(TrialPhase::Search) => SessionPhase::Search,
            Some(TrialPhase::Questionnaire) => SessionPhase::Questionnaire,
            None => SessionPhase::Break,
        }
    }

    /// Stimulus the UI should show in the current phase.
    pub fn current_stimulus(&self) -> Option<StimulusId> {
        let trial = self.active.as_ref().map(|a| a.index);
        match self.phase() {
            SessionPhase::Calibration => self.calibration.current_r().map(|r| StimulusId::Calibration {
                r,
                w_steps: self.calibration.w_steps,
            }),
            SessionPhase::InvertedFlash => self.calibration.fits.last().map(|f| StimulusId::Inverted {
                r: f.r,
                w_steps: f.w_steps,
            }),
            SessionPhase::Presenting => trial.map(|trial| StimulusId::Threshold { trial }),
            SessionPhase::FixationCross => Some(StimulusId::Fixation),
            SessionPhase::TargetPreview => trial.map(|trial| StimulusId::Target { trial }),
            SessionPhase::Search => trial.map(|trial| StimulusId::Search { trial }),
            SessionPhase::Break | SessionPhase::Questionnaire | SessionPhase::Complete => None,
        }
    }

    pub fn state_view(&mut self, now: f64) -> SessionStateView {
        self.tick(now);
        SessionStateView {
            participant: self.header.participant.clone(),
            kind: self.header.kind,
            seed: self.header.seed,
            phase: self.phase(),
            trial: self.active.as_ref().map(|a| a.index),
            completed: self.records.len(),
            total: self.plan.len(),
            calibration: CalibrationView {
                r: self.calibration.current_r(),
                w: self.calibration.w(),
                w_steps: self.calibration.w_steps,
                clamped: self.calibration.clamped,
                fits: self.calibration.fits.clone(),
            },
            stimulus: self.current_stimulus().map(|id| StimulusRef::new(id.to_string())),
        }
    }

    fn expect_phase(&self, allowed: &[SessionPhase], what: &str) -> Result<(), SessionError> {
        let phase = self.phase();
        if allowed.contains(&phase) {
            Ok(())
        } else {
            Err(SessionError::SequenceViolation(format!("{what} not accepted during {phase:?}")))
        }
    }

    fn persist(&mut self, entry: &LogEntry) -> Result<(), SessionError> {
        match self.log.as_mut() {
            Some(log) => log.append(entry),
            None => Ok(()),
        }
    }

    pub fn calibration_step(&mut self, input: CalibrationInput, now: f64) -> Result<StepOutcome, SessionError> {
        self.tick(now);
        self.expect_phase(&[SessionPhase::Calibration], "calibration input")?;
        let outcome = step_calibration(&self.calibration, input)?;
        if let Some(fit) = outcome.accepted {
            self.persist(&LogEntry::CalibrationFit(fit))?;
            self.flash_until = Some(now + f64::from(self.env.protocol.inverted_flash_ms) / 1000.0);
        }
        self.calibration = outcome.state.clone();
        Ok(outcome)
    }

    /// Leaves a break, or confirms the target preview.
    pub fn advance(&mut self, now: f64) -> Result<(), SessionError> {
        self.tick(now);
        match self.phase() {
            SessionPhase::Break => {
                self.on_break = false;
                self.begin_next(now);
                Ok(())
            }
            SessionPhase::TargetPreview => self.active.as_mut().expect("active in preview").advance(now),
            phase => Err(SessionError::SequenceViolation(format!("advance not accepted during {phase:?}"))),
        }
    }

    pub fn respond(&mut self, response: ResponsePayload, now: f64) -> Result<(), SessionError> {
        self.tick(now);
        match response {
            ResponsePayload::Threshold { state, location } => {
                self.expect_phase(&[SessionPhase::Presenting], "a perceptual judgment")?;
                let cal = self.user_calibration().expect("calibration complete while presenting");
                let mut active = self.active.clone().expect("active while presenting");
                let TrialSpec::Threshold(spec) = active.spec else {
                    unreachable!("presenting implies a threshold trial")
                };
                let w = interpolate_weight(&cal, spec.r)?.w;
                let record = active.respond_threshold(now, state, location, w)?;
                self.seal(record, now)
            }
            ResponsePayload::Click { x, y } => {
                self.expect_phase(&[SessionPhase::Search], "a search click")?;
                let active = self.active.as_mut().expect("active while searching");
                let TrialSpec::Guidance(g) = active.spec else {
                    unreachable!("search implies a guidance trial")
                };
                let roi = self
                    .env
                    .rois
                    .get(g.image_set as usize)
                    .ok_or_else(|| SessionError::Config(format!("no ROI for image set {}", g.image_set)))?;
                active.click(now, crate::gaze::Point2::new(x, y), roi)
            }
        }
    }

    pub fn questionnaire(&mut self, naturalness: u8, obtrusiveness: u8, now: f64) -> Result<(), SessionError> {
        self.tick(now);
        self.expect_phase(&[SessionPhase::Questionnaire], "questionnaire answers")?;
        let likert = Likert::new(naturalness, obtrusiveness)?;
        let timing = self.env.timing();
        let mut active = self.active.clone().expect("active in questionnaire");
        let record = active.questionnaire(now, likert, &timing)?;
        self.seal(record, now)
    }

    /// Stores a finished trial and moves on. Nothing changes in memory if
    /// the write fails.
    fn seal(&mut self, record: TrialRecord, now: f64) -> Result<(), SessionError> {
        if record.trial as usize != self.records.len() {
            return Err(SessionError::DuplicateRecord(format!("trial {}", record.trial)));
        }
        self.persist(&LogEntry::Trial(record.clone()))?;
        self.records.push(record);
        self.active = None;
        if self.plan.break_after(self.records.len()) {
            self.on_break = true;
        } else {
            self.begin_next(now);
        }
        Ok(())
    }
}
