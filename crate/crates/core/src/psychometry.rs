//! Logistic psychometric fits, threshold tables and the eccentricity /
//! calibration interpolation used when preparing guidance stimuli.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RATIO_LEVELS: [u32; 11] = [0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50];
pub const DIAMETERS_MM: [u32; 3] = [60, 80, 100];
pub const ECCENTRICITIES_MM: [u32; 4] = [0, 71, 121, 171];
/// Ratios visited by the color-fitting calibration, in presentation order.
pub const CALIBRATION_RATIOS: [u32; 5] = [50, 40, 30, 20, 10];

const MAX_ITERATIONS: usize = 100;
const GRADIENT_TOLERANCE: f64 = 1e-10;
const MAX_STEP_HALVINGS: usize = 60;

pub const WEIGHT_CLAMP: (f64, f64) = (0.01, 0.99);

pub const RESPONSES_FORMAT: &str = "colorvib-responses";
pub const RESPONSES_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PsychometryError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("fit did not converge after {iterations} iterations (gradient {gradient:e})")]
    ConvergenceFailure { iterations: usize, gradient: f64 },
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("responses mix several (d, l) cells")]
    MixedCells,
    #[error("eccentricity {l_mm} mm outside the interpolation range (0 or 71..=171 mm)")]
    OutsideInterpolationRange { l_mm: f64 },
    #[error("diameter {0} mm is not a table level")]
    UnknownDiameter(u32),
    #[error("table has no entry for {0}")]
    MissingCell(TableKey),
    #[error("invalid threshold table: {0}")]
    InvalidTable(String),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid responses file: {0}")]
    InvalidResponses(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptState {
    SolidColor,
    DifferentNotFlickering,
    ClearlyFlickering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Awareness,
    Discomfort,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Awareness, Condition::Discomfort];

    /// Binarizes a percept for this condition.
    pub fn is_positive(self, state: PerceptState) -> bool {
        match self {
            Condition::Awareness => state != PerceptState::SolidColor,
            Condition::Discomfort => state == PerceptState::ClearlyFlickering,
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Awareness => "awareness",
            Condition::Discomfort => "discomfort",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Probability {
    #[serde(rename = "0.5")]
    P50,
    #[serde(rename = "0.75")]
    P75,
}

impl Probability {
    pub const ALL: [Probability; 2] = [Probability::P50, Probability::P75];

    pub fn value(self) -> f64 {
        match self {
            Probability::P50 => 0.5,
            Probability::P75 => 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResponse {
    pub r: f64,
    pub d_mm: u32,
    pub l_mm: u32,
    pub state: PerceptState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_chosen: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_actual: Option<u8>,
    pub participant: String,
    pub latency_s: f64,
}

/// Rewrites peripheral responses that picked the wrong circle as
/// [`PerceptState::SolidColor`]: a mislocated vibration counts as not seen.
pub fn filter_peripheral_misses(responses: &[TrialResponse]) -> Vec<TrialResponse> {
    responses
        .iter()
        .map(|resp| {
            let mut out = resp.clone();
            if resp.l_mm > 0 && resp.location_chosen != resp.location_actual {
                out.state = PerceptState::SolidColor;
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricCurve {
    pub midpoint: f64,
    pub slope: f64,
    pub n_trials: usize,
    pub n_levels: usize,
    pub condition: Condition,
    pub iterations: usize,
}

impl PsychometricCurve {
    pub fn probability(&self, r: f64) -> f64 {
        logistic(self.slope * (r - self.midpoint))
    }
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// (level, trials, positives) sorted by level, so fitting does not depend on
/// response order.
fn aggregate(responses: &[TrialResponse], condition: Condition) -> Vec<(f64, f64, f64)> {
    let mut levels: BTreeMap<u64, (f64, u64, u64)> = BTreeMap::new();
    for resp in responses {
        let slot = levels.entry(resp.r.to_bits()).or_insert((resp.r, 0, 0));
        slot.1 += 1;
        slot.2 += u64::from(condition.is_positive(resp.state));
    }
    let mut out: Vec<_> = levels
        .into_values()
        .map(|(r, n, k)| (r, n as f64, k as f64))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

struct LogLik {
    value: f64,
    grad: [f64; 2],
    hess: [[f64; 2]; 2],
}

fn evaluate(levels: &[(f64, f64, f64)], intercept: f64, slope: f64) -> LogLik {
    let mut value = 0.0;
    let mut grad = [0.0; 2];
    let mut hess = [[0.0; 2]; 2];
    for &(x, n, k) in levels {
        let eta = intercept + slope * x;
        let p = logistic(eta);
        value -= k * softplus(-eta) + (n - k) * softplus(eta);
        let resid = k - n * p;
        grad[0] += resid;
        grad[1] += resid * x;
        let w = n * p * (1.0 - p);
        hess[0][0] -= w;
        hess[0][1] -= w * x;
        hess[1][1] -= w * x * x;
    }
    hess[1][0] = hess[0][1];
    LogLik { value, grad, hess }
}

/// Maximum-likelihood fit of `p(r) = 1 / (1 + exp(−slope·(r − midpoint)))`
/// to one cell's binarized responses.
///
/// Newton iterations on the (intercept, slope) parametrization with step
/// halving; converged when the gradient of the per-trial mean
/// log-likelihood drops below 1e-10.
pub fn fit_curve(responses: &[TrialResponse], condition: Condition) -> Result<PsychometricCurve, PsychometryError> {
    let Some(first) = responses.first() else {
        return Err(PsychometryError::DegenerateData("no responses".into()));
    };
    if responses
        .iter()
        .any(|r| r.d_mm != first.d_mm || r.l_mm != first.l_mm)
    {
        return Err(PsychometryError::MixedCells);
    }
    let raw = aggregate(responses, condition);
    if raw.len() < 2 {
        return Err(PsychometryError::DegenerateData(
            "need at least two distinct r levels".into(),
        ));
    }
    let total: f64 = raw.iter().map(|l| l.1).sum();
    let positives: f64 = raw.iter().map(|l| l.2).sum();
    if positives == 0.0 || positives == total {
        return Err(PsychometryError::DegenerateData(format!(
            "all {} responses {} for {condition}",
            total,
            if positives == 0.0 { "negative" } else { "positive" }
        )));
    }

    // center the stimulus axis for conditioning
    let center = raw.iter().map(|l| l.0).sum::<f64>() / raw.len() as f64;
    let levels: Vec<_> = raw.iter().map(|&(r, n, k)| (r - center, n, k)).collect();

    let p0 = positives / total;
    let mut theta = [(p0 / (1.0 - p0)).ln(), 0.0];
    let mut cur = evaluate(&levels, theta[0], theta[1]);
    let mut iterations = 0;
    loop {
        let gnorm = cur.grad[0].abs().max(cur.grad[1].abs()) / total;
        if gnorm < GRADIENT_TOLERANCE {
            break;
        }
        if iterations == MAX_ITERATIONS {
            return Err(PsychometryError::ConvergenceFailure {
                iterations,
                gradient: gnorm,
            });
        }
        iterations += 1;

        let [[a, b], [_, d]] = cur.hess;
        let det = a * d - b * b;
        // Newton ascent direction -H⁻¹g; fall back to gradient ascent when the
        // Hessian is numerically singular.
        let dir = if det.is_finite() && det > 0.0 {
            [
                -(d * cur.grad[0] - b * cur.grad[1]) / det,
                -(-b * cur.grad[0] + a * cur.grad[1]) / det,
            ]
        } else {
            [cur.grad[0] / total, cur.grad[1] / total]
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_STEP_HALVINGS {
            let cand = [theta[0] + step * dir[0], theta[1] + step * dir[1]];
            let next = evaluate(&levels, cand[0], cand[1]);
            if next.value.is_finite() && next.value >= cur.value {
                accepted = Some((cand, next));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, next)) => {
                let stalled = cand == theta;
                theta = cand;
                cur = next;
                if stalled {
                    break;
                }
            }
            // no ascent possible at floating-point resolution
            None => break,
        }
    }

    let [intercept, slope] = theta;
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(PsychometryError::DegenerateData(format!(
            "fitted slope {slope} is not positive"
        )));
    }
    Ok(PsychometricCurve {
        midpoint: center - intercept / slope,
        slope,
        n_trials: total as usize,
        n_levels: levels.len(),
        condition,
        iterations,
    })
}

pub fn threshold_at(curve: &PsychometricCurve, p: f64) -> Result<f64, PsychometryError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PsychometryError::ProbabilityOutOfRange(p));
    }
    Ok(curve.midpoint + (p / (1.0 - p)).ln() / curve.slope)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TableKey {
    pub condition: Condition,
    pub probability: Probability,
    pub d_mm: u32,
    pub l_mm: u32,
}

impl std::fmt::Display for TableKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/d={}mm/l={}mm",
            self.condition,
            self.probability.value(),
            self.d_mm,
            self.l_mm
        )
    }
}

/// `r_th` values keyed by (condition, probability, d, l).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdTable {
    entries: BTreeMap<TableKey, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    condition: Condition,
    probability: Probability,
    d_mm: u32,
    l_mm: u32,
    r_th: f64,
}

impl ThresholdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: TableKey, r_th: f64) -> Result<(), PsychometryError> {
        if !(r_th > 0.0 && r_th.is_finite()) {
            return Err(PsychometryError::InvalidTable(format!(
                "{key}: threshold {r_th} must be positive"
            )));
        }
        self.entries.insert(key, r_th);
        Ok(())
    }

    pub fn get(&self, key: &TableKey) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&TableKey, &f64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_diameter(&self, d_mm: u32) -> bool {
        self.entries.keys().any(|k| k.d_mm == d_mm)
    }

    /// Places where `r_th` grows with `d` at fixed (condition, probability,
    /// l). Larger circles are expected to need smaller amplitudes, so these
    /// are reported but not rejected.
    pub fn monotonicity_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for (key, &value) in &self.entries {
            let next = self
                .entries
                .range(*key..)
                .skip(1)
                .find(|(k, _)| {
                    k.condition == key.condition
                        && k.probability == key.probability
                        && k.l_mm == key.l_mm
                        && k.d_mm > key.d_mm
                });
            if let Some((k, &v)) = next {
                if v > value {
                    warnings.push(format!("{k}: r_th {v} exceeds {value} at d={}mm", key.d_mm));
                }
            }
        }
        warnings
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for (k, &r_th) in &self.entries {
            w.serialize(TableRow {
                condition: k.condition,
                probability: k.probability,
                d_mm: k.d_mm,
                l_mm: k.l_mm,
                r_th,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, PsychometryError> {
        let mut table = ThresholdTable::new();
        let mut rdr = csv::Reader::from_reader(input);
        for row in rdr.deserialize::<TableRow>() {
            let row = row.map_err(|e| PsychometryError::InvalidTable(e.to_string()))?;
            let key = TableKey {
                condition: row.condition,
                probability: row.probability,
                d_mm: row.d_mm,
                l_mm: row.l_mm,
            };
            if table.entries.contains_key(&key) {
                return Err(PsychometryError::InvalidTable(format!("duplicate row {key}")));
            }
            table.insert(key, row.r_th)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostic {
    pub condition: Condition,
    pub d_mm: u32,
    pub l_mm: u32,
    pub n_trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<PsychometricCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableBuild {
    pub table: ThresholdTable,
    pub diagnostics: Vec<CellDiagnostic>,
}

impl TableBuild {
    /// Cells of the protocol grid without a usable fit.
    pub fn failed_cells(&self) -> Vec<&CellDiagnostic> {
        self.diagnostics.iter().filter(|d| d.problem.is_some()).collect()
    }
}

/// Pooled fit for every (d, l) cell and both conditions. Peripheral misses
/// are filtered first. The protocol grid is always reported, so missing
/// cells show up as diagnostics.
pub fn build_table(responses: &[TrialResponse]) -> TableBuild {
    let filtered = filter_peripheral_misses(responses);
    let mut cells: BTreeMap<(u32, u32), Vec<TrialResponse>> = BTreeMap::new();
    for d in DIAMETERS_MM {
        for l in ECCENTRICITIES_MM {
            cells.insert((d, l), Vec::new());
        }
    }
    for resp in filtered {
        cells.entry((resp.d_mm, resp.l_mm)).or_default().push(resp);
    }

    let mut table = ThresholdTable::new();
    let mut diagnostics = Vec::new();
    for ((d_mm, l_mm), cell) in &cells {
        for condition in Condition::ALL {
            let mut diag = CellDiagnostic {
                condition,
                d_mm: *d_mm,
                l_mm: *l_mm,
                n_trials: cell.len(),
                curve: None,
                problem: None,
            };
            if cell.is_empty() {
                diag.problem = Some("no responses".into());
                diagnostics.push(diag);
                continue;
            }
            match fit_curve(cell, condition) {
                Ok(curve) => {
                    diag.curve = Some(curve);
                    for p in Probability::ALL {
                        let r_th = threshold_at(&curve, p.value()).expect("fixed probabilities are valid");
                        let key = TableKey {
                            condition,
                            probability: p,
                            d_mm: *d_mm,
                            l_mm: *l_mm,
                        };
                        if let Err(e) = table.insert(key, r_th) {
                            diag.problem = Some(e.to_string());
                        }
                    }
                }
                Err(e) => diag.problem = Some(e.to_string()),
            }
            diagnostics.push(diag);
        }
    }
    TableBuild { table, diagnostics }
}

/// Threshold for an arbitrary eccentricity. `l = 0` reads the central
/// entry; `71 <= l <= 171` interpolates linearly between the peripheral
/// grid points. Grid points are returned verbatim.
pub fn interpolate_threshold(
    table: &ThresholdTable,
    condition: Condition,
    probability: Probability,
    d_mm: u32,
    l_mm: f64,
) -> Result<f64, PsychometryError> {
    if !table.has_diameter(d_mm) {
        return Err(PsychometryError::UnknownDiameter(d_mm));
    }
    let key = |l: u32| TableKey {
        condition,
        probability,
        d_mm,
        l_mm: l,
    };
    let lookup = |l: u32| table.get(&key(l)).ok_or(PsychometryError::MissingCell(key(l)));

    if l_mm == 0.0 {
        return lookup(0);
    }
    let peripheral = &ECCENTRICITIES_MM[1..];
    let lo_bound = f64::from(peripheral[0]);
    let hi_bound = f64::from(peripheral[peripheral.len() - 1]);
    if !(l_mm >= lo_bound && l_mm <= hi_bound) {
        return Err(PsychometryError::OutsideInterpolationRange { l_mm });
    }
    if let Some(&grid) = peripheral.iter().find(|&&g| f64::from(g) == l_mm) {
        return lookup(grid);
    }
    let seg = peripheral
        .windows(2)
        .find(|w| l_mm < f64::from(w[1]))
        .expect("l inside the peripheral range");
    let (l0, l1) = (seg[0], seg[1]);
    let (v0, v1) = (lookup(l0)?, lookup(l1)?);
    let t = (l_mm - f64::from(l0)) / f64::from(l1 - l0);
    Ok(v0 * (1.0 - t) + v1 * t)
}

/// Per-participant color-fitting results: `w` for each calibration ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCalibration {
    pub participant: String,
    pub fits: BTreeMap<u32, f64>,
}

impl UserCalibration {
    pub fn validate(&self) -> Result<(), PsychometryError> {
        if self.fits.is_empty() {
            return Err(PsychometryError::InvalidCalibration("no fitted weights".into()));
        }
        for (&r, &w) in &self.fits {
            if !(w > 0.0 && w < 1.0) {
                return Err(PsychometryError::InvalidCalibration(format!(
                    "w={w} at r={r} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PsychometryError> {
        let cal: UserCalibration =
            serde_json::from_str(text).map_err(|e| PsychometryError::InvalidCalibration(e.to_string()))?;
        cal.validate()?;
        Ok(cal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightEstimate {
    pub w: f64,
    /// Set when `r` fell outside the calibrated range and the nearest
    /// endpoint was used instead.
    pub outside_calibration: bool,
}

pub fn interpolate_weight(cal: &UserCalibration, r: f64) -> Result<WeightEstimate, PsychometryError> {
    cal.validate()?;
    let (&r_min, &w_min) = cal.fits.first_key_value().expect("validated non-empty");
    let (&r_max, &w_max) = cal.fits.last_key_value().expect("validated non-empty");
    let clamp = |w: f64| w.clamp(WEIGHT_CLAMP.0, WEIGHT_CLAMP.1);

    if r < f64::from(r_min) {
        log::warn!("r={r} below calibrated range, using w at r={r_min}");
        return Ok(WeightEstimate {
            w: clamp(w_min),
            outside_calibration: true,
        });
    }
    if r > f64::from(r_max) || r.is_nan() {
        log::warn!("r={r} above calibrated range, using w at r={r_max}");
        return Ok(WeightEstimate {
            w: clamp(w_max),
            outside_calibration: true,
        });
    }
    let points: Vec<(f64, f64)> = cal.fits.iter().map(|(&r, &w)| (f64::from(r), w)).collect();
    let w = match points.iter().find(|p| p.0 == r) {
        Some(&(_, w)) => w,
        None => {
            let seg = points
                .windows(2)
                .find(|s| r < s[1].0)
                .expect("r inside calibrated range");
            let t = (r - seg[0].0) / (seg[1].0 - seg[0].0);
            seg[0].1 * (1.0 - t) + seg[1].1 * t
        }
    };
    Ok(WeightEstimate {
        w: clamp(w),
        outside_calibration: false,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ResponsesHeader {
    format: String,
    version: u32,
}

/// Writes the versioned line-delimited responses format.
pub fn write_responses<W: Write>(mut out: W, responses: &[TrialResponse]) -> std::io::Result<()> {
    let header = ResponsesHeader {
        format: RESPONSES_FORMAT.into(),
        version: RESPONSES_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for r in responses {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_responses<R: BufRead>(input: R) -> Result<Vec<TrialResponse>, PsychometryError> {
    let bad = |msg: String| PsychometryError::InvalidResponses(msg);
    let mut lines = input.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            None => return Err(bad("empty file".into())),
            Some((_, line)) => {
                let line = line.map_err(|e| bad(e.to_string()))?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let header: ResponsesHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != RESPONSES_FORMAT || header.version != RESPONSES_VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
