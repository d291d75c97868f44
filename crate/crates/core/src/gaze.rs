//! Eye-tracker gaze mapped to display space, and the per-trial search
//! metrics (completion time, explored-area ratio).

use std::io::{Read, Write};

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Responses slower than this, wrong, or missing count as this many seconds.
pub const DEFAULT_TIME_LIMIT_S: f64 = 30.0;
/// Full visual angle of the disk counted as explored around each gaze point.
pub const EXPLORED_DISK_ANGLE_DEG: f64 = 5.0;

const W_EPSILON: f64 = 1e-12;
const COLLINEAR_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GazeError {
    #[error("degenerate marker configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("invalid gaze input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t: f64,
    pub p: Point2,
    pub valid: bool,
}

/// Four marker corners seen by the tracker camera, with their known
/// positions on the display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerObservation {
    pub t: f64,
    pub camera: [Point2; 4],
    pub display: [Point2; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

fn triangle_area2(a: Point2, b: Point2, c: Point2) -> f64 {
    ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs()
}

fn check_general_position(points: &[Point2; 4], which: &str) -> Result<(), GazeError> {
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(GazeError::DegenerateConfiguration(format!("non-finite {which} point")));
        }
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let scale = (max_x - min_x).powi(2) + (max_y - min_y).powi(2);
    for skip in 0..4 {
        let tri: Vec<Point2> = (0..4).filter(|&i| i != skip).map(|i| points[i]).collect();
        if scale == 0.0 || triangle_area2(tri[0], tri[1], tri[2]) <= COLLINEAR_EPSILON * scale {
            return Err(GazeError::DegenerateConfiguration(format!(
                "three {which} points are collinear or coincident"
            )));
        }
    }
    Ok(())
}

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Builds from a row-major matrix, normalizing the bottom-right entry to 1.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GazeError> {
        let h33 = m[(2, 2)];
        if h33.abs() < W_EPSILON || m.determinant().abs() < W_EPSILON {
            return Err(GazeError::DegenerateConfiguration("singular matrix".into()));
        }
        Ok(Self(m / h33))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Exact four-point solve with `h33 = 1`.
    pub fn estimate(obs: &MarkerObservation) -> Result<Self, GazeError> {
        check_general_position(&obs.camera, "camera")?;
        check_general_position(&obs.display, "display")?;
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (src, dst)) in obs.camera.iter().zip(&obs.display).enumerate() {
            let (x, y, u, v) = (src.x, src.y, dst.x, dst.y);
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| GazeError::DegenerateConfiguration("correspondence system is singular".into()))?;
        Self::from_matrix(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
    }

    pub fn apply(&self, p: Point2) -> Result<Point2, GazeError> {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        if v[2].abs() < W_EPSILON {
            return Err(GazeError::PointAtInfinity);
        }
        Ok(Point2::new(v[0] / v[2], v[1] / v[2]))
    }

    pub fn inverse(&self) -> Result<Self, GazeError> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| GazeError::DegenerateConfiguration("not invertible".into()))?;
        Self::from_matrix(inv)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MappedGaze {
    pub points: Vec<(f64, Point2)>,
    pub dropped_invalid: usize,
    pub dropped_infinite: usize,
    pub dropped_no_homography: usize,
}

pub fn map_gaze(h: &Homography, samples: &[GazeSample]) -> MappedGaze {
    let mut out = MappedGaze::default();
    for s in samples {
        if !s.valid {
            out.dropped_invalid += 1;
            continue;
        }
        match h.apply(s.p) {
            Ok(p) => out.points.push((s.t, p)),
            Err(_) => out.dropped_infinite += 1,
        }
    }
    out
}

/// Maps each sample with the most recent marker observation at or before
/// it. Samples earlier than every observation are dropped.
pub fn map_recording(samples: &[GazeSample], markers: &[MarkerObservation]) -> Result<MappedGaze, GazeError> {
    let mut track: Vec<(f64, Homography)> = markers
        .iter()
        .map(|m| Homography::estimate(m).map(|h| (m.t, h)))
        .collect::<Result<_, _>>()?;
    track.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = MappedGaze::default();
    for s in samples {
        if !s.valid {
            out.dropped_invalid += 1;
            continue;
        }
        let idx = track.partition_point(|(t, _)| *t <= s.t);
        let Some((_, h)) = idx.checked_sub(1).map(|i| &track[i]) else {
            out.dropped_no_homography += 1;
            continue;
        };
        match h.apply(s.p) {
            Ok(p) => out.points.push((s.t, p)),
            Err(_) => out.dropped_infinite += 1,
        }
    }
    Ok(out)
}

/// Axis-aligned pixel region of the display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: f64,
    pub y: f64,
    pub width: u32,
    pub height: u32,
}

impl Region {
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x
            && p.y >= self.y
            && p.x < self.x + f64::from(self.width)
            && p.y < self.y + f64::from(self.height)
    }
}

/// Fraction of `region` pixels whose centers lie within `disk_radius_px` of
/// some gaze point inside the region.
pub fn explored_ratio(points: &[Point2], region: &Region, disk_radius_px: f64) -> f64 {
    let (w, h) = (region.width as usize, region.height as usize);
    if w == 0 || h == 0 || !(disk_radius_px > 0.0) {
        return 0.0;
    }
    let mut covered = vec![false; w * h];
    let r2 = disk_radius_px * disk_radius_px;
    for p in points.iter().filter(|p| region.contains(**p)) {
        let (lx, ly) = (p.x - region.x, p.y - region.y);
        let x0 = (lx - disk_radius_px).floor().max(0.0) as usize;
        let x1 = ((lx + disk_radius_px).ceil().max(0.0) as usize).min(w);
        let y0 = (ly - disk_radius_px).floor().max(0.0) as usize;
        let y1 = ((ly + disk_radius_px).ceil().max(0.0) as usize).min(h);
        for py in y0..y1 {
            let dy = py as f64 + 0.5 - ly;
            let row = &mut covered[py * w..(py + 1) * w];
            for (px, cell) in row.iter_mut().enumerate().take(x1).skip(x0) {
                let dx = px as f64 + 0.5 - lx;
                if dx * dx + dy * dy <= r2 {
                    *cell = true;
                }
            }
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 / (w * h) as f64
}

/// How a search trial ended. `latency_s` is `None` on timeout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub correct: bool,
    pub latency_s: Option<f64>,
}

pub fn completion_time(outcome: &SearchOutcome, limit_s: f64) -> f64 {
    match outcome.latency_s {
        Some(t) if outcome.correct && t <= limit_s => t,
        _ => limit_s,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialWindow {
    pub trial: u32,
    /// Trial start on the recording clock.
    pub start_t: f64,
    pub outcome: SearchOutcome,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: u32,
    pub completion_time_s: f64,
    pub explored_ratio: f64,
    pub samples_used: usize,
    pub dropped_invalid: usize,
    pub dropped_no_homography: usize,
    pub dropped_infinite: usize,
}

/// Metrics per trial. Exploration accumulates from trial start until the
/// response (or the time limit when there was none).
pub fn analyze_trials(
    samples: &[GazeSample],
    markers: &[MarkerObservation],
    trials: &[TrialWindow],
    disk_radius_px: f64,
    limit_s: f64,
) -> Result<Vec<TrialMetrics>, GazeError> {
    let mut out = Vec::with_capacity(trials.len());
    for trial in trials {
        let end = trial.start_t + trial.outcome.latency_s.unwrap_or(limit_s).min(limit_s);
        let window: Vec<GazeSample> = samples
            .iter()
            .filter(|s| s.t >= trial.start_t && s.t <= end)
            .copied()
            .collect();
        let mapped = map_recording(&window, markers)?;
        let points: Vec<Point2> = mapped.points.iter().map(|(_, p)| *p).collect();
        out.push(TrialMetrics {
            trial: trial.trial,
            completion_time_s: completion_time(&trial.outcome, limit_s),
            explored_ratio: explored_ratio(&points, &trial.region, disk_radius_px),
            samples_used: points.len(),
            dropped_invalid: mapped.dropped_invalid,
            dropped_no_homography: mapped.dropped_no_homography,
            dropped_infinite: mapped.dropped_infinite,
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct SampleRow {
    t: f64,
    x: f64,
    y: f64,
    valid: u8,
}

/// `t,x,y,valid` rows; `valid` is 0 or 1.
pub fn read_samples<R: Read>(input: R) -> Result<Vec<GazeSample>, GazeError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<GazeSample> = Vec::new();
    for row in rdr.deserialize::<SampleRow>() {
        let row = row.map_err(|e| GazeError::InvalidInput(format!("samples: {e}")))?;
        if let Some(prev) = out.last() {
            if row.t < prev.t {
                return Err(GazeError::InvalidInput(format!("samples: time goes backwards at t={}", row.t)));
            }
        }
        out.push(GazeSample {
            t: row.t,
            p: Point2::new(row.x, row.y),
            valid: row.valid != 0,
        });
    }
    Ok(out)
}

/// `t` followed by the four camera corners and the four display corners,
/// `x,y` interleaved (17 columns).
pub fn read_markers<R: Read>(input: R) -> Result<Vec<MarkerObservation>, GazeError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| GazeError::InvalidInput(format!("markers: {e}")))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GazeError::InvalidInput(format!("markers: {e}")))?;
        if vals.len() != 17 {
            return Err(GazeError::InvalidInput(format!("markers: expected 17 columns, got {}", vals.len())));
        }
        let pt = |i: usize| Point2::new(vals[1 + 2 * i], vals[2 + 2 * i]);
        out.push(MarkerObservation {
            t: vals[0],
            camera: [pt(0), pt(1), pt(2), pt(3)],
            display: [pt(4), pt(5), pt(6), pt(7)],
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct TrialRow {
    trial: u32,
    start_t: f64,
    correct: u8,
    latency_s: Option<f64>,
    region_x: f64,
    region_y: f64,
    region_w: u32,
    region_h: u32,
}

/// `trial,start_t,correct,latency_s,region_x,region_y,region_w,region_h`;
/// an empty `latency_s` marks a timeout.
pub fn read_trials<R: Read>(input: R) -> Result<Vec<TrialWindow>, GazeError> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize::<TrialRow>()
        .map(|row| {
            let row = row.map_err(|e| GazeError::InvalidInput(format!("trials: {e}")))?;
            Ok(TrialWindow {
                trial: row.trial,
                start_t: row.start_t,
                outcome: SearchOutcome {
                    correct: row.correct != 0,
                    latency_s: row.latency_s,
                },
                region: Region {
                    x: row.region_x,
                    y: row.region_y,
                    width: row.region_w,
                    height: row.region_h,
                },
            })
        })
        .collect()
}

pub fn write_metrics<W: Write>(out: W, metrics: &[TrialMetrics]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(s: f64) -> [Point2; 4] {
        [Point2::new(0.0, 0.0), Point2::new(s, 0.0), Point2::new(s, s), Point2::new(0.0, s)]
    }

    fn obs(camera: [Point2; 4], display: [Point2; 4]) -> MarkerObservation {
        MarkerObservation { t: 0.0, camera, display }
    }

    #[test]
    fn identity_and_scaling() {
        let h = Homography::estimate(&obs(square(1.0), square(1.0))).unwrap();
        assert!((h.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        let h = Homography::estimate(&obs(square(1.0), square(2.0))).unwrap();
        assert!((h.matrix() - Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn collinear_markers_rejected() {
        let bad = [Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0), Point2::new(0.0, 1.0)];
        assert!(matches!(Homography::estimate(&obs(bad, square(1.0))), Err(GazeError::DegenerateConfiguration(_))));
        assert!(matches!(Homography::estimate(&obs(square(1.0), bad)), Err(GazeError::DegenerateConfiguration(_))));
        let coincident = [Point2::new(0.0, 0.0); 4];
        assert!(Homography::estimate(&obs(coincident, square(1.0))).is_err());
    }

    #[test]
    fn projective_fixture_by_hand() {
        // H = [[2, 0, 1], [0, 1, 2], [0.1, 0, 1]]
        let h = Homography::from_matrix(Matrix3::new(2.0, 0.0, 1.0, 0.0, 1.0, 2.0, 0.1, 0.0, 1.0)).unwrap();
        // (0,0) -> (1, 2)/1 ; (10, 0) -> (21, 2)/2 ; (5, 5) -> (11, 7)/1.5
        let cases = [((0.0, 0.0), (1.0, 2.0)), ((10.0, 0.0), (10.5, 1.0)), ((5.0, 5.0), (11.0 / 1.5, 7.0 / 1.5))];
        for ((x, y), (u, v)) in cases {
            let p = h.apply(Point2::new(x, y)).unwrap();
            assert!((p.x - u).abs() < 1e-12 && (p.y - v).abs() < 1e-12, "{p:?}");
        }
        let far = h.apply(Point2::new(-10.0, 3.0));
        assert_eq!(far, Err(GazeError::PointAtInfinity));
    }

    #[test]
    fn map_gaze_counts_drops() {
        let samples: Vec<GazeSample> = (0..5)
            .map(|i| GazeSample { t: f64::from(i), p: Point2::new(1.0, 2.0), valid: false })
            .collect();
        let m = map_gaze(&Homography::identity(), &samples);
        assert!(m.points.is_empty());
        assert_eq!(m.dropped_invalid, 5);
        let valid: Vec<_> = samples.iter().map(|s| GazeSample { valid: true, ..*s }).collect();
        let m = map_gaze(&Homography::identity(), &valid);
        assert_eq!(m.points[0].1, Point2::new(1.0, 2.0));
    }

    #[test]
    fn zero_order_hold() {
        let first = MarkerObservation { t: 1.0, camera: square(1.0), display: square(1.0) };
        let second = MarkerObservation { t: 2.0, camera: square(1.0), display: square(3.0) };
        let samples = [0.5, 1.5, 2.5].map(|t| GazeSample { t, p: Point2::new(1.0, 1.0), valid: true });
        let m = map_recording(&samples, &[second, first]).unwrap();
        assert_eq!(m.dropped_no_homography, 1);
        assert!((m.points[0].1.x - 1.0).abs() < 1e-12);
        assert!((m.points[1].1.x - 3.0).abs() < 1e-12);
    }

    #[test]
    fn explored_ratio_cases() {
        let region = Region { x: 0.0, y: 0.0, width: 400, height: 400 };
        assert_eq!(explored_ratio(&[], &region, 20.0), 0.0);
        let single = explored_ratio(&[Point2::new(200.0, 200.0)], &region, 40.0);
        let analytic = std::f64::consts::PI * 40.0 * 40.0 / (400.0 * 400.0);
        assert!((single - analytic).abs() / analytic < 0.02);
        let grid: Vec<Point2> = (0..=40)
            .flat_map(|i| (0..=40).map(move |j| Point2::new(f64::from(i) * 10.0, f64::from(j) * 10.0)))
            .filter(|p| region.contains(*p))
            .collect();
        assert_eq!(explored_ratio(&grid, &region, 20.0), 1.0);
        // points outside the region do not count
        assert_eq!(explored_ratio(&[Point2::new(-5.0, 10.0)], &region, 20.0), 0.0);
    }

    #[test]
    fn completion_rules() {
        let t = |correct, latency| completion_time(&SearchOutcome { correct, latency_s: latency }, 30.0);
        assert_eq!(t(true, Some(12.4)), 12.4);
        assert_eq!(t(false, Some(8.0)), 30.0);
        assert_eq!(t(true, None), 30.0);
        assert_eq!(t(true, Some(31.0)), 30.0);
    }

    #[test]
    fn csv_readers() {
        let s = read_samples("t,x,y,valid\n0.0,1,2,1\n0.1,3,4,0\n".as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert!(!s[1].valid);
        assert!(read_samples("t,x,y,valid\n1.0,1,2,1\n0.5,3,4,0\n".as_bytes()).is_err());
        let m = read_markers("t,c0x,c0y,c1x,c1y,c2x,c2y,c3x,c3y,d0x,d0y,d1x,d1y,d2x,d2y,d3x,d3y\n0,0,0,1,0,1,1,0,1,0,0,2,0,2,2,0,2\n".as_bytes()).unwrap();
        assert_eq!(m[0].display[2], Point2::new(2.0, 2.0));
        let t = read_trials("trial,start_t,correct,latency_s,region_x,region_y,region_w,region_h\n1,0,1,12.5,0,0,100,100\n2,40,0,,0,0,100,100\n".as_bytes()).unwrap();
        assert_eq!(t[1].outcome.latency_s, None);
        assert_eq!(t[0].outcome.latency_s, Some(12.5));
    }

    fn quad() -> impl Strategy<Value = [Point2; 4]> {
        // jittered square keeps the quad convex and well conditioned
        proptest::array::uniform8(-0.2f64..0.2).prop_map(|j| {
            let base = square(1.0);
            std::array::from_fn(|i| Point2::new(base[i].x * 100.0 + j[2 * i] * 100.0, base[i].y * 100.0 + j[2 * i + 1] * 100.0))
        })
    }

    proptest! {
        #[test]
        fn four_corner_round_trip(src in quad(), dst in quad()) {
            let h = Homography::estimate(&obs(src, dst)).unwrap();
            for (s, d) in src.iter().zip(&dst) {
                let p = h.apply(*s).unwrap();
                prop_assert!((p.x - d.x).abs() < 1e-8 && (p.y - d.y).abs() < 1e-8);
            }
        }

        #[test]
        fn inverse_composes_to_identity(src in quad(), dst in quad(), x in 10.0f64..90.0, y in 10.0f64..90.0) {
            let h = Homography::estimate(&obs(src, dst)).unwrap();
            let inv = h.inverse().unwrap();
            if let Ok(p) = h.apply(Point2::new(x, y)) {
                let back = inv.apply(p).unwrap();
                prop_assert!((back.x - x).abs() < 1e-8 && (back.y - y).abs() < 1e-8);
            }
        }

        #[test]
        fn explored_monotone_and_duplicate_free(pts in proptest::collection::vec((0.0f64..200.0, 0.0f64..200.0), 1..30), extra in (0.0f64..200.0, 0.0f64..200.0)) {
            let region = Region { x: 0.0, y: 0.0, width: 200, height: 200 };
            let mut points: Vec<Point2> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
            let before = explored_ratio(&points, &region, 15.0);
            let mut doubled = points.clone();
            doubled.extend_from_slice(&points);
            prop_assert_eq!(explored_ratio(&doubled, &region, 15.0), before);
            points.push(Point2::new(extra.0, extra.1));
            prop_assert!(explored_ratio(&points, &region, 15.0) >= before);
        }

        #[test]
        fn completion_never_exceeds_limit(correct: bool, latency in proptest::option::of(0.0f64..100.0)) {
            let outcome = SearchOutcome { correct, latency_s: latency };
            prop_assert!(completion_time(&outcome, 30.0) <= 30.0);
        }
    }
}
