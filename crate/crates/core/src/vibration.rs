//! Isoluminant vibration pairs placed along MacAdam-ellipse major axes.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorimetry::{self, ColorError, Srgb8, XyChromaticity, XyYColor};

/// Upper bound returned by [`max_gamut_ratio`] when every ratio is feasible.
pub const DEFAULT_RATIO_CAP: f64 = 100.0;

const BISECTION_PRECISION: f64 = 1e-3;
const BISECTION_MAX_ITERATIONS: usize = 64;

/// Accepted range for semi-axis lengths in xy units. Values in the
/// ×10³ presentation scaling fall far outside it.
const AXIS_RANGE: std::ops::RangeInclusive<f64> = 1e-4..=5e-2;

pub const CATALOG_SIZE: usize = 25;

const BUNDLED_CATALOG: &str = include_str!("../data/macadam1942.txt");

/// Center of the ellipse used as the base color of every stimulus.
pub const BASE_CENTER: XyChromaticity = XyChromaticity::new(0.305, 0.323);

/// Luminance used for all threshold stimuli.
pub const BASE_LUMINANCE: f64 = 0.4;

fn fmt_max(m: &Option<f64>) -> String {
    m.map_or_else(|| "none".to_string(), |v| format!("{v:.4}"))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VibrationError {
    #[error("invalid ellipse catalog: {0}")]
    CatalogInvalid(String),
    #[error("no catalog ellipse centered at ({x}, {y})")]
    UnknownEllipse { x: f64, y: f64 },
    #[error("weight {0} outside the open interval (0, 1)")]
    WeightOutOfRange(f64),
    #[error("ratio {0} must be finite and non-negative")]
    InvalidRatio(f64),
    #[error("pair at r={ratio} leaves the sRGB gamut; max feasible r is {}", fmt_max(max_ratio))]
    OutOfGamut {
        ratio: f64,
        max_ratio: Option<f64>,
    },
    #[error("ellipse {index} has no displayable pair at Y={luminance}")]
    NoFeasibleRatio { index: u8, luminance: f64 },
    #[error(transparent)]
    Color(#[from] ColorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacAdamEllipse {
    pub index: u8,
    pub center: XyChromaticity,
    /// Radians.
    pub rotation: f64,
    pub major: f64,
    pub minor: f64,
}

impl MacAdamEllipse {
    /// Unit vector along the major axis, oriented toward the yellowish end
    /// (larger `x + y`).
    pub fn yellow_direction(&self) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        if s + c >= 0.0 {
            (s, c)
        } else {
            (-s, -c)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseCatalog {
    ellipses: Vec<MacAdamEllipse>,
    pub source: String,
}

impl EllipseCatalog {
    pub fn bundled() -> Self {
        load_catalog(BUNDLED_CATALOG.as_bytes()).expect("bundled catalog is valid")
    }

    pub fn ellipses(&self) -> &[MacAdamEllipse] {
        &self.ellipses
    }

    pub fn get(&self, index: u8) -> Option<&MacAdamEllipse> {
        self.ellipses.iter().find(|e| e.index == index)
    }

    /// Ellipse whose center lies within `tol` of `(x, y)`.
    pub fn find_by_center(&self, x: f64, y: f64, tol: f64) -> Result<&MacAdamEllipse, VibrationError> {
        let target = XyChromaticity::new(x, y);
        self.ellipses
            .iter()
            .filter(|e| e.center.distance(&target) <= tol)
            .min_by(|a, b| {
                a.center
                    .distance(&target)
                    .total_cmp(&b.center.distance(&target))
            })
            .ok_or(VibrationError::UnknownEllipse { x, y })
    }

    pub fn base(&self) -> &MacAdamEllipse {
        self.find_by_center(BASE_CENTER.x, BASE_CENTER.y, 1e-9)
            .expect("catalog validated to contain the base ellipse")
    }
}

/// Parses the line-oriented catalog format: `n x y theta_deg major minor`
/// per line, `#` starts a comment.
pub fn load_catalog<R: BufRead>(source: R) -> Result<EllipseCatalog, VibrationError> {
    let invalid = |msg: String| VibrationError::CatalogInvalid(msg);
    let mut ellipses = Vec::with_capacity(CATALOG_SIZE);
    let mut provenance = Vec::new();

    for (lineno, line) in source.lines().enumerate() {
        let line = line.map_err(|e| invalid(format!("read error: {e}")))?;
        let (data, comment) = match line.split_once('#') {
            Some((d, c)) => (d, Some(c)),
            None => (line.as_str(), None),
        };
        if let Some(c) = comment {
            let c = c.trim();
            if !c.is_empty() && data.trim().is_empty() {
                provenance.push(c.to_string());
            }
        }
        let fields: Vec<&str> = data.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(invalid(format!(
                "line {}: expected 6 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let index: u8 = fields[0]
            .parse()
            .map_err(|_| invalid(format!("line {}: bad index {:?}", lineno + 1, fields[0])))?;
        let mut nums = [0.0f64; 5];
        for (slot, tok) in nums.iter_mut().zip(&fields[1..]) {
            *slot = tok
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| invalid(format!("line {}: bad number {tok:?}", lineno + 1)))?;
        }
        let [x, y, theta_deg, major, minor] = nums;
        ellipses.push(MacAdamEllipse {
            index,
            center: XyChromaticity::new(x, y),
            rotation: theta_deg.to_radians(),
            major,
            minor,
        });
    }

    if ellipses.len() != CATALOG_SIZE {
        return Err(invalid(format!(
            "expected {CATALOG_SIZE} ellipses, found {}",
            ellipses.len()
        )));
    }
    let mut seen = [false; CATALOG_SIZE + 1];
    for e in &ellipses {
        let i = usize::from(e.index);
        if i == 0 || i > CATALOG_SIZE {
            return Err(invalid(format!("index {i} outside 1..={CATALOG_SIZE}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(invalid(format!("duplicate index {i}")));
        }
        if !(e.minor > 0.0 && e.major >= e.minor) {
            return Err(invalid(format!(
                "ellipse {i}: need major >= minor > 0 (major={}, minor={})",
                e.major, e.minor
            )));
        }
        if !AXIS_RANGE.contains(&e.major) {
            return Err(invalid(format!(
                "ellipse {i}: major axis {} is not in raw xy units",
                e.major
            )));
        }
        let c = e.center;
        if !(c.x > 0.0 && c.y > 0.0 && c.x + c.y < 1.0) {
            return Err(invalid(format!("ellipse {i}: center ({}, {}) outside the diagram", c.x, c.y)));
        }
    }
    let catalog = EllipseCatalog {
        ellipses,
        source: provenance.join("\n"),
    };
    catalog
        .find_by_center(BASE_CENTER.x, BASE_CENTER.y, 1e-9)
        .map_err(|_| invalid("missing the (0.305, 0.323) ellipse".into()))?;
    Ok(catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VibrationPair {
    /// Yellowish endpoint.
    pub plus: XyChromaticity,
    /// Bluish endpoint.
    pub minus: XyChromaticity,
    #[serde(rename = "Y")]
    pub luminance: f64,
    pub ratio: f64,
    pub weight: f64,
    pub source_ellipse: u8,
}

impl VibrationPair {
    pub fn plus_xyy(&self) -> XyYColor {
        XyYColor {
            chroma: self.plus,
            luminance: self.luminance,
        }
    }

    pub fn minus_xyy(&self) -> XyYColor {
        XyYColor {
            chroma: self.minus,
            luminance: self.luminance,
        }
    }

    pub fn separation(&self) -> f64 {
        self.plus.distance(&self.minus)
    }

    pub fn in_gamut(&self) -> bool {
        endpoint_ok(self.plus, self.luminance) && endpoint_ok(self.minus, self.luminance)
    }

    /// Same chromaticities at another luminance.
    pub fn with_luminance(&self, luminance: f64) -> Self {
        Self { luminance, ..*self }
    }
}

fn endpoint_ok(c: XyChromaticity, luminance: f64) -> bool {
    c.is_valid()
        && colorimetry::in_gamut(XyYColor {
            chroma: c,
            luminance,
        })
}

fn check_ratio(r: f64) -> Result<(), VibrationError> {
    if r.is_finite() && r >= 0.0 {
        Ok(())
    } else {
        Err(VibrationError::InvalidRatio(r))
    }
}

fn check_weight(w: f64) -> Result<(), VibrationError> {
    if w > 0.0 && w < 1.0 {
        Ok(())
    } else {
        Err(VibrationError::WeightOutOfRange(w))
    }
}

/// Endpoints without gamut validation.
pub fn raw_weighted_pair(ellipse: &MacAdamEllipse, r: f64, w: f64, luminance: f64) -> VibrationPair {
    let (ux, uy) = ellipse.yellow_direction();
    let amp = r * ellipse.major;
    let to_plus = 2.0 * amp * w;
    let to_minus = 2.0 * amp * (1.0 - w);
    let c = ellipse.center;
    VibrationPair {
        plus: XyChromaticity::new(c.x + to_plus * ux, c.y + to_plus * uy),
        minus: XyChromaticity::new(c.x - to_minus * ux, c.y - to_minus * uy),
        luminance,
        ratio: r,
        weight: w,
        source_ellipse: ellipse.index,
    }
}

/// Symmetric pair `c ± r·a·(sin θ, cos θ)`.
pub fn pair_at(ellipse: &MacAdamEllipse, r: f64, luminance: f64) -> Result<VibrationPair, VibrationError> {
    weighted_pair(ellipse, r, 0.5, luminance)
}

/// Pair whose center-to-endpoint distances along the major axis are
/// `2·r·a·w` (yellowish side) and `2·r·a·(1−w)` (bluish side).
pub fn weighted_pair(
    ellipse: &MacAdamEllipse,
    r: f64,
    w: f64,
    luminance: f64,
) -> Result<VibrationPair, VibrationError> {
    check_ratio(r)?;
    check_weight(w)?;
    let pair = raw_weighted_pair(ellipse, r, w, luminance);
    if pair.in_gamut() {
        Ok(pair)
    } else {
        Err(VibrationError::OutOfGamut {
            ratio: r,
            max_ratio: max_gamut_ratio(ellipse, w, luminance).ok(),
        })
    }
}

pub fn pair_to_display(pair: &VibrationPair) -> Result<(Srgb8, Srgb8), VibrationError> {
    Ok((
        colorimetry::xyy_to_srgb8(pair.plus_xyy())?,
        colorimetry::xyy_to_srgb8(pair.minus_xyy())?,
    ))
}

pub fn max_gamut_ratio(ellipse: &MacAdamEllipse, w: f64, luminance: f64) -> Result<f64, VibrationError> {
    max_gamut_ratio_capped(ellipse, w, luminance, DEFAULT_RATIO_CAP)
}

/// Largest feasible `r` in `[0, cap]`, by bisection. Feasibility is monotone
/// in `r`: the in-gamut chromaticities at fixed `Y` form a convex polygon and
/// both endpoints move outward along a line through the center.
pub fn max_gamut_ratio_capped(
    ellipse: &MacAdamEllipse,
    w: f64,
    luminance: f64,
    cap: f64,
) -> Result<f64, VibrationError> {
    check_weight(w)?;
    let feasible = |r: f64| raw_weighted_pair(ellipse, r, w, luminance).in_gamut();
    if !feasible(0.0) {
        return Err(VibrationError::NoFeasibleRatio {
            index: ellipse.index,
            luminance,
        });
    }
    if feasible(cap) {
        return Ok(cap);
    }
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..BISECTION_MAX_ITERATIONS {
        if hi - lo <= BISECTION_PRECISION {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base() -> MacAdamEllipse {
        *EllipseCatalog::bundled().base()
    }

    #[test]
    fn bundled_catalog_loads() {
        let cat = EllipseCatalog::bundled();
        assert_eq!(cat.ellipses().len(), 25);
        assert_eq!(cat.base().center, BASE_CENTER);
        assert!(cat.source.contains("MacAdam"));
    }

    #[test]
    fn catalog_rejects_bad_input() {
        assert!(matches!(load_catalog(&b""[..]), Err(VibrationError::CatalogInvalid(_))));
        let short: String = BUNDLED_CATALOG.lines().filter(|l| !l.starts_with("25 ")).collect::<Vec<_>>().join("\n");
        assert!(matches!(load_catalog(short.as_bytes()), Err(VibrationError::CatalogInvalid(_))));
        let dup = BUNDLED_CATALOG.replace("25 0.365", "24 0.365");
        assert!(matches!(load_catalog(dup.as_bytes()), Err(VibrationError::CatalogInvalid(m)) if m.contains("duplicate")));
        let scaled = BUNDLED_CATALOG.replace("0.00230 0.00090", "2.3 0.9");
        assert!(matches!(load_catalog(scaled.as_bytes()), Err(VibrationError::CatalogInvalid(_))));
        let neg = BUNDLED_CATALOG.replace("0.00360 0.00095", "0.00360 -0.00095");
        assert!(matches!(load_catalog(neg.as_bytes()), Err(VibrationError::CatalogInvalid(_))));
    }

    #[test]
    fn zero_ratio_collapses_to_center() {
        let e = base();
        let p = pair_at(&e, 0.0, 0.4).unwrap();
        assert_eq!(p.plus, e.center);
        assert_eq!(p.minus, e.center);
        let (a, b) = pair_to_display(&p).unwrap();
        // frozen from an independent evaluation of the xyY -> sRGB pipeline
        assert_eq!(a, Srgb8::new(166, 170, 175));
        assert_eq!(b, a);
    }

    #[test]
    fn base_pair_in_gamut_up_to_fifty() {
        let e = base();
        for r in (0..=50).step_by(5) {
            let p = pair_at(&e, f64::from(r), 0.4).unwrap();
            assert!(p.in_gamut());
        }
        let p = pair_at(&e, 50.0, 0.4).unwrap();
        let (a, b) = pair_to_display(&p).unwrap();
        assert_ne!(a, b);
        // golden values of the pipeline at r = 50
        assert_eq!((a, b), (Srgb8::new(208, 160, 117), Srgb8::new(21, 184, 230)));
    }

    #[test]
    fn symmetric_pair_distance() {
        let e = base();
        let p = pair_at(&e, 30.0, 0.4).unwrap();
        let dp = e.center.distance(&p.plus);
        let dm = e.center.distance(&p.minus);
        assert!((dp - 30.0 * e.major).abs() < 1e-12);
        assert!((dm - 30.0 * e.major).abs() < 1e-12);
    }

    #[test]
    fn half_weight_matches_symmetric_pair() {
        let e = base();
        assert_eq!(weighted_pair(&e, 30.0, 0.5, 0.4).unwrap(), pair_at(&e, 30.0, 0.4).unwrap());
        assert_eq!(
            pair_to_display(&weighted_pair(&e, 30.0, 0.5, 0.4).unwrap()).unwrap(),
            pair_to_display(&pair_at(&e, 30.0, 0.4).unwrap()).unwrap()
        );
    }

    #[test]
    fn heavier_weight_shifts_yellow() {
        let e = base();
        let sym = pair_at(&e, 50.0, 0.4).unwrap();
        let p = weighted_pair(&e, 50.0, 0.7, 0.4).unwrap();
        let mid = |p: &VibrationPair| (p.plus.x + p.minus.x, p.plus.y + p.minus.y);
        assert!(mid(&p).0 + mid(&p).1 > mid(&sym).0 + mid(&sym).1);
        assert!(p.plus.x + p.plus.y > sym.plus.x + sym.plus.y);
        assert!((p.separation() - sym.separation()).abs() < 1e-12);
    }

    #[test]
    fn weight_bounds() {
        let e = base();
        assert_eq!(weighted_pair(&e, 30.0, 1.0, 0.4), Err(VibrationError::WeightOutOfRange(1.0)));
        assert_eq!(weighted_pair(&e, 30.0, 0.0, 0.4), Err(VibrationError::WeightOutOfRange(0.0)));
        assert!(matches!(pair_at(&e, -1.0, 0.4), Err(VibrationError::InvalidRatio(_))));
    }

    #[test]
    fn base_max_ratio() {
        let e = base();
        assert!(max_gamut_ratio(&e, 0.5, 0.4).unwrap() >= 50.0);
        assert_eq!(max_gamut_ratio(&e, 0.5, 0.0).unwrap(), DEFAULT_RATIO_CAP);
    }

    #[test]
    fn out_of_gamut_carries_max_ratio() {
        let e = base();
        let max = max_gamut_ratio(&e, 0.5, 0.4).unwrap();
        match pair_at(&e, max + 1.0, 0.4) {
            Err(VibrationError::OutOfGamut { max_ratio: Some(m), .. }) => assert_eq!(m, max),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blue_ellipse_at_high_luminance_matches_scan() {
        let cat = EllipseCatalog::bundled();
        // ellipse 3 sits in the blue-violet region
        let e = cat.get(3).unwrap();
        let scan = (0..=2000)
            .map(|i| f64::from(i) * 0.05)
            .take_while(|&r| raw_weighted_pair(e, r, 0.5, 0.9).in_gamut())
            .last();
        match (max_gamut_ratio(e, 0.5, 0.9), scan) {
            (Err(VibrationError::NoFeasibleRatio { .. }), None) => {}
            (Ok(r), Some(s)) => assert!((r - s).abs() <= 0.05 + 1e-3, "{r} vs {s}"),
            other => panic!("bisection and scan disagree: {other:?}"),
        }
    }

    #[test]
    fn gamut_boundary_for_every_ellipse() {
        for e in EllipseCatalog::bundled().ellipses() {
            let Ok(max) = max_gamut_ratio(e, 0.5, 0.4) else {
                assert!(!raw_weighted_pair(e, 0.0, 0.5, 0.4).in_gamut());
                continue;
            };
            assert!(weighted_pair(e, max, 0.5, 0.4).is_ok(), "ellipse {}", e.index);
            if max < DEFAULT_RATIO_CAP {
                assert!(weighted_pair(e, max + 0.01, 0.5, 0.4).is_err(), "ellipse {}", e.index);
            }
        }
    }

    #[test]
    fn isoluminant_endpoints() {
        let p = pair_at(&base(), 40.0, 0.4).unwrap();
        let a = colorimetry::xyy_to_xyz(p.plus_xyy()).unwrap();
        let b = colorimetry::xyy_to_xyz(p.minus_xyy()).unwrap();
        assert_eq!(a.y.to_bits(), b.y.to_bits());
    }

    proptest! {
        #[test]
        fn midpoint_is_center(r in 0.0f64..50.0) {
            let e = base();
            let p = pair_at(&e, r, 0.4).unwrap();
            prop_assert!(((p.plus.x + p.minus.x) / 2.0 - e.center.x).abs() < 1e-12);
            prop_assert!(((p.plus.y + p.minus.y) / 2.0 - e.center.y).abs() < 1e-12);
        }

        #[test]
        fn separation_is_linear(r in 0.0f64..25.0) {
            let e = base();
            let one = pair_at(&e, r, 0.4).unwrap().separation();
            let two = pair_at(&e, 2.0 * r, 0.4).unwrap().separation();
            prop_assert!((two - 2.0 * one).abs() < 1e-12);
        }

        #[test]
        fn weight_sets_distance_ratio(r in 1.0f64..40.0, w in 0.05f64..0.95) {
            let e = base();
            let p = raw_weighted_pair(&e, r, w, 0.4);
            let ratio = e.center.distance(&p.plus) / e.center.distance(&p.minus);
            prop_assert!((ratio - w / (1.0 - w)).abs() < 1e-9);
            prop_assert!((p.separation() - 2.0 * r * e.major).abs() < 1e-12);
        }
    }
}
