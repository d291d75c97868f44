//! CIE xyY / XYZ / sRGB conversions.
//!
//! Everything here is a pure function over `f64`. The XYZ to linear-RGB
//! matrix is the four-decimal D65 sRGB matrix; no chromatic adaptation is
//! applied.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible `y` chromaticity before xyY→XYZ is refused.
pub const CHROMATICITY_EPSILON: f64 = 1e-12;

/// Slack allowed on each side of `[0, 1]` when testing gamut membership.
pub const GAMUT_TOLERANCE: f64 = 1e-6;

/// XYZ → linear sRGB, row major.
pub const XYZ_TO_LINEAR_SRGB: [[f64; 3]; 3] = [
    [3.2406, -1.5372, -0.4986],
    [-0.9689, 1.8758, 0.0415],
    [0.0557, -0.2040, 1.0570],
];

const GAMMA_BREAKPOINT: f64 = 0.0031308;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ColorError {
    #[error("degenerate chromaticity (x={x}, y={y}): y must be positive")]
    DegenerateChromaticity { x: f64, y: f64 },
    #[error("color outside the sRGB gamut: linear rgb = ({r:.6}, {g:.6}, {b:.6})")]
    OutOfGamut { r: f64, g: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XyChromaticity {
    pub x: f64,
    pub y: f64,
}

impl XyChromaticity {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// True when the point can be used as a chromaticity: `x >= 0`, `y > 0`
    /// and `x + y <= 1`.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.x >= 0.0
            && self.y > CHROMATICITY_EPSILON
            && self.x + self.y <= 1.0
    }

    pub fn distance(&self, other: &XyChromaticity) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XyYColor {
    pub chroma: XyChromaticity,
    #[serde(rename = "Y")]
    pub luminance: f64,
}

impl XyYColor {
    pub const fn new(x: f64, y: f64, luminance: f64) -> Self {
        Self {
            chroma: XyChromaticity::new(x, y),
            luminance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XyzColor {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    #[serde(rename = "Z")]
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearRgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl LinearRgb {
    pub fn channels(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn in_gamut(&self) -> bool {
        self.channels()
            .iter()
            .all(|c| (-GAMUT_TOLERANCE..=1.0 + GAMUT_TOLERANCE).contains(c))
    }

    /// Smallest distance of any channel to the nearest gamut face. Negative
    /// when out of gamut.
    pub fn gamut_margin(&self) -> f64 {
        self.channels()
            .iter()
            .map(|&c| c.min(1.0 - c))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Srgb8 {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Srgb8 {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    pub const fn to_array(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub const fn from_array(c: [u8; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }
}

impl std::fmt::Display for Srgb8 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.r, self.g, self.b)
    }
}

pub fn xyy_to_xyz(c: XyYColor) -> Result<XyzColor, ColorError> {
    let XyChromaticity { x, y } = c.chroma;
    if !(y > CHROMATICITY_EPSILON) {
        return Err(ColorError::DegenerateChromaticity { x, y });
    }
    let lum = c.luminance;
    Ok(XyzColor {
        x: x * lum / y,
        y: lum,
        z: (1.0 - x - y) * lum / y,
    })
}

pub fn xyz_to_linear_rgb(c: XyzColor) -> LinearRgb {
    let v = [c.x, c.y, c.z];
    let row = |m: &[f64; 3]| m[0] * v[0] + m[1] * v[1] + m[2] * v[2];
    LinearRgb {
        r: row(&XYZ_TO_LINEAR_SRGB[0]),
        g: row(&XYZ_TO_LINEAR_SRGB[1]),
        b: row(&XYZ_TO_LINEAR_SRGB[2]),
    }
}

/// Inverse of [`XYZ_TO_LINEAR_SRGB`], used to recover luminance from pixels.
pub fn linear_rgb_to_xyz(c: LinearRgb) -> XyzColor {
    let m = inverse_matrix();
    let row = |i: usize| m[i][0] * c.r + m[i][1] * c.g + m[i][2] * c.b;
    XyzColor {
        x: row(0),
        y: row(1),
        z: row(2),
    }
}

/// sRGB transfer function. Values below the breakpoint, negatives included,
/// take the linear segment so out-of-gamut overshoot keeps its sign.
pub fn gamma_encode(c: f64) -> f64 {
    if c >= GAMMA_BREAKPOINT {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    } else {
        12.92 * c
    }
}

pub fn gamma_decode(e: f64) -> f64 {
    // encoded value of the breakpoint on the linear segment
    if e >= 12.92 * GAMMA_BREAKPOINT {
        ((e + 0.055) / 1.055).powf(2.4)
    } else {
        e / 12.92
    }
}

pub fn xyy_to_linear_rgb(c: XyYColor) -> Result<LinearRgb, ColorError> {
    xyy_to_xyz(c).map(xyz_to_linear_rgb)
}

pub fn in_gamut(c: XyYColor) -> bool {
    xyy_to_linear_rgb(c).map(|rgb| rgb.in_gamut()).unwrap_or(false)
}

/// Quantizes an encoded channel in `[0, 1]` to 8 bits, rounding half away
/// from zero.
pub fn quantize_channel(encoded: f64) -> u8 {
    (encoded.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an in-gamut linear color to 8-bit sRGB.
pub fn linear_to_srgb8(rgb: LinearRgb) -> Result<Srgb8, ColorError> {
    if !rgb.in_gamut() {
        return Err(ColorError::OutOfGamut {
            r: rgb.r,
            g: rgb.g,
            b: rgb.b,
        });
    }
    Ok(Srgb8::new(
        quantize_channel(gamma_encode(rgb.r)),
        quantize_channel(gamma_encode(rgb.g)),
        quantize_channel(gamma_encode(rgb.b)),
    ))
}

pub fn xyy_to_srgb8(c: XyYColor) -> Result<Srgb8, ColorError> {
    linear_to_srgb8(xyy_to_linear_rgb(c)?)
}

/// Like [`xyy_to_srgb8`], but picks among the floor/ceil codes of each
/// channel the triple whose decoded luminance is closest to `Y`, breaking
/// ties by distance to the unquantized color. Every channel stays within
/// one code of [`xyy_to_srgb8`].
pub fn xyy_to_srgb8_luminance_matched(c: XyYColor) -> Result<Srgb8, ColorError> {
    let rgb = xyy_to_linear_rgb(c)?;
    if !rgb.in_gamut() {
        return Err(ColorError::OutOfGamut {
            r: rgb.r,
            g: rgb.g,
            b: rgb.b,
        });
    }
    let scaled = rgb.channels().map(|v| gamma_encode(v).clamp(0.0, 1.0) * 255.0);
    let options = scaled.map(|v| [v.floor() as u8, v.ceil() as u8]);
    let mut best: Option<(f64, f64, Srgb8)> = None;
    for r in options[0] {
        for g in options[1] {
            for b in options[2] {
                let cand = Srgb8::new(r, g, b);
                let lum_err = (srgb8_luminance(cand) - c.luminance).abs();
                let code_err: f64 = cand
                    .to_array()
                    .iter()
                    .zip(scaled)
                    .map(|(&q, v)| (f64::from(q) - v).powi(2))
                    .sum();
                let better = match best {
                    None => true,
                    Some((le, ce, _)) => lum_err < le || (lum_err == le && code_err < ce),
                };
                if better {
                    best = Some((lum_err, code_err, cand));
                }
            }
        }
    }
    Ok(best.expect("at least one candidate").2)
}

pub fn srgb8_to_linear(c: Srgb8) -> LinearRgb {
    let dec = |v: u8| gamma_decode(f64::from(v) / 255.0);
    LinearRgb {
        r: dec(c.r),
        g: dec(c.g),
        b: dec(c.b),
    }
}

/// Relative luminance `Y` of an 8-bit sRGB pixel.
pub fn srgb8_luminance(c: Srgb8) -> f64 {
    let lin = srgb8_to_linear(c);
    let m = inverse_matrix();
    m[1][0] * lin.r + m[1][1] * lin.g + m[1][2] * lin.b
}

fn inverse_matrix() -> &'static [[f64; 3]; 3] {
    static INV: std::sync::OnceLock<[[f64; 3]; 3]> = std::sync::OnceLock::new();
    INV.get_or_init(|| {
        let m = nalgebra::Matrix3::from_row_slice(&XYZ_TO_LINEAR_SRGB.concat());
        let inv = m.try_inverse().expect("sRGB matrix is invertible");
        std::array::from_fn(|i| std::array::from_fn(|j| inv[(i, j)]))
    })
}
