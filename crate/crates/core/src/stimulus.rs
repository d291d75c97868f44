//! Display geometry and rendering of vibration frame pairs.
//!
//! All geometry enters in millimetres and is converted with the display
//! profile. Circles are hard-edged: a pixel belongs to a circle when its
//! center lies strictly inside the radius.

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::colorimetry::{self, ColorError, Srgb8, XyChromaticity, XyYColor};
use crate::psychometry::{self, Condition, Probability, PsychometryError, ThresholdTable, UserCalibration};
use crate::vibration::{self, MacAdamEllipse, VibrationError, VibrationPair, BASE_LUMINANCE};

/// Lowest refresh rate whose half (the alternation rate) clears the ~25 Hz
/// chromatic fusion frequency.
pub const MIN_REFRESH_HZ: f64 = 50.0;

const ISOTROPY_TOLERANCE: f64 = 0.005;

pub const GRAY_RANGE: (u8, u8) = (60, 196);
pub const DEFAULT_ROI_DIAMETER_MM: f64 = 44.0;
pub const DEFAULT_VIBRATION_DIAMETER_MM: f64 = 80.0;
pub const CALIBRATION_DIAMETER_MM: f64 = 120.0;
/// Probability level of the threshold used for guidance stimuli.
pub const GUIDANCE_PROBABILITY: Probability = Probability::P75;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StimulusError {
    #[error("invalid display profile: {0}")]
    InvalidProfile(String),
    #[error("pixels are not square: {h_scale:.4} px/mm horizontally vs {v_scale:.4} px/mm vertically")]
    AnisotropicPixels { h_scale: f64, v_scale: f64 },
    #[error("empty image")]
    EmptyImage,
    #[error("geometry does not fit: {0}")]
    GeometryOverflow(String),
    #[error("invalid region of interest: {0}")]
    InvalidRoi(String),
    #[error("pair at r={ratio} is out of gamut for gray level {gray} (Y={luminance:.4})")]
    PerPixelGamutViolation { gray: u8, luminance: f64, ratio: f64 },
    #[error(transparent)]
    Vibration(#[from] VibrationError),
    #[error(transparent)]
    Psychometry(#[from] PsychometryError),
    #[error(transparent)]
    Color(#[from] ColorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplayProfile {
    pub width_mm: f64,
    pub height_mm: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub viewing_distance_mm: f64,
    pub refresh_hz: f64,
}

impl DisplayProfile {
    /// 42.5-inch 16:9 4K panel viewed from 500 mm.
    pub fn lcd_42in_4k() -> Self {
        Self {
            width_mm: 941.0,
            height_mm: 529.3,
            width_px: 3840,
            height_px: 2160,
            viewing_distance_mm: 500.0,
            refresh_hz: 60.0,
        }
    }

    pub fn validate(&self) -> Result<(), StimulusError> {
        let positive = [
            ("width_mm", self.width_mm),
            ("height_mm", self.height_mm),
            ("viewing_distance_mm", self.viewing_distance_mm),
            ("refresh_hz", self.refresh_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(StimulusError::InvalidProfile(format!("{name} must be positive, got {v}")));
            }
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(StimulusError::InvalidProfile("resolution must be non-zero".into()));
        }
        if self.refresh_hz < MIN_REFRESH_HZ {
            return Err(StimulusError::InvalidProfile(format!(
                "refresh {} Hz alternates below the color fusion frequency (need >= {MIN_REFRESH_HZ} Hz)",
                self.refresh_hz
            )));
        }
        Ok(())
    }

    pub fn px_per_mm(&self) -> Result<f64, StimulusError> {
        self.validate()?;
        let h_scale = f64::from(self.width_px) / self.width_mm;
        let v_scale = f64::from(self.height_px) / self.height_mm;
        if ((h_scale - v_scale) / h_scale).abs() > ISOTROPY_TOLERANCE {
            return Err(StimulusError::AnisotropicPixels { h_scale, v_scale });
        }
        Ok(h_scale)
    }

    /// Radius in pixels of a disk subtending `angle_deg` (full angle) at the
    /// viewing distance.
    pub fn visual_angle_radius_px(&self, angle_deg: f64) -> Result<f64, StimulusError> {
        let radius_mm = self.viewing_distance_mm * (angle_deg.to_radians() / 2.0).tan();
        mm_to_px(self, radius_mm)
    }
}

pub fn mm_to_px(profile: &DisplayProfile, length_mm: f64) -> Result<f64, StimulusError> {
    Ok(length_mm * profile.px_per_mm()?)
}

/// Visual angle in degrees of a point `l_mm` away from the fixation point.
pub fn eccentricity_to_angle(profile: &DisplayProfile, l_mm: f64) -> f64 {
    (l_mm / profile.viewing_distance_mm).atan().to_degrees()
}

/// Grayscale conversion followed by the affine remap of `[0, 255]` onto
/// `[60, 196]`.
pub fn prepare_image(raster: &RgbImage) -> Result<GrayImage, StimulusError> {
    if raster.width() == 0 || raster.height() == 0 {
        return Err(StimulusError::EmptyImage);
    }
    let (lo, hi) = (f64::from(GRAY_RANGE.0), f64::from(GRAY_RANGE.1));
    Ok(GrayImage::from_fn(raster.width(), raster.height(), |x, y| {
        let [r, g, b] = raster.get_pixel(x, y).0;
        let luma = 0.2126 * f64::from(r) + 0.7152 * f64::from(g) + 0.0722 * f64::from(b);
        image::Luma([(lo + luma * (hi - lo) / 255.0).round() as u8])
    }))
}

/// A circle in pixel coordinates of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

impl Circle {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        let dx = f64::from(px) + 0.5 - self.center_x;
        let dy = f64::from(py) + 0.5 - self.center_y;
        dx * dx + dy * dy < self.radius * self.radius
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.center_x - self.radius >= 0.0
            && self.center_y - self.radius >= 0.0
            && self.center_x + self.radius <= f64::from(width)
            && self.center_y + self.radius <= f64::from(height)
    }

    /// Pixel rows/columns that can intersect the circle, clipped to the frame.
    fn bounds(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let clip = |v: f64, max: u32| v.max(0.0).min(f64::from(max)) as u32;
        (
            clip((self.center_x - self.radius).floor(), width),
            clip((self.center_x + self.radius).ceil(), width),
            clip((self.center_y - self.radius).floor(), height),
            clip((self.center_y + self.radius).ceil(), height),
        )
    }

    pub fn for_each_pixel(&self, width: u32, height: u32, mut f: impl FnMut(u32, u32)) {
        let (x0, x1, y0, y1) = self.bounds(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x, y) {
                    f(x, y);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceCondition {
    Unmodified,
    UnobtrusiveVibration,
    ObtrusiveVibration,
    ExplicitCircle,
}

impl GuidanceCondition {
    pub const ALL: [GuidanceCondition; 4] = [
        GuidanceCondition::Unmodified,
        GuidanceCondition::UnobtrusiveVibration,
        GuidanceCondition::ObtrusiveVibration,
        GuidanceCondition::ExplicitCircle,
    ];

    /// Threshold row that sets the amplitude, for vibrating conditions.
    pub fn threshold_condition(self) -> Option<Condition> {
        match self {
            GuidanceCondition::UnobtrusiveVibration => Some(Condition::Awareness),
            GuidanceCondition::ObtrusiveVibration => Some(Condition::Discomfort),
            _ => None,
        }
    }
}

impl std::str::FromStr for GuidanceCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unmodified" => Ok(Self::Unmodified),
            "unobtrusive" | "unobtrusive_vibration" => Ok(Self::UnobtrusiveVibration),
            "obtrusive" | "obtrusive_vibration" => Ok(Self::ObtrusiveVibration),
            "explicit" | "explicit_circle" => Ok(Self::ExplicitCircle),
            other => Err(format!(
                "unknown condition {other:?} (expected unmodified, unobtrusive, obtrusive or explicit)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    /// ROI center in image pixel coordinates.
    pub center_px: (f64, f64),
    pub roi_diameter_mm: f64,
    pub vibration_diameter_mm: f64,
}

impl RoiSpec {
    pub fn new(center_px: (f64, f64)) -> Self {
        Self {
            center_px,
            roi_diameter_mm: DEFAULT_ROI_DIAMETER_MM,
            vibration_diameter_mm: DEFAULT_VIBRATION_DIAMETER_MM,
        }
    }

    /// Distance in mm from the image center, the image being centered on
    /// the display at native resolution.
    pub fn eccentricity_mm(&self, image_width: u32, image_height: u32, profile: &DisplayProfile) -> Result<f64, StimulusError> {
        let dx = self.center_px.0 - f64::from(image_width) / 2.0;
        let dy = self.center_px.1 - f64::from(image_height) / 2.0;
        Ok(dx.hypot(dy) / profile.px_per_mm()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleGeometry {
    pub center_px: (f64, f64),
    pub diameter_px: f64,
    pub diameter_mm: f64,
    pub eccentricity_mm: f64,
    pub vibrating: bool,
}

impl CircleGeometry {
    pub fn circle(&self) -> Circle {
        Circle {
            center_x: self.center_px.0,
            center_y: self.center_px.1,
            radius: self.diameter_px / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusKind {
    Threshold,
    Calibration,
    Guidance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusMetadata {
    pub kind: StimulusKind,
    pub width_px: u32,
    pub height_px: u32,
    pub px_per_mm: f64,
    pub circles: Vec<CircleGeometry>,
    pub ratio: f64,
    pub weight: f64,
    #[serde(rename = "Y")]
    pub luminance: f64,
    pub ellipse: u8,
    pub plus: XyChromaticity,
    pub minus: XyChromaticity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition: Option<GuidanceCondition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roi: Option<RoiSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roi_eccentricity_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_outside_calibration: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_sha256: Option<String>,
    pub frame_a_sha256: String,
    pub frame_b_sha256: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusFramePair {
    pub frame_a: RgbImage,
    pub frame_b: RgbImage,
    pub metadata: StimulusMetadata,
}

/// Lossless PNG bytes of a frame. Both the CLI and the service write
/// frames through this.
pub fn encode_png(frame: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut out = std::io::Cursor::new(Vec::new());
    frame.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn sha256_hex(width: u32, height: u32, pixels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(width.to_le_bytes());
    h.update(height.to_le_bytes());
    h.update(pixels);
    hex::encode(h.finalize())
}

fn rgb(c: Srgb8) -> Rgb<u8> {
    Rgb(c.to_array())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStimulusOptions {
    /// Color of everything outside the circles.
    pub background: Srgb8,
    #[serde(rename = "Y")]
    pub luminance: f64,
}

impl Default for ThresholdStimulusOptions {
    fn default() -> Self {
        Self {
            background: Srgb8::new(128, 128, 128),
            luminance: BASE_LUMINANCE,
        }
    }
}

/// Unit offsets of the four peripheral circles, clockwise from the top,
/// in screen coordinates (y grows downward). Index `k` is at position
/// `k - 1`.
pub const PERIPHERAL_DIRECTIONS: [(f64, f64); 4] = [(0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)];

/// Circle layout of one threshold trial: one central circle when `l = 0`,
/// otherwise four circles at eccentricity `l`.
pub fn threshold_layout(
    profile: &DisplayProfile,
    d_mm: f64,
    l_mm: f64,
    vibrating_index: Option<u8>,
) -> Result<Vec<CircleGeometry>, StimulusError> {
    let scale = profile.px_per_mm()?;
    if !(d_mm > 0.0) || !(l_mm >= 0.0) {
        return Err(StimulusError::GeometryOverflow(format!("d={d_mm} mm, l={l_mm} mm")));
    }
    let cx = f64::from(profile.width_px) / 2.0;
    let cy = f64::from(profile.height_px) / 2.0;
    let diameter_px = d_mm * scale;
    let circles: Vec<CircleGeometry> = if l_mm == 0.0 {
        vec![CircleGeometry {
            center_px: (cx, cy),
            diameter_px,
            diameter_mm: d_mm,
            eccentricity_mm: 0.0,
            vibrating: true,
        }]
    } else {
        let vib = vibrating_index
            .filter(|i| (1..=4).contains(i))
            .ok_or_else(|| StimulusError::GeometryOverflow("peripheral layouts need a vibrating index in 1..=4".into()))?;
        PERIPHERAL_DIRECTIONS
            .iter()
            .enumerate()
            .map(|(i, (dx, dy))| CircleGeometry {
                center_px: (cx + dx * l_mm * scale, cy + dy * l_mm * scale),
                diameter_px,
                diameter_mm: d_mm,
                eccentricity_mm: l_mm,
                vibrating: i + 1 == usize::from(vib),
            })
            .collect()
    };
    for c in &circles {
        if !c.circle().fits_in(profile.width_px, profile.height_px) {
            return Err(StimulusError::GeometryOverflow(format!(
                "circle of {d_mm} mm at {l_mm} mm leaves the {}x{} px panel",
                profile.width_px, profile.height_px
            )));
        }
    }
    Ok(circles)
}

fn pair_metadata(
    kind: StimulusKind,
    width: u32,
    height: u32,
    px_per_mm: f64,
    circles: Vec<CircleGeometry>,
    pair: &VibrationPair,
    frame_a: &RgbImage,
    frame_b: &RgbImage,
) -> StimulusMetadata {
    StimulusMetadata {
        kind,
        width_px: width,
        height_px: height,
        px_per_mm,
        circles,
        ratio: pair.ratio,
        weight: pair.weight,
        luminance: pair.luminance,
        ellipse: pair.source_ellipse,
        plus: pair.plus,
        minus: pair.minus,
        condition: None,
        roi: None,
        roi_eccentricity_mm: None,
        weight_outside_calibration: None,
        source_sha256: None,
        frame_a_sha256: sha256_hex(width, height, frame_a.as_raw()),
        frame_b_sha256: sha256_hex(width, height, frame_b.as_raw()),
        notes: Vec::new(),
    }
}

/// Full-panel frame pair for one threshold trial. The vibrating circle
/// carries the yellowish endpoint in `frame_a` and the bluish one in
/// `frame_b`; the other circles show the ellipse center color.
pub fn render_threshold_stimulus(
    profile: &DisplayProfile,
    ellipse: &MacAdamEllipse,
    r: f64,
    w: f64,
    d_mm: f64,
    l_mm: f64,
    vibrating_index: Option<u8>,
    options: &ThresholdStimulusOptions,
) -> Result<StimulusFramePair, StimulusError> {
    let circles = threshold_layout(profile, d_mm, l_mm, vibrating_index)?;
    let pair = vibration::weighted_pair(ellipse, r, w, options.luminance)?;
    let (plus, minus) = vibration::pair_to_display(&pair)?;
    let solid = colorimetry::xyy_to_srgb8(XyYColor {
        chroma: ellipse.center,
        luminance: options.luminance,
    })?;
    let (width, height) = (profile.width_px, profile.height_px);
    let mut frame_a = RgbImage::from_pixel(width, height, rgb(options.background));
    let mut frame_b = frame_a.clone();
    for c in &circles {
        let (ca, cb) = if c.vibrating { (plus, minus) } else { (solid, solid) };
        c.circle().for_each_pixel(width, height, |x, y| {
            frame_a.put_pixel(x, y, rgb(ca));
            frame_b.put_pixel(x, y, rgb(cb));
        });
    }
    let metadata = pair_metadata(
        StimulusKind::Threshold,
        width,
        height,
        profile.px_per_mm()?,
        circles,
        &pair,
        &frame_a,
        &frame_b,
    );
    Ok(StimulusFramePair { frame_a, frame_b, metadata })
}

/// Color-fitting stimulus: a 120 mm circle at the panel center whose left
/// half is the solid center color and whose right half vibrates.
pub fn render_calibration_stimulus(
    profile: &DisplayProfile,
    ellipse: &MacAdamEllipse,
    r: f64,
    w: f64,
    options: &ThresholdStimulusOptions,
) -> Result<StimulusFramePair, StimulusError> {
    let mut layout = threshold_layout(profile, CALIBRATION_DIAMETER_MM, 0.0, None)?;
    let pair = vibration::weighted_pair(ellipse, r, w, options.luminance)?;
    let (plus, minus) = vibration::pair_to_display(&pair)?;
    let solid = colorimetry::xyy_to_srgb8(XyYColor {
        chroma: ellipse.center,
        luminance: options.luminance,
    })?;
    let (width, height) = (profile.width_px, profile.height_px);
    let mut frame_a = RgbImage::from_pixel(width, height, rgb(options.background));
    let mut frame_b = frame_a.clone();
    let circle = layout[0].circle();
    circle.for_each_pixel(width, height, |x, y| {
        let right = f64::from(x) + 0.5 >= circle.center_x;
        let (ca, cb) = if right { (plus, minus) } else { (solid, solid) };
        frame_a.put_pixel(x, y, rgb(ca));
        frame_b.put_pixel(x, y, rgb(cb));
    });
    layout[0].vibrating = true;
    let metadata = pair_metadata(
        StimulusKind::Calibration,
        width,
        height,
        profile.px_per_mm()?,
        layout,
        &pair,
        &frame_a,
        &frame_b,
    );
    Ok(StimulusFramePair { frame_a, frame_b, metadata })
}

/// Afterimage-suppression frame: the given circles turn black, everything
/// else is copied from `frame`.
pub fn render_inverted(frame: &RgbImage, circles: &[Circle]) -> RgbImage {
    let mut out = frame.clone();
    let (w, h) = out.dimensions();
    for c in circles {
        c.for_each_pixel(w, h, |x, y| out.put_pixel(x, y, Rgb([0, 0, 0])));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceOptions {
    /// Chromaticity used to colorize unmodulated gray pixels.
    pub neutral: XyChromaticity,
    pub outline_color: Srgb8,
    pub outline_px: u32,
    /// Reduce `r` per pixel instead of failing when a gray level cannot
    /// carry the pair.
    pub clamp_per_pixel: bool,
    /// Bypass the table lookup with a fixed amplitude.
    pub ratio_override: Option<f64>,
}

impl Default for GuidanceOptions {
    fn default() -> Self {
        Self {
            neutral: vibration::BASE_CENTER,
            outline_color: Srgb8::new(255, 0, 0),
            outline_px: 3,
            clamp_per_pixel: false,
            ratio_override: None,
        }
    }
}

/// Luminance carried by a gray level of the prepared image. Guidance pixels
/// are quantized with [`colorimetry::xyy_to_srgb8_luminance_matched`] so
/// both frames stay isoluminant after 8-bit rounding.
pub fn gray_luminance(gray: u8) -> f64 {
    colorimetry::gamma_decode(f64::from(gray) / 255.0)
}

type Lut = [Option<Srgb8>; 256];

fn gray_levels(image: &GrayImage, region: Option<&Circle>) -> [bool; 256] {
    let mut present = [false; 256];
    match region {
        None => image.pixels().for_each(|p| present[usize::from(p.0[0])] = true),
        Some(c) => {
            let (w, h) = image.dimensions();
            c.for_each_pixel(w, h, |x, y| present[usize::from(image.get_pixel(x, y).0[0])] = true);
        }
    }
    present
}

fn neutral_lut(neutral: XyChromaticity, present: &[bool; 256]) -> Result<Lut, StimulusError> {
    let mut out = [None; 256];
    for g in (0..=255u8).filter(|&g| present[usize::from(g)]) {
        let luminance = gray_luminance(g);
        let c = colorimetry::xyy_to_srgb8_luminance_matched(XyYColor { chroma: neutral, luminance })
            .map_err(|_| StimulusError::PerPixelGamutViolation { gray: g, luminance, ratio: 0.0 })?;
        out[usize::from(g)] = Some(c);
    }
    Ok(out)
}

fn lookup(lut: &Lut, g: u8) -> Rgb<u8> {
    rgb(lut[usize::from(g)].expect("lut covers every present gray level"))
}

/// Renders one guidance image under `condition`.
///
/// Vibrating conditions take `r` from the 75 % row of the matching
/// threshold condition at the vibration-circle diameter, interpolated to
/// the ROI eccentricity, and `w` from the participant's calibration at that
/// `r`. Each pixel keeps the luminance of its gray level; only the
/// chromaticity alternates.
#[allow(clippy::too_many_arguments)]
pub fn render_guidance(
    image: &GrayImage,
    roi: &RoiSpec,
    condition: GuidanceCondition,
    table: &ThresholdTable,
    calibration: &UserCalibration,
    profile: &DisplayProfile,
    ellipse: &MacAdamEllipse,
    options: &GuidanceOptions,
) -> Result<StimulusFramePair, StimulusError> {
    let (width, height) = image.dimensions();
    if width == 0 || height == 0 {
        return Err(StimulusError::EmptyImage);
    }
    let scale = profile.px_per_mm()?;
    if !(roi.roi_diameter_mm > 0.0) || roi.vibration_diameter_mm < roi.roi_diameter_mm {
        return Err(StimulusError::InvalidRoi(format!(
            "vibration diameter {} mm must cover ROI diameter {} mm",
            roi.vibration_diameter_mm, roi.roi_diameter_mm
        )));
    }
    let vib_circle = Circle {
        center_x: roi.center_px.0,
        center_y: roi.center_px.1,
        radius: roi.vibration_diameter_mm * scale / 2.0,
    };
    if !vib_circle.fits_in(width, height) {
        return Err(StimulusError::GeometryOverflow(format!(
            "vibration circle at ({}, {}) px leaves the {width}x{height} image",
            roi.center_px.0, roi.center_px.1
        )));
    }
    let l_mm = roi.eccentricity_mm(width, height, profile)?;

    let mut notes = Vec::new();
    let mut weight_flag = None;
    let (ratio, weight) = match (condition.threshold_condition(), options.ratio_override) {
        (None, _) => (0.0, 0.5),
        (Some(thr), over) => {
            let r = match over {
                Some(r) => r,
                None => {
                    let d_mm = roi.vibration_diameter_mm.round() as u32;
                    psychometry::interpolate_threshold(table, thr, GUIDANCE_PROBABILITY, d_mm, l_mm)?
                }
            };
            let est = psychometry::interpolate_weight(calibration, r)?;
            if est.outside_calibration {
                notes.push(format!("r={r:.3} outside calibrated range; used endpoint w={}", est.w));
            }
            weight_flag = Some(est.outside_calibration);
            (r, est.w)
        }
    };

    let neutral = neutral_lut(options.neutral, &gray_levels(image, None))?;
    let base = MacAdamEllipse {
        center: options.neutral,
        ..*ellipse
    };
    let reference = vibration::raw_weighted_pair(&base, ratio, weight, BASE_LUMINANCE);

    let mut frame_a = RgbImage::from_fn(width, height, |x, y| lookup(&neutral, image.get_pixel(x, y).0[0]));
    let mut frame_b;

    match condition {
        GuidanceCondition::Unmodified => {
            frame_b = frame_a.clone();
        }
        GuidanceCondition::ExplicitCircle => {
            let outer = roi.roi_diameter_mm * scale / 2.0;
            let ring_outer = Circle {
                center_x: roi.center_px.0,
                center_y: roi.center_px.1,
                radius: outer,
            };
            let ring_inner = Circle {
                radius: (outer - f64::from(options.outline_px)).max(0.0),
                ..ring_outer
            };
            ring_outer.for_each_pixel(width, height, |x, y| {
                if !ring_inner.contains(x, y) {
                    frame_a.put_pixel(x, y, rgb(options.outline_color));
                }
            });
            frame_b = frame_a.clone();
        }
        GuidanceCondition::UnobtrusiveVibration | GuidanceCondition::ObtrusiveVibration => {
            let present = gray_levels(image, Some(&vib_circle));
            let (plus, minus) = build_pair_lut(&base, ratio, weight, &present, options, &mut notes)?;
            frame_b = frame_a.clone();
            vib_circle.for_each_pixel(width, height, |x, y| {
                let g = image.get_pixel(x, y).0[0];
                frame_a.put_pixel(x, y, lookup(&plus, g));
                frame_b.put_pixel(x, y, lookup(&minus, g));
            });
        }
    }

    let circles = vec![CircleGeometry {
        center_px: roi.center_px,
        diameter_px: roi.vibration_diameter_mm * scale,
        diameter_mm: roi.vibration_diameter_mm,
        eccentricity_mm: l_mm,
        vibrating: condition.threshold_condition().is_some(),
    }];
    let mut metadata = pair_metadata(
        StimulusKind::Guidance,
        width,
        height,
        scale,
        circles,
        &reference,
        &frame_a,
        &frame_b,
    );
    metadata.condition = Some(condition);
    metadata.roi = Some(*roi);
    metadata.roi_eccentricity_mm = Some(l_mm);
    metadata.weight_outside_calibration = weight_flag;
    metadata.source_sha256 = Some(sha256_hex(width, height, image.as_raw()));
    metadata.notes = notes;
    // luminance varies per pixel; record the reference level instead of NaN
    metadata.luminance = BASE_LUMINANCE;
    Ok(StimulusFramePair { frame_a, frame_b, metadata })
}

fn build_pair_lut(
    ellipse: &MacAdamEllipse,
    ratio: f64,
    weight: f64,
    present: &[bool; 256],
    options: &GuidanceOptions,
    notes: &mut Vec<String>,
) -> Result<(Lut, Lut), StimulusError> {
    let mut plus = [None; 256];
    let mut minus = [None; 256];
    for g in (0..=255u8).filter(|&g| present[usize::from(g)]) {
        let luminance = gray_luminance(g);
        let mut pair = vibration::raw_weighted_pair(ellipse, ratio, weight, luminance);
        if !pair.in_gamut() {
            if !options.clamp_per_pixel {
                return Err(StimulusError::PerPixelGamutViolation { gray: g, luminance, ratio });
            }
            let max = vibration::max_gamut_ratio_capped(ellipse, weight, luminance, ratio)
                .map_err(|_| StimulusError::PerPixelGamutViolation { gray: g, luminance, ratio })?;
            log::warn!("gray {g}: clamping r from {ratio} to {max}");
            notes.push(format!("gray {g}: r clamped from {ratio:.3} to {max:.3}"));
            pair = vibration::raw_weighted_pair(ellipse, max, weight, luminance);
        }
        plus[usize::from(g)] = Some(colorimetry::xyy_to_srgb8_luminance_matched(pair.plus_xyy())?);
        minus[usize::from(g)] = Some(colorimetry::xyy_to_srgb8_luminance_matched(pair.minus_xyy())?);
    }
    Ok((plus, minus))
}

/// Target preview: the ROI disk of the prepared image, neutrally colorized,
/// centered on a black panel-sized frame.
pub fn render_target_preview(
    image: &GrayImage,
    roi: &RoiSpec,
    profile: &DisplayProfile,
    options: &GuidanceOptions,
) -> Result<RgbImage, StimulusError> {
    let scale = profile.px_per_mm()?;
    let neutral = neutral_lut(options.neutral, &gray_levels(image, None))?;
    let (w, h) = (profile.width_px, profile.height_px);
    let radius = roi.roi_diameter_mm * scale / 2.0;
    let target = Circle {
        center_x: f64::from(w) / 2.0,
        center_y: f64::from(h) / 2.0,
        radius,
    };
    let mut out = RgbImage::new(w, h);
    let (iw, ih) = image.dimensions();
    target.for_each_pixel(w, h, |x, y| {
        let sx = (f64::from(x) - target.center_x + roi.center_px.0).floor();
        let sy = (f64::from(y) - target.center_y + roi.center_px.1).floor();
        if sx >= 0.0 && sy >= 0.0 && sx < f64::from(iw) && sy < f64::from(ih) {
            let g = image.get_pixel(sx as u32, sy as u32).0[0];
            out.put_pixel(x, y, lookup(&neutral, g));
        }
    });
    Ok(out)
}

/// Fixation screen: white cross on black at the panel center.
pub fn render_fixation(profile: &DisplayProfile, arm_mm: f64, thickness_px: u32) -> Result<RgbImage, StimulusError> {
    let arm = (arm_mm * profile.px_per_mm()?).round() as i64;
    let (w, h) = (profile.width_px, profile.height_px);
    let (cx, cy) = (i64::from(w / 2), i64::from(h / 2));
    let half = i64::from(thickness_px / 2);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let (x, y) = (i64::from(x), i64::from(y));
        let horizontal = (y - cy).abs() <= half && (x - cx).abs() <= arm;
        let vertical = (x - cx).abs() <= half && (y - cy).abs() <= arm;
        if horizontal || vertical {
            Rgb([255, 255, 255])
        } else {
            Rgb([0, 0, 0])
        }
    }))
}
