//! `colorvib` command line. Batch commands call the library directly;
//! `serve` runs the session service and `client` talks to a running one.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use colorvib_client::Client;
use colorvib_core::colorimetry::{self, XyChromaticity, XyYColor};
use colorvib_core::gaze::{self, DEFAULT_TIME_LIMIT_S, EXPLORED_DISK_ANGLE_DEG};
use colorvib_core::psychometry::{self, PerceptState, ThresholdTable, UserCalibration};
use colorvib_core::session::api::ResponsePayload;
use colorvib_core::session::calibration::CalibrationInput;
use colorvib_core::session::config::{SessionConfig, ENV_PREFIX};
use colorvib_core::session::log::{parse_log, LogEntry};
use colorvib_core::session::plan::StudyKind;
use colorvib_core::stimulus::{
    self, DisplayProfile, GuidanceCondition, GuidanceOptions, RoiSpec, StimulusFramePair, ThresholdStimulusOptions,
    DEFAULT_ROI_DIAMETER_MM, DEFAULT_VIBRATION_DIAMETER_MM,
};
use colorvib_core::vibration::{self, EllipseCatalog, BASE_LUMINANCE};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub const DEFAULT_URL: &str = "http://127.0.0.1:7878";
const CENTER_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        1
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_weight(s: &str) -> Result<f64, String> {
    let w: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if w > 0.0 && w < 1.0 {
        Ok(w)
    } else {
        Err(format!("weight must lie strictly between 0 and 1, got {w}"))
    }
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite value >= 0, got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v = parse_non_negative(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("expected a value > 0".into())
    }
}

fn parse_luminance(s: &str) -> Result<f64, String> {
    let v = parse_positive(s)?;
    if v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("relative luminance must be in (0, 1], got {v}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "colorvib", version, about = "Color-vibration stimulus synthesis, experiment service and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the vibration color pair around a catalog ellipse.
    Pair(PairArgs),
    /// Convert one xyY color to linear RGB and 8-bit sRGB.
    Convert(ConvertArgs),
    /// Render the two frames of a guidance stimulus from an image.
    Stimulus(StimulusArgs),
    /// Render a threshold-study or color-fitting frame pair.
    ThresholdStimulus(ThresholdStimulusArgs),
    /// Fit psychometric curves and write the threshold table.
    Fit(FitArgs),
    /// Per-trial completion time and explored-area ratio from a gaze recording.
    Gaze(GazeArgs),
    /// Extract threshold responses and the fitted calibration from a session log.
    Export(ExportArgs),
    /// Run the experiment session service.
    Serve(ServeArgs),
    /// Send one request to a running session service.
    Client(ClientArgs),
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Chromaticity x of the ellipse center
    #[arg(long)]
    pub x: f64,
    /// Chromaticity y of the ellipse center
    #[arg(long)]
    pub y: f64,
    /// Relative luminance Y in (0, 1]
    #[arg(long = "Y", default_value_t = BASE_LUMINANCE, value_parser = parse_luminance)]
    pub luminance: f64,
    /// Vibration ratio r (multiples of the semi-major axis, >= 0)
    #[arg(long, value_parser = parse_non_negative)]
    pub r: f64,
    /// Weight w in (0, 1); the yellowish endpoint sits at 2·r·a·w
    #[arg(long, default_value_t = 0.5, value_parser = parse_weight)]
    pub w: f64,
    /// Ellipse catalog file instead of the bundled one
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Chromaticity x
    #[arg(long)]
    pub x: f64,
    /// Chromaticity y
    #[arg(long)]
    pub y: f64,
    /// Relative luminance Y in (0, 1]
    #[arg(long = "Y", value_parser = parse_luminance)]
    pub luminance: f64,
}

#[derive(Debug, Args)]
pub struct DisplayArgs {
    /// Display profile TOML (width_mm, height_mm, width_px, height_px,
    /// viewing_distance_mm, refresh_hz); defaults to a 42-inch 3840x2160 panel at 500 mm
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

impl DisplayArgs {
    fn load(&self) -> Result<DisplayProfile, CliError> {
        let profile = match &self.profile {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                toml::from_str(&text).map_err(|e| io_err(p, e))?
            }
            None => DisplayProfile::lcd_42in_4k(),
        };
        profile.px_per_mm().map_err(domain)?;
        Ok(profile)
    }
}

fn length_mm(mm: Option<f64>, px: Option<f64>, default_mm: f64, profile: &DisplayProfile) -> Result<f64, CliError> {
    match (mm, px) {
        (Some(v), _) => Ok(v),
        (None, Some(p)) => Ok(p / profile.px_per_mm().map_err(domain)?),
        (None, None) => Ok(default_mm),
    }
}

fn length_px(mm: Option<f64>, px: Option<f64>, profile: &DisplayProfile) -> Result<f64, CliError> {
    match (mm, px) {
        (_, Some(p)) => Ok(p),
        (Some(v), None) => stimulus::mm_to_px(profile, v).map_err(domain),
        (None, None) => Err(CliError::Domain("missing length".into())),
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CircleDiameter {
    /// Circle diameter in millimeters
    #[arg(long = "d-mm", value_parser = parse_positive)]
    pub d_mm: Option<f64>,
    /// Circle diameter in display pixels
    #[arg(long = "d-px", value_parser = parse_positive)]
    pub d_px: Option<f64>,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct Eccentricity {
    /// Distance of the circle centers from the panel center in millimeters (default 0)
    #[arg(long = "l-mm", value_parser = parse_non_negative)]
    pub l_mm: Option<f64>,
    /// Distance of the circle centers from the panel center in display pixels
    #[arg(long = "l-px", value_parser = parse_non_negative)]
    pub l_px: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ThresholdStimulusArgs {
    /// Vibration ratio r (multiples of the semi-major axis, >= 0)
    #[arg(long, value_parser = parse_non_negative)]
    pub r: f64,
    /// Weight w in (0, 1)
    #[arg(long, default_value_t = 0.5, value_parser = parse_weight)]
    pub w: f64,
    #[command(flatten)]
    pub diameter: CircleDiameter,
    #[command(flatten)]
    pub eccentricity: Eccentricity,
    /// Vibrating peripheral circle, 1 = top, then clockwise (required when l > 0)
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub vibrating: Option<u8>,
    /// Render the split color-fitting circle instead (diameter flags still required, ignored)
    #[arg(long)]
    pub calibration_split: bool,
    /// Relative luminance Y in (0, 1]
    #[arg(long = "Y", default_value_t = BASE_LUMINANCE, value_parser = parse_luminance)]
    pub luminance: f64,
    /// Background gray level outside the circles (0-255)
    #[arg(long, default_value_t = 128)]
    pub background: u8,
    #[command(flatten)]
    pub display: DisplayArgs,
    /// Directory receiving frame_a.png, frame_b.png and metadata.json
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct RoiX {
    /// ROI center x measured from the image's left edge in millimeters
    #[arg(long = "roi-x-mm")]
    pub roi_x_mm: Option<f64>,
    /// ROI center x in image pixels
    #[arg(long = "roi-x-px")]
    pub roi_x_px: Option<f64>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct RoiY {
    /// ROI center y measured from the image's top edge in millimeters
    #[arg(long = "roi-y-mm")]
    pub roi_y_mm: Option<f64>,
    /// ROI center y in image pixels
    #[arg(long = "roi-y-px")]
    pub roi_y_px: Option<f64>,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct RoiDiameter {
    /// ROI diameter in millimeters (default 44)
    #[arg(long = "roi-diameter-mm", value_parser = parse_positive)]
    pub roi_d_mm: Option<f64>,
    /// ROI diameter in display pixels
    #[arg(long = "roi-diameter-px", value_parser = parse_positive)]
    pub roi_d_px: Option<f64>,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct VibrationDiameter {
    /// Vibrating-area diameter in millimeters (default 80)
    #[arg(long = "vibration-diameter-mm", value_parser = parse_positive)]
    pub vib_d_mm: Option<f64>,
    /// Vibrating-area diameter in display pixels
    #[arg(long = "vibration-diameter-px", value_parser = parse_positive)]
    pub vib_d_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConditionArg {
    Unmodified,
    Unobtrusive,
    Obtrusive,
    Explicit,
}

impl From<ConditionArg> for GuidanceCondition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::Unmodified => GuidanceCondition::Unmodified,
            ConditionArg::Unobtrusive => GuidanceCondition::UnobtrusiveVibration,
            ConditionArg::Obtrusive => GuidanceCondition::ObtrusiveVibration,
            ConditionArg::Explicit => GuidanceCondition::ExplicitCircle,
        }
    }
}

#[derive(Debug, Args)]
pub struct StimulusArgs {
    /// Source image (PNG), shown centered at native resolution
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub roi_x: RoiX,
    #[command(flatten)]
    pub roi_y: RoiY,
    #[command(flatten)]
    pub roi_diameter: RoiDiameter,
    #[command(flatten)]
    pub vibration_diameter: VibrationDiameter,
    #[arg(long, value_enum)]
    pub condition: ConditionArg,
    /// Threshold table CSV (required for the vibrating conditions)
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Participant calibration JSON (required for the vibrating conditions)
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Lower r per pixel where a gray level cannot carry the pair, instead of failing
    #[arg(long)]
    pub clamp_per_pixel: bool,
    /// Fixed ratio r instead of the table lookup
    #[arg(long, value_parser = parse_non_negative)]
    pub r: Option<f64>,
    #[command(flatten)]
    pub display: DisplayArgs,
    /// Directory receiving frame_a.png, frame_b.png and metadata.json
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Responses file (JSON lines with a format header)
    #[arg(long)]
    pub responses: PathBuf,
    /// Threshold table CSV to write
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-cell fit diagnostics (JSON lines)
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct DiskSize {
    /// Full visual angle of the explored disk around each gaze point in degrees (default 5)
    #[arg(long = "disk-angle-deg", value_parser = parse_positive)]
    pub angle_deg: Option<f64>,
    /// Explored disk radius in display pixels
    #[arg(long = "disk-radius-px", value_parser = parse_positive)]
    pub radius_px: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GazeArgs {
    /// Gaze samples CSV: t,x,y,valid (camera pixels)
    #[arg(long)]
    pub samples: PathBuf,
    /// Marker CSV: t, four camera corners, four display corners (pixels)
    #[arg(long)]
    pub markers: PathBuf,
    /// Trial CSV: trial,start_t,correct,latency_s,region_x,region_y,region_w,region_h (display pixels)
    #[arg(long)]
    pub trials: PathBuf,
    #[command(flatten)]
    pub disk: DiskSize,
    /// Search time limit in seconds
    #[arg(long, default_value_t = DEFAULT_TIME_LIMIT_S, value_parser = parse_positive)]
    pub time_limit_s: f64,
    #[command(flatten)]
    pub display: DisplayArgs,
    /// Metrics CSV to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Session log (JSON lines)
    #[arg(long)]
    pub log: PathBuf,
    /// Responses file to write, input for `fit`
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Calibration JSON to write, input for `stimulus`
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service config TOML
    #[arg(long, env = "COLORVIB_CONFIG")]
    pub config: Option<PathBuf>,
    /// Listen address, overrides the config and COLORVIB_BIND
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    /// Service base URL
    #[arg(long, env = "COLORVIB_URL", default_value = DEFAULT_URL)]
    pub url: String,
    #[command(subcommand)]
    pub request: ClientRequest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Threshold,
    Guidance,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StepArg {
    Increase,
    Decrease,
    Accept,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StateArg {
    SolidColor,
    DifferentNotFlickering,
    ClearlyFlickering,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FrameArg {
    A,
    B,
}

#[derive(Debug, Subcommand)]
pub enum ClientRequest {
    /// GET /session/state
    State,
    /// POST /session/start
    Start {
        #[arg(long)]
        participant: String,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        resume: bool,
    },
    /// GET /trial/current
    Current,
    /// POST /calibration/step
    Step {
        #[arg(value_enum)]
        input: StepArg,
    },
    /// POST /trial/response with a perceptual judgment
    Judge {
        #[arg(long, value_enum)]
        state: StateArg,
        /// Chosen peripheral circle, 1 = top, then clockwise
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        location: Option<u8>,
    },
    /// POST /trial/response with a search click
    Click {
        /// Click x in image pixels
        #[arg(long = "x-px")]
        x_px: f64,
        /// Click y in image pixels
        #[arg(long = "y-px")]
        y_px: f64,
    },
    /// POST /trial/advance
    Advance,
    /// POST /questionnaire
    Questionnaire {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=7))]
        naturalness: u8,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=7))]
        obtrusiveness: u8,
    },
    /// GET /stimulus/{id}/{a|b}, saved as PNG
    Frame {
        #[arg(long)]
        id: String,
        #[arg(long, value_enum, default_value = "a")]
        frame: FrameArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(domain)?;
    writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| CliError::Io(e.to_string()))
}

/// Writes every file or none: all contents go to temporaries in the target
/// directories first, then each is renamed into place.
pub fn write_files_atomically(files: &[(PathBuf, Vec<u8>)]) -> Result<(), CliError> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| io_err(&dir, e))?;
        tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    }
    Ok(())
}

fn load_catalog(path: Option<&Path>) -> Result<EllipseCatalog, CliError> {
    match path {
        Some(p) => {
            let f = File::open(p).map_err(|e| io_err(p, e))?;
            vibration::load_catalog(BufReader::new(f)).map_err(domain)
        }
        None => Ok(EllipseCatalog::bundled()),
    }
}

#[derive(Serialize)]
struct Endpoint {
    x: f64,
    y: f64,
    linear: [f64; 3],
    srgb8: [u8; 3],
}

fn endpoint(c: XyYColor) -> Result<Endpoint, CliError> {
    let linear = colorimetry::xyy_to_linear_rgb(c).map_err(domain)?;
    Ok(Endpoint {
        x: c.chroma.x,
        y: c.chroma.y,
        linear: linear.channels(),
        srgb8: colorimetry::xyy_to_srgb8(c).map_err(domain)?.to_array(),
    })
}

fn cmd_pair(args: &PairArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let catalog = load_catalog(args.catalog.as_deref())?;
    let ellipse = catalog.find_by_center(args.x, args.y, CENTER_TOLERANCE).map_err(domain)?;
    let pair = vibration::weighted_pair(ellipse, args.r, args.w, args.luminance).map_err(domain)?;
    let margin = [pair.plus_xyy(), pair.minus_xyy()]
        .into_iter()
        .map(|c| colorimetry::xyy_to_linear_rgb(c).map(|l| l.gamut_margin()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(domain)?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    emit(
        out,
        &json!({
            "ellipse": ellipse.index,
            "r": args.r,
            "w": args.w,
            "Y": args.luminance,
            "plus": endpoint(pair.plus_xyy())?,
            "minus": endpoint(pair.minus_xyy())?,
            "gamut_margin": margin,
            "max_ratio": vibration::max_gamut_ratio(ellipse, args.w, args.luminance).ok(),
        }),
    )
}

fn cmd_convert(args: &ConvertArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let c = XyYColor {
        chroma: XyChromaticity::new(args.x, args.y),
        luminance: args.luminance,
    };
    let xyz = colorimetry::xyy_to_xyz(c).map_err(domain)?;
    let linear = colorimetry::xyz_to_linear_rgb(xyz);
    let srgb = colorimetry::linear_to_srgb8(linear).map_err(domain)?;
    emit(
        out,
        &json!({
            "X": xyz.x, "Y": xyz.y, "Z": xyz.z,
            "linear": linear.channels(),
            "srgb8": srgb.to_array(),
            "gamut_margin": linear.gamut_margin(),
        }),
    )
}

/// File contents for a rendered pair: two PNGs and pretty JSON metadata.
pub fn stimulus_files(pair: &StimulusFramePair, out_dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, CliError> {
    let mut meta = serde_json::to_vec_pretty(&pair.metadata).map_err(domain)?;
    meta.push(b'\n');
    Ok(vec![
        (out_dir.join("frame_a.png"), stimulus::encode_png(&pair.frame_a).map_err(domain)?),
        (out_dir.join("frame_b.png"), stimulus::encode_png(&pair.frame_b).map_err(domain)?),
        (out_dir.join("metadata.json"), meta),
    ])
}

fn write_stimulus(pair: &StimulusFramePair, out_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let files = stimulus_files(pair, out_dir)?;
    write_files_atomically(&files)?;
    emit(
        out,
        &json!({
            "frame_a": files[0].0,
            "frame_b": files[1].0,
            "metadata": files[2].0,
            "ratio": pair.metadata.ratio,
            "weight": pair.metadata.weight,
            "frame_a_sha256": pair.metadata.frame_a_sha256,
            "frame_b_sha256": pair.metadata.frame_b_sha256,
        }),
    )
}

fn cmd_threshold_stimulus(args: &ThresholdStimulusArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let profile = args.display.load()?;
    let catalog = EllipseCatalog::bundled();
    let options = ThresholdStimulusOptions {
        background: colorimetry::Srgb8::new(args.background, args.background, args.background),
        luminance: args.luminance,
    };
    let pair = if args.calibration_split {
        stimulus::render_calibration_stimulus(&profile, catalog.base(), args.r, args.w, &options)
    } else {
        let d_mm = length_mm(args.diameter.d_mm, args.diameter.d_px, 0.0, &profile)?;
        let l_mm = length_mm(args.eccentricity.l_mm, args.eccentricity.l_px, 0.0, &profile)?;
        stimulus::render_threshold_stimulus(&profile, catalog.base(), args.r, args.w, d_mm, l_mm, args.vibrating, &options)
    }
    .map_err(domain)?;
    write_stimulus(&pair, &args.out_dir, out)
}

fn read_table(path: &Path) -> Result<ThresholdTable, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    ThresholdTable::read_csv(f).map_err(|e| io_err(path, e))
}

fn read_calibration(path: &Path) -> Result<UserCalibration, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    UserCalibration::from_json(&text).map_err(|e| io_err(path, e))
}

fn cmd_stimulus(args: &StimulusArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let profile = args.display.load()?;
    let raster = image::open(&args.image).map_err(|e| io_err(&args.image, e))?.to_rgb8();
    let prepared = stimulus::prepare_image(&raster).map_err(domain)?;
    let roi = RoiSpec {
        center_px: (
            length_px(args.roi_x.roi_x_mm, args.roi_x.roi_x_px, &profile)?,
            length_px(args.roi_y.roi_y_mm, args.roi_y.roi_y_px, &profile)?,
        ),
        roi_diameter_mm: length_mm(args.roi_diameter.roi_d_mm, args.roi_diameter.roi_d_px, DEFAULT_ROI_DIAMETER_MM, &profile)?,
        vibration_diameter_mm: length_mm(
            args.vibration_diameter.vib_d_mm,
            args.vibration_diameter.vib_d_px,
            DEFAULT_VIBRATION_DIAMETER_MM,
            &profile,
        )?,
    };
    let condition: GuidanceCondition = args.condition.into();
    let vibrating = condition.threshold_condition().is_some() && args.r.is_none();
    let table = match &args.table {
        Some(p) => read_table(p)?,
        None if vibrating => return Err(CliError::Domain(format!("--table is required for the {condition:?} condition"))),
        None => ThresholdTable::new(),
    };
    let calibration = match &args.calibration {
        Some(p) => read_calibration(p)?,
        None if condition.threshold_condition().is_some() => {
            return Err(CliError::Domain(format!("--calibration is required for the {condition:?} condition")))
        }
        None => UserCalibration {
            participant: String::new(),
            fits: Default::default(),
        },
    };
    let options = GuidanceOptions {
        clamp_per_pixel: args.clamp_per_pixel,
        ratio_override: args.r,
        ..GuidanceOptions::default()
    };
    let catalog = EllipseCatalog::bundled();
    let mut pair =
        stimulus::render_guidance(&prepared, &roi, condition, &table, &calibration, &profile, catalog.base(), &options)
            .map_err(domain)?;
    pair.metadata.source_sha256 = Some(stimulus::sha256_hex(raster.width(), raster.height(), raster.as_raw()));
    write_stimulus(&pair, &args.out_dir, out)
}

fn cmd_fit(args: &FitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let f = File::open(&args.responses).map_err(|e| io_err(&args.responses, e))?;
    let responses = psychometry::read_responses(BufReader::new(f)).map_err(|e| io_err(&args.responses, e))?;
    if responses.is_empty() {
        return Err(CliError::Domain(format!("{}: no responses", args.responses.display())));
    }
    let build = psychometry::build_table(&responses);
    let failed: Vec<String> = build
        .failed_cells()
        .iter()
        .map(|d| {
            format!(
                "{} d={} l={} ({})",
                d.condition,
                d.d_mm,
                d.l_mm,
                d.problem.as_deref().unwrap_or("")
            )
        })
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Domain(format!("cells without a usable fit: {}", failed.join("; "))));
    }
    let mut csv = Vec::new();
    build.table.write_csv(&mut csv).map_err(domain)?;
    let mut files = vec![(args.out.clone(), csv)];
    let mut diag = Vec::new();
    for d in &build.diagnostics {
        diag.extend(serde_json::to_vec(d).map_err(domain)?);
        diag.push(b'\n');
    }
    if let Some(p) = &args.diagnostics {
        files.push((p.clone(), diag));
    }
    write_files_atomically(&files)?;
    for w in build.table.monotonicity_warnings() {
        log::warn!("{w}");
    }
    for d in &build.diagnostics {
        emit(out, d)?;
    }
    Ok(())
}

fn cmd_gaze(args: &GazeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let open = |p: &Path| File::open(p).map_err(|e| io_err(p, e));
    let samples = gaze::read_samples(open(&args.samples)?).map_err(|e| io_err(&args.samples, e))?;
    let markers = gaze::read_markers(open(&args.markers)?).map_err(|e| io_err(&args.markers, e))?;
    let trials = gaze::read_trials(open(&args.trials)?).map_err(|e| io_err(&args.trials, e))?;
    let radius = match args.disk.radius_px {
        Some(r) => r,
        None => {
            let profile = args.display.load()?;
            profile
                .visual_angle_radius_px(args.disk.angle_deg.unwrap_or(EXPLORED_DISK_ANGLE_DEG))
                .map_err(domain)?
        }
    };
    let metrics = gaze::analyze_trials(&samples, &markers, &trials, radius, args.time_limit_s).map_err(domain)?;
    let mut csv = Vec::new();
    gaze::write_metrics(&mut csv, &metrics).map_err(domain)?;
    write_files_atomically(&[(args.out.clone(), csv)])?;
    for m in &metrics {
        emit(out, m)?;
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.log).map_err(|e| io_err(&args.log, e))?;
    let loaded = parse_log(&text).map_err(|e| io_err(&args.log, e))?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", args.log.display());
    }
    let participant = &loaded.header.participant;
    let mut responses = Vec::new();
    let mut calibration = UserCalibration {
        participant: participant.clone(),
        fits: Default::default(),
    };
    let mut guidance_records = 0usize;
    for e in &loaded.entries {
        match e {
            LogEntry::CalibrationFit(f) => {
                calibration.fits.insert(f.r, f.w);
            }
            LogEntry::Trial(t) => match t.to_response(participant) {
                Some(r) => responses.push(r),
                None => guidance_records += 1,
            },
        }
    }
    let mut files = Vec::new();
    if let Some(p) = &args.responses {
        let mut buf = Vec::new();
        psychometry::write_responses(&mut buf, &responses).map_err(|e| io_err(p, e))?;
        files.push((p.clone(), buf));
    }
    if let Some(p) = &args.calibration {
        if calibration.fits.is_empty() {
            return Err(CliError::Domain("the log holds no calibration fits".into()));
        }
        let mut buf = serde_json::to_vec_pretty(&calibration).map_err(domain)?;
        buf.push(b'\n');
        files.push((p.clone(), buf));
    }
    write_files_atomically(&files)?;
    emit(
        out,
        &json!({
            "participant": participant,
            "calibration_fits": calibration.fits.len(),
            "threshold_responses": responses.len(),
            "guidance_records": guidance_records,
            "warnings": loaded.warnings,
        }),
    )
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_serve(args: &ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => SessionConfig::load(p).map_err(domain)?,
        None => SessionConfig::default(),
    };
    config
        .apply_env(std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))
        .map_err(domain)?;
    if let Some(b) = &args.bind {
        config.bind = b.clone();
    }
    let rt = runtime()?;
    rt.block_on(async {
        let state = colorvib_service::AppState::with_monotonic_clock(config.clone()).map_err(domain)?;
        let listener = colorvib_service::bind(&config.bind).await.map_err(domain)?;
        let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        emit(out, &json!({"listening": format!("http://{addr}")}))?;
        colorvib_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
        .map_err(domain)
    })
}

fn cmd_client(args: &ClientArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let client = Client::new(&args.url);
    let rt = runtime()?;
    rt.block_on(async {
        let value = match &args.request {
            ClientRequest::State => serde_json::to_value(client.state().await.map_err(domain)?),
            ClientRequest::Start {
                participant,
                kind,
                seed,
                resume,
            } => {
                let kind = match kind {
                    KindArg::Threshold => StudyKind::Threshold,
                    KindArg::Guidance => StudyKind::Guidance,
                };
                serde_json::to_value(client.start(participant, kind, *seed, *resume).await.map_err(domain)?)
            }
            ClientRequest::Current => serde_json::to_value(client.current_trial().await.map_err(domain)?),
            ClientRequest::Step { input } => {
                let input = match input {
                    StepArg::Increase => CalibrationInput::Increase,
                    StepArg::Decrease => CalibrationInput::Decrease,
                    StepArg::Accept => CalibrationInput::Accept,
                };
                serde_json::to_value(client.calibration_step(input).await.map_err(domain)?)
            }
            ClientRequest::Judge { state, location } => {
                let state = match state {
                    StateArg::SolidColor => PerceptState::SolidColor,
                    StateArg::DifferentNotFlickering => PerceptState::DifferentNotFlickering,
                    StateArg::ClearlyFlickering => PerceptState::ClearlyFlickering,
                };
                let payload = ResponsePayload::Threshold {
                    state,
                    location: *location,
                };
                serde_json::to_value(client.respond(payload).await.map_err(domain)?)
            }
            ClientRequest::Click { x_px, y_px } => {
                let payload = ResponsePayload::Click { x: *x_px, y: *y_px };
                serde_json::to_value(client.respond(payload).await.map_err(domain)?)
            }
            ClientRequest::Advance => serde_json::to_value(client.advance().await.map_err(domain)?),
            ClientRequest::Questionnaire {
                naturalness,
                obtrusiveness,
            } => serde_json::to_value(client.questionnaire(*naturalness, *obtrusiveness).await.map_err(domain)?),
            ClientRequest::Frame { id, frame, out: path } => {
                let bytes = client
                    .stimulus_frame(id, matches!(frame, FrameArg::B))
                    .await
                    .map_err(domain)?;
                let len = bytes.len();
                write_files_atomically(&[(path.clone(), bytes)])?;
                Ok(json!({"id": id, "path": path, "bytes": len}))
            }
        }
        .map_err(domain)?;
        emit(out, &value)
    })
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Pair(a) => cmd_pair(a, out),
        Command::Convert(a) => cmd_convert(a, out),
        Command::Stimulus(a) => cmd_stimulus(a, out),
        Command::ThresholdStimulus(a) => cmd_threshold_stimulus(a, out),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Gaze(a) => cmd_gaze(a, out),
        Command::Export(a) => cmd_export(a, out),
        Command::Serve(a) => cmd_serve(a, out),
        Command::Client(a) => cmd_client(a, out),
    }
}
