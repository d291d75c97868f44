use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::colorimetry::Srgb8;
use crate::gaze::DEFAULT_TIME_LIMIT_S;
use crate::stimulus::{DisplayProfile, DEFAULT_ROI_DIAMETER_MM, DEFAULT_VIBRATION_DIAMETER_MM};
use crate::vibration::BASE_LUMINANCE;

/// Prefix of the environment variables that override config values.
pub const ENV_PREFIX: &str = "COLORVIB_";
pub const DEFAULT_BIND: &str = "127.0.0.1:7878";
pub const DEFAULT_FIXATION_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub fixation_s: f64,
    pub search_limit_s: f64,
    pub inverted_flash_ms: u32,
    #[serde(rename = "Y")]
    pub luminance: f64,
    pub background: [u8; 3],
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            fixation_s: DEFAULT_FIXATION_S,
            search_limit_s: DEFAULT_TIME_LIMIT_S,
            inverted_flash_ms: super::calibration::INVERTED_FLASH_MS,
            luminance: BASE_LUMINANCE,
            background: [128, 128, 128],
        }
    }
}

impl ProtocolConfig {
    pub fn background(&self) -> Srgb8 {
        Srgb8::from_array(self.background)
    }
}

/// One guidance image set: a raster and the ROI the vibration points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceImage {
    pub path: PathBuf,
    pub roi_x_px: f64,
    pub roi_y_px: f64,
    #[serde(default = "default_roi_diameter")]
    pub roi_diameter_mm: f64,
    #[serde(default = "default_vibration_diameter")]
    pub vibration_diameter_mm: f64,
}

fn default_roi_diameter() -> f64 {
    DEFAULT_ROI_DIAMETER_MM
}

fn default_vibration_diameter() -> f64 {
    DEFAULT_VIBRATION_DIAMETER_MM
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Threshold table CSV used for the vibrating conditions.
    pub table: Option<PathBuf>,
    pub images: Vec<GuidanceImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub bind: String,
    pub log_dir: PathBuf,
    pub display: DisplayProfile,
    pub protocol: ProtocolConfig,
    pub guidance: GuidanceConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            bind: DEFAULT_BIND.to_string(),
            log_dir: PathBuf::from("sessions"),
            display: DisplayProfile::lcd_42in_4k(),
            protocol: ProtocolConfig::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

fn config_error(msg: impl std::fmt::Display) -> SessionError {
    SessionError::Config(msg.to_string())
}

impl SessionConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SessionError> {
        let cfg: Self = toml::from_str(text).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and resolves relative guidance paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.log_dir);
        if let Some(t) = cfg.guidance.table.as_mut() {
            resolve(t);
        }
        for img in &mut cfg.guidance.images {
            resolve(&mut img.path);
        }
        Ok(cfg)
    }

    /// Applies `COLORVIB_BIND`, `COLORVIB_LOG_DIR` and `COLORVIB_FIXATION_S`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), SessionError> {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else { continue };
            match name {
                "BIND" => self.bind = value,
                "LOG_DIR" => self.log_dir = PathBuf::from(value),
                "FIXATION_S" => {
                    self.protocol.fixation_s = value.parse().map_err(|_| config_error(format!("{key}={value} is not a number")))?
                }
                _ => {}
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        self.display.validate().map_err(config_error)?;
        let p = &self.protocol;
        if !(p.fixation_s >= 0.0 && p.fixation_s.is_finite()) {
            return Err(config_error("protocol.fixation_s must be >= 0"));
        }
        if !(p.search_limit_s > 0.0 && p.search_limit_s.is_finite()) {
            return Err(config_error("protocol.search_limit_s must be > 0"));
        }
        if !(p.luminance > 0.0 && p.luminance <= 1.0) {
            return Err(config_error("protocol.Y must be in (0, 1]"));
        }
        for img in &self.guidance.images {
            if !(img.roi_diameter_mm > 0.0 && img.vibration_diameter_mm >= img.roi_diameter_mm) {
                return Err(config_error(format!("{}: bad ROI diameters", img.path.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_file() {
        let cfg = SessionConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, SessionConfig::default());
        assert_eq!(cfg.protocol.fixation_s, 1.0);
        assert_eq!(cfg.protocol.search_limit_s, 30.0);
        assert_eq!(cfg.display.width_px, 3840);
    }

    #[test]
    fn parses_full_file() {
        let text = r#"
bind = "127.0.0.1:9000"
log_dir = "logs"

[display]
width_mm = 941.0
height_mm = 529.3
width_px = 1920
height_px = 1080
viewing_distance_mm = 500.0
refresh_hz = 60.0

[protocol]
fixation_s = 1.5

[guidance]
table = "thresholds.csv"

[[guidance.images]]
path = "set1.png"
roi_x_px = 300
roi_y_px = 200
"#;
        let cfg = SessionConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.display.width_px, 1920);
        assert_eq!(cfg.protocol.fixation_s, 1.5);
        assert_eq!(cfg.guidance.images[0].roi_diameter_mm, 44.0);
        assert!(SessionConfig::from_toml_str("colour = 1").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = SessionConfig::default();
        cfg.apply_env([
            ("COLORVIB_BIND".to_string(), "0.0.0.0:1".to_string()),
            ("COLORVIB_FIXATION_S".to_string(), "2".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.bind, "0.0.0.0:1");
        assert_eq!(cfg.protocol.fixation_s, 2.0);
        assert!(cfg.apply_env([("COLORVIB_FIXATION_S".to_string(), "soon".to_string())]).is_err());
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[guidance]\ntable = \"t.csv\"\n").unwrap();
        let cfg = SessionConfig::load(&path).unwrap();
        assert_eq!(cfg.guidance.table.unwrap(), dir.path().join("t.csv"));
        assert_eq!(cfg.log_dir, dir.path().join("sessions"));
    }
}
