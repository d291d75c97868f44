//! Frames behind the stimulus ids the engine hands to the UI.

use std::fmt;
use std::str::FromStr;

use image::{GrayImage, RgbImage};

use super::config::ProtocolConfig;
use super::plan::{ProtocolPlan, TrialSpec};
use super::SessionError;
use crate::psychometry::{interpolate_weight, ThresholdTable, UserCalibration};
use crate::stimulus::{self, DisplayProfile, GuidanceOptions, RoiSpec, ThresholdStimulusOptions};
use crate::vibration::MacAdamEllipse;

const FIXATION_ARM_MM: f64 = 10.0;
const FIXATION_THICKNESS_PX: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StimulusId {
    Calibration { r: u32, w_steps: i32 },
    Inverted { r: u32, w_steps: i32 },
    Fixation,
    Threshold { trial: u32 },
    Target { trial: u32 },
    Search { trial: u32 },
}

impl fmt::Display for StimulusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StimulusId::Calibration { r, w_steps } => write!(f, "cal-r{r}-w{w_steps}"),
            StimulusId::Inverted { r, w_steps } => write!(f, "inv-r{r}-w{w_steps}"),
            StimulusId::Fixation => write!(f, "fixation"),
            StimulusId::Threshold { trial } => write!(f, "trial-{trial}"),
            StimulusId::Target { trial } => write!(f, "target-{trial}"),
            StimulusId::Search { trial } => write!(f, "search-{trial}"),
        }
    }
}

impl FromStr for StimulusId {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SessionError::UnknownStimulus(s.to_string());
        let calib = |rest: &str| -> Option<(u32, i32)> {
            let (r, w) = rest.strip_prefix('r')?.split_once("-w")?;
            Some((r.parse().ok()?, w.parse().ok()?))
        };
        if s == "fixation" {
            return Ok(StimulusId::Fixation);
        }
        if let Some(rest) = s.strip_prefix("cal-") {
            let (r, w_steps) = calib(rest).ok_or_else(bad)?;
            return Ok(StimulusId::Calibration { r, w_steps });
        }
        if let Some(rest) = s.strip_prefix("inv-") {
            let (r, w_steps) = calib(rest).ok_or_else(bad)?;
            return Ok(StimulusId::Inverted { r, w_steps });
        }
        let (prefix, n) = s.split_once('-').ok_or_else(bad)?;
        let trial: u32 = n.parse().map_err(|_| bad())?;
        match prefix {
            "trial" => Ok(StimulusId::Threshold { trial }),
            "target" => Ok(StimulusId::Target { trial }),
            "search" => Ok(StimulusId::Search { trial }),
            _ => Err(bad()),
        }
    }
}

/// A guidance image set prepared for rendering.
#[derive(Debug, Clone)]
pub struct GuidanceAsset {
    pub image: GrayImage,
    pub roi: RoiSpec,
}

pub struct RenderContext<'a> {
    pub profile: &'a DisplayProfile,
    pub ellipse: &'a MacAdamEllipse,
    pub protocol: &'a ProtocolConfig,
    pub plan: &'a ProtocolPlan,
    /// Required for trial stimuli; calibration stimuli do not need it.
    pub calibration: Option<&'a UserCalibration>,
    pub table: Option<&'a ThresholdTable>,
    pub assets: &'a [GuidanceAsset],
}

impl RenderContext<'_> {
    fn threshold_options(&self) -> ThresholdStimulusOptions {
        ThresholdStimulusOptions {
            background: self.protocol.background(),
            luminance: self.protocol.luminance,
        }
    }

    fn calibration(&self) -> Result<&UserCalibration, SessionError> {
        self.calibration
            .ok_or_else(|| SessionError::SequenceViolation("trial stimuli need a completed calibration".into()))
    }

    fn spec(&self, trial: u32) -> Result<TrialSpec, SessionError> {
        self.plan
            .trials
            .get(trial as usize)
            .copied()
            .ok_or_else(|| SessionError::UnknownStimulus(format!("trial {trial} is not in the plan")))
    }

    fn asset(&self, image_set: u32) -> Result<&GuidanceAsset, SessionError> {
        self.assets
            .get(image_set as usize)
            .ok_or_else(|| SessionError::Config(format!("no guidance image configured for set {image_set}")))
    }
}

/// Frames `a` and `b` for `id`. Static screens return the same frame twice.
pub fn render_stimulus(id: StimulusId, ctx: &RenderContext<'_>) -> Result<(RgbImage, RgbImage), SessionError> {
    let weight = |r: f64| -> Result<f64, SessionError> { Ok(interpolate_weight(ctx.calibration()?, r)?.w) };
    match id {
        StimulusId::Calibration { r, w_steps } | StimulusId::Inverted { r, w_steps } => {
            let w = super::calibration::weight_for_steps(w_steps);
            let pair = stimulus::render_calibration_stimulus(ctx.profile, ctx.ellipse, f64::from(r), w, &ctx.threshold_options())?;
            if matches!(id, StimulusId::Inverted { .. }) {
                let circles: Vec<_> = pair.metadata.circles.iter().map(|c| c.circle()).collect();
                let a = stimulus::render_inverted(&pair.frame_a, &circles);
                let b = stimulus::render_inverted(&pair.frame_b, &circles);
                Ok((a, b))
            } else {
                Ok((pair.frame_a, pair.frame_b))
            }
        }
        StimulusId::Fixation => {
            let f = stimulus::render_fixation(ctx.profile, FIXATION_ARM_MM, FIXATION_THICKNESS_PX)?;
            Ok((f.clone(), f))
        }
        StimulusId::Threshold { trial } => {
            let TrialSpec::Threshold(t) = ctx.spec(trial)? else {
                return Err(SessionError::UnknownStimulus(id.to_string()));
            };
            let pair = stimulus::render_threshold_stimulus(
                ctx.profile,
                ctx.ellipse,
                t.r,
                weight(t.r)?,
                f64::from(t.d_mm),
                f64::from(t.l_mm),
                t.vibrating_index,
                &ctx.threshold_options(),
            )?;
            Ok((pair.frame_a, pair.frame_b))
        }
        StimulusId::Target { trial } | StimulusId::Search { trial } => {
            let TrialSpec::Guidance(g) = ctx.spec(trial)? else {
                return Err(SessionError::UnknownStimulus(id.to_string()));
            };
            let asset = ctx.asset(g.image_set)?;
            let options = GuidanceOptions::default();
            if matches!(id, StimulusId::Target { .. }) {
                let f = stimulus::render_target_preview(&asset.image, &asset.roi, ctx.profile, &options)?;
                return Ok((f.clone(), f));
            }
            let table = ctx
                .table
                .ok_or_else(|| SessionError::Config("guidance trials need a threshold table".into()))?;
            let pair = stimulus::render_guidance(
                &asset.image,
                &asset.roi,
                g.condition,
                table,
                ctx.calibration()?,
                ctx.profile,
                ctx.ellipse,
                &options,
            )?;
            Ok((pair.frame_a, pair.frame_b))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::plan::plan_threshold_study;
    use crate::vibration::EllipseCatalog;

    #[test]
    fn ids_round_trip() {
        let ids = [
            StimulusId::Calibration { r: 50, w_steps: -3 },
            StimulusId::Inverted { r: 10, w_steps: 24 },
            StimulusId::Fixation,
            StimulusId::Threshold { trial: 131 },
            StimulusId::Target { trial: 0 },
            StimulusId::Search { trial: 23 },
        ];
        for id in ids {
            assert_eq!(id.to_string().parse::<StimulusId>().unwrap(), id);
        }
        assert_eq!(StimulusId::Calibration { r: 50, w_steps: -3 }.to_string(), "cal-r50-w-3");
        for bad in ["", "trial-", "trial-x", "cal-50", "other-1", "../etc"] {
            assert!(bad.parse::<StimulusId>().is_err(), "{bad}");
        }
    }

    #[test]
    fn inverted_blacks_out_the_circle() {
        let profile = DisplayProfile {
            width_px: 480,
            height_px: 270,
            ..DisplayProfile::lcd_42in_4k()
        };
        let catalog = EllipseCatalog::bundled();
        let plan = plan_threshold_study(0);
        let protocol = ProtocolConfig::default();
        let ctx = RenderContext {
            profile: &profile,
            ellipse: catalog.base(),
            protocol: &protocol,
            plan: &plan,
            calibration: None,
            table: None,
            assets: &[],
        };
        let (a, _) = render_stimulus(StimulusId::Inverted { r: 50, w_steps: 0 }, &ctx).unwrap();
        assert_eq!(a.get_pixel(240, 135).0, [0, 0, 0]);
        assert_eq!(a.get_pixel(2, 2).0, [128, 128, 128]);
        assert!(render_stimulus(StimulusId::Threshold { trial: 0 }, &ctx).is_err());
    }
}
