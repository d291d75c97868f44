use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::psychometry::{DIAMETERS_MM, ECCENTRICITIES_MM, RATIO_LEVELS};
use crate::stimulus::GuidanceCondition;

pub const THRESHOLD_TRIAL_COUNT: usize = RATIO_LEVELS.len() * DIAMETERS_MM.len() * ECCENTRICITIES_MM.len();
pub const THRESHOLD_BREAK_EVERY: u32 = 10;
pub const GUIDANCE_IMAGE_SETS: u32 = 6;
pub const GUIDANCE_BREAK_EVERY: u32 = 6;
pub const GUIDANCE_CONDITIONS: [GuidanceCondition; 4] = [
    GuidanceCondition::Unmodified,
    GuidanceCondition::UnobtrusiveVibration,
    GuidanceCondition::ObtrusiveVibration,
    GuidanceCondition::ExplicitCircle,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Threshold,
    Guidance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTrial {
    pub r: f64,
    pub d_mm: u32,
    pub l_mm: u32,
    /// Which of the four peripheral circles vibrates (1 = top, clockwise);
    /// absent for central trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vibrating_index: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceTrial {
    pub image_set: u32,
    pub condition: GuidanceCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrialSpec {
    Threshold(ThresholdTrial),
    Guidance(GuidanceTrial),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub kind: StudyKind,
    pub seed: u64,
    pub trials: Vec<TrialSpec>,
    /// A rest follows every `break_every` completed trials.
    pub break_every: u32,
}

impl ProtocolPlan {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Whether a rest is due after `completed` trials.
    pub fn break_after(&self, completed: usize) -> bool {
        self.break_every > 0
            && completed > 0
            && completed < self.trials.len()
            && completed % self.break_every as usize == 0
    }
}

pub fn plan_threshold_study(seed: u64) -> ProtocolPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid: Vec<(u32, u32, u32)> = Vec::with_capacity(THRESHOLD_TRIAL_COUNT);
    for &r in &RATIO_LEVELS {
        for &d in &DIAMETERS_MM {
            for &l in &ECCENTRICITIES_MM {
                grid.push((r, d, l));
            }
        }
    }
    grid.shuffle(&mut rng);
    let trials = grid
        .into_iter()
        .map(|(r, d_mm, l_mm)| {
            let vibrating_index = (l_mm > 0).then(|| rng.random_range(1..=4u8));
            TrialSpec::Threshold(ThresholdTrial {
                r: f64::from(r),
                d_mm,
                l_mm,
                vibrating_index,
            })
        })
        .collect();
    ProtocolPlan {
        kind: StudyKind::Threshold,
        seed,
        trials,
        break_every: THRESHOLD_BREAK_EVERY,
    }
}

/// Image sets in random order, and the four conditions of each set in
/// random order inside it.
pub fn plan_guidance_study(seed: u64, image_sets: u32) -> ProtocolPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets: Vec<u32> = (0..image_sets).collect();
    sets.shuffle(&mut rng);
    let mut trials = Vec::with_capacity(sets.len() * GUIDANCE_CONDITIONS.len());
    for image_set in sets {
        let mut conditions = GUIDANCE_CONDITIONS;
        conditions.shuffle(&mut rng);
        trials.extend(
            conditions
                .into_iter()
                .map(|condition| TrialSpec::Guidance(GuidanceTrial { image_set, condition })),
        );
    }
    ProtocolPlan {
        kind: StudyKind::Guidance,
        seed,
        trials,
        break_every: GUIDANCE_BREAK_EVERY,
    }
}

pub fn plan_study(kind: StudyKind, seed: u64, image_sets: u32) -> ProtocolPlan {
    match kind {
        StudyKind::Threshold => plan_threshold_study(seed),
        StudyKind::Guidance => plan_guidance_study(seed, image_sets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn keys(plan: &ProtocolPlan) -> Vec<(u32, u32, u32)> {
        plan.trials
            .iter()
            .map(|t| match t {
                TrialSpec::Threshold(t) => (t.r as u32, t.d_mm, t.l_mm),
                TrialSpec::Guidance(_) => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn threshold_plan_is_exhaustive() {
        let plan = plan_threshold_study(7);
        assert_eq!(plan.len(), 132);
        let unique: BTreeSet<_> = keys(&plan).into_iter().collect();
        assert_eq!(unique.len(), 132);
        for t in &plan.trials {
            let TrialSpec::Threshold(t) = t else { unreachable!() };
            assert_eq!(t.vibrating_index.is_some(), t.l_mm > 0);
            assert!(t.vibrating_index.is_none_or(|i| (1..=4).contains(&i)));
        }
    }

    #[test]
    fn threshold_plan_is_seeded() {
        assert_eq!(plan_threshold_study(3), plan_threshold_study(3));
        let distinct = (0..100u64)
            .filter(|s| keys(&plan_threshold_study(*s)) != keys(&plan_threshold_study(s + 1000)))
            .count();
        assert_eq!(distinct, 100);
    }

    #[test]
    fn vibrating_positions_roughly_uniform() {
        let mut counts = [0u32; 4];
        for seed in 0..50 {
            for t in &plan_threshold_study(seed).trials {
                if let TrialSpec::Threshold(ThresholdTrial { vibrating_index: Some(i), .. }) = t {
                    counts[usize::from(*i) - 1] += 1;
                }
            }
        }
        // 50 * 99 draws, expected 1237.5 per position
        for c in counts {
            assert!((1100..1380).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn breaks_every_ten_not_after_last() {
        let plan = plan_threshold_study(1);
        let breaks: Vec<usize> = (0..=plan.len()).filter(|&n| plan.break_after(n)).collect();
        assert_eq!(breaks, (1..=13).map(|k| k * 10).collect::<Vec<_>>());
    }

    #[test]
    fn guidance_plan_groups_sets() {
        let plan = plan_guidance_study(11, 6);
        assert_eq!(plan.len(), 24);
        for chunk in plan.trials.chunks(4) {
            let sets: BTreeSet<u32> = chunk
                .iter()
                .map(|t| match t {
                    TrialSpec::Guidance(g) => g.image_set,
                    TrialSpec::Threshold(_) => unreachable!(),
                })
                .collect();
            assert_eq!(sets.len(), 1);
            let conds: BTreeSet<String> = chunk
                .iter()
                .map(|t| match t {
                    TrialSpec::Guidance(g) => format!("{:?}", g.condition),
                    TrialSpec::Threshold(_) => unreachable!(),
                })
                .collect();
            assert_eq!(conds.len(), 4);
        }
        let breaks: Vec<usize> = (0..=24).filter(|&n| plan.break_after(n)).collect();
        assert_eq!(breaks, vec![6, 12, 18]);
        assert_ne!(plan_guidance_study(11, 6), plan_guidance_study(12, 6));
    }
}
