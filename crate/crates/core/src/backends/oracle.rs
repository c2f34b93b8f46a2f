//! Deterministic planted-landscape oracle.
//!
//! A landscape plants a set of (category, cue) pairs with benefit weights.
//! For a genotype the oracle computes
//!
//! ```text
//! score = base_error − Σ benefit(planted cues present)
//!       + distractor_penalty × (non-planted cues present)
//!       + noise(seed, key, building, eval_counter)
//! ```
//!
//! clamped at zero, and returns an estimate whose error against the
//! building's ground truth equals the score (continuous items) or the
//! score's class bucket (categorical items). With `base_error` equal to the
//! total benefit, the planted set is the unique zero-noise optimum.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EvalError, EvaluationRequest, Evaluator};
use crate::dataset::GroundTruth;
use crate::fitness::{
    heating_error, windows_error, DataEstimate, HeatingClass, NumericRange, WindowClass, YearRange,
};
use crate::schema::{CueSchema, DataItem, Genotype};

#[derive(Debug, Error, PartialEq)]
pub enum LandscapeError {
    #[error("invalid landscape: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCue {
    pub category: usize,
    pub cue: String,
    pub benefit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLandscape {
    pub planted: Vec<PlantedCue>,
    pub distractor_penalty: f64,
    /// Defaults to the total planted benefit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_error: Option<f64>,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PlantedLandscape {
    pub fn total_benefit(&self) -> f64 {
        self.planted.iter().map(|p| p.benefit).sum()
    }

    pub fn base_error(&self) -> f64 {
        self.base_error.unwrap_or_else(|| self.total_benefit())
    }

    // negated comparisons so that NaN fails every check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), LandscapeError> {
        let invalid = |m: String| Err(LandscapeError::Invalid(m));
        if !(self.distractor_penalty > 0.0) {
            return invalid("distractor_penalty must be positive".into());
        }
        if !(self.noise_scale >= 0.0) {
            return invalid("noise_scale must be non-negative".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.planted {
            if !(p.benefit > self.distractor_penalty) {
                return invalid(format!(
                    "benefit of `{}` must exceed the distractor penalty",
                    p.cue
                ));
            }
            if !seen.insert((p.category, p.cue.as_str())) {
                return invalid(format!("`{}` planted twice in category {}", p.cue, p.category));
            }
        }
        if self.base_error() < self.total_benefit() {
            return invalid("base_error must be at least the total benefit".into());
        }
        Ok(())
    }

    /// Also checks that every planted cue exists in `schema`.
    pub fn validate_for(&self, schema: &CueSchema) -> Result<(), LandscapeError> {
        self.validate()?;
        for p in &self.planted {
            let Some(category) = schema.categories.get(p.category) else {
                return Err(LandscapeError::Invalid(format!(
                    "category index {} out of range",
                    p.category
                )));
            };
            if !category.allowed_cues.iter().any(|c| c.label() == p.cue) {
                return Err(LandscapeError::Invalid(format!(
                    "`{}` is not a cue of category `{}`",
                    p.cue, category.name
                )));
            }
        }
        Ok(())
    }

    /// Plants `count` cues in the first `categories` categories of `schema`
    /// (round-robin), choosing labels with `seed`. Benefits are `benefit`,
    /// distractor penalty `penalty`.
    pub fn generate(
        schema: &CueSchema,
        count: usize,
        categories: usize,
        benefit: f64,
        penalty: f64,
        noise_scale: f64,
        seed: u64,
    ) -> Self {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0070_6c61_6e74_6564);
        let categories = categories.clamp(1, schema.category_count());
        let mut pools: Vec<Vec<&str>> = schema.categories[..categories]
            .iter()
            .map(|c| {
                let mut labels: Vec<&str> = c.allowed_cues.iter().map(|c| c.label()).collect();
                labels.shuffle(&mut rng);
                labels
            })
            .collect();
        let mut planted = Vec::new();
        let mut cat = 0;
        while planted.len() < count && pools.iter().any(|p| !p.is_empty()) {
            if let Some(label) = pools[cat].pop() {
                planted.push(PlantedCue {
                    category: cat,
                    cue: label.to_string(),
                    benefit,
                });
            }
            cat = (cat + 1) % categories;
        }
        planted.sort_by_key(|p| p.category);
        PlantedLandscape {
            planted,
            distractor_penalty: penalty,
            base_error: None,
            noise_scale,
            seed,
        }
    }

    /// The zero-noise optimum over `schema`.
    pub fn optimum(&self, categories: usize) -> Genotype {
        let mut g = Genotype::empty(categories);
        for p in &self.planted {
            g.chromosomes[p.category].push(crate::schema::Cue::new(&p.cue).expect("non-empty"));
        }
        g
    }
}

/// Standard-normal draw determined by (seed, key, building, counter).
pub fn noise_draw(seed: u64, key: &str, building_id: &str, eval_counter: u64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    hasher.update((building_id.len() as u64).to_le_bytes());
    hasher.update(building_id.as_bytes());
    hasher.update(eval_counter.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    StandardNormal.sample(&mut rng)
}

/// Landscape-backed evaluator.
#[derive(Debug, Clone)]
pub struct OracleEvaluator {
    landscape: PlantedLandscape,
    benefits: HashMap<(usize, String), f64>,
}

impl OracleEvaluator {
    pub fn new(landscape: PlantedLandscape) -> Result<Self, LandscapeError> {
        landscape.validate()?;
        let benefits = landscape
            .planted
            .iter()
            .map(|p| ((p.category, p.cue.clone()), p.benefit))
            .collect();
        Ok(OracleEvaluator {
            landscape,
            benefits,
        })
    }

    pub fn landscape(&self) -> &PlantedLandscape {
        &self.landscape
    }

    /// Noise-free score of a genotype, clamped at zero.
    pub fn clean_score(&self, genotype: &Genotype) -> f64 {
        self.raw_score(genotype).max(0.0)
    }

    fn raw_score(&self, genotype: &Genotype) -> f64 {
        let mut score = self.landscape.base_error();
        for (category, cue) in genotype.cues() {
            match self.benefits.get(&(category, cue.label().to_string())) {
                Some(benefit) => score -= benefit,
                None => score += self.landscape.distractor_penalty,
            }
        }
        score
    }

    pub fn score(&self, genotype: &Genotype, key: &str, building_id: &str, eval_counter: u64) -> f64 {
        let noise = if self.landscape.noise_scale > 0.0 {
            self.landscape.noise_scale * noise_draw(self.landscape.seed, key, building_id, eval_counter)
        } else {
            0.0
        };
        (self.raw_score(genotype) + noise).max(0.0)
    }
}

/// Class distance bucket used for categorical read-outs.
fn class_distance(score: f64) -> u8 {
    if score < 1.0 {
        0
    } else if score < 2.0 {
        1
    } else {
        2
    }
}

fn heating_at_distance(truth: HeatingClass, distance: u8) -> HeatingClass {
    // prefer the exact distance; water radiators have no distance-1 neighbour
    HeatingClass::ALL
        .into_iter()
        .find(|h| heating_error(*h, truth) == distance)
        .unwrap_or_else(|| {
            HeatingClass::ALL
                .into_iter()
                .max_by_key(|h| (heating_error(*h, truth), std::cmp::Reverse(*h)))
                .expect("non-empty")
        })
}

fn windows_at_distance(truth: WindowClass, distance: u8) -> WindowClass {
    WindowClass::ALL
        .into_iter()
        .find(|w| windows_error(*w, truth) == distance)
        .unwrap_or_else(|| {
            WindowClass::ALL
                .into_iter()
                .max_by_key(|w| (windows_error(*w, truth), std::cmp::Reverse(*w)))
                .expect("non-empty")
        })
}

/// Turns a non-negative score into an estimate at that error from `truth`.
pub fn estimate_for_score(item: DataItem, truth: &GroundTruth, score: f64) -> Option<DataEstimate> {
    Some(match item {
        DataItem::BuildingAge => {
            let age = truth.age?;
            let offset = score.round() as i32;
            DataEstimate::Age(YearRange::exact(age.end + offset))
        }
        DataItem::Lighting => {
            let t = truth.lighting_pct?;
            let est = if t + score <= 100.0 {
                t + score
            } else if t - score >= 0.0 {
                t - score
            } else if t >= 50.0 {
                0.0
            } else {
                100.0
            };
            DataEstimate::LightingPct(est)
        }
        DataItem::Heating => DataEstimate::Heating(heating_at_distance(truth.heating?, class_distance(score))),
        DataItem::Windows => DataEstimate::Windows(windows_at_distance(truth.windows?, class_distance(score))),
        DataItem::WindowsUvalue => DataEstimate::Uvalue(truth.windows?.uvalue_target() + score),
        DataItem::Energy => DataEstimate::Energy(NumericRange::point(truth.energy_kwh_m2? as f64 + score)),
    })
}

/// Evaluates one genotype on one building against a landscape.
pub fn oracle_evaluate(
    evaluator: &OracleEvaluator,
    genotype: &Genotype,
    key: &str,
    building: &crate::dataset::BuildingRecord,
    item: DataItem,
    eval_counter: u64,
) -> Result<DataEstimate, EvalError> {
    let score = evaluator.score(genotype, key, &building.id, eval_counter);
    estimate_for_score(item, &building.truth, score)
        .ok_or_else(|| EvalError::Fatal(format!("building {} has no truth for {item}", building.id)))
}

impl Evaluator for OracleEvaluator {
    fn evaluate(&self, request: &EvaluationRequest<'_>) -> Result<DataEstimate, EvalError> {
        oracle_evaluate(
            self,
            request.genotype,
            request.key,
            request.building,
            request.data_item,
            request.eval_counter,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BuildingRecord;
    use crate::fitness::building_error;
    use crate::schema::{canonical_key, Cue, CueCategory};

    fn landscape(noise: f64) -> PlantedLandscape {
        PlantedLandscape {
            planted: vec![
                PlantedCue { category: 0, cue: "a1".into(), benefit: 3.0 },
                PlantedCue { category: 1, cue: "b2".into(), benefit: 5.0 },
            ],
            distractor_penalty: 1.0,
            base_error: None,
            noise_scale: noise,
            seed: 42,
        }
    }

    fn schema() -> CueSchema {
        let cat = |name: &str, cues: &[&str]| CueCategory {
            name: name.into(),
            allowed_cues: cues.iter().map(|c| Cue::new(c).unwrap()).collect(),
        };
        CueSchema::new(DataItem::Energy, "UK", vec![cat("A", &["a1", "a2", "a3"]), cat("B", &["b1", "b2", "b3"])])
            .unwrap()
    }

    fn building(truth: GroundTruth) -> BuildingRecord {
        BuildingRecord {
            id: "flat-1".into(),
            region: "UK".into(),
            image_sets: Default::default(),
            truth,
            split: None,
        }
    }

    fn energy_truth() -> GroundTruth {
        GroundTruth { energy_kwh_m2: Some(120), ..GroundTruth::default() }
    }

    fn error_of(ev: &OracleEvaluator, g: &Genotype, counter: u64) -> f64 {
        let b = building(energy_truth());
        let est = oracle_evaluate(ev, g, &canonical_key(g), &b, DataItem::Energy, counter).unwrap();
        building_error(DataItem::Energy, &est, &b.truth).unwrap()
    }

    #[test]
    fn optimum_scores_zero_and_missing_cue_costs_its_benefit() {
        let ev = OracleEvaluator::new(landscape(0.0)).unwrap();
        let opt = ev.landscape().optimum(2);
        assert_eq!(error_of(&ev, &opt, 0), 0.0);
        let missing = Genotype::from_labels(&[&["a1"], &[]]);
        assert_eq!(error_of(&ev, &missing, 0), 5.0);
        let missing = Genotype::from_labels(&[&[], &["b2"]]);
        assert_eq!(error_of(&ev, &missing, 0), 3.0);
    }

    #[test]
    fn noisy_reevaluation_differs_by_counter() {
        let ev = OracleEvaluator::new(landscape(0.5)).unwrap();
        let g = Genotype::from_labels(&[&["a2"], &["b1"]]);
        let first = error_of(&ev, &g, 0);
        let second = error_of(&ev, &g, 1);
        assert_ne!(first, second);
        assert_eq!(first, error_of(&ev, &g, 0));
        let mut ledger = crate::engine::FitnessLedger::new();
        ledger.record("k", first, 0);
        ledger.record("k", second, 0);
        assert_eq!(ledger.worst_error("k"), Some(first.max(second)));
    }

    #[test]
    fn noise_draw_is_pinned() {
        // independent of process and platform
        let a = noise_draw(7, "key", "b", 0);
        assert_eq!(a, noise_draw(7, "key", "b", 0));
        assert_ne!(a, noise_draw(7, "key", "b", 1));
        assert_ne!(a, noise_draw(8, "key", "b", 0));
        assert_ne!(noise_draw(7, "ke", "yb", 0), noise_draw(7, "key", "b", 0));
    }

    #[test]
    fn zero_noise_argmin_is_the_planted_set() {
        let s = schema();
        let ev = OracleEvaluator::new(landscape(0.0)).unwrap();
        let subsets = |cues: &[Cue]| -> Vec<Vec<Cue>> {
            (0..1u32 << cues.len())
                .map(|mask| {
                    cues.iter()
                        .enumerate()
                        .filter(|(i, _)| mask & (1 << i) != 0)
                        .map(|(_, c)| c.clone())
                        .collect()
                })
                .collect()
        };
        let mut zeros = Vec::new();
        for a in subsets(&s.categories[0].allowed_cues) {
            for b in subsets(&s.categories[1].allowed_cues) {
                let g = Genotype::new(vec![a.clone(), b]);
                if error_of(&ev, &g, 0) == 0.0 {
                    zeros.push(g);
                }
            }
        }
        assert_eq!(zeros, vec![ev.landscape().optimum(2)]);
    }

    #[test]
    fn zero_noise_monotonicity() {
        let s = schema();
        let ev = OracleEvaluator::new(landscape(0.0)).unwrap();
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(3);
        for _ in 0..200 {
            let g = crate::genome_ops::mutate_variable(&crate::schema::random_genotype(&s, &mut rng), &s, &mut rng);
            let base = ev.clean_score(&g);
            let mut with_distractor = g.clone();
            if let Some(d) = s.categories[0].allowed_cues.iter().find(|c| c.label() != "a1" && !g.chromosomes[0].contains(c)) {
                with_distractor.chromosomes[0].push(d.clone());
                assert!(ev.clean_score(&with_distractor) >= base);
            }
            let b2 = Cue::new("b2").unwrap();
            if !g.chromosomes[1].contains(&b2) {
                let mut with_planted = g.clone();
                with_planted.chromosomes[1].push(b2);
                assert!(ev.clean_score(&with_planted) <= base);
            }
        }
    }

    #[test]
    fn categorical_readouts_follow_thresholds() {
        let t = GroundTruth {
            heating: Some(HeatingClass::Underfloor),
            windows: Some(WindowClass::Double),
            ..GroundTruth::default()
        };
        let est = |item, s| estimate_for_score(item, &t, s).unwrap();
        assert_eq!(est(DataItem::Heating, 0.5), DataEstimate::Heating(HeatingClass::Underfloor));
        assert_eq!(est(DataItem::Heating, 1.5), DataEstimate::Heating(HeatingClass::WarmAir));
        let far = est(DataItem::Heating, 7.0);
        assert_eq!(building_error(DataItem::Heating, &far, &t), Ok(2.0));
        assert_eq!(est(DataItem::Windows, 0.0), DataEstimate::Windows(WindowClass::Double));
        let adj = est(DataItem::Windows, 1.2);
        assert_eq!(building_error(DataItem::Windows, &adj, &t), Ok(1.0));
        let water = GroundTruth { heating: Some(HeatingClass::WaterRadiators), ..GroundTruth::default() };
        let e = estimate_for_score(DataItem::Heating, &water, 1.5).unwrap();
        assert_eq!(building_error(DataItem::Heating, &e, &water), Ok(2.0));
    }

    #[test]
    fn continuous_readouts_reproduce_the_score() {
        let t = GroundTruth {
            age: YearRange::new(2007, 2011),
            lighting_pct: Some(86.0),
            windows: Some(WindowClass::Single),
            energy_kwh_m2: Some(300),
            ..GroundTruth::default()
        };
        for (item, score) in [
            (DataItem::BuildingAge, 12.0),
            (DataItem::Lighting, 30.0),
            (DataItem::WindowsUvalue, 1.25),
            (DataItem::Energy, 47.0),
        ] {
            let e = estimate_for_score(item, &t, score).unwrap();
            assert_eq!(building_error(item, &e, &t), Ok(score), "{item}");
        }
        let e = estimate_for_score(DataItem::Lighting, &t, 500.0).unwrap();
        assert_eq!(building_error(DataItem::Lighting, &e, &t), Ok(86.0));
    }

    #[test]
    fn validation_rules() {
        let mut l = landscape(0.0);
        l.distractor_penalty = 0.0;
        assert!(l.validate().is_err());
        let mut l = landscape(0.0);
        l.planted[0].benefit = 0.5;
        assert!(l.validate().is_err());
        let mut l = landscape(0.0);
        l.base_error = Some(1.0);
        assert!(l.validate().is_err());
        let mut l = landscape(0.0);
        l.planted[1].cue = "zz".into();
        assert!(l.validate_for(&schema()).is_err());
        landscape(0.0).validate_for(&schema()).unwrap();
    }

    #[test]
    fn generated_landscapes_are_valid() {
        let s = schema();
        let l = PlantedLandscape::generate(&s, 3, 2, 4.0, 1.0, 0.1, 9);
        l.validate_for(&s).unwrap();
        assert_eq!(l.planted.len(), 3);
        assert_eq!(l, PlantedLandscape::generate(&s, 3, 2, 4.0, 1.0, 0.1, 9));
    }
}
