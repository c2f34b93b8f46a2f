//! Per-building error functions and fitness aggregation. Lower is better;
//! zero is a perfect score.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruth;
use crate::schema::DataItem;

#[derive(Debug, Error, PartialEq)]
pub enum FitnessError {
    #[error("estimate for {estimate} cannot be scored as {item}")]
    VariantMismatch { item: DataItem, estimate: &'static str },
    #[error("ground truth has no value for {0}")]
    MissingTruth(DataItem),
    #[error("cannot aggregate fitness over an empty split")]
    EmptySplit,
}

/// Inclusive year range; an exact year has `start == end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl YearRange {
    pub fn new(start: i32, end: i32) -> Option<Self> {
        (start <= end).then_some(YearRange { start, end })
    }

    pub fn exact(year: i32) -> Self {
        YearRange { start: year, end: year }
    }

    pub fn is_exact(&self) -> bool {
        self.start == self.end
    }

    pub fn midpoint(&self) -> f64 {
        (self.start as f64 + self.end as f64) / 2.0
    }
}

impl fmt::Display for YearRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_exact() {
            write!(f, "{}", self.start)
        } else {
            write!(f, "{}-{}", self.start, self.end)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatingClass {
    Underfloor,
    WarmAir,
    WaterRadiators,
    ElectricPanel,
    ElectricStorage,
}

impl HeatingClass {
    pub const ALL: [HeatingClass; 5] = [
        HeatingClass::Underfloor,
        HeatingClass::WarmAir,
        HeatingClass::WaterRadiators,
        HeatingClass::ElectricPanel,
        HeatingClass::ElectricStorage,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowClass {
    Single,
    Double,
    HighEfficiency,
}

impl WindowClass {
    pub const ALL: [WindowClass; 3] = [WindowClass::Single, WindowClass::Double, WindowClass::HighEfficiency];

    pub fn ordinal(self) -> i32 {
        match self {
            WindowClass::Single => 0,
            WindowClass::Double => 1,
            WindowClass::HighEfficiency => 2,
        }
    }

    /// Target U-value used by the real-valued windows fitness.
    pub fn uvalue_target(self) -> f64 {
        match self {
            WindowClass::Single => 0.5,
            WindowClass::Double => 2.0,
            WindowClass::HighEfficiency => 4.8,
        }
    }
}

/// A numeric estimate that may be a point (`start == end`) or a range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    pub start: f64,
    pub end: f64,
}

impl NumericRange {
    pub fn point(value: f64) -> Self {
        NumericRange { start: value, end: value }
    }

    pub fn range(start: f64, end: f64) -> Self {
        NumericRange {
            start: start.min(end),
            end: start.max(end),
        }
    }

    pub fn is_point(&self) -> bool {
        self.start == self.end
    }

    pub fn midpoint(&self) -> f64 {
        (self.start + self.end) / 2.0
    }
}

/// One parsed estimator answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum DataEstimate {
    Age(YearRange),
    LightingPct(f64),
    Heating(HeatingClass),
    Windows(WindowClass),
    Uvalue(f64),
    Energy(NumericRange),
}

impl DataEstimate {
    pub fn variant_name(&self) -> &'static str {
        match self {
            DataEstimate::Age(_) => "age",
            DataEstimate::LightingPct(_) => "lighting",
            DataEstimate::Heating(_) => "heating",
            DataEstimate::Windows(_) => "windows",
            DataEstimate::Uvalue(_) => "uvalue",
            DataEstimate::Energy(_) => "energy",
        }
    }

    pub fn matches(&self, item: DataItem) -> bool {
        matches!(
            (item, self),
            (DataItem::BuildingAge, DataEstimate::Age(_))
                | (DataItem::Lighting, DataEstimate::LightingPct(_))
                | (DataItem::Heating, DataEstimate::Heating(_))
                | (DataItem::Windows, DataEstimate::Windows(_))
                | (DataItem::WindowsUvalue, DataEstimate::Uvalue(_))
                | (DataItem::Energy, DataEstimate::Energy(_))
        )
    }
}

/// Distance from a point to an inclusive range; zero inside it.
pub fn range_point_error(start_a: i64, end_a: i64, point_b: i64) -> i64 {
    if start_a <= point_b && point_b <= end_a {
        0
    } else {
        (point_b - start_a).abs().min((point_b - end_a).abs())
    }
}

/// Gap between two inclusive ranges; zero when they overlap.
pub fn range_range_error(a: YearRange, b: YearRange) -> i64 {
    if a.end < b.start {
        (b.start - a.end) as i64
    } else if b.end < a.start {
        (a.start - b.end) as i64
    } else {
        0
    }
}

fn range_point_error_real(start: f64, end: f64, point: f64) -> f64 {
    if start <= point && point <= end {
        0.0
    } else {
        (point - start).abs().min((point - end).abs())
    }
}

pub fn heating_error(estimate: HeatingClass, truth: HeatingClass) -> u8 {
    use HeatingClass::*;
    match (estimate, truth) {
        (a, b) if a == b => 0,
        (Underfloor, WarmAir) | (WarmAir, Underfloor) => 1,
        (ElectricPanel, ElectricStorage) | (ElectricStorage, ElectricPanel) => 1,
        _ => 2,
    }
}

pub fn windows_error(estimate: WindowClass, truth: WindowClass) -> u8 {
    (estimate.ordinal() - truth.ordinal()).unsigned_abs() as u8
}

pub fn lighting_error(estimate_pct: f64, truth_pct: f64) -> f64 {
    (estimate_pct - truth_pct).abs()
}

pub fn energy_error(estimate: NumericRange, truth: f64) -> f64 {
    if estimate.is_point() {
        (estimate.start - truth).abs()
    } else {
        range_point_error_real(estimate.start, estimate.end, truth)
    }
}

pub fn uvalue_error(estimate_u: f64, truth: WindowClass) -> f64 {
    (estimate_u - truth.uvalue_target()).abs()
}

/// Error assigned to a building whose estimate could not be obtained.
pub fn failure_penalty(item: DataItem) -> f64 {
    match item {
        DataItem::BuildingAge => 1024.0,
        DataItem::Heating | DataItem::Windows => 2.0,
        DataItem::Lighting => 100.0,
        DataItem::Energy => 450.0,
        DataItem::WindowsUvalue => 4.3,
    }
}

/// Scores one estimate against one building's ground truth.
pub fn building_error(
    item: DataItem,
    estimate: &DataEstimate,
    truth: &GroundTruth,
) -> Result<f64, FitnessError> {
    let mismatch = || FitnessError::VariantMismatch {
        item,
        estimate: estimate.variant_name(),
    };
    let missing = || FitnessError::MissingTruth(item);
    match (item, estimate) {
        (DataItem::BuildingAge, DataEstimate::Age(est)) => {
            let t = truth.age.ok_or_else(missing)?;
            let err = if t.is_exact() {
                range_point_error(est.start as i64, est.end as i64, t.start as i64)
            } else {
                range_range_error(*est, t)
            };
            Ok(err as f64)
        }
        (DataItem::Lighting, DataEstimate::LightingPct(est)) => {
            Ok(lighting_error(*est, truth.lighting_pct.ok_or_else(missing)?))
        }
        (DataItem::Heating, DataEstimate::Heating(est)) => {
            Ok(heating_error(*est, truth.heating.ok_or_else(missing)?) as f64)
        }
        (DataItem::Windows, DataEstimate::Windows(est)) => {
            Ok(windows_error(*est, truth.windows.ok_or_else(missing)?) as f64)
        }
        (DataItem::WindowsUvalue, DataEstimate::Uvalue(est)) => {
            Ok(uvalue_error(*est, truth.windows.ok_or_else(missing)?))
        }
        (DataItem::Energy, DataEstimate::Energy(est)) => {
            Ok(energy_error(*est, truth.energy_kwh_m2.ok_or_else(missing)? as f64))
        }
        _ => Err(mismatch()),
    }
}

/// Sum of per-building errors.
pub fn aggregate_fitness(per_building_errors: &[f64]) -> Result<f64, FitnessError> {
    if per_building_errors.is_empty() {
        return Err(FitnessError::EmptySplit);
    }
    Ok(per_building_errors.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn range_point_examples() {
        assert_eq!(range_point_error(2007, 2011, 2009), 0);
        assert_eq!(range_point_error(2007, 2011, 2014), 3);
        assert_eq!(range_point_error(1990, 2020, 1985), 5);
    }

    #[test]
    fn range_range_examples() {
        let r = |a, b| YearRange::new(a, b).unwrap();
        assert_eq!(range_range_error(r(1900, 1930), r(1950, 1970)), 20);
        assert_eq!(range_range_error(r(1950, 1970), r(1900, 1930)), 20);
        assert_eq!(range_range_error(r(1900, 1960), r(1950, 1970)), 0);
    }

    #[test]
    fn heating_examples() {
        use HeatingClass::*;
        assert_eq!(heating_error(Underfloor, WarmAir), 1);
        assert_eq!(heating_error(Underfloor, WaterRadiators), 2);
        assert_eq!(heating_error(ElectricStorage, ElectricStorage), 0);
    }

    #[test]
    fn windows_examples() {
        use WindowClass::*;
        assert_eq!(windows_error(Single, HighEfficiency), 2);
        assert_eq!(windows_error(Single, Double), 1);
        assert_eq!(windows_error(Double, Double), 0);
    }

    #[test]
    fn lighting_examples() {
        assert_eq!(lighting_error(20.0, 86.0), 66.0);
        assert_eq!(lighting_error(100.0, 100.0), 0.0);
        assert_eq!(lighting_error(0.0, 100.0), 100.0);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy_error(NumericRange::point(150.0), 120.0), 30.0);
        assert_eq!(energy_error(NumericRange::range(100.0, 200.0), 150.0), 0.0);
        assert_eq!(energy_error(NumericRange::range(100.0, 200.0), 250.0), 50.0);
    }

    #[test]
    fn uvalue_examples() {
        assert!((uvalue_error(2.3, WindowClass::Double) - 0.3).abs() < 1e-12);
        assert_eq!(uvalue_error(0.5, WindowClass::Single), 0.0);
        assert!((uvalue_error(4.8, WindowClass::Double) - 2.8).abs() < 1e-12);
    }

    #[test]
    fn building_error_dispatch() {
        let truth = GroundTruth {
            age: Some(YearRange::exact(2014)),
            heating: Some(HeatingClass::Underfloor),
            windows: Some(WindowClass::Double),
            ..GroundTruth::default()
        };
        let age = DataEstimate::Age(YearRange::new(1990, 2020).unwrap());
        assert_eq!(building_error(DataItem::BuildingAge, &age, &truth), Ok(0.0));
        let heat = DataEstimate::Heating(HeatingClass::WarmAir);
        assert_eq!(building_error(DataItem::Heating, &heat, &truth), Ok(1.0));
        let u = DataEstimate::Uvalue(2.0);
        assert_eq!(building_error(DataItem::WindowsUvalue, &u, &truth), Ok(0.0));

        // range truth goes through the range/range rule
        let ranged = GroundTruth {
            age: YearRange::new(2007, 2011),
            ..GroundTruth::default()
        };
        let est = DataEstimate::Age(YearRange::new(1970, 1990).unwrap());
        assert_eq!(building_error(DataItem::BuildingAge, &est, &ranged), Ok(17.0));

        assert!(matches!(
            building_error(DataItem::Windows, &heat, &truth),
            Err(FitnessError::VariantMismatch { .. })
        ));
        assert_eq!(
            building_error(DataItem::Lighting, &DataEstimate::LightingPct(3.0), &truth),
            Err(FitnessError::MissingTruth(DataItem::Lighting))
        );
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_fitness(&[0.0, 3.0, 5.0]), Ok(8.0));
        assert_eq!(aggregate_fitness(&[0.0, 0.0]), Ok(0.0));
        assert_eq!(aggregate_fitness(&[66.0]), Ok(66.0));
        assert_eq!(aggregate_fitness(&[]), Err(FitnessError::EmptySplit));
    }

    #[test]
    fn penalties_bound_the_categorical_errors() {
        for a in HeatingClass::ALL {
            for b in HeatingClass::ALL {
                assert!(f64::from(heating_error(a, b)) <= failure_penalty(DataItem::Heating));
            }
        }
        for a in WindowClass::ALL {
            for b in WindowClass::ALL {
                assert!(f64::from(windows_error(a, b)) <= failure_penalty(DataItem::Windows));
                assert!(uvalue_error(a.uvalue_target(), b) <= failure_penalty(DataItem::WindowsUvalue));
            }
        }
    }

    proptest! {
        #[test]
        fn point_rule_is_degenerate_range_rule(s in -3000i32..3000, len in 0i32..500, p in -3000i32..3000) {
            let e = s + len;
            prop_assert_eq!(
                range_point_error(s as i64, e as i64, p as i64),
                range_range_error(YearRange::new(s, e).unwrap(), YearRange::exact(p))
            );
        }

        #[test]
        fn numeric_errors_are_nonnegative_metrics(a in 0.0f64..100.0, b in 0.0f64..100.0, c in 0.0f64..100.0) {
            prop_assert!(lighting_error(a, b) >= 0.0);
            prop_assert!(lighting_error(a, b) <= lighting_error(a, c) + lighting_error(c, b) + 1e-9);
            let w = WindowClass::Double;
            prop_assert!(uvalue_error(a + 0.01, w) >= 0.0);
            // triangle inequality in the estimate argument
            prop_assert!((uvalue_error(a, w) - uvalue_error(b, w)).abs() <= (a - b).abs() + 1e-9);
        }

        #[test]
        fn aggregate_is_permutation_invariant(mut v in prop::collection::vec(0u32..1000, 1..20), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let values: Vec<f64> = v.iter().map(|x| *x as f64).collect();
            let before = aggregate_fitness(&values).unwrap();
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let values: Vec<f64> = v.iter().map(|x| *x as f64).collect();
            prop_assert_eq!(before, aggregate_fitness(&values).unwrap());
        }
    }
}
