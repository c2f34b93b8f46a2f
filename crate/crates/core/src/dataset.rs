//! Dataset manifests: buildings, their image subsets and ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::{HeatingClass, WindowClass, YearRange};
use crate::parsing;
use crate::schema::DataItem;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("building {id}: {message}")]
    Record { id: String, message: String },
    #[error("duplicate building id `{0}`")]
    DuplicateId(String),
    #[error("dataset is empty")]
    Empty,
}

/// The four photo subsets kept per building.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSet {
    Building,
    Heating,
    Windows,
    Lighting,
}

impl ImageSet {
    /// The subset shown to the estimator for a data item.
    pub fn for_item(item: DataItem) -> ImageSet {
        match item {
            DataItem::BuildingAge | DataItem::Energy => ImageSet::Building,
            DataItem::Lighting => ImageSet::Lighting,
            DataItem::Heating => ImageSet::Heating,
            DataItem::Windows | DataItem::WindowsUvalue => ImageSet::Windows,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<YearRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heating: Option<HeatingClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<WindowClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_kwh_m2: Option<u32>,
}

impl GroundTruth {
    pub fn has(&self, item: DataItem) -> bool {
        match item {
            DataItem::BuildingAge => self.age.is_some(),
            DataItem::Lighting => self.lighting_pct.is_some(),
            DataItem::Heating => self.heating.is_some(),
            DataItem::Windows | DataItem::WindowsUvalue => self.windows.is_some(),
            DataItem::Energy => self.energy_kwh_m2.is_some(),
        }
    }
}

/// Which side of the train/test split a building belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub id: String,
    #[serde(default = "default_region")]
    pub region: String,
    #[serde(default)]
    pub image_sets: BTreeMap<ImageSet, Vec<PathBuf>>,
    pub truth: GroundTruth,
    /// Optional pinned split; unpinned records are assigned by [`split_dataset`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn default_region() -> String {
    "UK".to_string()
}

impl BuildingRecord {
    pub fn images_for(&self, item: DataItem) -> &[PathBuf] {
        self.image_sets
            .get(&ImageSet::for_item(item))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

// Manifest-side truth: age and lighting may be textual.
#[derive(Deserialize)]
struct RawTruth {
    #[serde(default)]
    age: Option<serde_json::Value>,
    #[serde(default)]
    lighting_pct: Option<serde_json::Value>,
    #[serde(default)]
    heating: Option<String>,
    #[serde(default)]
    windows: Option<String>,
    #[serde(default)]
    energy_kwh_m2: Option<u32>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default = "default_region")]
    region: String,
    #[serde(default)]
    image_sets: BTreeMap<ImageSet, Vec<PathBuf>>,
    truth: RawTruth,
    #[serde(default)]
    split: Option<Split>,
}

fn text_of(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn clean_truth(id: &str, raw: RawTruth, current_year: i32) -> Result<GroundTruth, DatasetError> {
    let err = |message: String| DatasetError::Record {
        id: id.to_string(),
        message,
    };
    let age = raw
        .age
        .map(|v| match serde_json::from_value::<YearRange>(v.clone()) {
            Ok(r) if r.start <= r.end => Ok(r),
            _ => parsing::parse_age(&text_of(&v), current_year),
        })
        .transpose()
        .map_err(|e| err(format!("truth.age: {e}")))?;
    let lighting_pct = raw
        .lighting_pct
        .map(|v| parsing::parse_lighting(&text_of(&v)))
        .transpose()
        .map_err(|e| err(format!("truth.lighting_pct: {e}")))?;
    let heating = raw
        .heating
        .map(|s| {
            serde_json::from_value::<HeatingClass>(serde_json::Value::String(s.clone()))
                .or_else(|_| parsing::parse_heating(&s))
        })
        .transpose()
        .map_err(|e| err(format!("truth.heating: {e}")))?;
    let windows = raw
        .windows
        .map(|s| {
            serde_json::from_value::<WindowClass>(serde_json::Value::String(s.clone()))
                .or_else(|_| parsing::parse_windows(&s))
        })
        .transpose()
        .map_err(|e| err(format!("truth.windows: {e}")))?;
    if let Some(e) = raw.energy_kwh_m2 {
        if e == 0 {
            return Err(err("truth.energy_kwh_m2 must be positive".into()));
        }
    }
    Ok(GroundTruth {
        age,
        lighting_pct,
        heating,
        windows,
        energy_kwh_m2: raw.energy_kwh_m2,
    })
}

/// A loaded manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<BuildingRecord>,
}

impl Dataset {
    /// Parses a manifest document. Textual ages and lighting shares are cleaned
    /// here, with `current_year` closing "now" ranges. Relative image paths are
    /// resolved against `base_dir`.
    pub fn from_manifest(
        document: &str,
        base_dir: Option<&Path>,
        current_year: i32,
        origin: &str,
    ) -> Result<Self, DatasetError> {
        let raw: Vec<RawRecord> =
            serde_json::from_str(document).map_err(|source| DatasetError::Json {
                path: origin.to_string(),
                source,
            })?;
        let mut ids = std::collections::BTreeSet::new();
        let mut records = Vec::with_capacity(raw.len());
        for r in raw {
            if !ids.insert(r.id.clone()) {
                return Err(DatasetError::DuplicateId(r.id));
            }
            let truth = clean_truth(&r.id, r.truth, current_year)?;
            let image_sets = r
                .image_sets
                .into_iter()
                .map(|(k, paths)| {
                    let paths = paths
                        .into_iter()
                        .map(|p| match base_dir {
                            Some(dir) if p.is_relative() => dir.join(p),
                            _ => p,
                        })
                        .collect();
                    (k, paths)
                })
                .collect();
            records.push(BuildingRecord {
                id: r.id,
                region: r.region,
                image_sets,
                truth,
                split: r.split,
            });
        }
        if records.is_empty() {
            return Err(DatasetError::Empty);
        }
        Ok(Dataset { records })
    }

    pub fn load(path: &Path, current_year: i32) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Dataset::from_manifest(&text, path.parent(), current_year, &path.display().to_string())
    }

    /// Checks that every image referenced for `item` exists and that the
    /// ground truth for `item` is present.
    pub fn check_for_item(&self, item: DataItem, require_images: bool) -> Result<(), DatasetError> {
        for r in &self.records {
            if !r.truth.has(item) {
                return Err(DatasetError::Record {
                    id: r.id.clone(),
                    message: format!("no ground truth for {item}"),
                });
            }
            if require_images {
                let images = r.images_for(item);
                if images.is_empty() {
                    return Err(DatasetError::Record {
                        id: r.id.clone(),
                        message: format!("no {:?} images", ImageSet::for_item(item)),
                    });
                }
                if let Some(missing) = images.iter().find(|p| !p.is_file()) {
                    return Err(DatasetError::Record {
                        id: r.id.clone(),
                        message: format!("image not found: {}", missing.display()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("manifest serialization is infallible")
    }

    pub fn get(&self, id: &str) -> Option<&BuildingRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Value-based stratum of a building for `item`, used for representative
/// sampling and for stratified splitting. Age buildings are bucketed by era.
pub fn stratum(item: DataItem, truth: &GroundTruth) -> Option<usize> {
    match item {
        DataItem::BuildingAge => truth.age.map(|a| match a.start {
            y if y < 1930 => 0,
            y if y < 1990 => 1,
            _ => 2,
        }),
        DataItem::Lighting => truth.lighting_pct.map(|p| {
            if p <= 0.0 {
                0
            } else if p >= 100.0 {
                1
            } else {
                2
            }
        }),
        // water rads / electric panels / warm air; the two remaining classes
        // join their nearest neighbour in the heating error matrix
        DataItem::Heating => truth.heating.map(|h| match h {
            HeatingClass::WaterRadiators => 0,
            HeatingClass::ElectricPanel | HeatingClass::ElectricStorage => 1,
            HeatingClass::WarmAir | HeatingClass::Underfloor => 2,
        }),
        DataItem::Windows | DataItem::WindowsUvalue => truth.windows.map(|w| w.ordinal() as usize),
        DataItem::Energy => truth.energy_kwh_m2.map(|e| match e {
            e if e < 100 => 0,
            e if e <= 200 => 1,
            _ => 2,
        }),
    }
}

/// Splits records into (train, test), honoring pinned splits and assigning the
/// rest per stratum so that roughly `train_fraction` of each stratum trains.
/// Strata with at least two members get at least one building on each side.
pub fn split_dataset(
    dataset: &Dataset,
    item: DataItem,
    train_fraction: f64,
    seed: u64,
) -> (Vec<BuildingRecord>, Vec<BuildingRecord>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut strata: BTreeMap<Option<usize>, Vec<&BuildingRecord>> = BTreeMap::new();
    for r in &dataset.records {
        match r.split {
            Some(Split::Train) => train.push(r.clone()),
            Some(Split::Test) => test.push(r.clone()),
            None => strata.entry(stratum(item, &r.truth)).or_default().push(r),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, mut members) in strata {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        } else {
            n_train = n;
        }
        for (i, r) in members.into_iter().enumerate() {
            if i < n_train {
                train.push(r.clone());
            } else {
                test.push(r.clone());
            }
        }
    }
    let order = |v: &mut Vec<BuildingRecord>| {
        v.sort_by(|a, b| {
            let pos = |id: &str| dataset.records.iter().position(|r| r.id == id);
            pos(&a.id).cmp(&pos(&b.id))
        })
    };
    order(&mut train);
    order(&mut test);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"[
      {"id": "b1", "image_sets": {"windows": ["w1.jpg"], "building": ["ext.jpg"]},
       "truth": {"age": "19th century", "lighting_pct": "86%", "heating": "water rads",
                 "windows": "double glazed", "energy_kwh_m2": 120}},
      {"id": "b2", "truth": {"age": "before 1900", "heating": "electric_storage", "windows": "single"}},
      {"id": "b3", "truth": {"age": 2014, "lighting_pct": 20}},
      {"id": "b4", "truth": {"age": "2007-2011"}, "split": "test"}
    ]"#;

    #[test]
    fn cleans_textual_truth() {
        let ds = Dataset::from_manifest(MANIFEST, Some(Path::new("/data")), 2026, "m").unwrap();
        let b1 = &ds.records[0];
        assert_eq!(b1.truth.age, Some(YearRange { start: 1801, end: 1900 }));
        assert_eq!(b1.truth.lighting_pct, Some(86.0));
        assert_eq!(b1.truth.heating, Some(HeatingClass::WaterRadiators));
        assert_eq!(b1.truth.windows, Some(WindowClass::Double));
        assert_eq!(b1.images_for(DataItem::WindowsUvalue), &[PathBuf::from("/data/w1.jpg")]);
        assert_eq!(b1.region, "UK");
        let b2 = &ds.records[1];
        assert_eq!(b2.truth.age, Some(YearRange { start: 1000, end: 1899 }));
        assert_eq!(b2.truth.heating, Some(HeatingClass::ElectricStorage));
        assert_eq!(b2.truth.windows, Some(WindowClass::Single));
        assert_eq!(ds.records[2].truth.age, Some(YearRange::exact(2014)));
        assert_eq!(ds.records[2].truth.lighting_pct, Some(20.0));
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(matches!(Dataset::from_manifest("[]", None, 2026, "m"), Err(DatasetError::Empty)));
        let dup = r#"[{"id":"a","truth":{}},{"id":"a","truth":{}}]"#;
        assert!(matches!(Dataset::from_manifest(dup, None, 2026, "m"), Err(DatasetError::DuplicateId(_))));
        let bad_age = r#"[{"id":"a","truth":{"age":"Victorian"}}]"#;
        assert!(matches!(Dataset::from_manifest(bad_age, None, 2026, "m"), Err(DatasetError::Record { .. })));
        assert!(matches!(Dataset::from_manifest("{", None, 2026, "m"), Err(DatasetError::Json { .. })));
    }

    #[test]
    fn item_checks() {
        let ds = Dataset::from_manifest(MANIFEST, None, 2026, "m").unwrap();
        ds.check_for_item(DataItem::BuildingAge, false).unwrap();
        assert!(ds.check_for_item(DataItem::Energy, false).is_err());
        assert!(ds.check_for_item(DataItem::BuildingAge, true).is_err());
    }

    #[test]
    fn split_is_stratified_and_respects_pins() {
        let records: Vec<BuildingRecord> = (0..20)
            .map(|i| BuildingRecord {
                id: format!("b{i}"),
                region: "UK".into(),
                image_sets: BTreeMap::new(),
                truth: GroundTruth {
                    windows: Some(WindowClass::ALL[i % 3]),
                    ..GroundTruth::default()
                },
                split: (i == 19).then_some(Split::Test),
            })
            .collect();
        let ds = Dataset { records };
        let (train, test) = split_dataset(&ds, DataItem::Windows, 0.6, 1);
        assert_eq!(train.len() + test.len(), 20);
        assert!(test.iter().any(|r| r.id == "b19"));
        for class in WindowClass::ALL {
            assert!(train.iter().any(|r| r.truth.windows == Some(class)));
            assert!(test.iter().any(|r| r.truth.windows == Some(class)));
        }
        assert_eq!(split_dataset(&ds, DataItem::Windows, 0.6, 1), (train, test));
    }
}
