//! Cue search space and genotypes.
//!
//! A [`CueSchema`] is an ordered list of categories, each holding the
//! vocabulary of cues that may appear in the matching chromosome of a
//! [`Genotype`]. Schemas are frozen for the lifetime of a run.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator placed between cue labels when a genotype is rendered into a prompt.
pub const CUE_SEPARATOR: &str = ", ";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to parse schema at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The extraction target a run optimizes for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataItem {
    BuildingAge,
    Lighting,
    Heating,
    Windows,
    WindowsUvalue,
    Energy,
}

impl DataItem {
    pub const ALL: [DataItem; 6] = [
        DataItem::BuildingAge,
        DataItem::Lighting,
        DataItem::Heating,
        DataItem::Windows,
        DataItem::WindowsUvalue,
        DataItem::Energy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DataItem::BuildingAge => "building_age",
            DataItem::Lighting => "lighting",
            DataItem::Heating => "heating",
            DataItem::Windows => "windows",
            DataItem::WindowsUvalue => "windows_uvalue",
            DataItem::Energy => "energy",
        }
    }
}

impl fmt::Display for DataItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataItem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DataItem::ALL
            .into_iter()
            .find(|item| item.as_str() == s.trim())
            .ok_or_else(|| {
                format!(
                    "unknown data item `{s}` (expected one of: {})",
                    DataItem::ALL.map(|i| i.as_str()).join(", ")
                )
            })
    }
}

/// A single textual cue. Labels are trimmed on construction and compared
/// case-sensitively.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Cue(String);

impl Cue {
    pub fn new(label: impl AsRef<str>) -> Result<Self, SchemaError> {
        let trimmed = label.as_ref().trim();
        if trimmed.is_empty() {
            return Err(SchemaError::Invalid("cue label is empty".into()));
        }
        Ok(Cue(trimmed.to_string()))
    }

    pub fn label(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Cue {
    type Error = SchemaError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Cue::new(value)
    }
}

impl From<Cue> for String {
    fn from(cue: Cue) -> Self {
        cue.0
    }
}

impl fmt::Display for Cue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueCategory {
    pub name: String,
    #[serde(rename = "cues")]
    pub allowed_cues: Vec<Cue>,
}

impl CueCategory {
    pub fn contains(&self, cue: &Cue) -> bool {
        self.allowed_cues.contains(cue)
    }

    pub fn len(&self) -> usize {
        self.allowed_cues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed_cues.is_empty()
    }
}

/// The evolvable search space for one data item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueSchema {
    pub data_item: DataItem,
    pub region: String,
    pub categories: Vec<CueCategory>,
}

impl CueSchema {
    /// Builds a schema and checks every invariant.
    pub fn new(
        data_item: DataItem,
        region: impl Into<String>,
        categories: Vec<CueCategory>,
    ) -> Result<Self, SchemaError> {
        let schema = CueSchema {
            data_item,
            region: region.into(),
            categories,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.categories.is_empty() {
            return Err(SchemaError::Invalid("schema has no categories".into()));
        }
        let mut names = BTreeSet::new();
        for category in &self.categories {
            if category.name.trim().is_empty() {
                return Err(SchemaError::Invalid("category name is empty".into()));
            }
            if !names.insert(category.name.as_str()) {
                return Err(SchemaError::Invalid(format!(
                    "duplicate category name `{}`",
                    category.name
                )));
            }
            if category.allowed_cues.is_empty() {
                return Err(SchemaError::Invalid(format!(
                    "category `{}` has no cues",
                    category.name
                )));
            }
            let mut seen = BTreeSet::new();
            for cue in &category.allowed_cues {
                if !seen.insert(cue) {
                    return Err(SchemaError::Invalid(format!(
                        "duplicate cue `{cue}` in category `{}`",
                        category.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn total_cues(&self) -> usize {
        self.categories.iter().map(CueCategory::len).sum()
    }

    /// Serializes into the schema document format (pretty JSON).
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serialization is infallible")
    }

    pub fn save(&self, path: &Path) -> Result<(), SchemaError> {
        std::fs::write(path, self.to_document() + "\n").map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Digest of the document form, used to pin a checkpoint to its schema.
    pub fn digest(&self) -> String {
        crate::digest_hex(self.to_document().as_bytes())
    }
}

/// Parses a schema document, preserving category and cue order.
pub fn load_schema(document: &str) -> Result<CueSchema, SchemaError> {
    let mut de = serde_json::Deserializer::from_str(document);
    let schema: CueSchema =
        serde_path_to_error(&mut de).map_err(|(path, message)| SchemaError::Parse {
            path,
            message,
        })?;
    schema.validate()?;
    Ok(schema)
}

pub fn load_schema_file(path: &Path) -> Result<CueSchema, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_schema(&text)
}

// serde_json reports line/column; turn that into a JSON-pointer-ish path by
// re-walking the document as an untyped value.
fn serde_path_to_error(
    de: &mut serde_json::Deserializer<serde_json::de::StrRead<'_>>,
) -> Result<CueSchema, (String, String)> {
    let value = serde_json::Value::deserialize(&mut *de)
        .map_err(|e| ("$".to_string(), e.to_string()))?;
    de.end().map_err(|e| ("$".to_string(), e.to_string()))?;
    check_shape(&value)?;
    serde_json::from_value(value).map_err(|e| ("$".to_string(), e.to_string()))
}

fn check_shape(value: &serde_json::Value) -> Result<(), (String, String)> {
    let obj = value
        .as_object()
        .ok_or_else(|| ("$".to_string(), "expected an object".to_string()))?;
    let item = obj
        .get("data_item")
        .ok_or_else(|| ("$.data_item".to_string(), "missing field".to_string()))?;
    let item = item
        .as_str()
        .ok_or_else(|| ("$.data_item".to_string(), "expected a string".to_string()))?;
    item.parse::<DataItem>()
        .map_err(|e| ("$.data_item".to_string(), e))?;
    match obj.get("region") {
        Some(serde_json::Value::String(_)) => {}
        Some(_) => return Err(("$.region".into(), "expected a string".into())),
        None => return Err(("$.region".into(), "missing field".into())),
    }
    let categories = obj
        .get("categories")
        .ok_or_else(|| ("$.categories".to_string(), "missing field".to_string()))?
        .as_array()
        .ok_or_else(|| ("$.categories".to_string(), "expected an array".to_string()))?;
    for (i, category) in categories.iter().enumerate() {
        let at = format!("$.categories[{i}]");
        let c = category
            .as_object()
            .ok_or_else(|| (at.clone(), "expected an object".to_string()))?;
        if !matches!(c.get("name"), Some(serde_json::Value::String(_))) {
            return Err((format!("{at}.name"), "expected a string".into()));
        }
        let cues = c
            .get("cues")
            .and_then(|v| v.as_array())
            .ok_or_else(|| (format!("{at}.cues"), "expected an array".to_string()))?;
        for (j, cue) in cues.iter().enumerate() {
            match cue.as_str() {
                Some(s) if !s.trim().is_empty() => {}
                Some(_) => return Err((format!("{at}.cues[{j}]"), "empty cue label".into())),
                None => return Err((format!("{at}.cues[{j}]"), "expected a string".into())),
            }
        }
    }
    Ok(())
}

/// One individual: an ordered cue list per schema category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub chromosomes: Vec<Vec<Cue>>,
}

impl Genotype {
    pub fn new(chromosomes: Vec<Vec<Cue>>) -> Self {
        Genotype { chromosomes }
    }

    pub fn empty(categories: usize) -> Self {
        Genotype {
            chromosomes: vec![Vec::new(); categories],
        }
    }

    /// Convenience constructor from string labels; panics on empty labels.
    pub fn from_labels<S: AsRef<str>>(chromosomes: &[&[S]]) -> Self {
        Genotype {
            chromosomes: chromosomes
                .iter()
                .map(|ch| {
                    ch.iter()
                        .map(|l| Cue::new(l).expect("non-empty cue label"))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn cue_count(&self) -> usize {
        self.chromosomes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cue_count() == 0
    }

    pub fn cues(&self) -> impl Iterator<Item = (usize, &Cue)> {
        self.chromosomes
            .iter()
            .enumerate()
            .flat_map(|(i, ch)| ch.iter().map(move |c| (i, c)))
    }

    /// Checks membership, duplicates and chromosome count against `schema`.
    /// With `fixed_length`, each chromosome must also hold exactly one cue.
    pub fn validate(&self, schema: &CueSchema, fixed_length: bool) -> Result<(), SchemaError> {
        if self.chromosomes.len() != schema.category_count() {
            return Err(SchemaError::InvalidGenotype(format!(
                "{} chromosomes for a schema of {} categories",
                self.chromosomes.len(),
                schema.category_count()
            )));
        }
        for (chromosome, category) in self.chromosomes.iter().zip(&schema.categories) {
            if fixed_length && chromosome.len() != 1 {
                return Err(SchemaError::InvalidGenotype(format!(
                    "chromosome `{}` has {} cues in fixed-length mode",
                    category.name,
                    chromosome.len()
                )));
            }
            if chromosome.len() > category.len() {
                return Err(SchemaError::InvalidGenotype(format!(
                    "chromosome `{}` is longer than its vocabulary",
                    category.name
                )));
            }
            let mut seen = BTreeSet::new();
            for cue in chromosome {
                if !category.contains(cue) {
                    return Err(SchemaError::InvalidGenotype(format!(
                        "cue `{cue}` is not allowed in category `{}`",
                        category.name
                    )));
                }
                if !seen.insert(cue) {
                    return Err(SchemaError::InvalidGenotype(format!(
                        "duplicate cue `{cue}` in category `{}`",
                        category.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws one uniformly chosen cue per category.
pub fn random_genotype<R: Rng + ?Sized>(schema: &CueSchema, rng: &mut R) -> Genotype {
    Genotype {
        chromosomes: schema
            .categories
            .iter()
            .map(|category| {
                let idx = rng.random_range(0..category.len());
                vec![category.allowed_cues[idx].clone()]
            })
            .collect(),
    }
}

/// Identity key for caching: per chromosome, the sorted set of labels.
///
/// Within-chromosome order is ignored, chromosome position is not. Labels are
/// JSON-escaped so the key cannot collide through separator characters.
pub fn canonical_key(g: &Genotype) -> String {
    let sets: Vec<Vec<&str>> = g
        .chromosomes
        .iter()
        .map(|ch| {
            let set: BTreeSet<&str> = ch.iter().map(Cue::label).collect();
            set.into_iter().collect()
        })
        .collect();
    serde_json::to_string(&sets).expect("key serialization is infallible")
}

/// Concatenates all cue labels in chromosome order, separated by `", "`.
pub fn render_cue_list(g: &Genotype) -> String {
    g.chromosomes
        .iter()
        .flatten()
        .map(Cue::label)
        .collect::<Vec<_>>()
        .join(CUE_SEPARATOR)
}
