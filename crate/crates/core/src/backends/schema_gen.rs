//! LLM-driven construction of a cue schema from training buildings.
//!
//! 1. Group the training buildings into (up to) three strata.
//! 2. Pick one representative building per stratum.
//! 3. Ask the LLM for ~50 visible features per representative.
//! 4. Ask it to deduplicate and cluster the pooled features.
//! 5. Ask it to format the clusters as a Python array and convert that into
//!    a [`CueSchema`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use super::llm::{LlmRequest, Transport, TransportError};
use super::prompts;
use crate::dataset::{stratum, BuildingRecord};
use crate::schema::{Cue, CueCategory, CueSchema, DataItem};

pub const TARGET_CLUSTERS: usize = 8;

#[derive(Debug, Error)]
pub enum SchemaGenError {
    #[error("no training buildings")]
    NoTraining,
    #[error("{step}: {source}")]
    Transport {
        step: String,
        #[source]
        source: TransportError,
    },
    #[error("{step}: unusable LLM response ({message}){}", raw_path.as_ref().map(|p| format!("; raw response saved to {}", p.display())).unwrap_or_default())]
    Unparseable {
        step: String,
        message: String,
        raw_path: Option<PathBuf>,
    },
}

/// A value from a Python/JSON-style literal.
#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Num(String),
    List(Vec<Literal>),
    Map(Vec<(Literal, Literal)>),
}

impl Literal {
    fn as_text(&self) -> Option<String> {
        match self {
            Literal::Str(s) | Literal::Num(s) => Some(s.clone()),
            _ => None,
        }
    }
}

struct LiteralParser<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
}

impl<'a> LiteralParser<'a> {
    fn skip_ws(&mut self) {
        while let Some((_, c)) = self.chars.peek() {
            if c.is_whitespace() {
                self.chars.next();
            } else if *c == '#' {
                // python comment to end of line
                for (_, c) in self.chars.by_ref() {
                    if c == '\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn value(&mut self) -> Option<Literal> {
        self.skip_ws();
        let (_, c) = *self.chars.peek()?;
        match c {
            '[' | '(' => {
                self.chars.next();
                let close = if c == '[' { ']' } else { ')' };
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.chars.peek()?.1 {
                        ch if ch == close => {
                            self.chars.next();
                            return Some(Literal::List(items));
                        }
                        ',' => {
                            self.chars.next();
                        }
                        _ => items.push(self.value()?),
                    }
                }
            }
            '{' => {
                self.chars.next();
                let mut entries = Vec::new();
                loop {
                    self.skip_ws();
                    match self.chars.peek()?.1 {
                        '}' => {
                            self.chars.next();
                            return Some(Literal::Map(entries));
                        }
                        ',' => {
                            self.chars.next();
                        }
                        _ => {
                            let k = self.value()?;
                            self.skip_ws();
                            if self.chars.next()?.1 != ':' {
                                return None;
                            }
                            let v = self.value()?;
                            entries.push((k, v));
                        }
                    }
                }
            }
            '"' | '\'' => {
                self.chars.next();
                let mut s = String::new();
                loop {
                    let (_, ch) = self.chars.next()?;
                    match ch {
                        '\\' => {
                            let (_, esc) = self.chars.next()?;
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                other => other,
                            });
                        }
                        ch if ch == c => return Some(Literal::Str(s)),
                        ch => s.push(ch),
                    }
                }
            }
            c if c.is_ascii_digit() || c == '-' => {
                let mut s = String::new();
                while let Some((_, ch)) = self.chars.peek() {
                    if ch.is_ascii_alphanumeric() || *ch == '.' || *ch == '-' || *ch == '_' {
                        s.push(*ch);
                        self.chars.next();
                    } else {
                        break;
                    }
                }
                Some(Literal::Num(s))
            }
            _ => None,
        }
    }
}

/// Finds and parses the first bracketed literal (`[...]` or `{...}`) in
/// free text, skipping prose and code fences around it.
pub fn parse_python_literal(text: &str) -> Option<Literal> {
    for (i, c) in text.char_indices() {
        if c == '[' || c == '{' {
            let mut p = LiteralParser {
                chars: text[i..].char_indices().peekable(),
            };
            if let Some(v @ (Literal::List(_) | Literal::Map(_))) = p.value() {
                return Some(v);
            }
        }
    }
    None
}

/// Converts formatted clusters into categories. Accepts a list of cue lists,
/// a list of `[name, [cues...]]` pairs, or a mapping from name to cues.
pub fn categories_from_literal(literal: &Literal) -> Result<Vec<CueCategory>, String> {
    let mut named: Vec<(Option<String>, Vec<String>)> = Vec::new();
    let texts = |items: &[Literal]| -> Option<Vec<String>> { items.iter().map(Literal::as_text).collect() };
    match literal {
        Literal::Map(entries) => {
            for (k, v) in entries {
                let name = k.as_text().ok_or("category name is not text")?;
                let Literal::List(items) = v else {
                    return Err(format!("category `{name}` is not a list"));
                };
                named.push((Some(name), texts(items).ok_or("cue is not text")?));
            }
        }
        Literal::List(groups) => {
            for group in groups {
                let Literal::List(items) = group else {
                    return Err("expected an array of arrays".into());
                };
                match items.as_slice() {
                    [Literal::Str(name), Literal::List(cues)] => {
                        named.push((Some(name.clone()), texts(cues).ok_or("cue is not text")?));
                    }
                    _ => named.push((None, texts(items).ok_or("cue is not text")?)),
                }
            }
        }
        _ => return Err("expected an array".into()),
    }

    let mut categories = Vec::new();
    let mut used_names = std::collections::BTreeSet::new();
    for (i, (name, cues)) in named.into_iter().enumerate() {
        let mut allowed: Vec<Cue> = Vec::new();
        for label in cues {
            let label = clean_feature(&label);
            if let Ok(cue) = Cue::new(&label) {
                if !allowed.contains(&cue) {
                    allowed.push(cue);
                }
            }
        }
        if allowed.is_empty() {
            continue;
        }
        let base = name
            .map(|n| n.trim().to_string())
            .filter(|n| !n.is_empty())
            .unwrap_or_else(|| format!("Category {}", i + 1));
        let mut unique = base.clone();
        let mut k = 2;
        while !used_names.insert(unique.clone()) {
            unique = format!("{base} ({k})");
            k += 1;
        }
        categories.push(CueCategory {
            name: unique,
            allowed_cues: allowed,
        });
    }
    if categories.is_empty() {
        return Err("no non-empty categories".into());
    }
    Ok(categories)
}

fn clean_feature(line: &str) -> String {
    let mut s = line.trim().replace("**", "").replace('`', "");
    // list markers: "-", "*", "•", "12.", "12)"
    let trimmed = s.trim_start_matches(['-', '*', '•', '·']).trim_start();
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    let rest = &trimmed[digits..];
    s = if digits > 0 && (rest.starts_with('.') || rest.starts_with(')')) {
        rest[1..].trim().to_string()
    } else {
        trimmed.to_string()
    };
    s.trim().trim_end_matches([',', ';', '.']).trim().to_string()
}

/// Pulls feature labels out of a free-text list response. A label followed by
/// `: explanation` keeps only the label; lines ending in `:` are headings.
pub fn parse_feature_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .filter(|l| !l.trim_end_matches("**").ends_with(':'))
        .filter(|l| {
            let c = l.chars().next().unwrap_or(' ');
            c == '-' || c == '*' || c == '•' || c.is_ascii_digit()
        })
        .map(|l| {
            let label = clean_feature(l);
            match label.split_once(": ") {
                Some((head, _)) => head.trim().to_string(),
                None => label,
            }
        })
        .filter(|l| !l.is_empty())
        .collect()
}

/// Everything the pipeline produced, for inspection and reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaGeneration {
    pub schema: CueSchema,
    pub groups: Vec<Vec<String>>,
    pub representatives: Vec<String>,
    pub raw_features: Vec<String>,
}

pub struct SchemaGenerator<'a, T: Transport + ?Sized> {
    pub transport: &'a T,
    pub item: DataItem,
    pub region: String,
    pub retry_limit: u32,
    /// Where unusable responses are written for inspection.
    pub raw_dir: Option<PathBuf>,
}

impl<T: Transport + ?Sized> SchemaGenerator<'_, T> {
    fn ask<V>(
        &self,
        step: &str,
        request: &LlmRequest,
        mut parse: impl FnMut(&str) -> Result<V, String>,
    ) -> Result<V, SchemaGenError> {
        let mut last = (String::new(), String::new());
        for attempt in 0..=self.retry_limit {
            let text = match self.transport.send(request) {
                Ok(t) => t,
                Err(e @ TransportError::Auth(_)) | Err(e @ TransportError::Image { .. }) => {
                    return Err(SchemaGenError::Transport { step: step.into(), source: e })
                }
                Err(e) if attempt == self.retry_limit => {
                    return Err(SchemaGenError::Transport { step: step.into(), source: e })
                }
                Err(e) => {
                    log::warn!("{step}: attempt {attempt}: {e}");
                    continue;
                }
            };
            match parse(&text) {
                Ok(v) => return Ok(v),
                Err(message) => {
                    log::warn!("{step}: attempt {attempt}: {message}");
                    last = (text, message);
                }
            }
        }
        let raw_path = self.raw_dir.as_deref().and_then(|dir| save_raw(dir, step, &last.0));
        Err(SchemaGenError::Unparseable {
            step: step.into(),
            message: last.1,
            raw_path,
        })
    }

    /// Partitions training buildings into up to three groups.
    pub fn group(&self, training: &[BuildingRecord]) -> Result<Vec<Vec<String>>, SchemaGenError> {
        if self.item == DataItem::BuildingAge {
            let rows: Vec<String> = training
                .iter()
                .filter_map(|b| b.truth.age.map(|a| format!("{}, {}", b.id, a)))
                .collect();
            let request = LlmRequest {
                prompt: prompts::age_clustering_prompt(&rows),
                images: Vec::new(),
            };
            let known: std::collections::BTreeSet<&str> = training.iter().map(|b| b.id.as_str()).collect();
            return self.ask("age clustering", &request, |text| {
                let literal = parse_python_literal(text).ok_or("no array found")?;
                let groups: Vec<Literal> = match literal {
                    Literal::List(g) => g,
                    Literal::Map(entries) => entries.into_iter().map(|(_, v)| v).collect(),
                    _ => return Err("expected an array of id arrays".into()),
                };
                let mut out = Vec::new();
                for g in groups {
                    let Literal::List(ids) = g else {
                        return Err("expected an array of id arrays".into());
                    };
                    let ids: Vec<String> = ids
                        .iter()
                        .filter_map(Literal::as_text)
                        .filter(|id| known.contains(id.as_str()))
                        .collect();
                    if !ids.is_empty() {
                        out.push(ids);
                    }
                }
                if out.is_empty() {
                    Err("no known building ids in response".into())
                } else {
                    Ok(out)
                }
            });
        }
        let mut strata: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for b in training {
            if let Some(s) = stratum(self.item, &b.truth) {
                strata.entry(s).or_default().push(b.id.clone());
            }
        }
        Ok(strata.into_values().collect())
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        training: &[BuildingRecord],
        rng: &mut R,
    ) -> Result<SchemaGeneration, SchemaGenError> {
        if training.is_empty() {
            return Err(SchemaGenError::NoTraining);
        }
        let groups = self.group(training)?;
        let representatives: Vec<String> = groups
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| g[rng.random_range(0..g.len())].clone())
            .collect();

        let mut raw_features = Vec::new();
        for id in &representatives {
            let building = training.iter().find(|b| &b.id == id).expect("grouped ids are known");
            let request = LlmRequest {
                prompt: prompts::feature_extraction_prompt(self.item, &self.region),
                images: building.images_for(self.item).to_vec(),
            };
            let features = self.ask(&format!("feature extraction ({id})"), &request, |text| {
                let f = parse_feature_list(text);
                if f.is_empty() {
                    Err("no list items found".into())
                } else {
                    Ok(f)
                }
            })?;
            raw_features.extend(features);
        }

        let cluster_request = LlmRequest {
            prompt: prompts::dedup_cluster_prompt(&raw_features, TARGET_CLUSTERS),
            images: Vec::new(),
        };
        let clusters = self.ask("deduplication and clustering", &cluster_request, |text| {
            if text.trim().is_empty() {
                Err("empty response".into())
            } else {
                Ok(text.trim().to_string())
            }
        })?;

        let format_request = LlmRequest {
            prompt: prompts::formatting_prompt(&clusters),
            images: Vec::new(),
        };
        let categories = self.ask("formatting", &format_request, |text| {
            let literal = parse_python_literal(text).ok_or("no array found")?;
            categories_from_literal(&literal)
        })?;

        let schema = CueSchema::new(self.item, self.region.clone(), categories).map_err(|e| {
            SchemaGenError::Unparseable {
                step: "formatting".into(),
                message: e.to_string(),
                raw_path: None,
            }
        })?;
        Ok(SchemaGeneration {
            schema,
            groups,
            representatives,
            raw_features,
        })
    }
}

fn save_raw(dir: &Path, step: &str, text: &str) -> Option<PathBuf> {
    let name: String = step
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join(format!("{name}.raw.txt"));
    std::fs::write(&path, text).ok()?;
    Some(path)
}

/// Convenience wrapper over [`SchemaGenerator::generate`].
pub fn generate_schema<T: Transport + ?Sized, R: Rng + ?Sized>(
    training: &[BuildingRecord],
    item: DataItem,
    region: &str,
    transport: &T,
    retry_limit: u32,
    rng: &mut R,
) -> Result<SchemaGeneration, SchemaGenError> {
    SchemaGenerator {
        transport,
        item,
        region: region.to_string(),
        retry_limit,
        raw_dir: None,
    }
    .generate(training, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_python_arrays_in_prose() {
        let text = "Here you go:\n```python\n[['Window Frame Material', \"Frame's Colour\"], ['Mullions', 'Sash']]\n```";
        let lit = parse_python_literal(text).unwrap();
        let cats = categories_from_literal(&lit).unwrap();
        assert_eq!(cats.len(), 2);
        assert_eq!(cats[0].name, "Category 1");
        assert_eq!(cats[0].allowed_cues[1].label(), "Frame's Colour");
    }

    #[test]
    fn named_forms() {
        let lit = parse_python_literal(r#"[["Material", ["a", "b", "a"]], ["Use", ["c"]]]"#).unwrap();
        let cats = categories_from_literal(&lit).unwrap();
        assert_eq!(cats[0].name, "Material");
        assert_eq!(cats[0].allowed_cues.len(), 2);
        let lit = parse_python_literal(r#"x = {"Material": ["a"], 'Use': ['c', 'd'], "Empty": []}"#).unwrap();
        let cats = categories_from_literal(&lit).unwrap();
        assert_eq!(cats.len(), 2);
        assert_eq!(cats[1].name, "Use");
    }

    #[test]
    fn duplicate_category_names_are_disambiguated() {
        let lit = parse_python_literal(r#"{"A": ["x"], "A ": ["y"]}"#).unwrap();
        let cats = categories_from_literal(&lit).unwrap();
        assert_eq!(cats[1].name, "A (2)");
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_python_literal("no arrays").is_none());
        assert!(parse_python_literal("[unterminated").is_none());
        let lit = parse_python_literal("[[], []]").unwrap();
        assert!(categories_from_literal(&lit).is_err());
    }

    #[test]
    fn feature_lists() {
        let text = "Here are the features:\n\n1. **Window Frame Material**: uPVC\n2. Sash windows\n- Trickle vents.\n**Frames:**\n* Frame Insulation\nThanks!";
        assert_eq!(
            parse_feature_list(text),
            vec!["Window Frame Material", "Sash windows", "Trickle vents", "Frame Insulation"]
        );
    }
}
