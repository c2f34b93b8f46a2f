//! Turning free-form estimator answers into typed estimates.
//!
//! Answers carry their final choice between `###` delimiters. The payload is
//! normalized (lowercase, collapsed whitespace, option numbering like `(2)`
//! stripped) before item-specific parsing.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::fitness::{DataEstimate, HeatingClass, NumericRange, WindowClass, YearRange};
use crate::schema::DataItem;

pub const DELIMITER: &str = "###";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no complete ### ... ### pair in answer")]
    MissingDelimiter,
    #[error("empty answer payload")]
    EmptyPayload,
    #[error("unrecognized {what}: `{payload}`")]
    Unrecognized { what: &'static str, payload: String },
    #[error("ambiguous {what}: `{payload}` matches {candidates}")]
    Ambiguous {
        what: &'static str,
        payload: String,
        candidates: String,
    },
}

fn unrecognized(what: &'static str, payload: &str) -> ParseError {
    ParseError::Unrecognized {
        what,
        payload: payload.to_string(),
    }
}

/// A full estimator response for one data item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAnswer {
    pub text: String,
    pub item: DataItem,
}

/// Returns the trimmed content of the last complete `###...###` pair.
pub fn extract_delimited(text: &str) -> Result<String, ParseError> {
    let segments: Vec<&str> = text.split(DELIMITER).collect();
    // segments at odd indices sit inside a pair when a closing delimiter follows
    if segments.len() < 3 {
        return Err(ParseError::MissingDelimiter);
    }
    let last_inside = (segments.len() - 2) | 1;
    let last_inside = if last_inside > segments.len() - 2 { last_inside - 2 } else { last_inside };
    let payload = segments[last_inside].trim();
    if payload.is_empty() {
        return Err(ParseError::EmptyPayload);
    }
    Ok(payload.to_string())
}

static NUMBERING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\(\s*\d+\s*\)|\d+\s*[).:])\s*").unwrap());

/// Lowercases, strips a leading option number and collapses whitespace.
pub fn normalize(payload: &str) -> String {
    let lowered = payload.trim().to_lowercase();
    let stripped = NUMBERING.replace(&lowered, "");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Like [`normalize`] but also turns punctuation into spaces, for matching
/// against option labels.
fn normalize_words(payload: &str) -> String {
    let base = normalize(payload);
    let cleaned: String = base
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '%' { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn contains_words(haystack: &str, needle: &str) -> bool {
    format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// Matches a payload against labelled options.
///
/// An exact normalized match wins. Otherwise a whole-word containment match in
/// either direction is accepted only when all matching labels agree on the
/// same value.
pub fn parse_categorical<T: Copy + PartialEq>(
    payload: &str,
    options: &[(&str, T)],
) -> Result<T, ParseError> {
    let norm = normalize_words(payload);
    if norm.is_empty() {
        return Err(ParseError::EmptyPayload);
    }
    if let Some((_, v)) = options.iter().find(|(label, _)| normalize_words(label) == norm) {
        return Ok(*v);
    }
    let matched: Vec<&(&str, T)> = options
        .iter()
        .filter(|(label, _)| {
            let l = normalize_words(label);
            contains_words(&norm, &l) || contains_words(&l, &norm)
        })
        .collect();
    match matched.as_slice() {
        [] => Err(unrecognized("option", payload)),
        [first, rest @ ..] if rest.iter().all(|(_, v)| *v == first.1) => Ok(first.1),
        many => Err(ParseError::Ambiguous {
            what: "option",
            payload: payload.to_string(),
            candidates: many.iter().map(|(l, _)| *l).collect::<Vec<_>>().join(" | "),
        }),
    }
}

/// Options offered in the heating prompt, plus the ground-truth vocabulary.
pub const HEATING_OPTIONS: &[(&str, HeatingClass)] = &[
    ("underfloor heating", HeatingClass::Underfloor),
    ("water radiators", HeatingClass::WaterRadiators),
    ("electric heaters", HeatingClass::ElectricPanel),
    ("electric storage heaters", HeatingClass::ElectricStorage),
    ("warm air from vents", HeatingClass::WarmAir),
    ("underfloor", HeatingClass::Underfloor),
    ("warm air", HeatingClass::WarmAir),
    ("water rads", HeatingClass::WaterRadiators),
    ("electric panels", HeatingClass::ElectricPanel),
    ("electric panel", HeatingClass::ElectricPanel),
    ("electric storage", HeatingClass::ElectricStorage),
];

pub const WINDOW_OPTIONS: &[(&str, WindowClass)] = &[
    ("single glazed", WindowClass::Single),
    ("double glazed", WindowClass::Double),
    ("high efficiency double or triple glazed", WindowClass::HighEfficiency),
    ("high efficiency", WindowClass::HighEfficiency),
    ("triple glazed", WindowClass::HighEfficiency),
];

pub fn parse_heating(payload: &str) -> Result<HeatingClass, ParseError> {
    parse_categorical(payload, HEATING_OPTIONS)
}

pub fn parse_windows(payload: &str) -> Result<WindowClass, ParseError> {
    parse_categorical(payload, WINDOW_OPTIONS)
}

static EXACT_YEAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d{3,4})$").unwrap());
static YEAR_RANGE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\d{3,4})\s*(?:-|–|—|to)\s*(\d{3,4}|now|present|today)$").unwrap()
});
static BEFORE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:before|pre|earlier than)\s*-?\s*(\d{3,4})$").unwrap());
static CENTURY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,2})(?:st|nd|rd|th)\s+century$").unwrap());

/// Earliest year used for open-ended "before N" ages.
pub const AGE_FLOOR: i32 = 1000;

/// Parses an age answer or ground-truth age string into a year range.
///
/// `current_year` closes ranges ending in "now".
pub fn parse_age(payload: &str, current_year: i32) -> Result<YearRange, ParseError> {
    let norm = normalize(payload);
    let norm = norm.trim_end_matches(['.', ',', ';']).trim();
    let bad = || unrecognized("age", payload);
    let year = |s: &str| s.parse::<i32>().map_err(|_| bad());

    if let Some(c) = EXACT_YEAR.captures(norm) {
        return Ok(YearRange::exact(year(&c[1])?));
    }
    if let Some(c) = YEAR_RANGE.captures(norm) {
        let start = year(&c[1])?;
        let end = match &c[2] {
            "now" | "present" | "today" => current_year,
            y => year(y)?,
        };
        return YearRange::new(start, end).ok_or_else(bad);
    }
    if let Some(c) = BEFORE.captures(norm) {
        let bound = year(&c[1])?;
        return YearRange::new(AGE_FLOOR, bound - 1).ok_or_else(bad);
    }
    if let Some(c) = CENTURY.captures(norm) {
        let n = year(&c[1])?;
        if n == 0 {
            return Err(bad());
        }
        return Ok(YearRange {
            start: (n - 1) * 100 + 1,
            end: n * 100,
        });
    }
    Err(bad())
}

static LOW_ENERGY_IN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^low energy in (\d{1,3})\s*%$").unwrap());
static BARE_PERCENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,3}(?:\.\d+)?)\s*%?$").unwrap());

/// The low-energy shares offered in the lighting prompt.
pub const LIGHTING_STEPS: [u32; 5] = [20, 40, 60, 80, 100];

pub fn parse_lighting(payload: &str) -> Result<f64, ParseError> {
    let norm = normalize(payload);
    let norm = norm.trim_end_matches('.').trim();
    let bad = || unrecognized("lighting", payload);
    if norm == "no low energy lighting" {
        return Ok(0.0);
    }
    if let Some(c) = LOW_ENERGY_IN.captures(norm) {
        let k: u32 = c[1].parse().map_err(|_| bad())?;
        return if LIGHTING_STEPS.contains(&k) {
            Ok(k as f64)
        } else {
            Err(bad())
        };
    }
    if let Some(c) = BARE_PERCENT.captures(norm) {
        let v: f64 = c[1].parse().map_err(|_| bad())?;
        if (0.0..=100.0).contains(&v) {
            return Ok(v);
        }
    }
    Err(bad())
}

static UNITS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?x)
        k?w(?:h)?\s*(?:/|per)\s*(?:m\s*[2²]|(?:square\s+)?met(?:re|er)s?(?:\s+squared)?|sq\.?\s*m)\s*k?
        | \bm\s*[2²]
        | \bkwh\b | \bw\b
        ",
    )
    .unwrap()
});
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+(?:\.\d+)?").unwrap());
static RANGE_JOINER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:-|–|—|to|and)\s*$").unwrap());

/// Parses a bare number or a two-number range, ignoring unit text.
pub fn parse_numeric(payload: &str) -> Result<NumericRange, ParseError> {
    let lowered = payload.to_lowercase().replace(',', "");
    let stripped = UNITS.replace_all(&lowered, " ");
    let numbers: Vec<regex::Match<'_>> = NUMBER.find_iter(&stripped).collect();
    let bad = || unrecognized("number", payload);
    let value = |m: &regex::Match<'_>| m.as_str().parse::<f64>().map_err(|_| bad());
    match numbers.as_slice() {
        [one] => Ok(NumericRange::point(value(one)?)),
        [a, b] if RANGE_JOINER.is_match(&stripped[a.end()..b.start()]) => {
            Ok(NumericRange::range(value(a)?, value(b)?))
        }
        _ => Err(bad()),
    }
}

/// Parses an already-extracted payload as the estimate for `item`.
pub fn parse_payload(
    item: DataItem,
    payload: &str,
    current_year: i32,
) -> Result<DataEstimate, ParseError> {
    Ok(match item {
        DataItem::BuildingAge => DataEstimate::Age(parse_age(payload, current_year)?),
        DataItem::Lighting => DataEstimate::LightingPct(parse_lighting(payload)?),
        DataItem::Heating => DataEstimate::Heating(parse_heating(payload)?),
        DataItem::Windows => DataEstimate::Windows(parse_windows(payload)?),
        DataItem::WindowsUvalue => {
            let r = parse_numeric(payload)?;
            DataEstimate::Uvalue(r.midpoint())
        }
        DataItem::Energy => DataEstimate::Energy(parse_numeric(payload)?),
    })
}

/// Extracts the delimited payload from a full response and parses it.
pub fn parse_answer(answer: &RawAnswer, current_year: i32) -> Result<DataEstimate, ParseError> {
    let payload = extract_delimited(&answer.text)?;
    parse_payload(answer.item, &payload, current_year)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_examples() {
        assert_eq!(
            extract_delimited("...reasoning... ### double glazed ###").unwrap(),
            "double glazed"
        );
        assert_eq!(extract_delimited("### 120 ###").unwrap(), "120");
        assert_eq!(
            extract_delimited("no delimiters here"),
            Err(ParseError::MissingDelimiter)
        );
        assert_eq!(extract_delimited("### dangling"), Err(ParseError::MissingDelimiter));
        assert_eq!(extract_delimited("### ###"), Err(ParseError::EmptyPayload));
    }

    #[test]
    fn extract_takes_last_complete_pair() {
        let text = "Options: ### single glazed ### or ### double glazed ###. Final: ### high efficiency double or triple glazed ### trailing ###";
        assert_eq!(
            extract_delimited(text).unwrap(),
            "high efficiency double or triple glazed"
        );
    }

    #[test]
    fn age_examples() {
        assert_eq!(parse_age("19th century", 2025).unwrap(), YearRange { start: 1801, end: 1900 });
        assert_eq!(parse_age("before 1900", 2025).unwrap(), YearRange { start: 1000, end: 1899 });
        assert_eq!(parse_age("2014", 2025).unwrap(), YearRange::exact(2014));
        assert_eq!(parse_age(" 2007-2011 ", 2025).unwrap(), YearRange { start: 2007, end: 2011 });
        assert_eq!(parse_age("2020-now", 2026).unwrap(), YearRange { start: 2020, end: 2026 });
        assert_eq!(parse_age("Before 1900.", 2025).unwrap(), YearRange { start: 1000, end: 1899 });
        assert_eq!(parse_age("21st Century", 2025).unwrap(), YearRange { start: 2001, end: 2100 });
        assert!(parse_age("Victorian", 2025).is_err());
        assert!(parse_age("2011-2007", 2025).is_err());
    }

    #[test]
    fn lighting_examples() {
        assert_eq!(parse_lighting("low energy in 20%").unwrap(), 20.0);
        assert_eq!(parse_lighting("no low energy lighting").unwrap(), 0.0);
        assert_eq!(parse_lighting("low energy in 100%").unwrap(), 100.0);
        assert_eq!(parse_lighting("86%").unwrap(), 86.0);
        assert!(parse_lighting("low energy in 30%").is_err());
        assert!(parse_lighting("mostly LED").is_err());
        assert!(parse_lighting("140%").is_err());
    }

    #[test]
    fn categorical_examples() {
        assert_eq!(parse_windows("(2) double glazed").unwrap(), WindowClass::Double);
        assert_eq!(parse_heating("water radiators").unwrap(), HeatingClass::WaterRadiators);
        assert!(parse_windows("triple-pane").is_err());
        assert_eq!(
            parse_windows("(3) High efficiency double or triple glazed").unwrap(),
            WindowClass::HighEfficiency
        );
        assert_eq!(parse_heating("Electric storage heaters.").unwrap(), HeatingClass::ElectricStorage);
        assert_eq!(parse_heating("electric heaters").unwrap(), HeatingClass::ElectricPanel);
        assert!(matches!(parse_windows("double"), Err(ParseError::Ambiguous { .. })));
        assert!(matches!(parse_windows(""), Err(ParseError::EmptyPayload)));
    }

    #[test]
    fn numeric_examples() {
        assert_eq!(parse_numeric("120").unwrap(), NumericRange::point(120.0));
        assert_eq!(parse_numeric("100-200 kwh").unwrap(), NumericRange::range(100.0, 200.0));
        assert_eq!(parse_numeric("2.3").unwrap(), NumericRange::point(2.3));
        assert_eq!(parse_numeric("150 kWh/m2").unwrap(), NumericRange::point(150.0));
        assert_eq!(parse_numeric("150 kwh/m²").unwrap(), NumericRange::point(150.0));
        assert_eq!(parse_numeric("1.4 W/m2K").unwrap(), NumericRange::point(1.4));
        assert_eq!(parse_numeric("1,200").unwrap(), NumericRange::point(1200.0));
        assert_eq!(parse_numeric("100 to 200").unwrap(), NumericRange::range(100.0, 200.0));
        assert!(parse_numeric("about average").is_err());
        assert!(parse_numeric("120, maybe 130").is_err());
    }

    #[test]
    fn every_prompt_option_round_trips() {
        let age_options = [
            ("before 1900", YearRange { start: 1000, end: 1899 }),
            ("1900-1930", YearRange { start: 1900, end: 1930 }),
            ("1930-1950", YearRange { start: 1930, end: 1950 }),
            ("1950-1970", YearRange { start: 1950, end: 1970 }),
            ("1970-1990", YearRange { start: 1970, end: 1990 }),
            ("1990-2020", YearRange { start: 1990, end: 2020 }),
            ("2020-now", YearRange { start: 2020, end: 2026 }),
        ];
        for (s, expected) in age_options {
            let raw = RawAnswer { text: format!("### {s} ###"), item: DataItem::BuildingAge };
            assert_eq!(parse_answer(&raw, 2026).unwrap(), DataEstimate::Age(expected), "{s}");
        }
        let lighting = [
            ("no low energy lighting", 0.0),
            ("low energy in 20%", 20.0),
            ("low energy in 40%", 40.0),
            ("low energy in 60%", 60.0),
            ("low energy in 80%", 80.0),
            ("low energy in 100%", 100.0),
        ];
        for (s, expected) in lighting {
            let raw = RawAnswer { text: format!("### {s} ###"), item: DataItem::Lighting };
            assert_eq!(parse_answer(&raw, 2026).unwrap(), DataEstimate::LightingPct(expected));
        }
        let heating = [
            ("underfloor heating", HeatingClass::Underfloor),
            ("water radiators", HeatingClass::WaterRadiators),
            ("electric heaters", HeatingClass::ElectricPanel),
            ("electric storage heaters", HeatingClass::ElectricStorage),
            ("warm air from vents", HeatingClass::WarmAir),
        ];
        for (s, expected) in heating {
            let raw = RawAnswer { text: format!("### {s} ###"), item: DataItem::Heating };
            assert_eq!(parse_answer(&raw, 2026).unwrap(), DataEstimate::Heating(expected));
        }
        let windows = [
            ("(1) single glazed", WindowClass::Single),
            ("(2) double glazed", WindowClass::Double),
            ("(3) high efficiency double or triple glazed", WindowClass::HighEfficiency),
        ];
        for (s, expected) in windows {
            let raw = RawAnswer { text: format!("### {s} ###"), item: DataItem::Windows };
            assert_eq!(parse_answer(&raw, 2026).unwrap(), DataEstimate::Windows(expected));
        }
    }

    #[test]
    fn parsers_are_idempotent_on_canonical_renderings() {
        for year in [1000, 1899, 2014] {
            let r = parse_age(&year.to_string(), 2026).unwrap();
            assert_eq!(parse_age(&r.to_string(), 2026).unwrap(), r);
        }
        let r = parse_age("1930-1950", 2026).unwrap();
        assert_eq!(parse_age(&r.to_string(), 2026).unwrap(), r);
        let p = parse_numeric("42.5").unwrap();
        assert_eq!(parse_numeric(&p.start.to_string()).unwrap(), p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn age_output_is_ordered(text in "[0-9a-z \\-]{0,16}") {
                if let Ok(r) = parse_age(&text, 2026) {
                    prop_assert!(r.start <= r.end);
                }
            }

            #[test]
            fn year_ranges_parse_back(a in 1000i32..2100, len in 0i32..200) {
                let b = a + len;
                let r = parse_age(&format!("{a}-{b}"), 2026).unwrap();
                prop_assert_eq!(r, YearRange { start: a, end: b });
            }
        }
    }
}
