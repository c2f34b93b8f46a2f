//! Post-run tooling: ablation, single-cue consistency probes and run-log
//! reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{evaluate_with_retry, AbortError, EvaluationRequest, Evaluator, Outcome};
use crate::dataset::{BuildingRecord, GroundTruth};
use crate::engine::{GenerationLog, LogHeader, LogRecord};
use crate::fitness::{building_error, DataEstimate, FitnessError};
use crate::schema::{canonical_key, Cue, CueSchema, DataItem, Genotype};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("genotype has no cues")]
    EmptyGenotype,
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("probe needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("no values")]
    NoValues,
    #[error("coefficient of variation is undefined for a zero mean")]
    ZeroMean,
    #[error("every evaluation failed: {0}")]
    AllFailed(String),
    #[error(transparent)]
    Abort(#[from] AbortError),
    #[error(transparent)]
    Fitness(#[from] FitnessError),
    #[error("{origin}:{line}: {message}")]
    Log {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn population_stddev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Coefficient of variation: population standard deviation over |mean|.
pub fn cv(values: &[f64]) -> Result<f64, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::NoValues);
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(AnalysisError::ZeroMean);
    }
    Ok(population_stddev(values) / m.abs())
}

/// Index of the modal value; ties go to the value observed first.
fn mode_index<T: PartialEq>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            continue;
        }
        let count = values.iter().filter(|w| *w == v).count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((i, count));
        }
    }
    best.map(|(i, _)| i)
}

/// Fraction of values that differ from the modal value.
pub fn disagreement_rate<T: PartialEq>(values: &[T]) -> f64 {
    match mode_index(values) {
        None => 0.0,
        Some(m) => values.iter().filter(|v| **v != values[m]).count() as f64 / values.len() as f64,
    }
}

/// Numeric coding of a response: categorical answers become their error
/// against the ground truth; numeric answers are used as they are (ranges by
/// their midpoint).
pub fn code_response(item: DataItem, estimate: &DataEstimate, truth: &GroundTruth) -> Result<f64, FitnessError> {
    Ok(match estimate {
        DataEstimate::Age(r) => r.midpoint(),
        DataEstimate::LightingPct(p) => *p,
        DataEstimate::Heating(_) | DataEstimate::Windows(_) => building_error(item, estimate, truth)?,
        DataEstimate::Uvalue(u) => *u,
        DataEstimate::Energy(r) => r.midpoint(),
    })
}

enum SplitError {
    Failed(String),
}

/// Sum of per-building errors, or the first permanent failure.
fn split_error(
    genotype: &Genotype,
    evaluator: &dyn Evaluator,
    split: &[BuildingRecord],
    item: DataItem,
    retry_limit: u32,
) -> Result<Result<f64, SplitError>, AnalysisError> {
    let key = canonical_key(genotype);
    let mut total = 0.0;
    for building in split {
        let request = EvaluationRequest {
            genotype,
            key: &key,
            building,
            data_item: item,
            attempt: 0,
            eval_counter: 0,
        };
        match evaluate_with_retry(evaluator, request, retry_limit)? {
            Outcome::Estimate { estimate, .. } => total += building_error(item, &estimate, &building.truth)?,
            Outcome::Failed { reason, .. } => {
                return Ok(Err(SplitError::Failed(format!("building {}: {reason}", building.id))))
            }
        }
    }
    Ok(Ok(total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub removed: Cue,
    pub category_index: usize,
    pub category: String,
    /// `None` when the evaluation failed permanently.
    pub new_error: Option<f64>,
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_error: f64,
    pub rows: Vec<AblationRow>,
    /// Mean and population standard deviation of the successful rows'
    /// new errors.
    pub mean_new_error: Option<f64>,
    pub stddev: Option<f64>,
    pub failed_rows: usize,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "removed_cue", "new_error", "delta", "failure"])
            .expect("in-memory write");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.category.as_str(),
                r.removed.label(),
                &fmt(r.new_error),
                &fmt(r.delta),
                r.failure.as_deref().unwrap_or(""),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
        let mut s = format!(
            "base error {:.3}; {} cue removals; mean new error {}; stddev {}",
            self.base_error,
            self.rows.len(),
            fmt(self.mean_new_error),
            fmt(self.stddev)
        );
        if self.failed_rows > 0 {
            s.push_str(&format!("; {} rows failed and were excluded", self.failed_rows));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("  [{}] {}: delta {}\n", r.category, r.removed, fmt(r.delta)));
        }
        s
    }
}

/// Removes each cue of `genotype` in turn and re-measures the split error.
pub fn ablate(
    genotype: &Genotype,
    schema: &CueSchema,
    evaluator: &dyn Evaluator,
    split: &[BuildingRecord],
    item: DataItem,
    retry_limit: u32,
) -> Result<AblationReport, AnalysisError> {
    if genotype.is_empty() {
        return Err(AnalysisError::EmptyGenotype);
    }
    if split.is_empty() {
        return Err(AnalysisError::EmptySplit);
    }
    let base_error = match split_error(genotype, evaluator, split, item, retry_limit)? {
        Ok(e) => e,
        Err(SplitError::Failed(reason)) => return Err(AnalysisError::AllFailed(reason)),
    };
    let mut rows = Vec::new();
    for (x, chromosome) in genotype.chromosomes.iter().enumerate() {
        for i in 0..chromosome.len() {
            let mut reduced = genotype.clone();
            let removed = reduced.chromosomes[x].remove(i);
            let category = schema
                .categories
                .get(x)
                .map_or_else(|| format!("Category {}", x + 1), |c| c.name.clone());
            let row = match split_error(&reduced, evaluator, split, item, retry_limit)? {
                Ok(new_error) => AblationRow {
                    removed,
                    category_index: x,
                    category,
                    new_error: Some(new_error),
                    delta: Some(new_error - base_error),
                    failure: None,
                },
                Err(SplitError::Failed(reason)) => AblationRow {
                    removed,
                    category_index: x,
                    category,
                    new_error: None,
                    delta: None,
                    failure: Some(reason),
                },
            };
            rows.push(row);
        }
    }
    let values: Vec<f64> = rows.iter().filter_map(|r| r.new_error).collect();
    let failed_rows = rows.len() - values.len();
    if failed_rows > 0 {
        log::warn!("{failed_rows} ablation rows failed and are excluded from the summary");
    }
    Ok(AblationReport {
        base_error,
        mean_new_error: (!values.is_empty()).then(|| mean(&values)),
        stddev: (!values.is_empty()).then(|| population_stddev(&values)),
        rows,
        failed_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub cue: Cue,
    pub category_index: usize,
    pub building: String,
    pub samples: usize,
    pub failures: usize,
    pub responses: Vec<DataEstimate>,
    /// Numeric coding of each response, see [`code_response`].
    pub values: Vec<f64>,
    pub disagreement_rate: f64,
    /// Absent when the coded values have a zero mean.
    pub cv: Option<f64>,
}

impl ConsistencyReport {
    pub fn summary(&self) -> String {
        format!(
            "cue \"{}\" on building {}: {} samples ({} failed); disagreement rate {:.3}; cv {}\n",
            self.cue,
            self.building,
            self.samples,
            self.failures,
            self.disagreement_rate,
            self.cv.map(|c| format!("{c:.4}")).unwrap_or_else(|| "undefined (zero mean)".into())
        )
    }
}

/// Disagreement and CV statistics over pre-coded responses.
pub fn consistency_stats<T: PartialEq>(responses: &[T], values: &[f64]) -> (f64, Option<f64>) {
    (disagreement_rate(responses), cv(values).ok())
}

/// Evaluates the genotype holding only `cue` (in chromosome `category`)
/// `n` times on one building.
#[allow(clippy::too_many_arguments)]
pub fn consistency_probe(
    cue: &Cue,
    category: usize,
    categories: usize,
    building: &BuildingRecord,
    evaluator: &dyn Evaluator,
    item: DataItem,
    n: usize,
    retry_limit: u32,
) -> Result<ConsistencyReport, AnalysisError> {
    if n < 2 {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let mut genotype = Genotype::empty(categories.max(category + 1));
    genotype.chromosomes[category].push(cue.clone());
    let key = canonical_key(&genotype);
    let mut responses = Vec::new();
    let mut values = Vec::new();
    let mut last_failure = String::new();
    for counter in 0..n as u64 {
        let request = EvaluationRequest {
            genotype: &genotype,
            key: &key,
            building,
            data_item: item,
            attempt: 0,
            eval_counter: counter,
        };
        match evaluate_with_retry(evaluator, request, retry_limit)? {
            Outcome::Estimate { estimate, .. } => {
                values.push(code_response(item, &estimate, &building.truth)?);
                responses.push(estimate);
            }
            Outcome::Failed { reason, .. } => last_failure = reason,
        }
    }
    if responses.is_empty() {
        return Err(AnalysisError::AllFailed(last_failure));
    }
    let (disagreement_rate, cv) = consistency_stats(&responses, &values);
    Ok(ConsistencyReport {
        cue: cue.clone(),
        category_index: category,
        building: building.id.clone(),
        samples: n,
        failures: n - responses.len(),
        responses,
        values,
        disagreement_rate,
        cv,
    })
}

/// A parsed run log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub name: String,
    pub header: LogHeader,
    pub rows: Vec<GenerationLog>,
}

pub fn parse_log(text: &str, origin: &str) -> Result<RunSeries, AnalysisError> {
    let err = |line: usize, message: String| AnalysisError::Log {
        origin: origin.to_string(),
        line,
        message,
    };
    let mut header = None;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(line).map_err(|e| err(n, e.to_string()))?;
        match record {
            LogRecord::Config(h) if header.is_none() && rows.is_empty() => header = Some(h),
            LogRecord::Config(_) => return Err(err(n, "unexpected config record".into())),
            LogRecord::Generation(g) => {
                if header.is_none() {
                    return Err(err(n, "generation record before the config record".into()));
                }
                rows.push(g);
            }
        }
    }
    let header = header.ok_or_else(|| err(1, "empty log".into()))?;
    Ok(RunSeries {
        name: origin.to_string(),
        header,
        rows,
    })
}

pub fn load_log(path: &Path) -> Result<RunSeries, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_log(&text, &path.display().to_string())
}

/// One row of the per-generation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub generation: usize,
    pub best_error: f64,
    pub best_ever_error: f64,
    pub mean_error: f64,
    /// CV of the generation's recorded errors; absent for a zero mean.
    pub fitness_cv: Option<f64>,
    pub mean_cue_count: f64,
    pub per_chromosome_cue_counts: Vec<f64>,
    pub errors: Vec<f64>,
}

pub fn series_rows(run: &RunSeries) -> Vec<SeriesRow> {
    run.rows
        .iter()
        .map(|g| SeriesRow {
            generation: g.generation,
            best_error: g.best_error,
            best_ever_error: g.best_ever_error,
            mean_error: mean(&g.errors),
            fitness_cv: cv(&g.errors).ok(),
            mean_cue_count: g.mean_cue_count,
            per_chromosome_cue_counts: g.per_chromosome_cue_counts.clone(),
            errors: g.errors.clone(),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// Per-generation table for one run. Error lists and per-chromosome counts
/// are `;`-separated inside their cells.
pub fn series_csv(run: &RunSeries) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "generation",
        "best_error",
        "best_ever_error",
        "mean_error",
        "fitness_cv",
        "mean_cue_count",
        "per_chromosome_cue_counts",
        "errors",
    ])
    .expect("in-memory write");
    for r in series_rows(run) {
        w.write_record([
            r.generation.to_string(),
            r.best_error.to_string(),
            r.best_ever_error.to_string(),
            r.mean_error.to_string(),
            opt(r.fitness_cv),
            r.mean_cue_count.to_string(),
            join(&r.per_chromosome_cue_counts),
            join(&r.errors),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Side-by-side table: one row per generation, four columns per run.
pub fn comparison_csv(runs: &[RunSeries]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["generation".to_string()];
    for r in runs {
        for col in ["best_error", "best_ever_error", "mean_cue_count", "fitness_cv"] {
            head.push(format!("{}:{col}", r.name));
        }
    }
    w.write_record(&head).expect("in-memory write");
    let series: Vec<Vec<SeriesRow>> = runs.iter().map(series_rows).collect();
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    for g in 0..len {
        let mut row = vec![g.to_string()];
        for s in &series {
            match s.get(g) {
                Some(r) => row.extend([
                    r.best_error.to_string(),
                    r.best_ever_error.to_string(),
                    r.mean_cue_count.to_string(),
                    opt(r.fitness_cv),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn summary_text(runs: &[RunSeries]) -> String {
    let mut s = String::new();
    for r in runs {
        let c = &r.header.config;
        s.push_str(&format!(
            "{}: {} {} mode, seed {}, population {}, {} generations logged\n",
            r.name,
            c.data_item,
            match c.mode {
                crate::genome_ops::Mode::Fixed => "fixed",
                crate::genome_ops::Mode::Variable => "variable",
            },
            c.seed,
            c.population_size,
            r.rows.len()
        ));
        if let (Some(first), Some(last)) = (r.rows.first(), r.rows.last()) {
            s.push_str(&format!(
                "  best error {} -> {} (best ever {}); mean cues {:.2} -> {:.2}\n",
                first.best_error, last.best_error, last.best_ever_error, first.mean_cue_count, last.mean_cue_count
            ));
        }
    }
    s
}

/// Report files for one or more runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub series: Vec<(String, String)>,
    pub comparison: Option<String>,
    pub summary: String,
}

pub fn report(runs: &[RunSeries]) -> Report {
    Report {
        series: runs.iter().map(|r| (r.name.clone(), series_csv(r))).collect(),
        comparison: (runs.len() > 1).then(|| comparison_csv(runs)),
        summary: summary_text(runs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::oracle::{OracleEvaluator, PlantedCue, PlantedLandscape};
    use crate::schema::CueCategory;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn cv_examples() {
        assert_eq!(cv(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!(close(cv(&[1.0, 2.0, 3.0]).unwrap(), 0.4082));
        assert!(close(population_stddev(&[1.0, 2.0, 3.0]), 0.8165));
        assert_eq!(cv(&[5.0]).unwrap(), 0.0);
        assert!(matches!(cv(&[0.0, 0.0]), Err(AnalysisError::ZeroMean)));
        assert!(matches!(cv(&[]), Err(AnalysisError::NoValues)));
    }

    #[test]
    fn disagreement_examples() {
        assert_eq!(disagreement_rate(&[1, 1, 1]), 0.0);
        let coded = [2, 2, 2, 2, 2, 2, 1, 1, 1, 3];
        assert!(close(disagreement_rate(&coded), 0.4));
        // ties go to the first observed value
        assert_eq!(mode_index(&[3, 1, 1, 3]), Some(0));
    }

    proptest! {
        #[test]
        fn cv_is_scale_invariant(values in prop::collection::vec(0.1f64..100.0, 1..20), k in 0.01f64..100.0) {
            let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
            prop_assert!((cv(&values).unwrap() - cv(&scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn disagreement_is_permutation_invariant(values in prop::collection::vec(0u8..4, 1..30), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = values.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(disagreement_rate(&values), disagreement_rate(&shuffled));
        }
    }

    fn fixture() -> (CueSchema, OracleEvaluator, Vec<BuildingRecord>) {
        let schema = CueSchema::new(
            DataItem::Energy,
            "UK",
            vec![
                CueCategory {
                    name: "A".into(),
                    allowed_cues: ["a1", "a2", "a3"].iter().map(|c| Cue::new(c).unwrap()).collect(),
                },
                CueCategory {
                    name: "B".into(),
                    allowed_cues: ["b1", "b2"].iter().map(|c| Cue::new(c).unwrap()).collect(),
                },
            ],
        )
        .unwrap();
        let landscape = PlantedLandscape {
            planted: vec![
                PlantedCue { category: 0, cue: "a1".into(), benefit: 3.0 },
                PlantedCue { category: 1, cue: "b2".into(), benefit: 5.0 },
            ],
            distractor_penalty: 1.0,
            base_error: None,
            noise_scale: 0.0,
            seed: 0,
        };
        let buildings = vec![BuildingRecord {
            id: "t".into(),
            region: "UK".into(),
            image_sets: Default::default(),
            truth: GroundTruth {
                energy_kwh_m2: Some(150),
                ..Default::default()
            },
            split: None,
        }];
        (schema, OracleEvaluator::new(landscape).unwrap(), buildings)
    }

    #[test]
    fn ablation_deltas_equal_weights() {
        let (schema, oracle, split) = fixture();
        let g = Genotype::from_labels(&[&["a1", "a3"], &["b2"]]);
        let report = ablate(&g, &schema, &oracle, &split, DataItem::Energy, 0).unwrap();
        assert_eq!(report.base_error, 1.0);
        let deltas: Vec<f64> = report.rows.iter().map(|r| r.delta.unwrap()).collect();
        assert_eq!(deltas, vec![3.0, -1.0, 5.0]);
        assert_eq!(report.rows[2].category, "B");
        assert_eq!(report.mean_new_error, Some((4.0 + 0.0 + 6.0) / 3.0));
        assert!(report.to_csv().starts_with("category,removed_cue,new_error,delta,failure\nA,a1,4,3,"));
    }

    #[test]
    fn single_cue_ablation_has_one_row() {
        let (schema, oracle, split) = fixture();
        let g = Genotype::from_labels(&[&["a2"], &[] as &[&str]]);
        assert_eq!(ablate(&g, &schema, &oracle, &split, DataItem::Energy, 0).unwrap().rows.len(), 1);
        let empty = Genotype::empty(2);
        assert!(matches!(
            ablate(&empty, &schema, &oracle, &split, DataItem::Energy, 0),
            Err(AnalysisError::EmptyGenotype)
        ));
    }

    #[test]
    fn probe_on_a_noiseless_oracle_is_constant() {
        let (_, oracle, split) = fixture();
        let r = consistency_probe(&Cue::new("a1").unwrap(), 0, 2, &split[0], &oracle, DataItem::Energy, 10, 0).unwrap();
        assert_eq!(r.disagreement_rate, 0.0);
        assert_eq!(r.cv, Some(0.0));
        assert_eq!(r.values, vec![155.0; 10]);
        assert!(matches!(
            consistency_probe(&Cue::new("a1").unwrap(), 0, 2, &split[0], &oracle, DataItem::Energy, 1, 0),
            Err(AnalysisError::TooFewSamples(1))
        ));
    }

    #[test]
    fn log_parsing_errors_carry_line_numbers() {
        assert!(matches!(parse_log("", "x"), Err(AnalysisError::Log { line: 1, .. })));
        let err = parse_log("{\"record\":\"config\"}\n", "run.log").unwrap_err();
        assert!(err.to_string().starts_with("run.log:1:"));
    }
}
