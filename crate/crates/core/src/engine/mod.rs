//! Generational loop.
//!
//! Each generation evaluates every member on every training building (elites
//! and previously seen genotypes included), folds the errors into the
//! worst-of [`FitnessLedger`], logs, checks termination, then breeds the next
//! population: the best `elites` members are copied verbatim and the rest are
//! offspring of parents drawn from the best `parent_fraction` of the
//! population.

mod checkpoint;
mod ledger;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_FORMAT};
pub use ledger::{record, FitnessLedger, LedgerEntry};

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{evaluate_with_retry, AbortError, BackendKind, EvaluationRequest, Evaluator, Outcome};
use crate::dataset::BuildingRecord;
use crate::fitness::{building_error, failure_penalty};
use crate::genome_ops::{crossover, mutate, GenomeError, Mode};
use crate::schema::{canonical_key, random_genotype, CueSchema, DataItem, Genotype};

/// File locations used by a run. Not part of the config digest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub schema: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub landscape: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub population_size: usize,
    pub generations: usize,
    pub parent_fraction: f64,
    pub elites: usize,
    pub mode: Mode,
    pub data_item: DataItem,
    pub seed: u64,
    pub mutation_ops_per_child: usize,
    pub evaluation_concurrency: usize,
    pub retry_limit: u32,
    pub current_year: i32,
    pub backend: BackendKind,
    /// Share of each stratum assigned to training when splitting a dataset.
    pub train_fraction: f64,
    #[serde(default)]
    pub paths: RunPaths,
}

impl RunConfig {
    pub const DEFAULT_POPULATION: usize = 15;
    pub const DEFAULT_GENERATIONS: usize = 20;
    pub const DEFAULT_PARENT_FRACTION: f64 = 0.33;
    pub const DEFAULT_ELITES: usize = 2;

    pub fn new(data_item: DataItem, mode: Mode, seed: u64) -> Self {
        RunConfig {
            population_size: Self::DEFAULT_POPULATION,
            generations: Self::DEFAULT_GENERATIONS,
            parent_fraction: Self::DEFAULT_PARENT_FRACTION,
            elites: Self::DEFAULT_ELITES,
            mode,
            data_item,
            seed,
            mutation_ops_per_child: 1,
            evaluation_concurrency: 1,
            retry_limit: 3,
            current_year: 2024,
            backend: BackendKind::Oracle,
            train_fraction: 0.6,
            paths: RunPaths::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.parent_fraction > 0.0 && self.parent_fraction <= 1.0) {
            return bad("parent_fraction must be in (0, 1]");
        }
        if self.population_size < 2 {
            return bad("population_size must be at least 2");
        }
        if self.elites >= self.population_size {
            return bad("elites must be smaller than population_size");
        }
        if self.evaluation_concurrency == 0 {
            return bad("evaluation_concurrency must be at least 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must be in (0, 1]");
        }
        Ok(())
    }

    /// Digest of the fields that shape a run's trajectory. Concurrency and
    /// paths are excluded: they do not change results.
    pub fn digest(&self) -> String {
        let shaping = serde_json::json!({
            "population_size": self.population_size,
            "generations": self.generations,
            "parent_fraction": self.parent_fraction,
            "elites": self.elites,
            "mode": self.mode,
            "data_item": self.data_item,
            "seed": self.seed,
            "mutation_ops_per_child": self.mutation_ops_per_child,
            "retry_limit": self.retry_limit,
            "current_year": self.current_year,
            "backend": self.backend,
            "train_fraction": self.train_fraction,
        });
        crate::digest_hex(shaping.to_string().as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("run aborted: {source}{}", checkpoint.as_ref().map(|p| format!("; resume from {}", p.display())).unwrap_or_default())]
    Aborted {
        source: AbortError,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub genotype: Genotype,
    pub recorded_error: f64,
}

/// An evaluated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub generation: usize,
    pub members: Vec<Member>,
}

impl Population {
    /// Member indices sorted by recorded error; ties keep population order.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.members.len()).collect();
        order.sort_by(|&a, &b| self.members[a].recorded_error.total_cmp(&self.members[b].recorded_error));
        order
    }
}

/// One log row per evaluated generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    /// Recorded error of every member, in population order.
    pub errors: Vec<f64>,
    pub cue_counts: Vec<usize>,
    pub best_error: f64,
    pub best_key: String,
    /// Lowest recorded error in the ledger after this generation.
    pub best_ever_error: f64,
    pub mean_cue_count: f64,
    /// Mean number of cues per chromosome position.
    pub per_chromosome_cue_counts: Vec<f64>,
    pub parent_pool_size: usize,
}

/// The first line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub config: RunConfig,
    pub config_digest: String,
    pub schema_digest: String,
    /// Backend details worth recording (model, sampling parameters, landscape).
    #[serde(default)]
    pub backend_info: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Config(LogHeader),
    Generation(GenerationLog),
}

pub fn log_line(record: &LogRecord) -> String {
    serde_json::to_string(record).expect("log records serialize")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub best_genotype: Genotype,
    pub best_recorded_error: f64,
    pub per_generation_log: Vec<GenerationLog>,
    /// True when a zero-error member ended the run before the generation cap.
    pub perfect: bool,
}

/// Parent pool size for `n` members: `ceil(fraction · n)`, at least one.
/// A small epsilon keeps products like 0.33 · 100 from rounding up past
/// their exact value.
pub fn pool_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// The best `ceil(s·N)` members of a population.
#[derive(Debug, Clone, PartialEq)]
pub struct ParentPool {
    pub members: Vec<Genotype>,
}

impl ParentPool {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Two parents drawn uniformly, distinct pool slots when the pool has
    /// two or more members.
    pub fn draw_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (&Genotype, &Genotype) {
        let n = self.members.len();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n);
        while n >= 2 && b == a {
            b = rng.random_range(0..n);
        }
        (&self.members[a], &self.members[b])
    }
}

pub fn select_parents(population: &Population, parent_fraction: f64) -> ParentPool {
    assert!(!population.members.is_empty(), "cannot select parents from an empty population");
    let k = pool_size(population.members.len(), parent_fraction);
    ParentPool {
        members: population
            .ranked()
            .into_iter()
            .take(k)
            .map(|i| population.members[i].genotype.clone())
            .collect(),
    }
}

/// Breeds the next population's genotypes: elites first, then offspring.
pub fn next_generation<R: Rng + ?Sized>(
    population: &Population,
    schema: &CueSchema,
    config: &RunConfig,
    rng: &mut R,
) -> Result<Vec<Genotype>, GenomeError> {
    let ranked = population.ranked();
    let pool = select_parents(population, config.parent_fraction);
    let mut next: Vec<Genotype> = ranked
        .iter()
        .take(config.elites)
        .map(|&i| population.members[i].genotype.clone())
        .collect();
    while next.len() < config.population_size {
        let (a, b) = pool.draw_pair(rng);
        let mut child = crossover(config.mode, a, b, rng)?;
        for _ in 0..config.mutation_ops_per_child {
            child = mutate(config.mode, &child, schema, rng);
        }
        next.push(child);
    }
    Ok(next)
}

/// Resumable engine state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    /// Index of the generation held in `pending`.
    pub generation: usize,
    /// Genotypes awaiting evaluation.
    pub pending: Vec<Genotype>,
    pub last_evaluated: Option<Population>,
    pub ledger: FitnessLedger,
    /// Genotype for every key in the ledger.
    pub archive: BTreeMap<String, Genotype>,
    pub log: Vec<GenerationLog>,
    #[serde(with = "word_pos")]
    pub rng_word_pos: u128,
    pub finished: bool,
    pub perfect: bool,
}

mod word_pos {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Digest of the training buildings (ids and ground truth).
pub fn training_digest(buildings: &[BuildingRecord]) -> String {
    let rows: Vec<_> = buildings.iter().map(|b| (&b.id, &b.truth)).collect();
    crate::digest_hex(serde_json::to_string(&rows).expect("truth serializes").as_bytes())
}

pub struct Engine<'a> {
    config: RunConfig,
    schema: &'a CueSchema,
    evaluator: &'a dyn Evaluator,
    buildings: &'a [BuildingRecord],
    state: EngineState,
    rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    backend_info: serde_json::Value,
    evaluator_fingerprint: String,
}

impl<'a> Engine<'a> {
    /// Initializes a fresh run: one random genotype per member.
    pub fn new(
        config: RunConfig,
        schema: &'a CueSchema,
        evaluator: &'a dyn Evaluator,
        buildings: &'a [BuildingRecord],
    ) -> Result<Self, EngineError> {
        check_inputs(&config, schema, buildings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pending = (0..config.population_size).map(|_| random_genotype(schema, &mut rng)).collect();
        let state = EngineState {
            generation: 0,
            pending,
            last_evaluated: None,
            ledger: FitnessLedger::new(),
            archive: BTreeMap::new(),
            log: Vec::new(),
            rng_word_pos: rng.get_word_pos(),
            finished: false,
            perfect: false,
        };
        Self::assemble(config, schema, evaluator, buildings, state, rng)
    }

    /// Rebuilds an engine from a checkpoint. The caller's config must match
    /// the checkpoint's digest; only concurrency and paths may differ.
    pub fn resume(
        checkpoint: Checkpoint,
        config: RunConfig,
        schema: &'a CueSchema,
        evaluator: &'a dyn Evaluator,
        buildings: &'a [BuildingRecord],
    ) -> Result<Self, EngineError> {
        check_inputs(&config, schema, buildings)?;
        checkpoint.check_compatible(&config, schema, buildings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_word_pos(checkpoint.state.rng_word_pos);
        let fingerprint = checkpoint.evaluator_fingerprint.clone();
        let info = checkpoint.backend_info.clone();
        let mut engine = Self::assemble(config, schema, evaluator, buildings, checkpoint.state, rng)?;
        engine.evaluator_fingerprint = fingerprint;
        engine.backend_info = info;
        Ok(engine)
    }

    fn assemble(
        config: RunConfig,
        schema: &'a CueSchema,
        evaluator: &'a dyn Evaluator,
        buildings: &'a [BuildingRecord],
        state: EngineState,
        rng: ChaCha8Rng,
    ) -> Result<Self, EngineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.evaluation_concurrency)
            .build()
            .map_err(|e| EngineError::Config(format!("thread pool: {e}")))?;
        Ok(Engine {
            config,
            schema,
            evaluator,
            buildings,
            state,
            rng,
            pool,
            backend_info: serde_json::Value::Null,
            evaluator_fingerprint: String::new(),
        })
    }

    /// Extra backend details echoed into the log header and checkpoint.
    pub fn with_backend_info(mut self, info: serde_json::Value) -> Self {
        self.backend_info = info;
        self
    }

    /// Identifies the evaluator (e.g. a landscape digest); checked on resume
    /// by callers that care.
    pub fn with_evaluator_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.evaluator_fingerprint = fingerprint.into();
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn ledger(&self) -> &FitnessLedger {
        &self.state.ledger
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    /// Genotypes awaiting evaluation.
    pub fn pending(&self) -> &[Genotype] {
        &self.state.pending
    }

    pub fn last_evaluated(&self) -> Option<&Population> {
        self.state.last_evaluated.as_ref()
    }

    pub fn log(&self) -> &[GenerationLog] {
        &self.state.log
    }

    pub fn header(&self) -> LogHeader {
        LogHeader {
            config: self.config.clone(),
            config_digest: self.config.digest(),
            schema_digest: self.schema.digest(),
            backend_info: self.backend_info.clone(),
        }
    }

    /// The full run log as JSON lines.
    pub fn log_text(&self) -> String {
        let mut out = log_line(&LogRecord::Config(self.header()));
        out.push('\n');
        for entry in &self.state.log {
            out.push_str(&log_line(&LogRecord::Generation(entry.clone())));
            out.push('\n');
        }
        out
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng_word_pos = self.rng.get_word_pos();
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config_digest: self.config.digest(),
            schema_digest: self.schema.digest(),
            training_digest: training_digest(self.buildings),
            evaluator_fingerprint: self.evaluator_fingerprint.clone(),
            backend_info: self.backend_info.clone(),
            config: self.config.clone(),
            state,
        }
    }

    /// Evaluates the pending generation and, unless the run ends, breeds the
    /// next one. On abort the state is left as it was before the call.
    pub fn step(&mut self) -> Result<(), EngineError> {
        if self.state.finished {
            return Ok(());
        }
        let generation = self.state.generation;
        let genotypes = &self.state.pending;
        let keys: Vec<String> = genotypes.iter().map(canonical_key).collect();

        // Counters are assigned before dispatch so results do not depend on
        // completion order.
        let mut seen: HashMap<&str, u64> = HashMap::new();
        let counters: Vec<u64> = keys
            .iter()
            .map(|k| {
                let c = seen.entry(k).or_insert(0);
                let counter = self.state.ledger.evaluations(k) + *c;
                *c += 1;
                counter
            })
            .collect();

        let item = self.config.data_item;
        let retry = self.config.retry_limit;
        let evaluator = self.evaluator;
        let buildings = self.buildings;
        let results: Vec<Result<f64, AbortError>> = self.pool.install(|| {
            (0..genotypes.len())
                .into_par_iter()
                .map(|i| {
                    let errors: Result<Vec<f64>, AbortError> = buildings
                        .par_iter()
                        .map(|building| {
                            let request = EvaluationRequest {
                                genotype: &genotypes[i],
                                key: &keys[i],
                                building,
                                data_item: item,
                                attempt: 0,
                                eval_counter: counters[i],
                            };
                            score_outcome(evaluate_with_retry(evaluator, request, retry)?, item, building)
                        })
                        .collect();
                    Ok(errors?.iter().sum())
                })
                .collect()
        });
        let mut errors = Vec::with_capacity(results.len());
        for r in results {
            errors.push(r.map_err(|source| EngineError::Aborted {
                source,
                checkpoint: None,
            })?);
        }

        for ((key, g), error) in keys.iter().zip(genotypes).zip(&errors) {
            self.state.ledger.record(key, *error, generation);
            self.state.archive.entry(key.clone()).or_insert_with(|| g.clone());
        }
        let members: Vec<Member> = genotypes
            .iter()
            .zip(&keys)
            .map(|(g, k)| Member {
                genotype: g.clone(),
                recorded_error: self.state.ledger.worst_error(k).expect("just recorded"),
            })
            .collect();
        let population = Population { generation, members };
        let entry = self.log_entry(&population, &keys);
        let perfect = entry.best_error == 0.0;
        self.state.log.push(entry);

        if perfect || generation >= self.config.generations {
            self.state.finished = true;
            self.state.perfect = perfect;
            self.state.pending = Vec::new();
        } else {
            self.state.pending = next_generation(&population, self.schema, &self.config, &mut self.rng)?;
            self.state.generation += 1;
        }
        self.state.rng_word_pos = self.rng.get_word_pos();
        self.state.last_evaluated = Some(population);
        Ok(())
    }

    fn log_entry(&self, population: &Population, keys: &[String]) -> GenerationLog {
        let n = population.members.len() as f64;
        let errors: Vec<f64> = population.members.iter().map(|m| m.recorded_error).collect();
        let cue_counts: Vec<usize> = population.members.iter().map(|m| m.genotype.cue_count()).collect();
        let best = population.ranked()[0];
        let chromosomes = self.schema.category_count();
        let per_chromosome_cue_counts = (0..chromosomes)
            .map(|c| {
                population
                    .members
                    .iter()
                    .map(|m| m.genotype.chromosomes.get(c).map_or(0, Vec::len))
                    .sum::<usize>() as f64
                    / n
            })
            .collect();
        GenerationLog {
            generation: population.generation,
            best_error: errors[best],
            best_key: keys[best].clone(),
            best_ever_error: self.state.ledger.best().map_or(f64::NAN, |(_, e)| e.worst_error),
            mean_cue_count: cue_counts.iter().sum::<usize>() as f64 / n,
            errors,
            cue_counts,
            per_chromosome_cue_counts,
            parent_pool_size: pool_size(population.members.len(), self.config.parent_fraction),
        }
    }

    pub fn result(&self) -> Option<RunResult> {
        let (key, entry) = self.state.ledger.best()?;
        Some(RunResult {
            best_genotype: self.state.archive[key].clone(),
            best_recorded_error: entry.worst_error,
            per_generation_log: self.state.log.clone(),
            perfect: self.state.perfect,
        })
    }

    fn write_log(&self, path: &Path) -> Result<(), EngineError> {
        write_atomic(path, self.log_text().as_bytes())
    }

    fn append_log(&self, path: &Path, entry: &GenerationLog) -> Result<(), EngineError> {
        let io = |source| EngineError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::OpenOptions::new().append(true).open(path).map_err(io)?;
        writeln!(f, "{}", log_line(&LogRecord::Generation(entry.clone()))).map_err(io)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), EngineError> {
        self.checkpoint().save(path)?;
        Ok(())
    }

    /// Runs at most `max_steps` more generations (all remaining when
    /// `None`), maintaining the log and checkpoint files named in the config.
    /// On abort the checkpoint holds the state before the failed generation.
    pub fn run_for(&mut self, max_steps: Option<usize>) -> Result<(), EngineError> {
        let log_path = self.config.paths.log.clone();
        let checkpoint_path = self.config.paths.checkpoint.clone();
        if let Some(p) = &log_path {
            self.write_log(p)?;
        }
        if let Some(p) = &checkpoint_path {
            self.save_checkpoint(p)?;
        }
        let mut steps = 0;
        while !self.state.finished && max_steps.is_none_or(|m| steps < m) {
            match self.step() {
                Ok(()) => {}
                Err(EngineError::Aborted { source, .. }) => {
                    return Err(EngineError::Aborted {
                        source,
                        checkpoint: checkpoint_path,
                    })
                }
                Err(e) => return Err(e),
            }
            steps += 1;
            if let Some(p) = &log_path {
                self.append_log(p, self.state.log.last().expect("step logs"))?;
            }
            if let Some(p) = &checkpoint_path {
                self.save_checkpoint(p)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<RunResult, EngineError> {
        self.run_for(None)?;
        Ok(self.result().expect("a finished run has evaluated at least once"))
    }
}

fn score_outcome(outcome: Outcome, item: DataItem, building: &BuildingRecord) -> Result<f64, AbortError> {
    match outcome {
        Outcome::Estimate { estimate, .. } => {
            building_error(item, &estimate, &building.truth).map_err(|e| AbortError::Fatal {
                building: building.id.clone(),
                message: e.to_string(),
            })
        }
        Outcome::Failed { reason, attempts } => {
            log::warn!(
                "building {}: no usable answer after {attempts} attempts ({reason}); scoring the failure penalty",
                building.id
            );
            Ok(failure_penalty(item))
        }
    }
}

fn check_inputs(config: &RunConfig, schema: &CueSchema, buildings: &[BuildingRecord]) -> Result<(), EngineError> {
    config.validate()?;
    if schema.data_item != config.data_item {
        // the windows vocabulary serves both window encodings
        let windows = |i| matches!(i, DataItem::Windows | DataItem::WindowsUvalue);
        if !(windows(schema.data_item) && windows(config.data_item)) {
            return Err(EngineError::Config(format!(
                "schema is for {} but the run estimates {}",
                schema.data_item, config.data_item
            )));
        }
    }
    if buildings.is_empty() {
        return Err(EngineError::Config("training split is empty".into()));
    }
    if let Some(b) = buildings.iter().find(|b| !b.truth.has(config.data_item)) {
        return Err(EngineError::Config(format!(
            "building {} has no ground truth for {}",
            b.id, config.data_item
        )));
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EngineError> {
    let io = |source| EngineError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// Runs a fresh engine to completion.
pub fn evolve(
    config: RunConfig,
    schema: &CueSchema,
    evaluator: &dyn Evaluator,
    buildings: &[BuildingRecord],
) -> Result<RunResult, EngineError> {
    Engine::new(config, schema, evaluator, buildings)?.run()
}
