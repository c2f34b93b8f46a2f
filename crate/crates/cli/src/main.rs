//! `cuevo`: schema generation, evolutionary runs, resumption and analyses.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or configuration, 3 backend
//! failure (resumable for runs).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use cuevo_core::analysis::{ablate, consistency_probe, load_log, report};
use cuevo_core::backends::llm::{HttpTransport, HttpTransportConfig, LlmEvaluator};
use cuevo_core::backends::oracle::{OracleEvaluator, PlantedLandscape};
use cuevo_core::backends::schema_gen::SchemaGenerator;
use cuevo_core::backends::{BackendKind, Evaluator};
use cuevo_core::dataset::{split_dataset, BuildingRecord, Dataset};
use cuevo_core::engine::{Checkpoint, Engine, EngineError, RunConfig};
use cuevo_core::schema::{canonical_key, load_schema_file, Cue, CueSchema, DataItem, Genotype};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use config::Overrides;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(anyhow::Error),
    Backend(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Backend(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "cuevo", version, about = "Evolve prompt cue sets for image-based data extraction")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a cue schema from training buildings with the LLM.
    GenSchema(GenSchemaArgs),
    /// Write a planted landscape for oracle runs.
    GenLandscape(GenLandscapeArgs),
    /// Run the genetic algorithm.
    Run(RunArgs),
    /// Continue an aborted or stopped run from its checkpoint.
    Resume(ResumeArgs),
    /// Remove each cue of a genotype in turn and re-measure the error.
    Ablate(AblateArgs),
    /// Evaluate one cue repeatedly on one building.
    Probe(ProbeArgs),
    /// Summarize one or more run logs.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct GenSchemaArgs {
    #[arg(long)]
    item: DataItem,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Region named in the prompts; defaults to the first building's region.
    #[arg(long)]
    region: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    #[arg(long, default_value_t = 3)]
    retry_limit: u32,
    #[arg(long, default_value_t = 2024)]
    current_year: i32,
    #[arg(long)]
    model: Option<String>,
}

#[derive(clap::Args)]
struct GenLandscapeArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of planted cues.
    #[arg(long, default_value_t = 5)]
    planted: usize,
    /// Number of categories the planted cues are spread over.
    #[arg(long, default_value_t = 4)]
    categories: usize,
    #[arg(long, default_value_t = 10.0)]
    benefit: f64,
    #[arg(long, default_value_t = 5.0)]
    penalty: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Run every seed in an inclusive range `a..b`, one sub-directory each.
    #[arg(long, conflicts_with = "seed")]
    seeds: Option<String>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Stop after this many generations, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(clap::Args)]
struct ResumeArgs {
    /// Checkpoint file, or the run directory holding checkpoint.json.
    checkpoint: PathBuf,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "llm")]
    backend: BackendKind,
    #[arg(long)]
    landscape: Option<PathBuf>,
    /// Defaults to the schema's data item.
    #[arg(long)]
    item: Option<DataItem>,
    #[arg(long, default_value_t = 3)]
    retry_limit: u32,
    #[arg(long, default_value_t = 2024)]
    current_year: i32,
    #[arg(long)]
    model: Option<String>,
    /// Oracle noise seed when the landscape file has none.
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    genotype: PathBuf,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitChoice,
    /// Seed of the train/test split (use the run's seed).
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    /// Report path; a CSV is written next to it.
    #[arg(long, default_value = "ablation.json")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ProbeArgs {
    #[arg(long)]
    cue: String,
    #[arg(long)]
    building: String,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value = "probe.json")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Run log; repeat to compare runs.
    #[arg(long = "log", required = true)]
    logs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out_dir: PathBuf,
}

/// Contents of a `best.genotype` file.
#[derive(Debug, Serialize, Deserialize)]
struct GenotypeFile {
    data_item: DataItem,
    key: String,
    recorded_error: f64,
    genotype: Genotype,
}

fn read_genotype(path: &Path) -> anyhow::Result<Genotype> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(f) = serde_json::from_str::<GenotypeFile>(&text) {
        return Ok(f.genotype);
    }
    serde_json::from_str(&text).with_context(|| format!("parsing genotype {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_landscape(path: &Path, default_seed: u64) -> anyhow::Result<PlantedLandscape> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let has_seed = value.get("seed").is_some();
    let mut landscape: PlantedLandscape =
        serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
    if !has_seed {
        landscape.seed = default_seed;
    }
    Ok(landscape)
}

fn http_transport(model: Option<&str>, min_interval_ms: Option<u64>) -> Result<HttpTransport, Failure> {
    let mut config = HttpTransportConfig::from_env(model).map_err(|e| Failure::Config(anyhow!(e)))?;
    if let Some(ms) = min_interval_ms {
        config.min_interval = Duration::from_millis(ms);
    }
    HttpTransport::new(config).map_err(|e| Failure::Config(anyhow!(e)))
}

struct Backend {
    evaluator: Arc<dyn Evaluator>,
    fingerprint: String,
    info: serde_json::Value,
}

fn build_backend(
    kind: BackendKind,
    landscape: Option<&Path>,
    schema: &CueSchema,
    noise_seed: u64,
    model: Option<&str>,
    min_interval_ms: Option<u64>,
    current_year: i32,
) -> Result<Backend, Failure> {
    match kind {
        BackendKind::Oracle => {
            let path = landscape.ok_or_else(|| anyhow!("the oracle backend needs --landscape"))?;
            let landscape = load_landscape(path, noise_seed)?;
            landscape.validate_for(schema).map_err(|e| anyhow!("{}: {e}", path.display()))?;
            let doc = serde_json::to_value(&landscape).expect("landscape serializes");
            let fingerprint = format!("oracle:{}", doc);
            let evaluator = OracleEvaluator::new(landscape).map_err(|e| anyhow!(e))?;
            Ok(Backend {
                evaluator: Arc::new(evaluator),
                fingerprint,
                info: serde_json::json!({ "backend": "oracle", "landscape": doc }),
            })
        }
        BackendKind::Llm => {
            let transport = http_transport(model, min_interval_ms)?;
            let model = model.unwrap_or(cuevo_core::backends::llm::DEFAULT_MODEL).to_string();
            Ok(Backend {
                evaluator: Arc::new(LlmEvaluator::new(transport, current_year)),
                fingerprint: format!("llm:{model}"),
                info: serde_json::json!({
                    "backend": "llm",
                    "model": model,
                    "sampling": "provider defaults",
                }),
            })
        }
    }
}

fn load_inputs(config: &RunConfig) -> anyhow::Result<(CueSchema, Dataset)> {
    let schema_path = config.paths.schema.as_ref().ok_or_else(|| anyhow!("no schema given (--schema)"))?;
    let dataset_path = config.paths.dataset.as_ref().ok_or_else(|| anyhow!("no dataset given (--dataset)"))?;
    let schema = load_schema_file(schema_path)?;
    let dataset = Dataset::load(dataset_path, config.current_year)?;
    dataset.check_for_item(config.data_item, config.backend == BackendKind::Llm)?;
    Ok((schema, dataset))
}

fn engine_failure(e: EngineError) -> Failure {
    match e {
        EngineError::Aborted { .. } => Failure::Backend(anyhow!(e)),
        other => Failure::Config(anyhow!(other)),
    }
}

fn finish_run(engine: &Engine<'_>, out_dir: &Path) -> anyhow::Result<()> {
    if !engine.is_finished() {
        println!(
            "stopped at generation {}; resume with: cuevo resume {}",
            engine.state().generation,
            out_dir.join("checkpoint.json").display()
        );
        return Ok(());
    }
    let result = engine.result().expect("finished runs have results");
    let file = GenotypeFile {
        data_item: engine.config().data_item,
        key: canonical_key(&result.best_genotype),
        recorded_error: result.best_recorded_error,
        genotype: result.best_genotype.clone(),
    };
    write_file(&out_dir.join("best.genotype"), &serde_json::to_string_pretty(&file)?)?;
    println!(
        "{}: {} generations, best recorded error {}, {} cues: {}",
        out_dir.display(),
        result.per_generation_log.len(),
        result.best_recorded_error,
        result.best_genotype.cue_count(),
        cuevo_core::schema::render_cue_list(&result.best_genotype)
    );
    Ok(())
}

fn run_one(
    mut config: RunConfig,
    overrides: &Overrides,
    out_dir: &Path,
    stop_after: Option<usize>,
) -> CmdResult {
    let (schema, dataset) = load_inputs(&config)?;
    let backend = build_backend(
        config.backend,
        config.paths.landscape.as_deref(),
        &schema,
        config.seed,
        overrides.model.as_deref(),
        overrides.min_interval_ms,
        config.current_year,
    )?;
    let (train, _) = split_dataset(&dataset, config.data_item, config.train_fraction, config.seed);
    config.paths.log = Some(out_dir.join("run.log"));
    config.paths.checkpoint = Some(out_dir.join("checkpoint.json"));
    let mut engine = Engine::new(config, &schema, backend.evaluator.as_ref(), &train)
        .map_err(engine_failure)?
        .with_backend_info(backend.info)
        .with_evaluator_fingerprint(backend.fingerprint);
    engine.run_for(stop_after).map_err(engine_failure)?;
    finish_run(&engine, out_dir)?;
    Ok(())
}

fn parse_seed_range(s: &str) -> Result<std::ops::RangeInclusive<u64>, Failure> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Failure::Usage(format!("--seeds expects a..b, got `{s}`")))?;
    let parse = |v: &str| {
        v.trim()
            .trim_start_matches('=')
            .parse::<u64>()
            .map_err(|_| Failure::Usage(format!("bad seed `{v}` in --seeds")))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    if a > b {
        return Err(Failure::Usage(format!("empty seed range `{s}`")));
    }
    Ok(a..=b)
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let file = match &args.config {
        Some(p) => Overrides::load(p)?,
        None => Overrides::default(),
    };
    let mut merged = file.overlay(&args.overrides);
    let seeds = match &args.seeds {
        Some(s) => Some(parse_seed_range(s)?),
        None => None,
    };
    match seeds {
        None => {
            let config = merged.resolve()?;
            run_one(config, &merged, &args.out_dir, args.stop_after)
        }
        Some(range) => {
            for seed in range {
                merged.seed = Some(seed);
                let config = merged.resolve()?;
                run_one(config, &merged, &args.out_dir.join(format!("seed-{seed}")), args.stop_after)?;
            }
            Ok(())
        }
    }
}

fn cmd_resume(args: ResumeArgs) -> CmdResult {
    let path = if args.checkpoint.is_dir() {
        args.checkpoint.join("checkpoint.json")
    } else {
        args.checkpoint.clone()
    };
    let checkpoint = Checkpoint::load(&path).map_err(|e| Failure::Config(anyhow!(e)))?;
    if checkpoint.state.finished {
        println!("{}: run already completed; nothing to resume", path.display());
        return Ok(());
    }
    let mut config = checkpoint.config.clone();
    if let Some(c) = args.concurrency {
        config.evaluation_concurrency = c;
    }
    let out_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let (schema, dataset) = load_inputs(&config)?;
    let model = args
        .model
        .clone()
        .or_else(|| checkpoint.backend_info.get("model").and_then(|m| m.as_str()).map(String::from));
    let backend = build_backend(
        config.backend,
        config.paths.landscape.as_deref(),
        &schema,
        config.seed,
        model.as_deref(),
        None,
        config.current_year,
    )?;
    if backend.fingerprint != checkpoint.evaluator_fingerprint {
        return Err(Failure::Config(anyhow!(
            "the backend differs from the one the checkpoint was written with; refusing to resume"
        )));
    }
    let (train, _) = split_dataset(&dataset, config.data_item, config.train_fraction, config.seed);
    let mut engine =
        Engine::resume(checkpoint, config, &schema, backend.evaluator.as_ref(), &train).map_err(engine_failure)?;
    engine.run_for(args.stop_after).map_err(engine_failure)?;
    finish_run(&engine, &out_dir)?;
    Ok(())
}

fn cmd_gen_schema(args: GenSchemaArgs) -> CmdResult {
    let dataset = Dataset::load(&args.dataset, args.current_year).map_err(|e| anyhow!(e))?;
    dataset.check_for_item(args.item, true).map_err(|e| anyhow!(e))?;
    let transport = http_transport(args.model.as_deref(), None)?;
    let (train, _) = split_dataset(&dataset, args.item, args.train_fraction, args.seed);
    let region = args
        .region
        .clone()
        .unwrap_or_else(|| dataset.records[0].region.clone());
    let raw_dir = args.out.parent().map(|p| p.join("raw-responses"));
    let generator = SchemaGenerator {
        transport: &transport,
        item: args.item,
        region,
        retry_limit: args.retry_limit,
        raw_dir,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let generated = generator.generate(&train, &mut rng).map_err(|e| Failure::Backend(anyhow!(e)))?;
    generated.schema.save(&args.out).map_err(|e| anyhow!(e))?;
    println!(
        "{}: {} categories, {} cues ({} raw features from {})",
        args.out.display(),
        generated.schema.category_count(),
        generated.schema.total_cues(),
        generated.raw_features.len(),
        generated.representatives.join(", ")
    );
    for c in &generated.schema.categories {
        println!("  {}: {} cues", c.name, c.len());
    }
    Ok(())
}

fn cmd_gen_landscape(args: GenLandscapeArgs) -> CmdResult {
    let schema = load_schema_file(&args.schema).map_err(|e| anyhow!(e))?;
    let landscape = PlantedLandscape::generate(
        &schema,
        args.planted,
        args.categories,
        args.benefit,
        args.penalty,
        args.noise,
        args.seed,
    );
    landscape.validate_for(&schema).map_err(|e| anyhow!(e))?;
    write_file(&args.out, &serde_json::to_string_pretty(&landscape).map_err(|e| anyhow!(e))?)?;
    println!("{}: {} planted cues", args.out.display(), landscape.planted.len());
    Ok(())
}

struct EvalSetup {
    schema: CueSchema,
    dataset: Dataset,
    item: DataItem,
    backend: Backend,
}

fn eval_setup(eval: &EvalArgs) -> Result<EvalSetup, Failure> {
    let schema = load_schema_file(&eval.schema).map_err(|e| anyhow!(e))?;
    let item = eval.item.unwrap_or(schema.data_item);
    let dataset = Dataset::load(&eval.dataset, eval.current_year).map_err(|e| anyhow!(e))?;
    let backend = build_backend(
        eval.backend,
        eval.landscape.as_deref(),
        &schema,
        eval.noise_seed,
        eval.model.as_deref(),
        None,
        eval.current_year,
    )?;
    Ok(EvalSetup {
        schema,
        dataset,
        item,
        backend,
    })
}

fn analysis_failure(e: cuevo_core::analysis::AnalysisError) -> Failure {
    use cuevo_core::analysis::AnalysisError;
    match e {
        AnalysisError::Abort(_) | AnalysisError::AllFailed(_) => Failure::Backend(anyhow!(e)),
        other => Failure::Config(anyhow!(other)),
    }
}

fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let setup = eval_setup(&args.eval)?;
    let genotype = read_genotype(&args.genotype)?;
    genotype.validate(&setup.schema, false).map_err(|e| anyhow!(e))?;
    setup
        .dataset
        .check_for_item(setup.item, args.eval.backend == BackendKind::Llm)
        .map_err(|e| anyhow!(e))?;
    let (train, test) = split_dataset(&setup.dataset, setup.item, args.train_fraction, args.split_seed);
    let split: Vec<BuildingRecord> = match args.split {
        SplitChoice::Train => train,
        SplitChoice::Test => test,
        SplitChoice::All => setup.dataset.records.clone(),
    };
    let report = ablate(
        &genotype,
        &setup.schema,
        setup.backend.evaluator.as_ref(),
        &split,
        setup.item,
        args.eval.retry_limit,
    )
    .map_err(analysis_failure)?;
    write_file(&args.out, &serde_json::to_string_pretty(&report).map_err(|e| anyhow!(e))?)?;
    write_file(&args.out.with_extension("csv"), &report.to_csv())?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> CmdResult {
    let setup = eval_setup(&args.eval)?;
    let cue = Cue::new(&args.cue).map_err(|e| Failure::Usage(e.to_string()))?;
    let category = setup
        .schema
        .categories
        .iter()
        .position(|c| c.contains(&cue))
        .ok_or_else(|| Failure::Usage(format!("cue `{}` is not in the schema", args.cue)))?;
    let building = setup
        .dataset
        .get(&args.building)
        .ok_or_else(|| Failure::Usage(format!("no building `{}` in the dataset", args.building)))?;
    let report = consistency_probe(
        &cue,
        category,
        setup.schema.category_count(),
        building,
        setup.backend.evaluator.as_ref(),
        setup.item,
        args.n,
        args.eval.retry_limit,
    )
    .map_err(analysis_failure)?;
    write_file(&args.out, &serde_json::to_string_pretty(&report).map_err(|e| anyhow!(e))?)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let runs = args
        .logs
        .iter()
        .map(|p| load_log(p).map_err(|e| anyhow!(e)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let r = report(&runs);
    for (i, (_, csv)) in r.series.iter().enumerate() {
        let name = if r.series.len() == 1 {
            "series.csv".to_string()
        } else {
            format!("series-{}.csv", i + 1)
        };
        write_file(&args.out_dir.join(name), csv)?;
    }
    if let Some(c) = &r.comparison {
        write_file(&args.out_dir.join("comparison.csv"), c)?;
    }
    write_file(&args.out_dir.join("summary.txt"), &r.summary)?;
    print!("{}", r.summary);
    Ok(())
}

// Library errors already embed their sources in their messages; only append
// causes that add something.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::GenSchema(a) => cmd_gen_schema(a),
        Command::GenLandscape(a) => cmd_gen_landscape(a),
        Command::Run(a) => cmd_run(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Config(e) | Failure::Backend(e) => eprintln!("error: {}", describe(e)),
            }
            ExitCode::from(f.code())
        }
    }
}
