//! Run configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cuevo_core::backends::BackendKind;
use cuevo_core::engine::RunConfig;
use cuevo_core::genome_ops::Mode;
use cuevo_core::schema::DataItem;
use serde::Deserialize;

/// Every field is optional; absent fields fall through to the next layer.
#[derive(Debug, Clone, Default, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Data item to estimate.
    #[arg(long = "item")]
    #[serde(alias = "item")]
    pub data_item: Option<DataItem>,
    /// Genome representation: fixed or variable.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Evaluation backend: llm or oracle.
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "population")]
    #[serde(alias = "population")]
    pub population_size: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub parent_fraction: Option<f64>,
    #[arg(long)]
    pub elites: Option<usize>,
    #[arg(long = "mutation-ops")]
    #[serde(alias = "mutation_ops")]
    pub mutation_ops_per_child: Option<usize>,
    #[arg(long = "concurrency")]
    #[serde(alias = "concurrency")]
    pub evaluation_concurrency: Option<usize>,
    #[arg(long)]
    pub retry_limit: Option<u32>,
    /// Year used to close open-ended ranges such as "2020-now".
    #[arg(long)]
    pub current_year: Option<i32>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Planted landscape file (oracle backend).
    #[arg(long)]
    pub landscape: Option<PathBuf>,
    /// LLM model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Minimum milliseconds between LLM request starts.
    #[arg(long)]
    pub min_interval_ms: Option<u64>,
}

macro_rules! layer {
    ($dst:ident, $src:ident, $($field:ident),*) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl Overrides {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut file: Overrides = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut file.schema, &mut file.dataset, &mut file.landscape].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(file)
    }

    /// Fields of `top` win over fields of `self`.
    pub fn overlay(mut self, top: &Overrides) -> Overrides {
        layer!(
            self,
            top,
            data_item,
            mode,
            backend,
            seed,
            population_size,
            generations,
            parent_fraction,
            elites,
            mutation_ops_per_child,
            evaluation_concurrency,
            retry_limit,
            current_year,
            train_fraction,
            schema,
            dataset,
            landscape,
            model,
            min_interval_ms
        );
        self
    }

    /// Resolves the effective run config. `seed` is mandatory for oracle runs.
    pub fn resolve(&self) -> Result<RunConfig> {
        let Some(item) = self.data_item else {
            bail!("no data item given (use --item or `data_item` in the config file)");
        };
        let backend = self.backend.unwrap_or(BackendKind::Llm);
        let seed = match (self.seed, backend) {
            (Some(s), _) => s,
            (None, BackendKind::Oracle) => bail!("--seed is required for oracle runs"),
            (None, BackendKind::Llm) => 0,
        };
        let mut c = RunConfig::new(item, self.mode.unwrap_or(Mode::Variable), seed);
        c.backend = backend;
        c.current_year = self.current_year.unwrap_or(2024);
        if let Some(v) = self.population_size {
            c.population_size = v;
        }
        if let Some(v) = self.generations {
            c.generations = v;
        }
        if let Some(v) = self.parent_fraction {
            c.parent_fraction = v;
        }
        if let Some(v) = self.elites {
            c.elites = v;
        }
        if let Some(v) = self.mutation_ops_per_child {
            c.mutation_ops_per_child = v;
        }
        c.evaluation_concurrency = self.evaluation_concurrency.unwrap_or(match backend {
            BackendKind::Llm => 4,
            BackendKind::Oracle => 1,
        });
        if let Some(v) = self.retry_limit {
            c.retry_limit = v;
        }
        if let Some(v) = self.train_fraction {
            c.train_fraction = v;
        }
        c.paths.schema = self.schema.clone();
        c.paths.dataset = self.dataset.clone();
        c.paths.landscape = self.landscape.clone();
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: Overrides = toml::from_str(
            "item = \"heating\"\nmode = \"fixed\"\npopulation = 20\ngenerations = 5\nbackend = \"oracle\"\nseed = 3\n",
        )
        .unwrap();
        let flags = Overrides {
            generations: Some(7),
            ..Default::default()
        };
        let c = file.overlay(&flags).resolve().unwrap();
        assert_eq!(c.data_item, DataItem::Heating);
        assert_eq!(c.mode, Mode::Fixed);
        assert_eq!(c.population_size, 20);
        assert_eq!(c.generations, 7);
        assert_eq!(c.elites, 2);
        assert_eq!(c.parent_fraction, 0.33);
    }

    #[test]
    fn oracle_needs_a_seed() {
        let o = Overrides {
            data_item: Some(DataItem::Energy),
            backend: Some(BackendKind::Oracle),
            ..Default::default()
        };
        assert!(o.resolve().unwrap_err().to_string().contains("--seed"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Overrides>("populaton = 3").is_err());
    }
}
