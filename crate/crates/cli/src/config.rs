use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use genrec_core::trainer::{ExperimentConfig, Variant};

/// Where the raw data comes from and how it is filtered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: Option<PathBuf>,
    /// Item embeddings; derived from co-occurrence SVD when absent.
    pub embeddings: Option<PathBuf>,
    pub svd_dim: usize,
    pub svd_window: usize,
    pub k_core: usize,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { interactions: None, embeddings: None, svd_dim: 256, svd_window: 5, k_core: 5, normalize: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam: usize,
    pub ks: Vec<usize>,
    /// `test` or `valid`.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beam: 20, ks: vec![5, 10], split: "test".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub evaluate: EvalConfig,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub interactions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub svd_dim: Option<usize>,
    pub k_core: Option<usize>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub cycle_length: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub max_cycles: Option<usize>,
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    pub beam: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub split: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if o.interactions.is_some() {
            self.data.interactions = o.interactions.clone();
        }
        if o.embeddings.is_some() {
            self.data.embeddings = o.embeddings.clone();
        }
        set!(o.svd_dim, self.data.svd_dim);
        set!(o.k_core, self.data.k_core);
        set!(o.beam, self.evaluate.beam);
        set!(o.ks, self.evaluate.ks);
        set!(o.split, self.evaluate.split);
        let e = &mut self.experiment;
        set!(o.seed, e.schedule.seed);
        set!(o.variant, e.variant);
        set!(o.cycle_length, e.schedule.cycle_length);
        set!(o.pretrain_epochs, e.schedule.pretrain_epochs);
        set!(o.max_cycles, e.schedule.max_cycles);
        set!(o.mu, e.alignment.mu);
        set!(o.lambda, e.alignment.lambda);
    }

    /// Dimensions that follow from the embedding table.
    pub fn fit_to_dim(&mut self, dim: usize) {
        self.experiment.tokenizer.input_dim = dim;
        self.experiment.recommender.semantic_dim = dim;
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.data.interactions, &self.data.embeddings].into_iter().flatten() {
            if !p.exists() {
                return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("file not found: {}", p.display())).into());
            }
        }
        if self.data.k_core == 0 || self.data.svd_dim == 0 || self.data.svd_window == 0 {
            bail!("k_core, svd_dim and svd_window must be positive");
        }
        let ev = &self.evaluate;
        if ev.beam == 0 || ev.ks.is_empty() || ev.ks.contains(&0) {
            bail!("beam and every cutoff in ks must be positive");
        }
        if ev.split != "test" && ev.split != "valid" {
            bail!("split must be `test` or `valid`, not `{}`", ev.split);
        }
        self.experiment.validate()?;
        Ok(())
    }

    /// Writes the effective configuration as `<name>.toml` under `dir`.
    pub fn echo(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(format!("{name}.toml"));
        fs::write(&path, toml::to_string_pretty(self)?).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
