//! Tokenizer pretraining, alternating optimization and final training.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{combine_graph, psa_loss, sia_loss, AlignmentConfig};
use crate::autograd::Graph;
use crate::data::{EmbeddingTable, Split, SplitSet};
use crate::error::{Error, Result};
use crate::evaldecode::{evaluate_model, EvalOptions, EvalReport, PrefixTrie};
use crate::nn::{AdamW, AdamWConfig};
use crate::recommender::{rec_loss, teacher_forcing, Recommender, RecommenderConfig, TokenSequence, VocabLayout, BOS};
use crate::tokenizer::{
    code_usage, init_codebooks, quantize, tokenize_corpus, IdentifierMap, Tokenizer, TokenizerConfig,
};

/// Derives a component seed from the root seed, a label and counters.
pub fn derive_seed(root: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Tokenizer,
    Recommender,
    Joint,
    Final,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Pretrain => "pretrain",
            Phase::Tokenizer => "tokenizer",
            Phase::Recommender => "recommender",
            Phase::Joint => "joint",
            Phase::Final => "final",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoSia,
    NoPsa,
    NoBoth,
    NoAt,
    NoEte,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoSia, Variant::NoPsa, Variant::NoBoth, Variant::NoAt, Variant::NoEte];

    /// Alignment weights after the variant's overrides.
    pub fn weights(&self, a: &AlignmentConfig) -> AlignmentConfig {
        let mut out = *a;
        match self {
            Variant::NoSia => out.mu = 0.0,
            Variant::NoPsa => out.lambda = 0.0,
            Variant::NoBoth | Variant::NoEte => {
                out.mu = 0.0;
                out.lambda = 0.0;
            }
            Variant::Full | Variant::NoAt => {}
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoSia => "no_sia",
            Variant::NoPsa => "no_psa",
            Variant::NoBoth => "no_both",
            Variant::NoAt => "no_at",
            Variant::NoEte => "no_ete",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected full, no_sia, no_psa, no_both, no_at or no_ete)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Epochs per cycle: one tokenizer epoch, then `C − 1` recommender epochs.
    pub cycle_length: usize,
    pub tokenizer_lr: f64,
    pub recommender_lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Converged once at most this fraction of identifiers changes.
    pub epsilon: f64,
    pub max_cycles: usize,
    pub patience: usize,
    pub max_final_epochs: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    /// Validation users used for early stopping; 0 means all.
    pub valid_users: usize,
    pub eval_beam: usize,
    pub eval_batch_size: usize,
    /// Evaluate on validation data after every cycle.
    pub eval_each_cycle: bool,
    /// Record parameter hashes around every optimizer step.
    pub audit: bool,
    /// Keep one record per optimizer step in the metric log.
    pub log_steps: bool,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            cycle_length: 2,
            tokenizer_lr: 1e-4,
            recommender_lr: 1e-3,
            weight_decay: 0.05,
            max_grad_norm: 1.0,
            epsilon: 0.01,
            max_cycles: 10,
            patience: 3,
            max_final_epochs: 50,
            batch_size: 256,
            pretrain_epochs: 100,
            pretrain_lr: 1e-3,
            pretrain_batch_size: 1024,
            valid_users: 0,
            eval_beam: 20,
            eval_batch_size: 64,
            eval_each_cycle: true,
            audit: true,
            log_steps: true,
            seed: 2024,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_length < 2 {
            return Err(Error::Config("cycle length must be at least 2".into()));
        }
        if !(self.tokenizer_lr > 0.0 && self.recommender_lr > 0.0 && self.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.pretrain_batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.eval_beam == 0 {
            return Err(Error::Config("beam size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { lr, weight_decay: self.weight_decay, max_grad_norm: self.max_grad_norm, ..Default::default() }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub tokenizer: TokenizerConfig,
    pub recommender: RecommenderConfig,
    pub alignment: AlignmentConfig,
    pub schedule: TrainSchedule,
    pub variant: Variant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            recommender: RecommenderConfig::default(),
            alignment: AlignmentConfig::default(),
            schedule: TrainSchedule::default(),
            variant: Variant::Full,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.recommender.validate()?;
        self.alignment.validate()?;
        self.schedule.validate()?;
        if self.recommender.semantic_dim != self.tokenizer.input_dim {
            return Err(Error::Config(format!(
                "recommender projects to {} dimensions but the tokenizer reads {}",
                self.recommender.semantic_dim, self.tokenizer.input_dim
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            levels: self.tokenizer.levels,
            codebook_size: self.tokenizer.codebook_size,
            suffix_capacity: self.tokenizer.suffix_capacity,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One next-item example over catalog indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: usize,
}

/// Splits and embeddings resolved against one catalog order.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub table: EmbeddingTable,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl TrainData {
    pub fn from_splits(table: EmbeddingTable, splits: &SplitSet) -> Result<Self> {
        let resolve = |split: Split| -> Result<Vec<Example>> {
            splits
                .of(split)
                .map(|e| {
                    let idx = |id: &str| {
                        table.vocab().index_of(id).ok_or_else(|| Error::MissingEmbeddings {
                            count: 1,
                            examples: vec![id.to_string()],
                        })
                    };
                    Ok(Example {
                        input: e.input_items.iter().map(|i| idx(i)).collect::<Result<_>>()?,
                        target: idx(&e.target_item)?,
                    })
                })
                .collect()
        };
        let (train, valid, test) = (resolve(Split::Train)?, resolve(Split::Valid)?, resolve(Split::Test)?);
        Ok(Self { table, train, valid, test })
    }

    fn targets(&self, batch: &[&Example]) -> Array2<f64> {
        let rows = self.table.rows();
        let mut out = Array2::zeros((batch.len(), rows.ncols()));
        for (i, e) in batch.iter().enumerate() {
            out.row_mut(i).assign(&rows.row(e.target));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelUtilization {
    pub used_codes: usize,
    /// Fraction of items assigned to every code; sums to 1.
    pub fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub rq: f64,
    pub reset_codes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    /// Mean squared reconstruction error over all items after training.
    pub final_recon: f64,
    pub utilization: Vec<LevelUtilization>,
}

/// Mean `(‖z − z̃‖², L_RQ)` over the table, and per-level code usage.
pub fn tokenizer_diagnostics(tok: &Tokenizer, table: &EmbeddingTable) -> Result<(f64, f64, Vec<LevelUtilization>)> {
    let z = table.rows();
    let r = tok.encode_batch(z.view())?;
    let books = tok.codebooks();
    let mut tokens = Vec::with_capacity(z.nrows());
    let mut quantized = Array2::zeros(r.dim());
    let mut rq = 0.0;
    for (i, row) in r.rows().into_iter().enumerate() {
        let q = quantize(row, &books);
        for (l, v) in q.residuals.iter().enumerate() {
            let e = books[l].vectors.row(q.tokens[l]);
            let d: f64 = v.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            rq += d * (1.0 + tok.config().beta);
        }
        quantized.row_mut(i).assign(&q.quantized);
        tokens.push(q.tokens);
    }
    let recon = tok.reconstruct_batch(quantized.view());
    let err = (&recon - z).mapv(|v| v * v).sum() / z.nrows() as f64;
    let cfg = tok.config();
    let usage = code_usage(&tokens, cfg.levels, cfg.codebook_size);
    let n = tokens.len().max(1) as f64;
    let util = usage
        .iter()
        .map(|u| LevelUtilization {
            used_codes: u.iter().filter(|&&c| c > 0).count(),
            fractions: u.iter().map(|&c| c as f64 / n).collect(),
        })
        .collect();
    Ok((err, rq / n, util))
}

/// k-means initialization of every codebook on the current encoder outputs.
pub fn initialize_codebooks(tok: &mut Tokenizer, table: &EmbeddingTable, seed: u64) -> Result<()> {
    let latents = tok.encode_batch(table.rows().view())?;
    let books = init_codebooks(latents.view(), tok.config(), seed)?;
    tok.set_codebooks(&books)
}

/// Minimizes the quantization loss alone over all item embeddings.
pub fn pretrain_tokenizer(
    tok: &mut Tokenizer,
    table: &EmbeddingTable,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    schedule: &TrainSchedule,
) -> Result<PretrainReport> {
    let mut opt = AdamW::new(schedule.optimizer(lr), tok.store());
    let n = table.len();
    let mut report = PretrainReport { epochs: Vec::new(), final_recon: 0.0, utilization: Vec::new() };
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, "pretrain", &[epoch as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut recon_sum, mut rq_sum) = (0.0, 0.0);
        for chunk in order.chunks(batch_size.max(1)) {
            let mut z = Array2::zeros((chunk.len(), table.dim()));
            for (i, &r) in chunk.iter().enumerate() {
                z.row_mut(i).assign(&table.rows().row(r));
            }
            let mut g = Graph::new();
            let p = tok.store().bind(&mut g, true);
            let zv = g.constant(z.into_dyn());
            let fwd = tok.forward_graph(&mut g, &p, zv);
            let loss = tok.sq_loss_graph(&mut g, zv, &fwd);
            let total = g.scalar(loss.sq);
            if !total.is_finite() {
                return Err(Error::Divergence(format!("pretraining loss became {total} in epoch {epoch}")));
            }
            recon_sum += g.scalar(loss.recon) * chunk.len() as f64;
            rq_sum += g.scalar(loss.rq) * chunk.len() as f64;
            let grads = g.backward(loss.sq);
            opt.step(tok.store_mut(), &p.grads(&grads));
            if !tok.store().all_finite() {
                return Err(Error::Divergence(format!("non-finite tokenizer parameters in pretraining epoch {epoch}")));
            }
        }
        let mut reset = 0;
        if tok.config().reset_dead_codes {
            reset = reset_unused_codes(tok, table, &mut rng)?;
        }
        report.epochs.push(PretrainEpoch { epoch, recon: recon_sum / n as f64, rq: rq_sum / n as f64, reset_codes: reset });
    }
    let (recon, _, util) = tokenizer_diagnostics(tok, table)?;
    report.final_recon = recon;
    report.utilization = util;
    Ok(report)
}

fn reset_unused_codes(tok: &mut Tokenizer, table: &EmbeddingTable, rng: &mut ChaCha8Rng) -> Result<usize> {
    let r = tok.encode_batch(table.rows().view())?;
    let books = tok.codebooks();
    let cfg = tok.config().clone();
    let mut tokens = Vec::with_capacity(r.nrows());
    let mut pool: Vec<Array2<f64>> = vec![Array2::zeros((r.nrows(), cfg.code_dim)); cfg.levels];
    for (i, row) in r.rows().into_iter().enumerate() {
        let q = quantize(row, &books);
        for (l, v) in q.residuals.iter().enumerate() {
            pool[l].row_mut(i).assign(v);
        }
        tokens.push(q.tokens);
    }
    let usage = code_usage(&tokens, cfg.levels, cfg.codebook_size);
    Ok(tok.reset_dead_codes(&usage, &pool, rng))
}

/// Loss values of one optimizer step (or an epoch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec: Option<f64>,
    pub sia: f64,
    pub psa: f64,
    pub combined: f64,
}

impl StepLosses {
    fn accumulate(&mut self, other: &StepLosses, w: f64) {
        let add = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + w * b.unwrap_or(0.0)),
        };
        self.sq = add(self.sq, other.sq);
        self.rec = add(self.rec, other.rec);
        self.sia += w * other.sia;
        self.psa += w * other.psa;
        self.combined += w * other.combined;
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step {
        step: u64,
        phase: Phase,
        cycle: usize,
        epoch: usize,
        #[serde(flatten)]
        losses: StepLosses,
    },
    Epoch {
        phase: Phase,
        cycle: usize,
        epoch: usize,
        steps: usize,
        #[serde(flatten)]
        losses: StepLosses,
    },
    Retokenize {
        cycle: usize,
        changed_fraction: f64,
        max_suffix: usize,
        ids_hash: String,
    },
    Eval {
        phase: Phase,
        cycle: usize,
        epoch: usize,
        split: Split,
        users: usize,
        #[serde(with = "cutoff_keys")]
        recall: BTreeMap<usize, f64>,
        #[serde(with = "cutoff_keys")]
        ndcg: BTreeMap<usize, f64>,
    },
}

// Tagged enums buffer their content, which leaves integer map keys as
// strings on the way back in.
mod cutoff_keys {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

/// Parameter and identifier fingerprints around state changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Step {
        step: u64,
        phase: Phase,
        cycle: usize,
        epoch: usize,
        tokenizer_before: String,
        tokenizer_after: String,
        recommender_before: String,
        recommender_after: String,
        ids: String,
    },
    Retokenize {
        cycle: usize,
        epoch: usize,
        ids_before: String,
        ids_after: String,
    },
}

/// Checks phase exclusivity and boundary-only re-tokenization; returns every
/// violation found.
pub fn audit(events: &[AuditEvent]) -> Vec<String> {
    let mut violations = Vec::new();
    let mut last_tok: Option<&str> = None;
    let mut last_rec: Option<&str> = None;
    let mut current_ids: Option<&str> = None;
    // (cycle, whether a recommender step already ran in this cycle)
    let mut rec_seen_in_cycle: Option<usize> = None;
    let mut last_phase: Option<Phase> = None;
    for (n, e) in events.iter().enumerate() {
        match e {
            AuditEvent::Step {
                step,
                phase,
                cycle,
                tokenizer_before,
                tokenizer_after,
                recommender_before,
                recommender_after,
                ids,
                ..
            } => {
                if last_tok.is_some_and(|t| t != tokenizer_before) {
                    violations.push(format!("step {step}: tokenizer changed outside an optimizer step"));
                }
                if last_rec.is_some_and(|r| r != recommender_before) {
                    violations.push(format!("step {step}: recommender changed outside an optimizer step"));
                }
                match phase {
                    Phase::Tokenizer | Phase::Pretrain => {
                        if recommender_before != recommender_after {
                            violations.push(format!("step {step}: recommender updated during the {phase} phase"));
                        }
                    }
                    Phase::Recommender | Phase::Final => {
                        if tokenizer_before != tokenizer_after {
                            violations.push(format!("step {step}: tokenizer updated during the {phase} phase"));
                        }
                        if *phase == Phase::Recommender {
                            rec_seen_in_cycle = Some(*cycle);
                        }
                    }
                    Phase::Joint => {}
                }
                if current_ids.is_some_and(|c| c != ids) {
                    violations.push(format!("step {step}: identifiers changed without a re-tokenization event"));
                }
                current_ids = Some(ids);
                last_tok = Some(tokenizer_after);
                last_rec = Some(recommender_after);
                last_phase = Some(*phase);
            }
            AuditEvent::Retokenize { cycle, ids_before, ids_after, .. } => {
                if current_ids.is_some_and(|c| c != ids_before) {
                    violations.push(format!("event {n}: re-tokenization started from unexpected identifiers"));
                }
                match last_phase {
                    Some(Phase::Tokenizer) | Some(Phase::Joint) | None => {}
                    Some(p) => violations.push(format!("event {n}: re-tokenization after a {p} step in cycle {cycle}")),
                }
                if rec_seen_in_cycle == Some(*cycle) {
                    violations.push(format!("event {n}: re-tokenization inside the recommender epochs of cycle {cycle}"));
                }
                current_ids = Some(ids_after);
            }
        }
    }
    violations
}

/// Both components, their optimizers, the identifiers and the logs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub tokenizer: Tokenizer,
    pub tokenizer_opt: AdamW,
    pub recommender: Recommender,
    pub recommender_opt: AdamW,
    pub ids: IdentifierMap,
    /// Completed cycles.
    pub cycle: usize,
    pub step: u64,
    pub converged: bool,
    pub history: Vec<Record>,
    pub audit: Vec<AuditEvent>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    config_hash: String,
    cycle: usize,
    step: u64,
    converged: bool,
    tokenizer_hash: String,
    tokenizer_opt: AdamW,
    recommender_opt: AdamW,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const RECOMMENDER_FILE: &str = "recommender.json";
pub const IDS_FILE: &str = "ids.tsv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.json";

impl TrainState {
    /// Fresh state from a pretrained tokenizer.
    pub fn new(config: ExperimentConfig, tokenizer: Tokenizer, table: &EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if tokenizer.config() != &config.tokenizer {
            return Err(Error::Config("pretrained tokenizer does not match the tokenizer config".into()));
        }
        let rec_seed = derive_seed(config.schedule.seed, "recommender", &[]);
        let recommender = Recommender::new(config.recommender.clone(), config.layout(), rec_seed)?;
        let ids = tokenize_corpus(table, &tokenizer)?;
        let tokenizer_opt = AdamW::new(config.schedule.optimizer(config.schedule.tokenizer_lr), tokenizer.store());
        let recommender_opt = AdamW::new(config.schedule.optimizer(config.schedule.recommender_lr), recommender.store());
        Ok(Self {
            config,
            tokenizer,
            tokenizer_opt,
            recommender,
            recommender_opt,
            ids,
            cycle: 0,
            step: 0,
            converged: false,
            history: Vec::new(),
            audit: Vec::new(),
        })
    }

    fn weights(&self) -> AlignmentConfig {
        self.config.variant.weights(&self.config.alignment)
    }

    fn epoch_rng(&self, label: &str, cycle: usize, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.schedule.seed, label, &[cycle as u64, epoch as u64]))
    }

    fn sequences(&self, batch: &[&Example]) -> Vec<TokenSequence> {
        let layout = self.recommender.layout();
        let max_len = self.recommender.config().max_len;
        batch.iter().map(|e| TokenSequence::from_items(&e.input, &self.ids, layout, max_len)).collect()
    }

    fn targets(&self, batch: &[&Example]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let layout = self.recommender.layout();
        batch.iter().map(|e| teacher_forcing(&layout.item_tokens(self.ids.by_index(e.target)))).unzip()
    }

    /// Tokenizer update on `L_SQ + μ·SIA + λ·PSA` with the recommender frozen.
    fn tokenizer_step(&mut self, data: &TrainData, batch: &[&Example]) -> Result<StepLosses> {
        let w = self.weights();
        let mut g = Graph::new();
        let tp = self.tokenizer.store().bind(&mut g, true);
        let z = g.constant(data.targets(batch).into_dyn());
        let fwd = self.tokenizer.forward_graph(&mut g, &tp, z);
        let sq = self.tokenizer.sq_loss_graph(&mut g, z, &fwd);
        let (mut sia, mut psa) = (None, None);
        if w.mu != 0.0 || w.lambda != 0.0 {
            let rp = self.recommender.store().bind(&mut g, false);
            let seqs = self.sequences(batch);
            let (enc, masks, enc_len) = self.recommender.embed_and_encode(&mut g, &rp, &seqs, &mut None)?;
            if w.mu != 0.0 {
                let z_e = self.recommender.project_sequence_state(&mut g, &rp, enc, &masks)?;
                sia = Some(sia_loss(&mut g, &self.tokenizer, &tp, z, z_e, w.teacher_forcing));
            }
            if w.lambda != 0.0 {
                // the BOS state depends on nothing but the encoder output
                let bos = vec![vec![BOS]; batch.len()];
                let (dec, _, dec_len) = self.recommender.decode(&mut g, &rp, enc, &masks, enc_len, &bos, &mut None)?;
                let h = self.recommender.preference_state(&mut g, &rp, dec, batch.len(), dec_len);
                psa = Some(psa_loss(&mut g, h, fwd.reconstruction, w.tau)?);
            }
        }
        let total = combine_graph(&mut g, sq.sq, sia, psa, w.sia_weight(), w.lambda);
        let losses = StepLosses {
            sq: Some(g.scalar(sq.sq)),
            rec: None,
            sia: sia.map_or(0.0, |v| g.scalar(v)),
            psa: psa.map_or(0.0, |v| g.scalar(v)),
            combined: g.scalar(total),
        };
        check_finite(&losses, Phase::Tokenizer)?;
        let grads = g.backward(total);
        self.tokenizer_opt.step(self.tokenizer.store_mut(), &tp.grads(&grads));
        if !self.tokenizer.store().all_finite() {
            return Err(Error::Divergence("non-finite tokenizer parameters after an update".into()));
        }
        Ok(losses)
    }

    /// Recommender update on `L_REC + μ·SIA + λ·PSA` with the tokenizer
    /// frozen, or a joint update of both components.
    fn recommender_step(&mut self, data: &TrainData, batch: &[&Example], rng: &mut ChaCha8Rng, joint: bool) -> Result<StepLosses> {
        let w = self.weights();
        let mut g = Graph::new();
        let rp = self.recommender.store().bind(&mut g, true);
        let needs_tok = joint || w.mu != 0.0 || w.lambda != 0.0;
        let tp = needs_tok.then(|| self.tokenizer.store().bind(&mut g, joint));
        let seqs = self.sequences(batch);
        let (dec_in, targets) = self.targets(batch);
        let out = self.recommender.forward(&mut g, &rp, &seqs, &dec_in, &mut Some(rng))?;
        let rec = rec_loss(&mut g, out.logits, &targets);
        let z = g.constant(data.targets(batch).into_dyn());
        let mut base = rec;
        let mut sq_val = None;
        let mut recon = None;
        if let Some(tp) = &tp {
            if joint || w.lambda != 0.0 {
                let fwd = self.tokenizer.forward_graph(&mut g, tp, z);
                if joint {
                    let sq = self.tokenizer.sq_loss_graph(&mut g, z, &fwd);
                    sq_val = Some(g.scalar(sq.sq));
                    base = g.add(base, sq.sq);
                }
                recon = Some(fwd.reconstruction);
            }
        }
        let (mut sia, mut psa) = (None, None);
        if let Some(tp) = &tp {
            if w.mu != 0.0 {
                let z_e = self.recommender.project_sequence_state(&mut g, &rp, out.encoder_states, &out.enc_mask)?;
                sia = Some(sia_loss(&mut g, &self.tokenizer, tp, z, z_e, w.teacher_forcing));
            }
            if w.lambda != 0.0 {
                let h = self.recommender.preference_state(&mut g, &rp, out.decoder_states, out.batch, out.dec_len);
                psa = Some(psa_loss(&mut g, h, recon.expect("reconstruction computed"), w.tau)?);
            }
        }
        let total = combine_graph(&mut g, base, sia, psa, w.sia_weight(), w.lambda);
        let phase = if joint { Phase::Joint } else { Phase::Recommender };
        let losses = StepLosses {
            sq: sq_val,
            rec: Some(g.scalar(rec)),
            sia: sia.map_or(0.0, |v| g.scalar(v)),
            psa: psa.map_or(0.0, |v| g.scalar(v)),
            combined: g.scalar(total),
        };
        check_finite(&losses, phase)?;
        let grads = g.backward(total);
        self.recommender_opt.step(self.recommender.store_mut(), &rp.grads(&grads));
        if joint {
            let tp = tp.expect("bound for joint updates");
            self.tokenizer_opt.step(self.tokenizer.store_mut(), &tp.grads(&grads));
        }
        if !self.recommender.store().all_finite() || !self.tokenizer.store().all_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after a {phase} update")));
        }
        Ok(losses)
    }

    /// One pass over the training examples in `phase`.
    pub fn run_epoch(&mut self, data: &TrainData, phase: Phase, cycle: usize, epoch: usize) -> Result<StepLosses> {
        let mut rng = self.epoch_rng(&format!("epoch.{phase}"), cycle, epoch);
        let mut order: Vec<&Example> = data.train.iter().collect();
        order.shuffle(&mut rng);
        let bs = self.config.schedule.batch_size;
        let mut mean = StepLosses::default();
        let mut steps = 0;
        for batch in order.chunks(bs) {
            // contrastive terms need negatives
            if batch.len() < 2 {
                continue;
            }
            let (tok_before, rec_before) = if self.config.schedule.audit {
                (self.tokenizer.hash(), self.recommender.hash())
            } else {
                Default::default()
            };
            let losses = match phase {
                Phase::Tokenizer => self.tokenizer_step(data, batch)?,
                Phase::Recommender | Phase::Final => self.recommender_step(data, batch, &mut rng, false)?,
                Phase::Joint => self.recommender_step(data, batch, &mut rng, true)?,
                Phase::Pretrain => return Err(Error::Config("pretraining runs through pretrain_tokenizer".into())),
            };
            self.step += 1;
            if self.config.schedule.audit {
                self.audit.push(AuditEvent::Step {
                    step: self.step,
                    phase,
                    cycle,
                    epoch,
                    tokenizer_before: tok_before,
                    tokenizer_after: self.tokenizer.hash(),
                    recommender_before: rec_before,
                    recommender_after: self.recommender.hash(),
                    ids: self.ids.content_hash(),
                });
            }
            if self.config.schedule.log_steps {
                self.history.push(Record::Step { step: self.step, phase, cycle, epoch, losses });
            }
            mean.accumulate(&losses, batch.len() as f64);
            steps += 1;
        }
        let n: usize = order.chunks(bs).filter(|b| b.len() >= 2).map(|b| b.len()).sum();
        let scale = 1.0 / n.max(1) as f64;
        let mean = StepLosses {
            sq: mean.sq.map(|v| v * scale),
            rec: mean.rec.map(|v| v * scale),
            sia: mean.sia * scale,
            psa: mean.psa * scale,
            combined: mean.combined * scale,
        };
        self.history.push(Record::Epoch { phase, cycle, epoch, steps, losses: mean });
        info!("cycle {cycle} epoch {epoch} [{phase}] combined {:.5}", mean.combined);
        Ok(mean)
    }

    /// Re-derives every identifier from the current tokenizer; returns the
    /// fraction that changed.
    pub fn retokenize(&mut self, data: &TrainData, cycle: usize, epoch: usize) -> Result<f64> {
        let new = tokenize_corpus(&data.table, &self.tokenizer)?;
        let changed = new.changed_fraction(&self.ids)?;
        let before = self.ids.content_hash();
        self.ids = new;
        let after = self.ids.content_hash();
        if self.config.schedule.audit {
            self.audit.push(AuditEvent::Retokenize { cycle, epoch, ids_before: before, ids_after: after.clone() });
        }
        self.history.push(Record::Retokenize {
            cycle,
            changed_fraction: changed,
            max_suffix: self.ids.max_suffix(),
            ids_hash: after,
        });
        Ok(changed)
    }

    /// Ranking metrics on `examples`, first `limit` only when nonzero.
    pub fn evaluate(&self, examples: &[Example], limit: usize) -> Result<EvalReport> {
        evaluate_examples(&self.recommender, &self.ids, examples, limit, &self.eval_options())
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            ks: vec![5, 10],
            beam: self.config.schedule.eval_beam,
            batch_size: self.config.schedule.eval_batch_size,
        }
    }

    fn log_eval(&mut self, report: &EvalReport, phase: Phase, cycle: usize, epoch: usize, split: Split) {
        self.history.push(Record::Eval {
            phase,
            cycle,
            epoch,
            split,
            users: report.users,
            recall: report.recall.clone(),
            ndcg: report.ndcg.clone(),
        });
    }

    /// One alternating cycle: a tokenizer epoch, re-tokenization, then
    /// `C − 1` recommender epochs. Returns the identifier change fraction.
    pub fn run_cycle(&mut self, data: &TrainData) -> Result<f64> {
        let cycle = self.cycle;
        self.run_epoch(data, Phase::Tokenizer, cycle, 0)?;
        let changed = self.retokenize(data, cycle, 0)?;
        for epoch in 1..self.config.schedule.cycle_length {
            self.run_epoch(data, Phase::Recommender, cycle, epoch)?;
        }
        self.finish_cycle(data, changed)
    }

    /// Joint update of both components for one epoch, then re-tokenization.
    pub fn run_joint_cycle(&mut self, data: &TrainData) -> Result<f64> {
        let cycle = self.cycle;
        self.run_epoch(data, Phase::Joint, cycle, 0)?;
        let changed = self.retokenize(data, cycle, 0)?;
        self.finish_cycle(data, changed)
    }

    fn finish_cycle(&mut self, data: &TrainData, changed: f64) -> Result<f64> {
        let cycle = self.cycle;
        self.converged = check_convergence_fraction(changed, self.config.schedule.epsilon);
        if self.config.schedule.eval_each_cycle {
            let report = self.evaluate(&data.valid, self.config.schedule.valid_users)?;
            self.log_eval(&report, Phase::Recommender, cycle, self.config.schedule.cycle_length - 1, Split::Valid);
        }
        info!("cycle {cycle}: {:.2}% identifiers changed", 100.0 * changed);
        self.cycle += 1;
        Ok(changed)
    }

    /// Trains the recommender with the tokenizer permanently frozen until
    /// validation Recall@10 stops improving; keeps the best epoch.
    pub fn finalize(&mut self, data: &TrainData) -> Result<EvalReport> {
        let sched = self.config.schedule.clone();
        let cycle = self.cycle;
        let mut best = self.evaluate(&data.valid, sched.valid_users)?;
        self.log_eval(&best, Phase::Final, cycle, 0, Split::Valid);
        let mut best_state = (self.recommender.clone(), self.recommender_opt.clone());
        let mut stale = 0;
        for epoch in 1..=sched.max_final_epochs {
            self.run_epoch(data, Phase::Final, cycle, epoch)?;
            let report = self.evaluate(&data.valid, sched.valid_users)?;
            self.log_eval(&report, Phase::Final, cycle, epoch, Split::Valid);
            if report.recall_at(10) > best.recall_at(10) {
                best = report;
                best_state = (self.recommender.clone(), self.recommender_opt.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= sched.patience.max(1) {
                    break;
                }
            }
        }
        (self.recommender, self.recommender_opt) = best_state;
        Ok(best)
    }

    /// Writes checkpoints, identifiers, logs and resume state to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.tokenizer.save(dir.join(TOKENIZER_FILE))?;
        self.recommender.save(dir.join(RECOMMENDER_FILE))?;
        self.ids.write_text(dir.join(IDS_FILE))?;
        write_jsonl(&dir.join(METRICS_FILE), &self.history)?;
        write_jsonl(&dir.join(AUDIT_FILE), &self.audit)?;
        let state = StateFile {
            config_hash: self.config.hash(),
            cycle: self.cycle,
            step: self.step,
            converged: self.converged,
            tokenizer_hash: self.tokenizer.hash(),
            tokenizer_opt: self.tokenizer_opt.clone(),
            recommender_opt: self.recommender_opt.clone(),
        };
        let path = dir.join(STATE_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(BufWriter::new(file), &state)?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a state saved at a cycle boundary; refuses a different config.
    pub fn load(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let state: StateFile = serde_json::from_reader(BufReader::new(file))?;
        if state.config_hash != config.hash() {
            return Err(Error::Config(format!(
                "resume refused: {} was written by a different configuration",
                dir.display()
            )));
        }
        let tokenizer = Tokenizer::load(dir.join(TOKENIZER_FILE))?;
        let recommender = Recommender::load(dir.join(RECOMMENDER_FILE))?;
        let mut ids = IdentifierMap::read_text(dir.join(IDS_FILE))?;
        if tokenizer.hash() != state.tokenizer_hash {
            return Err(Error::Checkpoint("tokenizer checkpoint does not match the saved state".into()));
        }
        ids.tokenizer_hash = Some(state.tokenizer_hash);
        Ok(Self {
            config: config.clone(),
            tokenizer,
            tokenizer_opt: state.tokenizer_opt,
            recommender,
            recommender_opt: state.recommender_opt,
            ids,
            cycle: state.cycle,
            step: state.step,
            converged: state.converged,
            history: read_jsonl(&dir.join(METRICS_FILE))?,
            audit: read_jsonl(&dir.join(AUDIT_FILE))?,
        })
    }
}

fn check_finite(l: &StepLosses, phase: Phase) -> Result<()> {
    let vals = [l.sq.unwrap_or(0.0), l.rec.unwrap_or(0.0), l.sia, l.psa, l.combined];
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite loss in the {phase} phase: {l:?}")))
    }
}

fn check_convergence_fraction(changed: f64, epsilon: f64) -> bool {
    changed <= epsilon
}

/// True when at most `epsilon` of the items changed identifier.
pub fn check_convergence(prev: &IdentifierMap, new: &IdentifierMap, epsilon: f64) -> Result<bool> {
    Ok(check_convergence_fraction(new.changed_fraction(prev)?, epsilon))
}

/// Ranking metrics of a recommender under a fixed identifier map.
pub fn evaluate_examples(
    rec: &Recommender,
    ids: &IdentifierMap,
    examples: &[Example],
    limit: usize,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let trie = PrefixTrie::build(ids, rec.layout())?;
    let take = if limit == 0 { examples.len() } else { limit.min(examples.len()) };
    let cases: Vec<(TokenSequence, String)> = examples[..take]
        .iter()
        .map(|e| {
            let seq = TokenSequence::from_items(&e.input, ids, rec.layout(), rec.config().max_len);
            (seq, ids.by_index(e.target).item_id.clone())
        })
        .collect();
    evaluate_model(rec, &trie, &cases, opts)
}

/// Result of a complete training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub valid: EvalReport,
    pub test: EvalReport,
}

/// Pretraining as configured: k-means initialization, then `L_SQ` epochs.
pub fn pretrain(config: &ExperimentConfig, table: &EmbeddingTable) -> Result<(Tokenizer, PretrainReport)> {
    config.validate()?;
    let s = &config.schedule;
    let mut tok = Tokenizer::new(config.tokenizer.clone(), derive_seed(s.seed, "tokenizer", &[]))?;
    initialize_codebooks(&mut tok, table, derive_seed(s.seed, "kmeans", &[]))?;
    let report = pretrain_tokenizer(&mut tok, table, s.pretrain_epochs, s.pretrain_lr, s.pretrain_batch_size, s)?;
    Ok((tok, report))
}

/// Alternating (or joint) cycles until convergence, then final training.
/// With `out_dir`, state is saved at every cycle boundary and resumed from
/// there when `resume` is set.
pub fn train(
    config: &ExperimentConfig,
    data: &TrainData,
    pretrained: &Tokenizer,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    if config.variant == Variant::NoEte {
        return Err(Error::Config("no_ete retrains on identifiers from a finished run; use run_ablation".into()));
    }
    let mut state = match out_dir {
        Some(dir) if resume && dir.join(STATE_FILE).exists() => {
            let s = TrainState::load(dir, config)?;
            info!("resuming after cycle {}", s.cycle);
            s
        }
        _ => TrainState::new(config.clone(), pretrained.clone(), &data.table)?,
    };
    let joint = config.variant == Variant::NoAt;
    // matches the number of recommender epochs of the alternating schedule
    let max_cycles =
        if joint { config.schedule.max_cycles * (config.schedule.cycle_length - 1) } else { config.schedule.max_cycles };
    while state.cycle < max_cycles && !state.converged {
        if joint {
            state.run_joint_cycle(data)?;
        } else {
            state.run_cycle(data)?;
        }
        if let Some(dir) = out_dir {
            state.save(dir)?;
        }
    }
    if !state.converged {
        warn!("identifiers still moving after {} cycles", state.cycle);
    }
    let valid = state.finalize(data)?;
    let test = state.evaluate(&data.test, 0)?;
    state.log_eval(&test, Phase::Final, state.cycle, 0, Split::Test);
    if let Some(dir) = out_dir {
        state.save(dir)?;
    }
    Ok(TrainOutcome { state, valid, test })
}

/// Fresh recommender trained on frozen identifiers without alignment terms.
pub fn train_on_frozen_ids(
    config: &ExperimentConfig,
    data: &TrainData,
    tokenizer: &Tokenizer,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.variant = Variant::NoEte;
    let mut state = TrainState::new(cfg, tokenizer.clone(), &data.table)?;
    let valid = state.finalize(data)?;
    let test = state.evaluate(&data.test, 0)?;
    state.log_eval(&test, Phase::Final, state.cycle, 0, Split::Test);
    if let Some(dir) = out_dir {
        state.save(dir)?;
    }
    Ok(TrainOutcome { state, valid, test })
}

/// Runs one ablation variant from a pretrained tokenizer. `no_ete` first
/// performs a full run (unless `full_run` is given) and reuses its tokenizer.
pub fn run_ablation(
    variant: Variant,
    config: &ExperimentConfig,
    data: &TrainData,
    pretrained: &Tokenizer,
    full_run: Option<&TrainOutcome>,
) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.variant = variant;
    match variant {
        Variant::NoEte => {
            let owned;
            let full = match full_run {
                Some(f) => f,
                None => {
                    let mut full_cfg = config.clone();
                    full_cfg.variant = Variant::Full;
                    owned = train(&full_cfg, data, pretrained, None, false)?;
                    &owned
                }
            };
            train_on_frozen_ids(&cfg, data, &full.state.tokenizer, None)
        }
        _ => train(&cfg, data, pretrained, None, false),
    }
}
