//! Planted-structure interaction corpus for end-to-end checks.
//!
//! Items fall into latent clusters; users walk a Markov chain over clusters
//! and pick an item from the current cluster at each step. Item embeddings
//! are noisy copies of their cluster centre.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::data::{apply_k_core, split_leave_one_out, EmbeddingTable, InteractionCorpus, ItemVocab, UserRecord};
use crate::error::{Error, Result};
use crate::recommender::RecommenderConfig;
use crate::tokenizer::TokenizerConfig;
use crate::trainer::{ExperimentConfig, TrainData, TrainSchedule, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of moving to the cluster's designated successor.
    pub follow: f64,
    /// Probability of staying in the current cluster.
    pub stay: f64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 200,
            clusters: 20,
            min_len: 5,
            max_len: 9,
            follow: 0.7,
            stay: 0.15,
            embedding_dim: 32,
            embedding_noise: 0.3,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub corpus: InteractionCorpus,
    pub embeddings: EmbeddingTable,
    /// Planted cluster of every item.
    pub clusters: BTreeMap<String, usize>,
    /// Designated successor of every cluster.
    pub successor: Vec<usize>,
}

pub fn item_name(i: usize) -> String {
    format!("i{i:04}")
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    if config.clusters == 0 || config.items < config.clusters || config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::Config("inconsistent synthetic corpus settings".into()));
    }
    if !(config.follow >= 0.0 && config.stay >= 0.0 && config.follow + config.stay <= 1.0) {
        return Err(Error::Config("follow + stay must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cluster_of: Vec<usize> = (0..config.items).map(|i| i % config.clusters).collect();
    let members: Vec<Vec<usize>> =
        (0..config.clusters).map(|c| (0..config.items).filter(|&i| cluster_of[i] == c).collect()).collect();
    // popularity falls off within each cluster
    let pickers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new((0..m.len()).map(|r| 1.0 / ((r + 1) as f64).sqrt())).unwrap())
        .collect();
    let mut successor: Vec<usize> = (0..config.clusters).collect();
    successor.shuffle(&mut rng);

    let mut users = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut cluster = rng.random_range(0..config.clusters);
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            let item = members[cluster][pickers[cluster].sample(&mut rng)];
            items.push(item_name(item));
            let roll: f64 = rng.random();
            cluster = if roll < config.follow {
                successor[cluster]
            } else if roll < config.follow + config.stay {
                cluster
            } else {
                rng.random_range(0..config.clusters)
            };
        }
        let timestamps = (0..len as i64).map(|t| 1_600_000_000 + 60 * t).collect();
        users.push(UserRecord { user_id: format!("u{u:05}"), items, timestamps: Some(timestamps) });
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let centres = Array2::from_shape_fn((config.clusters, config.embedding_dim), |_| normal.sample(&mut rng));
    let noise = Normal::new(0.0, config.embedding_noise.max(0.0)).unwrap();
    let rows = Array2::from_shape_fn((config.items, config.embedding_dim), |(i, j)| {
        centres[[cluster_of[i], j]] + noise.sample(&mut rng)
    });
    let vocab = ItemVocab::new((0..config.items).map(item_name));
    let embeddings = EmbeddingTable::new(vocab, rows)?;
    let clusters = (0..config.items).map(|i| (item_name(i), cluster_of[i])).collect();
    Ok(SyntheticData { corpus: InteractionCorpus { users }, embeddings, clusters, successor })
}

/// Restricts an embedding table to the items that survive in `corpus`.
pub fn restrict_embeddings(table: &EmbeddingTable, corpus: &InteractionCorpus) -> Result<EmbeddingTable> {
    let vocab = corpus.vocab();
    let mut rows = Array2::zeros((vocab.len(), table.dim()));
    for (i, id) in vocab.ids().iter().enumerate() {
        let row = table.get(id).ok_or_else(|| Error::MissingEmbeddings { count: 1, examples: vec![id.clone()] })?;
        rows.row_mut(i).assign(&row);
    }
    EmbeddingTable::new(vocab, rows)
}

/// 5-core filtering, leave-one-out splits and an aligned embedding table.
pub fn prepare(data: &SyntheticData, max_len: usize) -> Result<TrainData> {
    let corpus = apply_k_core(&data.corpus, 5)?;
    let table = restrict_embeddings(&data.embeddings, &corpus)?;
    let splits = split_leave_one_out(&corpus, max_len);
    TrainData::from_splits(table, &splits)
}

/// Small model and schedule sized for the synthetic corpus.
pub fn small_experiment(input_dim: usize, seed: u64, variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        tokenizer: TokenizerConfig {
            levels: 2,
            codebook_size: 16,
            code_dim: 16,
            hidden: vec![64],
            beta: 0.25,
            input_dim,
            suffix_capacity: 32,
            reset_dead_codes: true,
        },
        recommender: RecommenderConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 32,
            ffn_dim: 64,
            heads: 2,
            head_dim: 16,
            dropout: 0.1,
            max_len: 8,
            semantic_dim: 32,
            final_norm: true,
        },
        alignment: AlignmentConfig { mu: 5e-3, lambda: 5e-3, ..Default::default() },
        schedule: TrainSchedule {
            tokenizer_lr: 5e-5,
            recommender_lr: 3e-3,
            max_cycles: 6,
            patience: 2,
            max_final_epochs: 10,
            batch_size: 128,
            pretrain_epochs: 1000,
            pretrain_batch_size: 64,
            valid_users: 300,
            eval_batch_size: 100,
            seed,
            ..Default::default()
        },
        variant,
    }
}
