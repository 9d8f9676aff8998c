//! Residual-quantization item tokenizer.
//!
//! An MLP encoder maps an item's semantic embedding to a latent vector, which
//! is quantized greedily against `L` stacked codebooks (each level quantizes
//! the residual left by the previous ones). An MLP decoder reconstructs the
//! embedding from the summed code vectors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{pairwise_sq_dist, softmax_in_place, Graph, Var};
use crate::data::{EmbeddingTable, ItemVocab};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, ParamId, ParamStore, StoredTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them in reverse.
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub input_dim: usize,
    /// Number of distinct collision-suffix tokens.
    pub suffix_capacity: usize,
    /// Re-seed codes left unused for a whole epoch.
    pub reset_dead_codes: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 256,
            code_dim: 128,
            hidden: vec![512, 256],
            beta: 0.25,
            input_dim: 256,
            suffix_capacity: 64,
            reset_dead_codes: true,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("tokenizer needs at least one level".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook size must be at least 2".into()));
        }
        if self.code_dim == 0 || self.input_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("all tokenizer widths must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.suffix_capacity == 0 {
            return Err(Error::Config("suffix capacity must be positive".into()));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.code_dim);
        d
    }

    fn decoder_dims(&self) -> Vec<usize> {
        let mut d = self.encoder_dims();
        d.reverse();
        d
    }
}

/// One level's code vectors, `K × d_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub level: usize,
    pub vectors: Array2<f64>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub tokens: Vec<usize>,
    /// `v_1 = r`, `v_{l+1} = v_l − e^l_{c_l}`.
    pub residuals: Vec<Array1<f64>>,
    pub quantized: Array1<f64>,
    pub latent: Array1<f64>,
    pub distributions: Vec<Array1<f64>>,
}

/// Softmax over negative squared distances to every code.
pub fn assignment_distribution(v: ArrayView1<f64>, codebook: &Codebook) -> Array1<f64> {
    let v2 = v.insert_axis(Axis(0));
    let d = pairwise_sq_dist(v2, codebook.vectors.view());
    let mut logits: Vec<f64> = d.row(0).iter().map(|x| -x).collect();
    softmax_in_place(&mut logits);
    Array1::from(logits)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy residual quantization of a single latent vector.
pub fn quantize(r: ArrayView1<f64>, codebooks: &[Codebook]) -> QuantizationResult {
    let mut v = r.to_owned();
    let mut out = QuantizationResult {
        tokens: Vec::with_capacity(codebooks.len()),
        residuals: Vec::with_capacity(codebooks.len()),
        quantized: Array1::zeros(r.len()),
        latent: r.to_owned(),
        distributions: Vec::with_capacity(codebooks.len()),
    };
    for cb in codebooks {
        let dists = pairwise_sq_dist(v.view().insert_axis(Axis(0)), cb.vectors.view());
        let neg: Array1<f64> = dists.row(0).mapv(|x| -x);
        let token = argmax(neg.view());
        let mut p = neg.to_vec();
        softmax_in_place(&mut p);
        let code = cb.vectors.row(token);
        out.residuals.push(v.clone());
        out.quantized += &code;
        v -= &code;
        out.tokens.push(token);
        out.distributions.push(Array1::from(p));
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SqLosses {
    pub sq: f64,
    pub recon: f64,
    pub rq: f64,
}

/// Semantic quantization loss of one item (values only).
pub fn sq_loss(
    z: ArrayView1<f64>,
    result: &QuantizationResult,
    z_tilde: ArrayView1<f64>,
    codebooks: &[Codebook],
    beta: f64,
) -> SqLosses {
    let recon: f64 = z.iter().zip(z_tilde.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut rq = 0.0;
    for (l, cb) in codebooks.iter().enumerate() {
        let e = cb.vectors.row(result.tokens[l]);
        let d: f64 = result.residuals[l].iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        // both terms share a value; they differ only in where gradients flow
        rq += d + beta * d;
    }
    SqLosses { sq: recon + rq, recon, rq }
}

/// How the residual stream treats the selected code vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualGrad {
    /// `v_{l+1} = v_l − sg[e]`: residuals carry gradient to the encoder only.
    EncoderOnly,
    /// `v_{l+1} = v_l − e`: residuals carry gradient to the codebooks as well.
    Full,
}

/// Graph-level quantization of a batch of latents.
#[derive(Clone, Debug)]
pub struct QuantGraph {
    /// `tokens[row][level]`.
    pub tokens: Vec<Vec<usize>>,
    /// Per level, `[N, d_c]` residual inputs `v_l`.
    pub residuals: Vec<Var>,
    /// Per level, `[N, K]` assignment probabilities.
    pub distributions: Vec<Var>,
    /// Per level, `[N, d_c]` selected code vectors (gradient to codebooks).
    pub codes: Vec<Var>,
    /// Values of `r̃ = Σ_l e^l_{c_l}`, `[N, d_c]`.
    pub quantized: Array2<f64>,
}

/// Graph-level forward of one batch through the tokenizer.
#[derive(Clone, Debug)]
pub struct TokenizerForward {
    pub latent: Var,
    pub quant: QuantGraph,
    /// Straight-through decoder input `r + sg[r̃ − r]`.
    pub ste_input: Var,
    pub reconstruction: Var,
}

/// Graph-level loss terms of a batch.
#[derive(Clone, Copy, Debug)]
pub struct SqLossVars {
    pub sq: Var,
    pub recon: Var,
    pub rq: Var,
    pub rq_codebook: Var,
    pub rq_commit: Var,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    config: TokenizerConfig,
    store: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    codebooks: Vec<ParamId>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerCheckpoint {
    config: TokenizerConfig,
    params: Vec<StoredTensor>,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Mlp::new(&mut store, "encoder", &config.encoder_dims(), &mut rng);
        let decoder = Mlp::new(&mut store, "decoder", &config.decoder_dims(), &mut rng);
        let normal = Normal::new(0.0, 1.0 / (config.code_dim as f64).sqrt()).unwrap();
        let codebooks = (0..config.levels)
            .map(|l| {
                let v = ArrayD::from_shape_fn(IxDyn(&[config.codebook_size, config.code_dim]), |_| normal.sample(&mut rng));
                store.add(format!("codebook.{l}"), v)
            })
            .collect();
        Ok(Self { config, store, encoder, decoder, codebooks })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder_mlp(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder_mlp(&self) -> &Mlp {
        &self.decoder
    }

    pub fn codebook_param(&self, level: usize) -> ParamId {
        self.codebooks[level]
    }

    pub fn hash(&self) -> String {
        self.store.content_hash()
    }

    pub fn codebook(&self, level: usize) -> Codebook {
        let v = self.store.get(self.codebooks[level]).clone().into_dimensionality().unwrap();
        Codebook { level, vectors: v }
    }

    pub fn codebooks(&self) -> Vec<Codebook> {
        (0..self.config.levels).map(|l| self.codebook(l)).collect()
    }

    pub fn set_codebooks(&mut self, books: &[Array2<f64>]) -> Result<()> {
        if books.len() != self.config.levels {
            return Err(Error::Config(format!("expected {} codebooks, got {}", self.config.levels, books.len())));
        }
        for (l, b) in books.iter().enumerate() {
            if b.dim() != (self.config.codebook_size, self.config.code_dim) {
                return Err(Error::Config(format!("codebook {l} has shape {:?}", b.dim())));
            }
            *self.store.get_mut(self.codebooks[l]) = b.clone().into_dyn();
        }
        Ok(())
    }

    fn check_input(&self, z: ArrayView2<f64>) -> Result<()> {
        if z.ncols() != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "embedding has dimension {}, tokenizer expects {}",
                z.ncols(),
                self.config.input_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding contains non-finite values".into()));
        }
        Ok(())
    }

    /// Latent `r` of one embedding.
    pub fn encode(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.encode_batch(z.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    pub fn encode_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(z)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let zv = g.constant(z.to_owned().into_dyn());
        let r = self.encoder.forward(&mut g, &p, zv);
        Ok(g.value(r).clone().into_dimensionality().unwrap())
    }

    /// Decoder output for a code-space vector.
    pub fn reconstruct(&self, r_tilde: ArrayView1<f64>) -> Array1<f64> {
        self.reconstruct_batch(r_tilde.insert_axis(Axis(0))).row(0).to_owned()
    }

    pub fn reconstruct_batch(&self, r_tilde: ArrayView2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(r_tilde.to_owned().into_dyn());
        let y = self.decoder.forward(&mut g, &p, x);
        g.value(y).clone().into_dimensionality().unwrap()
    }

    /// Token assignments of a batch of embeddings, `[N][L]`.
    pub fn tokens_batch(&self, z: ArrayView2<f64>) -> Result<Vec<Vec<usize>>> {
        let r = self.encode_batch(z)?;
        let books = self.codebooks();
        Ok(r.rows().into_iter().map(|row| quantize(row, &books).tokens).collect())
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        self.encoder.forward(g, p, z)
    }

    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        self.decoder.forward(g, p, x)
    }

    /// Greedy residual quantization on the tape. `forced` replaces the
    /// argmax choice with given tokens (teacher forcing).
    pub fn quantize_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        r: Var,
        mode: ResidualGrad,
        forced: Option<&[Vec<usize>]>,
    ) -> QuantGraph {
        let n = g.value(r).shape()[0];
        let mut tokens = vec![Vec::with_capacity(self.config.levels); n];
        let mut residuals = Vec::new();
        let mut distributions = Vec::new();
        let mut codes = Vec::new();
        let mut quantized = Array2::<f64>::zeros((n, self.config.code_dim));
        let mut v = r;
        for l in 0..self.config.levels {
            let book = p[self.codebooks[l]];
            let d = g.sq_dist(v, book);
            let neg = g.scale(d, -1.0);
            let level_tokens: Vec<usize> = match forced {
                Some(f) => f.iter().map(|t| t[l]).collect(),
                None => {
                    let nv = g.value(neg).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    nv.rows().into_iter().map(argmax).collect()
                }
            };
            let probs = g.softmax(neg);
            let e = g.gather_rows(book, &level_tokens);
            {
                let ev = g.value(e).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                quantized += &ev;
            }
            for (row, t) in tokens.iter_mut().zip(&level_tokens) {
                row.push(*t);
            }
            residuals.push(v);
            distributions.push(probs);
            codes.push(e);
            if l + 1 < self.config.levels {
                v = match mode {
                    ResidualGrad::EncoderOnly => {
                        let es = g.detach(e);
                        g.sub(v, es)
                    }
                    ResidualGrad::Full => g.sub(v, e),
                };
            }
        }
        QuantGraph { tokens, residuals, distributions, codes, quantized }
    }

    /// Encode → quantize → straight-through decode for a batch `z: [N, d_s]`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> TokenizerForward {
        let latent = self.encode_graph(g, p, z);
        let quant = self.quantize_graph(g, p, latent, ResidualGrad::EncoderOnly, None);
        // r + sg[r̃ − r]
        let offset = &quant.quantized.clone().into_dyn() - g.value(latent);
        let ste_input = g.add_const(latent, &offset);
        let reconstruction = self.decode_graph(g, p, ste_input);
        TokenizerForward { latent, quant, ste_input, reconstruction }
    }

    /// Batch-mean semantic quantization loss on the tape.
    pub fn sq_loss_graph(&self, g: &mut Graph, z: Var, fwd: &TokenizerForward) -> SqLossVars {
        let n = g.value(z).shape()[0] as f64;
        let diff = g.sub(z, fwd.reconstruction);
        let sq = g.mul(diff, diff);
        let recon_sum = g.sum(sq);
        let recon = g.scale(recon_sum, 1.0 / n);

        let mut codebook_terms = Vec::new();
        let mut commit_terms = Vec::new();
        for (v, e) in fwd.quant.residuals.iter().zip(&fwd.quant.codes) {
            let vs = g.detach(*v);
            let d1 = g.sub(vs, *e);
            let d1 = g.mul(d1, d1);
            codebook_terms.push(g.sum(d1));
            let es = g.detach(*e);
            let d2 = g.sub(*v, es);
            let d2 = g.mul(d2, d2);
            commit_terms.push(g.sum(d2));
        }
        let sum_all = |g: &mut Graph, terms: &[Var]| {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = g.add(acc, *t);
            }
            acc
        };
        let cb = sum_all(g, &codebook_terms);
        let rq_codebook = g.scale(cb, 1.0 / n);
        let cm = sum_all(g, &commit_terms);
        let rq_commit = g.scale(cm, self.config.beta / n);
        let rq = g.add(rq_codebook, rq_commit);
        let sq = g.add(recon, rq);
        SqLossVars { sq, recon, rq, rq_codebook, rq_commit }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = TokenizerCheckpoint { config: self.config.clone(), params: self.store.to_stored() };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: TokenizerCheckpoint = serde_json::from_reader(BufReader::new(file))?;
        let mut tok = Self::new(ckpt.config, 0)?;
        tok.store.load_stored(&ckpt.params).map_err(Error::Checkpoint)?;
        Ok(tok)
    }

    /// Replaces codes whose usage count is zero with randomly chosen
    /// residuals from `pool` (one `[M, d_c]` matrix per level). Returns how
    /// many codes were reset.
    pub fn reset_dead_codes<R: Rng>(&mut self, usage: &[Vec<usize>], pool: &[Array2<f64>], rng: &mut R) -> usize {
        let mut reset = 0;
        for (l, counts) in usage.iter().enumerate() {
            let Some(residuals) = pool.get(l) else { continue };
            if residuals.nrows() == 0 {
                continue;
            }
            let book = self.store.get_mut(self.codebooks[l]);
            for (k, &c) in counts.iter().enumerate() {
                if c == 0 {
                    let pick = rng.random_range(0..residuals.nrows());
                    book.slice_mut(s![k, ..]).assign(&residuals.row(pick));
                    reset += 1;
                }
            }
        }
        reset
    }
}

/// Level-wise k-means initialization on the residual stream.
pub fn init_codebooks(latents: ArrayView2<f64>, config: &TokenizerConfig, seed: u64) -> Result<Vec<Array2<f64>>> {
    let k = config.codebook_size;
    if latents.nrows() < k {
        return Err(Error::TooFewSamples { needed: k, got: latents.nrows() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = latents.to_owned();
    let mut books = Vec::with_capacity(config.levels);
    for _ in 0..config.levels {
        let centroids = kmeans(residual.view(), k, 100, &mut rng);
        let d = pairwise_sq_dist(residual.view(), centroids.view());
        for (i, row) in d.rows().into_iter().enumerate() {
            let best = argmax(row.mapv(|x| -x).view());
            let mut r = residual.row_mut(i);
            r -= &centroids.row(best);
        }
        books.push(centroids);
    }
    Ok(books)
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters take the point
/// farthest from its centroid; bitwise-duplicate centroids are jittered.
pub fn kmeans<R: Rng>(points: ArrayView2<f64>, k: usize, max_iter: usize, rng: &mut R) -> Array2<f64> {
    let (n, dim) = points.dim();
    assert!(n >= k && k > 0, "kmeans needs at least k points");
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut closest = pairwise_sq_dist(points, centroids.slice(s![0..1, ..])).column(0).to_owned();
    for c in 1..k {
        let total: f64 = closest.sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        let d = pairwise_sq_dist(points, centroids.slice(s![c..c + 1, ..]));
        for (cl, dn) in closest.iter_mut().zip(d.column(0)) {
            *cl = cl.min(*dn);
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let d = pairwise_sq_dist(points, centroids.view());
        let mut changed = false;
        for (i, row) in d.rows().into_iter().enumerate() {
            let best = argmax(row.mapv(|x| -x).view());
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            let mut srow = sums.row_mut(a);
            srow += &points.row(i);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| d[[a, assign[a]]].total_cmp(&d[[b, assign[b]]]).then(b.cmp(&a)))
                    .unwrap();
                centroids.row_mut(c).assign(&points.row(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    dedupe_centroids(&mut centroids, points, rng);
    centroids
}

fn dedupe_centroids<R: Rng>(centroids: &mut Array2<f64>, points: ArrayView2<f64>, rng: &mut R) {
    let rms = (points.iter().map(|v| v * v).sum::<f64>() / points.len().max(1) as f64).sqrt();
    let jitter = Normal::new(0.0, 1e-3 * rms.max(1e-3)).unwrap();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for c in 0..centroids.nrows() {
        loop {
            let key: Vec<u64> = centroids.row(c).iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                break;
            }
            centroids.row_mut(c).mapv_inplace(|v| v + jitter.sample(rng));
        }
    }
}

/// Unique identifier of one item: level tokens plus a collision suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemIdentifier {
    pub item_id: String,
    pub tokens: Vec<usize>,
    pub suffix: usize,
}

impl ItemIdentifier {
    /// `[c_1, .., c_L, suffix]`.
    pub fn code(&self) -> Vec<usize> {
        let mut c = self.tokens.clone();
        c.push(self.suffix);
        c
    }
}

/// Bijective item → identifier mapping, ordered by ascending item id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentifierMap {
    levels: usize,
    vocab: ItemVocab,
    ids: Vec<ItemIdentifier>,
    /// Content hash of the tokenizer the map was derived from, if known.
    pub tokenizer_hash: Option<String>,
}

impl IdentifierMap {
    /// Assigns suffix ordinals to `tokens[i]` (aligned with `vocab`).
    pub fn from_tokens(vocab: ItemVocab, tokens: Vec<Vec<usize>>, suffix_capacity: usize) -> Result<Self> {
        assert_eq!(vocab.len(), tokens.len(), "one token row per item");
        let levels = tokens.first().map_or(0, |t| t.len());
        let mut groups: HashMap<&[usize], usize> = HashMap::new();
        let mut ids = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let next = groups.entry(t.as_slice()).or_insert(0);
            let suffix = *next;
            *next += 1;
            ids.push(ItemIdentifier { item_id: vocab.id(i).to_string(), tokens: t.clone(), suffix });
        }
        if let Some(&size) = groups.values().max() {
            if size > suffix_capacity {
                return Err(Error::SuffixCapacity { size, capacity: suffix_capacity });
            }
        }
        Ok(Self { levels, vocab, ids, tokenizer_hash: None })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab(&self) -> &ItemVocab {
        &self.vocab
    }

    pub fn identifiers(&self) -> &[ItemIdentifier] {
        &self.ids
    }

    pub fn by_index(&self, index: usize) -> &ItemIdentifier {
        &self.ids[index]
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemIdentifier> {
        self.vocab.index_of(item_id).map(|i| &self.ids[i])
    }

    /// SHA-256 over every `(item, tokens, suffix)` row.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.item_id.as_bytes());
            h.update([0u8]);
            for t in id.code() {
                h.update((t as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn max_suffix(&self) -> usize {
        self.ids.iter().map(|i| i.suffix).max().unwrap_or(0)
    }

    /// Collision-group size → number of groups of that size.
    pub fn collision_histogram(&self) -> BTreeMap<usize, usize> {
        let mut groups: HashMap<&[usize], usize> = HashMap::new();
        for id in &self.ids {
            *groups.entry(id.tokens.as_slice()).or_default() += 1;
        }
        let mut hist = BTreeMap::new();
        for size in groups.values() {
            *hist.entry(*size).or_default() += 1;
        }
        hist
    }

    /// Fraction of items whose `(tokens, suffix)` differ between two maps.
    pub fn changed_fraction(&self, other: &IdentifierMap) -> Result<f64> {
        if self.vocab.ids() != other.vocab.ids() {
            return Err(Error::ItemSetMismatch);
        }
        if self.ids.is_empty() {
            return Ok(0.0);
        }
        let changed = self
            .ids
            .iter()
            .zip(&other.ids)
            .filter(|(a, b)| a.tokens != b.tokens || a.suffix != b.suffix)
            .count();
        Ok(changed as f64 / self.ids.len() as f64)
    }

    /// Text export: `item_id \t c_1 .. c_L \t suffix`, one item per line.
    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for id in &self.ids {
            let mut line = id.item_id.clone();
            for t in &id.tokens {
                line.push('\t');
                line.push_str(&t.to_string());
            }
            line.push('\t');
            line.push_str(&id.suffix.to_string());
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        let mut levels = None;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                return Err(Error::Malformed { line: n + 1, reason: "expected item, tokens and suffix".into() });
            }
            let nums: Vec<usize> = fields[1..]
                .iter()
                .map(|f| f.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Malformed { line: n + 1, reason: "non-integer token".into() })?;
            let l = nums.len() - 1;
            if *levels.get_or_insert(l) != l {
                return Err(Error::Malformed { line: n + 1, reason: "inconsistent identifier length".into() });
            }
            rows.push(ItemIdentifier { item_id: fields[0].to_string(), tokens: nums[..l].to_vec(), suffix: nums[l] });
        }
        rows.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let vocab = ItemVocab::new(rows.iter().map(|r| r.item_id.clone()));
        if vocab.len() != rows.len() {
            return Err(Error::InvalidInput("duplicate item id in identifier file".into()));
        }
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.code()) {
                return Err(Error::DuplicateIdentifier(r.code()));
            }
        }
        Ok(Self { levels: levels.unwrap_or(0), vocab, ids: rows, tokenizer_hash: None })
    }
}

/// Tokenizes every item of the table and disambiguates collisions.
pub fn tokenize_corpus(table: &EmbeddingTable, tokenizer: &Tokenizer) -> Result<IdentifierMap> {
    let tokens = tokenizer.tokens_batch(table.rows().view())?;
    let mut map = IdentifierMap::from_tokens(table.vocab().clone(), tokens, tokenizer.config.suffix_capacity)?;
    map.tokenizer_hash = Some(tokenizer.hash());
    Ok(map)
}

/// Per-level code usage counts of a token matrix.
pub fn code_usage(tokens: &[Vec<usize>], levels: usize, codebook_size: usize) -> Vec<Vec<usize>> {
    let mut usage = vec![vec![0usize; codebook_size]; levels];
    for t in tokens {
        for (l, &c) in t.iter().enumerate() {
            usage[l][c] += 1;
        }
    }
    usage
}
