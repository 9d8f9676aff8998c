//! Encoder-decoder transformer over item-token sequences.
//!
//! A user's history is flattened into item blocks `[c_1 .. c_L, suffix]` and
//! encoded; the decoder generates the next item's block token by token.
//! Output logits reuse the input embedding matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Bound, LayerNorm, Linear, ParamId, ParamStore, StoredTensor};
use crate::tokenizer::{IdentifierMap, ItemIdentifier};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
const MASKED: f64 = -1e9;

/// Token id layout: specials, then `L·K` level tokens, then suffix tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub levels: usize,
    pub codebook_size: usize,
    pub suffix_capacity: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Level { level: usize, code: usize },
    Suffix(usize),
}

impl VocabLayout {
    pub fn size(&self) -> usize {
        2 + self.levels * self.codebook_size + self.suffix_capacity
    }

    /// Tokens per item block.
    pub fn block_len(&self) -> usize {
        self.levels + 1
    }

    pub fn level_token(&self, level: usize, code: usize) -> usize {
        assert!(level < self.levels && code < self.codebook_size);
        2 + level * self.codebook_size + code
    }

    pub fn suffix_token(&self, suffix: usize) -> usize {
        assert!(suffix < self.suffix_capacity);
        2 + self.levels * self.codebook_size + suffix
    }

    pub fn kind(&self, token: usize) -> Result<TokenKind> {
        let base = 2 + self.levels * self.codebook_size;
        match token {
            PAD => Ok(TokenKind::Pad),
            BOS => Ok(TokenKind::Bos),
            t if t < base => {
                let i = t - 2;
                Ok(TokenKind::Level { level: i / self.codebook_size, code: i % self.codebook_size })
            }
            t if t < self.size() => Ok(TokenKind::Suffix(t - base)),
            t => Err(Error::OutOfVocabulary { token: t, vocab: self.size() }),
        }
    }

    /// `[c_1 .. c_L, suffix]` as vocabulary ids.
    pub fn item_tokens(&self, id: &ItemIdentifier) -> Vec<usize> {
        let mut out: Vec<usize> = id.tokens.iter().enumerate().map(|(l, &c)| self.level_token(l, c)).collect();
        out.push(self.suffix_token(id.suffix));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecommenderConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    /// Items per input history.
    pub max_len: usize,
    /// Width of the tokenizer's semantic input space.
    pub semantic_dim: usize,
    pub final_norm: bool,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 6,
            decoder_layers: 6,
            d_model: 128,
            ffn_dim: 512,
            heads: 4,
            head_dim: 64,
            dropout: 0.1,
            max_len: 50,
            semantic_dim: 256,
            final_norm: true,
        }
    }
}

impl RecommenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ffn_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("recommender widths must be positive".into()));
        }
        if self.max_len == 0 || self.semantic_dim == 0 {
            return Err(Error::Config("max_len and semantic_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Token ids plus a non-PAD mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let mask = ids.iter().map(|&t| t != PAD).collect();
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Flattened item blocks of a history (most recent `max_len` items).
    pub fn from_items(items: &[usize], ids: &IdentifierMap, layout: &VocabLayout, max_len: usize) -> Self {
        let start = items.len().saturating_sub(max_len);
        let tokens = items[start..].iter().flat_map(|&i| layout.item_tokens(ids.by_index(i))).collect();
        Self::new(tokens)
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        ids.resize(len, PAD);
        mask.resize(len, false);
        Self { ids, mask }
    }
}

/// Decoder input `[BOS, c_1 .. c_L]` and targets `[c_1 .. c_L, suffix]`.
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![BOS];
    input.extend_from_slice(&target[..target.len() - 1]);
    (input, target.to_vec())
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: &RecommenderConfig, rng: &mut R) -> Self {
        let inner = c.heads * c.head_dim;
        Self {
            q: Linear::new(store, &format!("{name}.q"), c.d_model, inner, false, rng),
            k: Linear::new(store, &format!("{name}.k"), c.d_model, inner, false, rng),
            v: Linear::new(store, &format!("{name}.v"), c.d_model, inner, false, rng),
            o: Linear::new(store, &format!("{name}.o"), inner, c.d_model, false, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
}

/// Graph handles of one forward pass; row-major `[batch·len, d]` layout.
#[derive(Clone, Debug)]
pub struct RecommenderOutput {
    pub encoder_states: Var,
    pub enc_mask: Vec<Vec<bool>>,
    pub decoder_states: Var,
    pub logits: Var,
    pub batch: usize,
    pub enc_len: usize,
    pub dec_len: usize,
}

/// Encoder states of a batch, kept outside any graph for incremental decoding.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub states: Array2<f64>,
    pub mask: Vec<Vec<bool>>,
    pub len: usize,
}

/// Dropout source; `None` runs the model deterministically.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

#[derive(Clone, Debug)]
pub struct Recommender {
    config: RecommenderConfig,
    layout: VocabLayout,
    store: ParamStore,
    embedding: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: Option<LayerNorm>,
    dec_norm: Option<LayerNorm>,
    seq_proj: Linear,
    pref_proj: Linear,
}

#[derive(Serialize, Deserialize)]
struct RecommenderCheckpoint {
    config: RecommenderConfig,
    layout: VocabLayout,
    params: Vec<StoredTensor>,
}

impl Recommender {
    pub fn new(config: RecommenderConfig, layout: VocabLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let embedding = store.add("embedding", normal_init(&[layout.size(), d], std, &mut rng));
        let enc_pos = store.add("enc_pos", normal_init(&[config.max_len * layout.block_len(), d], std, &mut rng));
        let dec_pos = store.add("dec_pos", normal_init(&[layout.block_len(), d], std, &mut rng));
        let ff = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, config.ffn_dim, true, rng),
            down: Linear::new(store, &format!("{name}.down"), config.ffn_dim, d, true, rng),
        };
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("enc.{i}");
                EncoderLayer {
                    norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                    attn: Attention::new(&mut store, &format!("{n}.attn"), &config, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                    ff: ff(&mut store, &format!("{n}.ff"), &mut rng),
                }
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("dec.{i}");
                DecoderLayer {
                    norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                    self_attn: Attention::new(&mut store, &format!("{n}.self"), &config, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                    cross_attn: Attention::new(&mut store, &format!("{n}.cross"), &config, &mut rng),
                    norm3: LayerNorm::new(&mut store, &format!("{n}.norm3"), d),
                    ff: ff(&mut store, &format!("{n}.ff"), &mut rng),
                }
            })
            .collect();
        let enc_norm = config.final_norm.then(|| LayerNorm::new(&mut store, "enc.final_norm", d));
        let dec_norm = config.final_norm.then(|| LayerNorm::new(&mut store, "dec.final_norm", d));
        let seq_proj = Linear::new(&mut store, "seq_proj", d, config.semantic_dim, true, &mut rng);
        let pref_proj = Linear::new(&mut store, "pref_proj", d, config.semantic_dim, true, &mut rng);
        Ok(Self {
            config,
            layout,
            store,
            embedding,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            seq_proj,
            pref_proj,
        })
    }

    pub fn config(&self) -> &RecommenderConfig {
        &self.config
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    pub fn seq_proj(&self) -> &Linear {
        &self.seq_proj
    }

    pub fn pref_proj(&self) -> &Linear {
        &self.pref_proj
    }

    pub fn hash(&self) -> String {
        self.store.content_hash()
    }

    /// Maximum encoder length in tokens.
    pub fn max_tokens(&self) -> usize {
        self.config.max_len * self.layout.block_len()
    }

    fn check_tokens(&self, seqs: &[TokenSequence], positions: usize) -> Result<usize> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap();
        if len == 0 {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if len > positions {
            return Err(Error::InvalidInput(format!("sequence of {len} tokens exceeds {positions} positions")));
        }
        let vocab = self.layout.size();
        for s in seqs {
            if let Some(&t) = s.ids.iter().find(|&&t| t >= vocab) {
                return Err(Error::OutOfVocabulary { token: t, vocab });
            }
        }
        Ok(len)
    }

    fn embed(&self, g: &mut Graph, p: &Bound, seqs: &[TokenSequence], len: usize, pos: ParamId) -> Var {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.padded(len).ids).collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok = g.gather_rows(p[self.embedding], &ids);
        let pe = g.gather_rows(p[pos], &positions);
        g.add(tok, pe)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut DropoutRng) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(r) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = g.value(x).mapv(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Multi-head attention of `x_q: [B·Tq, d]` over `x_kv: [B·Tk, d]` with an
    /// additive bias `[B, Tq, Tk]` (0 or a large negative value).
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        a: &Attention,
        x_q: Var,
        x_kv: Var,
        bias: &ArrayD<f64>,
        dims: (usize, usize, usize),
        rng: &mut DropoutRng,
    ) -> Var {
        let (b, tq, tk) = dims;
        let (h, hd) = (self.config.heads, self.config.head_dim);
        let split = |g: &mut Graph, x: Var, t: usize| {
            let x = g.reshape(x, &[b, t, h, hd]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * h, t, hd])
        };
        let q = a.q.forward(g, p, x_q);
        let q = split(g, q, tq);
        let k = a.k.forward(g, p, x_kv);
        let k = split(g, k, tk);
        let v = a.v.forward(g, p, x_kv);
        let v = split(g, v, tk);
        let scores = g.batch_matmul(q, k, true);
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let scores = g.add_const(scores, bias);
        let attn = g.softmax(scores);
        let attn = self.dropout(g, attn, rng);
        let ctx = g.batch_matmul(attn, v, false);
        let ctx = g.reshape(ctx, &[b, h, tq, hd]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b * tq, h * hd]);
        a.o.forward(g, p, ctx)
    }

    fn feed_forward(&self, g: &mut Graph, p: &Bound, f: &FeedForward, x: Var, rng: &mut DropoutRng) -> Var {
        let hdn = f.up.forward(g, p, x);
        let hdn = g.relu(hdn);
        let hdn = self.dropout(g, hdn, rng);
        f.down.forward(g, p, hdn)
    }

    /// Additive attention bias `[B·heads, Tq, Tk]`.
    fn attention_bias(&self, key_mask: &[Vec<bool>], tq: usize, causal: bool) -> ArrayD<f64> {
        let b = key_mask.len();
        let tk = key_mask[0].len();
        let h = self.config.heads;
        ArrayD::from_shape_fn(IxDyn(&[b * h, tq, tk]), |ix| {
            let (bi, i, j) = (ix[0] / h, ix[1], ix[2]);
            if !key_mask[bi][j] || (causal && j > i) {
                MASKED
            } else {
                0.0
            }
        })
    }

    /// `H^E` of a batch, `[B·T, d]`.
    pub fn embed_and_encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        seqs: &[TokenSequence],
        rng: &mut DropoutRng,
    ) -> Result<(Var, Vec<Vec<bool>>, usize)> {
        let len = self.check_tokens(seqs, self.max_tokens())?;
        let masks: Vec<Vec<bool>> = seqs.iter().map(|s| s.padded(len).mask).collect();
        if masks.iter().any(|m| !m.iter().any(|&v| v)) {
            return Err(Error::InvalidInput("fully masked input sequence".into()));
        }
        let bias = self.attention_bias(&masks, len, false);
        let mut x = self.embed(g, p, seqs, len, self.enc_pos);
        let b = seqs.len();
        for layer in &self.encoder {
            let hn = layer.norm1.forward(g, p, x);
            let a = self.attention(g, p, &layer.attn, hn, hn, &bias, (b, len, len), rng);
            let a = self.dropout(g, a, rng);
            x = g.add(x, a);
            let hn = layer.norm2.forward(g, p, x);
            let f = self.feed_forward(g, p, &layer.ff, hn, rng);
            let f = self.dropout(g, f, rng);
            x = g.add(x, f);
        }
        if let Some(n) = &self.enc_norm {
            x = n.forward(g, p, x);
        }
        Ok((x, masks, len))
    }

    /// Decoder states and tied logits for prefixes starting with BOS.
    /// `enc` is `[B·Tk, d]`, one encoder block per prefix.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: Var,
        enc_mask: &[Vec<bool>],
        enc_len: usize,
        prefixes: &[Vec<usize>],
        rng: &mut DropoutRng,
    ) -> Result<(Var, Var, usize)> {
        let seqs: Vec<TokenSequence> = prefixes
            .iter()
            .map(|pr| TokenSequence { ids: pr.clone(), mask: vec![true; pr.len()] })
            .collect();
        if prefixes.iter().any(|pr| pr.first() != Some(&BOS)) {
            return Err(Error::InvalidInput("decoder prefix must start with BOS".into()));
        }
        let len = self.check_tokens(&seqs, self.layout.block_len())?;
        if prefixes.iter().any(|pr| pr.len() != len) {
            return Err(Error::InvalidInput("decoder prefixes must share one length".into()));
        }
        let b = prefixes.len();
        let self_mask = vec![vec![true; len]; b];
        let self_bias = self.attention_bias(&self_mask, len, true);
        let cross_bias = self.attention_bias(enc_mask, len, false);
        let mut x = self.embed(g, p, &seqs, len, self.dec_pos);
        for layer in &self.decoder {
            let hn = layer.norm1.forward(g, p, x);
            let a = self.attention(g, p, &layer.self_attn, hn, hn, &self_bias, (b, len, len), rng);
            let a = self.dropout(g, a, rng);
            x = g.add(x, a);
            let hn = layer.norm2.forward(g, p, x);
            let c = self.attention(g, p, &layer.cross_attn, hn, enc, &cross_bias, (b, len, enc_len), rng);
            let c = self.dropout(g, c, rng);
            x = g.add(x, c);
            let hn = layer.norm3.forward(g, p, x);
            let f = self.feed_forward(g, p, &layer.ff, hn, rng);
            let f = self.dropout(g, f, rng);
            x = g.add(x, f);
        }
        if let Some(n) = &self.dec_norm {
            x = n.forward(g, p, x);
        }
        let logits = g.matmul(x, p[self.embedding], true);
        Ok((x, logits, len))
    }

    /// Full teacher-forced pass: histories in, per-position logits out.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &[TokenSequence],
        decoder_inputs: &[Vec<usize>],
        rng: &mut DropoutRng,
    ) -> Result<RecommenderOutput> {
        if inputs.len() != decoder_inputs.len() {
            return Err(Error::InvalidInput("one decoder input per sequence".into()));
        }
        let (enc, masks, enc_len) = self.embed_and_encode(g, p, inputs, rng)?;
        let (dec, logits, dec_len) = self.decode(g, p, enc, &masks, enc_len, decoder_inputs, rng)?;
        Ok(RecommenderOutput {
            encoder_states: enc,
            enc_mask: masks,
            decoder_states: dec,
            logits,
            batch: inputs.len(),
            enc_len,
            dec_len,
        })
    }

    /// Masked mean of `H^E` followed by the sequence projection, `[B, d_s]`.
    pub fn project_sequence_state(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: Var,
        masks: &[Vec<bool>],
    ) -> Result<Var> {
        let pooled = masked_mean(g, enc, masks)?;
        Ok(self.seq_proj.forward(g, p, pooled))
    }

    /// BOS-position decoder state followed by the preference projection, `[B, d_s]`.
    pub fn preference_state(&self, g: &mut Graph, p: &Bound, dec: Var, batch: usize, dec_len: usize) -> Var {
        let rows: Vec<usize> = (0..batch).map(|b| b * dec_len).collect();
        let first = g.gather_rows(dec, &rows);
        self.pref_proj.forward(g, p, first)
    }

    /// Deterministic encoding for decoding loops.
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<EncodedBatch> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let (enc, mask, len) = self.embed_and_encode(&mut g, &p, seqs, &mut None)?;
        let states = g.value(enc).clone().into_dimensionality().unwrap();
        Ok(EncodedBatch { states, mask, len })
    }

    /// Next-token logits `[N, V]` for equal-length prefixes; `rows[i]` picks
    /// the encoded sequence each prefix attends to.
    pub fn next_token_logits(&self, enc: &EncodedBatch, rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let t = enc.len;
        let d = self.config.d_model;
        let mut states = Array2::<f64>::zeros((rows.len() * t, d));
        for (i, &r) in rows.iter().enumerate() {
            states
                .slice_mut(ndarray::s![i * t..(i + 1) * t, ..])
                .assign(&enc.states.slice(ndarray::s![r * t..(r + 1) * t, ..]));
        }
        let masks: Vec<Vec<bool>> = rows.iter().map(|&r| enc.mask[r].clone()).collect();
        let ev = g.constant(states.into_dyn());
        let (_, logits, len) = self.decode(&mut g, &p, ev, &masks, t, prefixes, &mut None)?;
        let lv = g.value(logits).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = self.layout.size();
        let mut out = Array2::<f64>::zeros((rows.len(), v));
        for i in 0..rows.len() {
            out.row_mut(i).assign(&lv.row(i * len + len - 1));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = RecommenderCheckpoint { config: self.config.clone(), layout: self.layout, params: self.store.to_stored() };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: RecommenderCheckpoint = serde_json::from_reader(BufReader::new(file))?;
        let mut rec = Self::new(ckpt.config, ckpt.layout, 0)?;
        rec.store.load_stored(&ckpt.params).map_err(Error::Checkpoint)?;
        Ok(rec)
    }
}

/// Per-row mean over unmasked positions of `x: [B·T, d]`, as a product with
/// a constant pooling matrix.
pub fn masked_mean(g: &mut Graph, x: Var, masks: &[Vec<bool>]) -> Result<Var> {
    let b = masks.len();
    let t = masks.first().map_or(0, |m| m.len());
    let mut pool = Array2::<f64>::zeros((b, b * t));
    for (i, m) in masks.iter().enumerate() {
        let n = m.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(Error::InvalidInput("cannot pool a fully masked sequence".into()));
        }
        for (j, _) in m.iter().enumerate().filter(|(_, &v)| v) {
            pool[[i, i * t + j]] = 1.0 / n as f64;
        }
    }
    let pv = g.constant(pool.into_dyn());
    Ok(g.matmul(pv, x, false))
}

/// Batch-mean of summed per-position negative log-likelihoods.
/// `logits: [B·T, V]`, `targets[b]` has `T` entries.
pub fn rec_loss(g: &mut Graph, logits: Var, targets: &[Vec<usize>]) -> Var {
    let flat: Vec<usize> = targets.iter().flatten().copied().collect();
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, &flat);
    let total = g.sum(picked);
    g.scale(total, -1.0 / targets.len() as f64)
}
