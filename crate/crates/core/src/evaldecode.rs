//! Trie-constrained beam search and ranking metrics.

use std::collections::BTreeMap;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::log_softmax_in_place;
use crate::data::SplitExample;
use crate::error::{Error, Result};
use crate::recommender::{EncodedBatch, Recommender, TokenSequence, VocabLayout, BOS};
use crate::tokenizer::{IdentifierMap, Tokenizer};

/// A model that scores next tokens given an encoded input and a prefix.
pub trait GenerativeModel {
    type Encoded;

    fn vocab_size(&self) -> usize;

    fn encode(&self, inputs: &[TokenSequence]) -> Result<Self::Encoded>;

    /// Logits `[N, V]`; prefix `i` (starting with BOS) belongs to input `rows[i]`.
    fn next_token_logits(&self, enc: &Self::Encoded, rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Array2<f64>>;
}

impl GenerativeModel for Recommender {
    type Encoded = EncodedBatch;

    fn vocab_size(&self) -> usize {
        self.layout().size()
    }

    fn encode(&self, inputs: &[TokenSequence]) -> Result<EncodedBatch> {
        self.encode_batch(inputs)
    }

    fn next_token_logits(&self, enc: &EncodedBatch, rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Array2<f64>> {
        Recommender::next_token_logits(self, enc, rows, prefixes)
    }
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    item: Option<usize>,
}

/// Prefix tree over identifier token sequences; leaves name one item each.
#[derive(Clone, Debug)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    items: Vec<String>,
    depth: usize,
}

impl PrefixTrie {
    /// Builds from `(token sequence, item id)` pairs of one common length.
    pub fn from_sequences(entries: impl IntoIterator<Item = (Vec<usize>, String)>) -> Result<Self> {
        let mut trie = Self { nodes: vec![TrieNode::default()], items: Vec::new(), depth: 0 };
        for (seq, item) in entries {
            if trie.items.is_empty() {
                trie.depth = seq.len();
            } else if seq.len() != trie.depth {
                return Err(Error::InvalidInput("identifiers differ in length".into()));
            }
            let mut node = 0;
            for &t in &seq {
                node = match trie.nodes[node].children.get(&t) {
                    Some(&c) => c,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let c = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(t, c);
                        c
                    }
                };
            }
            if trie.nodes[node].item.is_some() {
                return Err(Error::DuplicateIdentifier(seq));
            }
            trie.nodes[node].item = Some(trie.items.len());
            trie.items.push(item);
        }
        Ok(trie)
    }

    /// Trie of vocabulary-id identifiers for every item of the map.
    pub fn build(ids: &IdentifierMap, layout: &VocabLayout) -> Result<Self> {
        Self::from_sequences(ids.identifiers().iter().map(|id| (layout.item_tokens(id), id.item_id.clone())))
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.item.is_some()).count()
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &c)| (t, c))
    }

    /// Item at the end of a full token path, if any.
    pub fn lookup(&self, seq: &[usize]) -> Option<&str> {
        let mut node = 0;
        for t in seq {
            node = *self.nodes[node].children.get(t)?;
        }
        self.nodes[node].item.map(|i| self.items[i].as_str())
    }

    /// Every `(token sequence, item)` pair in ascending token order.
    pub fn sequences(&self) -> Vec<(Vec<usize>, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(i) = self.nodes[node].item {
                out.push((path.clone(), self.items[i].clone()));
            }
            for (&t, &c) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub items: Vec<String>,
    pub tokens: Vec<Vec<usize>>,
    /// Summed token log-probabilities, non-increasing.
    pub scores: Vec<f64>,
}

impl RankingResult {
    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: &str) -> Option<usize> {
        self.items.iter().position(|i| i == item).map(|p| p + 1)
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    node: usize,
}

fn by_score_then_tokens(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Constrained beam search for every encoded input.
pub fn beam_search_batch<M: GenerativeModel>(
    model: &M,
    encoded: &M::Encoded,
    batch: usize,
    trie: &PrefixTrie,
    beam: usize,
) -> Result<Vec<RankingResult>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    if trie.num_items() == 0 {
        return Err(Error::InvalidInput("cannot decode over an empty catalog".into()));
    }
    if beam > trie.num_items() {
        warn!("beam {beam} exceeds the catalog of {} items; rankings are shortened", trie.num_items());
    }
    let mut beams: Vec<Vec<Hypothesis>> = vec![vec![Hypothesis { tokens: Vec::new(), score: 0.0, node: 0 }]; batch];
    for _ in 0..trie.depth() {
        let mut rows = Vec::new();
        let mut prefixes = Vec::new();
        for (b, hyps) in beams.iter().enumerate() {
            for h in hyps {
                rows.push(b);
                let mut p = vec![BOS];
                p.extend(&h.tokens);
                prefixes.push(p);
            }
        }
        let logits = model.next_token_logits(encoded, &rows, &prefixes)?;
        if logits.ncols() != model.vocab_size() {
            return Err(Error::InvalidInput("model returned logits of the wrong width".into()));
        }
        let mut flat = 0;
        for hyps in beams.iter_mut() {
            let mut next = Vec::new();
            for h in hyps.iter() {
                let mut lp = logits.row(flat).to_vec();
                flat += 1;
                log_softmax_in_place(&mut lp);
                for (t, child) in trie.children(h.node) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t);
                    next.push(Hypothesis { tokens, score: h.score + lp[t], node: child });
                }
            }
            next.sort_by(by_score_then_tokens);
            next.truncate(beam);
            *hyps = next;
        }
    }
    Ok(beams
        .into_iter()
        .map(|hyps| {
            let items = hyps.iter().map(|h| trie.lookup(&h.tokens).expect("complete path").to_string()).collect();
            let scores = hyps.iter().map(|h| h.score).collect();
            RankingResult { items, tokens: hyps.into_iter().map(|h| h.tokens).collect(), scores }
        })
        .collect())
}

pub fn beam_search<M: GenerativeModel>(
    model: &M,
    input: &TokenSequence,
    trie: &PrefixTrie,
    beam: usize,
) -> Result<RankingResult> {
    let enc = model.encode(std::slice::from_ref(input))?;
    Ok(beam_search_batch(model, &enc, 1, trie, beam)?.remove(0))
}

/// Scores every identifier in the trie one prefix at a time and sorts the
/// result the same way beam search does.
pub fn exhaustive_ranking<M: GenerativeModel>(model: &M, input: &TokenSequence, trie: &PrefixTrie) -> Result<RankingResult> {
    let enc = model.encode(std::slice::from_ref(input))?;
    let mut hyps = Vec::new();
    for (seq, _) in trie.sequences() {
        let mut score = 0.0;
        for step in 0..seq.len() {
            let mut prefix = vec![BOS];
            prefix.extend(&seq[..step]);
            let mut lp = model.next_token_logits(&enc, &[0], &[prefix])?.row(0).to_vec();
            log_softmax_in_place(&mut lp);
            score += lp[seq[step]];
        }
        hyps.push(Hypothesis { tokens: seq, score, node: 0 });
    }
    hyps.sort_by(by_score_then_tokens);
    Ok(RankingResult {
        items: hyps.iter().map(|h| trie.lookup(&h.tokens).unwrap().to_string()).collect(),
        scores: hyps.iter().map(|h| h.score).collect(),
        tokens: hyps.into_iter().map(|h| h.tokens).collect(),
    })
}

pub fn recall_at_k(ranked: &RankingResult, target: &str, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &RankingResult, target: &str, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub users: usize,
    /// Examples dropped because the target is outside the catalog.
    pub skipped: usize,
    pub beam: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub beam: usize,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![5, 10], beam: 20, batch_size: 64 }
    }
}

/// Mean Recall@K and NDCG@K over `(input, target item)` cases.
pub fn evaluate_model<M: GenerativeModel>(
    model: &M,
    trie: &PrefixTrie,
    cases: &[(TokenSequence, String)],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut recall: BTreeMap<usize, f64> = opts.ks.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg = recall.clone();
    for chunk in cases.chunks(opts.batch_size.max(1)) {
        let inputs: Vec<TokenSequence> = chunk.iter().map(|c| c.0.clone()).collect();
        let enc = model.encode(&inputs)?;
        let ranked = beam_search_batch(model, &enc, chunk.len(), trie, opts.beam)?;
        for (r, (_, target)) in ranked.iter().zip(chunk) {
            for &k in &opts.ks {
                *recall.get_mut(&k).unwrap() += recall_at_k(r, target, k);
                *ndcg.get_mut(&k).unwrap() += ndcg_at_k(r, target, k);
            }
        }
    }
    let n = cases.len().max(1) as f64;
    recall.values_mut().for_each(|v| *v /= n);
    ndcg.values_mut().for_each(|v| *v /= n);
    Ok(EvalReport { users: cases.len(), skipped: 0, beam: opts.beam, recall, ndcg })
}

/// Evaluation cases from split examples; unknown targets are counted and skipped.
pub fn build_cases(
    examples: &[SplitExample],
    ids: &IdentifierMap,
    layout: &VocabLayout,
    max_len: usize,
) -> (Vec<(TokenSequence, String)>, usize) {
    let mut cases = Vec::new();
    let mut skipped = 0;
    for ex in examples {
        if ids.get(&ex.target_item).is_none() {
            skipped += 1;
            continue;
        }
        let items: Vec<usize> = ex.input_items.iter().filter_map(|i| ids.vocab().index_of(i)).collect();
        if items.is_empty() {
            skipped += 1;
            continue;
        }
        cases.push((TokenSequence::from_items(&items, ids, layout, max_len), ex.target_item.clone()));
    }
    if skipped > 0 {
        warn!("{skipped} evaluation examples skipped: target or history outside the catalog");
    }
    (cases, skipped)
}

/// Full-catalog evaluation of a trained recommender under the identifiers
/// of `tokenizer`.
pub fn evaluate(
    model: &Recommender,
    tokenizer: &Tokenizer,
    ids: &IdentifierMap,
    examples: &[SplitExample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let current = tokenizer.hash();
    match &ids.tokenizer_hash {
        Some(h) if *h == current => {}
        other => {
            return Err(Error::StaleIdentifiers {
                map_hash: other.clone().unwrap_or_else(|| "unknown".into()),
                tokenizer_hash: current,
            })
        }
    }
    let trie = PrefixTrie::build(ids, model.layout())?;
    let (cases, skipped) = build_cases(examples, ids, model.layout(), model.config().max_len);
    let mut report = evaluate_model(model, &trie, &cases, opts)?;
    report.skipped = skipped;
    Ok(report)
}
