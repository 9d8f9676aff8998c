//! Interaction-log ingestion, k-core filtering, leave-one-out splitting and
//! item embedding tables.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user's chronologically ordered interactions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub items: Vec<String>,
    pub timestamps: Option<Vec<i64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionCorpus {
    pub users: Vec<UserRecord>,
}

impl InteractionCorpus {
    /// Builds a corpus from already ordered sequences (no timestamps).
    pub fn from_sequences<U, I>(seqs: impl IntoIterator<Item = (U, Vec<I>)>) -> Self
    where
        U: Into<String>,
        I: Into<String>,
    {
        let users = seqs
            .into_iter()
            .map(|(u, items)| UserRecord {
                user_id: u.into(),
                items: items.into_iter().map(Into::into).collect(),
                timestamps: None,
            })
            .collect();
        Self { users }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    /// Item vocabulary in ascending id order.
    pub fn vocab(&self) -> ItemVocab {
        ItemVocab::new(self.users.iter().flat_map(|u| u.items.iter().cloned()))
    }

    pub fn num_items(&self) -> usize {
        self.vocab().len()
    }

    /// Fraction of the user × item matrix that is empty.
    pub fn sparsity(&self) -> f64 {
        let cells = self.num_users() as f64 * self.num_items() as f64;
        if cells == 0.0 {
            return 1.0;
        }
        1.0 - self.num_interactions() as f64 / cells
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            users: self.num_users(),
            items: self.num_items(),
            interactions: self.num_interactions(),
            sparsity: self.sparsity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

/// Dense indexing of item ids, sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemVocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemVocab {
    pub fn new(ids: impl IntoIterator<Item = String>) -> Self {
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Reads a tab-separated `user_id, item_id, timestamp` file.
///
/// Sequences are sorted by timestamp with ties kept in file order; users
/// appear in order of first occurrence.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_interactions<R: BufRead>(reader: R) -> Result<InteractionCorpus> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, String)>> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io("<interactions>", e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Malformed {
                line: line_no,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(Error::Malformed { line: line_no, reason: "empty user or item id".into() });
        }
        let ts: i64 = fields[2].trim().parse().map_err(|_| Error::Malformed {
            line: line_no,
            reason: format!("timestamp `{}` is not an integer", fields[2].trim()),
        })?;
        let entry = rows.entry(user.to_string()).or_insert_with(|| {
            order.push(user.to_string());
            Vec::new()
        });
        entry.push((ts, item.to_string()));
    }
    if order.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let users = order
        .into_iter()
        .map(|user_id| {
            let mut seq = rows.remove(&user_id).unwrap_or_default();
            // stable: equal timestamps keep file order
            seq.sort_by_key(|(ts, _)| *ts);
            let (timestamps, items) = seq.into_iter().unzip();
            UserRecord { user_id, items, timestamps: Some(timestamps) }
        })
        .collect();
    Ok(InteractionCorpus { users })
}

/// Writes the corpus back in the interaction-file format. Users without
/// timestamps get their sequence positions instead.
pub fn write_interactions(corpus: &InteractionCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in &corpus.users {
        for (i, item) in u.items.iter().enumerate() {
            let ts = u.timestamps.as_ref().map_or(i as i64, |t| t[i]);
            writeln!(w, "{}\t{}\t{}", u.user_id, item, ts).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Users and items dropped by one round of k-core filtering.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KCoreRound {
    pub removed_users: Vec<String>,
    pub removed_items: Vec<String>,
}

/// One simultaneous removal round: every user and every item whose degree is
/// below `k` at the start of the round is dropped.
pub fn k_core_round(corpus: &InteractionCorpus, k: usize) -> (InteractionCorpus, KCoreRound) {
    let mut item_degree: HashMap<&str, usize> = HashMap::new();
    for u in &corpus.users {
        for it in &u.items {
            *item_degree.entry(it.as_str()).or_default() += 1;
        }
    }
    let mut round = KCoreRound::default();
    let mut removed_items: Vec<String> =
        item_degree.iter().filter(|(_, &d)| d < k).map(|(i, _)| i.to_string()).collect();
    removed_items.sort();
    let mut users = Vec::with_capacity(corpus.users.len());
    for u in &corpus.users {
        if u.items.len() < k {
            round.removed_users.push(u.user_id.clone());
            continue;
        }
        let keep: Vec<bool> = u.items.iter().map(|i| item_degree[i.as_str()] >= k).collect();
        let items = u.items.iter().zip(&keep).filter(|(_, &k)| k).map(|(i, _)| i.clone()).collect();
        let timestamps = u
            .timestamps
            .as_ref()
            .map(|ts| ts.iter().zip(&keep).filter(|(_, &k)| k).map(|(t, _)| *t).collect());
        users.push(UserRecord { user_id: u.user_id.clone(), items, timestamps });
    }
    round.removed_items = removed_items;
    (InteractionCorpus { users }, round)
}

/// Iterated k-core filter; stops at the fixed point.
pub fn apply_k_core(corpus: &InteractionCorpus, k: usize) -> Result<InteractionCorpus> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut current = corpus.clone();
    loop {
        let (next, round) = k_core_round(&current, k);
        current = next;
        if round.removed_users.is_empty() && round.removed_items.is_empty() {
            break;
        }
    }
    current.users.retain(|u| !u.items.is_empty());
    if current.users.is_empty() {
        return Err(Error::EmptyAfterFilter { k });
    }
    Ok(current)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitExample {
    pub user_id: String,
    pub input_items: Vec<String>,
    pub target_item: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default)]
pub struct SplitSet {
    pub examples: Vec<SplitExample>,
    /// Users with fewer than 3 interactions.
    pub skipped_users: usize,
}

impl SplitSet {
    pub fn of(&self, split: Split) -> impl Iterator<Item = &SplitExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }
}

fn truncate_tail(items: &[String], max_len: usize) -> Vec<String> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

/// Leave-one-out split: last item is test, second-to-last is validation and
/// every earlier position is a training target.
pub fn split_leave_one_out(corpus: &InteractionCorpus, max_len: usize) -> SplitSet {
    assert!(max_len > 0, "max_len must be positive");
    let mut out = SplitSet::default();
    for u in &corpus.users {
        let n = u.items.len();
        if n < 3 {
            out.skipped_users += 1;
            continue;
        }
        for t in 1..n - 2 {
            out.examples.push(SplitExample {
                user_id: u.user_id.clone(),
                input_items: truncate_tail(&u.items[..t], max_len),
                target_item: u.items[t].clone(),
                split: Split::Train,
            });
        }
        out.examples.push(SplitExample {
            user_id: u.user_id.clone(),
            input_items: truncate_tail(&u.items[..n - 2], max_len),
            target_item: u.items[n - 2].clone(),
            split: Split::Valid,
        });
        out.examples.push(SplitExample {
            user_id: u.user_id.clone(),
            input_items: truncate_tail(&u.items[..n - 1], max_len),
            target_item: u.items[n - 1].clone(),
            split: Split::Test,
        });
    }
    if out.skipped_users > 0 {
        warn!("skipped {} user(s) with fewer than 3 interactions", out.skipped_users);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord<'a> {
    user_id: &'a str,
    split: Split,
    input_len: usize,
    target: &'a str,
}

/// One JSON record per line: user_id, split, input length, target.
pub fn write_split_manifest(splits: &SplitSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &splits.examples {
        let rec = ManifestRecord {
            user_id: &e.user_id,
            split: e.split,
            input_len: e.input_items.len(),
            target: &e.target_item,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-item semantic vectors, rows aligned with an ascending [`ItemVocab`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: ItemVocab,
    rows: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(vocab: ItemVocab, rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() != vocab.len() {
            return Err(Error::EmbeddingFormat(format!(
                "{} rows for {} items",
                rows.nrows(),
                vocab.len()
            )));
        }
        if rows.ncols() == 0 {
            return Err(Error::EmbeddingFormat("dimension must be positive".into()));
        }
        Ok(Self { vocab, rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn vocab(&self) -> &ItemVocab {
        &self.vocab
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn get(&self, item_id: &str) -> Option<ArrayView1<'_, f64>> {
        self.vocab.index_of(item_id).map(|i| self.rows.row(i))
    }

    /// Scales each row to unit L2 norm; all-zero rows are an error.
    pub fn l2_normalize(&mut self) -> Result<()> {
        for (i, mut row) in self.rows.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::EmbeddingFormat(format!(
                    "item `{}` has an all-zero embedding",
                    self.vocab.id(i)
                )));
            }
            row /= norm;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    /// Header line, then `id v1 .. vD` per line.
    Text,
    /// Header line, then per row: u32 LE id length, id bytes, D little-endian f32.
    Binary,
}

impl EmbeddingFormat {
    /// `.bin` files are binary; anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => EmbeddingFormat::Binary,
            _ => EmbeddingFormat::Text,
        }
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::EmbeddingFormat(format!("header must be `N D`, found `{}`", line.trim())));
    }
    let n = parts[0].parse().map_err(|_| Error::EmbeddingFormat(format!("bad row count `{}`", parts[0])))?;
    let d: usize = parts[1].parse().map_err(|_| Error::EmbeddingFormat(format!("bad dimension `{}`", parts[1])))?;
    if d == 0 {
        return Err(Error::EmbeddingFormat("dimension must be positive".into()));
    }
    Ok((n, d))
}

fn read_raw_embeddings(path: &Path) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let (n, d) = parse_header(&header)?;
    let mut rows = Vec::with_capacity(n);
    match EmbeddingFormat::from_path(path) {
        EmbeddingFormat::Text => {
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let id = parts.next().unwrap().to_string();
                let values: Vec<f64> = parts
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Malformed { line: i + 2, reason: "non-numeric embedding value".into() })?;
                if values.len() != d {
                    return Err(Error::EmbeddingFormat(format!(
                        "row for `{id}` has {} values, header says {d}",
                        values.len()
                    )));
                }
                rows.push((id, values));
            }
        }
        EmbeddingFormat::Binary => {
            for _ in 0..n {
                let len = reader
                    .read_u32::<LittleEndian>()
                    .map_err(|_| Error::EmbeddingFormat("truncated binary row".into()))?;
                let mut id = vec![0u8; len as usize];
                reader.read_exact(&mut id).map_err(|_| Error::EmbeddingFormat("truncated item id".into()))?;
                let id = String::from_utf8(id).map_err(|_| Error::EmbeddingFormat("item id is not UTF-8".into()))?;
                let mut values = Vec::with_capacity(d);
                for _ in 0..d {
                    let v = reader
                        .read_f32::<LittleEndian>()
                        .map_err(|_| Error::EmbeddingFormat(format!("row for `{id}` is shorter than {d} values")))?;
                    values.push(v as f64);
                }
                rows.push((id, values));
            }
            let mut rest = Vec::new();
            reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
            if !rest.is_empty() {
                return Err(Error::EmbeddingFormat(format!("{} trailing bytes after {n} rows", rest.len())));
            }
        }
    }
    if rows.len() != n {
        return Err(Error::EmbeddingFormat(format!("header says {n} rows, found {}", rows.len())));
    }
    Ok((d, rows))
}

/// Loads item embeddings covering exactly the corpus item set. Rows for
/// items outside the corpus are ignored.
pub fn load_embeddings(path: impl AsRef<Path>, corpus: &InteractionCorpus, normalize: bool) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let (dim, raw) = read_raw_embeddings(path)?;
    let lookup: HashMap<String, Vec<f64>> = raw.into_iter().collect();
    let vocab = corpus.vocab();
    let missing: Vec<&String> = vocab.ids().iter().filter(|id| !lookup.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings {
            count: missing.len(),
            examples: missing.iter().take(10).map(|s| s.to_string()).collect(),
        });
    }
    let mut rows = Array2::zeros((vocab.len(), dim));
    for (i, id) in vocab.ids().iter().enumerate() {
        for (j, v) in lookup[id].iter().enumerate() {
            rows[[i, j]] = *v;
        }
    }
    let mut table = EmbeddingTable::new(vocab, rows)?;
    if normalize {
        table.l2_normalize()?;
    }
    Ok(table)
}

pub fn write_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {}", table.len(), table.dim()).map_err(io)?;
    match EmbeddingFormat::from_path(path) {
        EmbeddingFormat::Text => {
            for (i, id) in table.vocab.ids().iter().enumerate() {
                write!(w, "{id}").map_err(io)?;
                for v in table.rows.row(i) {
                    write!(w, " {v}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
        }
        EmbeddingFormat::Binary => {
            for (i, id) in table.vocab.ids().iter().enumerate() {
                w.write_u32::<LittleEndian>(id.len() as u32).map_err(io)?;
                w.write_all(id.as_bytes()).map_err(io)?;
                for v in table.rows.row(i) {
                    w.write_f32::<LittleEndian>(*v as f32).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

/// Symmetric item co-occurrence counts within a sliding window.
///
/// Items at positions `i < j` of one sequence co-occur when `j - i < window`.
/// The diagonal holds each item's interaction count.
pub fn cooccurrence(corpus: &InteractionCorpus, vocab: &ItemVocab, window: usize) -> BTreeMap<(usize, usize), f64> {
    let mut counts = BTreeMap::new();
    for u in &corpus.users {
        let idx: Vec<usize> = u.items.iter().map(|i| vocab.index_of(i).expect("item in vocab")).collect();
        for i in 0..idx.len() {
            *counts.entry((idx[i], idx[i])).or_insert(0.0) += 1.0;
            for j in i + 1..idx.len().min(i + window) {
                let (a, b) = (idx[i], idx[j]);
                if a == b {
                    continue;
                }
                *counts.entry((a, b)).or_insert(0.0) += 1.0;
                *counts.entry((b, a)).or_insert(0.0) += 1.0;
            }
        }
    }
    counts
}

/// Result of a truncated SVD `M ≈ factors · rightᵀ`, with
/// `factors = U_k · diag(σ_k)`.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub factors: Array2<f64>,
    pub right: Array2<f64>,
    pub singular_values: Vec<f64>,
}

const DENSE_SVD_LIMIT: usize = 2048;

/// Truncated SVD of a square sparse matrix given as `(row, col) → value`.
/// Dimensions beyond the numerical rank are zero-padded.
pub fn truncated_svd(n: usize, entries: &BTreeMap<(usize, usize), f64>, dim: usize, seed: u64) -> TruncatedSvd {
    let (u, s, v) = if n <= DENSE_SVD_LIMIT {
        let mut m = DMatrix::<f64>::zeros(n, n);
        for (&(i, j), &x) in entries {
            m[(i, j)] = x;
        }
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let k = dim.min(order.len());
        let mut uk = DMatrix::zeros(n, k);
        let mut vk = DMatrix::zeros(n, k);
        let mut sk = Vec::with_capacity(k);
        for (c, &o) in order.iter().take(k).enumerate() {
            uk.set_column(c, &u.column(o));
            vk.set_column(c, &vt.row(o).transpose());
            sk.push(svd.singular_values[o]);
        }
        (uk, sk, vk)
    } else {
        randomized_svd(n, entries, dim, seed)
    };
    let smax = s.first().copied().unwrap_or(0.0);
    let tol = smax * n as f64 * f64::EPSILON;
    let mut factors = Array2::zeros((n, dim));
    let mut right = Array2::zeros((n, dim));
    let mut singular_values = vec![0.0; dim];
    let mut rank = 0;
    for c in 0..s.len().min(dim) {
        if s[c] <= tol {
            continue;
        }
        rank += 1;
        singular_values[c] = s[c];
        for r in 0..n {
            factors[[r, c]] = u[(r, c)] * s[c];
            right[[r, c]] = v[(r, c)];
        }
    }
    if rank < dim {
        warn!("co-occurrence rank {rank} is below the requested dimension {dim}; padding with zeros");
    }
    TruncatedSvd { factors, right, singular_values }
}

fn sparse_mul(n: usize, entries: &BTreeMap<(usize, usize), f64>, x: &DMatrix<f64>, transpose: bool) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, x.ncols());
    for (&(i, j), &v) in entries {
        let (r, c) = if transpose { (j, i) } else { (i, j) };
        for k in 0..x.ncols() {
            out[(r, k)] += v * x[(c, k)];
        }
    }
    out
}

/// Randomized range finder with power iterations, for catalogs too large
/// for a dense decomposition.
fn randomized_svd(
    n: usize,
    entries: &BTreeMap<(usize, usize), f64>,
    dim: usize,
    seed: u64,
) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let width = (dim + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = sparse_mul(n, entries, &omega, false).qr().q();
    for _ in 0..5 {
        let z = sparse_mul(n, entries, &q, true).qr().q();
        q = sparse_mul(n, entries, &z, false).qr().q();
    }
    // B = Qᵀ M, computed as (Mᵀ Q)ᵀ
    let b = sparse_mul(n, entries, &q, true).transpose();
    let svd = b.svd(true, true);
    let ub = q * svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &c| svd.singular_values[c].total_cmp(&svd.singular_values[a]).then(a.cmp(&c)));
    let k = dim.min(order.len());
    let mut uk = DMatrix::zeros(n, k);
    let mut vk = DMatrix::zeros(n, k);
    let mut sk = Vec::with_capacity(k);
    for (c, &o) in order.iter().take(k).enumerate() {
        uk.set_column(c, &ub.column(o));
        vk.set_column(c, &v.column(o));
        sk.push(svd.singular_values[o]);
    }
    (uk, sk, vk)
}

/// Item embeddings from a truncated SVD of the windowed co-occurrence matrix.
pub fn derive_embeddings_svd(corpus: &InteractionCorpus, dim: usize, window: usize) -> Result<EmbeddingTable> {
    let vocab = corpus.vocab();
    if dim == 0 || dim > vocab.len() {
        return Err(Error::Config(format!(
            "embedding dimension {dim} must be in 1..={} (the item count)",
            vocab.len()
        )));
    }
    let counts = cooccurrence(corpus, &vocab, window);
    let svd = truncated_svd(vocab.len(), &counts, dim, 0x5eed);
    EmbeddingTable::new(vocab, svd.factors)
}
