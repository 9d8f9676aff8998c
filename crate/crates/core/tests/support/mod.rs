//! Checks shared by the integration targets. Every check returns a short
//! detail string on success and a description of the failure otherwise.
#![allow(dead_code)]

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use genrec_core::alignment::{psa_loss, sia_from_distributions, sia_loss, symmetric_kl};
use genrec_core::autograd::Graph;
use genrec_core::data::ItemVocab;
use genrec_core::evaldecode::{beam_search, exhaustive_ranking, ndcg_at_k, recall_at_k, PrefixTrie, RankingResult};
use genrec_core::nn::{ParamId, ParamStore};
use genrec_core::recommender::{rec_loss, teacher_forcing, Recommender, RecommenderConfig, TokenSequence, VocabLayout};
use genrec_core::tokenizer::{quantize, sq_loss, Codebook, IdentifierMap, Tokenizer, TokenizerConfig};

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| n.sample(rng))
}

// ---------------------------------------------------------------- quantization

/// Nearest code by explicit distance loop at every level; the residual
/// descends by the chosen code. Strict `<` keeps the lowest index on ties.
pub fn nearest_descent(r: &[f64], books: &[Vec<Vec<f64>>]) -> Vec<usize> {
    let mut v = r.to_vec();
    let mut out = Vec::new();
    for book in books {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (k, e) in book.iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in v.iter().zip(e) {
                d += (a - b) * (a - b);
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        for (x, e) in v.iter_mut().zip(&book[best]) {
            *x -= e;
        }
        out.push(best);
    }
    out
}

pub fn quantization_oracle(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for i in 0..instances {
        let levels = rng.random_range(1..=3);
        let k = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let books: Vec<Vec<Vec<f64>>> =
            (0..levels).map(|_| (0..k).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect()).collect();
        let r: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let cbs: Vec<Codebook> = books
            .iter()
            .enumerate()
            .map(|(l, b)| Codebook { level: l, vectors: Array2::from_shape_fn((k, d), |(a, c)| b[a][c]) })
            .collect();
        let got = quantize(Array1::from(r.clone()).view(), &cbs).tokens;
        let want = nearest_descent(&r, &books);
        ensure(got == want, || format!("instance {i}: quantize gave {got:?}, nearest descent {want:?}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{instances} instances identical in {secs:.3}s"))
}

// ---------------------------------------------------------------- loss formulas

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, expected {want}"))
}

pub fn loss_formulas() -> Check {
    // sq_loss: one level, residual (1,0) against code (0,0), beta 0.25
    let books = [Codebook { level: 0, vectors: Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 5.0, 5.0]).unwrap() }];
    let r = Array1::from(vec![1.0, 0.0]);
    let q = quantize(r.view(), &books);
    let z = Array1::from(vec![0.3, -0.2, 0.9]);
    let l = sq_loss(z.view(), &q, z.view(), &books, 0.25);
    close("sq_loss L_RQ", l.rq, 1.25, 1e-4)?;
    close("sq_loss L_SQ", l.sq, 1.25, 1e-4)?;
    let hit = quantize(Array1::from(vec![5.0, 5.0]).view(), &books);
    let l0 = sq_loss(z.view(), &hit, z.view(), &books, 0.25);
    close("sq_loss zero case", l0.sq, 0.0, 1e-4)?;

    // sia_loss: the two-code example and the identity case on the tape
    // 0.7311 and 0.2689 are σ(1) and σ(−1) rounded; the worked value uses them unrounded
    let (hi, lo) = (1.0 / (1.0 + (-1f64).exp()), 1.0 / (1.0 + 1f64.exp()));
    let skl = symmetric_kl(&[hi, lo], &[lo, hi]);
    close("symmetric KL", skl, 0.9242, 1e-4)?;
    let sia = sia_from_distributions(&[vec![hi, lo]], &[vec![lo, hi]]);
    close("sia_loss", sia, -0.9242, 1e-4)?;
    let tok = tiny_tokenizer(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zb = normal_array(&[4, 6], &mut rng);
    let mut g = Graph::new();
    let p = tok.store().bind(&mut g, false);
    let zv = g.constant(zb.clone());
    let ze = g.constant(zb);
    let s = sia_loss(&mut g, &tok, &p, zv, ze, false);
    close("sia_loss identity", g.scalar(s), 0.0, 1e-4)?;

    // psa_loss: orthogonal pair and the all-identical batch
    let mut g = Graph::new();
    let h = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zt = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![2.0, 0.0, 0.0, 7.0]).unwrap());
    let v = psa_loss(&mut g, h, zt, 1.0).map_err(|e| e.to_string())?;
    close("psa_loss orthogonal", g.scalar(v), 0.6265, 1e-4)?;
    let same = g.constant(ArrayD::from_elem(IxDyn(&[4, 3]), 0.5));
    let v = psa_loss(&mut g, same, same, 0.07).map_err(|e| e.to_string())?;
    close("psa_loss uniform", g.scalar(v), 2.0 * 4f64.ln(), 1e-4)?;

    // rec_loss: uniform logits, the two-way case and a wide margin
    let (levels, vocab) = (3usize, 11usize);
    let mut g = Graph::new();
    let logits = g.constant(ArrayD::zeros(IxDyn(&[2 * (levels + 1), vocab])));
    let targets = vec![vec![2, 3, 4, 5], vec![6, 7, 8, 9]];
    let v = rec_loss(&mut g, logits, &targets);
    close("rec_loss uniform", g.scalar(v), (levels + 1) as f64 * (vocab as f64).ln(), 1e-4)?;
    let logits = g.constant(ArrayD::zeros(IxDyn(&[1, 2])));
    let v = rec_loss(&mut g, logits, &[vec![1]]);
    close("rec_loss two-way", g.scalar(v), 2f64.ln(), 1e-4)?;
    let mut m = ArrayD::zeros(IxDyn(&[1, 5]));
    m[[0, 3]] = 20.0;
    let logits = g.constant(m);
    let v = rec_loss(&mut g, logits, &[vec![3]]);
    ensure(g.scalar(v) < 1e-6, || format!("rec_loss margin 20: {}", g.scalar(v)))?;
    Ok("sq, sia, psa and rec losses match their worked values".into())
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; blocks whose gradient is below 1e-7 in norm
/// fall back to the absolute difference.
pub fn rel_err(a: &ArrayD<f64>, n: &ArrayD<f64>) -> f64 {
    let diff = (a - n).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(n.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` in every scalar of tensor `id`.
pub fn numeric_grad<M: Clone>(
    model: &M,
    store: fn(&mut M) -> &mut ParamStore,
    id: ParamId,
    f: &dyn Fn(&M) -> f64,
) -> ArrayD<f64> {
    let mut m = model.clone();
    let shape = store(&mut m).get(id).raw_dim();
    let n = store(&mut m).get(id).len();
    let mut out = ArrayD::zeros(shape);
    for i in 0..n {
        let orig = store(&mut m).get(id).as_slice().unwrap()[i];
        store(&mut m).get_mut(id).as_slice_mut().unwrap()[i] = orig + FD_STEP;
        let fp = f(&m);
        store(&mut m).get_mut(id).as_slice_mut().unwrap()[i] = orig - FD_STEP;
        let fm = f(&m);
        store(&mut m).get_mut(id).as_slice_mut().unwrap()[i] = orig;
        out.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    out
}

fn is_zero_block(g: &Option<ArrayD<f64>>) -> bool {
    g.as_ref().is_none_or(|a| a.iter().all(|&v| v == 0.0))
}

fn analytic(g: &Option<ArrayD<f64>>, like: &ArrayD<f64>) -> ArrayD<f64> {
    g.clone().unwrap_or_else(|| ArrayD::zeros(like.raw_dim()))
}

pub fn tiny_tokenizer(seed: u64) -> Tokenizer {
    let cfg = TokenizerConfig {
        levels: 3,
        codebook_size: 5,
        code_dim: 4,
        hidden: vec![7],
        beta: 0.25,
        input_dim: 6,
        suffix_capacity: 8,
        reset_dead_codes: false,
    };
    Tokenizer::new(cfg, seed).unwrap()
}

fn tok_store(t: &mut Tokenizer) -> &mut ParamStore {
    t.store_mut()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Part {
    Encoder,
    Decoder,
    Codebook,
}

fn part_of(store: &ParamStore, id: ParamId) -> Part {
    let name = store.name(id);
    if name.starts_with("encoder") {
        Part::Encoder
    } else if name.starts_with("decoder") {
        Part::Decoder
    } else {
        assert!(name.starts_with("codebook"), "unexpected tensor {name}");
        Part::Codebook
    }
}

/// Base-point quantities frozen by the stop-gradient surrogates.
struct Frozen {
    z: Array2<f64>,
    tokens: Vec<Vec<usize>>,
    residuals: Vec<Vec<Array1<f64>>>,
    codes: Vec<Vec<Array1<f64>>>,
    offset: Array2<f64>,
}

fn freeze(tok: &Tokenizer, z: &Array2<f64>) -> Frozen {
    let r = tok.encode_batch(z.view()).unwrap();
    let books = tok.codebooks();
    let mut tokens = Vec::new();
    let mut residuals = Vec::new();
    let mut codes = Vec::new();
    let mut offset = Array2::zeros(r.dim());
    for (i, row) in r.rows().into_iter().enumerate() {
        let q = quantize(row, &books);
        codes.push(q.tokens.iter().enumerate().map(|(l, &t)| books[l].vectors.row(t).to_owned()).collect());
        offset.row_mut(i).assign(&(&q.quantized - &row));
        tokens.push(q.tokens);
        residuals.push(q.residuals);
    }
    Frozen { z: z.clone(), tokens, residuals, codes, offset }
}

fn tokens_of(tok: &Tokenizer, z: &Array2<f64>) -> Vec<Vec<usize>> {
    tok.tokens_batch(z.view()).unwrap()
}

/// Runs `f` for every tensor and returns the largest relative error,
/// failing when the surrogate would cross a token boundary.
fn compare_tokenizer(
    tok: &Tokenizer,
    grads: &[Option<ArrayD<f64>>],
    parts: &[Part],
    zero_parts: &[Part],
    f: &dyn Fn(&Tokenizer) -> f64,
    label: &str,
) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for id in tok.store().ids() {
        let part = part_of(tok.store(), id);
        let g = &grads[id.0];
        if zero_parts.contains(&part) {
            ensure(is_zero_block(g), || format!("{label}: {} should receive exactly zero gradient", tok.store().name(id)))?;
        }
        if parts.contains(&part) {
            let num = numeric_grad(tok, tok_store, id, f);
            let err = rel_err(&analytic(g, &num), &num);
            ensure(err <= GRAD_TOL, || format!("{label}: {} relative error {err:.2e}", tok.store().name(id)))?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn stable_tokens(tok: &Tokenizer, z: &Array2<f64>, base: &[Vec<usize>]) -> bool {
    tokens_of(tok, z) == base
}

fn tokenizer_instance(seed: u64) -> (Tokenizer, Array2<f64>) {
    let tok = tiny_tokenizer(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let z = normal_array(&[4, 6], &mut rng).into_dimensionality().unwrap();
    (tok, z)
}

/// `L_RECON` through the straight-through path, with `r̃ − r` frozen at the
/// base point; codebooks must receive no reconstruction gradient at all.
pub fn grad_recon(seed: u64) -> Check {
    let (tok, z) = tokenizer_instance(seed);
    let fr = freeze(&tok, &z);
    let mut g = Graph::new();
    let p = tok.store().bind(&mut g, true);
    let zv = g.constant(z.clone().into_dyn());
    let fwd = tok.forward_graph(&mut g, &p, zv);
    let loss = tok.sq_loss_graph(&mut g, zv, &fwd);
    let grads = p.grads(&g.backward(loss.recon));
    let n = z.nrows() as f64;
    let f = |t: &Tokenizer| {
        let r = t.encode_batch(fr.z.view()).unwrap();
        let zt = t.reconstruct_batch((&r + &fr.offset).view());
        (&fr.z - &zt).mapv(|v| v * v).sum() / n
    };
    let err = compare_tokenizer(&tok, &grads, &[Part::Encoder, Part::Decoder], &[Part::Codebook], &f, "L_RECON")?;
    Ok(format!("L_RECON max rel err {err:.1e}"))
}

/// Both `L_RQ` terms: the codebook term must not reach the encoder and the
/// commitment term must not reach the codebooks.
pub fn grad_rq(seed: u64) -> Check {
    let (tok, z) = tokenizer_instance(seed);
    let fr = freeze(&tok, &z);
    let beta = tok.config().beta;
    let n = z.nrows() as f64;
    let mut g = Graph::new();
    let p = tok.store().bind(&mut g, true);
    let zv = g.constant(z.clone().into_dyn());
    let fwd = tok.forward_graph(&mut g, &p, zv);
    let loss = tok.sq_loss_graph(&mut g, zv, &fwd);
    let gcode = p.grads(&g.backward(loss.rq_codebook));
    let gcommit = p.grads(&g.backward(loss.rq_commit));

    // ‖sg[v] − e‖² with the residuals frozen
    let f_code = |t: &Tokenizer| {
        let books = t.codebooks();
        let mut s = 0.0;
        for (row, toks) in fr.tokens.iter().enumerate() {
            for (l, &k) in toks.iter().enumerate() {
                let d = &fr.residuals[row][l] - &books[l].vectors.row(k);
                s += d.mapv(|v| v * v).sum();
            }
        }
        s / n
    };
    let e1 = compare_tokenizer(&tok, &gcode, &[Part::Codebook], &[Part::Encoder, Part::Decoder], &f_code, "L_RQ codebook")?;

    // β‖v − sg[e]‖² with the selected codes frozen
    let f_commit = |t: &Tokenizer| {
        let r = t.encode_batch(fr.z.view()).unwrap();
        let mut s = 0.0;
        for (row, codes) in fr.codes.iter().enumerate() {
            let mut v = r.row(row).to_owned();
            for e in codes {
                let d = &v - e;
                s += d.mapv(|x| x * x).sum();
                v = &v - e;
            }
        }
        beta * s / n
    };
    let e2 =
        compare_tokenizer(&tok, &gcommit, &[Part::Encoder], &[Part::Codebook, Part::Decoder], &f_commit, "L_RQ commitment")?;
    Ok(format!("L_RQ max rel err {:.1e}, zero blocks exact", e1.max(e2)))
}

fn sia_oracle(t: &Tokenizer, z: &Array2<f64>, z_e: &Array2<f64>) -> f64 {
    let books = t.codebooks();
    let rz = t.encode_batch(z.view()).unwrap();
    let re = t.encode_batch(z_e.view()).unwrap();
    let mut total = 0.0;
    for (a, b) in rz.rows().into_iter().zip(re.rows()) {
        let pa: Vec<Vec<f64>> = quantize(a, &books).distributions.iter().map(|d| d.to_vec()).collect();
        let pb: Vec<Vec<f64>> = quantize(b, &books).distributions.iter().map(|d| d.to_vec()).collect();
        total += sia_from_distributions(&pa, &pb);
    }
    total / z.nrows() as f64
}

/// SIA with respect to the tokenizer and to `z^E`.
pub fn grad_sia(seed: u64) -> Check {
    let (tok, z) = tokenizer_instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let mut zs = ParamStore::new();
    let ze_id = zs.add("z_e", normal_array(&[4, 6], &mut rng));
    let ze0: Array2<f64> = zs.get(ze_id).clone().into_dimensionality().unwrap();
    let base_z = tokens_of(&tok, &z);
    let base_e = tokens_of(&tok, &ze0);

    let mut g = Graph::new();
    let p = tok.store().bind(&mut g, true);
    let zp = zs.bind(&mut g, true);
    let zv = g.constant(z.clone().into_dyn());
    let loss = sia_loss(&mut g, &tok, &p, zv, zp[ze_id], false);
    let all = g.backward(loss);
    let grads = p.grads(&all);
    let gze = zp.grads(&all);

    let f = |t: &Tokenizer| {
        assert!(stable_tokens(t, &z, &base_z) && stable_tokens(t, &ze0, &base_e), "token flip under perturbation");
        sia_oracle(t, &z, &ze0)
    };
    let e1 = compare_tokenizer(&tok, &grads, &[Part::Encoder, Part::Codebook], &[Part::Decoder], &f, "SIA")?;
    let code_norm: f64 = tok
        .store()
        .ids()
        .filter(|&id| part_of(tok.store(), id) == Part::Codebook)
        .map(|id| analytic(&grads[id.0], tok.store().get(id)).mapv(|v| v * v).sum())
        .sum();
    ensure(code_norm > 0.0, || "SIA: no gradient reached the codebooks".into())?;
    let fz = |s: &ParamStore| {
        let ze: Array2<f64> = s.get(ze_id).clone().into_dimensionality().unwrap();
        sia_oracle(&tok, &z, &ze)
    };
    let num = numeric_grad(&zs, same_store, ze_id, &fz);
    let e2 = rel_err(&analytic(&gze[ze_id.0], &num), &num);
    ensure(e2 <= GRAD_TOL, || format!("SIA: z^E relative error {e2:.2e}"))?;
    Ok(format!("SIA max rel err {:.1e}", e1.max(e2)))
}

fn psa_oracle(h: &Array2<f64>, zt: &Array2<f64>, tau: f64) -> f64 {
    let norm = |m: &Array2<f64>| {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let n = row.mapv(|v| v * v).sum().sqrt();
            row.mapv_inplace(|v| v / n);
        }
        out
    };
    let (hn, zn) = (norm(h), norm(zt));
    let b = h.nrows();
    let sim = |i: usize, j: usize| zn.row(i).dot(&hn.row(j)) / tau;
    let mut total = 0.0;
    for i in 0..b {
        let lse_h = (0..b).map(|j| sim(i, j).exp()).sum::<f64>().ln();
        let lse_z = (0..b).map(|j| sim(j, i).exp()).sum::<f64>().ln();
        total += (lse_h - sim(i, i)) + (lse_z - sim(i, i));
    }
    total / b as f64
}

pub fn grad_psa(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 0.5;
    let mut s = ParamStore::new();
    let hid = s.add("h", normal_array(&[4, 5], &mut rng));
    let zid = s.add("z_tilde", normal_array(&[4, 5], &mut rng));
    let mut g = Graph::new();
    let p = s.bind(&mut g, true);
    let loss = psa_loss(&mut g, p[hid], p[zid], tau).map_err(|e| e.to_string())?;
    let value = g.scalar(loss);
    let grads = p.grads(&g.backward(loss));
    let f = |s: &ParamStore| {
        let h: Array2<f64> = s.get(hid).clone().into_dimensionality().unwrap();
        let z: Array2<f64> = s.get(zid).clone().into_dimensionality().unwrap();
        psa_oracle(&h, &z, tau)
    };
    close("PSA value vs loop oracle", value, f(&s), 1e-10)?;
    let mut worst: f64 = 0.0;
    for id in [hid, zid] {
        let num = numeric_grad(&s, same_store, id, &f);
        let err = rel_err(&analytic(&grads[id.0], &num), &num);
        ensure(err <= GRAD_TOL, || format!("PSA: {} relative error {err:.2e}", s.name(id)))?;
        worst = worst.max(err);
    }
    Ok(format!("PSA max rel err {worst:.1e}"))
}

pub fn tiny_recommender(seed: u64, layers: usize) -> Recommender {
    let cfg = RecommenderConfig {
        encoder_layers: layers,
        decoder_layers: layers,
        d_model: 8,
        ffn_dim: 16,
        heads: 2,
        head_dim: 4,
        dropout: 0.0,
        max_len: 4,
        semantic_dim: 6,
        final_norm: true,
    };
    Recommender::new(cfg, VocabLayout { levels: 2, codebook_size: 3, suffix_capacity: 2 }, seed).unwrap()
}

fn same_store(s: &mut ParamStore) -> &mut ParamStore {
    s
}

fn rec_store(r: &mut Recommender) -> &mut ParamStore {
    r.store_mut()
}

/// `L_REC` on a 2-layer, width-8 model, every parameter tensor.
pub fn grad_rec(seed: u64) -> Check {
    let rec = tiny_recommender(seed, 2);
    let layout = *rec.layout();
    let inputs = vec![
        TokenSequence::new(vec![2, 6, 8, 3, 7, 9]),
        TokenSequence::new(vec![4, 5, 8]),
        TokenSequence::new(vec![3, 5, 9, 2, 5, 8]),
    ];
    let items = [[0usize, 1, 0], [2, 2, 1], [1, 0, 0]];
    let (dec_in, targets): (Vec<_>, Vec<_>) = items
        .iter()
        .map(|it| {
            teacher_forcing(&[layout.level_token(0, it[0]), layout.level_token(1, it[1]), layout.suffix_token(it[2])])
        })
        .unzip();
    let value = |r: &Recommender, trainable: bool| {
        let mut g = Graph::new();
        let p = r.store().bind(&mut g, trainable);
        let out = r.forward(&mut g, &p, &inputs, &dec_in, &mut None).unwrap();
        let l = rec_loss(&mut g, out.logits, &targets);
        (g, p, l)
    };
    let (g, p, l) = value(&rec, true);
    let grads = p.grads(&g.backward(l));
    let f = |r: &Recommender| {
        let (g, _, l) = value(r, false);
        g.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for id in rec.store().ids() {
        let num = numeric_grad(&rec, rec_store, id, &f);
        let a = analytic(&grads[id.0], &num);
        let err = rel_err(&a, &num);
        ensure(err <= GRAD_TOL, || format!("L_REC: {} relative error {err:.2e}", rec.store().name(id)))?;
        worst = worst.max(err);
    }
    Ok(format!("L_REC max rel err {worst:.1e} over {} tensors", rec.store().len()))
}

pub fn gradient_checks(seed: u64) -> Check {
    let parts = [grad_recon(seed)?, grad_rq(seed)?, grad_sia(seed)?, grad_psa(seed)?, grad_rec(seed)?];
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- decoding

/// Every `(c1, c2, c3)` over three levels of three codes.
pub fn cube_catalog() -> (IdentifierMap, VocabLayout) {
    let mut tokens = Vec::new();
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                tokens.push(vec![a, b, c]);
            }
        }
    }
    let vocab = ItemVocab::new((0..27).map(|i| format!("item{i:02}")));
    let ids = IdentifierMap::from_tokens(vocab, tokens, 1).unwrap();
    (ids, VocabLayout { levels: 3, codebook_size: 3, suffix_capacity: 1 })
}

pub fn beam_matches_exhaustive(seeds: u64) -> Check {
    let (ids, layout) = cube_catalog();
    let trie = PrefixTrie::build(&ids, &layout).map_err(|e| e.to_string())?;
    let mut exact_scores = 0;
    for seed in 0..seeds {
        let cfg = RecommenderConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            d_model: 16,
            ffn_dim: 32,
            heads: 2,
            head_dim: 8,
            dropout: 0.0,
            max_len: 4,
            semantic_dim: 8,
            final_norm: true,
        };
        let model = Recommender::new(cfg, layout, 1000 + seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hist: Vec<usize> = (0..3).map(|_| rng.random_range(0..27)).collect();
        let input = TokenSequence::from_items(&hist, &ids, &layout, 4);
        let beam = beam_search(&model, &input, &trie, 27).map_err(|e| e.to_string())?;
        let full = exhaustive_ranking(&model, &input, &trie).map_err(|e| e.to_string())?;
        ensure(beam.items == full.items, || format!("seed {seed}: beam order differs from exhaustive order"))?;
        ensure(beam.items.len() == 27, || format!("seed {seed}: {} items ranked", beam.items.len()))?;
        let max_gap = beam.scores.iter().zip(&full.scores).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(max_gap < 1e-9, || format!("seed {seed}: scores differ by {max_gap:e}"))?;
        if beam.scores == full.scores {
            exact_scores += 1;
        }
    }
    Ok(format!("{seeds} seeds identical order; scores bitwise equal in {exact_scores}"))
}

// ---------------------------------------------------------------- metrics

pub fn metric_oracles(rankings: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..rankings {
        let catalog = rng.random_range(1..60);
        let mut items: Vec<String> = (0..catalog).map(|i| format!("x{i}")).collect();
        for i in (1..items.len()).rev() {
            let j = rng.random_range(0..=i);
            items.swap(i, j);
        }
        let len = rng.random_range(0..=catalog);
        items.truncate(len);
        let ranked = RankingResult { items: items.clone(), tokens: vec![Vec::new(); len], scores: vec![0.0; len] };
        let target = format!("x{}", rng.random_range(0..catalog));
        for k in [1, 5, 10, 20] {
            let (mut rec, mut ndcg) = (0.0, 0.0);
            for (pos, item) in items.iter().enumerate().take(k) {
                if *item == target {
                    rec = 1.0;
                    ndcg = 1.0 / ((pos + 2) as f64).log2();
                }
            }
            let got_r = recall_at_k(&ranked, &target, k);
            let got_n = ndcg_at_k(&ranked, &target, k);
            ensure(got_r == rec, || format!("ranking {n}: recall@{k} {got_r} vs {rec}"))?;
            ensure(got_n == ndcg, || format!("ranking {n}: ndcg@{k} {got_n} vs {ndcg}"))?;
        }
    }
    let two = RankingResult { items: vec!["a".into(), "b".into()], tokens: vec![vec![], vec![]], scores: vec![0.0, -1.0] };
    let v = ndcg_at_k(&two, "b", 10);
    close("NDCG rank 2", v, 1.0 / 3f64.log2(), 1e-6)?;
    Ok(format!("{rankings} rankings agree; NDCG at rank 2 = {v:.6}"))
}
