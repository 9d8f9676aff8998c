//! Losses coupling the tokenizer and the recommender.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tokenizer::{ResidualGrad, Tokenizer};

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub mu: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Quantize `z^E` along the target item's hard tokens instead of its own.
    pub teacher_forcing: bool,
    /// Minimize the symmetric KL instead of its negation. Off by default.
    pub flip_sia_sign: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { mu: 1e-3, lambda: 1e-3, tau: 0.07, teacher_forcing: false, flip_sia_sign: false }
    }
}

impl AlignmentConfig {
    /// Weight applied to the SIA term in both objectives.
    pub fn sia_weight(&self) -> f64 {
        if self.flip_sia_sign {
            -self.mu
        } else {
            self.mu
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("alignment weights must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `KL(p‖q) + KL(q‖p)` with both arguments floored.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            (a - b) * (a.ln() - b.ln())
        })
        .sum()
}

/// Negated sum over levels of symmetric KL between per-level distributions.
pub fn sia_from_distributions(pz: &[Vec<f64>], pe: &[Vec<f64>]) -> f64 {
    -pz.iter().zip(pe).map(|(a, b)| symmetric_kl(a, b)).sum::<f64>()
}

/// Sequence-item alignment over a batch of target embeddings `z: [B, d_s]`
/// and projected sequence states `z_e: [B, d_s]`. Batch mean.
pub fn sia_loss(g: &mut Graph, tokenizer: &Tokenizer, p: &Bound, z: Var, z_e: Var, teacher_forcing: bool) -> Var {
    let batch = g.value(z).shape()[0] as f64;
    let r_z = tokenizer.encode_graph(g, p, z);
    let q_z = tokenizer.quantize_graph(g, p, r_z, ResidualGrad::Full, None);
    let r_e = tokenizer.encode_graph(g, p, z_e);
    let forced = teacher_forcing.then_some(q_z.tokens.as_slice());
    let q_e = tokenizer.quantize_graph(g, p, r_e, ResidualGrad::Full, forced);
    let mut total: Option<Var> = None;
    for (&pz, &pe) in q_z.distributions.iter().zip(&q_e.distributions) {
        let lz = g.log_floor(pz, PROB_FLOOR);
        let le = g.log_floor(pe, PROB_FLOOR);
        // (p − q)(ln p − ln q) summed is KL(p‖q) + KL(q‖p)
        let dp = g.sub(pz, pe);
        let dl = g.sub(lz, le);
        let term = g.mul(dp, dl);
        let s = g.sum(term);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    g.scale(total.expect("tokenizer has at least one level"), -1.0 / batch)
}

/// Symmetric in-batch InfoNCE over cosine similarities of `h: [B, d]` and
/// `z_tilde: [B, d]`, averaged over the batch.
pub fn psa_loss(g: &mut Graph, h: Var, z_tilde: Var, tau: f64) -> Result<Var> {
    let batch = g.value(h).shape()[0];
    if batch < 2 {
        return Err(Error::InvalidInput("contrastive alignment needs a batch of at least 2".into()));
    }
    if g.value(z_tilde).shape()[0] != batch {
        return Err(Error::InvalidInput("alignment batches differ in size".into()));
    }
    let hn = g.normalize_rows(h, 1e-12);
    let zn = g.normalize_rows(z_tilde, 1e-12);
    let diag: Vec<usize> = (0..batch).collect();
    let s_zh = g.matmul(zn, hn, true);
    let s_zh = g.scale(s_zh, 1.0 / tau);
    let l_zh = g.log_softmax(s_zh);
    let d1 = g.pick(l_zh, &diag);
    let s_hz = g.matmul(hn, zn, true);
    let s_hz = g.scale(s_hz, 1.0 / tau);
    let l_hz = g.log_softmax(s_hz);
    let d2 = g.pick(l_hz, &diag);
    let both = g.add(d1, d2);
    let total = g.sum(both);
    Ok(g.scale(total, -1.0 / batch as f64))
}

pub fn combine_tokenizer_objective(sq: f64, sia: f64, psa: f64, mu: f64, lambda: f64) -> f64 {
    sq + mu * sia + lambda * psa
}

pub fn combine_recommender_objective(rec: f64, sia: f64, psa: f64, mu: f64, lambda: f64) -> f64 {
    rec + mu * sia + lambda * psa
}

/// `base + μ·sia + λ·psa` on the tape; zero weights drop their term.
pub fn combine_graph(g: &mut Graph, base: Var, sia: Option<Var>, psa: Option<Var>, mu: f64, lambda: f64) -> Var {
    let mut out = base;
    if let (Some(s), true) = (sia, mu != 0.0) {
        let t = g.scale(s, mu);
        out = g.add(out, t);
    }
    if let (Some(s), true) = (psa, lambda != 0.0) {
        let t = g.scale(s, lambda);
        out = g.add(out, t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn rows(b: usize, d: usize, v: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[b, d]), v).unwrap()
    }

    #[test]
    fn symmetric_kl_example() {
        let v = symmetric_kl(&[0.7311, 0.2689], &[0.2689, 0.7311]);
        assert!((v - 0.9242).abs() < 1e-3, "{v}");
        assert!((sia_from_distributions(&[vec![0.7311, 0.2689]], &[vec![0.2689, 0.7311]]) + v).abs() < 1e-15);
        assert_eq!(symmetric_kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn psa_orthogonal_pair() {
        let mut g = Graph::new();
        let h = g.constant(rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let z = g.constant(rows(2, 2, vec![3.0, 0.0, 0.0, 0.5]));
        let l = psa_loss(&mut g, h, z, 1.0).unwrap();
        let want = 2.0 * -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar(l) - want).abs() < 1e-12);
        assert!((g.scalar(l) - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn psa_uniform_and_scale_invariant() {
        for b in [2usize, 3, 5] {
            let mut g = Graph::new();
            let h = g.constant(ArrayD::from_elem(IxDyn(&[b, 3]), 0.7));
            let z = g.constant(ArrayD::from_elem(IxDyn(&[b, 3]), 0.7));
            let l = psa_loss(&mut g, h, z, 0.07).unwrap();
            assert!((g.scalar(l) - 2.0 * (b as f64).ln()).abs() < 1e-9);
        }
        let hv = rows(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.4, 0.9]);
        let zv = rows(3, 2, vec![1.0, 0.2, -0.3, 0.8, 0.6, 0.6]);
        let mut g = Graph::new();
        let (h, z) = (g.constant(hv.clone()), g.constant(zv.clone()));
        let a = psa_loss(&mut g, h, z, 0.5).unwrap();
        let (h, z) = (g.constant(hv * 10.0), g.constant(zv * 10.0));
        let b = psa_loss(&mut g, h, z, 0.5).unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-12);
    }

    #[test]
    fn psa_rejects_singleton_batch() {
        let mut g = Graph::new();
        let h = g.constant(rows(1, 2, vec![1.0, 0.0]));
        assert!(psa_loss(&mut g, h, h, 1.0).is_err());
    }

    #[test]
    fn objective_arithmetic() {
        assert!((combine_tokenizer_objective(1.0, 2.0, 3.0, 0.1, 0.01) - 1.23).abs() < 1e-12);
        assert_eq!(combine_tokenizer_objective(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
        assert_eq!(combine_recommender_objective(0.6931, 0.0, 0.0, 0.3, 0.7), 0.6931);
    }
}
