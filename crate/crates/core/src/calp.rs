//! Contrastive acoustic-language pretraining: triple sampling, shared-space
//! projections, the composite NT-Xent objective and its log-sum-exp bound.
//!
//! For a minibatch of `M` triples `(Aᵗᵢ, Aᵗ⁺¹ᵢ, Tᵢ)` with unit-norm projected
//! embeddings `uᵢ`, `wᵢ` (next block) and `vᵢ` (language), the per-sample loss is
//!
//! ```text
//! ℓᵢ = −log( e^{⟨uᵢ,wᵢ⟩/τ} / Σ_{j∈D(i)} e^{⟨uᵢ,wⱼ⟩/τ} ) − α·log( e^{⟨uᵢ,vᵢ⟩/τ} / Σ_{j∈D(i)} e^{⟨uᵢ,vⱼ⟩/τ} )
//! ```
//!
//! with `D(i) = {j ≠ i}` by default, or all `j` when the positive is included
//! in the denominator (the conventional NT-Xent form).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{bail, Result};
use crate::graph::{CalpSpec, Graph, Var};
use crate::nn::{Linear, Mode};
use crate::params::ParamStore;
use crate::real::{dot, Real};
use crate::rng::CoreRng;
use crate::tensor::Tensor;

pub const PREFIX: &str = "calp";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalpConfig {
    pub tau: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub ntxent_include_positive: bool,
    pub d_shared: usize,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub clip_norm: Option<f64>,
}

impl Default for CalpConfig {
    fn default() -> Self {
        CalpConfig {
            tau: 0.1,
            alpha: 0.25,
            batch_size: 32,
            steps: 2000,
            lr: 1e-4,
            ntxent_include_positive: false,
            d_shared: 128,
            eval_interval: 250,
            eval_batches: 8,
            clip_norm: Some(1.0),
        }
    }
}

impl CalpConfig {
    pub fn spec(&self) -> CalpSpec {
        CalpSpec { tau: self.tau, alpha: self.alpha, include_positive: self.ntxent_include_positive }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            bail!(Config, "calp.tau must be positive, got {}", self.tau);
        }
        if !(self.alpha >= 0.0) {
            bail!(Config, "calp.alpha must be non-negative, got {}", self.alpha);
        }
        if self.batch_size < 2 {
            bail!(Config, "calp.batch_size must be at least 2");
        }
        Ok(())
    }
}

fn in_denominator(i: usize, j: usize, spec: &CalpSpec) -> bool {
    spec.include_positive || i != j
}

/// Row-wise `(log-sum-exp over D(i), softmax over D(i))` of `sims / τ`.
fn lse_row<R: Real>(sims: &[R], i: usize, spec: &CalpSpec, probs: Option<&mut [R]>) -> R {
    let inv_tau = R::of(1.0 / spec.tau);
    let mut mx = R::neg_infinity();
    for (j, &s) in sims.iter().enumerate() {
        if in_denominator(i, j, spec) && s * inv_tau > mx {
            mx = s * inv_tau;
        }
    }
    let mut z = R::zero();
    for (j, &s) in sims.iter().enumerate() {
        if in_denominator(i, j, spec) {
            z += (s * inv_tau - mx).exp();
        }
    }
    if let Some(p) = probs {
        for (j, &s) in sims.iter().enumerate() {
            p[j] = if in_denominator(i, j, spec) { (s * inv_tau - mx).exp() / z } else { R::zero() };
        }
    }
    mx + z.ln()
}

fn sim_matrix<R: Real>(a: &[R], b: &[R], m: usize, d: usize) -> Vec<R> {
    let mut s = vec![R::zero(); m * m];
    for i in 0..m {
        for j in 0..m {
            s[i * m + j] = dot(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
        }
    }
    s
}

fn losses_from_sims<R: Real>(s1: &[R], s2: &[R], m: usize, spec: &CalpSpec) -> Vec<R> {
    let inv_tau = R::of(1.0 / spec.tau);
    let alpha = R::of(spec.alpha);
    (0..m)
        .map(|i| {
            let r1 = &s1[i * m..(i + 1) * m];
            let r2 = &s2[i * m..(i + 1) * m];
            let audio = lse_row(r1, i, spec, None) - r1[i] * inv_tau;
            let lang = lse_row(r2, i, spec, None) - r2[i] * inv_tau;
            audio + alpha * lang
        })
        .collect()
}

pub(crate) fn per_sample_losses<R: Real>(ut: &[R], ut1: &[R], v: &[R], m: usize, d: usize, spec: &CalpSpec) -> Vec<R> {
    losses_from_sims(&sim_matrix(ut, ut1, m, d), &sim_matrix(ut, v, m, d), m, spec)
}

/// Gradients of `upstream · mean_i ℓᵢ` with respect to the three embedding matrices.
pub(crate) fn per_sample_grads<R: Real>(
    ut: &[R],
    ut1: &[R],
    v: &[R],
    m: usize,
    d: usize,
    spec: &CalpSpec,
    upstream: R,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let s1 = sim_matrix(ut, ut1, m, d);
    let s2 = sim_matrix(ut, v, m, d);
    let w = upstream / R::of(m as f64) * R::of(1.0 / spec.tau);
    let alpha = R::of(spec.alpha);
    let mut g1 = vec![R::zero(); m * m];
    let mut g2 = vec![R::zero(); m * m];
    for i in 0..m {
        lse_row(&s1[i * m..(i + 1) * m], i, spec, Some(&mut g1[i * m..(i + 1) * m]));
        lse_row(&s2[i * m..(i + 1) * m], i, spec, Some(&mut g2[i * m..(i + 1) * m]));
        g1[i * m + i] -= R::one();
        g2[i * m + i] -= R::one();
        for j in 0..m {
            g1[i * m + j] *= w;
            g2[i * m + j] *= w * alpha;
        }
    }
    let mut gu = vec![R::zero(); m * d];
    let mut gw = vec![R::zero(); m * d];
    let mut gv = vec![R::zero(); m * d];
    for i in 0..m {
        for j in 0..m {
            let (a, b) = (g1[i * m + j], g2[i * m + j]);
            for k in 0..d {
                gu[i * d + k] += a * ut1[j * d + k] + b * v[j * d + k];
                gw[j * d + k] += a * ut[i * d + k];
                gv[j * d + k] += b * ut[i * d + k];
            }
        }
    }
    (gu, gw, gv)
}

/// Projected unit-norm embeddings of one minibatch, each `[M × d_shared]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalpBatch<R> {
    pub audio_t: Tensor<R>,
    pub audio_next: Tensor<R>,
    pub language: Tensor<R>,
}

impl<R: Real> CalpBatch<R> {
    pub fn validate(&self) -> Result<usize> {
        let m = self.audio_t.rows();
        if m < 2 {
            bail!(InvalidInput, "contrastive batch needs M ≥ 2, got {m}");
        }
        for (name, t) in [("audio_t", &self.audio_t), ("audio_next", &self.audio_next), ("language", &self.language)] {
            if t.shape() != self.audio_t.shape() {
                bail!(Shape, "{name} has shape {:?}, expected {:?}", t.shape(), self.audio_t.shape());
            }
            for r in 0..m {
                let n = libm::sqrt(dot(t.row(r), t.row(r)).f64());
                if (n - 1.0).abs() > 1e-6 {
                    bail!(InvalidInput, "{name} row {r} has norm {n}, expected unit norm");
                }
            }
        }
        Ok(m)
    }
}

/// Per-sample composite losses `ℓᵢ`.
pub fn calp_losses<R: Real>(batch: &CalpBatch<R>, cfg: &CalpConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = batch.validate()?;
    let d = batch.audio_t.cols();
    let spec = cfg.spec();
    let per = per_sample_losses(batch.audio_t.data(), batch.audio_next.data(), batch.language.data(), m, d, &spec);
    Ok(per.into_iter().map(|x| x.f64()).collect())
}

/// Mean of the per-sample composite losses.
pub fn calp_loss<R: Real>(batch: &CalpBatch<R>, cfg: &CalpConfig) -> Result<f64> {
    let per = calp_losses(batch, cfg)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-sample log-sum-exp upper bound
/// `(1/τ)[−α⟨u,v⟩ − ⟨u,w⟩ + max_{j≠i}⟨u,wⱼ⟩ + α·max_{k≠i}⟨u,vₖ⟩] + 2 ln M`.
/// It bounds the default (positive-excluded) loss whenever `α ≤ 1`.
pub fn calp_bound<R: Real>(batch: &CalpBatch<R>, cfg: &CalpConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = batch.validate()?;
    let d = batch.audio_t.cols();
    let s1 = sim_matrix(batch.audio_t.data(), batch.audio_next.data(), m, d);
    let s2 = sim_matrix(batch.audio_t.data(), batch.language.data(), m, d);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let max_off = |s: &[R]| (0..m).filter(|&j| j != i).map(|j| s[i * m + j].f64()).fold(f64::NEG_INFINITY, f64::max);
        let inner = -cfg.alpha * s2[i * m + i].f64() - s1[i * m + i].f64() + max_off(&s1) + cfg.alpha * max_off(&s2);
        out.push(inner / cfg.tau + 2.0 * libm::log(m as f64));
    }
    Ok(out)
}

/// One contrastive triple: block `t` and `t + 1` of an utterance, plus its transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalpTriple {
    pub utterance: usize,
    pub block: usize,
}

/// Indices of utterances with at least two full consecutive blocks.
pub fn eligible(utterances: &[&Utterance]) -> Vec<usize> {
    (0..utterances.len())
        .filter(|&i| utterances[i].blocks.len() >= 2 && !utterances[i].blocks[0].padded && !utterances[i].token_ids.is_empty())
        .collect()
}

/// Draws `m` distinct utterances from `pool` and, within each, a consecutive
/// block pair uniformly at random.
pub fn sample_triples(utterances: &[&Utterance], pool: &[usize], m: usize, rng: &mut CoreRng) -> Result<Vec<CalpTriple>> {
    if pool.len() < m {
        bail!(NotEnoughData, "{} eligible utterances for a contrastive batch of {}", pool.len(), m);
    }
    let mut idx = pool.to_vec();
    for k in 0..m {
        let j = rng.gen_range(k..idx.len());
        idx.swap(k, j);
    }
    Ok(idx[..m]
        .iter()
        .map(|&u| {
            let pairs = utterances[u].blocks.len() - 1;
            CalpTriple { utterance: u, block: rng.gen_range(0..pairs) }
        })
        .collect())
}

/// Linear maps of audio (`d_a`) and language (`d_model`) embeddings into the shared space.
#[derive(Debug, Clone, Copy)]
pub struct CalpProjections {
    pub audio: Linear,
    pub language: Linear,
}

impl CalpProjections {
    pub fn new<R: Real>(store: &mut ParamStore<R>, d_audio: usize, d_language: usize, d_shared: usize, seed: u64) -> Self {
        CalpProjections {
            audio: Linear::new(store, &format!("{PREFIX}.audio_projection"), d_audio, d_shared, seed),
            language: Linear::new(store, &format!("{PREFIX}.language_projection"), d_language, d_shared, seed),
        }
    }

    pub fn project_audio<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let p = self.audio.forward(g, x);
        g.l2_normalize(p)
    }

    pub fn project_language<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let p = self.language.forward(g, x);
        g.l2_normalize(p)
    }
}

/// Unit-norm language embedding of a transcript: the frozen text encoder's
/// final hidden states mean-pooled over lexical tokens, then projected.
pub fn encode_language_global<R: Real>(
    mm: &crate::mmtx::MmModel,
    projections: &CalpProjections,
    store: &ParamStore<R>,
    token_ids: &[u32],
) -> Result<Vec<R>> {
    if token_ids.is_empty() {
        bail!(InvalidInput, "empty token sequence");
    }
    let mut g = Graph::new(store);
    let pooled = mm.pooled_text(&mut g, &mut Mode::eval(), &[token_ids])?;
    let v = projections.project_language(&mut g, pooled);
    Ok(g.value(v).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, standard_normal};

    fn unit_rows(m: usize, d: usize, rng: &mut CoreRng) -> Tensor<f64> {
        let mut t = Tensor::new(&[m, d], (0..m * d).map(|_| standard_normal(rng)).collect());
        for r in 0..m {
            let n = dot(t.row(r), t.row(r)).sqrt();
            t.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    fn cfg(tau: f64, alpha: f64) -> CalpConfig {
        CalpConfig { tau, alpha, ..CalpConfig::default() }
    }

    fn identical(m: usize) -> CalpBatch<f64> {
        let mut row = vec![0.0; 4];
        row[0] = 1.0;
        let t = Tensor::from_rows(&vec![row; m]);
        CalpBatch { audio_t: t.clone(), audio_next: t.clone(), language: t }
    }

    /// Direct evaluation of the printed formula, one term at a time.
    fn brute_force(b: &CalpBatch<f64>, tau: f64, alpha: f64) -> f64 {
        let m = b.audio_t.rows();
        let sim = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let mut total = 0.0;
        for i in 0..m {
            let u = b.audio_t.row(i);
            let num1 = (sim(u, b.audio_next.row(i)) / tau).exp();
            let den1: f64 = (0..m).filter(|&j| j != i).map(|j| (sim(u, b.audio_next.row(j)) / tau).exp()).sum();
            let num2 = (sim(u, b.language.row(i)) / tau).exp();
            let den2: f64 = (0..m).filter(|&j| j != i).map(|j| (sim(u, b.language.row(j)) / tau).exp()).sum();
            total += -(num1 / den1).ln() - alpha * (num2 / den2).ln();
        }
        total / m as f64
    }

    #[test]
    fn identical_embeddings_give_closed_form() {
        let l = calp_loss(&identical(5), &cfg(0.1, 0.25)).unwrap();
        assert!((l - 1.25 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.733).abs() < 1e-3);
        assert!(calp_loss(&identical(2), &cfg(0.5, 0.25)).unwrap().abs() < 1e-12);
        let b = calp_bound(&identical(5), &cfg(0.1, 0.25)).unwrap();
        assert!(b.iter().all(|&x| (x - 2.0 * 5f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_example_matches_direct_formula() {
        let ut = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let b = CalpBatch { audio_t: ut.clone(), audio_next: ut, language: v };
        // sample 1: audio term −log(e¹/e⁰) = −1, language term −α·log(e⁰/e¹) = α; same for sample 2
        let expected = -1.0 + 0.25;
        let got = calp_loss(&b, &cfg(1.0, 0.25)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - brute_force(&b, 1.0, 0.25)).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_batches() {
        let mut rng = derive_rng(1, "calp-bf");
        for m in [2, 3, 6] {
            let b = CalpBatch { audio_t: unit_rows(m, 5, &mut rng), audio_next: unit_rows(m, 5, &mut rng), language: unit_rows(m, 5, &mut rng) };
            for (tau, alpha) in [(0.07, 0.25), (1.0, 0.0), (0.3, 1.0)] {
                let got = calp_loss(&b, &cfg(tau, alpha)).unwrap();
                assert!((got - brute_force(&b, tau, alpha)).abs() < 1e-9 * (1.0 + got.abs()));
            }
        }
    }

    #[test]
    fn large_temperature_limits() {
        let mut rng = derive_rng(2, "calp-tau");
        let m = 6;
        let b = CalpBatch { audio_t: unit_rows(m, 4, &mut rng), audio_next: unit_rows(m, 4, &mut rng), language: unit_rows(m, 4, &mut rng) };
        let c = cfg(1e4, 0.25);
        let l = calp_loss(&b, &c).unwrap();
        assert!((l - 1.25 * ((m - 1) as f64).ln()).abs() < 1e-3);
        for x in calp_bound(&b, &c).unwrap() {
            assert!((x - 2.0 * (m as f64).ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_small_or_unnormalized_batches() {
        assert!(calp_loss(&identical(1), &cfg(0.1, 0.25)).is_err());
        let mut b = identical(3);
        b.language.row_mut(1)[0] = 2.0;
        assert!(calp_loss(&b, &cfg(0.1, 0.25)).is_err());
        assert!(calp_loss(&identical(3), &cfg(0.0, 0.25)).is_err());
    }

    #[test]
    fn including_the_positive_changes_the_denominator() {
        let mut rng = derive_rng(3, "calp-pos");
        let b = CalpBatch { audio_t: unit_rows(4, 3, &mut rng), audio_next: unit_rows(4, 3, &mut rng), language: unit_rows(4, 3, &mut rng) };
        let mut c = cfg(0.5, 0.25);
        let excluded = calp_loss(&b, &c).unwrap();
        c.ntxent_include_positive = true;
        let included = calp_loss(&b, &c).unwrap();
        assert!(included > excluded);
        assert!(included > 0.0);
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = derive_rng(4, "calp-rot");
        let d = 3;
        let b = CalpBatch { audio_t: unit_rows(5, d, &mut rng), audio_next: unit_rows(5, d, &mut rng), language: unit_rows(5, d, &mut rng) };
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let apply = |t: &Tensor<f64>| {
            let mut o = t.clone();
            for r in 0..t.rows() {
                for i in 0..d {
                    o.row_mut(r)[i] = (0..d).map(|k| rot[i][k] * t.row(r)[k]).sum();
                }
            }
            o
        };
        let rb = CalpBatch { audio_t: apply(&b.audio_t), audio_next: apply(&b.audio_next), language: apply(&b.language) };
        let k = cfg(0.1, 0.25);
        assert!((calp_loss(&b, &k).unwrap() - calp_loss(&rb, &k).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = derive_rng(5, "calp-grad");
        let (m, d) = (4, 3);
        let a = unit_rows(m, d, &mut rng);
        let b = unit_rows(m, d, &mut rng);
        let c = unit_rows(m, d, &mut rng);
        for include_positive in [false, true] {
            let spec = CalpSpec { tau: 0.2, alpha: 0.25, include_positive };
            let f = |a: &[f64], b: &[f64], c: &[f64]| {
                per_sample_losses(a, b, c, m, d, &spec).iter().sum::<f64>() / m as f64
            };
            let (ga, gb, gc) = per_sample_grads(a.data(), b.data(), c.data(), m, d, &spec, 1.0);
            let h = 1e-6;
            for (which, grad) in [(0, &ga), (1, &gb), (2, &gc)] {
                for k in 0..m * d {
                    let mut bufs = [a.data().to_vec(), b.data().to_vec(), c.data().to_vec()];
                    bufs[which][k] += h;
                    let p = f(&bufs[0], &bufs[1], &bufs[2]);
                    bufs[which][k] -= 2.0 * h;
                    let n = f(&bufs[0], &bufs[1], &bufs[2]);
                    let num = (p - n) / (2.0 * h);
                    assert!((num - grad[k]).abs() < 1e-7, "input {which} idx {k}: {num} vs {}", grad[k]);
                }
            }
        }
    }

    fn batch_strategy() -> impl proptest::strategy::Strategy<Value = (usize, Vec<f64>)> {
        use proptest::prelude::*;
        (2usize..7).prop_flat_map(|m| (Just(m), proptest::collection::vec(-1.0f64..1.0, 3 * m * 4)))
    }

    fn batch_from(m: usize, raw: &[f64]) -> CalpBatch<f64> {
        let d = 4;
        let mut ts = [0, 1, 2].map(|k| Tensor::new(&[m, d], raw[k * m * d..(k + 1) * m * d].to_vec()));
        for t in ts.iter_mut() {
            for r in 0..m {
                let n = dot(t.row(r), t.row(r)).sqrt().max(1e-3);
                t.row_mut(r).iter_mut().for_each(|v| *v /= n);
                if (dot(t.row(r), t.row(r)) - 1.0).abs() > 1e-9 {
                    t.row_mut(r).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                }
            }
        }
        let [a, b, c] = ts;
        CalpBatch { audio_t: a, audio_next: b, language: c }
    }

    proptest::proptest! {
        #[test]
        fn bound_dominates_loss((m, raw) in batch_strategy(), tau in 0.02f64..2.0, alpha in 0.0f64..1.0) {
            let b = batch_from(m, &raw);
            let c = cfg(tau, alpha);
            let per = calp_losses(&b, &c).unwrap();
            let bound = calp_bound(&b, &c).unwrap();
            for (l, u) in per.iter().zip(&bound) {
                proptest::prop_assert!(*l <= *u + 1e-9, "loss {} exceeds bound {}", l, u);
            }
        }

        #[test]
        fn zero_alpha_reduces_to_audio_term((m, raw) in batch_strategy(), tau in 0.05f64..1.0) {
            let b = batch_from(m, &raw);
            let mut other = b.clone();
            other.language = b.audio_next.clone();
            let c = cfg(tau, 0.0);
            proptest::prop_assert!((calp_loss(&b, &c).unwrap() - calp_loss(&other, &c).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn positive_similarity_is_monotone((m, raw) in batch_strategy(), i in 0usize..7, bump in 1e-3f64..0.5) {
            let i = i % m;
            let b = batch_from(m, &raw);
            let spec = CalpSpec { tau: 0.1, alpha: 0.25, include_positive: false };
            let s1 = sim_matrix(b.audio_t.data(), b.audio_next.data(), m, 4);
            let s2 = sim_matrix(b.audio_t.data(), b.language.data(), m, 4);
            let base = losses_from_sims(&s1, &s2, m, &spec);
            for target in 0..2 {
                let (mut t1, mut t2) = (s1.clone(), s2.clone());
                if target == 0 { t1[i * m + i] -= bump } else { t2[i * m + i] -= bump }
                let raised = losses_from_sims(&t1, &t2, m, &spec);
                proptest::prop_assert!(raised[i] > base[i]);
            }
        }
    }

    fn utterance_with_blocks(id: usize, n: usize) -> Utterance {
        use crate::corpus::Split;
        use crate::features::AcousticBlock;
        use alloc::string::ToString;
        Utterance {
            id: format!("u{id}"),
            token_ids: vec![5, 6],
            labels: vec![1.0],
            split: Split::Train,
            blocks: (0..n)
                .map(|b| AcousticBlock { values: vec![0.0; 4], start_frame: 30 * b, utterance_id: id.to_string(), padded: false })
                .collect(),
        }
    }

    #[test]
    fn triple_sampling_rules() {
        let us: Vec<Utterance> = [2, 6, 1, 3, 2].iter().enumerate().map(|(i, &n)| utterance_with_blocks(i, n)).collect();
        let refs: Vec<&Utterance> = us.iter().collect();
        let pool = eligible(&refs);
        assert_eq!(pool, vec![0, 1, 3, 4]);
        let a = sample_triples(&refs, &pool, 4, &mut derive_rng(1, "t")).unwrap();
        let b = sample_triples(&refs, &pool, 4, &mut derive_rng(1, "t")).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<usize> = a.iter().map(|t| t.utterance).collect();
        ids.sort();
        assert_eq!(ids, pool);
        for t in &a {
            assert!(t.block + 1 < us[t.utterance].blocks.len());
            if us[t.utterance].blocks.len() == 2 {
                assert_eq!(t.block, 0);
            }
        }
        assert!(sample_triples(&refs, &pool, 5, &mut derive_rng(1, "t")).is_err());

        // five consecutive pairs are equally likely
        let mut counts = [0usize; 5];
        let mut rng = derive_rng(2, "freq");
        for _ in 0..1000 {
            counts[sample_triples(&refs, &[1], 1, &mut rng).unwrap()[0].block] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.2).abs() <= 0.04, "{counts:?}");
        }
    }

    #[test]
    fn projections_are_full_rank_and_language_vectors_unit_norm() {
        use crate::mmtx::{MmModel, MmShape};
        use crate::nn::EncoderConfig;
        let mut store = ParamStore::<f64>::new();
        let enc = EncoderConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, dropout_rate: 0.0, max_positions: 16 };
        let mm = MmModel::new(&mut store, MmShape { encoder: enc, vocab_size: 10, d_acoustic: None, block_len: 4 }, 0).unwrap();
        let p = CalpProjections::new(&mut store, 6, 8, 5, 0);
        // Gram determinant of the weight columns is positive
        let w = store.get(p.audio.weight);
        let (rows, cols) = (w.rows(), w.cols());
        let mut gram = vec![0.0; cols * cols];
        for a in 0..cols {
            for b in 0..cols {
                gram[a * cols + b] = (0..rows).map(|r| w.row(r)[a] * w.row(r)[b]).sum();
            }
        }
        let mut det = 1.0;
        for c in 0..cols {
            let piv = gram[c * cols + c];
            det *= piv;
            for r in c + 1..cols {
                let f = gram[r * cols + c] / piv;
                for k in c..cols {
                    gram[r * cols + k] -= f * gram[c * cols + k];
                }
            }
        }
        assert!(det > 0.0);
        let v = encode_language_global(&mm, &p, &store, &[5, 6, 7]).unwrap();
        assert_eq!(v.len(), 5);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
        assert!(encode_language_global(&mm, &p, &store, &[]).is_err());
    }
}
