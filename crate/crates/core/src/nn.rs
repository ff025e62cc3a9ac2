//! Layers shared by the spectral transformer and the multimodal transformer.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::CoreRng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Train/eval switch plus the stream that drives dropout.
pub struct Mode {
    pub train: bool,
    pub rng: CoreRng,
}

impl Mode {
    pub fn eval() -> Self {
        Mode { train: false, rng: crate::rng::derive_rng(0, "eval") }
    }

    pub fn train(rng: CoreRng) -> Self {
        Mode { train: true, rng }
    }
}

pub fn dropout<R: Real>(g: &mut Graph<R>, mode: &mut Mode, x: Var, rate: f64) -> Var {
    if !mode.train || rate <= 0.0 {
        return x;
    }
    let n = g.value(x).len();
    let keep = R::of(1.0 / (1.0 - rate));
    let mask: Vec<R> = (0..n).map(|_| if mode.rng.gen::<f64>() < rate { R::zero() } else { keep }).collect();
    let shape = g.value(x).shape().to_vec();
    g.mul_const(x, Tensor::new(&shape, mask))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let weight = store.normal(&format!("{name}.weight"), &[d_in, d_out], INIT_STD, seed);
        let bias = store.zeros(&format!("{name}.bias"), &[d_out]);
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> Self {
        LayerNorm { gamma: store.ones(&format!("{name}.gamma"), &[d]), beta: store.zeros(&format!("{name}.beta"), &[d]) }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { n_layers: 2, d_model: 128, n_heads: 2, d_ff: 512, dropout_rate: 0.1, max_positions: 512 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Config, "d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads);
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(Config, "dropout_rate {} outside [0, 1)", self.dropout_rate);
        }
        if self.d_ff == 0 || self.max_positions == 0 {
            bail!(Config, "d_ff and max_positions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln_attn: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ln_ff: LayerNorm,
}

/// Post-layer-norm transformer encoder stack (original BERT block ordering).
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Real>(store: &mut ParamStore<R>, prefix: &str, config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                EncoderLayer {
                    q: Linear::new(store, &format!("{p}.attn.query"), d, d, seed),
                    k: Linear::new(store, &format!("{p}.attn.key"), d, d, seed),
                    v: Linear::new(store, &format!("{p}.attn.value"), d, d, seed),
                    out: Linear::new(store, &format!("{p}.attn.output"), d, d, seed),
                    ln_attn: LayerNorm::new(store, &format!("{p}.attn.norm"), d),
                    ff_in: Linear::new(store, &format!("{p}.ff.intermediate"), d, config.d_ff, seed),
                    ff_out: Linear::new(store, &format!("{p}.ff.output"), config.d_ff, d, seed),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ff.norm"), d),
                }
            })
            .collect();
        Ok(Encoder { config, layers })
    }

    /// `x` holds `layout.batch * layout.seq` rows of width `d_model`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, mode: &mut Mode, x: Var, layout: &SeqLayout) -> Result<Var> {
        let t = g.value(x);
        if t.cols() != self.config.d_model || t.rows() != layout.rows() {
            bail!(
                Shape,
                "encoder input {:?} vs layout {}x{} and d_model {}",
                t.shape(),
                layout.batch,
                layout.seq,
                self.config.d_model
            );
        }
        if layout.key_mask.len() != layout.rows() {
            bail!(Shape, "attention mask length {} vs {} slots", layout.key_mask.len(), layout.rows());
        }
        if layout.seq > self.config.max_positions {
            bail!(InvalidInput, "sequence length {} exceeds max_positions {}", layout.seq, self.config.max_positions);
        }
        for b in 0..layout.batch {
            if !layout.key_mask[b * layout.seq..(b + 1) * layout.seq].iter().any(|&m| m) {
                bail!(InvalidInput, "sequence {b} is fully masked");
            }
        }
        let rate = self.config.dropout_rate;
        let mut h = x;
        for layer in &self.layers {
            let q = layer.q.forward(g, h);
            let k = layer.k.forward(g, h);
            let v = layer.v.forward(g, h);
            let a = g.attention(q, k, v, self.config.n_heads, layout);
            let a = layer.out.forward(g, a);
            let a = dropout(g, mode, a, rate);
            let r = g.add(h, a);
            let h1 = layer.ln_attn.forward(g, r);
            let f = layer.ff_in.forward(g, h1);
            let f = g.gelu(f);
            let f = layer.ff_out.forward(g, f);
            let f = dropout(g, mode, f, rate);
            let r = g.add(h1, f);
            h = layer.ln_ff.forward(g, r);
        }
        Ok(h)
    }
}

/// Two-layer feed-forward map `d_in -> hidden (GeLU) -> d_out`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, hidden, seed),
            output: Linear::new(store, &format!("{name}.output"), hidden, d_out, seed),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.output.forward(g, h)
    }
}
