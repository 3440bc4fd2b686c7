//! Layers shared by the frontend, encoder and decoder.
//!
//! Layers are lightweight descriptors: they know their parameter names and
//! shapes, while the values live in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::rng::WkRng;
use crate::tensor::{Graph, ParamStore, Precision, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Creates parameters in a store.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut WkRng,
    pub precision: Precision,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut WkRng, precision: Precision) -> Self {
        Initializer { store, rng, precision }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store.insert(
            name,
            Tensor::new(shape.to_vec(), data, self.precision).expect("valid shape"),
        );
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        let n: usize = shape.iter().product();
        self.store.insert(
            name,
            Tensor::new(shape.to_vec(), vec![value; n], self.precision).expect("valid shape"),
        );
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, init: &mut Initializer) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        init.uniform(&self.weight(), &[self.in_dim, self.out_dim], bound);
        init.constant(&self.bias(), &[self.out_dim], 0.0);
    }

    /// Zero weight and bias, so the layer outputs zeros.
    pub fn init_zero(&self, init: &mut Initializer) {
        init.constant(&self.weight(), &[self.in_dim, self.out_dim], 0.0);
        init.constant(&self.bias(), &[self.out_dim], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, &self.weight())?;
        let b = g.param(p, &self.bias())?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn init(&self, init: &mut Initializer) {
        init.constant(&format!("{}.gamma", self.name), &[self.dim], 1.0);
        init.constant(&format!("{}.beta", self.name), &[self.dim], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(p, &format!("{}.gamma", self.name))?;
        let beta = g.param(p, &format!("{}.beta", self.name))?;
        let n = g.layer_norm(x, LN_EPS);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Position-wise feed-forward: linear, swish, linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(format!("{name}.up"), dim, hidden),
            down: Linear::new(format!("{name}.down"), hidden, dim),
        }
    }

    pub fn init(&self, init: &mut Initializer) {
        self.up.init(init);
        self.down.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.swish(h);
        self.down.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product attention with an optional learned
/// relative-position bias (self-attention only).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    /// Relative distances are clipped to `[-max_rel, max_rel]`; `None` disables the bias.
    pub max_rel: Option<usize>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, max_rel: Option<usize>) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "hidden dim must divide evenly into heads"
        );
        MultiHeadAttention {
            name: name.to_string(),
            dim,
            heads,
            max_rel,
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            out: Linear::new(format!("{name}.out"), dim, dim),
        }
    }

    fn rel_bias_name(&self) -> String {
        format!("{}.rel_bias", self.name)
    }

    pub fn init(&self, init: &mut Initializer) {
        self.q.init(init);
        self.k.init(init);
        self.v.init(init);
        self.out.init(init);
        if let Some(r) = self.max_rel {
            init.constant(&self.rel_bias_name(), &[2 * r + 1, self.heads], 0.0);
        }
    }

    /// `query` is `T×D`, `memory` is `S×D`. `mask` (if any) is a `T×S` additive constant.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, query: Var, memory: Var, mask: Option<Var>) -> Result<Var> {
        let (t, _) = g.dims(query);
        let (s, _) = g.dims(memory);
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, memory)?;
        let v = self.v.forward(g, p, memory)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let rel = match self.max_rel {
            Some(r) if t == s => {
                let table = g.param(p, &self.rel_bias_name())?;
                let ids: Vec<usize> = (0..t)
                    .flat_map(|i| {
                        (0..s).map(move |j| {
                            ((j as isize - i as isize).clamp(-(r as isize), r as isize) + r as isize) as usize
                        })
                    })
                    .collect();
                let gathered = g.embedding(table, &ids)?;
                Some(g.transpose(gathered))
            }
            _ => None,
        };

        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let scores = g.matmul_t(qh, false, kh, true)?;
            let mut scores = g.scale(scores, scale);
            if let Some(rel) = rel {
                let row = g.slice(rel, 0, h, h + 1)?;
                let bias = g.reshape(row, t, s)?;
                scores = g.add(scores, bias)?;
            }
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out.forward(g, p, cat)
    }
}

/// Depthwise convolution over time with a per-channel bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub name: String,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn new(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        DepthwiseConv {
            name: name.into(),
            channels,
            kernel,
        }
    }

    pub fn init(&self, init: &mut Initializer) {
        let bound = 1.0 / (self.kernel as f64).sqrt();
        init.uniform(&format!("{}.weight", self.name), &[self.kernel, self.channels], bound);
        init.constant(&format!("{}.bias", self.name), &[self.channels], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}.weight", self.name))?;
        let b = g.param(p, &format!("{}.bias", self.name))?;
        let y = g.depthwise_conv1d(x, w)?;
        g.add(y, b)
    }
}

/// Fixed sinusoidal position table, `len×dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Additive causal mask: `-inf` above the diagonal.
pub fn causal_mask(len: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            m[i * len + j] = f64::NEG_INFINITY;
        }
    }
    m
}
