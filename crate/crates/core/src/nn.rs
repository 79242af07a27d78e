//! Parameterized layers: linear maps, layer norm, multi-head attention, the
//! zero-initialized projection and the gating MLP.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Fan-in scaled normal weights.
fn init_weight(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::randn([d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init_weight(d_in, d_out, rng), trainable)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros([d_out]), trainable)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// Registers a copy of `src`'s tensors under a new name.
    pub fn copy_of(store: &mut ParamStore, name: &str, src: &Linear, trainable: bool) -> Result<Self> {
        let w = store.add(format!("{name}.w"), store.value(src.w).clone(), trainable)?;
        let b = match src.b {
            Some(b) => Some(store.add(format!("{name}.b"), store.value(b).clone(), trainable)?),
            None => None,
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.add_suffix(y, p[b]),
            None => Ok(y),
        }
    }
}

/// `x·W + b` with `W` and `b` exactly zero at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroLinear(pub Linear);

impl ZeroLinear {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros([d, d]), trainable)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([d]), trainable)?;
        Ok(Self(Linear { w, b: Some(b) }))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.0.forward(g, p, x)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::ones([d]), trainable)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d]), trainable)?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)
    }
}

/// Bias-free multi-head attention with scale `1/sqrt(d/heads)`. No masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), init_weight(dim, dim, rng), trainable);
        Ok(Self {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            heads,
            dim,
        })
    }

    /// New parameters holding bitwise copies of `src`'s projections.
    pub fn copy_of(store: &mut ParamStore, name: &str, src: &Self, trainable: bool) -> Result<Self> {
        let mut copy = |suffix: &str, id: ParamId| {
            let value = store.value(id).clone();
            store.add(format!("{name}.{suffix}"), value, trainable)
        };
        Ok(Self {
            wq: copy("wq", src.wq)?,
            wk: copy("wk", src.wk)?,
            wv: copy("wv", src.wv)?,
            wo: copy("wo", src.wo)?,
            heads: src.heads,
            dim: src.dim,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `q_in: [N, S, d]` attends over `kv_in: [N, T, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, q_in: Var, kv_in: Var) -> Result<Var> {
        let (qs, ks) = (g.shape(q_in).to_vec(), g.shape(kv_in).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(Error::shape("mha", format!("q {qs:?}, kv {ks:?}, dim {}", self.dim)));
        }
        let (n, s, t, h, hd) = (qs[0], qs[1], ks[1], self.heads, self.head_dim());
        let heads = |g: &mut Graph<T>, x: Var, w: ParamId, len: usize| -> Result<Var> {
            let y = g.matmul(x, p[w])?;
            let y = g.reshape(y, [n, len, h, hd])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(g, q_in, self.wq, s)?;
        let k = heads(g, kv_in, self.wk, t)?;
        let v = heads(g, kv_in, self.wv, t)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, T::of(1.0 / (hd as f64).sqrt()));
        let weights = g.softmax(scores)?;
        let o = g.matmul(weights, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, [n, s, self.dim])?;
        g.matmul(o, p[self.wo])
    }
}

/// Two-layer MLP with GELU in between.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, trainable, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, trainable, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// `sigmoid(gelu(x·W1 + b1)·W2 + b2)`; every output lies in (0, 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateProj(pub Mlp);

impl GateProj {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, trainable: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self(Mlp::new(store, name, d, d, d, trainable, rng)?))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let logits = self.0.forward(g, p, x)?;
        Ok(g.sigmoid(logits))
    }

    pub fn ids(&self) -> [ParamId; 4] {
        let m = &self.0;
        [m.fc1.w, m.fc1.b.unwrap(), m.fc2.w, m.fc2.b.unwrap()]
    }
}
