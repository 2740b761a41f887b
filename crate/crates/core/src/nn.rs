//! Parameterised layers expressed in tape ops.
//!
//! A layer is a name prefix plus dimensions; weights live in the
//! [`ParamStore`] under `<prefix>.weight` / `<prefix>.bias`.

use crate::engine::{Ctx, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot uniform.
    Xavier,
    /// Kaiming uniform for ReLU fan-in.
    He,
    Normal(f64),
    Zeros,
}

fn init_tensor(shape: Vec<usize>, fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.uniform_tensor(shape, -a, a)
        }
        Init::He => {
            let a = (6.0 / fan_in as f64).sqrt();
            rng.uniform_tensor(shape, -a, a)
        }
        Init::Normal(std) => rng.normal_tensor(shape, std),
        Init::Zeros => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng, init: Init) -> Result<()> {
        let w = init_tensor(vec![self.in_dim, self.out_dim], self.in_dim, self.out_dim, init, rng);
        store.insert(self.weight_name(), w)?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(vec![self.out_dim]))?;
        }
        Ok(())
    }

    /// Applies `x · W + b` over the trailing axis of `x`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let last = ctx.shape(x).last().copied();
        if last != Some(self.in_dim) || ctx.shape(x).len() < 2 {
            return Err(Error::shape(
                "linear",
                format!("{} expects [.., {}], got {:?}", self.name, self.in_dim, ctx.shape(x)),
            ));
        }
        let w = ctx.param(&self.weight_name())?;
        let y = ctx.matmul(x, w)?;
        if self.bias {
            let b = ctx.param(&self.bias_name())?;
            ctx.add(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias { self.out_dim } else { 0 }
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            fc1: Linear::new(format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.fc1.register(store, rng, Init::He)?;
        self.fc2.register(store, rng, Init::Xavier)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.relu(h)?;
        self.fc2.forward(ctx, h)
    }
}

/// Layer norm over the trailing axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.weight", self.name), Tensor::full(vec![self.dim], 1.0))?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.dim]))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.layer_norm(x)?;
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        let y = ctx.mul(n, w)?;
        ctx.add(y, b)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/out maps.
/// The key map has no bias: softmax over keys would cancel it.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim).without_bias(),
            v: Linear::new(format!("{name}.v"), dim, dim),
            out: Linear::new(format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.register(store, rng, Init::Xavier)?;
        }
        Ok(())
    }

    fn split_heads(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let r = ctx.reshape(x, &[b, n, self.heads, self.dim / self.heads])?;
        ctx.permute(r, &[0, 2, 1, 3])
    }

    /// Attends from `queries` `[B, Nq, D]` to `context` `[B, Nk, D]`.
    /// Also returns the attention weights `[B, heads, Nq, Nk]`.
    pub fn forward_with_weights(&self, ctx: &mut Ctx, queries: Var, context: Var) -> Result<(Var, Var)> {
        let qs = ctx.shape(queries).to_vec();
        if qs.len() != 3 || ctx.shape(context).len() != 3 || ctx.shape(context)[0] != qs[0] {
            return Err(Error::shape(
                "attention",
                format!("queries {:?}, context {:?}", qs, ctx.shape(context)),
            ));
        }
        let q = self.q.forward(ctx, queries)?;
        let k = self.k.forward(ctx, context)?;
        let v = self.v.forward(ctx, context)?;
        let (q, k, v) = (self.split_heads(ctx, q)?, self.split_heads(ctx, k)?, self.split_heads(ctx, v)?);
        let scores = ctx.matmul_nt(q, k)?;
        let scores = ctx.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt())?;
        let probs = ctx.softmax(scores)?;
        let mixed = ctx.matmul(probs, v)?;
        let merged = ctx.permute(mixed, &[0, 2, 1, 3])?;
        let merged = ctx.reshape(merged, &[qs[0], qs[1], self.dim])?;
        Ok((self.out.forward(ctx, merged)?, probs))
    }

    pub fn forward(&self, ctx: &mut Ctx, queries: Var, context: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, queries, context)?.0)
    }
}

/// Square-kernel convolution over NHWC tensors.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d { proj: Linear::new(name, kernel * kernel * in_c, out_c), kernel, stride, pad }
    }

    pub fn without_bias(mut self) -> Self {
        self.proj = self.proj.without_bias();
        self
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng, init: Init) -> Result<()> {
        self.proj.register(store, rng, init)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let cols = ctx.im2col(x, self.kernel, self.stride, self.pad)?;
        self.proj.forward(ctx, cols)
    }
}
