use super::params::{Graph, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, Tensor, Var};

/// Low-rank additive correction `A * B` to a frozen `out x in` weight.
#[derive(Clone, Copy, Debug)]
pub struct LowRank {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

/// Affine map `x W^T + b` with `W: out x in`, optionally carrying a low-rank adapter.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<LowRank>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(out, inp), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true);
        Linear { weight, bias: Some(bias), adapter: None, in_dim: inp, out_dim: out }
    }

    pub fn without_bias<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(out, inp), true);
        Linear { weight, bias: None, adapter: None, in_dim: inp, out_dim: out }
    }

    /// Zero weight and bias: the map outputs exactly zero until trained.
    pub fn zeros<S: Scalar>(store: &mut ParamStore<S>, name: &str, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[out, inp]), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true);
        Linear { weight, bias: Some(bias), adapter: None, in_dim: inp, out_dim: out }
    }

    /// Attaches a rank-`rank` adapter; `A` starts at zero so the effective
    /// weight initially equals the frozen one.
    pub fn attach_adapter<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        init: &mut Init,
        name: &str,
        rank: usize,
    ) -> Result<()> {
        check_adapter_rank(self.out_dim, self.in_dim, rank)?;
        let a = store.add(format!("{name}.lora_a"), Tensor::zeros(&[self.out_dim, rank]), true);
        let b = store.add(format!("{name}.lora_b"), init.xavier(rank, self.in_dim), true);
        self.adapter = Some(LowRank { a, b, rank });
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let mut y = g.tape.matmul_nt(x, w)?;
        if let Some(ad) = self.adapter {
            let (a, b) = (g.param(ad.a), g.param(ad.b));
            let xb = g.tape.matmul_nt(x, b)?;
            let delta = g.tape.matmul_nt(xb, a)?;
            y = g.tape.add(y, delta)?;
        }
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.tape.add_row(y, b)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        if let Some(ad) = self.adapter {
            v.extend([ad.a, ad.b]);
        }
        v
    }
}

pub fn check_adapter_rank(out: usize, inp: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank >= out.min(inp) {
        return Err(Error::Config(format!(
            "adapter rank {rank} must lie in 1..{} for a {out}x{inp} weight",
            out.min(inp)
        )));
    }
    Ok(())
}

/// Effective adapted weight `W + A * B` for `W: d_out x d_in`, `A: d_out x r`, `B: r x d_in`.
pub fn apply_low_rank_adapter<S: Scalar>(tape: &mut Tape<S>, w: Var, a: Var, b: Var) -> Result<Var> {
    let (ws, as_, bs) = (tape.shape(w).to_vec(), tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if ws.len() != 2 || as_.len() != 2 || bs.len() != 2 || as_[0] != ws[0] || bs[1] != ws[1] || as_[1] != bs[0] {
        return Err(Error::dim("low_rank_adapter", &ws, &[as_[0], as_[1], bs[1]]));
    }
    check_adapter_rank(ws[0], ws[1], as_[1])?;
    let ab = tape.matmul(a, b)?;
    tape.add(w, ab)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], S::one()), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.tape.layer_norm(x, gain, bias)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, out),
        }
    }

    /// Same as [`FeedForward::new`] with the second layer zeroed.
    pub fn zero_output<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), dim, hidden),
            down: Linear::zeros(store, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        zero_output: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let wo = if zero_output {
            Linear::zeros(store, &format!("{name}.wo"), dim, dim)
        } else {
            Linear::new(store, init, &format!("{name}.wo"), dim, dim)
        };
        Ok(MultiHeadAttention {
            wq: Linear::new(store, init, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, init, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, init, &format!("{name}.wv"), dim, dim),
            wo,
            heads,
        })
    }

    /// Concatenated per-head attention output, before the output projection.
    pub fn attend<S: Scalar>(&self, g: &mut Graph<S>, queries: Var, memory: Var, mask: Option<&Mask>) -> Result<Var> {
        let q = self.wq.forward(g, queries)?;
        let k = self.wk.forward(g, memory)?;
        let v = self.wv.forward(g, memory)?;
        g.tape.attention(q, k, v, mask, self.heads)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, queries: Var, memory: Var, mask: Option<&Mask>) -> Result<Var> {
        let o = self.attend(g, queries, memory, mask)?;
        self.wo.forward(g, o)
    }
}
