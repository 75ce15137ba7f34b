//! Pre-layernorm transformer block shared by the language model and the
//! mapping network trunk.

use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamSet};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

impl BlockParams {
    /// Registers one block under `prefix`. Residual projections use a
    /// depth-scaled std.
    pub(crate) fn init<T: Real>(
        ps: &mut ParamSet<T>,
        r: &mut Rng,
        prefix: &str,
        dim: usize,
        hidden: usize,
        std: f64,
        residual_std: f64,
        trainable: bool,
    ) -> Self {
        let mut add = |name: &str, t: Tensor<T>| ps.add(format!("{prefix}.{name}"), t, trainable);
        Self {
            ln1_g: add("ln1.weight", Tensor::full(&[dim], T::one())),
            ln1_b: add("ln1.bias", Tensor::zeros(&[dim])),
            w_qkv: add("attn.qkv.weight", rng::gaussian_tensor(r, &[dim, 3 * dim], std)),
            b_qkv: add("attn.qkv.bias", Tensor::zeros(&[3 * dim])),
            w_out: add("attn.out.weight", rng::gaussian_tensor(r, &[dim, dim], residual_std)),
            b_out: add("attn.out.bias", Tensor::zeros(&[dim])),
            ln2_g: add("ln2.weight", Tensor::full(&[dim], T::one())),
            ln2_b: add("ln2.bias", Tensor::zeros(&[dim])),
            w_fc: add("mlp.fc.weight", rng::gaussian_tensor(r, &[dim, hidden], std)),
            b_fc: add("mlp.fc.bias", Tensor::zeros(&[hidden])),
            w_proj: add("mlp.proj.weight", rng::gaussian_tensor(r, &[hidden, dim], residual_std)),
            b_proj: add("mlp.proj.bias", Tensor::zeros(&[dim])),
        }
    }

    /// Looks a block's parameters up by name, for loaded checkpoints.
    pub(crate) fn find<T: Real>(ps: &ParamSet<T>, prefix: &str) -> Option<Self> {
        let f = |name: &str| ps.find(&format!("{prefix}.{name}"));
        Some(Self {
            ln1_g: f("ln1.weight")?,
            ln1_b: f("ln1.bias")?,
            w_qkv: f("attn.qkv.weight")?,
            b_qkv: f("attn.qkv.bias")?,
            w_out: f("attn.out.weight")?,
            b_out: f("attn.out.bias")?,
            ln2_g: f("ln2.weight")?,
            ln2_b: f("ln2.bias")?,
            w_fc: f("mlp.fc.weight")?,
            b_fc: f("mlp.fc.bias")?,
            w_proj: f("mlp.proj.weight")?,
            b_proj: f("mlp.proj.bias")?,
        })
    }

    pub(crate) fn forward<'a, T: Real>(
        &self,
        ps: &'a ParamSet<T>,
        g: &mut Graph<'a, T>,
        x: Var,
        n_heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let dim = g.value(x).cols();
        let head_dim = dim / n_heads;
        let scale = T::from_f64(1.0 / Float::sqrt(head_dim as f64));

        let (g1, b1) = (ps.var(g, self.ln1_g), ps.var(g, self.ln1_b));
        let h = g.layer_norm(x, g1, b1)?;
        let w = ps.var(g, self.w_qkv);
        let b = ps.var(g, self.b_qkv);
        let qkv = g.matmul(h, w)?;
        let qkv = g.add_row(qkv, b)?;
        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            let q = g.slice_cols(qkv, i * head_dim, head_dim)?;
            let k = g.slice_cols(qkv, dim + i * head_dim, head_dim)?;
            let v = g.slice_cols(qkv, 2 * dim + i * head_dim, head_dim)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, scale);
            let p = if causal { g.causal_softmax(s)? } else { g.softmax(s) };
            heads.push(g.matmul(p, v)?);
        }
        let att = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let (w, b) = (ps.var(g, self.w_out), ps.var(g, self.b_out));
        let att = g.matmul(att, w)?;
        let att = g.add_row(att, b)?;
        let x = g.add(x, att)?;

        let (g2, b2) = (ps.var(g, self.ln2_g), ps.var(g, self.ln2_b));
        let h = g.layer_norm(x, g2, b2)?;
        let (w, b) = (ps.var(g, self.w_fc), ps.var(g, self.b_fc));
        let h = g.matmul(h, w)?;
        let h = g.add_row(h, b)?;
        let h = g.gelu(h);
        let (w, b) = (ps.var(g, self.w_proj), ps.var(g, self.b_proj));
        let h = g.matmul(h, w)?;
        let h = g.add_row(h, b)?;
        g.add(x, h)
    }
}
