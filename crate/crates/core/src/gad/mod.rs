//! Learnable group queries, the cascaded grouping transformer stacks and the
//! prediction heads.

mod heads;

pub use heads::{HeadOutputs, Heads, PredictionSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Graph, Init, LayerNorm, MultiHeadAttention, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_vis: usize,
    pub ffn_mult: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig { layers: 3, heads: 4, d_vis: 64, ffn_mult: 4 }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_vis.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_vis {} not divisible by {} heads", self.d_vis, self.heads)));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("grouping stack needs at least one layer and a nonzero FFN width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct GroupingLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// `N` pre-norm layers over the joint set `[group tokens; actor tokens]`:
/// self-attention, cross-attention to the frame features, FFN.
#[derive(Clone, Debug)]
pub struct GroupingStack {
    layers: Vec<GroupingLayer>,
    final_ln: LayerNorm,
}

impl GroupingStack {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        name: &str,
        cfg: &GroupingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_vis;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.layer{l}");
            layers.push(GroupingLayer {
                ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
                self_attn: MultiHeadAttention::new(store, init, &format!("{p}.self_attn"), d, cfg.heads, false)?,
                ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                cross_attn: MultiHeadAttention::new(store, init, &format!("{p}.cross_attn"), d, cfg.heads, false)?,
                ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
                ffn: FeedForward::new(store, init, &format!("{p}.ffn"), d, cfg.ffn_mult * d, d),
            });
        }
        Ok(GroupingStack { layers, final_ln: LayerNorm::new(store, &format!("{name}.ln_final"), d) })
    }

    /// `(v_g: K x D, v_a: A x D, v_f: T x D) -> (v_g, v_a)`. `A` may be zero.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, v_g: Var, v_a: Var, v_f: Var) -> Result<(Var, Var)> {
        let k = g.value(v_g).rows();
        let a = g.value(v_a).rows();
        let mut x = g.tape.concat_rows(&[v_g, v_a])?;
        for l in &self.layers {
            let h = l.ln_self.forward(g, x)?;
            let s = l.self_attn.forward(g, h, h, None)?;
            x = g.tape.add(x, s)?;
            let h = l.ln_cross.forward(g, x)?;
            let c = l.cross_attn.forward(g, h, v_f, None)?;
            x = g.tape.add(x, c)?;
            let h = l.ln_ffn.forward(g, x)?;
            let f = l.ffn.forward(g, h)?;
            x = g.tape.add(x, f)?;
        }
        let x = self.final_ln.forward(g, x)?;
        Ok((g.tape.slice_rows(x, 0, k)?, g.tape.slice_rows(x, k, a)?))
    }
}

/// Trainable `K x D_vis` group queries.
#[derive(Clone, Debug)]
pub struct GroupQueries {
    pub q: ParamId,
    pub k: usize,
}

impl GroupQueries {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, name: &str, k: usize, d: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("at least one group query is required".into()));
        }
        let q = store.add(format!("{name}.queries"), init.normal(&[k, d], 1.0 / (d as f64).sqrt()), true);
        Ok(GroupQueries { q, k })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Init { rng }.normal(shape, 1.0)
    }

    fn stack(d: usize) -> (ParamStore<f64>, GroupingStack) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GroupingConfig { d_vis: d, ..Default::default() };
        let s = GroupingStack::new(&mut store, &mut Init { rng: &mut rng }, "stage1", &cfg).unwrap();
        (store, s)
    }

    #[test]
    fn shapes_and_actor_permutation() {
        let (store, s) = stack(64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, a, f) =
            (rand_tensor(&mut rng, &[12, 64]), rand_tensor(&mut rng, &[7, 64]), rand_tensor(&mut rng, &[5, 64]));
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let run = |actors: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let (qv, av, fv) = (g.input(q.clone()), g.input(actors), g.input(f.clone()));
            let (vg, va) = s.forward(&mut g, qv, av, fv).unwrap();
            (g.value(vg).clone(), g.value(va).clone())
        };
        let (vg, va) = run(a.clone());
        assert_eq!(vg.shape(), &[12, 64]);
        assert_eq!(va.shape(), &[7, 64]);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| a.row(i).to_vec()).collect();
        let (vg2, va2) = run(Tensor::from_rows(&rows).unwrap());
        assert!(vg.max_abs_diff(&vg2) < 1e-9);
        for (r, &i) in perm.iter().enumerate() {
            let d = va2.row(r).iter().zip(va.row(i)).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn zero_actors_and_zero_inputs() {
        let (store, s) = stack(16);
        let mut g = Graph::new(&store);
        let q = g.input(Tensor::zeros(&[3, 16]));
        let a = g.input(Tensor::zeros(&[0, 16]));
        let f = g.input(Tensor::zeros(&[5, 16]));
        let (vg, va) = s.forward(&mut g, q, a, f).unwrap();
        assert_eq!(g.value(vg).shape(), &[3, 16]);
        assert_eq!(g.value(va).shape(), &[0, 16]);
        assert!(g.value(vg).is_finite());
    }

    #[test]
    fn gradient_reaches_queries() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = GroupingConfig { d_vis: 16, ..Default::default() };
        let mut init = Init { rng: &mut rng };
        let q = GroupQueries::new(&mut store, &mut init, "gad", 3, 16).unwrap();
        let s1 = GroupingStack::new(&mut store, &mut init, "stage1", &cfg).unwrap();
        let s2 = GroupingStack::new(&mut store, &mut init, "stage2", &cfg).unwrap();
        let a = init.normal::<f64>(&[4, 16], 1.0);
        let f = init.normal::<f64>(&[5, 16], 1.0);
        let mut g = Graph::new(&store);
        let (qv, av, fv) = (g.param(q.q), g.input(a), g.input(f));
        let (vg, va) = s1.forward(&mut g, qv, av, fv).unwrap();
        let (vg, _) = s2.forward(&mut g, vg, va, fv).unwrap();
        let sq = g.tape.mul(vg, vg).unwrap();
        let loss = g.tape.sum(sq);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let gq = grads.iter().find(|(id, _)| *id == q.q).unwrap();
        assert!(gq.1.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = GroupingConfig { d_vis: 10, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
