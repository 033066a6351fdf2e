//! Dual-alignment fusion of visual group/actor features with the decoder's
//! `<GROUP>` / `<ACT>` states.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Pairing of visual queries with text keys/values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdafVariant {
    /// groups attend to `<GROUP>` states, actors to `<ACT>`.
    Sp2,
    /// groups attend to `<ACT>`, actors to `<GROUP>` states.
    Sp1,
    /// one block, all visual tokens against all text tokens.
    Con1,
    /// groups and actors separately against all text tokens.
    Con2,
    /// identity.
    Bypass,
}

impl MdafVariant {
    pub const ALL: [MdafVariant; 5] =
        [MdafVariant::Sp2, MdafVariant::Sp1, MdafVariant::Con1, MdafVariant::Con2, MdafVariant::Bypass];

    pub fn name(self) -> &'static str {
        match self {
            MdafVariant::Sp2 => "sp2",
            MdafVariant::Sp1 => "sp1",
            MdafVariant::Con1 => "con1",
            MdafVariant::Con2 => "con2",
            MdafVariant::Bypass => "bypass",
        }
    }

    fn blocks(self) -> usize {
        match self {
            MdafVariant::Bypass => 0,
            MdafVariant::Con1 => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for MdafVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MdafVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown fusion variant {s:?} (sp2, sp1, con1, con2, bypass)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdafConfig {
    pub variant: MdafVariant,
    pub heads: usize,
    pub d_vis: usize,
    pub d_text: usize,
}

impl Default for MdafConfig {
    fn default() -> Self {
        MdafConfig { variant: MdafVariant::Sp2, heads: 4, d_vis: 64, d_text: 64 }
    }
}

#[derive(Clone, Debug)]
struct CrossBlock {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossBlock {
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, q: Var, kv: Var) -> Result<Var> {
        let h = self.ln.forward(g, q)?;
        let a = self.attn.forward(g, h, kv, None)?;
        g.tape.add(q, a)
    }
}

#[derive(Clone, Debug)]
pub struct Mdaf {
    pub cfg: MdafConfig,
    text_proj: Option<Linear>,
    blocks: Vec<CrossBlock>,
    ffn: Option<(LayerNorm, FeedForward)>,
}

impl Mdaf {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, cfg: &MdafConfig) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d_vis.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("d_vis {} not divisible by {} heads", cfg.d_vis, cfg.heads)));
        }
        let p = "mdaf";
        let d = cfg.d_vis;
        let mut blocks = Vec::new();
        for b in 0..cfg.variant.blocks() {
            blocks.push(CrossBlock {
                ln: LayerNorm::new(store, &format!("{p}.block{b}.ln"), d),
                attn: MultiHeadAttention::new(store, init, &format!("{p}.block{b}.attn"), d, cfg.heads, true)?,
            });
        }
        let (text_proj, ffn) = if cfg.variant == MdafVariant::Bypass {
            (None, None)
        } else {
            (
                Some(Linear::new(store, init, &format!("{p}.text_proj"), cfg.d_text, d)),
                Some((
                    LayerNorm::new(store, &format!("{p}.ffn_ln"), d),
                    FeedForward::zero_output(store, init, &format!("{p}.ffn"), d, 4 * d),
                )),
            )
        };
        Ok(Mdaf { cfg: cfg.clone(), text_proj, blocks, ffn })
    }

    /// `(v_a: A x D_vis, v_g: K x D_vis, h_a: 1 x D_text, h_g: K x D_text)`
    /// to enhanced `(v_a, v_g)`. A missing text input drops its rows from the
    /// keys/values; a block left without keys is skipped.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        v_a: Var,
        v_g: Var,
        h_a: Option<Var>,
        h_g: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (Some(proj), Some((ffn_ln, ffn))) = (&self.text_proj, &self.ffn) else {
            return Ok((v_a, v_g));
        };
        let k = g.value(v_g).rows();
        if let Some(h) = h_g {
            if g.value(h).rows() != k {
                return Err(Error::dim("fusion <GROUP> states", &[k, self.cfg.d_text], g.value(h).shape()));
            }
        }
        let pa = h_a.map(|h| proj.forward(g, h)).transpose()?;
        let pg = h_g.map(|h| proj.forward(g, h)).transpose()?;
        let both = match (pa, pg) {
            (Some(a), Some(b)) => Some(g.tape.concat_rows(&[a, b])?),
            (a, b) => a.or(b),
        };
        let (mut xg, mut xa) = (v_g, v_a);
        match self.cfg.variant {
            MdafVariant::Sp2 | MdafVariant::Sp1 => {
                let (kv_g, kv_a) = if self.cfg.variant == MdafVariant::Sp2 { (pg, pa) } else { (pa, pg) };
                if let Some(kv) = kv_g {
                    xg = self.blocks[0].forward(g, xg, kv)?;
                }
                if let Some(kv) = kv_a {
                    xa = self.blocks[1].forward(g, xa, kv)?;
                }
            }
            MdafVariant::Con1 => {
                if let Some(kv) = both {
                    let x = g.tape.concat_rows(&[xg, xa])?;
                    let x = self.blocks[0].forward(g, x, kv)?;
                    let a = g.value(v_a).rows();
                    xg = g.tape.slice_rows(x, 0, k)?;
                    xa = g.tape.slice_rows(x, k, a)?;
                }
            }
            MdafVariant::Con2 => {
                if let Some(kv) = both {
                    xg = self.blocks[0].forward(g, xg, kv)?;
                    xa = self.blocks[1].forward(g, xa, kv)?;
                }
            }
            MdafVariant::Bypass => unreachable!("bypass has no projection"),
        }
        let a = g.value(v_a).rows();
        let x = g.tape.concat_rows(&[xg, xa])?;
        let h = ffn_ln.forward(g, x)?;
        let f = ffn.forward(g, h)?;
        let x = g.tape.add(x, f)?;
        Ok((g.tape.slice_rows(x, k, a)?, g.tape.slice_rows(x, 0, k)?))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    struct Case {
        va: Tensor<f64>,
        vg: Tensor<f64>,
        ha: Tensor<f64>,
        hg: Tensor<f64>,
    }

    fn case(a: usize, k: usize, dv: usize, dt: usize) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut init = Init { rng: &mut rng };
        Case {
            va: init.normal(&[a, dv], 1.0),
            vg: init.normal(&[k, dv], 1.0),
            ha: init.normal(&[1, dt], 1.0),
            hg: init.normal(&[k, dt], 1.0),
        }
    }

    fn build(variant: MdafVariant, dv: usize, dt: usize) -> (ParamStore<f64>, Mdaf) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MdafConfig { variant, heads: 4, d_vis: dv, d_text: dt };
        let m = Mdaf::new(&mut store, &mut Init { rng: &mut rng }, &cfg).unwrap();
        (store, m)
    }

    #[test]
    fn identity_at_init_every_variant() {
        let c = case(7, 12, 64, 64);
        for v in MdafVariant::ALL {
            let (store, m) = build(v, 64, 64);
            let mut g = Graph::new(&store);
            let (va, vg, ha, hg) =
                (g.input(c.va.clone()), g.input(c.vg.clone()), g.input(c.ha.clone()), g.input(c.hg.clone()));
            let (oa, og) = m.forward(&mut g, va, vg, Some(ha), Some(hg)).unwrap();
            assert_eq!(g.value(oa).shape(), &[7, 64]);
            assert_eq!(g.value(og).shape(), &[12, 64]);
            assert!(g.value(oa).max_abs_diff(&c.va) <= 1e-12, "{v}");
            assert!(g.value(og).max_abs_diff(&c.vg) <= 1e-12, "{v}");
        }
    }

    #[test]
    fn single_key_attention_returns_the_value_row() {
        let c = case(5, 3, 16, 8);
        let (store, m) = build(MdafVariant::Sp2, 16, 8);
        let mut g = Graph::new(&store);
        let (va, ha) = (g.input(c.va.clone()), g.input(c.ha.clone()));
        let pa = m.text_proj.as_ref().unwrap().forward(&mut g, ha).unwrap();
        let blk = &m.blocks[1];
        let q = blk.ln.forward(&mut g, va).unwrap();
        let out = blk.attn.attend(&mut g, q, pa, None).unwrap();
        let value = blk.attn.wv.forward(&mut g, pa).unwrap();
        let value = g.value(value).row(0).to_vec();
        for r in 0..5 {
            let d = g.value(out).row(r).iter().zip(&value).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn group_state_rows_must_match() {
        let c = case(3, 4, 16, 8);
        let (store, m) = build(MdafVariant::Sp2, 16, 8);
        let mut g = Graph::new(&store);
        let (va, vg, ha) = (g.input(c.va), g.input(c.vg), g.input(c.ha));
        let bad = g.input(Tensor::zeros(&[3, 8]));
        assert!(matches!(m.forward(&mut g, va, vg, Some(ha), Some(bad)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gradient_reaches_text_inputs_and_projection() {
        let c = case(4, 3, 16, 8);
        for v in [MdafVariant::Sp2, MdafVariant::Sp1, MdafVariant::Con1, MdafVariant::Con2] {
            let (mut store, m) = build(v, 16, 8);
            // leave the identity start so gradients pass the output projections
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let names: Vec<String> = store
                .iter()
                .filter(|(_, p)| p.value.data().iter().all(|&x| x == 0.0) && p.name.contains("weight"))
                .map(|(_, p)| p.name.clone())
                .collect();
            for n in names {
                let shape = store.get(store.id(&n).unwrap()).value.shape().to_vec();
                store.assign(&n, Init { rng: &mut rng }.normal(&shape, 0.3)).unwrap();
            }
            let mut g = Graph::new(&store);
            let (va, vg) = (g.input(c.va.clone()), g.input(c.vg.clone()));
            let ha = g.tape.param(c.ha.clone());
            let hg = g.tape.param(c.hg.clone());
            let (oa, og) = m.forward(&mut g, va, vg, Some(ha), Some(hg)).unwrap();
            let x = g.tape.concat_rows(&[oa, og]).unwrap();
            let sq = g.tape.mul(x, x).unwrap();
            let loss = g.tape.sum(sq);
            g.backward(loss).unwrap();
            for h in [ha, hg] {
                assert!(g.tape.grad(h).unwrap().iter().any(|&x| x != 0.0), "{v}");
            }
            let w = m.text_proj.as_ref().unwrap().weight;
            assert!(g.param_grads().iter().any(|(id, gr)| *id == w && gr.iter().any(|&x| x != 0.0)));
        }
    }

    #[test]
    fn missing_text_inputs_skip_blocks() {
        let c = case(3, 2, 16, 8);
        for v in MdafVariant::ALL {
            let (store, m) = build(v, 16, 8);
            let mut g = Graph::new(&store);
            let (va, vg) = (g.input(c.va.clone()), g.input(c.vg.clone()));
            let (oa, og) = m.forward(&mut g, va, vg, None, None).unwrap();
            assert_eq!(g.value(oa), &c.va);
            assert_eq!(g.value(og), &c.vg);
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in MdafVariant::ALL {
            assert_eq!(v.name().parse::<MdafVariant>().unwrap(), v);
        }
        assert!("sp3".parse::<MdafVariant>().is_err());
    }
}
