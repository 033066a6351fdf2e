use crate::error::Result;
use crate::nn::{FeedForward, Graph, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::scene::Taxonomy;
use crate::tensor::{Tensor, Var};

/// Head outputs as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `K x (C_g + 1)`, last column is the no-group class.
    pub group_logits: Var,
    /// `A x (K + 1)`, last column is the outlier slot.
    pub membership_logits: Var,
    /// `A x C_ind`.
    pub action_logits: Var,
    /// `1 x C` multi-label logits.
    pub act_logits: Var,
}

/// Detached head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub group_logits: Tensor<f64>,
    pub membership_logits: Tensor<f64>,
    pub action_logits: Tensor<f64>,
    pub act_logits: Vec<f64>,
}

impl HeadOutputs {
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> PredictionSet {
        PredictionSet {
            group_logits: g.value(self.group_logits).cast(),
            membership_logits: g.value(self.membership_logits).cast(),
            action_logits: g.value(self.action_logits).cast(),
            act_logits: g.value(self.act_logits).data().iter().map(|x| x.as_f64()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    group: Linear,
    mem_actor: Linear,
    mem_group: Linear,
    mem_outlier: Linear,
    action: Linear,
    act: FeedForward,
    pooled_act: FeedForward,
    d_vis: usize,
}

impl Heads {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        taxonomy: &Taxonomy,
        d_vis: usize,
        d_text: usize,
    ) -> Self {
        let p = "heads";
        let c = taxonomy.num_classes();
        Heads {
            group: Linear::new(store, init, &format!("{p}.group"), d_vis, taxonomy.num_group_activities() + 1),
            mem_actor: Linear::new(store, init, &format!("{p}.member_actor"), d_vis, d_vis),
            mem_group: Linear::new(store, init, &format!("{p}.member_group"), d_vis, d_vis),
            mem_outlier: Linear::new(store, init, &format!("{p}.member_outlier"), d_vis, 1),
            action: Linear::new(store, init, &format!("{p}.action"), d_vis, taxonomy.num_actions()),
            act: FeedForward::new(store, init, &format!("{p}.act"), d_text, d_text, c),
            pooled_act: FeedForward::new(store, init, &format!("{p}.pooled_act"), d_vis, d_vis, c),
            d_vis,
        }
    }

    /// `h_a` is the `1 x D_text` `<ACT>` state; without it the multi-label
    /// logits come from the mean-pooled group features.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, v_g: Var, v_a: Var, h_a: Option<Var>) -> Result<HeadOutputs> {
        let group_logits = self.group.forward(g, v_g)?;
        let pa = self.mem_actor.forward(g, v_a)?;
        let pg = self.mem_group.forward(g, v_g)?;
        let dot = g.tape.matmul_nt(pa, pg)?;
        let dot = g.tape.scale(dot, S::lit(1.0 / (self.d_vis as f64).sqrt()));
        let out = self.mem_outlier.forward(g, v_a)?;
        let membership_logits = g.tape.concat_cols(&[dot, out])?;
        let action_logits = self.action.forward(g, v_a)?;
        let act_logits = match h_a {
            Some(h) => self.act.forward(g, h)?,
            None => {
                let pooled = g.tape.mean_rows(v_g);
                self.pooled_act.forward(g, pooled)?
            }
        };
        Ok(HeadOutputs { group_logits, membership_logits, action_logits, act_logits })
    }
}
