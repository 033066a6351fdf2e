//! The full detector: decoder states, first grouping stack, fusion, second
//! grouping stack and heads, plus the per-clip objective.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gad::{GroupQueries, GroupingConfig, GroupingStack, HeadOutputs, Heads, PredictionSet};
use crate::loss::{
    act_multilabel_loss, consistency_loss, group_activity_loss, hungarian, individual_action_loss, matching_cost,
    membership_loss, total_loss, LossParts, LossValues, LossWeights, Matching,
};
use crate::mdaf::{Mdaf, MdafConfig, MdafVariant};
use crate::nn::{Graph, Init, Linear, ParamStore};
use crate::reasoning::{build_prompt, nll_total, DecoderConfig, PromptSequence, ReasoningDecoder, Vocabulary};
use crate::scalar::Scalar;
use crate::scene::{FeatureBundle, Featurizer, SceneClip, Taxonomy};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of group queries and `<GROUP_i>` tokens.
    pub k: usize,
    pub grouping: GroupingConfig,
    pub decoder: DecoderConfig,
    pub mdaf_variant: MdafVariant,
    pub mdaf_heads: usize,
    pub use_group_tokens: bool,
    pub use_act_token: bool,
    pub use_l_act: bool,
    /// Put the decoder on the tape and add its NLL to the objective.
    pub train_reasoning: bool,
    pub weights: LossWeights,
    pub match_mu: f64,
    pub taxonomy: Taxonomy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 12,
            grouping: GroupingConfig::default(),
            decoder: DecoderConfig::default(),
            mdaf_variant: MdafVariant::Sp2,
            mdaf_heads: 4,
            use_group_tokens: true,
            use_act_token: true,
            use_l_act: true,
            train_reasoning: false,
            weights: LossWeights::default(),
            match_mu: 1.0,
            taxonomy: Taxonomy::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        self.grouping.validate()?;
        self.decoder.validate()?;
        self.weights.validate()?;
        self.taxonomy.validate()?;
        if !(self.match_mu.is_finite() && self.match_mu >= 0.0) {
            return Err(Error::Config(format!("match_mu {} must be nonnegative", self.match_mu)));
        }
        Ok(())
    }

    /// Whether any part of the forward pass reads decoder states.
    pub fn needs_text(&self) -> bool {
        self.use_group_tokens || self.use_act_token || self.train_reasoning
    }
}

/// A clip with everything the model reads precomputed.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub clip: SceneClip,
    pub features: FeatureBundle,
    pub prompt: PromptSequence,
    pub label: Vec<f64>,
}

impl PreparedClip {
    pub fn new(clip: SceneClip, featurizer: &Featurizer, vocab: &Vocabulary, taxonomy: &Taxonomy) -> Result<Self> {
        let features = featurizer.featurize(&clip);
        let prompt = build_prompt(&clip, vocab)?;
        let label = clip.multi_hot(taxonomy);
        Ok(PreparedClip { clip, features, prompt, label })
    }
}

/// Detached `<ACT>` / `<GROUP>` states per clip id, valid while the decoder
/// parameters do not change.
#[derive(Clone, Debug, Default)]
pub struct TextCache<S> {
    states: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S> TextCache<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn insert(&mut self, clip_id: String, h_a: Tensor<S>, h_g: Tensor<S>) {
        self.states.insert(clip_id, (h_a, h_g));
    }
}

/// Forward outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub heads: HeadOutputs,
    pub v_a: Var,
    pub v_g: Var,
    pub nll: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct GadModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub decoder: ReasoningDecoder,
    actor_in: Linear,
    frame_in: Linear,
    queries: GroupQueries,
    stage1: GroupingStack,
    mdaf: Mdaf,
    stage2: GroupingStack,
    heads: Heads,
}

impl GadModel {
    /// Builds the model and registers its parameters, initialised from `seed`.
    pub fn new<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let d = cfg.grouping.d_vis;
        let vocab = Vocabulary::new(cfg.k);
        let decoder = ReasoningDecoder::new(store, &mut init, &cfg.decoder, &vocab, d)?;
        let actor_in = Linear::new(store, &mut init, "gad.actor_in", d, d);
        let frame_in = Linear::new(store, &mut init, "gad.frame_in", d, d);
        let queries = GroupQueries::new(store, &mut init, "gad", cfg.k, d)?;
        let stage1 = GroupingStack::new(store, &mut init, "gad.stage1", &cfg.grouping)?;
        let mdaf_cfg =
            MdafConfig { variant: cfg.mdaf_variant, heads: cfg.mdaf_heads, d_vis: d, d_text: cfg.decoder.d_text };
        let mdaf = Mdaf::new(store, &mut init, &mdaf_cfg)?;
        let stage2 = GroupingStack::new(store, &mut init, "gad.stage2", &cfg.grouping)?;
        let heads = Heads::new(store, &mut init, &cfg.taxonomy, d, cfg.decoder.d_text);
        Ok(GadModel { cfg: cfg.clone(), vocab, decoder, actor_in, frame_in, queries, stage1, mdaf, stage2, heads })
    }

    /// Decoder states for one clip, off the tape.
    pub fn text_states<S: Scalar>(&self, store: &ParamStore<S>, prep: &PreparedClip) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = Graph::new(store);
        let frames = g.input(prep.features.frame_features.cast());
        let out = self.decoder.forward(&mut g, &prep.prompt, frames)?;
        Ok((g.value(out.h_a).clone(), g.value(out.h_g).clone()))
    }

    /// Fills `cache` for every clip not already present.
    pub fn fill_cache<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        clips: &[PreparedClip],
        cache: &mut TextCache<S>,
    ) -> Result<()> {
        if !self.cfg.needs_text() || self.cfg.train_reasoning {
            return Ok(());
        }
        for p in clips {
            if !cache.states.contains_key(&p.clip.clip_id) {
                let (a, g) = self.text_states(store, p)?;
                cache.insert(p.clip.clip_id.clone(), a, g);
            }
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        prep: &PreparedClip,
        cache: Option<&TextCache<S>>,
    ) -> Result<ForwardOutput> {
        let d = self.cfg.grouping.d_vis;
        let fb = &prep.features;
        if fb.actor_features.cols() != d || fb.frame_features.cols() != d {
            return Err(Error::dim("model input features", &[d], &[fb.actor_features.cols()]));
        }
        let (h_a, h_g, nll) = if !self.cfg.needs_text() {
            (None, None, None)
        } else if self.cfg.train_reasoning {
            let frames = g.input(fb.frame_features.cast());
            let out = self.decoder.forward(g, &prep.prompt, frames)?;
            let nll = nll_total(g, out.logits, &prep.prompt, &self.vocab)?;
            (Some(out.h_a), Some(out.h_g), Some(nll))
        } else {
            let (a, gs) = match cache.and_then(|c| c.states.get(&prep.clip.clip_id)) {
                Some((a, gs)) => (a.clone(), gs.clone()),
                None => self.text_states(g.store(), prep)?,
            };
            (Some(g.input(a)), Some(g.input(gs)), None)
        };
        let h_a = h_a.filter(|_| self.cfg.use_act_token);
        let h_g = h_g.filter(|_| self.cfg.use_group_tokens);

        let xa = g.input(fb.actor_features.cast());
        let xf = g.input(fb.frame_features.cast());
        let xa = self.actor_in.forward(g, xa)?;
        let vf = self.frame_in.forward(g, xf)?;
        let q = g.param(self.queries.q);
        let (vg, va) = self.stage1.forward(g, q, xa, vf)?;
        let (va, vg) = self.mdaf.forward(g, va, vg, h_a, h_g)?;
        let (vg, va) = self.stage2.forward(g, vg, va, vf)?;
        let heads = self.heads.forward(g, vg, va, h_a)?;
        Ok(ForwardOutput { heads, v_a: va, v_g: vg, nll })
    }

    /// Hungarian matching of tokens to the clip's groups on detached outputs.
    pub fn match_groups(&self, pred: &PredictionSet, clip: &SceneClip) -> Result<Matching> {
        let cost = matching_cost(&pred.group_logits, &pred.membership_logits, clip, self.cfg.match_mu)?;
        hungarian(&cost)
    }

    /// Every loss term for one clip under a fixed matching.
    pub fn loss_parts<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        prep: &PreparedClip,
        out: &ForwardOutput,
        matching: &Matching,
    ) -> Result<LossParts> {
        let clip = &prep.clip;
        let ind = individual_action_loss(g, out.heads.action_logits, clip)?;
        let group = group_activity_loss(g, out.heads.group_logits, matching, clip)?;
        let membership = membership_loss(g, out.heads.membership_logits, matching, clip)?;
        let consistency = consistency_loss(g, out.v_a, out.v_g, matching, clip)?;
        let act = if self.cfg.use_l_act {
            act_multilabel_loss(g, out.heads.act_logits, &prep.label)?
        } else {
            g.input(Tensor::scalar(S::zero()))
        };
        Ok(LossParts { ind, group, membership, consistency, act, nll: out.nll })
    }

    /// Forward pass, matching and the weighted objective for one clip.
    pub fn clip_loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        prep: &PreparedClip,
        cache: Option<&TextCache<S>>,
    ) -> Result<(Var, LossValues)> {
        let out = self.forward(g, prep, cache)?;
        let matching = self.match_groups(&out.heads.values(g), &prep.clip)?;
        let parts = self.loss_parts(g, prep, &out, &matching)?;
        let total = total_loss(g, &parts, &self.cfg.weights)?;
        Ok((total, LossValues::read(g, &parts, total)))
    }

    /// Detached head outputs for one clip.
    pub fn predict<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        prep: &PreparedClip,
        cache: Option<&TextCache<S>>,
    ) -> Result<PredictionSet> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, prep, cache)?;
        Ok(out.heads.values(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorParams};

    pub(crate) fn mini_config() -> ModelConfig {
        ModelConfig {
            k: 3,
            grouping: GroupingConfig { layers: 1, heads: 2, d_vis: 16, ffn_mult: 2 },
            decoder: DecoderConfig { layers: 1, heads: 2, d_text: 16, adapter_rank: 2, body_frozen: true },
            mdaf_heads: 2,
            ..Default::default()
        }
    }

    fn prep(cfg: &ModelConfig, seed: u64) -> PreparedClip {
        let params = GeneratorParams {
            frames: 2,
            max_groups: 2,
            max_group_size: 2,
            max_groups_bound: cfg.k,
            ..Default::default()
        };
        let clip = generate_scene(seed, &params).unwrap();
        let f = Featurizer::new(0, cfg.grouping.d_vis, 0.1, &cfg.taxonomy).unwrap();
        PreparedClip::new(clip, &f, &Vocabulary::new(cfg.k), &cfg.taxonomy).unwrap()
    }

    #[test]
    fn end_to_end_loss_is_finite_for_every_variant() {
        for v in MdafVariant::ALL {
            let cfg = ModelConfig { mdaf_variant: v, ..mini_config() };
            let mut store = ParamStore::<f64>::new();
            let model = GadModel::new(&cfg, &mut store, 1).unwrap();
            let p = prep(&cfg, 3);
            let mut g = Graph::new(&store);
            let (total, vals) = model.clip_loss(&mut g, &p, None).unwrap();
            assert!(vals.is_finite());
            assert_eq!(vals.total, g.value(total).item());
            g.backward(total).unwrap();
            assert!(!g.param_grads().is_empty());
        }
    }

    #[test]
    fn cached_states_match_live_states() {
        let cfg = mini_config();
        let mut store = ParamStore::<f64>::new();
        let model = GadModel::new(&cfg, &mut store, 2).unwrap();
        let clips: Vec<PreparedClip> = (0..3).map(|s| prep(&cfg, s)).collect();
        let mut cache = TextCache::default();
        model.fill_cache(&store, &clips, &mut cache).unwrap();
        assert_eq!(cache.len(), 3);
        for c in &clips {
            let a = model.predict(&store, c, Some(&cache)).unwrap();
            let b = model.predict(&store, c, None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn actor_permutation_equivariance() {
        let cfg = mini_config();
        let mut store = ParamStore::<f64>::new();
        let model = GadModel::new(&cfg, &mut store, 4).unwrap();
        let p = prep(&cfg, 8);
        let n = p.clip.actors.len();
        assert!(n >= 3);
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut q = p.clone();
        let permute =
            |t: &Tensor<f64>| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        q.features.actor_features = permute(&p.features.actor_features);
        q.clip.actors = perm.iter().map(|&i| p.clip.actors[i].clone()).collect();
        // the prompt is held fixed so only the visual path sees the permutation
        let a = model.predict(&store, &p, None).unwrap();
        let b = model.predict(&store, &q, None).unwrap();
        assert!(a.group_logits.max_abs_diff(&b.group_logits) < 1e-9);
        let za = Tensor::vector(a.act_logits.clone());
        assert!(za.max_abs_diff(&Tensor::vector(b.act_logits.clone())) < 1e-9);
        assert!(permute(&a.membership_logits).max_abs_diff(&b.membership_logits) < 1e-9);
        assert!(permute(&a.action_logits).max_abs_diff(&b.action_logits) < 1e-9);
    }

    #[test]
    fn base_configuration_skips_the_decoder() {
        let cfg = ModelConfig {
            use_group_tokens: false,
            use_act_token: false,
            use_l_act: false,
            mdaf_variant: MdafVariant::Bypass,
            ..mini_config()
        };
        let mut store = ParamStore::<f64>::new();
        let model = GadModel::new(&cfg, &mut store, 5).unwrap();
        let p = prep(&cfg, 1);
        let mut g = Graph::new(&store);
        let (total, vals) = model.clip_loss(&mut g, &p, None).unwrap();
        assert_eq!(vals.act, 0.0);
        g.backward(total).unwrap();
        let grads = g.param_grads();
        let dec = model.decoder.all_params();
        assert!(grads.iter().all(|(id, _)| !dec.contains(id)));
    }

    #[test]
    fn reasoning_training_puts_the_decoder_on_the_tape() {
        let cfg = ModelConfig { train_reasoning: true, ..mini_config() };
        let mut store = ParamStore::<f64>::new();
        let model = GadModel::new(&cfg, &mut store, 6).unwrap();
        let p = prep(&cfg, 2);
        let mut g = Graph::new(&store);
        let (total, vals) = model.clip_loss(&mut g, &p, None).unwrap();
        assert!(vals.nll > 0.0);
        g.backward(total).unwrap();
        let grads = g.param_grads();
        let act = model.decoder.act_embed;
        assert!(grads.iter().any(|(id, gr)| *id == act && gr.iter().any(|&x| x != 0.0)));
        let body = model.decoder.body_params();
        assert!(grads.iter().all(|(id, _)| !body.contains(id)));
    }
}
