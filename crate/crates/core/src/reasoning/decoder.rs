use serde::{Deserialize, Serialize};

use super::prompt::{PromptSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_text: usize,
    pub adapter_rank: usize,
    pub body_frozen: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { layers: 2, heads: 4, d_text: 64, adapter_rank: 4, body_frozen: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_text.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_text {} not divisible by {} heads", self.d_text, self.heads)));
        }
        if self.adapter_rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Causal pre-norm transformer over `[visual tokens ; text tokens]` with tied
/// input/output embeddings.
///
/// The embedding table is split into the base rows (body) and the `<ACT>` and
/// `<GROUP_i>` rows, which stay trainable together with the visual projection
/// and the low-rank adapters on every attention projection.
#[derive(Clone, Debug)]
pub struct ReasoningDecoder {
    pub cfg: DecoderConfig,
    pub d_vis: usize,
    pub base_embed: ParamId,
    pub act_embed: ParamId,
    pub group_embed: ParamId,
    pub visual_proj: Linear,
    blocks: Vec<DecoderBlock>,
    final_ln: LayerNorm,
    body: Vec<ParamId>,
    k: usize,
    num_base: usize,
}

/// Decoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `L x W` next-token logits for every position.
    pub logits: Var,
    /// `1 x D_text` last-layer state at `<ACT>`.
    pub h_a: Var,
    /// `K x D_text` last-layer states at `<GROUP_1..K>`.
    pub h_g: Var,
}

impl ReasoningDecoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        cfg: &DecoderConfig,
        vocab: &Vocabulary,
        d_vis: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_text;
        let p = "reasoning";
        let emb_std = 1.0 / (d as f64).sqrt();
        let base_embed = store.add(format!("{p}.embed.base"), init.normal(&[vocab.num_base(), d], emb_std), true);
        let act_embed = store.add(format!("{p}.embed.act"), init.normal(&[1, d], emb_std), true);
        let group_embed = store.add(format!("{p}.embed.group"), init.normal(&[vocab.k(), d], emb_std), true);
        let visual_proj = Linear::new(store, init, &format!("{p}.visual_proj"), d_vis, d);
        let mut body = vec![base_embed];
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("{p}.layer{l}");
            let ln_attn = LayerNorm::new(store, &format!("{name}.ln_attn"), d);
            let mut attn = MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, cfg.heads, false)?;
            let ln_ffn = LayerNorm::new(store, &format!("{name}.ln_ffn"), d);
            let ffn = FeedForward::new(store, init, &format!("{name}.ffn"), d, 4 * d, d);
            body.extend([ln_attn.gain, ln_attn.bias, ln_ffn.gain, ln_ffn.bias]);
            for lin in [&attn.wq, &attn.wk, &attn.wv, &attn.wo, &ffn.up, &ffn.down] {
                body.extend(lin.params());
            }
            for (lin, tag) in [(&mut attn.wq, "wq"), (&mut attn.wk, "wk"), (&mut attn.wv, "wv"), (&mut attn.wo, "wo")] {
                lin.attach_adapter(store, init, &format!("{name}.attn.{tag}"), cfg.adapter_rank)?;
            }
            blocks.push(DecoderBlock { ln_attn, attn, ln_ffn, ffn });
        }
        let final_ln = LayerNorm::new(store, &format!("{p}.ln_final"), d);
        body.extend([final_ln.gain, final_ln.bias]);
        let dec = ReasoningDecoder {
            cfg: cfg.clone(),
            d_vis,
            base_embed,
            act_embed,
            group_embed,
            visual_proj,
            blocks,
            final_ln,
            body,
            k: vocab.k(),
            num_base: vocab.num_base(),
        };
        dec.set_body_frozen(store, cfg.body_frozen);
        Ok(dec)
    }

    /// Parameters of the decoder body (everything except adapters, the special
    /// token rows and the visual projection).
    pub fn body_params(&self) -> &[ParamId] {
        &self.body
    }

    pub fn set_body_frozen<S: Scalar>(&self, store: &mut ParamStore<S>, frozen: bool) {
        for &id in &self.body {
            store.get_mut(id).trainable = !frozen;
        }
    }

    /// Every parameter the decoder owns.
    pub fn all_params(&self) -> Vec<ParamId> {
        let mut v = self.body.clone();
        v.extend([self.act_embed, self.group_embed]);
        v.extend(self.visual_proj.params());
        for b in &self.blocks {
            for lin in [&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo] {
                if let Some(ad) = lin.adapter {
                    v.extend([ad.a, ad.b]);
                }
            }
        }
        v.sort();
        v.dedup();
        v
    }

    /// One visual token per frame: `T x D_vis -> T x D_text`.
    pub fn encode_visual<S: Scalar>(&self, g: &mut Graph<S>, frame_features: Var) -> Result<Var> {
        self.visual_proj.forward(g, frame_features)
    }

    /// Full `W x D_text` embedding table, base rows first.
    pub fn embedding_table<S: Scalar>(&self, g: &mut Graph<S>) -> Result<Var> {
        let (b, a, gr) = (g.param(self.base_embed), g.param(self.act_embed), g.param(self.group_embed));
        g.tape.concat_rows(&[b, a, gr])
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        prompt: &PromptSequence,
        frame_features: Var,
    ) -> Result<DecoderOutput> {
        if prompt.is_empty() {
            return Err(Error::Usage("empty prompt".into()));
        }
        let len = prompt.len();
        if prompt.act_offset >= len || prompt.group_offsets.iter().any(|&o| o >= len) {
            return Err(Error::Internal(format!("special-token offset outside a prompt of length {len}")));
        }
        if prompt.group_offsets.len() != self.k {
            return Err(Error::Internal(format!(
                "prompt has {} group slots, decoder expects {}",
                prompt.group_offsets.len(),
                self.k
            )));
        }
        let vocab_size = self.num_base + 1 + self.k;
        if let Some(&bad) = prompt.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Index { what: "vocabulary", index: bad, len: vocab_size });
        }
        let ve = self.encode_visual(g, frame_features)?;
        if g.value(ve).rows() != prompt.visual_tokens {
            return Err(Error::dim("visual tokens", &[prompt.visual_tokens], g.value(ve).shape()));
        }
        let table = self.embedding_table(g)?;
        let tok = g.tape.gather_rows(table, &prompt.tokens)?;
        let x = g.tape.concat_rows(&[ve, tok])?;
        let pos = g.input(sinusoidal_positions(len, self.cfg.d_text));
        let mut x = g.tape.add(x, pos)?;
        let mask = Mask::causal(len);
        for b in &self.blocks {
            let h = b.ln_attn.forward(g, x)?;
            let a = b.attn.forward(g, h, h, Some(&mask))?;
            x = g.tape.add(x, a)?;
            let h = b.ln_ffn.forward(g, x)?;
            let f = b.ffn.forward(g, h)?;
            x = g.tape.add(x, f)?;
        }
        let hidden = self.final_ln.forward(g, x)?;
        let logits = g.tape.matmul_nt(hidden, table)?;
        let h_a = g.tape.slice_rows(hidden, prompt.act_offset, 1)?;
        let h_g = g.tape.gather_rows(hidden, &prompt.group_offsets)?;
        Ok(DecoderOutput { logits, h_a, h_g })
    }
}

/// Fixed sine/cosine position table, `len x d`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            data.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("shape")
}

/// Teacher-forced `-log p(<ACT> | visual tokens, preceding text)`.
pub fn nll_act<S: Scalar>(g: &mut Graph<S>, logits: Var, prompt: &PromptSequence, vocab: &Vocabulary) -> Result<Var> {
    if prompt.act_offset == 0 || prompt.act_offset >= prompt.len() {
        return Err(Error::Internal("<ACT> offset has no predecessor".into()));
    }
    let row = g.tape.slice_rows(logits, prompt.act_offset - 1, 1)?;
    g.tape.cross_entropy_with_logits(row, vocab.act_id())
}

/// Teacher-forced `sum_i -log p(<GROUP_i> | ..., <ACT>, ..., <GROUP_1..i-1>)`.
pub fn nll_group<S: Scalar>(g: &mut Graph<S>, logits: Var, prompt: &PromptSequence, vocab: &Vocabulary) -> Result<Var> {
    if prompt.group_offsets.iter().any(|&o| o == 0 || o >= prompt.len()) {
        return Err(Error::Internal("<GROUP> offset has no predecessor".into()));
    }
    let rows: Vec<usize> = prompt.group_offsets.iter().map(|&o| o - 1).collect();
    let targets: Vec<usize> = (0..rows.len()).map(|i| vocab.group_id(i)).collect();
    let picked = g.tape.gather_rows(logits, &rows)?;
    let mean = g.tape.cross_entropy(picked, &targets)?;
    Ok(g.tape.scale(mean, S::lit(rows.len() as f64)))
}

/// Combined reasoning objective (`<ACT>` term plus the `<GROUP>` terms).
pub fn nll_total<S: Scalar>(g: &mut Graph<S>, logits: Var, prompt: &PromptSequence, vocab: &Vocabulary) -> Result<Var> {
    let a = nll_act(g, logits, prompt, vocab)?;
    let gr = nll_group(g, logits, prompt, vocab)?;
    g.tape.add(a, gr)
}
