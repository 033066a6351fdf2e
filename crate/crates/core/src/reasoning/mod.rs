//! Tiny causal decoder with the expanded `<ACT>` / `<GROUP_i>` vocabulary.
//!
//! The decoder reads one visual token per frame followed by the textualised
//! prompt and exports the last-layer states at the special-token slots.

mod decoder;
mod prompt;

pub use decoder::{
    nll_act, nll_group, nll_total, sinusoidal_positions, DecoderConfig, DecoderOutput, ReasoningDecoder,
};
pub use prompt::{
    build_prompt, default_base_tokens, group_token, PromptSequence, Vocabulary, ACT_TOKEN, PROMPT_TEMPLATE,
};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{apply_low_rank_adapter, Adam, GradBuffer, Graph, Init, ParamStore};
    use crate::scene::{generate_scene, Featurizer, GeneratorParams, SceneClip, Taxonomy};
    use crate::tensor::{AdamConfig, Tape, Tensor};
    use crate::Error;

    const D_VIS: usize = 16;

    fn small_params() -> GeneratorParams {
        GeneratorParams { frames: 2, max_groups: 2, max_group_size: 2, max_outliers: 1, ..Default::default() }
    }

    fn setup(k: usize, frozen: bool) -> (ParamStore<f64>, ReasoningDecoder, Vocabulary) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vocab = Vocabulary::new(k);
        let cfg = DecoderConfig { layers: 2, heads: 2, d_text: 16, adapter_rank: 2, body_frozen: frozen };
        let dec = ReasoningDecoder::new(&mut store, &mut Init { rng: &mut rng }, &cfg, &vocab, D_VIS).unwrap();
        (store, dec, vocab)
    }

    fn clip_and_features(seed: u64) -> (SceneClip, Tensor<f64>) {
        let clip = generate_scene(seed, &small_params()).unwrap();
        let f = Featurizer::new(1, D_VIS, 0.0, &Taxonomy::default()).unwrap().featurize(&clip);
        (clip, f.frame_features)
    }

    #[test]
    fn hidden_state_shapes() {
        let (store, dec, vocab) = setup(4, true);
        for s in 0..3 {
            let (clip, frames) = clip_and_features(s);
            let prompt = build_prompt(&clip, &vocab).unwrap();
            let mut g = Graph::new(&store);
            let fv = g.input(frames);
            let out = dec.forward(&mut g, &prompt, fv).unwrap();
            assert_eq!(g.value(out.h_g).shape(), &[4, 16]);
            assert_eq!(g.value(out.h_a).shape(), &[1, 16]);
            assert_eq!(g.value(out.logits).shape(), &[prompt.len(), vocab.len()]);
            assert!(g.value(out.h_g).is_finite());
        }
    }

    #[test]
    fn causality_under_token_perturbation() {
        let (store, dec, vocab) = setup(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for s in 0..20 {
            let (clip, frames) = clip_and_features(100 + s);
            let prompt = build_prompt(&clip, &vocab).unwrap();
            let t = rand::Rng::gen_range(&mut rng, 1..prompt.tokens.len());
            let mut perturbed = prompt.clone();
            perturbed.tokens[t] = (perturbed.tokens[t] + 1) % vocab.num_base();
            let run = |p: &PromptSequence| {
                let mut g = Graph::new(&store);
                let fv = g.input(frames.clone());
                let out = dec.forward(&mut g, p, fv).unwrap();
                g.value(out.logits).clone()
            };
            let (a, b) = (run(&prompt), run(&perturbed));
            let pos = prompt.visual_tokens + t;
            for r in 0..pos {
                assert_eq!(a.row(r), b.row(r), "position {r} saw token {pos}");
            }
            assert_ne!(a.row(pos), b.row(pos));
        }
    }

    #[test]
    fn group_states_depend_on_act_embedding() {
        let (mut store, dec, vocab) = setup(3, true);
        let (clip, frames) = clip_and_features(9);
        let prompt = build_prompt(&clip, &vocab).unwrap();
        let hg = |store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let fv = g.input(frames.clone());
            let out = dec.forward(&mut g, &prompt, fv).unwrap();
            g.value(out.h_g).clone()
        };
        let before = hg(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let replacement = Init { rng: &mut rng }.normal(&[1, 16], 1.0);
        store.assign("reasoning.embed.act", replacement).unwrap();
        let after = hg(&store);
        for r in 0..3 {
            let diff = before.row(r).iter().zip(after.row(r)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff > 0.0, "row {r} unchanged");
        }
    }

    #[test]
    fn nll_reference_values() {
        let vocab = Vocabulary::new(5);
        let (clip, _) = clip_and_features(1);
        let prompt = build_prompt(&clip, &vocab).unwrap();
        let store = ParamStore::<f64>::new();
        let w = vocab.len() as f64;

        let mut g = Graph::new(&store);
        let zero = g.input(Tensor::zeros(&[prompt.len(), vocab.len()]));
        let a = nll_act(&mut g, zero, &prompt, &vocab).unwrap();
        assert!((g.value(a).item() - w.ln()).abs() < 1e-12);
        let gr = nll_group(&mut g, zero, &prompt, &vocab).unwrap();
        assert!((g.value(gr).item() - 5.0 * w.ln()).abs() < 1e-12);

        let mut sat = Tensor::zeros(&[prompt.len(), vocab.len()]);
        let c = vocab.len();
        sat.data_mut()[(prompt.act_offset - 1) * c + vocab.act_id()] = 40.0;
        let sat = g.input(sat);
        let a = nll_act(&mut g, sat, &prompt, &vocab).unwrap();
        assert!(g.value(a).item() < 1e-15);
        let row = g.tape.slice_rows(sat, prompt.act_offset - 1, 1).unwrap();
        let ce = g.tape.cross_entropy_with_logits(row, vocab.act_id()).unwrap();
        assert_eq!(g.value(a).item(), g.value(ce).item());
    }

    #[test]
    fn nll_group_matches_per_position_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in [1usize, 4] {
            let vocab = Vocabulary::new(k);
            let (clip, _) = clip_and_features(2);
            let prompt = build_prompt(&clip, &vocab).unwrap();
            let logits = Init { rng: &mut rng }.normal::<f64>(&[prompt.len(), vocab.len()], 2.0);
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store);
            let lv = g.input(logits.clone());
            let got = nll_group(&mut g, lv, &prompt, &vocab).unwrap();
            let mut expected = 0.0;
            for (i, &o) in prompt.group_offsets.iter().enumerate() {
                let row = logits.row(o - 1);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                expected += lse - row[vocab.group_id(i)];
            }
            assert!((g.value(got).item() - expected).abs() < 1e-12 * expected.abs().max(1.0));
            if k == 1 {
                let row = g.tape.slice_rows(lv, prompt.group_offsets[0] - 1, 1).unwrap();
                let ce = g.tape.cross_entropy_with_logits(row, vocab.group_id(0)).unwrap();
                assert!((g.value(got).item() - g.value(ce).item()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn visual_encoding() {
        let (mut store, dec, vocab) = setup(2, true);
        let (clip, frames) = clip_and_features(4);
        {
            let mut g = Graph::new(&store);
            let fv = g.input(frames.clone());
            let ve = dec.encode_visual(&mut g, fv).unwrap();
            assert_eq!(g.value(ve).rows(), clip.frames);
        }
        // gradient reaches the projection through the reasoning loss
        let prompt = build_prompt(&clip, &vocab).unwrap();
        {
            let mut g = Graph::new(&store);
            let fv = g.input(frames.clone());
            let out = dec.forward(&mut g, &prompt, fv).unwrap();
            let loss = nll_total(&mut g, out.logits, &prompt, &vocab).unwrap();
            g.backward(loss).unwrap();
            let grads = g.param_grads();
            let w = dec.visual_proj.weight;
            let gw = grads.iter().find(|(id, _)| *id == w).unwrap();
            assert!(gw.1.iter().any(|&x| x != 0.0));
        }
        store.assign("reasoning.visual_proj.weight", Tensor::zeros(&[16, D_VIS])).unwrap();
        let mut g = Graph::new(&store);
        let fv = g.input(frames);
        let ve = dec.encode_visual(&mut g, fv).unwrap();
        assert!(g.value(ve).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frozen_body_receives_no_gradient() {
        let (store, dec, vocab) = setup(2, true);
        let (clip, frames) = clip_and_features(6);
        let prompt = build_prompt(&clip, &vocab).unwrap();
        let mut g = Graph::new(&store);
        let fv = g.input(frames);
        let out = dec.forward(&mut g, &prompt, fv).unwrap();
        let loss = nll_total(&mut g, out.logits, &prompt, &vocab).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let body = dec.body_params();
        assert!(grads.iter().all(|(id, _)| !body.contains(id)));
        let lora_a = store.id("reasoning.layer0.attn.wq.lora_a").unwrap();
        let ga = grads.iter().find(|(id, _)| *id == lora_a).unwrap();
        assert!(ga.1.iter().any(|&x| x != 0.0));
        for name in ["reasoning.embed.act", "reasoning.embed.group", "reasoning.visual_proj.weight"] {
            let id = store.id(name).unwrap();
            assert!(grads.iter().any(|(i, g)| *i == id && g.iter().any(|&x| x != 0.0)), "{name}");
        }
        assert!(!grads.iter().any(|(id, _)| *id == store.id("reasoning.layer0.attn.wq.weight").unwrap()));
    }

    #[test]
    fn frozen_body_bytes_survive_training() {
        let (mut store, dec, vocab) = setup(2, true);
        let snapshot: Vec<Vec<f64>> = dec.body_params().iter().map(|&id| store.get(id).value.data().to_vec()).collect();
        let mut adam = Adam::new(&store, AdamConfig::default());
        for s in 0..3 {
            let (clip, frames) = clip_and_features(30 + s);
            let prompt = build_prompt(&clip, &vocab).unwrap();
            let mut buf = GradBuffer::new(&store);
            {
                let mut g = Graph::new(&store);
                let fv = g.input(frames);
                let out = dec.forward(&mut g, &prompt, fv).unwrap();
                let loss = nll_total(&mut g, out.logits, &prompt, &vocab).unwrap();
                g.backward(loss).unwrap();
                buf.accumulate(g.param_grads());
            }
            adam.step(&mut store, &buf, 1e-2).unwrap();
        }
        for (i, &id) in dec.body_params().iter().enumerate() {
            let now = store.get(id).value.data();
            assert!(now.iter().zip(&snapshot[i]).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let a = store.get(store.id("reasoning.layer0.attn.wq.lora_a").unwrap()).value.data();
        assert!(a.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn adapter_algebra_and_rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut init = Init { rng: &mut rng };
        let w = init.xavier::<f64>(5, 4);
        let b = init.xavier::<f64>(2, 4);
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let av = tape.param(Tensor::zeros(&[5, 2]));
        let bv = tape.param(b.clone());
        let eff = apply_low_rank_adapter(&mut tape, wv, av, bv).unwrap();
        assert_eq!(tape.value(eff), &w);
        let s = tape.sum(eff);
        tape.backward(s).unwrap();
        assert!(tape.grad(wv).is_none());
        assert!(tape.grad(av).unwrap().iter().any(|&x| x != 0.0));

        // min(5, 4) = 4: rank 3 accepted, rank 4 rejected
        let a3 = tape.param(Tensor::zeros(&[5, 3]));
        let b3 = tape.param(Tensor::zeros(&[3, 4]));
        assert!(apply_low_rank_adapter(&mut tape, wv, a3, b3).is_ok());
        let a4 = tape.param(Tensor::zeros(&[5, 4]));
        let b4 = tape.param(Tensor::zeros(&[4, 4]));
        assert!(matches!(apply_low_rank_adapter(&mut tape, wv, a4, b4), Err(Error::Config(_))));
    }

    #[test]
    fn decoder_config_validation() {
        let bad = DecoderConfig { d_text: 10, heads: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(DecoderConfig { adapter_rank: 0, ..Default::default() }.validate().is_err());
    }
}
