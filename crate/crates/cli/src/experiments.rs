//! Dataset preparation, training, evaluation and the fixed experiments shared
//! by the commands and the acceptance tests.

use std::collections::BTreeMap;
use std::time::Instant;

use groupact::checkpoint::Checkpoint;
use groupact::mdaf::MdafVariant;
use groupact::metrics::{decode_predictions, evaluate, ClipPredictions, EvalReport};
use groupact::model::{GadModel, PreparedClip, TextCache};
use groupact::nn::{Adam, GradBuffer, Graph, ParamStore};
use groupact::reasoning::nll_total;
use groupact::scene::{generate_scene, Dataset, SceneClip, Taxonomy};
use groupact::train::{StepRecord, Trainer};
use groupact::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Scene seeds of the two splits never overlap.
fn scene_seed(seed: u64, split: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x0001_0000_0000).wrapping_add(split << 24).wrapping_add(i as u64)
}

fn generate_split(cfg: &ExperimentConfig, split: u64, n: usize) -> Result<Vec<SceneClip>> {
    let params = cfg.generator_params();
    let one = |i: usize| generate_scene(scene_seed(cfg.seed, split, i), &params);
    if cfg.parallel {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    }
}

/// Train and eval datasets for `cfg`.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let tax = Taxonomy::default();
    let train = generate_split(cfg, 0, cfg.gen_train_clips)?;
    let eval = generate_split(cfg, 1, cfg.gen_eval_clips)?;
    Ok((Dataset::new(tax.clone(), train), Dataset::new(tax, eval)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub clips: usize,
    pub actors: usize,
    pub groups: usize,
    /// Group size to count.
    pub group_size_histogram: BTreeMap<usize, usize>,
    pub outliers: usize,
    pub outlier_rate: f64,
}

pub fn summarize(clips: &[SceneClip]) -> DatasetSummary {
    let mut hist = BTreeMap::new();
    for g in clips.iter().flat_map(|c| &c.groups) {
        *hist.entry(g.member_ids.len()).or_insert(0) += 1;
    }
    let actors: usize = clips.iter().map(|c| c.actors.len()).sum();
    let outliers: usize = clips.iter().map(|c| c.outlier_actor_ids.len()).sum();
    DatasetSummary {
        clips: clips.len(),
        actors,
        groups: hist.values().sum(),
        group_size_histogram: hist,
        outliers,
        outlier_rate: if actors == 0 { 0.0 } else { outliers as f64 / actors as f64 },
    }
}

pub fn prepare(cfg: &ExperimentConfig, model: &GadModel, clips: &[SceneClip]) -> Result<Vec<PreparedClip>> {
    let f = cfg.featurizer()?;
    clips.iter().map(|c| PreparedClip::new(c.clone(), &f, &model.vocab, &model.cfg.taxonomy)).collect()
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<(GadModel, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let model = GadModel::new(&cfg.model_config(), &mut store, cfg.seed)?;
    Ok((model, store))
}

/// Parameters and optimizer state after training.
pub struct Trained {
    pub store: ParamStore<f64>,
    pub adam: Adam<f64>,
    pub steps: usize,
}

/// Trains from `store` (or from `resume`) for the configured schedule,
/// calling `on_step` after every optimizer step.
pub fn train(
    cfg: &ExperimentConfig,
    model: &GadModel,
    store: ParamStore<f64>,
    clips: &[PreparedClip],
    resume: Option<&Checkpoint>,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Trained> {
    let mut tr = Trainer::new(model, store, cfg.train_config())?;
    if let Some(ck) = resume {
        ck.restore(&mut tr.store, &mut tr.adam)?;
        tr.step = ck.step;
    }
    let mut cache = TextCache::default();
    model.fill_cache(&tr.store, clips, &mut cache)?;
    tr.run(clips, Some(&cache), cfg.max_steps(), on_step)?;
    Ok(Trained { steps: tr.step, store: tr.store, adam: tr.adam })
}

/// Decoded predictions for every clip, in clip order.
pub fn predict(
    cfg: &ExperimentConfig,
    model: &GadModel,
    store: &ParamStore<f64>,
    clips: &[PreparedClip],
) -> Result<Vec<ClipPredictions>> {
    let mut cache = TextCache::default();
    model.fill_cache(store, clips, &mut cache)?;
    let one = |p: &PreparedClip| {
        let pred = model.predict(store, p, Some(&cache))?;
        decode_predictions(&pred, &p.clip, &model.cfg.taxonomy)
    };
    if cfg.parallel {
        clips.par_iter().map(one).collect()
    } else {
        clips.iter().map(one).collect()
    }
}

pub fn evaluate_clips(
    cfg: &ExperimentConfig,
    model: &GadModel,
    store: &ParamStore<f64>,
    clips: &[PreparedClip],
) -> Result<(Vec<ClipPredictions>, EvalReport)> {
    let preds = predict(cfg, model, store, clips)?;
    let truth: Vec<SceneClip> = clips.iter().map(|p| p.clip.clone()).collect();
    let report = evaluate(&preds, &truth, &model.cfg.taxonomy)?;
    Ok((preds, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitOutcome {
    pub steps: usize,
    pub map_1: f64,
    pub outlier_miou: f64,
    pub seconds: f64,
}

impl OverfitOutcome {
    pub fn reached(&self) -> bool {
        self.map_1 >= 0.9 && self.outlier_miou >= 0.9
    }
}

/// Trains the default model on 16 clips and evaluates on the same clips every
/// `every` steps until both targets are met or `budget` steps have run. The
/// schedule is stretched to span the budget.
pub fn overfit(seed: u64, budget: usize, every: usize) -> Result<OverfitOutcome> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig { seed, gen_train_clips: 16, gen_eval_clips: 0, ..ExperimentConfig::default() };
    cfg.epochs = budget.div_ceil(cfg.gen_train_clips.div_ceil(cfg.batch_size));
    let (train_set, _) = generate_datasets(&cfg)?;
    let (model, store) = build_model(&cfg)?;
    let clips = prepare(&cfg, &model, &train_set.clips)?;
    let mut tr = Trainer::new(&model, store, cfg.train_config())?;
    let mut cache = TextCache::default();
    model.fill_cache(&tr.store, &clips, &mut cache)?;
    let mut out = OverfitOutcome { steps: 0, map_1: 0.0, outlier_miou: 0.0, seconds: 0.0 };
    while tr.step < budget {
        let next = (tr.step + every).min(budget);
        tr.run(&clips, Some(&cache), Some(next), |_| Ok(()))?;
        let (_, r) = evaluate_clips(&cfg, &model, &tr.store, &clips)?;
        out.steps = tr.step;
        out.map_1 = r.map_at(1.0).unwrap_or(0.0);
        out.outlier_miou = r.outlier_miou;
        log::info!("overfit step {}: mAP@1.0 {:.4} outlier mIoU {:.4}", tr.step, out.map_1, out.outlier_miou);
        if out.reached() {
            break;
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningOutcome {
    pub initial_nll: f64,
    pub final_nll: f64,
    pub steps: usize,
    pub trainable_tensors: usize,
}

impl ReasoningOutcome {
    pub fn relative_drop(&self) -> f64 {
        1.0 - self.final_nll / self.initial_nll
    }
}

/// Teacher-forced decoder training on a 32-prompt corpus of short clips with
/// the decoder body frozen. Each step averages four prompts; the NLL is the
/// corpus mean before and after.
pub fn reasoning_nll(seed: u64, steps: usize, lr: f64) -> Result<ReasoningOutcome> {
    let cfg = ExperimentConfig {
        seed,
        t: 2,
        gen_train_clips: 32,
        gen_eval_clips: 0,
        gen_max_groups: 2,
        gen_max_group_size: 2,
        gen_max_outliers: 1,
        body_frozen: true,
        ..ExperimentConfig::default()
    };
    let (corpus, _) = generate_datasets(&cfg)?;
    let (model, mut store) = build_model(&cfg)?;
    let clips = prepare(&cfg, &model, &corpus.clips)?;
    let decoder_params = model.decoder.all_params();
    let trainable_tensors = decoder_params.iter().filter(|&&id| store.get(id).trainable).count();
    let nll_of = |store: &ParamStore<f64>, p: &PreparedClip, grads: Option<&mut GradBuffer<f64>>| -> Result<f64> {
        let mut g = Graph::new(store);
        let frames = g.input(p.features.frame_features.clone());
        let out = model.decoder.forward(&mut g, &p.prompt, frames)?;
        let nll = nll_total(&mut g, out.logits, &p.prompt, &model.vocab)?;
        let v = g.value(nll).item();
        if let Some(buf) = grads {
            g.backward(nll)?;
            buf.accumulate(g.param_grads());
        }
        Ok(v)
    };
    let corpus_nll = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = 0.0;
        for p in &clips {
            s += nll_of(store, p, None)?;
        }
        Ok(s / clips.len() as f64)
    };
    let initial_nll = corpus_nll(&store)?;
    let mut adam = Adam::new(&store, cfg.train_config().adam);
    for step in 0..steps {
        let mut grads = GradBuffer::new(&store);
        let mut batch = 0.0;
        for j in 0..4 {
            batch += nll_of(&store, &clips[(step * 4 + j) % clips.len()], Some(&mut grads))?;
        }
        if !batch.is_finite() {
            return Err(Error::NonFinite(format!("reasoning NLL at step {step}")));
        }
        grads.scale(0.25);
        adam.step(&mut store, &grads, lr)?;
    }
    Ok(ReasoningOutcome { initial_nll, final_nll: corpus_nll(&store)?, steps, trainable_tensors })
}

/// One configuration of the component and fusion comparisons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub group_tokens: bool,
    pub act_token: bool,
    pub l_act: bool,
    /// `None` keeps the configured variant.
    pub variant: Option<MdafVariant>,
}

impl AblationRow {
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.use_group_tokens = self.group_tokens;
        c.use_act_token = self.act_token;
        c.use_l_act = self.l_act;
        if let Some(v) = self.variant {
            c.mdaf_variant = v;
        }
        c
    }
}

const fn row(
    name: &'static str,
    group_tokens: bool,
    act_token: bool,
    l_act: bool,
    variant: Option<MdafVariant>,
) -> AblationRow {
    AblationRow { name, group_tokens, act_token, l_act, variant }
}

/// Component rows: grouping transformers alone, then each component and
/// their combinations.
pub const COMPONENT_ROWS: [AblationRow; 6] = [
    row("base", false, false, false, Some(MdafVariant::Bypass)),
    row("+group", true, false, false, None),
    row("+act", false, true, false, None),
    row("+l_act", false, false, true, Some(MdafVariant::Bypass)),
    row("+group+act", true, true, false, None),
    row("full", true, true, true, None),
];

pub const VARIANT_ROWS: [AblationRow; 4] = [
    row("sp2", true, true, true, Some(MdafVariant::Sp2)),
    row("sp1", true, true, true, Some(MdafVariant::Sp1)),
    row("con1", true, true, true, Some(MdafVariant::Con1)),
    row("con2", true, true, true, Some(MdafVariant::Con2)),
];

pub const ABLATION_CSV_HEADER: &str = "row,seed,group_map@1.0,group_map@0.5,outlier_miou";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: &'static str,
    pub seed: u64,
    pub map_1: f64,
    pub map_05: f64,
    pub outlier_miou: f64,
}

impl AblationResult {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.row, self.seed, self.map_1, self.map_05, self.outlier_miou)
    }
}

/// Trains and evaluates one row under one seed.
pub fn run_row(
    cfg: &ExperimentConfig,
    row: &AblationRow,
    seed: u64,
    train_set: &[SceneClip],
    eval_set: &[SceneClip],
) -> Result<AblationResult> {
    let mut c = row.apply(cfg);
    c.seed = seed;
    let (model, store) = build_model(&c)?;
    let train_clips = prepare(&c, &model, train_set)?;
    let eval_clips = prepare(&c, &model, eval_set)?;
    let trained = train(&c, &model, store, &train_clips, None, |_| Ok(()))?;
    let (_, r) = evaluate_clips(&c, &model, &trained.store, &eval_clips)?;
    log::info!("{} seed {}: mAP@0.5 {:.4}", row.name, seed, r.map_at(0.5).unwrap_or(0.0));
    Ok(AblationResult {
        row: row.name,
        seed,
        map_1: r.map_at(1.0).unwrap_or(0.0),
        map_05: r.map_at(0.5).unwrap_or(0.0),
        outlier_miou: r.outlier_miou,
    })
}

pub fn run_ablation(
    cfg: &ExperimentConfig,
    rows: &[AblationRow],
    train_set: &[SceneClip],
    eval_set: &[SceneClip],
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for r in rows {
        for &s in &cfg.ablate_seeds {
            out.push(run_row(cfg, r, s, train_set, eval_set)?);
        }
    }
    Ok(out)
}

pub fn mean_map_05(results: &[AblationResult], row: &str) -> f64 {
    let v: Vec<f64> = results.iter().filter(|r| r.row == row).map(|r| r.map_05).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
