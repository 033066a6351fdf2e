//! Flat experiment configuration.
//!
//! Every key lives in one namespace. In TOML, `mdaf.variant = "sp2"` and a
//! `[mdaf]` table with `variant = "sp2"` are equivalent; both flatten to the
//! key `mdaf.variant`. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use groupact::gad::GroupingConfig;
use groupact::loss::LossWeights;
use groupact::mdaf::MdafVariant;
use groupact::model::ModelConfig;
use groupact::reasoning::DecoderConfig;
use groupact::scene::{Featurizer, GeneratorParams, Taxonomy};
use groupact::tensor::AdamConfig;
use groupact::train::TrainConfig;
use groupact::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    /// Layers per grouping stage.
    #[serde(rename = "N")]
    pub n: usize,
    pub heads: usize,
    /// Frames per clip.
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D_vis")]
    pub d_vis: usize,
    #[serde(rename = "D_text")]
    pub d_text: usize,
    pub ffn_mult: usize,

    #[serde(rename = "decoder.layers")]
    pub decoder_layers: usize,
    #[serde(rename = "decoder.heads")]
    pub decoder_heads: usize,
    #[serde(rename = "decoder.rank")]
    pub decoder_rank: usize,

    #[serde(rename = "mdaf.variant")]
    pub mdaf_variant: MdafVariant,
    #[serde(rename = "mdaf.heads")]
    pub mdaf_heads: usize,

    pub use_group_tokens: bool,
    pub use_act_token: bool,
    pub use_l_act: bool,
    pub train_reasoning: bool,
    pub body_frozen: bool,

    #[serde(rename = "weight.group")]
    pub weight_group: f64,
    #[serde(rename = "weight.membership")]
    pub weight_membership: f64,
    #[serde(rename = "weight.consistency")]
    pub weight_consistency: f64,
    #[serde(rename = "weight.act")]
    pub weight_act: f64,
    pub match_mu: f64,

    #[serde(rename = "lr.base")]
    pub lr_base: f64,
    #[serde(rename = "lr.peak")]
    pub lr_peak: f64,
    #[serde(rename = "lr.warmup_epochs")]
    pub lr_warmup_epochs: usize,
    #[serde(rename = "adam.beta1")]
    pub adam_beta1: f64,
    #[serde(rename = "adam.beta2")]
    pub adam_beta2: f64,
    #[serde(rename = "adam.eps")]
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 runs the whole schedule.
    pub max_steps: usize,

    #[serde(rename = "gen.train_clips")]
    pub gen_train_clips: usize,
    #[serde(rename = "gen.eval_clips")]
    pub gen_eval_clips: usize,
    #[serde(rename = "gen.min_groups")]
    pub gen_min_groups: usize,
    #[serde(rename = "gen.max_groups")]
    pub gen_max_groups: usize,
    #[serde(rename = "gen.min_group_size")]
    pub gen_min_group_size: usize,
    #[serde(rename = "gen.max_group_size")]
    pub gen_max_group_size: usize,
    #[serde(rename = "gen.max_outliers")]
    pub gen_max_outliers: usize,
    #[serde(rename = "gen.outlier_prob")]
    pub gen_outlier_prob: f64,
    pub noise_sigma: f64,

    #[serde(rename = "ablate.seeds")]
    pub ablate_seeds: Vec<u64>,

    /// Directory holding `train.json` and `eval.json`; empty means `<out>/data`.
    pub dataset: String,
    pub out: String,
    /// Parallel dataset generation and evaluation.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let g = GeneratorParams::default();
        ExperimentConfig {
            seed: 0,
            k: m.k,
            n: m.grouping.layers,
            heads: m.grouping.heads,
            t: g.frames,
            d_vis: m.grouping.d_vis,
            d_text: m.decoder.d_text,
            ffn_mult: m.grouping.ffn_mult,
            decoder_layers: m.decoder.layers,
            decoder_heads: m.decoder.heads,
            decoder_rank: m.decoder.adapter_rank,
            mdaf_variant: m.mdaf_variant,
            mdaf_heads: m.mdaf_heads,
            use_group_tokens: m.use_group_tokens,
            use_act_token: m.use_act_token,
            use_l_act: m.use_l_act,
            train_reasoning: m.train_reasoning,
            body_frozen: m.decoder.body_frozen,
            weight_group: m.weights.group,
            weight_membership: m.weights.membership,
            weight_consistency: m.weights.consistency,
            weight_act: m.weights.act,
            match_mu: m.match_mu,
            lr_base: t.base_lr,
            lr_peak: t.peak_lr,
            lr_warmup_epochs: t.warmup_epochs,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_steps: 0,
            gen_train_clips: 64,
            gen_eval_clips: 16,
            gen_min_groups: g.min_groups,
            gen_max_groups: g.max_groups,
            gen_min_group_size: g.min_group_size,
            gen_max_group_size: g.max_group_size,
            gen_max_outliers: g.max_outliers,
            gen_outlier_prob: g.outlier_prob,
            noise_sigma: 0.1,
            ablate_seeds: vec![1, 2, 3],
            dataset: String::new(),
            out: "run".into(),
            parallel: false,
        }
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

impl ExperimentConfig {
    /// Resolves defaults, then `text` (TOML), then `key=value` overrides.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut flat = BTreeMap::new();
        if let Some(text) = text {
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
                Error::Parse { line, column, message: e.message().to_string() }
            })?;
            flatten("", table, &mut flat);
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            flat.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let table: toml::Table = flat.into_iter().collect();
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.generator_params().validate()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Flat TOML with every key spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(CONFIG_FILE), self.to_toml()?)?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            grouping: GroupingConfig { layers: self.n, heads: self.heads, d_vis: self.d_vis, ffn_mult: self.ffn_mult },
            decoder: DecoderConfig {
                layers: self.decoder_layers,
                heads: self.decoder_heads,
                d_text: self.d_text,
                adapter_rank: self.decoder_rank,
                body_frozen: self.body_frozen,
            },
            mdaf_variant: self.mdaf_variant,
            mdaf_heads: self.mdaf_heads,
            use_group_tokens: self.use_group_tokens,
            use_act_token: self.use_act_token,
            use_l_act: self.use_l_act,
            train_reasoning: self.train_reasoning,
            weights: LossWeights {
                group: self.weight_group,
                membership: self.weight_membership,
                consistency: self.weight_consistency,
                act: self.weight_act,
            },
            match_mu: self.match_mu,
            taxonomy: Taxonomy::default(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.lr_base,
            peak_lr: self.lr_peak,
            warmup_epochs: self.lr_warmup_epochs,
            adam: AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps },
            seed: self.seed,
        }
    }

    pub fn generator_params(&self) -> GeneratorParams {
        GeneratorParams {
            frames: self.t,
            min_groups: self.gen_min_groups,
            max_groups: self.gen_max_groups,
            min_group_size: self.gen_min_group_size,
            max_group_size: self.gen_max_group_size,
            max_outliers: self.gen_max_outliers,
            outlier_prob: self.gen_outlier_prob,
            max_groups_bound: self.k,
            ..GeneratorParams::default()
        }
    }

    pub fn featurizer(&self) -> Result<Featurizer> {
        Featurizer::new(self.seed, self.d_vis, self.noise_sigma, &Taxonomy::default())
    }

    pub fn max_steps(&self) -> Option<usize> {
        (self.max_steps > 0).then_some(self.max_steps)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        if self.dataset.is_empty() {
            self.out_dir().join("data")
        } else {
            PathBuf::from(&self.dataset)
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}
