//! JSON checkpoints: configuration header, named parameters with shapes and
//! optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{AdamMoments, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentRecord {
    pub name: String,
    pub count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form configuration header written by the caller.
    pub config: serde_json::Value,
    /// Optimizer steps taken.
    pub step: usize,
    pub params: Vec<ParamRecord>,
    pub adam_step: u64,
    pub moments: Vec<MomentRecord>,
}

fn to_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::lit(x)).collect()
}

impl Checkpoint {
    pub fn capture<S: Scalar>(config: serde_json::Value, step: usize, store: &ParamStore<S>, adam: &Adam<S>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: to_f64(p.value.data()),
            })
            .collect();
        let moments = store
            .iter()
            .filter_map(|(id, p)| {
                adam.moments[id.index()].as_ref().map(|(mom, count)| MomentRecord {
                    name: p.name.clone(),
                    count: *count,
                    m: to_f64(&mom.m),
                    v: to_f64(&mom.v),
                })
            })
            .collect();
        Checkpoint { version: CHECKPOINT_VERSION, config, step, params, adam_step: adam.step, moments }
    }

    /// Writes parameters and optimizer state into an already-built store.
    /// Every stored parameter must be present with the same shape.
    pub fn restore<S: Scalar>(&self, store: &mut ParamStore<S>, adam: &mut Adam<S>) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!("checkpoint version {} unsupported", self.version)));
        }
        if self.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .id(&rec.name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {} not in model", rec.name)))?;
            let have = store.get(id).value.shape().to_vec();
            if have != rec.shape {
                return Err(Error::Config(format!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    rec.name, rec.shape, have
                )));
            }
            let t = Tensor::new(rec.shape.clone(), from_f64(&rec.data))
                .map_err(|_| Error::Validation(format!("parameter {}: data length does not match shape", rec.name)))?;
            store.assign(&rec.name, t)?;
        }
        *adam = Adam::new(store, adam.cfg);
        adam.step = self.adam_step;
        for rec in &self.moments {
            let id = store
                .id(&rec.name)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter {}", rec.name)))?;
            let len = store.get(id).value.len();
            if rec.m.len() != len || rec.v.len() != len {
                return Err(Error::Config(format!("optimizer state for {} has the wrong length", rec.name)));
            }
            adam.moments[id.index()] = Some((AdamMoments { m: from_f64(&rec.m), v: from_f64(&rec.v) }, rec.count));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GadModel, ModelConfig};
    use crate::nn::GradBuffer;
    use crate::tensor::AdamConfig;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.k = 2;
        c.grouping.layers = 1;
        c.grouping.d_vis = 8;
        c.grouping.heads = 2;
        c.decoder.d_text = 8;
        c.decoder.heads = 2;
        c.decoder.layers = 1;
        c.decoder.adapter_rank = 1;
        c.mdaf_heads = 2;
        c
    }

    #[test]
    fn round_trip_restores_bits() {
        let cfg = small();
        let mut store = ParamStore::<f64>::new();
        GadModel::new(&cfg, &mut store, 1).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut grads = GradBuffer::new(&store);
        let id = store.id("gad.queries").unwrap();
        grads.accumulate(vec![(id, vec![0.1; store.get(id).value.len()])]);
        adam.step(&mut store, &grads, 1e-3).unwrap();
        let ck = Checkpoint::capture(serde_json::json!({"k": 2}), 1, &store, &adam);
        let back: Checkpoint = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);

        let mut store2 = ParamStore::<f64>::new();
        GadModel::new(&cfg, &mut store2, 99).unwrap();
        let mut adam2 = Adam::new(&store2, AdamConfig::default());
        back.restore(&mut store2, &mut adam2).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(adam2.step, 1);
        assert_eq!(adam2.moments[id.index()].as_ref().unwrap().1, 1);
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        GadModel::new(&small(), &mut store, 1).unwrap();
        let adam = Adam::new(&store, AdamConfig::default());
        let ck = Checkpoint::capture(serde_json::Value::Null, 0, &store, &adam);
        let mut other = small();
        other.k = 3;
        let mut store2 = ParamStore::<f64>::new();
        GadModel::new(&other, &mut store2, 1).unwrap();
        let mut adam2 = Adam::new(&store2, AdamConfig::default());
        let err = ck.restore(&mut store2, &mut adam2).unwrap_err().to_string();
        assert!(err.contains("reasoning.embed.group") || err.contains("gad.queries"), "{err}");
    }
}
