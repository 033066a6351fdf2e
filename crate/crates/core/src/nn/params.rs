use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{adam_update, AdamConfig, AdamMoments, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named parameter tensors of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Validation(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

/// Weight initialisers drawing from a seeded stream.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform `out x in` matrix.
    pub fn xavier<S: Scalar>(&mut self, out: usize, inp: usize) -> Tensor<S> {
        let a = (6.0 / (out + inp) as f64).sqrt();
        self.uniform(&[out, inp], a)
    }

    pub fn uniform<S: Scalar>(&mut self, shape: &[usize], a: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(self.rng.gen_range(-a..=a))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn normal<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std");
        let data = (0..n).map(|_| S::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

/// A forward/backward pass: a fresh tape with parameters bound on first use.
pub struct Graph<'p, S> {
    pub tape: Tape<S>,
    store: &'p ParamStore<S>,
    bound: Vec<Option<Var>>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Graph { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// The tape variable for a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound trainable parameter reached by the last backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<S>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Gradient accumulator across the clips of one optimizer step.
#[derive(Clone, Debug)]
pub struct GradBuffer<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradBuffer<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        GradBuffer { grads: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<S>)>) {
        for (id, g) in grads {
            match &mut self.grads[id.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Adam over the trainable parameters of a [`ParamStore`].
///
/// Bias correction uses a per-parameter update count, so a parameter that
/// first receives a gradient late still starts from a corrected first step.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: Vec<Option<(AdamMoments<S>, u64)>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: vec![None; store.len()] }
    }

    /// Applies one update; parameters without a gradient this step are skipped.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradBuffer<S>, lr: f64) -> Result<()> {
        self.step += 1;
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let len = p.value.len();
            let (mom, count) = self.moments[id.0].get_or_insert_with(|| (AdamMoments::zeros(len), 0));
            *count += 1;
            adam_update(p.value.data_mut(), g, mom, *count, lr, &self.cfg)?;
        }
        Ok(())
    }
}
