//! Named parameter storage, binding into a graph, momentum SGD, and the
//! JSON checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, ConvNetSpec, KERNEL};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat `name → array` store. Iteration order is lexicographic, which fixes
/// the order of every optimizer update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "param",
                detail: format!("{name}: {} values for shape {shape:?}", data.len()),
            });
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    /// Copy in every entry of `other` whose name starts with `prefix`.
    pub fn merge_prefix(&mut self, other: &ParamSet, prefix: &str) {
        for (k, v) in other.entries.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Set every value to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.entries.values_mut().for_each(|e| e.data.fill(0.0));
        out
    }

    /// Put every parameter on `g`; names for which `trainable` is false
    /// become constants and receive no gradient.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: impl Fn(&str) -> bool) -> Result<Bound<'g>> {
        let mut tensors = BTreeMap::new();
        for (name, e) in &self.entries {
            let t = if trainable(name) {
                g.param(e.data.clone(), &e.shape)?
            } else {
                g.constant(e.data.clone(), &e.shape)?
            };
            tensors.insert(name.clone(), t);
        }
        Ok(Bound { graph: g, tensors })
    }

    /// Uniform `±sqrt(6 / fan_in)` weights and zero biases for a conv stack
    /// and its optional head, under `prefix`.
    pub fn init_convnet<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        spec: &ConvNetSpec,
        rng: &mut R,
    ) -> Result<()> {
        let mut cin = spec.in_channels;
        for (i, &w) in spec.widths.iter().enumerate() {
            let fan_in = cin * KERNEL * KERNEL;
            let shape = [w, cin, KERNEL, KERNEL];
            self.insert(
                &format!("{prefix}.conv{i}.weight"),
                &shape,
                he_uniform(rng, fan_in, w * fan_in),
            )?;
            self.insert(&format!("{prefix}.conv{i}.bias"), &[w], vec![0.0; w])?;
            cin = w;
        }
        if let Some(out) = spec.head {
            self.init_linear(&format!("{prefix}.fc"), cin, out, rng)?;
        }
        Ok(())
    }

    /// Linear layer with `±sqrt(1 / d_in)` weights and zero bias.
    pub fn init_linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let a = (1.0 / d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let w = (0..d_in * d_out).map(|_| dist.sample(rng)).collect();
        self.insert(&format!("{prefix}.weight"), &[d_out, d_in], w)?;
        self.insert(&format!("{prefix}.bias"), &[d_out], vec![0.0; d_out])
    }

    /// LSTM weights with `±sqrt(1 / k)` entries and forget-gate bias 1.
    pub fn init_lstm<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        d: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        let a = (1.0 / k as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| dist.sample(rng)).collect() };
        self.insert(&format!("{prefix}.w_ih"), &[4 * k, d], draw(4 * k * d))?;
        self.insert(&format!("{prefix}.w_hh"), &[4 * k, k], draw(4 * k * k))?;
        let mut bias = vec![0.0; 4 * k];
        bias[k..2 * k].fill(1.0);
        self.insert(&format!("{prefix}.bias"), &[4 * k], bias)
    }
}

fn he_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Parameters placed on one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    tensors: BTreeMap<String, Tensor<'g>>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Tensor<'g>> {
        self.tensors
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Gradients of every trainable parameter reached by backward.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, t)| (k.clone(), t.grad_or_zero()))
            .collect()
    }
}

/// Classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update. Parameters without a gradient entry are untouched
    /// and keep their velocity.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name}[{i}] = {}",
                    g[i]
                )));
            }
        }
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no parameter '{name}'")))?;
            if p.data.len() != g.len() {
                return Err(Error::Shape {
                    op: "sgd",
                    detail: format!("{name}: {} grads for {} values", g.len(), p.data.len()),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), gv) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }

    /// Forget all velocities (used at stage boundaries).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// Which model family a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Policy network plus all backbones.
    Arnet,
    /// Highest-resolution backbone only.
    Uniform,
    /// Highest-resolution backbone plus a recurrent aggregator.
    Lstm,
}

/// Serialized model: JSON object of named arrays plus the architecture it
/// was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub arch: ArchConfig,
    /// Actions the policy may take; absent means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, arch: ArchConfig, params: ParamSet) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind,
            arch,
            mask: None,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("version").and_then(serde_json::Value::as_u64);
        if found != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION.to_string(),
                found: found.map_or_else(|| "none".into(), |f| f.to_string()),
            });
        }
        let ck: Self = serde_json::from_value(v)?;
        ck.arch.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
