//! Named parameter collections and the graph binder.
//!
//! Parameters live in a `BTreeMap` so iteration order (and therefore
//! serialization, optimizer sweeps, and EMA updates) is deterministic.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::{arg_err, Result, Tensor};

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| arg_err!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.map.values_mut() {
            t.grad = None;
        }
    }
}

/// Exponential moving average update: `target = m * target + (1 - m) * source`,
/// matched by parameter name. The two sets must have identical names/shapes.
pub fn ema_update(target: &mut ParamSet, source: &ParamSet, m: f64) -> Result<()> {
    if target.len() != source.len() {
        return Err(arg_err!(
            "ema: {} target params vs {} source",
            target.len(),
            source.len()
        ));
    }
    for (name, src) in source.iter() {
        let dst = target
            .get_mut(name)
            .ok_or_else(|| arg_err!("ema: target missing {name}"))?;
        if dst.shape() != src.shape() {
            return Err(arg_err!("ema: shape mismatch on {name}"));
        }
        for (d, s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
            *d = m * *d + (1.0 - m) * *s;
        }
    }
    Ok(())
}

/// Binds parameters into a graph, one leaf per name per graph, and pulls
/// gradients back out after backward. Frozen names become constants so they
/// receive no gradient and are bit-identical across steps.
#[derive(Default)]
pub struct Binder {
    bound: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl Binder {
    pub fn new() -> Binder {
        Binder::default()
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn var(&mut self, g: &mut Graph, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = params.expect(name)?;
        let v = if self.frozen.contains(name) {
            g.constant_tensor(t)?
        } else {
            g.leaf_tensor(t)?
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Accumulate `scale * dL/dp` into each bound parameter's grad buffer.
    pub fn harvest(&self, g: &Graph, params: &mut ParamSet, scale: f64) -> Result<()> {
        for (name, &var) in &self.bound {
            if self.frozen.contains(name) {
                continue;
            }
            let Some(grad) = g.grad(var) else { continue };
            let t = params
                .get_mut(name)
                .ok_or_else(|| arg_err!("harvest: missing {name}"))?;
            if t.grad.is_none() {
                t.zero_grad();
            }
            let buf = t.grad.as_mut().expect("grad allocated");
            for (b, gv) in buf.iter_mut().zip(grad.iter()) {
                *b += scale * gv;
            }
        }
        Ok(())
    }
}
