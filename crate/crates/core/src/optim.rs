//! Named parameter sets and the Adam optimizer.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Graph, Gradients, Var};
use crate::checkpoint::{to_storage, TensorFile};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.map(to_storage));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("parameter `{name}` is not loaded")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Puts every tensor into the graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn export(&self, prefix: &str, file: &mut TensorFile) {
        for (k, v) in &self.tensors {
            file.push(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Reads every tensor named like `template`'s entries, checking shapes.
    pub fn import(template: &ParamSet, prefix: &str, file: &TensorFile) -> Result<Self> {
        let mut out = ParamSet::new();
        for (k, t) in &template.tensors {
            let loaded = file.tensor(&format!("{prefix}{k}"))?;
            if loaded.shape() != t.shape() {
                return Err(Error::State(format!(
                    "parameter `{k}` has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            out.tensors.insert(k.clone(), loaded);
        }
        Ok(out)
    }

    /// Overwrites every parameter with uniform noise in `[-scale, scale]`.
    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = to_storage(rng.random_range(-scale..scale)));
        }
    }
}

pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter `{name}` is not loaded")))
    }

    /// Collects gradients aligned with `params` (zeros where unused).
    pub fn gradients(&self, grads: &Gradients, params: &ParamSet) -> ParamSet {
        let tensors = params
            .tensors
            .iter()
            .map(|(k, t)| {
                let g = match self.vars.get(k) {
                    Some(&v) => grads.get_or_zeros(v, t),
                    None => Tensor::zeros(t.shape()),
                };
                (k.clone(), g)
            })
            .collect();
        ParamSet { tensors }
    }
}

/// Sums gradient sets in slice order, so the result is independent of
/// how they were produced.
pub fn sum_gradients(parts: &[ParamSet]) -> Option<ParamSet> {
    let (first, rest) = parts.split_first()?;
    let mut acc = first.clone();
    for p in rest {
        for ((_, a), (_, b)) in acc.tensors.iter_mut().zip(&p.tensors) {
            a.add_assign(b);
        }
    }
    Some(acc)
}

impl ParamSet {
    pub fn scale_all(&mut self, k: f64) {
        self.tensors.values_mut().for_each(|t| t.scale_assign(k));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update. Parameters and moments are rounded to
    /// storage precision so a saved state resumes bit-identically.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.v.tensors.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = to_storage(self.beta1 * m[i] + (1.0 - self.beta1) * g[i]);
                v[i] = to_storage(self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i]);
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] = to_storage(p[i] - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }

    pub fn export(&self, prefix: &str, file: &mut TensorFile) {
        self.m.export(&format!("{prefix}m."), file);
        self.v.export(&format!("{prefix}v."), file);
        file.push(format!("{prefix}step"), Tensor::scalar(self.step as f64));
    }

    pub fn import(params: &ParamSet, prefix: &str, file: &TensorFile) -> Result<Self> {
        let mut a = Adam::new(params);
        a.m = ParamSet::import(params, &format!("{prefix}m."), file)?;
        a.v = ParamSet::import(params, &format!("{prefix}v."), file)?;
        a.step = file.tensor(&format!("{prefix}step"))?.item() as u64;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&p);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let x = b.var("x").unwrap();
            let z = g.constant(Tensor::from_vec(&[2], vec![1.0, 0.5]).unwrap());
            let l = g.squared_distance(x, z, false).unwrap();
            let grads = b.gradients(&g.backward(l).unwrap(), &p);
            adam.update(&mut p, &grads, 0.01);
        }
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 1.0).abs() < 1e-2 && (x[1] - 0.5).abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut g = ParamSet::new();
        g.insert("x", Tensor::scalar(4.0));
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, 0.125);
        assert!((p.get("x").unwrap().item() - 0.875).abs() < 1e-6);
    }

    #[test]
    fn missing_param_is_state_error() {
        let p = ParamSet::new();
        assert!(matches!(p.get("w"), Err(Error::State(_))));
    }
}
