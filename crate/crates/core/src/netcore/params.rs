use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use super::NetError;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameters keyed by dotted path, e.g. `neck.lateral3.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), Param { tensor, frozen: false });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, NetError> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Set the frozen flag on every parameter under `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Copy of the parameters whose names start with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamSet {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamSet { params }
    }

    /// Overwrite or add every parameter of `other`, keeping local frozen flags.
    pub fn load_from(&mut self, other: &ParamSet) {
        for (name, p) in &other.params {
            let frozen = self.params.get(name).map(|q| q.frozen).unwrap_or(p.frozen);
            self.params.insert(name.clone(), Param { tensor: p.tensor.clone(), frozen });
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.grad = None;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn total_numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }
}

/// Uniform fan-in scaled initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32 as f64)
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Plain SGD with L2 weight decay on non-frozen parameters that carry a
/// gradient. Gradients are consumed by the step.
pub fn sgd_step(params: &mut ParamSet, lr: f64, weight_decay: f64) {
    for p in params.params.values_mut() {
        let Some(grad) = p.tensor.grad.take() else { continue };
        if p.frozen {
            continue;
        }
        for (w, g) in p.tensor.data_mut().iter_mut().zip(&grad) {
            *w = (*w - lr * (g + weight_decay * *w)) as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut t = Tensor::from_vec(&[1], vec![value]).unwrap();
        t.grad = Some(vec![grad]);
        ps.insert("w", t);
        ps
    }

    #[test]
    fn sgd_arithmetic() {
        let mut ps = single(1.0, 1.0);
        sgd_step(&mut ps, 0.1, 0.0);
        assert_eq!(ps.tensor("w").unwrap().data()[0], 0.9f32 as f64);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = single(0.37f32 as f64, 5.0);
        let before = ps.tensor("w").unwrap().data().to_vec();
        sgd_step(&mut ps, 0.0, 0.1);
        assert_eq!(ps.tensor("w").unwrap().data(), &before[..]);
    }

    #[test]
    fn frozen_param_never_moves() {
        let mut ps = single(0.5, 1.0);
        ps.set_frozen("w", true);
        for _ in 0..100 {
            ps.get_mut("w").unwrap().tensor.grad = Some(vec![1.0]);
            sgd_step(&mut ps, 0.1, 0.01);
        }
        assert_eq!(ps.tensor("w").unwrap().data()[0].to_bits(), 0.5f64.to_bits());
    }
}
