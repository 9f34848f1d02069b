use std::collections::HashMap;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(shape_err(
                "param layout",
                format!("names differ: {:?} vs {:?}", self.names, other.names),
            ));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(shape_err(
                    "param layout",
                    format!("`{name}`: {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Overwrites values from `other` (same layout). Gradients are left untouched.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter set. The shadow never carries gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParamSet {
    decay: f64,
    shadow: ParamSet,
}

impl EmaParamSet {
    pub fn new(decay: f64, source: &ParamSet) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) && decay != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "EMA decay must lie in [0, 1], got {decay}"
            )));
        }
        let mut shadow = source.clone();
        for t in shadow.tensors_mut() {
            t.set_requires_grad(false);
        }
        Ok(Self { decay, shadow })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamSet {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut ParamSet {
        &mut self.shadow
    }

    /// shadow <- decay * shadow + (1 - decay) * source
    pub fn update(&mut self, source: &ParamSet) -> Result<()> {
        self.shadow.check_same_layout(source)?;
        let beta = self.decay;
        for (dst, src) in self.shadow.tensors_mut().iter_mut().zip(&source.tensors) {
            for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
                *d = beta * *d + (1.0 - beta) * s;
            }
        }
        Ok(())
    }
}

pub fn ema_update(ema: &mut EmaParamSet, source: &ParamSet) -> Result<()> {
    ema.update(source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v).unwrap()).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = single(1.0);
        assert!(p.insert("w", Tensor::scalar(2.0).unwrap()).is_err());
    }

    #[test]
    fn ema_zero_decay_copies_source() {
        let mut ema = EmaParamSet::new(0.0, &single(5.0)).unwrap();
        ema.update(&single(-2.0)).unwrap();
        assert_eq!(ema.shadow().get(ParamId(0)).values(), &[-2.0]);
    }

    #[test]
    fn ema_unit_decay_freezes_shadow() {
        let mut ema = EmaParamSet::new(1.0, &single(5.0)).unwrap();
        ema.update(&single(-2.0)).unwrap();
        assert_eq!(ema.shadow().get(ParamId(0)).values(), &[5.0]);
    }

    #[test]
    fn ema_three_updates() {
        // 0.1, 0.19, 0.271 by iterating s <- 0.9 s + 0.1
        let mut ema = EmaParamSet::new(0.9, &single(0.0)).unwrap();
        for _ in 0..3 {
            ema_update(&mut ema, &single(1.0)).unwrap();
        }
        let v = ema.shadow().get(ParamId(0)).values()[0];
        assert!((v - 0.271).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ema_fixed_point_when_source_equals_shadow() {
        let mut ema = EmaParamSet::new(0.7, &single(3.25)).unwrap();
        for _ in 0..5 {
            ema.update(&single(3.25)).unwrap();
        }
        assert_eq!(ema.shadow().get(ParamId(0)).values(), &[3.25]);
        assert!(ema.shadow().get(ParamId(0)).grad().is_none());
        assert!(!ema.shadow().get(ParamId(0)).requires_grad());
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut ema = EmaParamSet::new(0.5, &single(0.0)).unwrap();
        let mut other = ParamSet::new();
        other
            .insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        assert!(ema.update(&other).is_err());
    }
}
