use std::ops::Index;

use sha2::{Digest, Sha256};

use super::{Gradients, Graph, Scalar, Tensor, TensorError, Var};

/// Named trainable (or frozen) tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Option<Tensor<f32>>,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of parameters; insertion order is the binding order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Graph leaves for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Wraps explicit leaves (one per parameter, store order), e.g. values
    /// bound in higher precision for finite-difference checks.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter { name, value, grad: None, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        self.params.iter_mut().filter(|p| p.name.starts_with(prefix)).for_each(|p| p.frozen = frozen);
    }

    /// Binds current values as graph leaves; frozen parameters become constants.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = p.value.cast::<T>();
                if p.frozen {
                    g.constant(t)
                } else {
                    g.param(t)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds `weight · ∂L/∂p` into each trainable parameter's gradient buffer.
    /// Trainable parameters that received no gradient get an explicit zero.
    pub fn accumulate<T: Scalar>(&mut self, bound: &Bound, grads: &Gradients<T>, weight: f32) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if p.frozen {
                continue;
            }
            let g = grads.get_or_zeros(v);
            let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for (d, s) in buf.data_mut().iter_mut().zip(g.data()) {
                *d += weight * s.f64() as f32;
            }
        }
    }

    /// Adds precomputed per-parameter gradients (store order).
    pub fn accumulate_tensors(&mut self, grads: &[Option<Tensor<f32>>], weight: f32) -> Result<(), TensorError> {
        if grads.len() != self.params.len() {
            return Err(TensorError::Usage("gradient list length mismatch".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.frozen {
                continue;
            }
            let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            if let Some(g) = g {
                for (d, s) in buf.data_mut().iter_mut().zip(g.data()) {
                    *d += weight * s;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// SHA-256 over names, shapes and raw values of the selected parameters.
    pub fn fingerprint(&self, mut filter: impl FnMut(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values by name. Every stored parameter must be present with
    /// a matching shape.
    pub fn load(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<(), TensorError> {
        for p in &mut self.params {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| TensorError::Usage(format!("checkpoint lacks {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::shape("load", format!("{}: {:?} vs {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_bind_as_constants() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros([2]));
        let b = s.add("b", Tensor::zeros([2]));
        s.get_mut(b).frozen = true;
        let mut g = Graph::<f32>::new();
        let bound = s.bind(&mut g);
        assert!(g.requires_grad(bound[a]));
        assert!(!g.requires_grad(bound[b]));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros([2]));
        let before = s.fingerprint(|_| true);
        s.get_mut(a).value.data_mut()[0] = 1.0;
        assert_ne!(before, s.fingerprint(|_| true));
    }
}
