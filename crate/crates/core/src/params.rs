use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named model tensor.
///
/// Frozen (non-trainable) parameters take part in the forward pass but are
/// never updated and receive no gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Parameter {
            name: name.into(),
            value: Arc::new(value),
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// All parameters of a model, kept in lexicographic name order.
///
/// The position of a parameter in that order is its id.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_params(mut params: Vec<Parameter>) -> Result<Self> {
        params.sort_by(|a, b| a.name.cmp(&b.name));
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate parameter name {:?}", p.name)));
            }
        }
        Ok(ParamStore { params, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn shared_value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.params[id].value)
    }

    /// Mutable access; copies the storage only if a live tape still holds it.
    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id].value)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.params[self.id(name)?].value())
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every value from `(name, tensor)` pairs that must match this
    /// store's names and shapes exactly.
    pub fn assign(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = self.id(name)?;
            if self.params[id].value.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name:?}: expected shape {:?}, got {:?}",
                    self.params[id].value.shape(),
                    t.shape()
                )));
            }
        }
        for (name, t) in tensors {
            let id = self.index[name];
            self.params[id].value = Arc::new(t.clone());
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }

    /// Rounds every value to the nearest binary32.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for x in Arc::make_mut(&mut p.value).data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Gradient buffers indexed by parameter id; `None` means zero.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros(len: usize) -> Self {
        ParamGrads {
            grads: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    pub fn set(&mut self, id: usize, g: Vec<f64>) {
        self.grads[id] = Some(g);
    }

    pub(crate) fn accumulate(&mut self, id: usize, g: &[f64]) {
        match &mut self.grads[id] {
            Some(dst) => {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => {
                    for (x, y) in d.iter_mut().zip(src) {
                        *x += scale * y;
                    }
                }
                None => *dst = Some(src.iter().map(|y| scale * y).collect()),
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g {
                *x *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|x| x.is_finite())
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|&x| x == 0.0)
    }
}
