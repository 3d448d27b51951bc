use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of uniquely named parameters.
///
/// Iteration order is insertion order, which makes optimizer state,
/// checkpoint bytes and gradient reduction deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn total_coords(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn at(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Uniform init in +/- sqrt(6 / (fan_in + fan_out)); biases start at zero.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("xavier shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            set.add("w", Tensor::zeros(&[2, 2])),
            Err(TensorError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn xavier_respects_bound_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = xavier_uniform(16, 16, &mut rng);
        let bound = (6.0 / 32.0f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let w2 = xavier_uniform(16, 16, &mut rng2);
        assert_eq!(w, w2);
    }
}
