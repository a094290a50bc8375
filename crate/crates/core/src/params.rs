//! Flat parameter buffers with a named shape table.
//!
//! Models keep every trainable value in one `Vec<f64>`; the layout records
//! where each named tensor lives. Optimizers, gradient checks and
//! checkpoints work on the flat buffer.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len(),
        };
        let r = spec.range();
        self.tensors.push(spec);
        r
    }

    pub fn len(&self) -> usize {
        self.tensors.last().map_or(0, |t| t.offset + t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// How a tensor is filled at initialization.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
}

pub fn fill<R: Rng + ?Sized>(buf: &mut [f64], init: Init, rng: &mut R) {
    match init {
        Init::Zeros => buf.fill(0.0),
        Init::Ones => buf.fill(1.0),
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            buf.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("non-empty range");
            buf.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
    }
}
