use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// Declares a parameter before it exists: stable id, shape, initializer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub id: String,
    pub shape: [usize; 4],
    pub init: Init,
}

impl ParamSpec {
    pub fn new(id: impl Into<String>, shape: [usize; 4], init: Init) -> Self {
        ParamSpec { id: id.into(), shape, init }
    }

    /// Weight with `fan_in`-scaled Gaussian init.
    pub fn weight(id: impl Into<String>, shape: [usize; 4], fan_in: usize) -> Self {
        Self::new(id, shape, Init::Normal(1.0 / (fan_in.max(1) as f64).sqrt()))
    }

    pub fn bias(id: impl Into<String>, len: usize) -> Self {
        Self::new(id, [1, 1, 1, len], Init::Zeros)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Parameter {
        let value = match self.init {
            Init::Zeros => Tensor::zeros(self.shape),
            Init::Ones => Tensor::full(self.shape, 1.0),
            Init::Normal(std) => Tensor::randn(self.shape, std, rng),
        };
        Parameter::new(self.id.clone(), value, true)
    }
}

/// A learned tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { id: id.into(), value, grad, trainable }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "Parameter::set_value",
                expected: self.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }
}
