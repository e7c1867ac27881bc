use crate::error::{AutogradError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter optimizer buffers.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first_moment: Option<Vec<T>>,
    pub second_moment: Option<Vec<T>>,
    pub momentum: Option<Vec<T>>,
}

/// Named, persistent array owned by a model.
///
/// Parameters live outside the autograd graph: each forward pass binds them
/// to fresh leaves with [`Parameter::leaf`], and gradients are pulled back
/// with [`Parameter::absorb_grad`]. Non-trainable parameters hold buffers
/// such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    pub trainable: bool,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "parameter",
                detail: format!("`{name}` shape {shape:?} with {} values", data.len()),
            });
        }
        Ok(Parameter {
            name,
            shape: shape.to_vec(),
            data,
            grad: None,
            trainable: true,
            state: OptimizerState::default(),
        })
    }

    /// Non-trainable buffer.
    pub fn buffer(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        let mut p = Self::new(name, shape, data)?;
        p.trainable = false;
        Ok(p)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Replaces the values, keeping the shape.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "parameter",
                detail: format!("`{}` expects {} values, got {}", self.name, self.data.len(), data.len()),
            });
        }
        self.data = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) {
        assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    /// Graph leaf holding a copy of the current values; tracks gradients
    /// only when trainable.
    pub fn leaf(&self) -> Tensor<T> {
        let t = if self.trainable {
            Tensor::param(&self.shape, self.data.clone())
        } else {
            Tensor::new(&self.shape, self.data.clone())
        };
        t.expect("parameter shape is consistent")
    }

    /// Adds the gradient accumulated on `leaf` (if any) into this parameter.
    pub fn absorb_grad(&mut self, leaf: &Tensor<T>) {
        let Some(g) = leaf.grad() else { return };
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g),
        }
    }
}
