//! Dense tensors and the layer kernels of the encoder, each with an exact
//! hand-written backward pass.
//!
//! Feature maps use the layout `N×C×D×H×W`; dense activations are `N×F`.
//! Kernels are pure functions over borrowed buffers: callers keep whatever
//! forward state the backward pass needs.

mod adam;
mod conv;
mod dense;
mod norm;
mod pool;

#[cfg(test)]
pub(crate) mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv3d, conv3d_backward, conv_output_extent};
pub use dense::{dense, dense_backward};
pub use norm::{batchnorm, batchnorm_backward, BatchNormCache, BatchNormConfig, BatchStats};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool3d, maxpool3d_backward, pool_output_extent,
    relu, relu_backward,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Whether batch-dependent layers use batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

/// Equality of shape and values; gradient buffers are scratch space.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > 5 {
            return shape_err(format!("tensor order {} exceeds 5", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return shape_err(format!(
                "gradient of length {} for tensor {:?}",
                delta.len(),
                self.shape
            ));
        }
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Errors with the layer name if any value is NaN or infinite.
    pub fn ensure_finite(&self, layer: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                layer: layer.to_string(),
            })
        }
    }

    pub(crate) fn dims5(&self, what: &str) -> Result<[usize; 5]> {
        match self.shape[..] {
            [n, c, d, h, w] => Ok([n, c, d, h, w]),
            _ => shape_err(format!(
                "{what}: expected N×C×D×H×W, got {:?}",
                self.shape
            )),
        }
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [n, f] => Ok([n, f]),
            _ => shape_err(format!("{what}: expected N×F, got {:?}", self.shape)),
        }
    }

    /// Row `i` of an `N×F` tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let f = self.data.len() / self.shape[0];
        &self.data[i * f..(i + 1) * f]
    }

    /// Stacks equally shaped tensors along a new leading axis, merging
    /// with an existing leading axis of extent 1.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = match items.first() {
            Some(t) => t,
            None => return shape_err("cannot stack zero tensors"),
        };
        let inner: Vec<usize> = if first.shape.first() == Some(&1) {
            first.shape[1..].to_vec()
        } else {
            first.shape.clone()
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.len() != first.len() {
                return shape_err("stack of differently sized tensors");
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}
