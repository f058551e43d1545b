//! A small dense-network stack in `f64`: Linear, BatchNorm1d, ReLU and
//! inverted Dropout, composed into the MLP encoder, plus AdamW, a cosine
//! schedule, checkpoints and a central-difference gradient checker.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use encoder::{Encoder, EncoderConfig, ForwardCache, GradScope};
pub use gradcheck::{finite_difference_check, GradCheckReport, HasParameters, ParamSet};
pub use layers::{BatchNorm1d, Linear};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

/// A named dense array with a gradient buffer of the same shape.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Gradient buffers are scratch space and do not take part in equality.
impl PartialEq for ParamTensor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape && self.values == other.values
    }
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, values.len(), "shape/value length mismatch");
        Self {
            name: name.into(),
            shape,
            grad: vec![0.0; len],
            values,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn mat(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.values).expect("2-D parameter")
    }

    pub(crate) fn vec(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[..])
    }

    pub(crate) fn grad_mat_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.grad).expect("2-D parameter")
    }

    pub(crate) fn grad_vec_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.grad[..])
    }
}
