//! A small reverse-mode differentiation core over row-major `f32` arrays.
//!
//! Each forward pass records onto a fresh [`Graph`]; calling
//! [`Graph::backward`] walks the tape once in reverse. Parameters live
//! outside the graph in [`Param`]s and are copied in as leaves.

mod gemm;
pub mod gradcheck;
mod graph;

pub use graph::{Graph, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("numeric fault (NaN or Inf) produced by {op}")]
    NumericFault { op: &'static str },
    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Rank-N array of 32-bit reals with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(AutodiffError::Shape {
                    op: "set_grad",
                    left: self.shape.clone(),
                    right: vec![g.len()],
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named trainable tensor with its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub momentum: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let momentum = vec![0.0; tensor.numel()];
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `v <- m*v + g + wd*w; w <- w - lr*v` for every parameter.
///
/// All gradients are checked before any parameter is touched, so a
/// missing or malformed gradient leaves the whole set unchanged.
pub fn sgd_step(params: &mut [Param], cfg: &SgdConfig) -> Result<()> {
    for p in params.iter() {
        match p.tensor.grad() {
            None => {
                return Err(AutodiffError::MissingGradient {
                    name: p.name.clone(),
                })
            }
            Some(g) if g.len() != p.tensor.numel() => {
                return Err(AutodiffError::Shape {
                    op: "sgd_step",
                    left: p.tensor.shape().to_vec(),
                    right: vec![g.len()],
                })
            }
            Some(g) if g.iter().any(|v| !v.is_finite()) => {
                return Err(AutodiffError::NumericFault { op: "sgd_step" })
            }
            _ => {}
        }
    }
    for p in params.iter_mut() {
        let Param {
            tensor, momentum, ..
        } = p;
        let grad = tensor.grad.take().unwrap_or_default();
        for ((w, v), g) in tensor.data.iter_mut().zip(momentum.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
        tensor.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32, g: f32) -> Param {
        let mut p = Param::new("w", Tensor::new(&[1], vec![w]).unwrap());
        p.tensor.set_grad(Some(vec![g])).unwrap();
        p
    }

    #[test]
    fn sgd_fixtures() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut ps = vec![scalar_param(1.0, 1.0)];
        sgd_step(&mut ps, &cfg).unwrap();
        assert!((ps[0].tensor.data()[0] - 0.9).abs() < 1e-7);
        assert!((ps[0].momentum[0] - 1.0).abs() < 1e-7);
        sgd_step(&mut ps, &cfg).unwrap();
        assert!((ps[0].momentum[0] - 1.9).abs() < 1e-6);
        assert!((ps[0].tensor.data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = vec![scalar_param(0.375, 3.0)];
        let before = ps[0].tensor.data().to_vec();
        sgd_step(
            &mut ps,
            &SgdConfig {
                lr: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ps[0].tensor.data(), &before[..]);
    }

    #[test]
    fn missing_grad_is_atomic() {
        let mut ps = vec![
            scalar_param(1.0, 1.0),
            Param::new("head.bias", Tensor::zeros(&[2])),
        ];
        let err = sgd_step(&mut ps, &SgdConfig::default()).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::MissingGradient {
                name: "head.bias".into()
            }
        );
        assert_eq!(ps[0].tensor.data(), &[1.0]);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }
}
