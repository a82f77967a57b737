//! Dense f64 tensors of rank 0, 1, or 2.
//!
//! A tensor is a shape plus a flat, immutable value buffer. When an
//! operation on a [`Tape`](super::Tape) produced the tensor, `node` points at
//! the record entry so gradients can flow back through it; detached tensors
//! (`node == None`) act as constants.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<usize>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "from_vec".into(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
            node: None,
        }
    }

    /// Gaussian init with the given standard deviation (Box-Muller).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let t = 2.0 * std::f64::consts::PI * u2;
            data.push(r * t.cos() * std);
            if data.len() < n {
                data.push(r * t.sin() * std);
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<usize>) -> Tensor {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Row count; a vector counts as `len` rows of width one, a scalar as one.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[0],
        }
    }

    /// Column count of the trailing axis.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same values, no record reference.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn allclose(&self, other: &Tensor, tol: f64) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}
