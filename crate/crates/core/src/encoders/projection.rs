use rand::Rng;

use crate::nn::{Linear, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Affine map into the joint space.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
}

impl Projection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Projection {
            linear: Linear::new(store, name, group, in_dim, out_dim, rng),
        }
    }

    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: &str, dim: usize) -> Self {
        Projection {
            linear: Linear::with_init(store, name, group, Tensor::identity(dim), Tensor::zeros(&[dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.linear.forward(tape, store, x)
    }

    pub fn project<T: Scalar>(&self, store: &ParamStore<T>, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.in_dim() {
            return Err(Error::Shape(format!("projection expects {} inputs, got {}", self.in_dim(), v.len())));
        }
        Ok(self.linear.apply(store, &Tensor::row(v.to_vec())).into_data())
    }
}
