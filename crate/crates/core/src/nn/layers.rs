//! Parameterized building blocks. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward pass on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{ConvGeometry, Padding, Tape, Var};
use super::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self::with_init(
            store,
            name,
            group,
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
            Tensor::zeros(&[out_dim]),
        )
    }

    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        weight: Tensor<T>,
        bias: Tensor<T>,
    ) -> Self {
        let (in_dim, out_dim) = (weight.rows(), weight.cols());
        assert_eq!(bias.len(), out_dim);
        Linear {
            weight: store.add(format!("{name}.weight"), group, weight),
            bias: store.add(format!("{name}.bias"), group, bias),
            in_dim,
            out_dim,
        }
    }

    /// `x [m,in] -> [m,out]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Forward without a tape, for inference over plain rows.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.matmul(store.value(self.weight));
        let b = store.value(self.bias);
        let n = self.out_dim;
        for row in y.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[dim], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Batch statistics in training mode (also updating the running
    /// estimates), running estimates otherwise.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &mut ParamStore<T>, x: Var, train: bool) -> Var {
        if train && tape.value(x).rows() > 1 {
            let gamma = tape.param(store, self.gamma);
            let beta = tape.param(store, self.beta);
            let (y, mean, var) = tape.batch_norm(x, gamma, beta, T::c(self.eps));
            let mom = T::c(self.momentum);
            let rm = &mut store.get_mut(self.running_mean).value;
            for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - mom) * *r + mom * *m;
            }
            let rv = &mut store.get_mut(self.running_var).value;
            for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                *r = (T::one() - mom) * *r + mom * *v;
            }
            y
        } else {
            self.forward_eval(tape, store, x)
        }
    }

    /// Normalization with the running estimates.
    pub fn forward_eval<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let (scale, shift) = self.eval_affine(store);
        let s = tape.constant(scale);
        let sh = tape.constant(shift);
        let xs = tape.mul_row(x, s);
        let xs = tape.add_row(xs, sh);
        let xs = tape.mul_row(xs, gamma);
        tape.add_row(xs, beta)
    }

    /// `x̂ = x·scale + shift` using running statistics.
    fn eval_affine<T: Scalar>(&self, store: &ParamStore<T>) -> (Tensor<T>, Tensor<T>) {
        let mean = store.value(self.running_mean);
        let var = store.value(self.running_var);
        let eps = T::c(self.eps);
        let scale = var.map(|v| T::one() / (v + eps).sqrt());
        let shift = mean.zip_map(&scale, |m, s| -m * s);
        (scale, shift)
    }
}

/// Single-layer LSTM cell with fused gate weights (order: input, forget,
/// cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        LstmCell {
            w_input: store.add(format!("{name}.w_input"), group, Tensor::uniform(&[in_dim, 4 * hidden], bound, rng)),
            w_hidden: store.add(format!("{name}.w_hidden"), group, Tensor::uniform(&[hidden, 4 * hidden], bound, rng)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[4 * hidden])),
            in_dim,
            hidden,
        }
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: &str, in_dim: usize, hidden: usize) -> Self {
        LstmCell {
            w_input: store.add(format!("{name}.w_input"), group, Tensor::zeros(&[in_dim, 4 * hidden])),
            w_hidden: store.add(format!("{name}.w_hidden"), group, Tensor::zeros(&[hidden, 4 * hidden])),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[4 * hidden])),
            in_dim,
            hidden,
        }
    }

    /// One step: `x [b,in]`, `(h, c) [b,hidden]` -> `(h', c')`.
    pub fn step<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let wi = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let b = tape.param(store, self.bias);
        let gx = tape.matmul(x, wi);
        let gh = tape.matmul(h, wh);
        let gates = tape.add(gx, gh);
        let gates = tape.add_row(gates, b);
        let hd = self.hidden;
        let i = tape.sigmoid(tape.slice_cols(gates, 0, hd));
        let f = tape.sigmoid(tape.slice_cols(gates, hd, hd));
        let g = tape.tanh(tape.slice_cols(gates, 2 * hd, hd));
        let o = tape.sigmoid(tape.slice_cols(gates, 3 * hd, hd));
        let c_new = tape.add(tape.mul(f, c), tape.mul(i, g));
        let h_new = tape.mul(o, tape.tanh(c_new));
        (h_new, c_new)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        // He initialization for rectifier networks
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            weight: store.add(
                format!("{name}.weight"),
                group,
                Tensor::randn(&[out_channels, in_channels, kernel, kernel], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(
            x,
            w,
            b,
            ConvGeometry {
                stride: self.stride,
                pad: self.kernel / 2,
                padding: self.padding,
            },
        )
    }
}

/// Embedding table `[vocab, dim]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: &str, table: Tensor<T>) -> Self {
        let (vocab, dim) = (table.rows(), table.cols());
        Embedding {
            table: store.add(format!("{name}.table"), group, table),
            vocab,
            dim,
        }
    }

    pub fn lookup<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, ids: Vec<usize>) -> Var {
        let t = tape.param(store, self.table);
        tape.select_rows(t, ids)
    }
}
