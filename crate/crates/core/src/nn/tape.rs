//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with a
//! closure that maps the output gradient to one gradient per parent. Calling
//! [`Tape::backward`] walks the record in reverse.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use rayon::prelude::*;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::Scalar;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Spatial padding used by [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap-around (torus) padding.
    Circular,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients summed per parameter (a parameter may be placed on the tape
    /// more than once).
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                match out.iter_mut().find(|(p, _)| *p == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => out.push((id, g.clone())),
                }
            }
        }
        out
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn requires(&self, parents: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        parents.iter().any(|p| nodes[p.0].requires_grad)
    }

    fn op(&self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = self.requires(parents);
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    /// A value that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(Node {
            value: Rc::new(p.value.clone()),
            parents: Vec::new(),
            backward: None,
            requires_grad: p.trainable,
            param: Some(id),
        })
    }

    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let root_shape = nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, T::one()));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (i, id)))
            .collect();
        Gradients { grads, params }
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv);
        self.op(
            out,
            &[a, b],
            Box::new(move |g| {
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![T::zero(); m * k];
                matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                vec![
                    Tensor::new(av.shape().to_vec(), ga),
                    Tensor::new(bv.shape().to_vec(), gb),
                ]
            }),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add: {:?} vs {:?}", av.shape(), bv.shape());
        let out = av.zip_map(&bv, |x, y| x + y);
        self.op(out, &[a, b], Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "sub: {:?} vs {:?}", av.shape(), bv.shape());
        let out = av.zip_map(&bv, |x, y| x - y);
        self.op(out, &[a, b], Box::new(|g| vec![g.clone(), g.map(|v| -v)]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mul: {:?} vs {:?}", av.shape(), bv.shape());
        let out = av.zip_map(&bv, |x, y| x * y);
        self.op(
            out,
            &[a, b],
            Box::new(move |g| vec![g.zip_map(&bv, |g, y| g * y), g.zip_map(&av, |g, x| g * x)]),
        )
    }

    /// `a [m,n] + row [n]`, broadcasting the row over `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.len(), n, "add_row: {:?} vs {:?}", av.shape(), rv.shape());
        let mut out = (*av).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o = *o + r;
            }
        }
        let rshape = rv.shape().to_vec();
        self.op(
            out,
            &[a, row],
            Box::new(move |g| {
                let mut gr = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (acc, &v) in gr.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                vec![g.clone(), Tensor::new(rshape.clone(), gr)]
            }),
        )
    }

    /// `a [m,n] ⊙ row [n]`, broadcasting the row over `a`.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.len(), n, "mul_row: {:?} vs {:?}", av.shape(), rv.shape());
        let mut out = (*av).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o = *o * r;
            }
        }
        self.op(
            out,
            &[a, row],
            Box::new(move |g| {
                let mut ga = g.clone();
                let mut gr = vec![T::zero(); n];
                for ((gchunk, achunk), gachunk) in g
                    .data()
                    .chunks(n)
                    .zip(av.data().chunks(n))
                    .zip(ga.data_mut().chunks_mut(n))
                {
                    for j in 0..n {
                        gr[j] = gr[j] + gchunk[j] * achunk[j];
                        gachunk[j] = gchunk[j] * rv.data()[j];
                    }
                }
                vec![ga, Tensor::new(rv.shape().to_vec(), gr)]
            }),
        )
    }

    /// `a [m,n] ⊙ col [m,1]`, broadcasting the column across `a`.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(cv.len(), m, "mul_col: {:?} vs {:?}", av.shape(), cv.shape());
        let mut out = (*av).clone();
        for (i, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            let c = cv.data()[i];
            for o in chunk.iter_mut() {
                *o = *o * c;
            }
        }
        self.op(
            out,
            &[a, col],
            Box::new(move |g| {
                let mut ga = g.clone();
                let mut gc = vec![T::zero(); m];
                for i in 0..m {
                    let c = cv.data()[i];
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        gc[i] = gc[i] + gv * av.data()[i * n + j];
                        ga.data_mut()[i * n + j] = gv * c;
                    }
                }
                vec![ga, Tensor::new(cv.shape().to_vec(), gc)]
            }),
        )
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.op(out, &[a], Box::new(move |g| vec![g.map(|v| v * s)]))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.op(out, &[a], Box::new(|g| vec![g.clone()]))
    }

    // ---------------------------------------------------------------- pointwise

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|v| if v > T::zero() { v } else { T::zero() });
        self.op(
            out,
            &[a],
            Box::new(move |g| vec![g.zip_map(&av, |g, x| if x > T::zero() { g } else { T::zero() })]),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let y = Rc::new(out.clone());
        self.op(
            out,
            &[a],
            Box::new(move |g| vec![g.zip_map(&y, |g, y| g * y * (T::one() - y))]),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let y = Rc::new(out.clone());
        self.op(
            out,
            &[a],
            Box::new(move |g| vec![g.zip_map(&y, |g, y| g * (T::one() - y * y))]),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let y = Rc::new(out.clone());
        self.op(out, &[a], Box::new(move |g| vec![g.zip_map(&y, |g, y| g * y)]))
    }

    pub fn ln(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|v| v.ln());
        self.op(out, &[a], Box::new(move |g| vec![g.zip_map(&av, |g, x| g / x)]))
    }

    pub fn square(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|v| v * v);
        let two = T::c(2.0);
        self.op(out, &[a], Box::new(move |g| vec![g.zip_map(&av, |g, x| two * g * x)]))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.sum());
        self.op(
            out,
            &[a],
            Box::new(move |g| vec![Tensor::full(&shape, g.data()[0])]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Row sums: `[m,n] -> [m,1]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let out: Vec<T> = av.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        self.op(
            Tensor::new(vec![m, 1], out),
            &[a],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(m * n);
                for i in 0..m {
                    ga.extend(std::iter::repeat_n(g.data()[i], n));
                }
                vec![Tensor::new(vec![m, n], ga)]
            }),
        )
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let m = self.value(a).rows();
        self.segment_mean(a, vec![0..m])
    }

    /// Mean of each row range: `[t,n] -> [segments,n]`. Empty segments yield
    /// zero rows.
    pub fn segment_mean(&self, a: Var, segments: Vec<Range<usize>>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = vec![T::zero(); segments.len() * n];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            let inv = T::one() / T::c(seg.len() as f64);
            for r in seg.clone() {
                for j in 0..n {
                    out[s * n + j] = out[s * n + j] + av.data()[r * n + j] * inv;
                }
            }
        }
        let shape = av.shape().to_vec();
        let s_count = segments.len();
        self.op(
            Tensor::new(vec![s_count, n], out),
            &[a],
            Box::new(move |g| {
                let mut ga = Tensor::zeros(&shape);
                for (s, seg) in segments.iter().enumerate() {
                    if seg.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::c(seg.len() as f64);
                    for r in seg.clone() {
                        for j in 0..n {
                            let d = &mut ga.data_mut()[r * n + j];
                            *d = *d + g.data()[s * n + j] * inv;
                        }
                    }
                }
                vec![ga]
            }),
        )
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let av = self.value(a);
        let orig = av.shape().to_vec();
        let out = (*av).clone().reshaped(shape);
        self.op(out, &[a], Box::new(move |g| vec![g.clone().reshaped(orig.clone())]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let m = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == m), "concat_cols: row mismatch");
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in &vals {
                out.extend_from_slice(v.row_slice(i));
            }
        }
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.op(
            Tensor::new(vec![m, total], out),
            parts,
            Box::new(move |g| {
                let mut offs = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (w, shape) in widths.iter().zip(&shapes) {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g.data()[i * total + offs..i * total + offs + w]);
                    }
                    res.push(Tensor::new(shape.clone(), d));
                    offs += w;
                }
                res
            }),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let n = vals[0].cols();
        assert!(vals.iter().all(|v| v.cols() == n), "concat_rows: col mismatch");
        let rows: Vec<usize> = vals.iter().map(|v| v.rows()).collect();
        let mut out = Vec::new();
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let total = rows.iter().sum();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.op(
            Tensor::new(vec![total, n], out),
            parts,
            Box::new(move |g| {
                let mut offs = 0;
                rows.iter()
                    .zip(&shapes)
                    .map(|(r, shape)| {
                        let t = Tensor::new(shape.clone(), g.data()[offs * n..(offs + r) * n].to_vec());
                        offs += r;
                        t
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av.data()[i * n + start..i * n + start + len]);
        }
        let shape = av.shape().to_vec();
        self.op(
            Tensor::new(vec![m, len], out),
            &[a],
            Box::new(move |g| {
                let mut ga = Tensor::zeros(&shape);
                for i in 0..m {
                    ga.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![ga]
            }),
        )
    }

    /// Gather rows by index (duplicates allowed): `[v,n] -> [idx.len(),n]`.
    pub fn select_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            out.extend_from_slice(av.row_slice(i));
        }
        let shape = av.shape().to_vec();
        self.op(
            Tensor::new(vec![idx.len(), n], out),
            &[a],
            Box::new(move |g| {
                let mut ga = Tensor::zeros(&shape);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        let d = ga.data_mut();
                        d[i * n + j] = d[i * n + j] + g.data()[r * n + j];
                    }
                }
                vec![ga]
            }),
        )
    }

    /// Repeat every row `times` times consecutively: `[b,n] -> [b*times,n]`.
    pub fn repeat_rows(&self, a: Var, times: usize) -> Var {
        let idx = (0..self.value(a).rows())
            .flat_map(|r| std::iter::repeat_n(r, times))
            .collect();
        self.select_rows(a, idx)
    }

    // ---------------------------------------------------------------- normalization

    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = (*av).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let y = Rc::new(out.clone());
        self.op(
            out,
            &[a],
            Box::new(move |g| {
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![ga]
            }),
        )
    }

    /// Training-mode batch normalization over rows. Returns the normalized
    /// output plus the batch mean and (biased) variance per column.
    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, Vec<T>, Vec<T>) {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mf = T::c(m as f64);
        let mut mean = vec![T::zero(); n];
        for r in xv.data().chunks(n) {
            for (acc, &v) in mean.iter_mut().zip(r) {
                *acc = *acc + v;
            }
        }
        for v in &mut mean {
            *v = *v / mf;
        }
        let mut var = vec![T::zero(); n];
        for r in xv.data().chunks(n) {
            for j in 0..n {
                let d = r[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        for v in &mut var {
            *v = *v / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                xhat[i * n + j] = (xv.data()[i * n + j] - mean[j]) * inv_std[j];
            }
        }
        let xhat = Tensor::new(vec![m, n], xhat);
        let xhat_rc = Rc::new(xhat.clone());
        let inv = inv_std.clone();
        let normed = self.op(
            xhat,
            &[x],
            Box::new(move |g| {
                // dx = inv_std/m * (m*g - sum(g) - xhat*sum(g*xhat))
                let mut sg = vec![T::zero(); n];
                let mut sgx = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        sg[j] = sg[j] + gv;
                        sgx[j] = sgx[j] + gv * xhat_rc.data()[i * n + j];
                    }
                }
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let k = i * n + j;
                        gx[k] = inv[j] / mf * (mf * g.data()[k] - sg[j] - xhat_rc.data()[k] * sgx[j]);
                    }
                }
                vec![Tensor::new(vec![m, n], gx)]
            }),
        );
        let scaled = self.mul_row(normed, gamma);
        (self.add_row(scaled, beta), mean, var)
    }

    // ---------------------------------------------------------------- convolution

    /// 2-d convolution. `x` is `[N,C,H,W]`, `w` is `[O,C,k,k]`, `b` is `[O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, geo: ConvGeometry) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let plan = ConvPlan::new(&xs, &ws, geo);
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let outs: Vec<Vec<T>> = (0..plan.n)
            .into_par_iter()
            .map(|i| {
                let cols = plan.im2col(&xd[i * plan.in_len()..(i + 1) * plan.in_len()]);
                let mut out = vec![T::zero(); plan.o * plan.hw_out()];
                matmul_into(wd, &cols, &mut out, plan.o, plan.patch(), plan.hw_out());
                for oc in 0..plan.o {
                    let bias = bd[oc];
                    for v in &mut out[oc * plan.hw_out()..(oc + 1) * plan.hw_out()] {
                        *v = *v + bias;
                    }
                }
                out
            })
            .collect();
        let out = Tensor::new(
            vec![plan.n, plan.o, plan.ho, plan.wo],
            outs.into_iter().flatten().collect(),
        );
        self.op(
            out,
            &[x, w, b],
            Box::new(move |g| {
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let per: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..plan.n)
                    .into_par_iter()
                    .map(|i| {
                        let xi = &xd[i * plan.in_len()..(i + 1) * plan.in_len()];
                        let gi = &gd[i * plan.o * plan.hw_out()..(i + 1) * plan.o * plan.hw_out()];
                        let cols = plan.im2col(xi);
                        let mut gw = vec![T::zero(); plan.o * plan.patch()];
                        matmul_nt_into(gi, &cols, &mut gw, plan.o, plan.hw_out(), plan.patch());
                        let mut gcols = vec![T::zero(); plan.patch() * plan.hw_out()];
                        matmul_tn_into(wd, gi, &mut gcols, plan.o, plan.patch(), plan.hw_out());
                        let gx = plan.col2im(&gcols);
                        let gb: Vec<T> = gi.chunks(plan.hw_out()).map(|c| c.iter().copied().sum()).collect();
                        (gx, gw, gb)
                    })
                    .collect();
                let mut gx = Vec::with_capacity(plan.n * plan.in_len());
                let mut gw = vec![T::zero(); plan.o * plan.patch()];
                let mut gb = vec![T::zero(); plan.o];
                for (x_i, w_i, b_i) in per {
                    gx.extend(x_i);
                    for (a, v) in gw.iter_mut().zip(w_i) {
                        *a = *a + v;
                    }
                    for (a, v) in gb.iter_mut().zip(b_i) {
                        *a = *a + v;
                    }
                }
                vec![
                    Tensor::new(plan.x_shape.clone(), gx),
                    Tensor::new(plan.w_shape.clone(), gw),
                    Tensor::new(vec![plan.o], gb),
                ]
            }),
        )
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::c(hw as f64);
        let out: Vec<T> = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.op(
            Tensor::new(vec![n, c], out),
            &[x],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                vec![Tensor::new(s.clone(), gx)]
            }),
        )
    }

    /// Flatten feature maps to per-cell rows: `[N,C,H,W] -> [N*H*W, C]`,
    /// with the cells of each image contiguous.
    pub fn to_grid(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![T::zero(); n * hw * c];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(i * hw + p) * c + ch] = xv.data()[(i * c + ch) * hw + p];
                }
            }
        }
        self.op(
            Tensor::new(vec![n * hw, c], out),
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            gx[(i * c + ch) * hw + p] = g.data()[(i * hw + p) * c + ch];
                        }
                    }
                }
                vec![Tensor::new(s.clone(), gx)]
            }),
        )
    }

    /// Attention pooling: `alpha [B,L]`, `feats [B*L,C]` -> `[B,C]` with
    /// `out[b] = Σ_l alpha[b,l] · feats[b*L + l]`.
    pub fn weighted_rows(&self, alpha: Var, feats: Var) -> Var {
        let (av, fv) = (self.value(alpha), self.value(feats));
        let (b, l) = (av.rows(), av.cols());
        let c = fv.cols();
        assert_eq!(fv.rows(), b * l, "weighted_rows: feats rows must be B*L");
        let mut out = vec![T::zero(); b * c];
        for i in 0..b {
            for p in 0..l {
                let w = av.data()[i * l + p];
                let frow = fv.row_slice(i * l + p);
                for j in 0..c {
                    out[i * c + j] = out[i * c + j] + w * frow[j];
                }
            }
        }
        self.op(
            Tensor::new(vec![b, c], out),
            &[alpha, feats],
            Box::new(move |g| {
                let mut ga = vec![T::zero(); b * l];
                let mut gf = vec![T::zero(); b * l * c];
                for i in 0..b {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    for p in 0..l {
                        let frow = fv.row_slice(i * l + p);
                        ga[i * l + p] = grow.iter().zip(frow).map(|(&x, &y)| x * y).sum();
                        let w = av.data()[i * l + p];
                        for j in 0..c {
                            gf[(i * l + p) * c + j] = w * grow[j];
                        }
                    }
                }
                vec![
                    Tensor::new(av.shape().to_vec(), ga),
                    Tensor::new(fv.shape().to_vec(), gf),
                ]
            }),
        )
    }

    // ---------------------------------------------------------------- losses

    /// Binary cross-entropy from logits, summed over columns and averaged
    /// over rows.
    pub fn bce_with_logits(&self, logits: Var, labels: &Tensor<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), labels.len(), "bce_with_logits: shape mismatch");
        let m = T::c(lv.rows() as f64);
        let mut total = T::zero();
        for (&x, &z) in lv.data().iter().zip(labels.data()) {
            // log(1+e^x) - z*x, stable for either sign of x
            total = total + softplus(x) - z * x;
        }
        let labels = labels.clone();
        self.op(
            Tensor::scalar(total / m),
            &[logits],
            Box::new(move |g| {
                let s = g.data()[0] / m;
                vec![lv.zip_map(&labels, |x, z| (sigmoid(x) - z) * s)]
            }),
        )
    }

    /// Binary cross-entropy from probabilities in (0,1), clamped to
    /// `[eps, 1-eps]`, summed over columns and averaged over rows.
    pub fn bce_probs(&self, probs: Var, labels: &Tensor<T>, eps: T) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.len(), labels.len(), "bce_probs: shape mismatch");
        let m = T::c(pv.rows() as f64);
        let lo = eps;
        let hi = T::one() - eps;
        let total: T = pv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&y, &z)| {
                let y = y.max(lo).min(hi);
                -(z * y.ln() + (T::one() - z) * (T::one() - y).ln())
            })
            .sum();
        let labels = labels.clone();
        self.op(
            Tensor::scalar(total / m),
            &[probs],
            Box::new(move |g| {
                let s = g.data()[0] / m;
                vec![pv.zip_map(&labels, |y, z| {
                    if y < lo || y > hi {
                        T::zero()
                    } else {
                        (-z / y + (T::one() - z) / (T::one() - y)) * s
                    }
                })]
            }),
        )
    }

    /// Softmax cross-entropy against target classes; rows with `None` targets
    /// are ignored. Averaged over the counted rows.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let (m, v) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), m, "cross_entropy: one target per row");
        let mut probs = (*lv).clone();
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, row) in probs.data_mut().chunks_mut(v).enumerate() {
            let lse = log_sum_exp(row);
            if let Some(t) = targets[i] {
                total = total + lse - row[t];
                count += 1;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let denom = T::c(count.max(1) as f64);
        let targets = targets.to_vec();
        self.op(
            Tensor::scalar(total / denom),
            &[logits],
            Box::new(move |g| {
                let s = g.data()[0] / denom;
                let mut ga = probs.clone();
                for (i, row) in ga.data_mut().chunks_mut(v).enumerate() {
                    match targets[i] {
                        Some(t) => {
                            row[t] = row[t] - T::one();
                            for x in row.iter_mut() {
                                *x = *x * s;
                            }
                        }
                        None => row.iter_mut().for_each(|x| *x = T::zero()),
                    }
                }
                vec![ga]
            }),
        )
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

#[derive(Clone)]
struct ConvPlan {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    geo: ConvGeometry,
    x_shape: Vec<usize>,
    w_shape: Vec<usize>,
}

impl ConvPlan {
    fn new(xs: &[usize], ws: &[usize], geo: ConvGeometry) -> Self {
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert!(h + 2 * geo.pad >= k && w + 2 * geo.pad >= k, "conv kernel larger than input");
        let ho = (h + 2 * geo.pad - k) / geo.stride + 1;
        let wo = (w + 2 * geo.pad - k) / geo.stride + 1;
        ConvPlan {
            n,
            c,
            h,
            w,
            o,
            k,
            ho,
            wo,
            geo,
            x_shape: xs.to_vec(),
            w_shape: ws.to_vec(),
        }
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.geo.stride + ky) as isize - self.geo.pad as isize;
        let ix = (ox * self.geo.stride + kx) as isize - self.geo.pad as isize;
        match self.geo.padding {
            Padding::Zero => {
                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                    None
                } else {
                    Some((iy as usize, ix as usize))
                }
            }
            Padding::Circular => Some((
                iy.rem_euclid(self.h as isize) as usize,
                ix.rem_euclid(self.w as isize) as usize,
            )),
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let hw = self.hw_out();
        let mut cols = vec![T::zero(); self.patch() * hw];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                cols[row * hw + oy * self.wo + ox] = x[(ch * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let hw = self.hw_out();
        let mut x = vec![T::zero(); self.in_len()];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                let d = &mut x[(ch * self.h + iy) * self.w + ix];
                                *d = *d + cols[row * hw + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
