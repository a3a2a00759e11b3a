//! Differentiable primitives.
//!
//! Every backward rule is written in terms of other `Var` operations, so
//! gradients produced with `create_graph = true` can be differentiated again.

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::var::{Tensor, Var};

/// Shape obtained by broadcasting `a` and `b` together (trailing alignment).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums `x` down to `shape`, the adjoint of broadcasting `shape` up to `x.shape()`.
pub(crate) fn reduce_to(x: &Tensor, shape: &[usize]) -> Tensor {
    if x.shape() == shape {
        return x.clone();
    }
    assert!(x.ndim() >= shape.len(), "cannot reduce {:?} to {:?}", x.shape(), shape);
    let lead = x.ndim() - shape.len();
    let target: Vec<usize> = std::iter::repeat_n(1, lead).chain(shape.iter().copied()).collect();
    // Merge runs of adjacent axes that are either all kept or all summed.
    let mut groups: Vec<(usize, bool)> = Vec::new();
    for (&src, &dst) in x.shape().iter().zip(&target) {
        assert!(dst == src || dst == 1, "shapes are not broadcast-compatible: {:?} to {:?}", x.shape(), shape);
        if src == 1 {
            continue;
        }
        let summed = dst == 1;
        match groups.last_mut() {
            Some((size, s)) if *s == summed => *size *= src,
            _ => groups.push((src, summed)),
        }
    }
    let merged: Vec<usize> = groups.iter().map(|g| g.0).collect();
    let mut out = standard(x.clone()).into_shape_with_order(IxDyn(&merged)).expect("contiguous");
    for (axis, &(_, summed)) in groups.iter().enumerate().rev() {
        if summed {
            out = out.sum_axis(Axis(axis));
        }
    }
    out.into_shape_with_order(IxDyn(shape)).expect("reduced size matches")
}

fn broadcast_value(x: &Tensor, shape: &[usize]) -> Tensor {
    x.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", x.shape(), shape))
        .to_owned()
}

fn standard(x: Tensor) -> Tensor {
    if x.is_standard_layout() {
        return x;
    }
    // Fixed-rank copies avoid the per-element cost of dynamic index iteration.
    match x.ndim() {
        2 => x.into_dimensionality::<ndarray::Ix2>().unwrap().as_standard_layout().into_owned().into_dyn(),
        3 => x.into_dimensionality::<ndarray::Ix3>().unwrap().as_standard_layout().into_owned().into_dyn(),
        4 => x.into_dimensionality::<ndarray::Ix4>().unwrap().as_standard_layout().into_owned().into_dyn(),
        _ => x.as_standard_layout().into_owned(),
    }
}

fn binary_shape(a: &Var, b: &Var, op: &str) -> Vec<usize> {
    broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        binary_shape(self, other, "add");
        let value = standard(self.value() + other.value());
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, _, _| {
            vec![Some(g.sum_to(&sa)), Some(g.sum_to(&sb))]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        binary_shape(self, other, "sub");
        let value = standard(self.value() - other.value());
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, _, _| {
            vec![Some(g.sum_to(&sa)), Some(g.neg().sum_to(&sb))]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        binary_shape(self, other, "mul");
        let value = standard(self.value() * other.value());
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, inputs, _| {
            vec![
                Some(g.mul(&inputs[1]).sum_to(&sa)),
                Some(g.mul(&inputs[0]).sum_to(&sb)),
            ]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, factor: f64) -> Var {
        let value = self.value() * factor;
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.scale(factor))])
    }

    pub fn add_scalar(&self, offset: f64) -> Var {
        let value = self.value() + offset;
        Var::from_op(value, vec![self.clone()], |g, _, _| vec![Some(g.clone())])
    }

    /// Sums over broadcast axes so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = reduce_to(self.value(), shape);
        let source = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.broadcast_to(&source))])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = broadcast_value(self.value(), shape);
        let source = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.sum_to(&source))])
    }

    /// Sum of all elements, as a 0-dimensional tensor.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = standard(self.value().clone())
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape));
        let source = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.reshape(&source))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let value = standard(self.value().clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.permute(&inverse))])
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Var {
        assert_eq!(self.ndim(), 2, "t() expects a matrix");
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = other.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
        let value = a.dot(&b).into_dyn();
        Var::from_op(value, vec![self.clone(), other.clone()], |g, inputs, _| {
            vec![
                Some(g.matmul(&inputs[1].t())),
                Some(inputs[0].t().matmul(g)),
            ]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.value().mapv(|x| if x > 0.0 { 1.0 } else { slope });
        let value = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        let mask = Var::constant(mask);
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.mul(&mask))])
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().mapv(f64::tanh);
        Var::from_op(value, vec![self.clone()], |g, _, out| {
            vec![Some(g.mul(&out.square().neg().add_scalar(1.0)))]
        })
    }

    pub fn exp(&self) -> Var {
        let value = self.value().mapv(f64::exp);
        Var::from_op(value, vec![self.clone()], |g, _, out| vec![Some(g.mul(out))])
    }

    /// Elementwise absolute value; the derivative at 0 is taken as 0.
    pub fn abs(&self) -> Var {
        let sign = Var::constant(self.value().mapv(sign_or_zero));
        let value = self.value().mapv(f64::abs);
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.mul(&sign))])
    }

    pub fn square(&self) -> Var {
        let value = self.value().mapv(|x| x * x);
        Var::from_op(value, vec![self.clone()], |g, inputs, _| {
            vec![Some(g.mul(&inputs[0]).scale(2.0))]
        })
    }

    /// `x^p` for non-negative `x`.
    ///
    /// At `x == 0` a negative power evaluates to 0 instead of infinity, which
    /// makes the derivative of a fractional power vanish at the origin. This
    /// is the convention norm-like penalties need: `(sum x^2)^(p/2)` is then
    /// exactly 0 with a zero gradient when every `x` is 0.
    pub fn powf(&self, p: f64) -> Var {
        let value = self.value().mapv(|x| pow_at_zero_is_zero(x, p));
        Var::from_op(value, vec![self.clone()], move |g, inputs, _| {
            if p == 0.0 {
                return vec![Some(g.scale(0.0))];
            }
            vec![Some(g.mul(&inputs[0].powf(p - 1.0)).scale(p))]
        })
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    /// Row-wise log-softmax of a `[rows, classes]` matrix.
    pub fn log_softmax(&self) -> Var {
        assert_eq!(self.ndim(), 2, "log_softmax expects a matrix");
        let x = self.value();
        let mut value = x.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rows = x.shape()[0];
        Var::from_op(value, vec![self.clone()], move |g, _, out| {
            let total = g.sum_to(&[rows, 1]);
            vec![Some(g.sub(&out.exp().mul(&total)))]
        })
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Var {
        let full = self.shape()[axis];
        assert!(start <= end && end <= full, "slice {start}..{end} out of bounds for length {full}");
        let value = standard(
            self.value()
                .slice_axis(Axis(axis), Slice::from(start..end))
                .to_owned(),
        );
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.embed_axis(axis, start, full))]
        })
    }

    /// Places this tensor at offset `start` of a zero tensor of length `full` along `axis`.
    pub fn embed_axis(&self, axis: usize, start: usize, full: usize) -> Var {
        let len = self.shape()[axis];
        assert!(start + len <= full, "embedding overruns target length");
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.slice_axis(axis, start, start + len))]
        })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let value = standard(value);
        let lengths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(value, parts.to_vec(), move |g, _, _| {
            let mut offset = 0;
            lengths
                .iter()
                .map(|&len| {
                    let piece = g.slice_axis(axis, offset, offset + len);
                    offset += len;
                    Some(piece)
                })
                .collect()
        })
    }
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pow_at_zero_is_zero(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else if x == 0.0 {
        0.0
    } else {
        x.powf(p)
    }
}
