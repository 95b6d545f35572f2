//! Differentiable ops. Every backward rule is written with other `Var` ops,
//! so gradients can be differentiated again.

use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::graph::{is_needed, Var};
use crate::tensor::{self, Tensor};

fn needs(inputs: &[Var], i: usize) -> bool {
    is_needed(&inputs[i])
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().add(other.value());
        Var::from_op("add", value, vec![self.clone(), other.clone()], |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().sub(other.value());
        Var::from_op("sub", value, vec![self.clone(), other.clone()], |g, inputs, _| {
            vec![
                Some(g.clone()),
                needs(inputs, 1).then(|| g.scale(-1.0)),
            ]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().mul(other.value());
        Var::from_op("mul", value, vec![self.clone(), other.clone()], |g, inputs, _| {
            vec![
                needs(inputs, 0).then(|| g.mul(&inputs[1])),
                needs(inputs, 1).then(|| g.mul(&inputs[0])),
            ]
        })
    }

    /// Elementwise product with a fixed tensor.
    pub fn mul_const(&self, c: Rc<Tensor>) -> Var {
        let value = self.value().mul(&c);
        Var::from_op("mul_const", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.mul_const(c.clone()))]
        })
    }

    pub fn scale(&self, s: f32) -> Var {
        let value = self.value().scale(s);
        Var::from_op("scale", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.scale(s))]
        })
    }

    pub fn add_scalar(&self, s: f32) -> Var {
        let value = self.value().map(|v| v + s);
        Var::from_op("add_scalar", value, vec![self.clone()], |g, _, _| {
            vec![Some(g.clone())]
        })
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn powf(&self, p: f32) -> Var {
        let value = self.value().map(|v| v.powf(p));
        Var::from_op("powf", value, vec![self.clone()], move |g, inputs, _| {
            vec![Some(g.mul(&inputs[0].powf(p - 1.0).scale(p)))]
        })
    }

    pub fn exp(&self) -> Var {
        let value = self.value().map(f32::exp);
        Var::from_op("exp", value, vec![self.clone()], |g, _, out| {
            vec![Some(g.mul(out))]
        })
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().map(f32::tanh);
        Var::from_op("tanh", value, vec![self.clone()], |g, _, out| {
            // d tanh = 1 - tanh^2
            let d = out.square().scale(-1.0).add_scalar(1.0);
            vec![Some(g.mul(&d))]
        })
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        let x = self.value();
        let value = x.map(|v| if v > 0.0 { v } else { v * slope });
        let mask = Rc::new(x.map(|v| if v > 0.0 { 1.0 } else { slope }));
        Var::from_op("leaky_relu", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.mul_const(mask.clone()))]
        })
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Var {
        let x = self.value();
        let value = x.map(|v| v.clamp(lo, hi));
        let mask = Rc::new(x.map(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 }));
        Var::from_op("clamp", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.mul_const(mask.clone()))]
        })
    }

    /// Sums contiguous blocks, viewing the tensor as `[outer, numel/outer]`.
    pub fn sum_inner(&self, outer: usize) -> Var {
        let shape = self.shape().to_vec();
        let value = self.value().sum_inner(outer);
        Var::from_op("sum_inner", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.expand_inner(&shape))]
        })
    }

    /// Broadcasts each element of a rank-1 tensor over a contiguous block.
    pub fn expand_inner(&self, shape: &[usize]) -> Var {
        let outer = self.value().numel();
        let value = self.value().expand_inner(shape);
        Var::from_op("expand_inner", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.sum_inner(outer))]
        })
    }

    pub fn sum(&self) -> Var {
        self.sum_inner(1)
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Euclidean norm of all elements, as a one-element tensor.
    ///
    /// The gradient at the origin is taken to be zero.
    pub fn l2_norm(&self) -> Var {
        let norm = self.value().data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
        Var::from_op("l2_norm", Tensor::scalar(norm), vec![self.clone()], |g, inputs, out| {
            let x = &inputs[0];
            if out.item() == 0.0 {
                return vec![Some(Var::constant(Tensor::zeros(x.shape())))];
            }
            let coeff = g.mul(&out.powf(-1.0));
            vec![Some(x.mul(&coeff.expand_inner(x.shape())))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.shape().to_vec();
        let value = self.value().clone().reshape(shape);
        Var::from_op("reshape", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.reshape(&old))]
        })
    }

    pub fn transpose2d(&self) -> Var {
        let value = self.value().transpose2d();
        Var::from_op("transpose2d", value, vec![self.clone()], |g, _, _| {
            vec![Some(g.transpose2d())]
        })
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let value = self.value().matmul(other.value());
        Var::from_op("matmul", value, vec![self.clone(), other.clone()], |g, inputs, _| {
            vec![
                needs(inputs, 0).then(|| g.matmul(&inputs[1].transpose2d())),
                needs(inputs, 1).then(|| inputs[0].transpose2d().matmul(g)),
            ]
        })
    }

    /// Row-wise softmax of a `[rows, cols]` matrix.
    pub fn softmax_rows(&self) -> Var {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "softmax_rows expects a matrix");
        let cols = x.shape()[1];
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v as f64;
            }
            let inv = (1.0 / z) as f32;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::new(x.shape(), data);
        Var::from_op("softmax_rows", value, vec![self.clone()], |g, _, out| {
            let rows = out.shape()[0];
            let dot = g.mul(out).sum_inner(rows).expand_inner(out.shape());
            vec![Some(out.mul(&g.sub(&dot)))]
        })
    }

    /// Channel-wise concatenation of `[C_i, H, W]` tensors.
    pub fn concat_channels(parts: &[&Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat_channels(&values);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        let parents = parts.iter().map(|&p| p.clone()).collect();
        Var::from_op("concat_channels", value, parents, move |g, inputs, _| {
            let mut start = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let s = start;
                    start += len;
                    needs(inputs, i).then(|| g.slice_channels(s, len))
                })
                .collect()
        })
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Var {
        let full = self.shape().to_vec();
        let value = self.value().slice_channels(start, len);
        Var::from_op("slice_channels", value, vec![self.clone()], move |g, _, _| {
            let (c, h, w) = (full[0], full[1], full[2]);
            let mut parts = Vec::new();
            let before = (start > 0).then(|| Var::constant(Tensor::zeros(&[start, h, w])));
            let after =
                (start + len < c).then(|| Var::constant(Tensor::zeros(&[c - start - len, h, w])));
            if let Some(b) = &before {
                parts.push(b);
            }
            parts.push(g);
            if let Some(a) = &after {
                parts.push(a);
            }
            vec![Some(Var::concat_channels(&parts))]
        })
    }

    /// Same-stride cross-correlation of `[C, H, W]` with `[O, C, K, K]`.
    pub fn conv2d(&self, weight: &Var, pad: usize) -> Var {
        let value = tensor::conv2d(self.value(), weight.value(), 1, pad);
        Var::from_op("conv2d", value, vec![self.clone(), weight.clone()], move |g, inputs, _| {
            let (x, w) = (&inputs[0], &inputs[1]);
            let in_hw = (x.shape()[1], x.shape()[2]);
            let k = w.shape()[2];
            vec![
                needs(inputs, 0).then(|| conv2d_input_grad(g, w, in_hw, pad)),
                needs(inputs, 1).then(|| conv2d_weight_grad(x, g, k, pad)),
            ]
        })
    }

    /// `rows · X_c · colsᵀ` per channel; the linear core of every resize.
    pub fn separable(&self, map: &SeparableMap) -> Var {
        let value = self.value().separable(&map.rows, &map.cols);
        let adjoint = map.transposed();
        Var::from_op("separable", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.separable(&adjoint))]
        })
    }
}

fn conv2d_input_grad(gy: &Var, w: &Var, in_hw: (usize, usize), pad: usize) -> Var {
    let value = tensor::conv2d_input_grad(gy.value(), w.value(), in_hw, 1, pad);
    Var::from_op("conv2d_input_grad", value, vec![gy.clone(), w.clone()], move |g, inputs, _| {
        let (gy, w) = (&inputs[0], &inputs[1]);
        let k = w.shape()[2];
        vec![
            needs(inputs, 0).then(|| g.conv2d(w, pad)),
            needs(inputs, 1).then(|| conv2d_weight_grad(g, gy, k, pad)),
        ]
    })
}

fn conv2d_weight_grad(x: &Var, gy: &Var, k: usize, pad: usize) -> Var {
    let value = tensor::conv2d_weight_grad(x.value(), gy.value(), k, 1, pad);
    Var::from_op("conv2d_weight_grad", value, vec![x.clone(), gy.clone()], move |g, inputs, _| {
        let (x, gy) = (&inputs[0], &inputs[1]);
        let in_hw = (x.shape()[1], x.shape()[2]);
        vec![
            needs(inputs, 0).then(|| conv2d_input_grad(gy, g, in_hw, pad)),
            needs(inputs, 1).then(|| x.conv2d(g, pad)),
        ]
    })
}

/// A pair of fixed matrices applied along the height and width axes.
#[derive(Clone, Debug)]
pub struct SeparableMap {
    rows: Rc<Tensor>,
    cols: Rc<Tensor>,
    rows_t: Rc<Tensor>,
    cols_t: Rc<Tensor>,
}

impl SeparableMap {
    /// `rows` is `[H_out, H_in]`, `cols` is `[W_out, W_in]`.
    pub fn new(rows: Tensor, cols: Tensor) -> Self {
        assert_eq!(rows.shape().len(), 2);
        assert_eq!(cols.shape().len(), 2);
        let rows_t = rows.transpose2d();
        let cols_t = cols.transpose2d();
        Self {
            rows: Rc::new(rows),
            cols: Rc::new(cols),
            rows_t: Rc::new(rows_t),
            cols_t: Rc::new(cols_t),
        }
    }

    pub fn transposed(&self) -> Self {
        Self {
            rows: self.rows_t.clone(),
            cols: self.cols_t.clone(),
            rows_t: self.rows.clone(),
            cols_t: self.cols.clone(),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.rows.shape()[0], self.cols.shape()[0])
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.separable(&self.rows, &self.cols)
    }
}

impl Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.scale(-1.0)
    }
}
