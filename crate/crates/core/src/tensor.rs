//! Minimal reverse-mode autodiff over `ndarray`, generic over the element type.
//!
//! Graphs are built eagerly; each node stores its value, an optional gradient,
//! and a backward closure that scatters the output gradient into its parents.
//! Graphs are per-thread (`Rc`-based); parallel batch processing builds one
//! graph per sample from shared parameter values.

use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &[Tensor<F>])>;

struct Op<F: Scalar> {
    parents: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Inner<F: Scalar> {
    id: u64,
    value: ArrayD<F>,
    grad: Option<ArrayD<F>>,
    op: Option<Op<F>>,
    needs_grad: bool,
}

#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    inner: Rc<RefCell<Inner<F>>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn leaf(value: ArrayD<F>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: fresh_id(),
                value,
                grad: None,
                op: None,
                needs_grad: requires_grad,
            })),
        }
    }

    pub fn constant(value: ArrayD<F>) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar_value(v: F) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn from_op(value: ArrayD<F>, parents: Vec<Tensor<F>>, backward: BackwardFn<F>) -> Self {
        let needs = parents.iter().any(|p| p.needs_grad());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: fresh_id(),
                value,
                grad: None,
                op: if needs {
                    Some(Op { parents, backward })
                } else {
                    None
                },
                needs_grad: needs,
            })),
        }
    }

    pub fn value(&self) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.inner.borrow(), |i| &i.value)
    }

    pub fn value_clone(&self) -> ArrayD<F> {
        self.inner.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    pub fn grad(&self) -> Option<ArrayD<F>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> F {
        let b = self.inner.borrow();
        assert_eq!(b.value.len(), 1, "item() on non-scalar tensor");
        *b.value.iter().next().unwrap()
    }

    fn accumulate(&self, g: ArrayD<F>) {
        let mut b = self.inner.borrow_mut();
        if !b.needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), b.value.shape(), "gradient shape mismatch");
        match &mut b.grad {
            Some(acc) => *acc = &*acc + &g,
            None => b.grad = Some(g),
        }
    }

    /// Reverse-mode sweep from this (scalar) node.
    pub fn backward(&self) {
        // Iterative DFS post-order over nodes that need gradients.
        let mut topo: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            let id = node.inner.borrow().id;
            if child_idx == 0 {
                if visited.contains(&id) {
                    continue;
                }
            }
            let next_parent = {
                let b = node.inner.borrow();
                b.op.as_ref().and_then(|op| {
                    op.parents
                        .iter()
                        .skip(child_idx)
                        .find(|p| {
                            let pb = p.inner.borrow();
                            pb.needs_grad && !visited.contains(&pb.id)
                        })
                        .cloned()
                })
            };
            match next_parent {
                Some(p) => {
                    // Revisit node after descending into p.
                    let resume = {
                        let b = node.inner.borrow();
                        let op = b.op.as_ref().unwrap();
                        op.parents
                            .iter()
                            .position(|q| Rc::ptr_eq(&q.inner, &p.inner))
                            .unwrap()
                            + 1
                    };
                    stack.push((node.clone(), resume));
                    stack.push((p, 0));
                }
                None => {
                    visited.insert(id);
                    topo.push(node);
                }
            }
        }

        {
            let mut b = self.inner.borrow_mut();
            let ones = ArrayD::ones(b.value.raw_dim());
            b.grad = Some(ones);
        }
        for node in topo.iter().rev() {
            let (grad, has_op) = {
                let b = node.inner.borrow();
                (b.grad.clone(), b.op.is_some())
            };
            let Some(grad) = grad else { continue };
            if !has_op {
                continue;
            }
            let b = node.inner.borrow();
            let op = b.op.as_ref().unwrap();
            (op.backward)(&grad, &op.parents);
        }
    }
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> Array2<F> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let v = &*self.value() + &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                ps[0].accumulate(g.clone());
                ps[1].accumulate(g.clone());
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let v = &*self.value() - &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                ps[0].accumulate(g.clone());
                ps[1].accumulate(g.mapv(|x| -x));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let v = &*self.value() * &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                let b = ps[1].value_clone();
                ps[0].accumulate(g * &b);
                let a = ps[0].value_clone();
                ps[1].accumulate(g * &a);
            }),
        )
    }

    pub fn div(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "div shape mismatch");
        let v = &*self.value() / &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                let b = ps[1].value_clone();
                ps[0].accumulate(g / &b);
                let a = ps[0].value_clone();
                ps[1].accumulate(-(g * &a) / &(&b * &b));
            }),
        )
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let v = self.value().mapv(|x| x * c);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, ps| ps[0].accumulate(g.mapv(|x| x * c))),
        )
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        let v = self.value().mapv(|x| x + c);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, ps| ps[0].accumulate(g.clone())),
        )
    }

    /// Add a constant array (no gradient flows into it).
    pub fn add_const(&self, c: &ArrayD<F>) -> Tensor<F> {
        assert_eq!(self.shape(), c.shape().to_vec(), "add_const shape mismatch");
        let v = &*self.value() + c;
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, ps| ps[0].accumulate(g.clone())),
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let one = F::one();
        let v = self.value().mapv(|x| one / (one + (-x).exp()));
        let y = v.clone();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let one = F::one();
                ps[0].accumulate(g * &y.mapv(|s| s * (one - s)));
            }),
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self) -> Tensor<F> {
        let zero = F::zero();
        let one = F::one();
        let v = self
            .value()
            .mapv(|x| x.max(zero) + (one + (-x.abs()).exp()).ln());
        let x = self.value_clone();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let one = F::one();
                ps[0].accumulate(g * &x.mapv(|x| one / (one + (-x).exp())));
            }),
        )
    }

    /// GELU, tanh approximation. Smooth activation so finite-difference
    /// gradient checks are well behaved everywhere.
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::c(0.7978845608028654); // sqrt(2/pi)
        let k = F::c(0.044715);
        let half = F::c(0.5);
        let one = F::one();
        let x = self.value_clone();
        let v = x.mapv(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (one + u.tanh())
        });
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let three = F::c(3.0);
                let dx = x.mapv(|x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (one + three * k * x * x);
                    half * (one + t) + half * x * (one - t * t) * du
                });
                ps[0].accumulate(g * &dx);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s: F = self.value().iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, ps| {
                let gv = *g.iter().next().unwrap();
                let shape = ps[0].value().raw_dim();
                ps[0].accumulate(ArrayD::from_elem(shape, gv));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = F::c(self.value().len() as f64);
        self.sum_all().scale(F::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        let orig: Vec<usize> = self.shape();
        let v = self
            .value_clone()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let back = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape back");
                ps[0].accumulate(back);
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// 2-D linear algebra, rows/cols, softmax
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    /// (n,k) x (k,m) -> (n,m)
    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        let a = as2(&self.value());
        let b = as2(&other.value());
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dim mismatch");
        let v = a.dot(&b).into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                let g2 = as2(g);
                let a = as2(&ps[0].value());
                let b = as2(&ps[1].value());
                ps[0].accumulate(g2.dot(&b.t()).into_dyn());
                ps[1].accumulate(a.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn t2(&self) -> Tensor<F> {
        let v = as2(&self.value()).t().to_owned().into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, ps| {
                ps[0].accumulate(as2(g).t().to_owned().into_dyn());
            }),
        )
    }

    /// (n,m) + (m,) broadcast over rows.
    pub fn add_row(&self, bias: &Tensor<F>) -> Tensor<F> {
        let a = as2(&self.value());
        let b = bias
            .value()
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        assert_eq!(a.shape()[1], b.len(), "add_row width mismatch");
        let v = (&a + &b).into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone(), bias.clone()],
            Box::new(|g, ps| {
                let g2 = as2(g);
                ps[0].accumulate(g2.clone().into_dyn());
                ps[1].accumulate(g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor<F> {
        let a = as2(&self.value());
        let mut v = a.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let s: F = row.iter().copied().sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = v.clone();
        Tensor::from_op(
            v.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let g2 = as2(g);
                let mut out = Array2::zeros(g2.raw_dim());
                for i in 0..g2.shape()[0] {
                    let yi = y.row(i);
                    let gi = g2.row(i);
                    let dot: F = yi.iter().zip(gi.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..g2.shape()[1] {
                        out[[i, j]] = yi[j] * (gi[j] - dot);
                    }
                }
                ps[0].accumulate(out.into_dyn());
            }),
        )
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self) -> Tensor<F> {
        let a = as2(&self.value());
        let mut v = a.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = max
                + row
                    .iter()
                    .map(|&x| (x - max).exp())
                    .sum::<F>()
                    .ln();
            row.mapv_inplace(|x| x - lse);
        }
        let logp = v.clone();
        Tensor::from_op(
            v.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let g2 = as2(g);
                let mut out = Array2::zeros(g2.raw_dim());
                for i in 0..g2.shape()[0] {
                    let gsum: F = g2.row(i).iter().copied().sum();
                    for j in 0..g2.shape()[1] {
                        out[[i, j]] = g2[[i, j]] - logp[[i, j]].exp() * gsum;
                    }
                }
                ps[0].accumulate(out.into_dyn());
            }),
        )
    }

    /// Gather rows of a 2-D tensor; backward scatter-adds.
    pub fn index_rows(&self, indices: &[usize]) -> Tensor<F> {
        let a = as2(&self.value());
        let m = a.shape()[1];
        let mut v = Array2::zeros((indices.len(), m));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&a.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        let n = a.shape()[0];
        Tensor::from_op(
            v.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let g2 = as2(g);
                let mut out = Array2::zeros((n, m));
                for (k, &i) in idx.iter().enumerate() {
                    let updated = &out.row(i) + &g2.row(k);
                    out.row_mut(i).assign(&updated);
                }
                ps[0].accumulate(out.into_dyn());
            }),
        )
    }

    /// Gather individual (row, col) entries of a 2-D tensor into a 1-D tensor.
    pub fn gather_entries(&self, coords: &[(usize, usize)]) -> Tensor<F> {
        let a = as2(&self.value());
        let v = Array1::from_iter(coords.iter().map(|&(i, j)| a[[i, j]]));
        let coords: Vec<(usize, usize)> = coords.to_vec();
        let dim = (a.shape()[0], a.shape()[1]);
        Tensor::from_op(
            v.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = Array2::zeros(dim);
                for (k, &(i, j)) in coords.iter().enumerate() {
                    out[[i, j]] = out[[i, j]] + g1[k];
                }
                ps[0].accumulate(out.into_dyn());
            }),
        )
    }

    /// Columns [start, end) of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor<F> {
        let a = as2(&self.value());
        let v = a.slice(s![.., start..end]).to_owned();
        let full = a.shape()[1];
        Tensor::from_op(
            v.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let g2 = as2(g);
                let mut out = Array2::zeros((g2.shape()[0], full));
                out.slice_mut(s![.., start..end]).assign(&g2);
                ps[0].accumulate(out.into_dyn());
            }),
        )
    }

    /// Rows [start, end) of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<F> {
        let a = as2(&self.value());
        let v = a.slice(s![start..end, ..]).to_owned();
        let full = a.shape()[0];
        Tensor::from_op(
            v.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let g2 = as2(g);
                let mut out = Array2::zeros((full, g2.shape()[1]));
                out.slice_mut(s![start..end, ..]).assign(&g2);
                ps[0].accumulate(out.into_dyn());
            }),
        )
    }
}

/// Stack 2-D tensors along axis 0.
pub fn concat_rows<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    assert!(!parts.is_empty());
    let mats: Vec<Array2<F>> = parts.iter().map(|p| as2(&p.value())).collect();
    let m = mats[0].shape()[1];
    let total: usize = mats.iter().map(|a| a.shape()[0]).sum();
    let mut v = Array2::zeros((total, m));
    let mut offsets = Vec::with_capacity(parts.len());
    let mut r = 0;
    for a in &mats {
        v.slice_mut(s![r..r + a.shape()[0], ..]).assign(a);
        offsets.push((r, a.shape()[0]));
        r += a.shape()[0];
    }
    Tensor::from_op(
        v.into_dyn(),
        parts.to_vec(),
        Box::new(move |g, ps| {
            let g2 = as2(g);
            for (p, &(start, len)) in ps.iter().zip(offsets.iter()) {
                p.accumulate(g2.slice(s![start..start + len, ..]).to_owned().into_dyn());
            }
        }),
    )
}

/// Stack 2-D tensors along axis 1.
pub fn concat_cols<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    assert!(!parts.is_empty());
    let mats: Vec<Array2<F>> = parts.iter().map(|p| as2(&p.value())).collect();
    let n = mats[0].shape()[0];
    let total: usize = mats.iter().map(|a| a.shape()[1]).sum();
    let mut v = Array2::zeros((n, total));
    let mut offsets = Vec::with_capacity(parts.len());
    let mut c = 0;
    for a in &mats {
        v.slice_mut(s![.., c..c + a.shape()[1]]).assign(a);
        offsets.push((c, a.shape()[1]));
        c += a.shape()[1];
    }
    Tensor::from_op(
        v.into_dyn(),
        parts.to_vec(),
        Box::new(move |g, ps| {
            let g2 = as2(g);
            for (p, &(start, len)) in ps.iter().zip(offsets.iter()) {
                p.accumulate(g2.slice(s![.., start..start + len]).to_owned().into_dyn());
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// LayerNorm (fused, last axis of a 2-D tensor)
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Tensor<F> {
        let x = as2(&self.value());
        let g = gain
            .value()
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let b = bias
            .value()
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let mf = F::c(m as f64);
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Array1::zeros(n);
        let mut y = Array2::zeros((n, m));
        for i in 0..n {
            let row = x.row(i);
            let mu: F = row.iter().copied().sum::<F>() / mf;
            let var: F = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / mf;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..m {
                let xh = (row[j] - mu) * istd;
                xhat[[i, j]] = xh;
                y[[i, j]] = xh * g[j] + b[j];
            }
        }
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |gout, ps| {
                let go = as2(gout);
                let mut dx = Array2::zeros((n, m));
                let mut dgain = Array1::zeros(m);
                let mut dbias = Array1::zeros(m);
                for i in 0..n {
                    let istd = inv_std[i];
                    // dY/dxhat = gain
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for j in 0..m {
                        let dxh = go[[i, j]] * g[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[[i, j]];
                        dgain[j] = dgain[j] + go[[i, j]] * xhat[[i, j]];
                        dbias[j] = dbias[j] + go[[i, j]];
                    }
                    mean_dxhat = mean_dxhat / mf;
                    mean_dxhat_xhat = mean_dxhat_xhat / mf;
                    for j in 0..m {
                        let dxh = go[[i, j]] * g[j];
                        dx[[i, j]] = istd * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                    }
                }
                ps[0].accumulate(dx.into_dyn());
                ps[1].accumulate(dgain.into_dyn());
                ps[2].accumulate(dbias.into_dyn());
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolutions (channels-first, naive loops; toy image sizes)
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    /// input (C_in, H, W), weight (C_out, C_in, kh, kw), bias (C_out).
    pub fn conv2d(&self, weight: &Tensor<F>, bias: &Tensor<F>, stride: usize, pad: usize) -> Tensor<F> {
        let x = self
            .value()
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned();
        let w = weight
            .value()
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let b = bias
            .value()
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut y = ndarray::Array3::zeros((cout, ho, wo));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc = acc + x[[ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                                }
                            }
                        }
                    }
                    y[[co, oy, ox]] = acc;
                }
            }
        }
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |gout, ps| {
                let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::zeros((cin, h, wd));
                let mut dw = ndarray::Array4::zeros((cout, cin, kh, kw));
                let mut db = Array1::zeros(cout);
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[[co, oy, ox]];
                            db[co] = db[co] + gv;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                            let (iy, ix) = (iy as usize, ix as usize);
                                            dx[[ci, iy, ix]] =
                                                dx[[ci, iy, ix]] + gv * w[[co, ci, ky, kx]];
                                            dw[[co, ci, ky, kx]] =
                                                dw[[co, ci, ky, kx]] + gv * x[[ci, iy, ix]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                ps[0].accumulate(dx.into_dyn());
                ps[1].accumulate(dw.into_dyn());
                ps[2].accumulate(db.into_dyn());
            }),
        )
    }

    /// Transposed convolution. input (C_in, H, W), weight (C_in, C_out, kh, kw),
    /// bias (C_out), no padding: output is ((H-1)*stride + kh, (W-1)*stride + kw).
    pub fn conv_transpose2d(&self, weight: &Tensor<F>, bias: &Tensor<F>, stride: usize) -> Tensor<F> {
        let x = self
            .value()
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned();
        let w = weight
            .value()
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let b = bias
            .value()
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cin2, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, cin2, "conv_transpose2d channel mismatch");
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        let mut y = ndarray::Array3::zeros((cout, ho, wo));
        for co in 0..cout {
            y.index_axis_mut(Axis(0), co).fill(b[co]);
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[[ci, iy, ix]];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = iy * stride + ky;
                                let ox = ix * stride + kx;
                                y[[co, oy, ox]] = y[[co, oy, ox]] + xv * w[[ci, co, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |gout, ps| {
                let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::zeros((cin, h, wd));
                let mut dw = ndarray::Array4::zeros((cin, cout, kh, kw));
                let mut db = Array1::zeros(cout);
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            db[co] = db[co] + g[[co, oy, ox]];
                        }
                    }
                }
                for ci in 0..cin {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let xv = x[[ci, iy, ix]];
                            let mut acc = F::zero();
                            for co in 0..cout {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let gv = g[[co, iy * stride + ky, ix * stride + kx]];
                                        acc = acc + gv * w[[ci, co, ky, kx]];
                                        dw[[ci, co, ky, kx]] = dw[[ci, co, ky, kx]] + gv * xv;
                                    }
                                }
                            }
                            dx[[ci, iy, ix]] = acc;
                        }
                    }
                }
                ps[0].accumulate(dx.into_dyn());
                ps[1].accumulate(dw.into_dyn());
                ps[2].accumulate(db.into_dyn());
            }),
        )
    }
}
