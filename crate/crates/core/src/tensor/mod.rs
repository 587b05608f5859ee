//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Design notes:
//! - Double precision throughout; single-precision files are widened on load.
//! - Tensors are cheap handles (`Rc`) over shared storage. Data and gradient
//!   live in separate cells so backward closures can read inputs while
//!   accumulating gradients.
//! - Operations execute eagerly; when any input requires gradients the local
//!   backward rule is recorded on the thread-local [`tape`].
//! - Binary operations require equal shapes or a one-element (scalar)
//!   operand; there is no general broadcasting.

pub mod conv;
pub mod gemm;
pub mod ops;
pub mod optim;
pub mod tape;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    requires_grad: bool,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Handle to a dense tensor; cloning shares storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                requires_grad,
                data: RefCell::new(data),
                grad: RefCell::new(if requires_grad {
                    None // allocated lazily; ensure_grad_storage fills zeros
                } else {
                    None
                }),
            }),
        }
    }

    /// Non-differentiable tensor from raw values. Rejects NaN/Inf and length
    /// mismatches.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(
                "Tensor::from_vec",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        check_finite(&data, "Tensor::from_vec")?;
        Ok(Tensor::make(data, shape.to_vec(), false))
    }

    /// Trainable tensor: `requires_grad` set, gradient starts at zero.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        let p = Tensor::make(t.to_vec(), t.shape().to_vec(), true);
        p.ensure_grad_storage();
        Ok(p)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![v], vec![1], false)
    }

    pub fn vector(v: &[f64]) -> Tensor {
        Tensor::make(v.to_vec(), vec![v.len()], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(vec![0.0; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor::make(vec![v; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the raw values.
    pub fn data_ref(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values (optimizer steps, checkpoint loading).
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::invalid(
                "Tensor::set_data",
                format!("{} values for shape {:?}", data.len(), self.shape()),
            ));
        }
        check_finite(data, "Tensor::set_data")?;
        self.inner.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    /// Copy of the current gradient, if storage exists.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            g.fill(0.0);
        }
    }

    pub(crate) fn ensure_grad_storage(&self) {
        let mut g = self.inner.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.len()]);
        }
    }

    pub(crate) fn reset_grad_storage(&self) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(v) => v.fill(0.0),
            None => *g = Some(vec![0.0; self.len()]),
        }
    }

    pub(crate) fn add_to_grad(&self, contrib: &[f64]) {
        self.ensure_grad_storage();
        let mut g = self.inner.grad.borrow_mut();
        let g = g.as_mut().unwrap();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [f64])) {
        self.ensure_grad_storage();
        let mut g = self.inner.grad.borrow_mut();
        f(g.as_mut().unwrap());
    }

    /// Detached copy: same values, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.to_vec(), self.shape().to_vec(), false)
    }

    /// Reverse sweep from this scalar. Returns the number of local-gradient
    /// evaluations performed. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<usize> {
        tape::run_backward(self)
    }

    // ---- elementwise operations -------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(self, rhs, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(self, rhs, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(self, rhs, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.data_ref().iter().any(|&b| b == 0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        binary_op(
            self,
            rhs,
            "div",
            |a, b| a / b,
            |_, b, _| 1.0 / b,
            |_, b, y| -y / b,
        )
    }

    /// Elementwise `atan2(self, x)` (self holds the y values).
    pub fn atan2(&self, x: &Tensor) -> Result<Tensor> {
        binary_op(
            self,
            x,
            "atan2",
            f64::atan2,
            |y, x, _| x / (x * x + y * y),
            |y, x, _| -y / (x * x + y * y),
        )
    }

    pub fn neg(&self) -> Tensor {
        unary_op(self, |x| -x, |_, _| -1.0)
    }

    pub fn square(&self) -> Tensor {
        unary_op(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data_ref().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        Ok(unary_op(self, f64::sqrt, |_, y| 0.5 / y.max(f64::MIN_POSITIVE)))
    }

    pub fn exp(&self) -> Result<Tensor> {
        // f64::exp overflows past ~709.78; reject instead of producing Inf.
        if self.data_ref().iter().any(|&x| x > 709.0) {
            return Err(Error::NonFinite { op: "exp" });
        }
        Ok(unary_op(self, f64::exp, |_, y| y))
    }

    pub fn relu(&self) -> Tensor {
        unary_op(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        unary_op(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(&self) -> Tensor {
        unary_op(
            self,
            |x| {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn sin(&self) -> Tensor {
        unary_op(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        unary_op(self, f64::cos, |x, _| -x.sin())
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary_op(self, |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        unary_op(self, move |x| x * s, move |_, _| s)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data_ref().iter().sum();
        let out = Tensor::make(vec![total], vec![1], self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    let g0 = g[0];
                    input.accumulate_grad(|gx| {
                        for v in gx.iter_mut() {
                            *v += g0;
                        }
                    });
                }),
            );
        }
        out
    }
}

fn unary_op(
    input: &Tensor,
    f: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = input.data_ref().iter().map(|&x| f(x)).collect();
    let out = Tensor::make(data, input.shape().to_vec(), input.requires_grad());
    if out.requires_grad() {
        let xin = input.clone();
        let xout = out.clone();
        tape::record(
            out.clone(),
            vec![xin.id()],
            Box::new(move |g| {
                let xd = xin.data_ref();
                let yd = xout.data_ref();
                xin.accumulate_grad(|gx| {
                    for i in 0..gx.len() {
                        gx[i] += dfdx(xd[i], yd[i]) * g[i];
                    }
                });
            }),
        );
    }
    out
}

/// Elementwise binary op with scalar (one-element) broadcast on either side.
fn binary_op(
    a: &Tensor,
    b: &Tensor,
    name: &'static str,
    f: impl Fn(f64, f64) -> f64,
    dfda: impl Fn(f64, f64, f64) -> f64 + 'static,
    dfdb: impl Fn(f64, f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let a_scalar = a.len() == 1;
    let b_scalar = b.len() == 1;
    if !a_scalar && !b_scalar && a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out_shape = if a_scalar && !b_scalar {
        b.shape().to_vec()
    } else {
        a.shape().to_vec()
    };
    let n = out_shape.iter().product::<usize>();
    let ad = a.data_ref();
    let bd = b.data_ref();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let av = ad[if a_scalar { 0 } else { i }];
        let bv = bd[if b_scalar { 0 } else { i }];
        data.push(f(av, bv));
    }
    drop(ad);
    drop(bd);
    let requires = a.requires_grad() || b.requires_grad();
    let out = Tensor::make(data, out_shape, requires);
    if requires {
        let (ta, tb, ty) = (a.clone(), b.clone(), out.clone());
        let mut ids = Vec::new();
        if a.requires_grad() {
            ids.push(a.id());
        }
        if b.requires_grad() {
            ids.push(b.id());
        }
        tape::record(
            out.clone(),
            ids,
            Box::new(move |g| {
                let ad = ta.data_ref();
                let bd = tb.data_ref();
                let yd = ty.data_ref();
                if ta.requires_grad() {
                    ta.accumulate_grad(|ga| {
                        if a_scalar {
                            let mut acc = 0.0;
                            for i in 0..g.len() {
                                let bv = bd[if b_scalar { 0 } else { i }];
                                acc += dfda(ad[0], bv, yd[i]) * g[i];
                            }
                            ga[0] += acc;
                        } else {
                            for i in 0..g.len() {
                                let bv = bd[if b_scalar { 0 } else { i }];
                                ga[i] += dfda(ad[i], bv, yd[i]) * g[i];
                            }
                        }
                    });
                }
                if tb.requires_grad() {
                    tb.accumulate_grad(|gb| {
                        if b_scalar {
                            let mut acc = 0.0;
                            for i in 0..g.len() {
                                let av = ad[if a_scalar { 0 } else { i }];
                                acc += dfdb(av, bd[0], yd[i]) * g[i];
                            }
                            gb[0] += acc;
                        } else {
                            for i in 0..g.len() {
                                let av = ad[if a_scalar { 0 } else { i }];
                                gb[i] += dfdb(av, bd[i], yd[i]) * g[i];
                            }
                        }
                    });
                }
            }),
        );
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::Tensor;

    /// Central finite difference of `f` with respect to `param[idx]`.
    /// Uses only forward evaluations, independent of the backward machinery.
    pub fn finite_diff(
        param: &Tensor,
        idx: usize,
        step: f64,
        mut f: impl FnMut() -> f64,
    ) -> f64 {
        let orig = param.to_vec();
        let mut plus = orig.clone();
        plus[idx] += step;
        param.set_data(&plus).unwrap();
        let fp = f();
        let mut minus = orig.clone();
        minus[idx] -= step;
        param.set_data(&minus).unwrap();
        let fm = f();
        param.set_data(&orig).unwrap();
        (fp - fm) / (2.0 * step)
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{finite_diff, rel_err};
    use super::*;

    #[test]
    fn add_values() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_annihilates_and_zeroes_grad() {
        tape::clear();
        let x = Tensor::param(vec![2.0, -3.0], &[2]).unwrap();
        let z = Tensor::scalar(0.0);
        let y = x.mul(&z).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
        tape::clear();
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let a = Tensor::vector(&[1.0]);
        let b = Tensor::vector(&[0.0]);
        assert!(matches!(
            a.div(&b),
            Err(crate::error::Error::DivisionByZero { .. })
        ));
    }

    #[test]
    fn grad_of_sum_of_squares_matches_finite_difference() {
        tape::clear();
        let x = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] + 4.0).abs() < 1e-12);
        tape::clear();
        for idx in 0..2 {
            let fd = finite_diff(&x, idx, 1e-5, || {
                let v = x.square().sum().item();
                tape::clear();
                v
            });
            assert!(rel_err(g[idx], fd) < 1e-7, "idx {idx}: {} vs {}", g[idx], fd);
        }
    }

    #[test]
    fn sum_backward_gives_ones() {
        tape::clear();
        let x = Tensor::param(vec![0.5; 5], &[5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 5]);
        tape::clear();
    }

    #[test]
    fn detached_parameter_keeps_zero_grad() {
        tape::clear();
        let p = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
        let q = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = q.square().sum();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0, 0.0]);
        assert!(q.grad().unwrap()[0] != 0.0);
        tape::clear();
    }

    #[test]
    fn repeated_backward_accumulates() {
        tape::clear();
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 12.0).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn backward_visits_each_node_once() {
        tape::clear();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        // square -> mul -> add -> sum: 4 recorded nodes, all reachable.
        let a = x.square();
        let b = a.mul(&Tensor::scalar(2.0)).unwrap();
        let c = b.add(&Tensor::scalar(1.0)).unwrap();
        let loss = c.sum();
        let evals = loss.backward().unwrap();
        assert_eq!(evals, tape::len());
        assert_eq!(evals, 4);
        tape::clear();
    }

    #[test]
    fn unreachable_nodes_not_evaluated() {
        tape::clear();
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let _side = x.square().sum(); // recorded but not backpropagated
        let loss = x.mul_scalar(3.0).sum();
        let evals = loss.backward().unwrap();
        assert_eq!(evals, 2); // mul_scalar + sum
        assert_eq!(tape::len(), 4);
        tape::clear();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        tape::clear();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.square();
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
        tape::clear();
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let xs = vec![0.83, -0.41, 0.27, -0.96, 0.55];
        type UnaryCase = (&'static str, fn(&Tensor) -> Tensor);
        let cases: Vec<UnaryCase> = vec![
            ("neg", |t| t.neg()),
            ("square", |t| t.square()),
            ("exp", |t| t.exp().unwrap()),
            ("relu", |t| t.relu()),
            ("tanh", |t| t.tanh()),
            ("softplus", |t| t.softplus()),
            ("sin", |t| t.sin()),
            ("cos", |t| t.cos()),
        ];
        for (name, f) in cases {
            tape::clear();
            let x = Tensor::param(xs.clone(), &[5]).unwrap();
            let loss = f(&x).square().sum();
            loss.backward().unwrap();
            let g = x.grad().unwrap();
            tape::clear();
            for idx in 0..xs.len() {
                let fd = finite_diff(&x, idx, 1e-5, || {
                    let v = f(&x).square().sum().item();
                    tape::clear();
                    v
                });
                assert!(
                    rel_err(g[idx], fd) < 1e-6,
                    "{name}[{idx}]: analytic {} vs fd {}",
                    g[idx],
                    fd
                );
            }
        }
    }

    #[test]
    fn binary_gradients_match_finite_differences() {
        let av = vec![0.9, -0.3, 0.6];
        let bv = vec![0.4, 0.8, -0.7];
        type BinaryCase = (&'static str, fn(&Tensor, &Tensor) -> Tensor);
        let cases: Vec<BinaryCase> = vec![
            ("add", |a, b| a.add(b).unwrap()),
            ("sub", |a, b| a.sub(b).unwrap()),
            ("mul", |a, b| a.mul(b).unwrap()),
            ("div", |a, b| a.div(b).unwrap()),
            ("atan2", |a, b| a.atan2(b).unwrap()),
        ];
        for (name, f) in cases {
            tape::clear();
            let a = Tensor::param(av.clone(), &[3]).unwrap();
            let b = Tensor::param(bv.clone(), &[3]).unwrap();
            let loss = f(&a, &b).square().sum();
            loss.backward().unwrap();
            let (ga, gb) = (a.grad().unwrap(), b.grad().unwrap());
            tape::clear();
            for idx in 0..3 {
                let fa = finite_diff(&a, idx, 1e-6, || {
                    let v = f(&a, &b).square().sum().item();
                    tape::clear();
                    v
                });
                let fb = finite_diff(&b, idx, 1e-6, || {
                    let v = f(&a, &b).square().sum().item();
                    tape::clear();
                    v
                });
                assert!(rel_err(ga[idx], fa) < 1e-5, "{name} dA[{idx}]");
                assert!(rel_err(gb[idx], fb) < 1e-5, "{name} dB[{idx}]");
            }
        }
    }

    #[test]
    fn scalar_broadcast_gradients() {
        tape::clear();
        let a = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = Tensor::param(vec![0.5], &[1]).unwrap();
        let loss = a.mul(&s).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.5; 3]);
        assert!((s.grad().unwrap()[0] - 6.0).abs() < 1e-12);
        tape::clear();

        let loss2 = s.mul(&a).unwrap().sum(); // scalar on the left
        loss2.backward().unwrap();
        assert!((s.grad().unwrap()[0] - 12.0).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(vec![f64::NAN], &[1]).is_err());
        assert!(Tensor::from_vec(vec![f64::INFINITY], &[1]).is_err());
    }
}
