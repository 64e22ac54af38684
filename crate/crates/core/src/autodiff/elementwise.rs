//! Elementwise arithmetic and activations.
//!
//! Binary operations take operands of equal shape, or a one-element second
//! operand that is broadcast over the first.

use std::rc::Rc;

use super::Var;
use crate::error::{dim_err, domain_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let broadcast = if a.shape() == b.shape() {
            false
        } else if b.numel() == 1 {
            true
        } else {
            return dim_err(format!(
                "elementwise operands {:?} and {:?} differ",
                a.shape(),
                b.shape()
            ));
        };
        if matches!(kind, Binary::Div) && b.data().iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return domain_err("division by zero or non-finite denominator");
        }
        let value = if broadcast {
            let s = b.item();
            a.map(|v| kind.apply(v, s))
        } else {
            a.zip_map(&b, |x, y| kind.apply(x, y))?
        };
        let out = Rc::new(value);
        let out_c = Rc::clone(&out);
        let node = self.tape.push_op(Rc::clone(&out), &[self, other], move |g, needs| {
            let bval = |i: usize| if broadcast { b.data()[0] } else { b.data()[i] };
            let ga = needs[0].then(|| {
                let mut ga = g.clone();
                match kind {
                    Binary::Add | Binary::Sub => {}
                    Binary::Mul => ga.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= bval(i)),
                    Binary::Div => ga.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v /= bval(i)),
                }
                ga
            });
            let gb = needs[1].then(|| {
                let per: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| match kind {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * a.data()[i],
                        Binary::Div => -gi * out_c.data()[i] / bval(i),
                    })
                    .collect();
                if broadcast {
                    Tensor::new(b.shape().to_vec(), vec![per.iter().sum()]).expect("one element")
                } else {
                    Tensor::new(b.shape().to_vec(), per).expect("same shape")
                }
            });
            vec![ga, gb]
        });
        Ok(node)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    /// Fails with a domain error when any denominator is zero.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with derivative `dfdx(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        self,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let out = Rc::new(x.map(f));
        let out_c = Rc::clone(&out);
        self.tape.push_op(Rc::clone(&out), &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out_c.data())
                .map(|((&gi, &xi), &yi)| gi * dfdx(xi, yi))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
        })
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// `s - x`.
    pub fn rsub_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| s - x, |_, _| -1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return domain_err("log of a non-positive value");
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// Absolute value; the derivative at 0 is taken as 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp into `[lo, hi]`; no gradient flows where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// ELU with unit scale.
    pub fn elu(self) -> Var<'t> {
        self.unary(
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `x^p`. Negative bases are rejected unless `p` is an integer.
    pub fn pow(self, p: f64) -> Result<Var<'t>> {
        if p.fract() != 0.0 && self.value().data().iter().any(|&v| v < 0.0) {
            return domain_err("fractional power of a negative value");
        }
        Ok(self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0)))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `1 / x`; zero entries are rejected.
    pub fn recip(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v == 0.0 || v.is_nan()) {
            return domain_err("reciprocal of zero");
        }
        Ok(self.unary(|x| 1.0 / x, |_, y| -y * y))
    }
}
