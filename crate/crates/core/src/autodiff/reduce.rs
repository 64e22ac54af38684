//! Reductions. Axis reductions keep the reduced axis with size 1.

use std::rc::Rc;

use super::Var;
use crate::error::{dim_err, domain_err, Result};
use crate::tensor::Tensor;

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

#[derive(Clone, Copy, PartialEq)]
enum Extreme {
    Min,
    Max,
}

impl<'t> Var<'t> {
    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .push_op(Tensor::scalar(x.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    /// Mean of all elements. An empty input yields NaN; use
    /// [`Var::try_mean`] for a checked version.
    pub fn mean(self) -> Var<'t> {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn try_mean(self) -> Result<Var<'t>> {
        if self.numel() == 0 {
            return domain_err("mean of an empty tensor");
        }
        Ok(self.mean())
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis)?;
        let in_shape = x.shape().to_vec();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let value = Tensor::new(reduced_shape(x.shape(), axis), out)?;
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    gx[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| crate::Error::Dimension(format!("axis {axis} out of range")))?;
        if len == 0 {
            return domain_err("mean over an empty axis");
        }
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }

    fn extreme_axis(self, axis: usize, which: Extreme) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis)?;
        if len == 0 {
            return domain_err("reduction over an empty axis");
        }
        let in_shape = x.shape().to_vec();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x.data()[o * len * inner + i];
                let mut best_k = 0;
                for k in 1..len {
                    let v = x.data()[(o * len + k) * inner + i];
                    // Strict comparison keeps the lowest index on ties.
                    let better = match which {
                        Extreme::Min => v < best,
                        Extreme::Max => v > best,
                    };
                    if better {
                        best = v;
                        best_k = k;
                    }
                }
                out.push(best);
                arg.push(best_k);
            }
        }
        let value = Tensor::new(reduced_shape(x.shape(), axis), out)?;
        let arg = Rc::new(arg);
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let j = o * inner + i;
                    gx[(o * len + arg[j]) * inner + i] = g.data()[j];
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
        }))
    }

    /// Minimum along `axis`. The gradient goes to the lowest-index argmin.
    pub fn min_axis(self, axis: usize) -> Result<Var<'t>> {
        self.extreme_axis(axis, Extreme::Min)
    }

    /// Maximum along `axis`. The gradient goes to the lowest-index argmax.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        self.extreme_axis(axis, Extreme::Max)
    }

    /// Median of all elements. Not differentiable: the result is a
    /// constant node.
    pub fn median(self) -> Result<Var<'t>> {
        let m = self.value().median()?;
        Ok(self.tape.constant(Tensor::scalar(m)))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn min_over_stack() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 1], vec![0.3, 0.1]).unwrap());
        let m = x.min_axis(0).unwrap();
        assert_eq!(m.value().data(), &[0.1]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn min_ties_pick_lowest_index() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3, 1], vec![0.2, 0.2, 0.2]).unwrap());
        let g = tape.backward(x.min_axis(0).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_and_median() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.mean().item(), 2.5);
        let y = tape.constant(Tensor::from_vec(vec![5.0, 1.0, 9.0]));
        assert_eq!(y.median().unwrap().item(), 5.0);
        let e = tape.constant(Tensor::from_vec(vec![]));
        assert!(e.median().is_err());
        assert!(e.try_mean().is_err());
    }

    #[test]
    fn axis_out_of_range() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 3]));
        assert!(x.min_axis(2).is_err());
        assert!(x.sum_axis(5).is_err());
    }

    #[test]
    fn mean_axis_keeps_dim() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_fn3(3, 2, 2, |c, _, _| c as f64));
        let m = x.mean_axis(0).unwrap();
        assert_eq!(m.shape(), vec![1, 2, 2]);
        assert_eq!(m.value().data(), &[1.0; 4]);
    }
}
