//! Spatial rearrangements and resampling on (C,H,W) tensors.

use std::rc::Rc;

use super::Var;
use crate::error::{dim_err, domain_err, Result};
use crate::tensor::Tensor;

/// Bilinear weights and clamped corner indices for one sample position.
#[derive(Clone, Copy)]
struct Corners {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn corners(x: f64, y: f64, w: usize, h: usize) -> Corners {
    let xf = x.floor();
    let yf = y.floor();
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
    Corners {
        x0: clamp(xf, w),
        x1: clamp(xf + 1.0, w),
        y0: clamp(yf, h),
        y1: clamp(yf + 1.0, h),
        fx: x - xf,
        fy: y - yf,
    }
}

/// Samples one channel plane at `(x, y)`; pixel centers sit on integer
/// coordinates and out-of-range positions clamp to the border.
#[inline]
pub(crate) fn bilinear_at(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let c = corners(x, y, w, h);
    let v00 = plane[c.y0 * w + c.x0];
    let v01 = plane[c.y0 * w + c.x1];
    let v10 = plane[c.y1 * w + c.x0];
    let v11 = plane[c.y1 * w + c.x1];
    (1.0 - c.fy) * ((1.0 - c.fx) * v00 + c.fx * v01) + c.fy * ((1.0 - c.fx) * v10 + c.fx * v11)
}

/// Identity sampling grid of shape (2,H,W): channel 0 holds x, channel 1 y.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    Tensor::from_fn3(2, h, w, |c, y, x| if c == 0 { x as f64 } else { y as f64 })
}

/// Grid that resamples an `h`x`w` image to `oh`x`ow` with half-pixel
/// centers.
pub fn resize_grid(h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    Tensor::from_fn3(2, oh, ow, |c, y, x| {
        if c == 0 {
            (x as f64 + 0.5) * sx - 0.5
        } else {
            (y as f64 + 0.5) * sy - 0.5
        }
    })
}

impl<'t> Var<'t> {
    /// Rearranges (C*r*r, H, W) into (C, r*H, r*W):
    /// `out[c, r*y+dy, r*x+dx] = in[c*r*r + dy*r + dx, y, x]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (cr, h, w) = x.dims3()?;
        if r == 0 || cr % (r * r) != 0 {
            return dim_err(format!("{cr} channels not divisible by r^2 = {}", r * r));
        }
        let c = cr / (r * r);
        let perm = Rc::new(shuffle_perm(c, h, w, r));
        let mut out = vec![0.0; x.numel()];
        for (o, &i) in perm.iter().enumerate() {
            out[o] = x.data()[i];
        }
        let value = Tensor::new(vec![c, h * r, w * r], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for (o, &i) in perm.iter().enumerate() {
                gx[i] = g.data()[o];
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
        }))
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (c, hr, wr) = x.dims3()?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return dim_err(format!("{hr}x{wr} not divisible by {r}"));
        }
        let (h, w) = (hr / r, wr / r);
        let perm = Rc::new(shuffle_perm(c, h, w, r));
        let mut out = vec![0.0; x.numel()];
        for (o, &i) in perm.iter().enumerate() {
            out[i] = x.data()[o];
        }
        let value = Tensor::new(vec![c * r * r, h, w], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for (o, &i) in perm.iter().enumerate() {
                gx[o] = g.data()[i];
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
        }))
    }

    /// Bilinear sampling of a (C,H,W) source at the pixel coordinates of a
    /// (2,H',W') grid, with clamp-to-edge borders. Differentiable with
    /// respect to both the source and the grid.
    pub fn bilinear_sample(self, grid: Var<'t>) -> Result<Var<'t>> {
        let src = self.value();
        let gv = grid.value();
        let (c, h, w) = src.dims3()?;
        let (gc, oh, ow) = gv.dims3()?;
        if gc != 2 {
            return dim_err(format!("sampling grid needs 2 channels, got {gc}"));
        }
        if !gv.all_finite() {
            return domain_err("non-finite sampling coordinates");
        }
        let n = oh * ow;
        let cs: Rc<Vec<Corners>> = Rc::new(
            (0..n)
                .map(|p| corners(gv.data()[p], gv.data()[n + p], w, h))
                .collect(),
        );
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
            for (p, k) in cs.iter().enumerate() {
                let v00 = plane[k.y0 * w + k.x0];
                let v01 = plane[k.y0 * w + k.x1];
                let v10 = plane[k.y1 * w + k.x0];
                let v11 = plane[k.y1 * w + k.x1];
                out[ch * n + p] = (1.0 - k.fy) * ((1.0 - k.fx) * v00 + k.fx * v01)
                    + k.fy * ((1.0 - k.fx) * v10 + k.fx * v11);
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.tape.push_op(value, &[self, grid], move |g, needs| {
            let gd = g.data();
            let gsrc = needs[0].then(|| {
                let mut gs = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut gs[ch * h * w..(ch + 1) * h * w];
                    for (p, k) in cs.iter().enumerate() {
                        let go = gd[ch * n + p];
                        plane[k.y0 * w + k.x0] += go * (1.0 - k.fx) * (1.0 - k.fy);
                        plane[k.y0 * w + k.x1] += go * k.fx * (1.0 - k.fy);
                        plane[k.y1 * w + k.x0] += go * (1.0 - k.fx) * k.fy;
                        plane[k.y1 * w + k.x1] += go * k.fx * k.fy;
                    }
                }
                Tensor::new(vec![c, h, w], gs).expect("source shape")
            });
            let ggrid = needs[1].then(|| {
                let mut gg = vec![0.0; 2 * n];
                for ch in 0..c {
                    let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
                    for (p, k) in cs.iter().enumerate() {
                        let go = gd[ch * n + p];
                        let v00 = plane[k.y0 * w + k.x0];
                        let v01 = plane[k.y0 * w + k.x1];
                        let v10 = plane[k.y1 * w + k.x0];
                        let v11 = plane[k.y1 * w + k.x1];
                        // Clamped corners coincide, which zeroes the slope.
                        let dx = (1.0 - k.fy) * (v01 - v00) + k.fy * (v11 - v10);
                        let dy = (1.0 - k.fx) * (v10 - v00) + k.fx * (v11 - v01);
                        gg[p] += go * dx;
                        gg[n + p] += go * dy;
                    }
                }
                Tensor::new(vec![2, oh, ow], gg).expect("grid shape")
            });
            vec![gsrc, ggrid]
        }))
    }

    /// Bilinear resize to `oh`x`ow` (half-pixel centers, clamped borders).
    pub fn upsample_bilinear(self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let (_, h, w) = self.value().dims3()?;
        if (h, w) == (oh, ow) {
            return Ok(self);
        }
        let grid = self.tape.constant(resize_grid(h, w, oh, ow));
        self.bilinear_sample(grid)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if r == 0 {
            return dim_err("upsample factor must be positive");
        }
        let value = Tensor::from_fn3(c, h * r, w * r, |ci, y, xx| x.at3(ci, y / r, xx / r));
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            for ci in 0..c {
                for y in 0..h * r {
                    for xx in 0..w * r {
                        let v = gx.at3(ci, y / r, xx / r) + g.at3(ci, y, xx);
                        gx.set3(ci, y / r, xx / r, v);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Forward difference along x: `out[c,y,x] = in[c,y,x+1] - in[c,y,x]`,
    /// shape (C,H,W-1).
    pub fn diff_x(self) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if w < 2 {
            return dim_err("diff_x needs width >= 2");
        }
        let value = Tensor::from_fn3(c, h, w - 1, |ci, y, xx| x.at3(ci, y, xx + 1) - x.at3(ci, y, xx));
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w - 1 {
                        let go = g.at3(ci, y, xx);
                        gx.set3(ci, y, xx + 1, gx.at3(ci, y, xx + 1) + go);
                        gx.set3(ci, y, xx, gx.at3(ci, y, xx) - go);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Forward difference along y, shape (C,H-1,W).
    pub fn diff_y(self) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if h < 2 {
            return dim_err("diff_y needs height >= 2");
        }
        let value = Tensor::from_fn3(c, h - 1, w, |ci, y, xx| x.at3(ci, y + 1, xx) - x.at3(ci, y, xx));
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            for ci in 0..c {
                for y in 0..h - 1 {
                    for xx in 0..w {
                        let go = g.at3(ci, y, xx);
                        gx.set3(ci, y + 1, xx, gx.at3(ci, y + 1, xx) + go);
                        gx.set3(ci, y, xx, gx.at3(ci, y, xx) - go);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of a (C,H,W) tensor.
    pub fn crop(self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (c, ih, iw) = x.dims3()?;
        if y0 + h > ih || x0 + w > iw {
            return dim_err(format!("crop {h}x{w}@({y0},{x0}) exceeds {ih}x{iw}"));
        }
        let value = Tensor::from_fn3(c, h, w, |ci, y, xx| x.at3(ci, y0 + y, x0 + xx));
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[c, ih, iw]);
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        gx.set3(ci, y0 + y, x0 + xx, g.at3(ci, y, xx));
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along axis 0. All parts must agree on the other axes.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return domain_err("concat of an empty list");
        };
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        if values.iter().any(|v| v.rank() == 0 || v.shape()[1..] != tail[..]) {
            return dim_err("concat parts disagree on trailing axes");
        }
        let lead: usize = values.iter().map(|v| v.shape()[0]).sum();
        let mut data = Vec::with_capacity(values.iter().map(|v| v.numel()).sum());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let sizes: Vec<(Vec<usize>, usize)> =
            values.iter().map(|v| (v.shape().to_vec(), v.numel())).collect();
        Ok(tape.push_op(Tensor::new(shape, data)?, parts, move |g, needs| {
            let mut off = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|((shape, n), &need)| {
                    let part = need.then(|| {
                        Tensor::new(shape.clone(), g.data()[off..off + n].to_vec()).expect("part shape")
                    });
                    off += n;
                    part
                })
                .collect()
        }))
    }

    /// Single channel `c` of a (C,H,W) tensor, shape (1,H,W).
    pub fn channel(self, c: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (cc, h, w) = x.dims3()?;
        let value = x.channel(c)?;
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = vec![0.0; cc * h * w];
            gx[c * h * w..(c + 1) * h * w].copy_from_slice(g.data());
            vec![Some(Tensor::new(vec![cc, h, w], gx).expect("input shape"))]
        }))
    }

    /// Contiguous run `[start, start+len)` of a rank-1 tensor.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 1 || start + len > x.numel() {
            return dim_err(format!("slice {start}+{len} of shape {:?}", x.shape()));
        }
        let n = x.numel();
        let value = Tensor::from_vec(x.data()[start..start + len].to_vec());
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            gx[start..start + len].copy_from_slice(g.data());
            vec![Some(Tensor::from_vec(gx))]
        }))
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            vec![Some(g.reshape(&in_shape).expect("same size"))]
        }))
    }
}

/// For each output element of a pixel shuffle, the input index it reads.
fn shuffle_perm(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let mut perm = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, dy) = (oy / r, oy % r);
                let (x, dx) = (ox / r, ox % r);
                let ic = ci * r * r + dy * r + dx;
                perm.push((ic * h + y) * w + x);
            }
        }
    }
    perm
}
