//! 2-D convolution (cross-correlation) over (C,H,W) tensors.

use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{PadMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    /// Channel groups; `groups == C` gives a depthwise convolution.
    pub groups: usize,
}

impl Conv2dOpts {
    pub fn new(stride: usize, pad: usize, pad_mode: PadMode) -> Self {
        Self {
            stride,
            pad,
            pad_mode,
            groups: 1,
        }
    }

    /// Stride 1, "same" padding for an odd kernel of size `k`.
    pub fn same(k: usize, pad_mode: PadMode) -> Self {
        Self::new(1, k / 2, pad_mode)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_per_group: usize,
    cout_per_group: usize,
    k: usize,
    oh: usize,
    ow: usize,
    /// `rows[oy * k + ky]` is the input row feeding output row `oy` at tap `ky`.
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

fn geometry(input: &Tensor, kernel: &Tensor, opts: Conv2dOpts) -> Result<Geometry> {
    let (c_in, h, w) = input.dims3()?;
    let &[c_out, cin_g, k, k2] = kernel.shape() else {
        return dim_err(format!("kernel must be (Cout,Cin,k,k), got {:?}", kernel.shape()));
    };
    if k != k2 || k % 2 == 0 {
        return dim_err(format!("kernel must be square with odd size, got {k}x{k2}"));
    }
    if opts.stride == 0 || opts.groups == 0 {
        return dim_err("stride and groups must be positive");
    }
    if c_in % opts.groups != 0 || c_out % opts.groups != 0 || cin_g != c_in / opts.groups {
        return dim_err(format!(
            "channel mismatch: input has {c_in} channels, kernel expects {cin_g} per group ({} groups)",
            opts.groups
        ));
    }
    if opts.pad_mode == PadMode::Reflect && (opts.pad >= h || opts.pad >= w) {
        return dim_err(format!("reflect padding {} needs an input larger than {h}x{w}", opts.pad));
    }
    if h + 2 * opts.pad < k || w + 2 * opts.pad < k {
        return dim_err("kernel larger than padded input");
    }
    let oh = (h + 2 * opts.pad - k) / opts.stride + 1;
    let ow = (w + 2 * opts.pad - k) / opts.stride + 1;
    let taps = |n_out: usize, len: usize| {
        let mut v = Vec::with_capacity(n_out * k);
        for o in 0..n_out {
            for t in 0..k {
                let idx = (o * opts.stride + t) as isize - opts.pad as isize;
                v.push(opts.pad_mode.resolve(idx, len));
            }
        }
        v
    };
    Ok(Geometry {
        c_in,
        h,
        w,
        c_out,
        cin_per_group: cin_g,
        cout_per_group: c_out / opts.groups,
        k,
        oh,
        ow,
        rows: taps(oh, h),
        cols: taps(ow, w),
    })
}

impl Geometry {
    /// Calls `f(out_index, in_index, kernel_index)` for every contributing
    /// (output, tap) pair in a fixed order.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.k;
        for co in 0..self.c_out {
            let group = co / self.cout_per_group;
            for cl in 0..self.cin_per_group {
                let ci = group * self.cin_per_group + cl;
                for ky in 0..k {
                    for kx in 0..k {
                        let ki = ((co * self.cin_per_group + cl) * k + ky) * k + kx;
                        for oy in 0..self.oh {
                            let Some(iy) = self.rows[oy * k + ky] else {
                                continue;
                            };
                            let in_row = (ci * self.h + iy) * self.w;
                            let out_row = (co * self.oh + oy) * self.ow;
                            for ox in 0..self.ow {
                                if let Some(ix) = self.cols[ox * k + kx] {
                                    f(out_row + ox, in_row + ix, ki);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of a (C,H,W) input with a (Cout, C/groups, k, k)
    /// kernel. Output size per axis is `(n + 2*pad - k) / stride + 1`.
    pub fn conv2d(self, kernel: Var<'t>, opts: Conv2dOpts) -> Result<Var<'t>> {
        let x = self.value();
        let kv = kernel.value();
        let geo = geometry(&x, &kv, opts)?;
        let mut out = vec![0.0; geo.c_out * geo.oh * geo.ow];
        {
            let (xd, kd) = (x.data(), kv.data());
            geo.for_each(|o, i, ki| out[o] += kd[ki] * xd[i]);
        }
        let value = Tensor::new(vec![geo.c_out, geo.oh, geo.ow], out)?;
        debug_assert_eq!(geo.c_in * geo.h * geo.w, x.numel());
        Ok(self.tape.push_op(value, &[self, kernel], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; x.numel()];
                let kd = kv.data();
                geo.for_each(|o, i, ki| gx[i] += kd[ki] * gd[o]);
                Tensor::new(x.shape().to_vec(), gx).expect("input shape")
            });
            let gk = needs[1].then(|| {
                let mut gk = vec![0.0; kv.numel()];
                let xd = x.data();
                geo.for_each(|o, i, ki| gk[ki] += xd[i] * gd[o]);
                Tensor::new(kv.shape().to_vec(), gk).expect("kernel shape")
            });
            vec![gx, gk]
        }))
    }

    /// Adds a per-channel bias of shape `(C,)` to a (C,H,W) tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let (c, h, w) = x.dims3()?;
        if b.numel() != c {
            return dim_err(format!("bias has {} entries for {c} channels", b.numel()));
        }
        let hw = h * w;
        let mut out = (*x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i / hw];
        }
        let b_shape = b.shape().to_vec();
        Ok(self.tape.push_op(out, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let sums = g.data().chunks(hw).map(|ch| ch.iter().sum()).collect();
                Tensor::new(b_shape.clone(), sums).expect("bias shape")
            });
            vec![needs[0].then(|| g.clone()), gb]
        }))
    }
}

/// Tap tables of a `k`x`k` box filter over a `(C,H,W)` block.
pub(crate) struct BoxFilter {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

fn box_taps(n: usize, k: usize, mode: PadMode) -> Vec<Option<usize>> {
    let r = (k / 2) as isize;
    (0..n)
        .flat_map(|o| (-r..=r).map(move |d| mode.resolve(o as isize + d, n)))
        .collect()
}

impl BoxFilter {
    pub(crate) fn new(shape: &[usize], k: usize, pad_mode: PadMode) -> Result<Self> {
        let &[c, h, w] = shape else {
            return dim_err(format!("expected (C,H,W), got {shape:?}"));
        };
        if k % 2 == 0 {
            return dim_err(format!("box filter size must be odd, got {k}"));
        }
        if pad_mode == PadMode::Reflect && (k / 2 >= h || k / 2 >= w) {
            return dim_err(format!("reflect padding {} needs an input larger than {h}x{w}", k / 2));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            rows: box_taps(h, k, pad_mode),
            cols: box_taps(w, k, pad_mode),
        })
    }

    /// Window means.
    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (c, h, w, k) = (self.c, self.h, self.w, self.k);
        let mut tmp = vec![0.0; c * h * w];
        for (row_in, row_tmp) in x.chunks(w).zip(tmp.chunks_mut(w)) {
            for (ox, t) in row_tmp.iter_mut().enumerate() {
                *t = self.cols[ox * k..(ox + 1) * k]
                    .iter()
                    .flatten()
                    .map(|&ix| row_in[ix])
                    .sum();
            }
        }
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            let plane = &tmp[ci * h * w..(ci + 1) * h * w];
            for oy in 0..h {
                let dst = &mut out[(ci * h + oy) * w..(ci * h + oy + 1) * w];
                for &iy in self.rows[oy * k..(oy + 1) * k].iter().flatten() {
                    for (d, s) in dst.iter_mut().zip(&plane[iy * w..(iy + 1) * w]) {
                        *d += s;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= norm;
                }
            }
        }
        out
    }

    /// Transpose of [`BoxFilter::apply`].
    pub(crate) fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (c, h, w, k) = (self.c, self.h, self.w, self.k);
        let norm = 1.0 / (k * k) as f64;
        let mut gtmp = vec![0.0; c * h * w];
        for ci in 0..c {
            for oy in 0..h {
                let src = &g[(ci * h + oy) * w..(ci * h + oy + 1) * w];
                for &iy in self.rows[oy * k..(oy + 1) * k].iter().flatten() {
                    let dst = &mut gtmp[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s * norm;
                    }
                }
            }
        }
        let mut gx = vec![0.0; c * h * w];
        for (row_g, row_x) in gtmp.chunks(w).zip(gx.chunks_mut(w)) {
            for (ox, &gv) in row_g.iter().enumerate() {
                for &ix in self.cols[ox * k..(ox + 1) * k].iter().flatten() {
                    row_x[ix] += gv;
                }
            }
        }
        gx
    }
}

impl<'t> Var<'t> {
    /// Per-channel mean over a `k`x`k` window at stride 1; same output size
    /// as the input.
    pub fn box_filter(self, k: usize, pad_mode: PadMode) -> Result<Var<'t>> {
        let x = self.value();
        let filter = BoxFilter::new(x.shape(), k, pad_mode)?;
        let shape = x.shape().to_vec();
        let value = Tensor::new(shape.clone(), filter.apply(x.data()))?;
        Ok(self.tape.push_op(value, &[self], move |g, _| {
            vec![Some(Tensor::new(shape.clone(), filter.adjoint(g.data())).expect("input shape"))]
        }))
    }
}
