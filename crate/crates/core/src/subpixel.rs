//! Sub-pixel convolution upsampling, ICNR initialization and the
//! disparity/uncertainty head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dOpts, Tape, Var};
use crate::error::{dim_err, domain_err, Result};
use crate::tensor::{PadMode, Tensor};

/// Upsample factor of every sub-pixel block.
pub const UPSAMPLE_FACTOR: usize = 2;

/// Source of seeded random kernels.
pub trait KernelSampler {
    /// Draws a `(out, in, k, k)` kernel.
    fn sample(&mut self, shape: [usize; 4]) -> Tensor;
}

/// Uniform He initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub struct KaimingUniform {
    rng: ChaCha8Rng,
}

impl KaimingUniform {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl KernelSampler for KaimingUniform {
    fn sample(&mut self, shape: [usize; 4]) -> Tensor {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("sampler shape")
    }
}

/// Repeats each filter of a `(out/r², in, k, k)` base kernel `r²` times into
/// consecutive output channels.
pub fn icnr_from_base(base: &Tensor, r: usize) -> Result<Tensor> {
    let &[n_base, c_in, k, k2] = base.shape() else {
        return dim_err(format!("base kernel must be 4-D, got {:?}", base.shape()));
    };
    if r == 0 {
        return dim_err("upsample factor must be positive");
    }
    let rr = r * r;
    let filter = c_in * k * k2;
    let mut data = Vec::with_capacity(n_base * rr * filter);
    for f in base.data().chunks(filter) {
        for _ in 0..rr {
            data.extend_from_slice(f);
        }
    }
    Tensor::new(vec![n_base * rr, c_in, k, k2], data)
}

/// ICNR kernel of shape `(out_ch, in_ch, k, k)`: after a pixel shuffle by
/// `r` the convolution behaves like nearest-neighbour upsampling of the
/// base convolution.
pub fn icnr_init(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    r: usize,
    sampler: &mut impl KernelSampler,
) -> Result<Tensor> {
    if r == 0 || out_ch % (r * r) != 0 {
        return dim_err(format!("{out_ch} output channels not divisible by r^2 = {}", r * r));
    }
    let base = sampler.sample([out_ch / (r * r), in_ch, k, k]);
    icnr_from_base(&base, r)
}

/// Mean over output blocks of the variance across the `r²` sub-pixel
/// phases. Zero means the upsampled map has no checkerboard pattern.
pub fn phase_variance(up: &Tensor, r: usize) -> Result<f64> {
    let (c, h, w) = up.dims3()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return dim_err(format!("{h}x{w} is not a multiple of {r}"));
    }
    let rr = (r * r) as f64;
    let mut total = 0.0;
    let mut blocks = 0usize;
    for ci in 0..c {
        for by in 0..h / r {
            for bx in 0..w / r {
                let vals = (0..r * r).map(|p| up.at3(ci, by * r + p / r, bx * r + p % r));
                let mean = vals.clone().sum::<f64>() / rr;
                total += vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / rr;
                blocks += 1;
            }
        }
    }
    Ok(if blocks == 0 { 0.0 } else { total / blocks as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `(out, in, k, k)`.
    pub kernel: Tensor,
    /// `(out,)`.
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        if kernel.rank() != 4 || bias.shape() != [kernel.shape()[0]] {
            return dim_err(format!(
                "kernel {:?} with bias {:?}",
                kernel.shape(),
                bias.shape()
            ));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(out: usize, inp: usize, k: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[out, inp, k, k]),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn random(out: usize, inp: usize, k: usize, sampler: &mut impl KernelSampler) -> Self {
        Self {
            kernel: sampler.sample([out, inp, k, k]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// A conv layer's kernel and bias as tape variables.
#[derive(Clone, Copy)]
pub struct ConvVars<'t> {
    pub kernel: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> ConvVars<'t> {
    fn on_tape(layer: &ConvLayer, tape: &'t Tape, trainable: bool) -> Self {
        let put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            kernel: put(&layer.kernel),
            bias: put(&layer.bias),
        }
    }

    /// Stride-1 zero-padded convolution plus bias.
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let k = self.kernel.shape()[2];
        x.conv2d(self.kernel, Conv2dOpts::same(k, PadMode::Zero))?
            .add_channel_bias(self.bias)
    }
}

/// dconv 3x3 ELU, s1conv 5x5 ReLU, s2conv 3x3 ReLU, upconv 3x3 ReLU to
/// `C'·r²` channels, then a pixel shuffle by `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubpixelBlockWeights {
    pub dconv: ConvLayer,
    pub s1conv: ConvLayer,
    pub s2conv: ConvLayer,
    pub upconv: ConvLayer,
    pub r: usize,
}

impl SubpixelBlockWeights {
    /// Random weights with an ICNR upconv; biases start at zero.
    pub fn init(c_in: usize, c_mid: usize, c_out: usize, seed: u64) -> Result<Self> {
        let r = UPSAMPLE_FACTOR;
        let mut sampler = KaimingUniform::new(seed);
        let dconv = ConvLayer::random(c_mid, c_in, 3, &mut sampler);
        let s1conv = ConvLayer::random(c_mid, c_mid, 5, &mut sampler);
        let s2conv = ConvLayer::random(c_mid, c_mid, 3, &mut sampler);
        let upconv = ConvLayer {
            kernel: icnr_init(c_out * r * r, c_mid, 3, r, &mut sampler)?,
            bias: Tensor::zeros(&[c_out * r * r]),
        };
        Self::new(dconv, s1conv, s2conv, upconv, r)
    }

    pub fn zeros(c_in: usize, c_mid: usize, c_out: usize) -> Self {
        let r = UPSAMPLE_FACTOR;
        Self {
            dconv: ConvLayer::zeros(c_mid, c_in, 3),
            s1conv: ConvLayer::zeros(c_mid, c_mid, 5),
            s2conv: ConvLayer::zeros(c_mid, c_mid, 3),
            upconv: ConvLayer::zeros(c_out * r * r, c_mid, 3),
            r,
        }
    }

    pub fn new(
        dconv: ConvLayer,
        s1conv: ConvLayer,
        s2conv: ConvLayer,
        upconv: ConvLayer,
        r: usize,
    ) -> Result<Self> {
        if r == 0 || upconv.out_channels() % (r * r) != 0 {
            return dim_err(format!(
                "upconv has {} channels, not divisible by r^2 = {}",
                upconv.out_channels(),
                r * r
            ));
        }
        Ok(Self {
            dconv,
            s1conv,
            s2conv,
            upconv,
            r,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.upconv.out_channels() / (self.r * self.r)
    }

    /// Layers in application order.
    pub fn layers(&self) -> [&ConvLayer; 4] {
        [&self.dconv, &self.s1conv, &self.s2conv, &self.upconv]
    }

    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> [ConvVars<'t>; 4] {
        self.layers().map(|l| ConvVars::on_tape(l, tape, trainable))
    }
}

/// Applies the block with explicit weight variables.
pub fn subpixel_block_vars<'t>(x: Var<'t>, layers: &[ConvVars<'t>; 4], r: usize) -> Result<Var<'t>> {
    let h = layers[0].apply(x)?.elu();
    let h = layers[1].apply(h)?.relu();
    let h = layers[2].apply(h)?.relu();
    layers[3].apply(h)?.relu().pixel_shuffle(r)
}

/// `(C,H,W)` features to `(C',2H,2W)`.
pub fn subpixel_block<'t>(x: Var<'t>, w: &SubpixelBlockWeights) -> Result<Var<'t>> {
    subpixel_block_vars(x, &w.vars(x.tape(), false), w.r)
}

/// A 3x3 conv to two channels followed by a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispUncertHeadWeights {
    pub conv: ConvLayer,
}

impl DispUncertHeadWeights {
    pub fn new(conv: ConvLayer) -> Result<Self> {
        if conv.out_channels() != 2 || conv.size() != 3 {
            return dim_err("head needs a 3x3 kernel with two output channels");
        }
        Ok(Self { conv })
    }

    pub fn zeros(c_in: usize) -> Self {
        Self {
            conv: ConvLayer::zeros(2, c_in, 3),
        }
    }

    pub fn init(c_in: usize, seed: u64) -> Self {
        Self {
            conv: ConvLayer::random(2, c_in, 3, &mut KaimingUniform::new(seed)),
        }
    }

    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> ConvVars<'t> {
        ConvVars::on_tape(&self.conv, tape, trainable)
    }
}

/// Returns `(disparity, uncertainty)`, each `(1,H,W)` in `(0,1)`.
pub fn disp_uncert_head_vars<'t>(x: Var<'t>, conv: &ConvVars<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let out = conv.apply(x)?.sigmoid();
    Ok((out.channel(0)?, out.channel(1)?))
}

pub fn disp_uncert_head<'t>(x: Var<'t>, w: &DispUncertHeadWeights) -> Result<(Var<'t>, Var<'t>)> {
    disp_uncert_head_vars(x, &w.vars(x.tape(), false))
}

/// Depth bounds for the `1 / (a·σ + b)` disparity mapping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl DepthRange {
    pub fn new(min_depth: f64, max_depth: f64) -> Result<Self> {
        let r = Self {
            min_depth,
            max_depth,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth && self.max_depth.is_finite()) {
            return domain_err(format!(
                "depth range needs 0 < min < max, got [{}, {}]",
                self.min_depth, self.max_depth
            ));
        }
        Ok(())
    }

    pub fn a(&self) -> f64 {
        1.0 / self.min_depth - 1.0 / self.max_depth
    }

    pub fn b(&self) -> f64 {
        1.0 / self.max_depth
    }

    /// σ = 0 gives `max_depth`, σ = 1 gives `min_depth`.
    pub fn depth(&self, sigma: f64) -> f64 {
        1.0 / (self.a() * sigma + self.b())
    }

    /// Inverse of [`DepthRange::depth`].
    pub fn sigma(&self, depth: f64) -> f64 {
        (1.0 / depth - self.b()) / self.a()
    }

    pub fn depth_map(&self, sigma: &Tensor) -> Tensor {
        sigma.map(|s| self.depth(s))
    }

    pub fn depth_var<'t>(&self, sigma: Var<'t>) -> Result<Var<'t>> {
        self.validate()?;
        if sigma.value().data().iter().any(|s| !(0.0..=1.0).contains(s)) {
            return domain_err("disparity must lie in [0, 1]");
        }
        sigma.mul_scalar(self.a()).add_scalar(self.b()).recip()
    }
}

/// Differentiable `1 / (a·σ + b)` with `a, b` fixed by the depth bounds.
pub fn disparity_to_depth<'t>(sigma: Var<'t>, min_depth: f64, max_depth: f64) -> Result<Var<'t>> {
    DepthRange::new(min_depth, max_depth)?.depth_var(sigma)
}
