//! Photometric self-supervision objective.
//!
//! Per pixel, the target frame is compared with every source frame warped
//! into its viewpoint using a mix of SSIM and L1. The minimum over sources
//! is weighted by a learned uncertainty, gated by a binary auto-mask that
//! drops pixels the unwarped sources already explain, and combined with an
//! edge-aware first+second order disparity smoothness term. The total is
//! averaged over decoder scales.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoxFilter, Var};
use crate::camera::{synthesize_view, warp_grid};
use crate::error::{dim_err, domain_err, Error, Result};
use crate::subpixel::DepthRange;
use crate::tensor::{PadMode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// SSIM weight in the SSIM/L1 mix.
    pub alpha: f64,
    /// Smoothness weight.
    pub lambda: f64,
    /// Divide the smoothness weight by `2^s` at scale `s`.
    pub smooth_scale_decay: bool,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Lower clamp for the uncertainty map.
    pub sigma_min: f64,
    /// Constant added by the uncertainty-weighted loss.
    pub uncert_offset: f64,
    /// Number of decoder scales; scale `s` has resolution `1/2^s`.
    pub n_scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            lambda: 1e-3,
            smooth_scale_decay: true,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            sigma_min: 0.01,
            uncert_offset: 1.5,
            n_scales: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config(format!("sigma_min {} outside (0,1)", self.sigma_min)));
        }
        if self.n_scales == 0 {
            return Err(Error::Config("n_scales must be at least 1".into()));
        }
        if self.lambda < 0.0 || self.ssim_c1 <= 0.0 || self.ssim_c2 <= 0.0 {
            return Err(Error::Config("lambda must be >= 0 and SSIM constants > 0".into()));
        }
        Ok(())
    }

    /// Resolution factors `1, 1/2, 1/4, ...` for each scale.
    pub fn scale_factors(&self) -> Vec<f64> {
        (0..self.n_scales).map(|s| 1.0 / (1u64 << s) as f64).collect()
    }

    fn smooth_weight(&self, scale: usize) -> f64 {
        if self.smooth_scale_decay {
            self.lambda / (1u64 << scale) as f64
        } else {
            self.lambda
        }
    }
}

/// Per-pixel SSIM map with 3x3 uniform windows and reflect padding.
pub fn ssim<'t>(x: Var<'t>, y: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    if x.shape() != y.shape() {
        return dim_err(format!("ssim inputs {:?} vs {:?}", x.shape(), y.shape()));
    }
    let xv = x.value();
    let yv = y.value();
    let filter = BoxFilter::new(xv.shape(), 3, PadMode::Reflect)?;
    let (xd, yd) = (xv.data(), yv.data());
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = filter.apply(xd);
    let my = filter.apply(yd);
    let bxx = filter.apply(&prod(xd, xd));
    let byy = filter.apply(&prod(yd, yd));
    let bxy = filter.apply(&prod(xd, yd));
    let n = xd.len();
    // Per pixel: luminance numerator/denominator and structure
    // numerator/denominator.
    let mut terms = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let mxy = mx[i] * my[i];
        let mxx = mx[i] * mx[i];
        let myy = my[i] * my[i];
        let a = 2.0 * mxy + cfg.ssim_c1;
        let b = 2.0 * (bxy[i] - mxy) + cfg.ssim_c2;
        let c = mxx + myy + cfg.ssim_c1;
        let d = (bxx[i] - mxx) + (byy[i] - myy) + cfg.ssim_c2;
        let v = (a * b) / (c * d);
        terms.push([a, b, c, d]);
        s.push(v);
    }
    let value = Tensor::new(xv.shape().to_vec(), s.clone())?;
    Ok(x.tape().push_op(value, &[x, y], move |g, needs| {
        let gd = g.data();
        let mut g_mx = vec![0.0; n];
        let mut g_my = vec![0.0; n];
        let mut g_sq = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for i in 0..n {
            let [a, b, c, d] = terms[i];
            let dn = c * d;
            let gi = gd[i];
            g_mx[i] = gi * (2.0 * my[i] * (b - a) - s[i] * 2.0 * mx[i] * (d - c)) / dn;
            g_my[i] = gi * (2.0 * mx[i] * (b - a) - s[i] * 2.0 * my[i] * (d - c)) / dn;
            g_sq[i] = -gi * s[i] / d;
            g_xy[i] = gi * 2.0 * a / dn;
        }
        let adj_sq = filter.adjoint(&g_sq);
        let adj_xy = filter.adjoint(&g_xy);
        let shape = xv.shape().to_vec();
        let grad = |mean_adj: Vec<f64>, own: &[f64], other: &[f64]| {
            let data = (0..n)
                .map(|i| mean_adj[i] + 2.0 * own[i] * adj_sq[i] + other[i] * adj_xy[i])
                .collect();
            Tensor::new(shape.clone(), data).expect("input shape")
        };
        let gx = needs[0].then(|| grad(filter.adjoint(&g_mx), xv.data(), yv.data()));
        let gy = needs[1].then(|| grad(filter.adjoint(&g_my), yv.data(), xv.data()));
        vec![gx, gy]
    }))
}

/// `alpha * (1 - SSIM) / 2 + (1 - alpha) * |a - b|`, averaged over
/// channels; shape (1,H,W).
pub fn photometric_error<'t>(target: Var<'t>, other: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    if target.shape() != other.shape() {
        return dim_err(format!(
            "photometric inputs {:?} vs {:?}",
            target.shape(),
            other.shape()
        ));
    }
    let l1 = target.sub(other)?.abs();
    let mixed = if cfg.alpha > 0.0 {
        let dssim = ssim(target, other, cfg)?.rsub_scalar(1.0).mul_scalar(0.5);
        dssim.mul_scalar(cfg.alpha).add(l1.mul_scalar(1.0 - cfg.alpha))?
    } else {
        l1
    };
    mixed.mean_axis(0)
}

/// Per-pixel minimum over a list of (1,H,W) error maps.
pub fn min_reprojection<'t>(maps: &[Var<'t>]) -> Result<Var<'t>> {
    match maps {
        [] => domain_err("min_reprojection of an empty list"),
        [one] => Ok(*one),
        _ => Var::concat(maps)?.min_axis(0),
    }
}

/// `e / (2 s^2) + ln(s) / 2 + offset` with `s` clamped to
/// `[sigma_min, 1]`.
pub fn uncertainty_weighted<'t>(min_err: Var<'t>, sigma: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    let s = sigma.clamp(cfg.sigma_min, 1.0);
    let weighted = min_err.div(s.square().mul_scalar(2.0))?;
    weighted
        .add(s.log()?.mul_scalar(0.5))
        .map(|v| v.add_scalar(cfg.uncert_offset))
}

/// Binary mask, 1 where the best unwarped error strictly exceeds the best
/// warped error.
pub fn auto_mask_from_errors(unwarped_min: &Tensor, warped_min: &Tensor) -> Result<Tensor> {
    unwarped_min.zip_map(warped_min, |u, w| if u > w { 1.0 } else { 0.0 })
}

/// Auto-mask from the raw frames. The result is a constant: no gradient
/// flows through the comparison.
pub fn auto_mask<'t>(
    target: Var<'t>,
    sources: &[Var<'t>],
    warped: &[Var<'t>],
    cfg: &LossConfig,
) -> Result<Tensor> {
    if sources.is_empty() || warped.is_empty() {
        return domain_err("auto_mask needs at least one source");
    }
    if sources.len() != warped.len() {
        return dim_err("auto_mask needs as many warped frames as sources");
    }
    let tape = target.tape();
    let t = target.detach();
    let errs = |frames: &[Var<'t>]| -> Result<Tensor> {
        let maps = frames
            .iter()
            .map(|f| photometric_error(t, tape.constant((*f.value()).clone()), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok((*min_reprojection(&maps)?.value()).clone())
    };
    auto_mask_from_errors(&errs(sources)?, &errs(warped)?)
}

/// Channel-mean absolute value of an image derivative.
fn image_grad_weight(d: &Tensor) -> Result<Tensor> {
    let (c, h, w) = d.dims3()?;
    Ok(Tensor::from_fn3(1, h, w, |_, y, x| {
        let m = (0..c).map(|ci| d.at3(ci, y, x).abs()).sum::<f64>() / c as f64;
        (-0.5 * m).exp()
    }))
}

/// Forward-difference first- and second-order derivative sums
/// `d/dx + d/dy` and `d2/dxx + 2 d2/dxdy + d2/dyy`, cropped to the common
/// (H-1,W-1) and (H-2,W-2) domains.
fn derivative_sums<'t>(v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (_, h, w) = v.value().dims3()?;
    let dx = v.diff_x()?;
    let dy = v.diff_y()?;
    let first = dx.crop(0, 0, h - 1, w - 1)?.add(dy.crop(0, 0, h - 1, w - 1)?)?;
    let dxx = dx.diff_x()?.crop(0, 0, h - 2, w - 2)?;
    let dxy = dx.diff_y()?.crop(0, 0, h - 2, w - 2)?;
    let dyy = dy.diff_y()?.crop(0, 0, h - 2, w - 2)?;
    let second = dxx.add(dxy.mul_scalar(2.0))?.add(dyy)?;
    Ok((first, second))
}

/// Edge-aware smoothness weights `exp(-|grad I| / 2)` for both orders.
pub struct SmoothnessWeights {
    first: Tensor,
    second: Tensor,
}

impl SmoothnessWeights {
    pub fn new(image: &Tensor) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        if h < 3 || w < 3 {
            return dim_err(format!("smoothness needs at least 3x3 pixels, got {h}x{w}"));
        }
        let tape = crate::autodiff::Tape::new();
        let (g1, g2) = derivative_sums(tape.constant(image.clone()))?;
        Ok(Self {
            first: image_grad_weight(&g1.value())?,
            second: image_grad_weight(&g2.value())?,
        })
    }
}

/// Smoothness with precomputed image weights.
pub fn smoothness_weighted<'t>(disp: Var<'t>, weights: &SmoothnessWeights) -> Result<Var<'t>> {
    let (c, h, w) = disp.value().dims3()?;
    if c != 1 {
        return dim_err("disparity must have one channel");
    }
    if weights.first.shape() != [1, h - 1, w - 1] {
        return dim_err("smoothness weights do not match the disparity size");
    }
    let mean = disp.mean();
    if !(mean.item() > 0.0) {
        return domain_err("disparity mean must be positive");
    }
    let normalized = disp.div(mean)?;
    let (g1, g2) = derivative_sums(normalized)?;
    let tape = disp.tape();
    let t1 = g1.abs().mul(tape.constant(weights.first.clone()))?.mean();
    let t2 = g2.abs().mul(tape.constant(weights.second.clone()))?.mean();
    t1.add(t2)
}

/// Edge-aware first+second order smoothness of mean-normalized disparity.
pub fn smoothness<'t>(disp: Var<'t>, image: &Tensor) -> Result<Var<'t>> {
    let (_, h, w) = disp.value().dims3()?;
    let (_, ih, iw) = image.dims3()?;
    if (h, w) != (ih, iw) {
        return dim_err(format!("disparity {h}x{w} vs image {ih}x{iw}"));
    }
    smoothness_weighted(disp, &SmoothnessWeights::new(image)?)
}

/// Frames and per-scale constants shared by every evaluation of the
/// objective on one problem.
pub struct LossContext {
    pub target: Tensor,
    pub sources: Vec<Tensor>,
    pub cfg: LossConfig,
    pub range: DepthRange,
    /// Minimum photometric error of the unwarped sources, (1,H,W).
    unwarped_min: Tensor,
    smooth: Vec<SmoothnessWeights>,
}

impl LossContext {
    pub fn new(target: Tensor, sources: Vec<Tensor>, cfg: LossConfig, range: DepthRange) -> Result<Self> {
        cfg.validate()?;
        let (c, h, w) = target.dims3()?;
        if sources.is_empty() {
            return domain_err("at least one source frame is required");
        }
        if sources.iter().any(|s| s.shape() != [c, h, w]) {
            return dim_err("source frames must match the target shape");
        }
        let tape = crate::autodiff::Tape::new();
        let t = tape.constant(target.clone());
        let maps = sources
            .iter()
            .map(|s| photometric_error(t, tape.constant(s.clone()), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let unwarped_min = (*min_reprojection(&maps)?.value()).clone();
        let smooth = (0..cfg.n_scales)
            .map(|s| SmoothnessWeights::new(&target.area_downsample(1 << s)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            target,
            sources,
            cfg,
            range,
            unwarped_min,
            smooth,
        })
    }

    pub fn height(&self) -> usize {
        self.target.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.target.shape()[2]
    }

    /// Disparity grid size at `scale`.
    pub fn scale_dims(&self, scale: usize) -> (usize, usize) {
        (self.height() >> scale, self.width() >> scale)
    }
}

/// Differentiable state the objective is evaluated at.
pub struct LossInputs<'t> {
    /// Sigmoid disparity, one (1,H/2^s,W/2^s) map per scale.
    pub disp: Vec<Var<'t>>,
    /// Uncertainty maps per scale; `None` uses the plain minimum error.
    pub uncert: Option<Vec<Var<'t>>>,
    /// Raw intrinsics `(4,)`.
    pub intrinsics: Var<'t>,
    /// Target-to-source pose `(6,)` for each source frame.
    pub poses: Vec<Var<'t>>,
    /// Per-scale (1,H,W) pixel weights used instead of auto-mask × validity.
    pub pixel_weights: Option<Vec<Tensor>>,
}

pub struct LossOutput<'t> {
    pub total: Var<'t>,
    /// Per-scale `photometric + smoothness` values.
    pub per_scale: Vec<f64>,
    /// Fraction of pixels kept by the auto-mask at the finest scale.
    pub mask_fraction: f64,
    /// Whether any scale fell back to the unmasked mean.
    pub used_fallback: bool,
    /// Pixel weights applied at each scale.
    pub pixel_weights: Vec<Tensor>,
}

/// Full objective averaged over scales.
pub fn total_loss<'t>(ctx: &LossContext, inputs: &LossInputs<'t>) -> Result<LossOutput<'t>> {
    let cfg = &ctx.cfg;
    if inputs.disp.len() != cfg.n_scales {
        return dim_err(format!(
            "{} disparity maps for {} scales",
            inputs.disp.len(),
            cfg.n_scales
        ));
    }
    if inputs.poses.len() != ctx.sources.len() {
        return dim_err("one pose per source frame is required");
    }
    if let Some(u) = &inputs.uncert {
        if u.len() != cfg.n_scales {
            return dim_err("one uncertainty map per scale is required");
        }
    }
    if let Some(ws) = &inputs.pixel_weights {
        if ws.len() != cfg.n_scales || ws.iter().any(|m| m.shape() != [1, ctx.height(), ctx.width()]) {
            return dim_err("one full-resolution weight map per scale is required");
        }
    }
    let tape = inputs.intrinsics.tape();
    let (h, w) = (ctx.height(), ctx.width());
    let target = tape.constant(ctx.target.clone());
    let sources: Vec<Var<'t>> = ctx.sources.iter().map(|s| tape.constant(s.clone())).collect();

    let mut scale_totals = Vec::with_capacity(cfg.n_scales);
    let mut per_scale = Vec::with_capacity(cfg.n_scales);
    let mut mask_fraction = 0.0;
    let mut used_fallback = false;
    let mut applied = Vec::with_capacity(cfg.n_scales);
    for (s, &disp) in inputs.disp.iter().enumerate() {
        let (sh, sw) = ctx.scale_dims(s);
        if disp.shape() != [1, sh, sw] {
            return dim_err(format!(
                "scale {s} disparity is {:?}, expected [1, {sh}, {sw}]",
                disp.shape()
            ));
        }
        let disp_full = disp.upsample_bilinear(h, w)?;
        let depth = ctx.range.depth_var(disp_full)?;

        let mut errors = Vec::with_capacity(sources.len());
        let mut valid = Tensor::ones(&[1, h, w]);
        for (src, &pose) in sources.iter().zip(&inputs.poses) {
            let field = warp_grid(depth, inputs.intrinsics, pose, w, h)?;
            let warped = synthesize_view(*src, field.grid)?;
            errors.push(photometric_error(target, warped, cfg)?);
            valid = valid.zip_map(&field.valid, |a, b| a * b)?;
        }
        let warped_min = min_reprojection(&errors)?;
        let weights = match &inputs.pixel_weights {
            Some(ws) => ws[s].clone(),
            None => {
                let mask = auto_mask_from_errors(&ctx.unwarped_min, &warped_min.value())?;
                let weights = mask.zip_map(&valid, |a, b| a * b)?;
                let kept = weights.sum();
                if s == 0 {
                    mask_fraction = kept / (h * w) as f64;
                }
                if kept == 0.0 {
                    used_fallback = true;
                    Tensor::ones(&[1, h, w])
                } else {
                    weights
                }
            }
        };
        let per_pixel = match &inputs.uncert {
            Some(u) => {
                let sigma = u[s].upsample_bilinear(h, w)?;
                uncertainty_weighted(warped_min, sigma, cfg)?
            }
            None => warped_min,
        };
        let norm = 1.0 / weights.sum();
        let photo = per_pixel
            .mul(tape.constant(weights.clone()))?
            .sum()
            .mul_scalar(norm);
        let lam = cfg.smooth_weight(s);
        let scale_total = if lam > 0.0 {
            photo.add(smoothness_weighted(disp, &ctx.smooth[s])?.mul_scalar(lam))?
        } else {
            photo
        };
        per_scale.push(scale_total.item());
        scale_totals.push(scale_total);
        applied.push(weights);
    }
    let total = Var::concat(
        &scale_totals
            .iter()
            .map(|v| v.reshape(&[1]))
            .collect::<Result<Vec<_>>>()?,
    )?
    .mean();
    Ok(LossOutput {
        total,
        per_scale,
        mask_fraction,
        used_fallback,
        pixel_weights: applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn noise_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn3(c, h, w, |_, _, _| rng.gen::<f64>())
    }

    /// SSIM composed from elementary tape ops.
    fn ssim_composed<'t>(x: Var<'t>, y: Var<'t>, cfg: &LossConfig) -> Var<'t> {
        let bf = |v: Var<'t>| v.box_filter(3, PadMode::Reflect).unwrap();
        let (mu_x, mu_y) = (bf(x), bf(y));
        let mu_xy = mu_x.mul(mu_y).unwrap();
        let mu_xx = mu_x.mul(mu_x).unwrap();
        let mu_yy = mu_y.mul(mu_y).unwrap();
        let sxx = bf(x.mul(x).unwrap()).sub(mu_xx).unwrap();
        let syy = bf(y.mul(y).unwrap()).sub(mu_yy).unwrap();
        let sxy = bf(x.mul(y).unwrap()).sub(mu_xy).unwrap();
        let num = mu_xy
            .mul_scalar(2.0)
            .add_scalar(cfg.ssim_c1)
            .mul(sxy.mul_scalar(2.0).add_scalar(cfg.ssim_c2))
            .unwrap();
        let den = mu_xx
            .add(mu_yy)
            .unwrap()
            .add_scalar(cfg.ssim_c1)
            .mul(sxx.add(syy).unwrap().add_scalar(cfg.ssim_c2))
            .unwrap();
        num.div(den).unwrap()
    }

    #[test]
    fn fused_ssim_matches_composed() {
        let cfg = LossConfig::default();
        let a = noise_image(3, 5, 6, 11);
        let b = noise_image(3, 5, 6, 12);
        let tape = Tape::new();
        let (x, y) = (tape.param(a.clone()), tape.param(b.clone()));
        let fused = ssim(x, y, &cfg).unwrap();
        let composed = ssim_composed(x, y, &cfg);
        assert!(fused.value().max_abs_diff(&composed.value()).unwrap() < 1e-13);
        let w = tape.constant(noise_image(3, 5, 6, 13));
        let gf = tape.backward(fused.mul(w).unwrap().sum()).unwrap();
        let gc = tape.backward(composed.mul(w).unwrap().sum()).unwrap();
        for v in [x, y] {
            assert!(gf.wrt(v).max_abs_diff(&gc.wrt(v)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let tape = Tape::new();
        let x = tape.constant(noise_image(3, 6, 7, 1));
        let s = ssim(x, x, &LossConfig::default()).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 1.0));
        let pe = photometric_error(x, x, &LossConfig::default()).unwrap();
        assert!(pe.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let y = tape.constant(Tensor::ones(&[1, 4, 4]));
        let cfg = LossConfig::default();
        let s = ssim(x, y, &cfg).unwrap();
        let expect = 1e-4 / (1.0 + 1e-4);
        assert!(s.value().data().iter().all(|&v| (v - expect).abs() < 1e-15));
        let pe = photometric_error(x, y, &cfg).unwrap();
        let e = 0.85 * (1.0 - expect) / 2.0 + 0.15;
        assert!(pe.value().data().iter().all(|&v| (v - e).abs() < 1e-12));
        assert!((e - 0.57496).abs() < 1e-5);
    }

    #[test]
    fn ssim_small_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let base = noise_image(1, 8, 8, 2);
        let noisy = Tensor::from_fn3(1, 8, 8, |_, y, x| base.at3(0, y, x) + 1e-3 * (rng.gen::<f64>() - 0.5));
        let tape = Tape::new();
        let m = ssim(tape.constant(base), tape.constant(noisy), &LossConfig::default())
            .unwrap()
            .value()
            .mean()
            .unwrap();
        assert!(m < 1.0 && m > 0.9, "{m}");
    }

    #[test]
    fn alpha_zero_is_l1() {
        let tape = Tape::new();
        let a = noise_image(3, 4, 5, 3);
        let b = noise_image(3, 4, 5, 4);
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let pe = photometric_error(tape.constant(a.clone()), tape.constant(b.clone()), &cfg).unwrap();
        let v = pe.value();
        for y in 0..4 {
            for x in 0..5 {
                let l1 = (0..3).map(|c| (a.at3(c, y, x) - b.at3(c, y, x)).abs()).sum::<f64>() / 3.0;
                assert!((v.at3(0, y, x) - l1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uncertainty_closed_forms() {
        let tape = Tape::new();
        let cfg = LossConfig::default();
        let e = tape.constant(Tensor::scalar(0.2));
        let one = uncertainty_weighted(e, tape.constant(Tensor::scalar(1.0)), &cfg).unwrap();
        assert_eq!(one.item(), 0.2 / 2.0 + 1.5);
        let half = uncertainty_weighted(e, tape.constant(Tensor::scalar(0.5)), &cfg).unwrap();
        assert!((half.item() - (0.4 + 0.5 * 0.5f64.ln() + 1.5)).abs() < 1e-15);
        assert!((half.item() - 1.55343).abs() < 1e-5);
    }

    #[test]
    fn zero_residual_prefers_smallest_sigma() {
        let tape = Tape::new();
        let cfg = LossConfig::default();
        let e = tape.constant(Tensor::scalar(0.0));
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=100 {
            let s = 0.01 + 0.99 * i as f64 / 100.0;
            let v = uncertainty_weighted(e, tape.constant(Tensor::scalar(s)), &cfg)
                .unwrap()
                .item();
            if v < best.0 {
                best = (v, s);
            }
        }
        assert_eq!(best.1, cfg.sigma_min);
    }

    #[test]
    fn mask_static_frames_is_zero() {
        let tape = Tape::new();
        let t = tape.constant(noise_image(3, 5, 5, 5));
        let m = auto_mask(t, &[t, t], &[t, t], &LossConfig::default()).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let unwarped = Tensor::scalar(0.3);
        let warped = Tensor::scalar(0.1);
        assert_eq!(auto_mask_from_errors(&unwarped, &warped).unwrap().item(), 1.0);
        assert!(auto_mask(t, &[], &[], &LossConfig::default()).is_err());
    }

    #[test]
    fn smoothness_constant_and_ramp() {
        let tape = Tape::new();
        let img = noise_image(3, 6, 7, 6);
        let flat = tape.param(Tensor::full(&[1, 6, 7], 0.3));
        assert_eq!(smoothness(flat, &img).unwrap().item(), 0.0);

        // Ramp 1 + 0.1 x has mean 1.3 across x = 0..6, so the normalized
        // slope is 0.1 / 1.3.
        let ramp = tape.param(Tensor::from_fn3(1, 6, 7, |_, _, x| 1.0 + 0.1 * x as f64));
        let constant_img = Tensor::full(&[3, 6, 7], 0.5);
        let v = smoothness(ramp, &constant_img).unwrap().item();
        assert!((v - 0.1 / 1.3).abs() < 1e-14, "{v}");
    }

    #[test]
    fn smoothness_scale_invariant() {
        let tape = Tape::new();
        let img = noise_image(3, 8, 9, 7);
        let d = noise_image(1, 8, 9, 8).map(|v| v + 0.1);
        let a = smoothness(tape.param(d.clone()), &img).unwrap().item();
        let b = smoothness(tape.param(d.scale(2.0)), &img).unwrap().item();
        assert!((a - b).abs() < 1e-10);
        let zero = tape.param(Tensor::zeros(&[1, 8, 9]));
        assert!(matches!(smoothness(zero, &img), Err(Error::Domain(_))));
    }
}
