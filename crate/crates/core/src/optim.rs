//! Photometric bundle adjustment with Adam.
//!
//! Per-pixel disparity, the two relative poses and the intrinsics are free
//! parameters of the photometric objective in [`crate::losses`]; each step
//! rebuilds the tape, backpropagates and applies one Adam update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::camera::{Intrinsics, PoseSE3};
use crate::error::{dim_err, Error, Result};
use crate::losses::{total_loss, LossConfig, LossContext, LossInputs, LossOutput};
use crate::subpixel::DepthRange;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return dim_err(format!(
            "adam state tracks {} parameters, got {} params and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return dim_err(format!("parameter {i}: shape {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: state.step,
                message: format!("gradient of parameter {i} is {} at entry {bad}", g.data()[bad]),
            });
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pi, &gi), (mi, vi)) in iter {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Piecewise-constant learning rate: `base` for the first `boundary`
/// fraction of the steps, `decayed` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decayed: f64,
    pub boundary: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-4,
            decayed: 1e-5,
            boundary: 0.6,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let switch = (total as f64 * self.boundary).round() as usize;
        if step < switch {
            self.base
        } else {
            self.decayed
        }
    }
}

/// The default schedule: 1e-4 for the first 60% of steps, then 1e-5.
pub fn lr_schedule(step: usize, total: usize) -> f64 {
    LrSchedule::default().at(step, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfmOptions {
    pub with_uncertainty: bool,
    pub learn_intrinsics: bool,
    /// Half-width of the uniform noise added to the initial disparity
    /// pre-activations.
    pub jitter: f64,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
}

impl Default for SfmOptions {
    fn default() -> Self {
        Self {
            with_uncertainty: true,
            learn_intrinsics: true,
            jitter: 1e-3,
            seed: 0,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
        }
    }
}

/// Free parameters, all unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmParams {
    /// Pre-sigmoid disparity, one `(1, H>>s, W>>s)` grid per scale.
    pub disp_raw: Vec<Tensor>,
    /// Pre-sigmoid uncertainty grids, same layout as `disp_raw`.
    pub uncert_raw: Option<Vec<Tensor>>,
    /// `[omega, t]` from the target to each source frame.
    pub poses: Vec<Tensor>,
    /// Raw intrinsics `[raw_fx, raw_fy, cx, cy]`.
    pub intrinsics: Tensor,
}

impl SfmParams {
    fn flatten(&self) -> Vec<Tensor> {
        let mut out = self.disp_raw.clone();
        if let Some(u) = &self.uncert_raw {
            out.extend(u.iter().cloned());
        }
        out.extend(self.poses.iter().cloned());
        out.push(self.intrinsics.clone());
        out
    }

    fn unflatten(&mut self, flat: Vec<Tensor>) {
        let mut it = flat.into_iter();
        for d in &mut self.disp_raw {
            *d = it.next().expect("disparity");
        }
        if let Some(u) = &mut self.uncert_raw {
            for g in u {
                *g = it.next().expect("uncertainty");
            }
        }
        for p in &mut self.poses {
            *p = it.next().expect("pose");
        }
        self.intrinsics = it.next().expect("intrinsics");
    }
}

pub struct SfmProblem {
    pub ctx: LossContext,
    pub params: SfmParams,
    pub options: SfmOptions,
}

impl SfmProblem {
    /// Default initialization: disparity pre-activations near 0, identity
    /// poses, all normalized intrinsics at 0.5.
    pub fn new(
        target: Tensor,
        sources: Vec<Tensor>,
        cfg: LossConfig,
        range: DepthRange,
        options: SfmOptions,
    ) -> Result<Self> {
        range.validate()?;
        let ctx = LossContext::new(target, sources, cfg, range)?;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let dims: Vec<(usize, usize)> = (0..ctx.cfg.n_scales).map(|s| ctx.scale_dims(s)).collect();
        if let Some((s, (h, w))) = dims.iter().enumerate().find(|(_, (h, w))| *h < 3 || *w < 3) {
            return dim_err(format!(
                "scale {s} would be {h}x{w}; use fewer scales or a larger image"
            ));
        }
        let j = options.jitter;
        let disp_raw = dims
            .iter()
            .map(|&(h, w)| {
                Tensor::from_fn3(1, h, w, |_, _, _| if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 })
            })
            .collect();
        let uncert_raw = options
            .with_uncertainty
            .then(|| dims.iter().map(|&(h, w)| Tensor::zeros(&[1, h, w])).collect());
        let params = SfmParams {
            disp_raw,
            uncert_raw,
            poses: vec![PoseSE3::identity().to_params(); ctx.sources.len()],
            intrinsics: Intrinsics::init(ctx.width(), ctx.height())?.to_raw(),
        };
        Ok(Self { ctx, params, options })
    }

    pub fn set_intrinsics(&mut self, k: &Intrinsics) {
        self.params.intrinsics = k.to_raw();
    }

    pub fn set_poses(&mut self, poses: &[PoseSE3]) -> Result<()> {
        if poses.len() != self.params.poses.len() {
            return dim_err("one pose per source frame is required");
        }
        self.params.poses = poses.iter().map(PoseSE3::to_params).collect();
        Ok(())
    }

    /// Sets every scale's disparity so that it reproduces `depth` (area
    /// averaged in disparity space at the coarser scales).
    pub fn set_depth(&mut self, depth: &Tensor) -> Result<()> {
        let (h, w) = (self.ctx.height(), self.ctx.width());
        if depth.shape() != [1, h, w] {
            return dim_err(format!("depth must be [1, {h}, {w}], got {:?}", depth.shape()));
        }
        let range = self.ctx.range;
        let sigma = depth.map(|d| range.sigma(d.clamp(range.min_depth, range.max_depth)));
        for (s, grid) in self.params.disp_raw.iter_mut().enumerate() {
            let (sh, sw) = self.ctx.scale_dims(s);
            let f = 1 << s;
            *grid = Tensor::from_fn3(1, sh, sw, |_, y, x| {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += sigma.at3(0, y * f + dy, x * f + dx);
                    }
                }
                logit(acc / (f * f) as f64)
            });
        }
        Ok(())
    }

    /// Sets the uncertainty pre-activations so that `sigma` is uniform.
    pub fn set_uncertainty(&mut self, sigma: f64) {
        if let Some(u) = &mut self.params.uncert_raw {
            for g in u {
                *g = Tensor::full(g.shape(), logit(sigma));
            }
        }
    }

    fn trainable(&self) -> Vec<bool> {
        let n = self.params.flatten().len();
        let mut t = vec![true; n];
        t[n - 1] = self.options.learn_intrinsics;
        t
    }

    fn build<'t>(&self, tape: &'t Tape, flat: &[Tensor]) -> Result<(Vec<Var<'t>>, LossOutput<'t>)> {
        let trainable = self.trainable();
        let vars: Vec<Var<'t>> = flat
            .iter()
            .zip(&trainable)
            .map(|(p, &t)| if t { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        let out = evaluate_vars(&self.ctx, &vars, self.params.uncert_raw.is_some(), None)?;
        Ok((vars, out))
    }

    /// Loss at the current parameters.
    pub fn loss(&self) -> Result<f64> {
        let tape = Tape::new();
        Ok(self.build(&tape, &self.params.flatten())?.1.total.item())
    }

    /// Loss and gradient with respect to every parameter tensor, in the
    /// order disparity grids, uncertainty grids, poses, intrinsics.
    pub fn loss_and_grad(&self) -> Result<(LossSnapshot, Vec<Tensor>)> {
        let tape = Tape::new();
        let (vars, out) = self.build(&tape, &self.params.flatten())?;
        let grads = tape.backward(out.total)?;
        let snapshot = LossSnapshot {
            loss: out.total.item(),
            mask_fraction: out.mask_fraction,
            used_fallback: out.used_fallback,
        };
        Ok((snapshot, vars.iter().map(|&v| grads.wrt(v)).collect()))
    }

    /// All parameter tensors in gradient order.
    pub fn flat_params(&self) -> Vec<Tensor> {
        self.params.flatten()
    }

    /// Evaluates the objective at arbitrary flat parameters; used by
    /// gradient checks.
    pub fn objective<'t>(&self, vars: &[Var<'t>]) -> Result<Var<'t>> {
        Ok(evaluate_vars(&self.ctx, vars, self.params.uncert_raw.is_some(), None)?.total)
    }

    /// Pixel weights (auto-mask × validity) selected at the current
    /// parameters, one map per scale.
    pub fn pixel_weights(&self) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        Ok(self.build(&tape, &self.params.flatten())?.1.pixel_weights)
    }

    /// Like [`SfmProblem::objective`] with the pixel weights held fixed, so
    /// the mask selection cannot switch between evaluations.
    pub fn objective_with_weights<'t>(&self, vars: &[Var<'t>], weights: &[Tensor]) -> Result<Var<'t>> {
        Ok(evaluate_vars(&self.ctx, vars, self.params.uncert_raw.is_some(), Some(weights))?.total)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_raw(self.params.intrinsics.data())
    }

    pub fn poses(&self) -> Result<Vec<PoseSE3>> {
        self.params.poses.iter().map(|p| PoseSE3::from_params(p.data())).collect()
    }

    /// Full-resolution depth from the finest disparity grid.
    pub fn depth(&self) -> Tensor {
        self.ctx.range.depth_map(&self.params.disp_raw[0].map(sigmoid))
    }

    /// Depth of every scale, at that scale's resolution.
    pub fn depth_per_scale(&self) -> Vec<Tensor> {
        self.params
            .disp_raw
            .iter()
            .map(|d| self.ctx.range.depth_map(&d.map(sigmoid)))
            .collect()
    }

    /// Finest uncertainty map, if enabled.
    pub fn uncertainty(&self) -> Option<Tensor> {
        let sigma_min = self.ctx.cfg.sigma_min;
        self.params
            .uncert_raw
            .as_ref()
            .map(|u| u[0].map(|v| sigmoid(v).clamp(sigma_min, 1.0)))
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn evaluate_vars<'t>(
    ctx: &LossContext,
    vars: &[Var<'t>],
    with_uncertainty: bool,
    pixel_weights: Option<&[Tensor]>,
) -> Result<LossOutput<'t>> {
    let n = ctx.cfg.n_scales;
    let n_src = ctx.sources.len();
    let expected = n + if with_uncertainty { n } else { 0 } + n_src + 1;
    if vars.len() != expected {
        return dim_err(format!("expected {expected} parameter tensors, got {}", vars.len()));
    }
    let disp = vars[..n].iter().map(|v| v.sigmoid()).collect();
    let mut rest = &vars[n..];
    let uncert = if with_uncertainty {
        let u = rest[..n].iter().map(|v| v.sigmoid()).collect();
        rest = &rest[n..];
        Some(u)
    } else {
        None
    };
    let inputs = LossInputs {
        disp,
        uncert,
        intrinsics: rest[n_src],
        poses: rest[..n_src].to_vec(),
        pixel_weights: pixel_weights.map(<[Tensor]>::to_vec),
    };
    total_loss(ctx, &inputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossSnapshot {
    pub loss: f64,
    pub mask_fraction: f64,
    pub used_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct SfmResult {
    /// Full-resolution depth.
    pub depth: Tensor,
    pub depth_per_scale: Vec<Tensor>,
    /// Target-to-source poses.
    pub poses: Vec<PoseSE3>,
    pub intrinsics: Intrinsics,
    pub uncertainty: Option<Tensor>,
    /// Loss before each update.
    pub trace: Vec<TraceEntry>,
    /// Loss at the returned parameters.
    pub final_loss: f64,
    /// Set when optimization stopped on a non-finite loss or gradient; the
    /// result then holds the last finite state.
    pub divergence: Option<String>,
}

/// Runs `steps` Adam updates on the problem in place.
pub fn optimize(problem: &mut SfmProblem, steps: usize) -> Result<SfmResult> {
    optimize_with(problem, steps, |_, _| {})
}

/// Like [`optimize`], calling `progress(step, loss)` before every update.
pub fn optimize_with(
    problem: &mut SfmProblem,
    steps: usize,
    mut progress: impl FnMut(usize, f64),
) -> Result<SfmResult> {
    if steps == 0 {
        return Err(Error::Contract("at least one optimization step is required".into()));
    }
    let mut flat = problem.params.flatten();
    let mut adam = AdamState::new(&flat, problem.options.adam);
    let schedule = problem.options.schedule;
    let mut trace = Vec::with_capacity(steps);
    let mut divergence = None;
    for step in 0..steps {
        let (snap, grads) = problem.loss_and_grad()?;
        if !snap.loss.is_finite() {
            divergence = Some(format!("loss is {} at step {step}", snap.loss));
            break;
        }
        progress(step, snap.loss);
        let lr = schedule.at(step, steps);
        trace.push(TraceEntry {
            step,
            lr,
            loss: snap.loss,
        });
        match adam_step(&mut adam, &mut flat, &grads, lr) {
            Ok(()) => {}
            Err(Error::Divergence { message, .. }) => {
                divergence = Some(format!("step {step}: {message}"));
                break;
            }
            Err(e) => return Err(e),
        }
        if flat.iter().any(|t| !t.all_finite()) {
            divergence = Some(format!("non-finite parameters after step {step}"));
            break;
        }
        problem.params.unflatten(flat.clone());
    }
    let final_loss = problem.loss()?;
    Ok(SfmResult {
        depth: problem.depth(),
        depth_per_scale: problem.depth_per_scale(),
        poses: problem.poses()?,
        intrinsics: problem.intrinsics()?,
        uncertainty: problem.uncertainty(),
        trace,
        final_loss,
        divergence,
    })
}
