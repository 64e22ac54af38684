//! End-to-end recovery runs on synthetic scenes: render a frame trio,
//! optimize depth, poses and intrinsics from scratch, and score the result
//! against the renderer's ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckReport, Tape};
use crate::camera::{synthesize_view, warp_grid_fixed, NormalizedIntrinsics, PoseSE3, Vec3};
use crate::error::{dim_err, Error, Result};
use crate::io::RunConfig;
use crate::metrics::{depth_metrics, DepthEvalResult, DEFAULT_DEPTH_CAP};
use crate::optim::{optimize_with, SfmProblem, SfmResult};
use crate::scene::{gen_sequence, Sequence, SyntheticScene};
use crate::tensor::Tensor;

/// Frame indices of the trio used by [`run_recovery`]: target, then sources.
pub const TARGET_FRAME: usize = 1;
pub const SOURCE_FRAMES: [usize; 2] = [0, 2];

/// Seed of the reference total-loss gradient check. The objective is only
/// piecewise smooth (bilinear cells, minimum over sources, L1 residuals); at
/// this seed no kink lies within the finite-difference step of any entry.
pub const GRAD_CHECK_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub depth: DepthEvalResult,
    /// AbsRel of the best constant depth map (the gt median), for scale.
    pub constant_depth_abs_rel: f64,
    pub intrinsics: NormalizedIntrinsics,
    pub intrinsics_gt: NormalizedIntrinsics,
    pub fx_rel_error: f64,
    pub fy_rel_error: f64,
    /// Angle between estimated and true translation, per source frame.
    pub translation_angle_deg: Vec<f64>,
    pub rotation_error: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub divergence: Option<String>,
}

impl RecoveryReport {
    pub fn max_translation_angle_deg(&self) -> f64 {
        self.translation_angle_deg.iter().copied().fold(0.0, f64::max)
    }
}

pub struct RecoveryRun {
    pub scene: SyntheticScene,
    pub sequence: Sequence,
    pub result: SfmResult,
    pub report: RecoveryReport,
}

/// Angle in degrees between two translation vectors.
pub fn translation_angle_deg(estimate: &Vec3, truth: &Vec3) -> Result<f64> {
    let dot: f64 = (0..3).map(|i| estimate[i] * truth[i]).sum();
    let ne = estimate.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ne == 0.0 || nt == 0.0 {
        return Err(Error::Domain("translation direction of a zero vector".into()));
    }
    Ok((dot / (ne * nt)).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Mean absolute relative error of the constant map equal to the gt median.
pub fn constant_depth_abs_rel(gt: &Tensor) -> Result<f64> {
    let m = gt.median()?;
    let sum: f64 = gt.data().iter().map(|g| (m - g).abs() / g).sum();
    Ok(sum / gt.numel() as f64)
}

/// Warps `source` into the target view with the given depth, intrinsics and
/// target-to-source pose, and returns the mean absolute difference to
/// `target` over pixels whose sample point falls inside the source image.
pub fn warp_mae(
    target: &Tensor,
    source: &Tensor,
    depth: &Tensor,
    intrinsics: &crate::camera::Intrinsics,
    pose: &PoseSE3,
) -> Result<f64> {
    if target.shape() != source.shape() {
        return dim_err("target and source images differ in shape");
    }
    let (c, h, w) = target.dims3()?;
    let (grid, valid) = warp_grid_fixed(depth, intrinsics, pose)?;
    let tape = Tape::new();
    let warped = synthesize_view(tape.constant(source.clone()), tape.constant(grid.clone()))?.value();
    let (g, v) = (grid.data(), valid.data());
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (gx, gy) = (g[p], g[h * w + p]);
            let inside = gx >= 0.0 && gx <= (w - 1) as f64 && gy >= 0.0 && gy <= (h - 1) as f64;
            if !inside || v[p] == 0.0 {
                continue;
            }
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                sum += (warped.data()[i] - target.data()[i]).abs();
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::Domain("no target pixel projects inside the source".into()));
    }
    Ok(sum / count as f64)
}

/// Renders the configured scene, optimizes from the default initialization
/// and scores the outcome.
pub fn run_recovery(cfg: &RunConfig, progress: impl FnMut(usize, f64)) -> Result<RecoveryRun> {
    let scene = SyntheticScene::new(cfg.scene_config())?;
    let sequence = gen_sequence(&scene, scene.n_frames())?;
    let target = sequence.frames[TARGET_FRAME].clone();
    let sources = SOURCE_FRAMES.iter().map(|&i| sequence.frames[i].clone()).collect();
    let mut problem = SfmProblem::new(target, sources, cfg.loss.clone(), cfg.depth_range, cfg.sfm_options())?;
    if !cfg.learn_intrinsics {
        problem.set_intrinsics(&scene.intrinsics);
    }
    let result = optimize_with(&mut problem, cfg.steps, progress)?;
    let report = score(&scene, &sequence, &result, cfg.steps)?;
    Ok(RecoveryRun {
        scene,
        sequence,
        result,
        report,
    })
}

fn score(scene: &SyntheticScene, seq: &Sequence, result: &SfmResult, steps: usize) -> Result<RecoveryReport> {
    let gt_depth = &seq.depths[TARGET_FRAME];
    let depth = depth_metrics(&result.depth, gt_depth, DEFAULT_DEPTH_CAP, true)?;
    let est = result.intrinsics.normalized();
    let gt = scene.intrinsics.normalized();
    let mut angles = Vec::new();
    let mut rotation_error = Vec::new();
    for (pose, &src) in result.poses.iter().zip(SOURCE_FRAMES.iter()) {
        let truth = scene.relative_pose(TARGET_FRAME, src)?;
        angles.push(translation_angle_deg(&pose.t, &truth.t)?);
        let diff = truth.inverse().compose(pose);
        rotation_error.push(diff.omega.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(RecoveryReport {
        depth,
        constant_depth_abs_rel: constant_depth_abs_rel(gt_depth)?,
        intrinsics: est,
        intrinsics_gt: gt,
        fx_rel_error: (est.fx - gt.fx).abs() / gt.fx,
        fy_rel_error: (est.fy - gt.fy).abs() / gt.fy,
        translation_angle_deg: angles,
        rotation_error,
        initial_loss: result.trace.first().map_or(f64::NAN, |e| e.loss),
        final_loss: result.final_loss,
        steps,
        divergence: result.divergence.clone(),
    })
}

/// Largest scale count (at most `max`) keeping every pyramid level at
/// least 3x3 for a `width` x `height` image.
pub fn fitting_scales(width: usize, height: usize, max: usize) -> usize {
    (1..=max)
        .take_while(|&n| (width >> (n - 1)) >= 3 && (height >> (n - 1)) >= 3)
        .last()
        .unwrap_or(0)
}

/// Finite-difference check of the full objective (every parameter group,
/// uncertainty and learned intrinsics included) on a small rendered trio,
/// evaluated at a perturbed ground-truth state with the pixel weights held at
/// their values there.
pub fn total_loss_grad_check(width: usize, height: usize, seed: u64) -> Result<GradCheckReport> {
    let (problem, params) = grad_check_problem(width, height, seed)?;
    let weights = problem.pixel_weights()?;
    grad_check(|_, vars| problem.objective_with_weights(vars, &weights), &params, 1e-5, None, seed)
}

/// Two-source problem near the ground-truth state of a small scene, and its
/// flat parameters.
pub fn grad_check_problem(width: usize, height: usize, seed: u64) -> Result<(SfmProblem, Vec<Tensor>)> {
    let mut cfg = RunConfig {
        width,
        height,
        seed,
        ..RunConfig::default()
    };
    cfg.loss.n_scales = fitting_scales(width, height, cfg.loss.n_scales);
    if cfg.loss.n_scales == 0 {
        return dim_err(format!("{width}x{height} is too small for any scale"));
    }
    let scene = SyntheticScene::new(cfg.scene_config())?;
    let seq = gen_sequence(&scene, 3)?;
    let sources = SOURCE_FRAMES.iter().map(|&i| seq.frames[i].clone()).collect();
    let mut problem = SfmProblem::new(
        seq.frames[TARGET_FRAME].clone(),
        sources,
        cfg.loss.clone(),
        cfg.depth_range,
        cfg.sfm_options(),
    )?;
    let poses = SOURCE_FRAMES
        .iter()
        .map(|&i| scene.relative_pose(TARGET_FRAME, i))
        .collect::<Result<Vec<_>>>()?;
    problem.set_poses(&poses)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = &seq.depths[TARGET_FRAME];
    let noisy: Vec<f64> = gt.data().iter().map(|d| d * (1.0 + rng.gen_range(-0.05..0.05))).collect();
    problem.set_depth(&Tensor::new(gt.shape().to_vec(), noisy)?)?;
    problem.set_uncertainty(0.3);
    let params = problem.flat_params();
    Ok((problem, params))
}
