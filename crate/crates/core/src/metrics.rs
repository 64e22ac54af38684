//! Depth, trajectory and intrinsics evaluation.

use serde::Serialize;

use crate::camera::{NormalizedIntrinsics, Rigid, Vec3};
use crate::error::{dim_err, domain_err, Result};
use crate::tensor::{median_of, Tensor};

/// Ground truth at or below this depth counts as missing.
pub const MIN_VALID_DEPTH: f64 = 1e-3;
pub const DEFAULT_DEPTH_CAP: f64 = 80.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthEvalResult {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixel_count: usize,
    /// Factor applied to the prediction (1 without median scaling).
    pub scale_ratio: f64,
}

/// Scales `pred` by `median(gt[mask]) / median(pred[mask])`.
pub fn median_scale(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<(Tensor, f64)> {
    if pred.shape() != gt.shape() || mask.len() != gt.numel() {
        return dim_err(format!(
            "pred {:?}, gt {:?} and mask of {} entries must match",
            pred.shape(),
            gt.shape(),
            mask.len()
        ));
    }
    let pick = |t: &Tensor| -> Vec<f64> {
        t.data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect()
    };
    let p = pick(pred);
    if p.is_empty() {
        return domain_err("median scaling needs at least one masked pixel");
    }
    let pm = median_of(&p)?;
    if pm == 0.0 {
        return domain_err("median of the prediction is zero");
    }
    let ratio = median_of(&pick(gt))? / pm;
    Ok((pred.scale(ratio), ratio))
}

/// The seven standard depth metrics over pixels with ground truth in
/// `(1e-3, cap]`. Predictions are clamped to `[1e-3, cap]` after optional
/// median scaling.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, cap: f64, use_median_scaling: bool) -> Result<DepthEvalResult> {
    if pred.shape() != gt.shape() {
        return dim_err(format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape()));
    }
    if !(cap > MIN_VALID_DEPTH) {
        return domain_err(format!("depth cap {cap} must exceed {MIN_VALID_DEPTH}"));
    }
    let mask: Vec<bool> = gt
        .data()
        .iter()
        .map(|&g| g > MIN_VALID_DEPTH && g <= cap)
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return domain_err("no ground-truth pixel in the valid depth range");
    }
    let (scaled, ratio) = if use_median_scaling {
        median_scale(pred, gt, &mask)?
    } else {
        (pred.clone(), 1.0)
    };
    let mut acc = [0.0f64; 7];
    for ((&p, &g), _) in scaled
        .data()
        .iter()
        .zip(gt.data())
        .zip(&mask)
        .filter(|(_, &m)| m)
    {
        if p.is_nan() {
            return domain_err("prediction contains NaN");
        }
        let p = p.clamp(MIN_VALID_DEPTH, cap);
        let d = p - g;
        let thresh = (p / g).max(g / p);
        acc[0] += d.abs() / g;
        acc[1] += d * d / g;
        acc[2] += d * d;
        acc[3] += (p.ln() - g.ln()).powi(2);
        acc[4] += f64::from(u8::from(thresh < 1.25));
        acc[5] += f64::from(u8::from(thresh < 1.25 * 1.25));
        acc[6] += f64::from(u8::from(thresh < 1.25 * 1.25 * 1.25));
    }
    let n = count as f64;
    Ok(DepthEvalResult {
        abs_rel: acc[0] / n,
        sq_rel: acc[1] / n,
        rmse: (acc[2] / n).sqrt(),
        rmse_log: (acc[3] / n).sqrt(),
        delta1: acc[4] / n,
        delta2: acc[5] / n,
        delta3: acc[6] / n,
        valid_pixel_count: count,
        scale_ratio: ratio,
    })
}

/// How snippet errors combine the four frame-to-frame motions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AteMode {
    /// Chain the motions into positions anchored at the first frame, fit
    /// one scale and take the RMSE over all positions.
    #[default]
    Snippet,
    /// Scale-align each motion's translation on its own and average the
    /// residual norms.
    PerPair,
}

/// Camera positions obtained by chaining relative motions from the
/// origin.
pub fn chain_positions(relative: &[Rigid]) -> Vec<Vec3> {
    let mut acc = Rigid::IDENTITY;
    let mut out = vec![acc.t];
    for r in relative {
        acc = acc.compose(r);
        out.push(acc.t);
    }
    out
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Least-squares scale `s` minimizing `sum |s p - g|^2`.
fn fit_scale(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let pp: f64 = pred.iter().map(|p| dot(p, p)).sum();
    let gg: f64 = gt.iter().map(|g| dot(g, g)).sum();
    if gg == 0.0 {
        return domain_err("ground-truth trajectory has zero length");
    }
    if pp == 0.0 {
        // A motionless prediction cannot be scaled; every error is the gt
        // displacement itself.
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| dot(p, g)).sum::<f64>() / pp)
}

/// Absolute trajectory error of one snippet given its frame-to-frame
/// motions (camera `i+1` in camera `i`).
pub fn ate(pred: &[Rigid], gt: &[Rigid], mode: AteMode) -> Result<f64> {
    if pred.len() != gt.len() {
        return dim_err(format!("{} predicted vs {} ground-truth motions", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return dim_err("a snippet needs at least one motion");
    }
    match mode {
        AteMode::Snippet => {
            let p = chain_positions(pred);
            let g = chain_positions(gt);
            let s = fit_scale(&p, &g)?;
            let sq: f64 = p
                .iter()
                .zip(&g)
                .map(|(pi, gi)| dist2(&pi.map(|v| s * v), gi))
                .sum();
            Ok((sq / p.len() as f64).sqrt())
        }
        AteMode::PerPair => {
            let mut total = 0.0;
            for (p, g) in pred.iter().zip(gt) {
                let s = fit_scale(&[p.t], &[g.t])?;
                total += dist2(&p.t.map(|v| s * v), &g.t).sqrt();
            }
            Ok(total / pred.len() as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AteResult {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return domain_err("statistics of an empty list");
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn aggregate(snippet_errors: &[f64]) -> Result<AteResult> {
    let (mean, std) = mean_std(snippet_errors)?;
    Ok(AteResult {
        mean,
        std,
        count: snippet_errors.len(),
    })
}

/// Splits absolute camera-to-world poses into overlapping snippets of
/// `len` frames, returned as frame-to-frame motions.
pub fn snippets(poses: &[Rigid], len: usize) -> Result<Vec<Vec<Rigid>>> {
    if len < 2 {
        return dim_err("a snippet spans at least two frames");
    }
    if poses.len() < len {
        return dim_err(format!("{} poses are fewer than one snippet of {len}", poses.len()));
    }
    Ok(poses
        .windows(len)
        .map(|w| w.windows(2).map(|p| p[0].inverse().compose(&p[1])).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamStats {
    pub mean: f64,
    pub std: f64,
    pub gt: f64,
}

impl ParamStats {
    /// `"0.6902 ± 0.0138"`.
    pub fn display(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntrinsicsReport {
    pub fx: ParamStats,
    pub fy: ParamStats,
    pub cx: ParamStats,
    pub cy: ParamStats,
    pub count: usize,
}

impl IntrinsicsReport {
    pub fn rows(&self) -> [(&'static str, &ParamStats); 4] {
        [
            ("Horizontal focal length", &self.fx),
            ("Vertical focal length", &self.fy),
            ("Horizontal principal point", &self.cx),
            ("Vertical principal point", &self.cy),
        ]
    }

    /// Plain-text table with one row per parameter.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (name, s) in self.rows() {
            out.push_str(&format!("{name:<28} {}  (gt {:.4})\n", s.display(), s.gt));
        }
        out
    }
}

pub fn intrinsics_report(estimates: &[NormalizedIntrinsics], gt: &NormalizedIntrinsics) -> Result<IntrinsicsReport> {
    if estimates.is_empty() {
        return domain_err("intrinsics report needs at least one estimate");
    }
    let stats = |get: fn(&NormalizedIntrinsics) -> f64| -> Result<ParamStats> {
        let v: Vec<f64> = estimates.iter().map(get).collect();
        let (mean, std) = mean_std(&v)?;
        Ok(ParamStats {
            mean,
            std,
            gt: get(gt),
        })
    };
    Ok(IntrinsicsReport {
        fx: stats(|k| k.fx)?,
        fy: stats(|k| k.fy)?,
        cx: stats(|k| k.cx)?,
        cy: stats(|k| k.cy)?,
        count: estimates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::so3_exp;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap()
    }

    fn translation(x: f64, y: f64, z: f64) -> Rigid {
        Rigid {
            t: [x, y, z],
            ..Rigid::IDENTITY
        }
    }

    #[test]
    fn median_scale_examples() {
        let all = [true; 3];
        let (s, r) = median_scale(&t(&[1.0, 2.0, 3.0]), &t(&[2.0, 4.0, 6.0]), &all).unwrap();
        assert_eq!(r, 2.0);
        assert_eq!(s, t(&[2.0, 4.0, 6.0]));
        assert!(median_scale(&t(&[1.0]), &t(&[1.0]), &[false]).is_err());
        assert!(median_scale(&t(&[0.0]), &t(&[1.0]), &[true]).is_err());
    }

    #[test]
    fn depth_examples() {
        let gt = t(&[1.0, 4.0]);
        let r = depth_metrics(&t(&[2.0, 4.0]), &gt, 80.0, false).unwrap();
        assert_eq!(r.abs_rel, 0.5);
        assert_eq!(r.rmse, 0.5f64.sqrt());
        assert_eq!(r.delta1, 0.5);

        let perfect = depth_metrics(&gt, &gt, 80.0, false).unwrap();
        assert_eq!(
            [perfect.abs_rel, perfect.sq_rel, perfect.rmse, perfect.rmse_log],
            [0.0; 4]
        );
        assert_eq!([perfect.delta1, perfect.delta2, perfect.delta3], [1.0; 3]);

        let scaled = depth_metrics(&gt.scale(1.1), &gt, 80.0, false).unwrap();
        assert!((scaled.abs_rel - 0.1).abs() < 1e-15);
        assert_eq!(scaled.delta1, 1.0);

        assert!(depth_metrics(&t(&[1.0]), &t(&[0.0]), 80.0, false).is_err());
        assert!(depth_metrics(&t(&[1.0]), &t(&[90.0]), 80.0, false).is_err());
    }

    #[test]
    fn ate_examples() {
        let gt: Vec<Rigid> = (0..4).map(|_| translation(1.0, 0.0, 0.0)).collect();
        assert_eq!(ate(&gt, &gt, AteMode::Snippet).unwrap(), 0.0);
        let half: Vec<Rigid> = gt.iter().map(|r| translation(r.t[0] / 2.0, 0.0, 0.0)).collect();
        assert!(ate(&half, &gt, AteMode::Snippet).unwrap() < 1e-15);
        assert!(ate(&half, &gt, AteMode::PerPair).unwrap() < 1e-15);
        assert!(ate(&half[..3], &gt, AteMode::Snippet).is_err());
        let still = vec![Rigid::IDENTITY; 4];
        assert!(ate(&gt, &still, AteMode::Snippet).is_err());
    }

    #[test]
    fn ate_respects_rotation_in_chaining() {
        // After a quarter turn the second forward step runs along world x,
        // so a straight-line prediction is wrong.
        let turn = Rigid {
            r: so3_exp(&[0.0, std::f64::consts::FRAC_PI_2, 0.0]),
            t: [0.0, 0.0, 1.0],
        };
        let gt = vec![turn, translation(0.0, 0.0, 1.0)];
        let straight = vec![translation(0.0, 0.0, 1.0); 2];
        assert!(ate(&straight, &gt, AteMode::Snippet).unwrap() > 0.1);
    }

    #[test]
    fn intrinsics_stats() {
        let k = |fx| NormalizedIntrinsics {
            fx,
            fy: 0.5,
            cx: 0.5,
            cy: 0.5,
        };
        let r = intrinsics_report(&[k(0.4), k(0.6)], &k(0.5)).unwrap();
        assert!((r.fx.mean - 0.5).abs() < 1e-15);
        assert!((r.fx.std - 0.1).abs() < 1e-15);
        let one = intrinsics_report(&[k(0.6902)], &k(0.6902)).unwrap();
        assert_eq!(one.fx.std, 0.0);
        let s = ParamStats {
            mean: 0.69021,
            std: 0.01379,
            gt: 0.0,
        };
        assert_eq!(s.display(), "0.6902 ± 0.0138");
        assert!(intrinsics_report(&[], &k(0.5)).is_err());
    }
}
