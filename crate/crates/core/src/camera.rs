//! Pinhole intrinsics, rigid poses and the differentiable warp field.
//!
//! A target pixel `p` with depth `d` is lifted to `d * K^-1 p`, moved into
//! the source camera with `R x + t` and projected again with `K`. The
//! result is a per-pixel sampling grid in source-image pixel coordinates,
//! which [`synthesize_view`] feeds to the bilinear sampler.
//!
//! Intrinsics are normalized by image size: `fx_px = fx * W`,
//! `cx_px = cx * W` and likewise with `H` for the vertical terms. Focal
//! lengths are stored as softplus pre-activations so they stay positive.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, softplus_inv, Tape, Var};
use crate::error::{dim_err, domain_err, Result};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Projected depths at or below this are clamped and flagged invalid.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-6;

/// Below this rotation angle the exponential map uses its Taylor series.
const SMALL_ANGLE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub raw_fx: f64,
    pub raw_fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Intrinsics in normalized units, as reported and evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Focal lengths at half the image size and the principal point at the
    /// image center: every normalized value is 0.5.
    pub fn init(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return dim_err("image size must be positive");
        }
        Ok(Self::from_normalized(0.5, 0.5, 0.5, 0.5))
    }

    pub fn from_normalized(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            raw_fx: softplus_inv(fx),
            raw_fy: softplus_inv(fy),
            cx,
            cy,
        }
    }

    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        match raw {
            &[raw_fx, raw_fy, cx, cy] => Ok(Self {
                raw_fx,
                raw_fy,
                cx,
                cy,
            }),
            _ => dim_err(format!("intrinsics need 4 values, got {}", raw.len())),
        }
    }

    pub fn fx(&self) -> f64 {
        softplus(self.raw_fx)
    }

    pub fn fy(&self) -> f64 {
        softplus(self.raw_fy)
    }

    pub fn normalized(&self) -> NormalizedIntrinsics {
        NormalizedIntrinsics {
            fx: self.fx(),
            fy: self.fy(),
            cx: self.cx,
            cy: self.cy,
        }
    }

    /// `[raw_fx, raw_fy, cx, cy]`, the optimizer's parameter layout.
    pub fn to_raw(&self) -> Tensor {
        Tensor::from_vec(vec![self.raw_fx, self.raw_fy, self.cx, self.cy])
    }

    /// Pixel-unit calibration matrix.
    pub fn matrix(&self, width: usize, height: usize) -> Mat3 {
        let (w, h) = (width as f64, height as f64);
        [
            [self.fx() * w, 0.0, self.cx * w],
            [0.0, self.fy() * h, self.cy * h],
            [0.0, 0.0, 1.0],
        ]
    }

    pub fn matrix_inverse(&self, width: usize, height: usize) -> Mat3 {
        let k = self.matrix(width, height);
        [
            [1.0 / k[0][0], 0.0, -k[0][2] / k[0][0]],
            [0.0, 1.0 / k[1][1], -k[1][2] / k[1][1]],
            [0.0, 0.0, 1.0],
        ]
    }
}

/// Pixel-unit `(fx, fy, cx, cy)` from raw parameters `(4,)`.
pub fn intrinsics_pixels<'t>(raw: Var<'t>, width: usize, height: usize) -> Result<Var<'t>> {
    let r = raw.value();
    if r.numel() != 4 {
        return dim_err(format!("intrinsics need 4 values, got {}", r.numel()));
    }
    let (w, h) = (width as f64, height as f64);
    let d = r.data();
    let value = Tensor::from_vec(vec![softplus(d[0]) * w, softplus(d[1]) * h, d[2] * w, d[3] * h]);
    Ok(raw.tape().push_op(value, &[raw], move |g, _| {
        let d = r.data();
        let gd = g.data();
        let scaled = vec![
            gd[0] * sigmoid(d[0]) * w,
            gd[1] * sigmoid(d[1]) * h,
            gd[2] * w,
            gd[3] * h,
        ];
        vec![Some(Tensor::new(r.shape().to_vec(), scaled).expect("4 values"))]
    }))
}

/// Differentiable pixel-unit calibration matrix `(3,3)`.
pub fn intrinsics_matrix<'t>(raw: Var<'t>, width: usize, height: usize) -> Result<Var<'t>> {
    let px = intrinsics_pixels(raw, width, height)?;
    let p = px.value();
    let d = p.data();
    let value = Tensor::new(vec![3, 3], vec![d[0], 0.0, d[2], 0.0, d[1], d[3], 0.0, 0.0, 1.0])?;
    Ok(raw.tape().push_op(value, &[px], |g, _| {
        let gd = g.data();
        vec![Some(Tensor::from_vec(vec![gd[0], gd[4], gd[2], gd[5]]))]
    }))
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
    }
    m
}

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn hat(w: &Vec3) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn add_scaled(acc: &mut Mat3, m: &Mat3, s: f64) {
    for i in 0..3 {
        for j in 0..3 {
            acc[i][j] += s * m[i][j];
        }
    }
}

/// Rodrigues coefficients `A = sin t / t`, `B = (1 - cos t) / t^2` and
/// their scaled derivatives `A'(t)/t`, `B'(t)/t`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let s = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * s * s / t2)
    };
    // The closed forms for the derivatives cancel badly well above
    // SMALL_ANGLE, so they switch to the series earlier.
    let (da, db) = if theta < 1e-2 {
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let half = (0.5 * theta).sin();
        (
            (theta * c - s) / (t2 * theta),
            (theta * s - 4.0 * half * half) / (t2 * t2),
        )
    };
    (a, b, da, db)
}

/// Rotation matrix of an axis-angle vector.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let w = hat(omega);
    let w2 = mat_mul(&w, &w);
    let mut r = IDENTITY3;
    add_scaled(&mut r, &w, a);
    add_scaled(&mut r, &w2, b);
    r
}

/// Rotation and its partial derivatives with respect to each component of
/// `omega`.
fn so3_exp_jacobian(omega: &Vec3) -> (Mat3, [Mat3; 3]) {
    let theta = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    let (a, b, da, db) = rodrigues_coeffs(theta);
    let w = hat(omega);
    let w2 = mat_mul(&w, &w);
    let mut r = IDENTITY3;
    add_scaled(&mut r, &w, a);
    add_scaled(&mut r, &w2, b);
    let mut d = [[[0.0; 3]; 3]; 3];
    for (i, di) in d.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = hat(&e);
        add_scaled(di, &ei, a);
        add_scaled(di, &mat_mul(&ei, &w), b);
        add_scaled(di, &mat_mul(&w, &ei), b);
        add_scaled(di, &w, da * omega[i]);
        add_scaled(di, &w2, db * omega[i]);
    }
    (r, d)
}

/// Axis-angle vector of a rotation matrix (inverse of [`so3_exp`]).
pub fn so3_log(r: &Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-6 {
        return [0.5 * vee[0], 0.5 * vee[1], 0.5 * vee[2]];
    }
    if std::f64::consts::PI - theta > 1e-6 {
        let s = theta / (2.0 * theta.sin());
        return [s * vee[0], s * vee[1], s * vee[2]];
    }
    // Near a half turn: recover the axis from the symmetric part.
    let k = (0..3).max_by(|&i, &j| r[i][i].total_cmp(&r[j][j])).unwrap_or(0);
    let mut axis = [0.0; 3];
    let denom = (2.0 * (1.0 + r[k][k])).sqrt();
    for (i, a) in axis.iter_mut().enumerate() {
        *a = if i == k {
            0.5 * denom
        } else {
            (r[i][k] + r[k][i]) / (2.0 * denom)
        };
    }
    // Pick the sign consistent with the antisymmetric part.
    let dot: f64 = axis.iter().zip(&vee).map(|(a, v)| a * v).sum();
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    [sign * theta * axis[0], sign * theta * axis[1], sign * theta * axis[2]]
}

/// Differentiable rotation matrix `(3,3)` of an axis-angle `(3,)`.
pub fn so3_exp_var(omega: Var<'_>) -> Result<Var<'_>> {
    let o = omega.value();
    if o.numel() != 3 {
        return dim_err(format!("axis-angle needs 3 values, got {}", o.numel()));
    }
    let w = [o.data()[0], o.data()[1], o.data()[2]];
    let (r, dr) = so3_exp_jacobian(&w);
    let value = Tensor::new(vec![3, 3], r.iter().flatten().copied().collect())?;
    let shape = o.shape().to_vec();
    Ok(omega.tape().push_op(value, &[omega], move |g, _| {
        let gd = g.data();
        let grad: Vec<f64> = dr
            .iter()
            .map(|di| {
                di.iter()
                    .flatten()
                    .zip(gd)
                    .map(|(d, g)| d * g)
                    .sum()
            })
            .collect();
        vec![Some(Tensor::new(shape.clone(), grad).expect("3 values"))]
    }))
}

/// Rigid transform in matrix form: `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub r: Mat3,
    pub t: Vec3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        r: IDENTITY3,
        t: [0.0; 3],
    };

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        let r = mat_mul(&self.r, &other.r);
        let rt = mat_vec(&self.r, &other.t);
        Rigid {
            r,
            t: [rt[0] + self.t[0], rt[1] + self.t[1], rt[2] + self.t[2]],
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = transpose(&self.r);
        let t = mat_vec(&rt, &self.t);
        Rigid {
            r: rt,
            t: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let p = mat_vec(&self.r, x);
        [p[0] + self.t[0], p[1] + self.t[1], p[2] + self.t[2]]
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[i * 4..i * 4 + 3].copy_from_slice(&self.r[i]);
            out[i * 4 + 3] = self.t[i];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Rigid {
        let mut r = [[0.0; 3]; 3];
        let mut t = [0.0; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&v[i * 4..i * 4 + 3]);
            t[i] = v[i * 4 + 3];
        }
        Rigid { r, t }
    }

    /// Largest entrywise difference of the 3x4 matrices.
    pub fn max_abs_diff(&self, other: &Rigid) -> f64 {
        self.to_row_major()
            .iter()
            .zip(other.to_row_major())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Six-degree-of-freedom pose: axis-angle rotation plus translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub omega: Vec3,
    pub t: Vec3,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(omega: Vec3, t: Vec3) -> Self {
        Self { omega, t }
    }

    pub fn rotation(&self) -> Mat3 {
        so3_exp(&self.omega)
    }

    pub fn to_rigid(&self) -> Rigid {
        Rigid {
            r: self.rotation(),
            t: self.t,
        }
    }

    pub fn from_rigid(rigid: &Rigid) -> Self {
        Self {
            omega: so3_log(&rigid.r),
            t: rigid.t,
        }
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        Self::from_rigid(&self.to_rigid().compose(&other.to_rigid()))
    }

    pub fn inverse(&self) -> PoseSE3 {
        Self::from_rigid(&self.to_rigid().inverse())
    }

    /// `[omega, t]`, the optimizer's parameter layout.
    pub fn to_params(&self) -> Tensor {
        Tensor::from_vec(vec![
            self.omega[0],
            self.omega[1],
            self.omega[2],
            self.t[0],
            self.t[1],
            self.t[2],
        ])
    }

    pub fn from_params(p: &[f64]) -> Result<Self> {
        match p {
            &[a, b, c, x, y, z] => Ok(Self::new([a, b, c], [x, y, z])),
            _ => dim_err(format!("pose needs 6 values, got {}", p.len())),
        }
    }
}

/// A sampling grid plus the mask of pixels whose projection landed in
/// front of the source camera.
pub struct WarpField<'t> {
    pub grid: Var<'t>,
    /// (1,H,W) with 1 for valid pixels, 0 where the projected depth was
    /// clamped.
    pub valid: Tensor,
}

/// Differentiable reprojection of every target pixel into the source view.
///
/// * `depth` - (1,H,W) strictly positive target depth.
/// * `k_px` - pixel-unit `(fx, fy, cx, cy)`.
/// * `rot` - (3,3) rotation target -> source; `trans` - (3,) translation.
pub fn reproject<'t>(
    depth: Var<'t>,
    k_px: Var<'t>,
    rot: Var<'t>,
    trans: Var<'t>,
) -> Result<WarpField<'t>> {
    let dv = depth.value();
    let (c, h, w) = dv.dims3()?;
    if c != 1 {
        return dim_err(format!("depth must have one channel, got {c}"));
    }
    if dv.data().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return domain_err("depth must be strictly positive and finite");
    }
    let kv = k_px.value();
    let rv = rot.value();
    let tv = trans.value();
    if kv.numel() != 4 || rv.numel() != 9 || tv.numel() != 3 {
        return dim_err("reproject needs k (4), rotation (3x3) and translation (3)");
    }
    let (fx, fy, cx, cy) = (kv.data()[0], kv.data()[1], kv.data()[2], kv.data()[3]);
    let r = rv.data().to_vec();
    let t = tv.data().to_vec();
    let n = h * w;
    let mut grid = vec![0.0; 2 * n];
    let mut valid = vec![1.0; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let d = dv.data()[p];
            let a = (x as f64 - cx) / fx;
            let b = (y as f64 - cy) / fy;
            let pt = [
                d * (r[0] * a + r[1] * b + r[2]) + t[0],
                d * (r[3] * a + r[4] * b + r[5]) + t[1],
                d * (r[6] * a + r[7] * b + r[8]) + t[2],
            ];
            let z = if pt[2] > MIN_PROJECTED_DEPTH {
                pt[2]
            } else {
                valid[p] = 0.0;
                MIN_PROJECTED_DEPTH
            };
            grid[p] = fx * pt[0] / z + cx;
            grid[n + p] = fy * pt[1] / z + cy;
        }
    }
    let valid = Tensor::new(vec![1, h, w], valid)?;
    let valid_c = valid.clone();
    let value = Tensor::new(vec![2, h, w], grid)?;
    let grid = depth
        .tape()
        .push_op(value, &[depth, k_px, rot, trans], move |g, needs| {
            let gd = g.data();
            let mut g_depth = vec![0.0; n];
            let mut g_k = [0.0; 4];
            let mut g_r = [0.0; 9];
            let mut g_t = [0.0; 3];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let (gu, gv) = (gd[p], gd[n + p]);
                    if gu == 0.0 && gv == 0.0 {
                        continue;
                    }
                    let d = dv.data()[p];
                    let a = (x as f64 - cx) / fx;
                    let b = (y as f64 - cy) / fy;
                    let ray = [a, b, 1.0];
                    let rx = [
                        r[0] * a + r[1] * b + r[2],
                        r[3] * a + r[4] * b + r[5],
                        r[6] * a + r[7] * b + r[8],
                    ];
                    let pt = [d * rx[0] + t[0], d * rx[1] + t[1], d * rx[2] + t[2]];
                    let ok = valid_c.data()[p] > 0.0;
                    let z = if ok { pt[2] } else { MIN_PROJECTED_DEPTH };
                    let g_pt = [
                        gu * fx / z,
                        gv * fy / z,
                        if ok {
                            -(gu * fx * pt[0] + gv * fy * pt[1]) / (z * z)
                        } else {
                            0.0
                        },
                    ];
                    // Projection terms.
                    g_k[0] += gu * pt[0] / z;
                    g_k[1] += gv * pt[1] / z;
                    g_k[2] += gu;
                    g_k[3] += gv;
                    for i in 0..3 {
                        g_t[i] += g_pt[i];
                        for j in 0..3 {
                            g_r[i * 3 + j] += g_pt[i] * d * ray[j];
                        }
                    }
                    // Back through the rotation to the lifted point d * ray.
                    let g_x = [
                        r[0] * g_pt[0] + r[3] * g_pt[1] + r[6] * g_pt[2],
                        r[1] * g_pt[0] + r[4] * g_pt[1] + r[7] * g_pt[2],
                        r[2] * g_pt[0] + r[5] * g_pt[1] + r[8] * g_pt[2],
                    ];
                    g_depth[p] = g_x[0] * a + g_x[1] * b + g_x[2];
                    let ga = g_x[0] * d;
                    let gb = g_x[1] * d;
                    g_k[0] -= ga * a / fx;
                    g_k[2] -= ga / fx;
                    g_k[1] -= gb * b / fy;
                    g_k[3] -= gb / fy;
                }
            }
            vec![
                needs[0].then(|| Tensor::new(vec![1, h, w], g_depth).expect("depth shape")),
                needs[1].then(|| Tensor::from_vec(g_k.to_vec())),
                needs[2].then(|| Tensor::new(vec![3, 3], g_r.to_vec()).expect("3x3")),
                needs[3].then(|| Tensor::new(vec![3], g_t.to_vec()).expect("3 values")),
            ]
        });
    Ok(WarpField { grid, valid })
}

/// Warp field for a target depth map, raw intrinsics `(4,)` and pose
/// parameters `(6,) = [omega, t]` mapping target to source coordinates.
pub fn warp_grid<'t>(
    depth: Var<'t>,
    intr_raw: Var<'t>,
    pose: Var<'t>,
    width: usize,
    height: usize,
) -> Result<WarpField<'t>> {
    let (_, h, w) = depth.value().dims3()?;
    if (h, w) != (height, width) {
        return dim_err(format!(
            "depth is {h}x{w} but intrinsics refer to {height}x{width}"
        ));
    }
    if pose.numel() != 6 {
        return dim_err(format!("pose needs 6 values, got {}", pose.numel()));
    }
    let k_px = intrinsics_pixels(intr_raw, width, height)?;
    let rot = so3_exp_var(pose.slice(0, 3)?)?;
    let trans = pose.slice(3, 3)?;
    reproject(depth, k_px, rot, trans)
}

/// Convenience wrapper over [`warp_grid`] for fixed (non-differentiated)
/// inputs. Returns the grid tensor and the validity mask.
pub fn warp_grid_fixed(
    depth: &Tensor,
    intr: &Intrinsics,
    pose: &PoseSE3,
) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = depth.dims3()?;
    let tape = Tape::new();
    let field = warp_grid(
        tape.constant(depth.clone()),
        tape.constant(intr.to_raw()),
        tape.constant(pose.to_params()),
        w,
        h,
    )?;
    let grid = (*field.grid.value()).clone();
    Ok((grid, field.valid))
}

/// Reconstructs the target view by sampling the source image along `grid`.
pub fn synthesize_view<'t>(source: Var<'t>, grid: Var<'t>) -> Result<Var<'t>> {
    source.bilinear_sample(grid)
}
