//! Procedural static scenes with exact ground truth.
//!
//! A scene is one or two textured planes viewed by a pinhole camera moving
//! along a smooth trajectory. Depth comes from analytic ray/plane
//! intersection and colour from a value-noise texture anchored to the
//! world x/y coordinates of the hit point, so the rendered frames obey the
//! brightness-constancy assumption exactly up to resampling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::bilinear_at;
use crate::camera::{mat_vec, Intrinsics, NormalizedIntrinsics, PoseSE3, Rigid, Vec3};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lattice cell of the coarsest noise octave, in texels.
const NOISE_BASE_CELL: usize = 32;
const NOISE_OCTAVES: usize = 4;
/// Extra texels kept around the visible area.
const TEXTURE_MARGIN: f64 = 4.0;

/// Multi-octave value noise, each channel stretched to `[0, 1]`.
pub fn gen_texture(seed: u64, width: usize, height: usize) -> Result<Tensor> {
    if width == 0 || height == 0 {
        return Err(Error::Scene("texture size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(&[3, height, width]);
    for c in 0..3 {
        let mut plane = vec![0.0; width * height];
        let mut amp = 1.0;
        for o in 0..NOISE_OCTAVES {
            let cell = (NOISE_BASE_CELL >> o).max(2) as f64;
            let gw = (width as f64 / cell).ceil() as usize + 2;
            let gh = (height as f64 / cell).ceil() as usize + 2;
            let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
            for y in 0..height {
                let fy = y as f64 / cell;
                let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
                for x in 0..width {
                    let fx = x as f64 / cell;
                    let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                    let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    plane[y * width + x] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
            amp *= 0.5;
        }
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (i, v) in plane.into_iter().enumerate() {
            out.data_mut()[c * width * height + i] = (v - lo) / span;
        }
    }
    Ok(out)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// The plane `normal · X = offset` with a unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Plane through `point` with the (not necessarily unit) `normal`.
    pub fn through(point: Vec3, normal: Vec3) -> Result<Self> {
        let len = dot(&normal, &normal).sqrt();
        if !(len > 0.0) {
            return Err(Error::Scene("plane normal must be non-zero".into()));
        }
        let n = normal.map(|v| v / len);
        Ok(Self {
            normal: n,
            offset: dot(&n, &point),
        })
    }

    /// Ray parameter of the hit, if the ray meets the plane in front of
    /// its origin.
    fn hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let denom = dot(&self.normal, dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - dot(&self.normal, origin)) / denom;
        (t > 0.0).then_some(t)
    }
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    FrontoParallel,
    Slanted,
    Fold,
    Step,
}

impl GeometryKind {
    pub const ALL: [GeometryKind; 4] = [Self::FrontoParallel, Self::Slanted, Self::Fold, Self::Step];

    /// Default geometry of this kind, centered two units ahead of the
    /// world origin.
    pub fn build(self) -> Geometry {
        let center = [0.0, 0.0, 2.0];
        match self {
            Self::FrontoParallel => Geometry::FrontoParallel { depth: 2.0 },
            Self::Slanted => Geometry::Slanted(
                Plane::through(center, [0.12, -0.08, 1.0]).expect("non-zero normal"),
            ),
            Self::Fold => Geometry::Fold([
                Plane::through(center, [0.14, 0.05, 1.0]).expect("non-zero normal"),
                Plane::through(center, [-0.12, -0.04, 1.0]).expect("non-zero normal"),
            ]),
            Self::Step => Geometry::Step {
                near: Plane::through([0.0, 0.0, 1.9], [0.06, 0.04, 1.0]).expect("non-zero normal"),
                far: Plane::through([0.0, 0.0, 2.15], [0.06, 0.04, 1.0]).expect("non-zero normal"),
                edge_x: -0.5,
            },
        }
    }
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FrontoParallel => "fronto-parallel",
            Self::Slanted => "slanted",
            Self::Fold => "fold",
            Self::Step => "step",
        })
    }
}

impl FromStr for GeometryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fronto-parallel" | "fronto" => Ok(Self::FrontoParallel),
            "slanted" => Ok(Self::Slanted),
            "fold" | "two-plane" => Ok(Self::Fold),
            "step" => Ok(Self::Step),
            other => Err(Error::Config(format!("unknown geometry '{other}'"))),
        }
    }
}

/// World surface seen by the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    /// The plane `z = depth`.
    FrontoParallel { depth: f64 },
    Slanted(Plane),
    /// Two planes meeting at a crease. The visible surface is the nearer
    /// of the two along every ray, so the region in front of both planes
    /// is convex and nothing is occluded.
    Fold([Plane; 2]),
    /// A near plane covering world `x >= edge_x` in front of a far plane
    /// covering `x < edge_x`. Cameras must stay on the near side of the
    /// edge, where the riser joining the two is never visible; the far
    /// plane is partly hidden behind the near plane's edge.
    Step { near: Plane, far: Plane, edge_x: f64 },
}

impl Geometry {
    pub fn planes(&self) -> Vec<Plane> {
        match self {
            Self::FrontoParallel { depth } => vec![Plane {
                normal: [0.0, 0.0, 1.0],
                offset: *depth,
            }],
            Self::Slanted(p) => vec![*p],
            Self::Fold(ps) => ps.to_vec(),
            Self::Step { near, far, .. } => vec![*near, *far],
        }
    }

    /// Nearest surface hit along a ray.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if let Self::Step { near, far, edge_x } = self {
            let on = |t: f64| origin[0] + t * dir[0];
            let hits = [
                near.hit(origin, dir).filter(|&t| on(t) >= *edge_x),
                far.hit(origin, dir).filter(|&t| on(t) < *edge_x),
            ];
            return hits.into_iter().flatten().min_by(f64::total_cmp);
        }
        self.planes()
            .iter()
            .filter_map(|p| p.hit(origin, dir))
            .min_by(f64::total_cmp)
    }

    /// Whether a camera at `point` sees the surface without looking
    /// through it.
    fn in_free_space(&self, point: &Vec3) -> bool {
        let beside_step = match self {
            Self::Step { edge_x, .. } => point[0] > *edge_x,
            _ => true,
        };
        beside_step && self.planes().iter().all(|p| dot(&p.normal, point) < p.offset)
    }
}

/// Everything needed to regenerate a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub geometry: GeometryKind,
    pub width: usize,
    pub height: usize,
    pub intrinsics: NormalizedIntrinsics,
    pub n_frames: usize,
    /// Camera translation per frame.
    pub translation_step: Vec3,
    /// Quadratic part of the camera path, so the baselines from the middle
    /// frame to its neighbours are not collinear.
    pub translation_curve: Vec3,
    /// Linear part of the camera rotation per frame (axis-angle).
    pub rotation_step: Vec3,
    /// Quadratic part of the rotation, so consecutive relative rotations
    /// differ in axis.
    pub rotation_curve: Vec3,
    pub texels_per_unit: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            geometry: GeometryKind::Step,
            width: 128,
            height: 96,
            intrinsics: NormalizedIntrinsics {
                fx: 0.54,
                fy: 0.54,
                cx: 0.5,
                cy: 0.5,
            },
            n_frames: 3,
            translation_step: [0.3, 0.15, 0.05],
            translation_curve: [0.0; 3],
            rotation_step: [0.03, 0.05, 0.01],
            rotation_curve: [0.0; 3],
            texels_per_unit: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub geometry: Geometry,
    pub texture: Tensor,
    /// World x/y mapped to texel (0, 0).
    pub texture_origin: [f64; 2],
    pub intrinsics: Intrinsics,
    /// Camera-to-world poses.
    pub trajectory: Vec<PoseSE3>,
}

impl SyntheticScene {
    pub fn new(config: SceneConfig) -> Result<Self> {
        let SceneConfig { width, height, .. } = config;
        if width == 0 || height == 0 {
            return Err(Error::Scene("image size must be positive".into()));
        }
        if config.n_frames == 0 {
            return Err(Error::Scene("a scene needs at least one frame".into()));
        }
        if !(config.texels_per_unit > 0.0) {
            return Err(Error::Scene("texels_per_unit must be positive".into()));
        }
        let n = config.intrinsics;
        if !(n.fx > 0.0 && n.fy > 0.0) {
            return Err(Error::Scene("focal lengths must be positive".into()));
        }
        let geometry = config.geometry.build();
        let center = (config.n_frames - 1) as f64 / 2.0;
        let trajectory: Vec<PoseSE3> = (0..config.n_frames)
            .map(|i| {
                let k = i as f64 - center;
                let omega = std::array::from_fn(|a| {
                    k * config.rotation_step[a] + k * k * config.rotation_curve[a]
                });
                let t = std::array::from_fn(|a| k * config.translation_step[a] + k * k * config.translation_curve[a]);
                PoseSE3::new(omega, t)
            })
            .collect();
        let mut scene = Self {
            intrinsics: Intrinsics::from_normalized(n.fx, n.fy, n.cx, n.cy),
            geometry,
            texture: Tensor::zeros(&[3, 1, 1]),
            texture_origin: [0.0; 2],
            trajectory,
            config,
        };

        // Size the texture to the union of visible surface points.
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for i in 0..scene.trajectory.len() {
            for p in scene.trace(i)?.points {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        let tpu = scene.config.texels_per_unit;
        let tw = ((hi[0] - lo[0]) * tpu + 2.0 * TEXTURE_MARGIN).ceil() as usize + 1;
        let th = ((hi[1] - lo[1]) * tpu + 2.0 * TEXTURE_MARGIN).ceil() as usize + 1;
        scene.texture_origin = [lo[0] - TEXTURE_MARGIN / tpu, lo[1] - TEXTURE_MARGIN / tpu];
        scene.texture = gen_texture(scene.config.seed, tw, th)?;
        Ok(scene)
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn n_frames(&self) -> usize {
        self.trajectory.len()
    }

    /// Camera-space depth and world hit point for every pixel of a frame.
    fn trace(&self, index: usize) -> Result<Trace> {
        let pose = self
            .trajectory
            .get(index)
            .ok_or_else(|| Error::Scene(format!("frame {index} out of range")))?
            .to_rigid();
        if !self.geometry.in_free_space(&pose.t) {
            return Err(Error::Scene(format!("camera {index} is behind the surface")));
        }
        let (w, h) = (self.width(), self.height());
        let k_inv = self.intrinsics.matrix_inverse(w, h);
        let mut depth = Vec::with_capacity(w * h);
        let mut points = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let ray_cam = mat_vec(&k_inv, &[x as f64, y as f64, 1.0]);
                let dir = mat_vec(&pose.r, &ray_cam);
                let t = self.geometry.intersect(&pose.t, &dir).ok_or_else(|| {
                    Error::Scene(format!("ray ({x}, {y}) of frame {index} misses the surface"))
                })?;
                let z = t * ray_cam[2];
                if !(z > 0.0) {
                    return Err(Error::Scene(format!("non-positive depth in frame {index}")));
                }
                depth.push(z);
                points.push(std::array::from_fn(|a| pose.t[a] + t * dir[a]));
            }
        }
        Ok(Trace { depth, points })
    }

    /// Renders frame `index`: the `(3,H,W)` image and `(1,H,W)` depth.
    pub fn render_frame(&self, index: usize) -> Result<(Tensor, Tensor)> {
        let trace = self.trace(index)?;
        let (w, h) = (self.width(), self.height());
        let (_, th, tw) = self.texture.dims3()?;
        let tpu = self.config.texels_per_unit;
        let mut image = Tensor::zeros(&[3, h, w]);
        for (i, p) in trace.points.iter().enumerate() {
            let u = (p[0] - self.texture_origin[0]) * tpu;
            let v = (p[1] - self.texture_origin[1]) * tpu;
            for c in 0..3 {
                let plane = &self.texture.data()[c * th * tw..(c + 1) * th * tw];
                image.data_mut()[c * w * h + i] = bilinear_at(plane, tw, th, u, v);
            }
        }
        Ok((image, Tensor::new(vec![1, h, w], trace.depth)?))
    }

    /// Pose taking points from camera `from` into camera `to`.
    pub fn relative_pose(&self, from: usize, to: usize) -> Result<PoseSE3> {
        let get = |i: usize| {
            self.trajectory
                .get(i)
                .map(PoseSE3::to_rigid)
                .ok_or_else(|| Error::Scene(format!("frame {i} out of range")))
        };
        Ok(PoseSE3::from_rigid(&get(to)?.inverse().compose(&get(from)?)))
    }
}

struct Trace {
    depth: Vec<f64>,
    points: Vec<Vec3>,
}

/// Rendered frames with their ground truth.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    pub depths: Vec<Tensor>,
    /// Camera-to-world poses.
    pub poses: Vec<Rigid>,
    pub intrinsics: Intrinsics,
}

impl Sequence {
    /// Pose of frame `i + 1` expressed in frame `i`, for each consecutive
    /// pair.
    pub fn relative_poses(&self) -> Vec<Rigid> {
        self.poses
            .windows(2)
            .map(|p| p[0].inverse().compose(&p[1]))
            .collect()
    }

    /// Consecutive `(t-1, t, t+1)` index triples.
    pub fn trios(&self) -> Vec<[usize; 3]> {
        (1..self.frames.len().saturating_sub(1))
            .map(|t| [t - 1, t, t + 1])
            .collect()
    }
}

/// Renders the first `n_frames` frames of the scene.
pub fn gen_sequence(scene: &SyntheticScene, n_frames: usize) -> Result<Sequence> {
    if n_frames < 3 {
        return Err(Error::Scene(format!("a sequence needs at least 3 frames, got {n_frames}")));
    }
    if n_frames > scene.n_frames() {
        return Err(Error::Scene(format!(
            "scene has {} frames, {n_frames} requested",
            scene.n_frames()
        )));
    }
    let mut frames = Vec::with_capacity(n_frames);
    let mut depths = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let (img, d) = scene.render_frame(i)?;
        frames.push(img);
        depths.push(d);
    }
    Ok(Sequence {
        frames,
        depths,
        poses: scene.trajectory[..n_frames].iter().map(PoseSE3::to_rigid).collect(),
        intrinsics: scene.intrinsics,
    })
}
