//! File formats: PFM depth maps, PPM images, trajectory files and the
//! `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::camera::{NormalizedIntrinsics, Rigid, Vec3};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::{AdamConfig, LrSchedule, SfmOptions};
use crate::scene::{GeometryKind, SceneConfig};
use crate::subpixel::DepthRange;
use crate::tensor::Tensor;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Splits a binary header into whitespace-separated tokens, skipping `#`
/// comments. Returns the tokens and the offset just past the single
/// whitespace byte that ends the last one.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return format_err("truncated header");
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return format_err("header is not followed by data");
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => format_err(format!("invalid image dimension '{tok}'")),
    }
}

/// Single-channel PFM bytes; rows are stored bottom-up as little-endian
/// `f32`.
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = map.dims3()?;
    if c != 1 {
        return format_err(format!("PFM maps have one channel, got {c}"));
    }
    if !map.all_finite() {
        return format_err("cannot store non-finite values in PFM");
    }
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.at3(0, y, x) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    match tok[0].as_str() {
        "Pf" => {}
        "PF" => return format_err("colour PFM is not supported"),
        other => return format_err(format!("not a PFM file (magic '{other}')")),
    }
    let w = parse_dim(&tok[1])?;
    let h = parse_dim(&tok[2])?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::Format(format!("invalid PFM scale '{}'", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return format_err("PFM scale must be non-zero");
    }
    let little = scale < 0.0;
    let data = &bytes[offset..];
    if data.len() != w * h * 4 {
        return format_err(format!("expected {} data bytes, found {}", w * h * 4, data.len()));
    }
    let mut out = Tensor::zeros(&[1, h, w]);
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (i / w, i % w);
        out.set3(0, h - 1 - row, x, f64::from(v));
    }
    Ok(out)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pfm(map)?)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pfm(&fs::read(path)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 bytes of a `(3,H,W)` image in `[0,1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return format_err(format!("PPM images have three channels, got {c}"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(image.at3(ch, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    if tok[0] != "P6" {
        return format_err(format!("not a binary PPM (magic '{}')", tok[0]));
    }
    let w = parse_dim(&tok[1])?;
    let h = parse_dim(&tok[2])?;
    if tok[3] != "255" {
        return format_err(format!("unsupported maxval {}", tok[3]));
    }
    let data = &bytes[offset..];
    if data.len() != w * h * 3 {
        return format_err(format!("expected {} data bytes, found {}", w * h * 3, data.len()));
    }
    Ok(Tensor::from_fn3(3, h, w, |c, y, x| {
        f64::from(data[(y * w + x) * 3 + c]) / 255.0
    }))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

/// Shortest decimal that survives rounding to 12 significant digits.
fn format_number(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float");
    if rounded == 0.0 {
        "0".into()
    } else {
        format!("{rounded}")
    }
}

/// One line per pose: the row-major 3x4 `[R | t]` matrix.
pub fn format_trajectory(poses: &[Rigid]) -> String {
    let mut out = String::new();
    for p in poses {
        let line: Vec<String> = p.to_row_major().iter().map(|&v| format_number(v)).collect();
        writeln!(out, "{}", line.join(" ")).expect("write to string");
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Rigid>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: invalid number '{t}'", i + 1)))
            })
            .collect::<Result<_>>()?;
        let Ok(arr) = <[f64; 12]>::try_from(vals.as_slice()) else {
            return format_err(format!("line {}: expected 12 numbers, got {}", i + 1, vals.len()));
        };
        poses.push(Rigid::from_row_major(&arr));
    }
    Ok(poses)
}

pub fn write_trajectory(path: impl AsRef<Path>, poses: &[Rigid]) -> Result<()> {
    fs::write(path, format_trajectory(poses))?;
    Ok(())
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<Rigid>> {
    parse_trajectory(&fs::read_to_string(path)?)
}

/// Plain-text experiment configuration. Every key is optional and falls
/// back to its default; unknown keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometryKind,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    /// Ground-truth intrinsics of the synthetic camera.
    pub intrinsics: NormalizedIntrinsics,
    pub translation_step: Vec3,
    pub translation_curve: Vec3,
    pub rotation_step: Vec3,
    pub rotation_curve: Vec3,
    pub texels_per_unit: f64,
    pub loss: LossConfig,
    pub depth_range: DepthRange,
    pub steps: usize,
    pub schedule: LrSchedule,
    pub with_uncertainty: bool,
    pub learn_intrinsics: bool,
    pub jitter: f64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let opts = SfmOptions::default();
        Self {
            seed: scene.seed,
            geometry: scene.geometry,
            width: scene.width,
            height: scene.height,
            n_frames: scene.n_frames,
            intrinsics: scene.intrinsics,
            translation_step: scene.translation_step,
            translation_curve: scene.translation_curve,
            rotation_step: scene.rotation_step,
            rotation_curve: scene.rotation_curve,
            texels_per_unit: scene.texels_per_unit,
            loss: LossConfig::default(),
            depth_range: DepthRange::default(),
            steps: 3000,
            schedule: opts.schedule,
            with_uncertainty: opts.with_uncertainty,
            learn_intrinsics: opts.learn_intrinsics,
            jitter: opts.jitter,
            output_dir: "out".into(),
        }
    }
}

/// Every key in serialization order.
pub const CONFIG_KEYS: [&str; 32] = [
    "seed",
    "geometry",
    "width",
    "height",
    "n_frames",
    "fx",
    "fy",
    "cx",
    "cy",
    "translation_step",
    "translation_curve",
    "rotation_step",
    "rotation_curve",
    "texels_per_unit",
    "alpha",
    "lambda",
    "smooth_scale_decay",
    "ssim_c1",
    "ssim_c2",
    "sigma_min",
    "uncert_offset",
    "n_scales",
    "min_depth",
    "max_depth",
    "steps",
    "lr",
    "lr_decayed",
    "lr_boundary",
    "with_uncertainty",
    "learn_intrinsics",
    "jitter",
    "output_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

fn parse_vec3(key: &str, value: &str) -> Result<Vec3> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse_value(key, p.trim()))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(parts.as_slice())
        .map_err(|_| Error::Config(format!("key '{key}' needs three comma-separated numbers")))
}

fn vec3_string(v: &Vec3) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "geometry" => self.geometry = v.parse()?,
            "width" => self.width = parse_value(key, v)?,
            "height" => self.height = parse_value(key, v)?,
            "n_frames" => self.n_frames = parse_value(key, v)?,
            "fx" => self.intrinsics.fx = parse_value(key, v)?,
            "fy" => self.intrinsics.fy = parse_value(key, v)?,
            "cx" => self.intrinsics.cx = parse_value(key, v)?,
            "cy" => self.intrinsics.cy = parse_value(key, v)?,
            "translation_step" => self.translation_step = parse_vec3(key, v)?,
            "translation_curve" => self.translation_curve = parse_vec3(key, v)?,
            "rotation_step" => self.rotation_step = parse_vec3(key, v)?,
            "rotation_curve" => self.rotation_curve = parse_vec3(key, v)?,
            "texels_per_unit" => self.texels_per_unit = parse_value(key, v)?,
            "alpha" => self.loss.alpha = parse_value(key, v)?,
            "lambda" => self.loss.lambda = parse_value(key, v)?,
            "smooth_scale_decay" => self.loss.smooth_scale_decay = parse_bool(key, v)?,
            "ssim_c1" => self.loss.ssim_c1 = parse_value(key, v)?,
            "ssim_c2" => self.loss.ssim_c2 = parse_value(key, v)?,
            "sigma_min" => self.loss.sigma_min = parse_value(key, v)?,
            "uncert_offset" => self.loss.uncert_offset = parse_value(key, v)?,
            "n_scales" => self.loss.n_scales = parse_value(key, v)?,
            "min_depth" => self.depth_range.min_depth = parse_value(key, v)?,
            "max_depth" => self.depth_range.max_depth = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "lr" => self.schedule.base = parse_value(key, v)?,
            "lr_decayed" => self.schedule.decayed = parse_value(key, v)?,
            "lr_boundary" => self.schedule.boundary = parse_value(key, v)?,
            "with_uncertainty" => self.with_uncertainty = parse_bool(key, v)?,
            "learn_intrinsics" => self.learn_intrinsics = parse_bool(key, v)?,
            "jitter" => self.jitter = parse_value(key, v)?,
            "output_dir" => self.output_dir = v.to_string(),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "geometry" => self.geometry.to_string(),
            "width" => self.width.to_string(),
            "height" => self.height.to_string(),
            "n_frames" => self.n_frames.to_string(),
            "fx" => self.intrinsics.fx.to_string(),
            "fy" => self.intrinsics.fy.to_string(),
            "cx" => self.intrinsics.cx.to_string(),
            "cy" => self.intrinsics.cy.to_string(),
            "translation_step" => vec3_string(&self.translation_step),
            "translation_curve" => vec3_string(&self.translation_curve),
            "rotation_step" => vec3_string(&self.rotation_step),
            "rotation_curve" => vec3_string(&self.rotation_curve),
            "texels_per_unit" => self.texels_per_unit.to_string(),
            "alpha" => self.loss.alpha.to_string(),
            "lambda" => self.loss.lambda.to_string(),
            "smooth_scale_decay" => self.loss.smooth_scale_decay.to_string(),
            "ssim_c1" => self.loss.ssim_c1.to_string(),
            "ssim_c2" => self.loss.ssim_c2.to_string(),
            "sigma_min" => self.loss.sigma_min.to_string(),
            "uncert_offset" => self.loss.uncert_offset.to_string(),
            "n_scales" => self.loss.n_scales.to_string(),
            "min_depth" => self.depth_range.min_depth.to_string(),
            "max_depth" => self.depth_range.max_depth.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => self.schedule.base.to_string(),
            "lr_decayed" => self.schedule.decayed.to_string(),
            "lr_boundary" => self.schedule.boundary.to_string(),
            "with_uncertainty" => self.with_uncertainty.to_string(),
            "learn_intrinsics" => self.learn_intrinsics.to_string(),
            "jitter" => self.jitter.to_string(),
            "output_dir" => self.output_dir.clone(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", i + 1)));
            };
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in [`CONFIG_KEYS`] order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let v = self.get(key).expect("listed key");
            writeln!(out, "{key} = {v}").expect("write to string");
        }
        out
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            seed: self.seed,
            geometry: self.geometry,
            width: self.width,
            height: self.height,
            intrinsics: self.intrinsics,
            n_frames: self.n_frames,
            translation_step: self.translation_step,
            translation_curve: self.translation_curve,
            rotation_step: self.rotation_step,
            rotation_curve: self.rotation_curve,
            texels_per_unit: self.texels_per_unit,
        }
    }

    pub fn sfm_options(&self) -> SfmOptions {
        SfmOptions {
            with_uncertainty: self.with_uncertainty,
            learn_intrinsics: self.learn_intrinsics,
            jitter: self.jitter,
            seed: self.seed,
            schedule: self.schedule,
            adam: AdamConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let map = Tensor::new(vec![1, 2, 2], vec![0.1f32 as f64, 80.0, 1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&map).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        assert_eq!(decode_pfm(&bytes).unwrap(), map);
        // Bottom row first.
        assert_eq!(bytes[12..16], 1.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_rejects() {
        let mut bytes = encode_pfm(&Tensor::ones(&[1, 1, 1])).unwrap();
        bytes[1] = b'F';
        assert!(matches!(decode_pfm(&bytes), Err(Error::Format(_))));
        assert!(encode_pfm(&Tensor::full(&[1, 1, 1], f64::NAN)).is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0").is_err());
    }

    #[test]
    fn pfm_big_endian() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().item(), 2.5);
    }

    #[test]
    fn ppm_round_trip() {
        let img = Tensor::from_fn3(3, 2, 3, |c, y, x| (c + y + x) as f64 / 5.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 510.0);
        let zero = encode_ppm(&Tensor::zeros(&[3, 1, 1])).unwrap();
        assert_eq!(&zero[zero.len() - 3..], &[0, 0, 0]);
        let one = encode_ppm(&Tensor::ones(&[3, 1, 1])).unwrap();
        assert_eq!(one[one.len() - 1], 255);
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn identity_trajectory_line() {
        assert_eq!(format_trajectory(&[Rigid::IDENTITY]), "1 0 0 0 0 1 0 0 0 0 1 0\n");
        assert!(parse_trajectory("1 0 0\n").is_err());
        assert_eq!(parse_trajectory("\n1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap().len(), 1);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = RunConfig::parse("seed = 3\ngeometry = slanted # comment\nrotation_step = 0.1, 0, -0.2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.geometry, GeometryKind::Slanted);
        assert_eq!(cfg.rotation_step, [0.1, 0.0, -0.2]);
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("width = -3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just text"), Err(Error::Config(_))));
        for key in CONFIG_KEYS {
            assert!(RunConfig::default().get(key).is_some(), "{key}");
        }
    }
}
