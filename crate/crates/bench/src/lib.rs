//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uncal_sfm::experiment::{SOURCE_FRAMES, TARGET_FRAME};
use uncal_sfm::io::RunConfig;
use uncal_sfm::optim::SfmProblem;
use uncal_sfm::scene::{gen_sequence, SyntheticScene};
use uncal_sfm::{Result, Tensor};

/// Uniform noise in `[0, 1)`.
pub fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).expect("shape matches data")
}

/// The default recovery problem at its initial state, at `width`x`height`.
pub fn recovery_problem(width: usize, height: usize) -> Result<SfmProblem> {
    let cfg = RunConfig {
        width,
        height,
        ..RunConfig::default()
    };
    let scene = SyntheticScene::new(cfg.scene_config())?;
    let seq = gen_sequence(&scene, 3)?;
    SfmProblem::new(
        seq.frames[TARGET_FRAME].clone(),
        SOURCE_FRAMES.iter().map(|&i| seq.frames[i].clone()).collect(),
        cfg.loss.clone(),
        cfg.depth_range,
        cfg.sfm_options(),
    )
}
