//! Finite-difference gradient verification.

use super::rng::SeedStream;
use rand::seq::SliceRandom;

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates (seeded sample); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, max_coords: None, seed: 0 }
    }
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    i: usize,
    step: f64,
) -> f64 {
    let mut probe = params.to_vec();
    probe[i] = params[i] + step;
    let plus = f(&probe);
    probe[i] = params[i] - step;
    let minus = f(&probe);
    (plus - minus) / (2.0 * step)
}

/// Compares `analytic` against central differences of `f` at `params` and
/// returns the worst relative error over the checked coordinates.
///
/// The error for one coordinate is `|a - n| / max(|a|, |n|, 1e-3)`; the floor
/// makes near-zero gradients compare absolutely instead of amplifying
/// finite-difference noise.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    config: &GradCheckConfig,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    let mut coords: Vec<usize> = (0..params.len()).collect();
    if let Some(limit) = config.max_coords {
        if limit < coords.len() {
            let mut rng = SeedStream::new(config.seed).substream("gradcheck").rng();
            coords.shuffle(&mut rng);
            coords.truncate(limit);
        }
    }
    let mut worst = 0.0_f64;
    for &i in &coords {
        let numeric = central_difference(f, params, i, config.step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
