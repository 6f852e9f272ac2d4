//! The markpainting objective: a perceptual feature-reconstruction distance
//! plus `alpha` times the mean squared error.

mod extractor;

use std::sync::{Arc, OnceLock};

pub use extractor::FeatureExtractor;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Tensor;

/// A differentiable scalar function of an image.
pub trait Objective {
    /// Value and gradient with respect to `output`.
    fn value_and_grad(&self, output: &Image) -> Result<(f64, Tensor)>;

    fn value(&self, output: &Image) -> Result<f64> {
        Ok(self.value_and_grad(output)?.0)
    }
}

impl<F> Objective for F
where
    F: Fn(&Image) -> Result<(f64, Tensor)>,
{
    fn value_and_grad(&self, output: &Image) -> Result<(f64, Tensor)> {
        self(output)
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the MSE term; must be non-negative.
    pub alpha: f64,
    pub extractor: Arc<FeatureExtractor>,
}

impl LossConfig {
    pub fn new(alpha: f64, extractor: Arc<FeatureExtractor>) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::validation(format!("alpha {alpha} must be a finite value >= 0")));
        }
        Ok(Self { alpha, extractor })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(alpha, self.extractor.clone())
    }
}

impl Default for LossConfig {
    /// `alpha = 4` with the hermetic pyramid extractor.
    fn default() -> Self {
        static PYRAMID: OnceLock<Arc<FeatureExtractor>> = OnceLock::new();
        Self {
            alpha: 4.0,
            extractor: PYRAMID
                .get_or_init(|| Arc::new(FeatureExtractor::random_pyramid()))
                .clone(),
        }
    }
}

fn check_dims(x: &Image, y: &Image) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::DimensionMismatch {
            expected: x.dims(),
            found: y.dims(),
        });
    }
    Ok(())
}

/// Mean over all pixels and channels of `(x − y)²`.
pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    check_dims(x, y)?;
    let sq: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sq / x.data().len() as f64)
}

/// Feature-reconstruction distance: per-tap mean squared difference,
/// averaged over taps.
pub fn perceptual(x: &Image, y: &Image, fx: &FeatureExtractor) -> Result<f64> {
    check_dims(x, y)?;
    let reference = fx.features(y.tensor())?;
    fx.distance(x.tensor(), &reference)
}

/// `perceptual(x, y) + alpha · mse(x, y)`.
pub fn mark_loss(x: &Image, y: &Image, cfg: &LossConfig) -> Result<f64> {
    Ok(perceptual(x, y, &cfg.extractor)? + cfg.alpha * mse(x, y)?)
}

/// `mark_loss(·, target)` with the target features computed once.
#[derive(Debug, Clone)]
pub struct MarkObjective {
    cfg: LossConfig,
    target: Image,
    target_features: Vec<Tensor>,
}

impl MarkObjective {
    pub fn new(cfg: &LossConfig, target: &Image) -> Result<Self> {
        let target_features = cfg.extractor.features(target.tensor())?;
        Ok(Self {
            cfg: cfg.clone(),
            target: target.clone(),
            target_features,
        })
    }

    pub fn target(&self) -> &Image {
        &self.target
    }
}

impl Objective for MarkObjective {
    fn value_and_grad(&self, output: &Image) -> Result<(f64, Tensor)> {
        check_dims(output, &self.target)?;
        let (perc, mut grad) = self
            .cfg
            .extractor
            .distance_and_grad(output.tensor(), &self.target_features)?;
        let n = output.data().len() as f64;
        let mut sq = 0.0f64;
        for ((g, &o), &t) in grad
            .data_mut()
            .iter_mut()
            .zip(output.data())
            .zip(self.target.data())
        {
            let d = o as f64 - t as f64;
            sq += d * d;
            *g += (self.cfg.alpha * 2.0 * d / n) as f32;
        }
        Ok((perc + self.cfg.alpha * (sq / n), grad))
    }

    fn value(&self, output: &Image) -> Result<f64> {
        check_dims(output, &self.target)?;
        let perc = self
            .cfg
            .extractor
            .distance(output.tensor(), &self.target_features)?;
        Ok(perc + self.cfg.alpha * mse(output, &self.target)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::imaging::RngSeed;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = RngSeed(seed).rng();
        Image::from_fn(h, w, |_, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let zeros = Image::filled(4, 4, 0.0).unwrap();
        let ones = Image::filled(4, 4, 1.0).unwrap();
        assert_eq!(mse(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(mse(&zeros, &ones).unwrap(), 1.0);
        let a = Image::from_fn(1, 1, |c, _, _| [0.1, 0.2, 0.2][c]).unwrap();
        let b = Image::filled(1, 1, 0.0).unwrap();
        approx::assert_abs_diff_eq!(mse(&a, &b).unwrap(), 0.03, epsilon = 1e-8);
        assert!(mse(&a, &zeros).is_err());
    }

    #[test]
    fn perceptual_examples() {
        let fx = FeatureExtractor::random_pyramid();
        let x = random_image(16, 16, 1);
        let y = random_image(16, 16, 2);
        assert_eq!(perceptual(&x, &x, &fx).unwrap(), 0.0);
        let d = perceptual(&x, &y, &fx).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, perceptual(&y, &x, &fx).unwrap());
        let id = FeatureExtractor::identity();
        assert_eq!(perceptual(&x, &y, &id).unwrap(), mse(&x, &y).unwrap());
        let tiny = random_image(4, 4, 3);
        assert!(perceptual(&tiny, &tiny, &fx).is_err());
    }

    #[test]
    fn mark_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.alpha, 4.0);
        let x = random_image(16, 16, 4);
        let y = random_image(16, 16, 5);
        assert_eq!(mark_loss(&x, &x, &cfg).unwrap(), 0.0);

        let zero_alpha = cfg.with_alpha(0.0).unwrap();
        assert_eq!(
            mark_loss(&x, &y, &zero_alpha).unwrap(),
            perceptual(&x, &y, &cfg.extractor).unwrap()
        );
        // perceptual 0.2 + 4 · mse 0.05 = 0.4
        assert!((0.2 + 4.0 * 0.05 - 0.4f64).abs() < 1e-12);
        let p = perceptual(&x, &y, &cfg.extractor).unwrap();
        let m = mse(&x, &y).unwrap();
        approx::assert_relative_eq!(mark_loss(&x, &y, &cfg).unwrap(), p + 4.0 * m, max_relative = 1e-12);
        assert!(cfg.with_alpha(-1.0).is_err());
    }

    #[test]
    fn objective_value_matches_mark_loss() {
        let cfg = LossConfig::default();
        let x = random_image(16, 16, 6);
        let t = random_image(16, 16, 7);
        let obj = MarkObjective::new(&cfg, &t).unwrap();
        let direct = mark_loss(&x, &t, &cfg).unwrap();
        assert_eq!(obj.value(&x).unwrap(), direct);
        assert_eq!(obj.value_and_grad(&x).unwrap().0, direct);
    }

    /// Central differences in f32 with `h = 1e-3` on a 16×16 pair.
    #[test]
    fn objective_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let x = random_image(16, 16, 8).into_tensor().map(|v| 0.1 + 0.8 * v);
        let x = Image::from_tensor(x).unwrap();
        let t = random_image(16, 16, 9);
        let obj = MarkObjective::new(&cfg, &t).unwrap();
        let (_, grad) = obj.value_and_grad(&x).unwrap();
        let mut rng = RngSeed(10).rng();
        let h = 1e-3f32;
        for _ in 0..16 {
            let i = rng.random_range(0..x.data().len());
            let bump = |delta: f32| {
                let mut t = x.tensor().clone();
                t.data_mut()[i] += delta;
                obj.value(&Image::from_tensor(t).unwrap()).unwrap()
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h as f64);
            let an = grad.data()[i] as f64;
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel <= 1e-2, "coordinate {i}: fd {fd} analytic {an} rel {rel}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn loss_is_nonnegative_and_monotone_in_alpha(s1 in any::<u64>(), s2 in any::<u64>(),
                                                      a1 in 0.0f64..8.0, a2 in 0.0f64..8.0) {
            let cfg = LossConfig::default();
            let x = random_image(8, 8, s1);
            let y = random_image(8, 8, s2);
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let l_lo = mark_loss(&x, &y, &cfg.with_alpha(lo).unwrap()).unwrap();
            let l_hi = mark_loss(&x, &y, &cfg.with_alpha(hi).unwrap()).unwrap();
            prop_assert!(l_lo >= 0.0);
            prop_assert!(l_lo <= l_hi);
            prop_assert_eq!(mark_loss(&x, &x, &cfg).unwrap(), 0.0);
        }
    }
}
