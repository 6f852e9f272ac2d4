//! The differentiable-inpainter contract.
//!
//! A model only supplies the raw fill for a masked input. Compositing (known
//! pixels pass through untouched, the hole takes the clamped fill) and the
//! chain rule back to the unmasked image live here, so every adapter gets
//! the known-pixel invariant and gradient plumbing for free.

mod checkpoint;
mod registry;
mod toy;
mod train;

use std::fmt;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC};
pub use registry::{AdapterFactory, AdapterRegistry};
pub use toy::{ToyInpainter, ToyInpainterConfig};
pub use train::{hole_psnr, train_on_images, train_toy, TrainingConfig, TrainingReport};

use crate::error::{Error, Result};
use crate::imaging::{clamp_unit, masked_input, Image, Mask};
use crate::loss::Objective;
use crate::nn::Tensor;

/// Maps the gradient with respect to a model's raw fill to the gradient
/// with respect to the masked RGB input.
pub type Pullback<'a> = Box<dyn FnOnce(&Tensor) -> Result<Tensor> + 'a>;

/// An inpainting network `f`.
pub trait InpainterModel: Send + Sync {
    fn identifier(&self) -> &str;

    /// Whether [`InpainterModel::fill_with_pullback`] is available.
    fn differentiable(&self) -> bool;

    /// Rejects input sizes the network cannot process.
    fn check_dimensions(&self, height: usize, width: usize) -> Result<()>;

    /// Raw 3-channel fill for `masked` (hole already zeroed) and its mask.
    fn fill(&self, masked: &Image, mask: &Mask) -> Result<Tensor>;

    /// Raw fill plus its pullback.
    fn fill_with_pullback<'a>(
        &'a self,
        masked: &Image,
        mask: &Mask,
    ) -> Result<(Tensor, Pullback<'a>)> {
        let _ = (masked, mask);
        Err(Error::NotDifferentiable(self.identifier().to_string()))
    }
}

impl fmt::Debug for dyn InpainterModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InpainterModel({})", self.identifier())
    }
}

fn check_inputs(model: &dyn InpainterModel, img: &Image, mask: &Mask) -> Result<()> {
    img.ensure_same_dims(mask.dims())?;
    model.check_dimensions(img.height(), img.width())
}

fn check_fill(model: &dyn InpainterModel, raw: &Tensor, dims: (usize, usize)) -> Result<()> {
    if raw.shape() != (3, dims.0, dims.1) {
        return Err(Error::Numerical(format!(
            "model '{}' returned a {:?} fill for a {}x{} input",
            model.identifier(),
            raw.shape(),
            dims.0,
            dims.1
        )));
    }
    Ok(())
}

/// `img ⊙ M + clamp(raw) ⊙ (1 − M)`
fn composite(img: &Image, raw: &Tensor, mask: &Mask) -> Image {
    let mut out = img.tensor().clone();
    let known = mask.values();
    for c in 0..3 {
        for ((o, &r), &m) in out.plane_mut(c).iter_mut().zip(raw.plane(c)).zip(known) {
            if m == 0 {
                *o = clamp_unit(r);
            }
        }
    }
    Image::from_tensor_clamped(out)
}

/// Runs the model on `img ⊙ mask` and composites the fill into the hole.
/// Known pixels of the result equal `img` exactly.
pub fn inpaint(model: &dyn InpainterModel, img: &Image, mask: &Mask) -> Result<Image> {
    check_inputs(model, img, mask)?;
    let masked = masked_input(img, mask)?;
    let raw = model.fill(&masked, mask)?;
    check_fill(model, &raw, img.dims())?;
    Ok(composite(img, &raw, mask))
}

/// Objective value, the composited output it was evaluated on, and the
/// gradient with respect to the unmasked input image.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub value: f64,
    pub output: Image,
    pub gradient: Tensor,
}

/// `∂ objective(inpaint(model, img, mask)) / ∂ img`.
///
/// Two paths reach `img`: directly through the composite on known pixels,
/// and through the network via the masked input. Both are gated by the
/// mask, so the gradient is exactly zero on hole pixels.
pub fn input_gradient(
    model: &dyn InpainterModel,
    img: &Image,
    mask: &Mask,
    objective: &dyn Objective,
) -> Result<InputGradient> {
    check_inputs(model, img, mask)?;
    if !model.differentiable() {
        return Err(Error::NotDifferentiable(model.identifier().to_string()));
    }
    let masked = masked_input(img, mask)?;
    let (raw, pullback) = model.fill_with_pullback(&masked, mask)?;
    check_fill(model, &raw, img.dims())?;
    let output = composite(img, &raw, mask);
    let (value, grad_out) = objective.value_and_grad(&output)?;
    if grad_out.shape() != raw.shape() {
        return Err(Error::Numerical(format!(
            "objective gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            raw.shape()
        )));
    }

    let known = mask.values();
    let mut grad_raw = grad_out.clone();
    for c in 0..3 {
        for ((g, &r), &m) in grad_raw.plane_mut(c).iter_mut().zip(raw.plane(c)).zip(known) {
            if m == 1 || !(0.0..=1.0).contains(&r) {
                *g = 0.0;
            }
        }
    }
    let through_net = pullback(&grad_raw)?;
    let mut gradient = grad_out;
    gradient.add_scaled(&through_net, 1.0);
    for c in 0..3 {
        for (g, &m) in gradient.plane_mut(c).iter_mut().zip(known) {
            if m == 0 {
                *g = 0.0;
            }
        }
    }
    if !value.is_finite() || !gradient.all_finite() {
        return Err(Error::Numerical(format!(
            "non-finite objective or gradient through model '{}'",
            model.identifier()
        )));
    }
    Ok(InputGradient {
        value,
        output,
        gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{random_rect_mask, RngSeed};
    use crate::loss::{LossConfig, MarkObjective};
    use rand::Rng;

    /// Fills every hole with a constant; not differentiable.
    struct Flat(f32);

    impl InpainterModel for Flat {
        fn identifier(&self) -> &str {
            "flat"
        }
        fn differentiable(&self) -> bool {
            false
        }
        fn check_dimensions(&self, _: usize, _: usize) -> Result<()> {
            Ok(())
        }
        fn fill(&self, masked: &Image, _: &Mask) -> Result<Tensor> {
            Ok(Tensor::filled(3, masked.height(), masked.width(), self.0))
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = RngSeed(seed).rng();
        Image::from_fn(h, w, |_, _, _| rng.random::<f32>()).unwrap()
    }

    fn small_toy() -> ToyInpainter {
        ToyInpainter::new("t", ToyInpainterConfig { base_channels: 4, depth: 2 }, RngSeed(1)).unwrap()
    }

    #[test]
    fn compositing_passes_known_pixels() {
        let img = random_image(8, 8, 1);
        let mask = random_rect_mask(8, 8, 0.3, RngSeed(2)).unwrap();
        let out = inpaint(&Flat(2.0), &img, &mask).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if mask.is_known(y, x) { img.pixel(y, x) } else { [1.0; 3] };
                assert_eq!(out.pixel(y, x), expect);
            }
        }
        assert_eq!(inpaint(&Flat(0.3), &img, &Mask::ones(8, 8)).unwrap(), img);
    }

    #[test]
    fn non_differentiable_model_is_rejected() {
        let img = random_image(8, 8, 1);
        let obj = |o: &Image| Ok((0.0, Tensor::zeros(3, o.height(), o.width())));
        let err = input_gradient(&Flat(0.5), &img, &Mask::ones(8, 8), &obj).unwrap_err();
        assert!(matches!(err, Error::NotDifferentiable(_)));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let img = random_image(8, 8, 1);
        assert!(inpaint(&Flat(0.5), &img, &Mask::ones(8, 4)).is_err());
        assert!(matches!(
            inpaint(&small_toy(), &random_image(6, 8, 1), &Mask::ones(6, 8)),
            Err(Error::UnsupportedDimensions { .. })
        ));
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let model = small_toy();
        let img = random_image(16, 16, 3);
        let mask = random_rect_mask(16, 16, 0.1, RngSeed(4)).unwrap();
        let obj = |o: &Image| Ok((1.5, Tensor::zeros(3, o.height(), o.width())));
        let g = input_gradient(&model, &img, &mask, &obj).unwrap();
        assert_eq!(g.value, 1.5);
        assert!(g.gradient.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_the_objective_and_zero_in_the_hole() {
        let model = small_toy();
        let img = random_image(16, 16, 5);
        let target = random_image(16, 16, 6);
        let mask = random_rect_mask(16, 16, 0.1, RngSeed(7)).unwrap();
        let base = MarkObjective::new(&LossConfig::default(), &target).unwrap();
        let scaled = |o: &Image| {
            let (v, mut g) = base.value_and_grad(o)?;
            g.scale(2.5);
            Ok((2.5 * v, g))
        };
        let g1 = input_gradient(&model, &img, &mask, &base).unwrap();
        let g2 = input_gradient(&model, &img, &mask, &scaled).unwrap();
        for (a, b) in g1.gradient.data().iter().zip(g2.gradient.data()) {
            assert!((2.5 * a - b).abs() <= 1e-4 * b.abs() + 1e-9, "{a} {b}");
        }
        for y in 0..16 {
            for x in 0..16 {
                if !mask.is_known(y, x) {
                    for c in 0..3 {
                        assert_eq!(g1.gradient.get(c, y, x), 0.0);
                    }
                }
            }
        }
        assert!(g1.gradient.max_abs() > 0.0);
    }
}
