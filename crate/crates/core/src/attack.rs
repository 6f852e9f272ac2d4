//! Signed-gradient markpainting: the fixed-mask attack, its mask-agnostic
//! expectation-over-transformation variant, and the L∞ projection.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{linf_distance, sample_rect, Image, Mask, RngSeed};
use crate::inpaint::{inpaint, input_gradient, InpainterModel};
use crate::loss::{LossConfig, MarkObjective, Objective};
use crate::nn::Tensor;

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// L∞ budget.
    pub epsilon: f64,
    /// Per-iteration step.
    pub step: f64,
    pub iterations: usize,
    pub loss: LossConfig,
    pub seed: RngSeed,
}

impl AttackConfig {
    /// Budget `epsilon`, step `epsilon / 50`, 100 iterations, default loss.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            step: epsilon / 50.0,
            iterations: 100,
            loss: LossConfig::default(),
            seed: RngSeed(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::validation(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.step >= 0.0 && self.step <= self.epsilon) {
            return Err(Error::validation(format!(
                "step {} must satisfy 0 <= step <= epsilon ({})",
                self.step, self.epsilon
            )));
        }
        if !(self.loss.alpha >= 0.0) {
            return Err(Error::validation("loss alpha must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EoTConfig {
    pub attack: AttackConfig,
    /// Number of pre-sampled masks.
    pub n_masks: usize,
    pub m_min: f64,
    pub m_max: f64,
}

impl EoTConfig {
    /// Budget `epsilon`, step `epsilon / 30`, 1500 iterations, 40 masks
    /// with coverage in `[0.01, 0.1]`.
    pub fn new(epsilon: f64) -> Self {
        Self {
            attack: AttackConfig {
                step: epsilon / 30.0,
                iterations: 1500,
                ..AttackConfig::new(epsilon)
            },
            n_masks: 40,
            m_min: 0.01,
            m_max: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if self.n_masks == 0 {
            return Err(Error::validation("n_masks must be >= 1"));
        }
        if !(self.m_min > 0.0 && self.m_min <= self.m_max && self.m_max < 1.0) {
            return Err(Error::validation(format!(
                "coverage range [{}, {}] must satisfy 0 < m_min <= m_max < 1",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Image,
    /// `loss_trace[m][j]`: loss of model `m`'s composited output against the
    /// target after `j` updates. Entry 0 is the benign loss, so each model has
    /// `iterations + 1` entries.
    pub loss_trace: Vec<Vec<f64>>,
    pub iterations: usize,
    /// L∞ distance between the adversarial image and the input.
    pub linf: f64,
}

impl AttackResult {
    /// Last recorded loss per model.
    pub fn final_losses(&self) -> Vec<f64> {
        self.loss_trace.iter().filter_map(|t| t.last().copied()).collect()
    }
}

/// Clamps `candidate` to `[origin − ε, origin + ε]`, then to `[0, 1]`.
pub fn project_budget(candidate: &Image, origin: &Image, epsilon: f64) -> Result<Image> {
    origin.ensure_same_dims(candidate.dims())?;
    project_raw(candidate.tensor().clone(), origin, epsilon)
}

/// [`project_budget`] for a candidate that may leave `[0, 1]`.
fn project_raw(mut out: Tensor, origin: &Image, epsilon: f64) -> Result<Image> {
    if out.shape() != origin.tensor().shape() {
        return Err(Error::DimensionMismatch {
            expected: origin.dims(),
            found: (out.height(), out.width()),
        });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::validation(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let eps = epsilon as f32;
    for (v, &o) in out.data_mut().iter_mut().zip(origin.data()) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
    Ok(Image::from_tensor_clamped(out))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_setup(img: &Image, target: &Image, models: &[Arc<dyn InpainterModel>]) -> Result<()> {
    img.ensure_same_dims(target.dims())?;
    if models.is_empty() {
        return Err(Error::validation("an attack needs at least one model"));
    }
    for m in models {
        if !m.differentiable() {
            return Err(Error::NotDifferentiable(m.identifier().to_string()));
        }
        m.check_dimensions(img.height(), img.width())?;
    }
    Ok(())
}

fn objective_value(
    model: &dyn InpainterModel,
    img: &Image,
    mask: &Mask,
    objective: &MarkObjective,
) -> Result<f64> {
    objective.value(&inpaint(model, img, mask)?)
}

/// `I − η ⊙ M`, confined to known pixels, then projected.
fn apply_update(adv: &Image, eta: &Tensor, mask: &Mask, origin: &Image, epsilon: f64) -> Result<Image> {
    let mut cand = adv.tensor().clone();
    let known = mask.values();
    for c in 0..3 {
        for ((v, &e), &m) in cand.plane_mut(c).iter_mut().zip(eta.plane(c)).zip(known) {
            if m == 1 {
                *v -= e;
            }
        }
    }
    project_raw(cand, origin, epsilon)
}

/// Fixed-mask markpainting against one or more models.
///
/// Each iteration sums `step · sign(∇ loss)` over the models (in the given
/// order), subtracts it on known pixels and projects back into the budget.
pub fn markpaint(
    img: &Image,
    mask: &Mask,
    target: &Image,
    models: &[Arc<dyn InpainterModel>],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    img.ensure_same_dims(mask.dims())?;
    check_setup(img, target, models)?;
    let objective = MarkObjective::new(&cfg.loss, target)?;
    let (h, w) = img.dims();

    if cfg.iterations == 0 || cfg.epsilon == 0.0 {
        // Every projection lands back on the input.
        let loss_trace = models
            .iter()
            .map(|m| Ok(vec![objective_value(m.as_ref(), img, mask, &objective)?; cfg.iterations + 1]))
            .collect::<Result<_>>()?;
        return Ok(AttackResult {
            adversarial: img.clone(),
            loss_trace,
            iterations: cfg.iterations,
            linf: 0.0,
        });
    }

    let step = cfg.step as f32;
    let mut trace = vec![Vec::with_capacity(cfg.iterations + 1); models.len()];
    let mut adv = img.clone();
    for _ in 0..cfg.iterations {
        let mut eta = Tensor::zeros(3, h, w);
        for (m, model) in models.iter().enumerate() {
            let g = input_gradient(model.as_ref(), &adv, mask, &objective)?;
            trace[m].push(g.value);
            for (e, &gv) in eta.data_mut().iter_mut().zip(g.gradient.data()) {
                *e += step * sign(gv);
            }
        }
        adv = apply_update(&adv, &eta, mask, img, cfg.epsilon)?;
    }
    for (m, model) in models.iter().enumerate() {
        trace[m].push(objective_value(model.as_ref(), &adv, mask, &objective)?);
    }
    let linf = linf_distance(&adv, img)?;
    Ok(AttackResult {
        adversarial: adv,
        loss_trace: trace,
        iterations: cfg.iterations,
        linf,
    })
}

/// Draws `cfg.n_masks` single-rectangle masks whose realised coverage lies
/// in `[m_min, m_max]`.
pub fn sample_eot_masks(height: usize, width: usize, cfg: &EoTConfig) -> Result<Vec<Mask>> {
    cfg.validate()?;
    const MAX_TRIES: usize = 1000;
    let mut rng = cfg.attack.seed.derive("eot-masks", 0).rng();
    let total = (height * width) as f64;
    (0..cfg.n_masks)
        .map(|_| {
            for _ in 0..MAX_TRIES {
                let coverage = if cfg.m_min < cfg.m_max {
                    rng.random_range(cfg.m_min..=cfg.m_max)
                } else {
                    cfg.m_min
                };
                let Ok(rect) = sample_rect(height, width, coverage, &mut rng) else {
                    continue;
                };
                let realised = rect.area() as f64 / total;
                if (cfg.m_min..=cfg.m_max).contains(&realised) {
                    return Mask::with_hole(height, width, &rect);
                }
            }
            Err(Error::validation(format!(
                "cannot place a rectangle with coverage in [{}, {}] on a {height}x{width} image",
                cfg.m_min, cfg.m_max
            )))
        })
        .collect()
}

/// Mask-agnostic markpainting.
///
/// Each iteration picks one of the pre-sampled masks uniformly and weights
/// every model's signed gradient by a fresh elementwise `U(0, 1)` field.
/// `loss_trace[m][j]` for `j < iterations` is the loss under the mask drawn
/// at iteration `j`; the final entry reuses the last drawn mask.
pub fn markpaint_eot(
    img: &Image,
    target: &Image,
    models: &[Arc<dyn InpainterModel>],
    cfg: &EoTConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_setup(img, target, models)?;
    let (h, w) = img.dims();
    let masks = sample_eot_masks(h, w, cfg)?;
    let attack = &cfg.attack;
    let objective = MarkObjective::new(&attack.loss, target)?;
    let mut pick = attack.seed.derive("eot-pick", 0).rng();
    let mut weights = attack.seed.derive("eot-weight", 0).rng();

    if attack.iterations == 0 || attack.epsilon == 0.0 {
        let mask = &masks[pick.random_range(0..masks.len())];
        let loss_trace = models
            .iter()
            .map(|m| Ok(vec![objective_value(m.as_ref(), img, mask, &objective)?; attack.iterations + 1]))
            .collect::<Result<_>>()?;
        return Ok(AttackResult {
            adversarial: img.clone(),
            loss_trace,
            iterations: attack.iterations,
            linf: 0.0,
        });
    }

    let step = attack.step as f32;
    let mut trace = vec![Vec::with_capacity(attack.iterations + 1); models.len()];
    let mut adv = img.clone();
    let mut last = 0;
    for _ in 0..attack.iterations {
        last = pick.random_range(0..masks.len());
        let mask = &masks[last];
        let mut eta = Tensor::zeros(3, h, w);
        for (m, model) in models.iter().enumerate() {
            let g = input_gradient(model.as_ref(), &adv, mask, &objective)?;
            trace[m].push(g.value);
            for (e, &gv) in eta.data_mut().iter_mut().zip(g.gradient.data()) {
                let u: f32 = weights.random();
                *e += step * u * sign(gv);
            }
        }
        adv = apply_update(&adv, &eta, mask, img, attack.epsilon)?;
    }
    for (m, model) in models.iter().enumerate() {
        trace[m].push(objective_value(model.as_ref(), &adv, &masks[last], &objective)?);
    }
    let linf = linf_distance(&adv, img)?;
    Ok(AttackResult {
        adversarial: adv,
        loss_trace: trace,
        iterations: attack.iterations,
        linf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{mask_coverage, random_rect_mask, solid_target};
    use crate::inpaint::{ToyInpainter, ToyInpainterConfig};
    use crate::loss::FeatureExtractor;
    use proptest::prelude::*;

    fn px(v: f32) -> Image {
        Image::filled(1, 1, v).unwrap()
    }

    fn small_model(seed: u64) -> Arc<dyn InpainterModel> {
        let cfg = ToyInpainterConfig { base_channels: 4, depth: 2 };
        Arc::new(ToyInpainter::new(format!("m{seed}"), cfg, RngSeed(seed)).unwrap())
    }

    fn cheap_loss() -> LossConfig {
        LossConfig::new(4.0, Arc::new(FeatureExtractor::identity())).unwrap()
    }

    fn scene(seed: u64) -> Image {
        crate::corpus::synthetic_scene(16, RngSeed(seed))
    }

    #[test]
    fn projection_examples() {
        let o = px(0.5);
        assert_eq!(project_budget(&o, &o, 0.3).unwrap(), o);
        let got = project_budget(&px(0.9), &o, 0.3).unwrap();
        assert!((got.data()[0] - 0.8).abs() < 1e-6);
        let raw = Tensor::filled(3, 1, 1, 1.4);
        assert_eq!(project_raw(raw, &px(0.95), 0.3).unwrap().data()[0], 1.0);
        assert!(project_budget(&o, &Image::filled(2, 1, 0.5).unwrap(), 0.1).is_err());
        assert!(project_budget(&o, &o, 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(0.1).validate().is_ok());
        assert!(AttackConfig { step: 0.2, ..AttackConfig::new(0.1) }.validate().is_err());
        assert!(AttackConfig::new(1.5).validate().is_err());
        let e = EoTConfig::new(0.1);
        assert_eq!(e.attack.iterations, 1500);
        assert!((e.attack.step - 0.1 / 30.0).abs() < 1e-15);
        assert!(EoTConfig { n_masks: 0, ..e.clone() }.validate().is_err());
        assert!(EoTConfig { m_min: 0.2, m_max: 0.1, ..e }.validate().is_err());
    }

    #[test]
    fn attack_respects_budget_and_hole() {
        let img = scene(1);
        let mask = random_rect_mask(16, 16, 0.1, RngSeed(2)).unwrap();
        let target = solid_target(16, 16, [1.0, 0.0, 0.0]).unwrap();
        let cfg = AttackConfig { iterations: 10, loss: cheap_loss(), ..AttackConfig::new(0.05) };
        let models = [small_model(1), small_model(2)];
        let r = markpaint(&img, &mask, &target, &models, &cfg).unwrap();
        assert!(r.linf <= 0.05 + 1e-6);
        assert!(r.linf > 0.0);
        for c in 0..3 {
            for (i, &m) in mask.values().iter().enumerate() {
                if m == 0 {
                    assert_eq!(r.adversarial.tensor().plane(c)[i], img.tensor().plane(c)[i]);
                }
            }
        }
        assert_eq!(r.loss_trace.len(), 2);
        assert!(r.loss_trace.iter().all(|t| t.len() == 11));
        let obj = MarkObjective::new(&cfg.loss, &target).unwrap();
        let benign = obj.value(&inpaint(models[0].as_ref(), &img, &mask).unwrap()).unwrap();
        assert_eq!(r.loss_trace[0][0], benign);
        let again = markpaint(&img, &mask, &target, &models, &cfg).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn zero_budget_and_zero_iterations_are_identity() {
        let img = scene(3);
        let mask = random_rect_mask(16, 16, 0.1, RngSeed(4)).unwrap();
        let target = solid_target(16, 16, [0.0, 1.0, 0.0]).unwrap();
        let models = [small_model(3)];
        for cfg in [
            AttackConfig { iterations: 5, loss: cheap_loss(), ..AttackConfig::new(0.0) },
            AttackConfig { iterations: 0, loss: cheap_loss(), ..AttackConfig::new(0.1) },
        ] {
            let r = markpaint(&img, &mask, &target, &models, &cfg).unwrap();
            assert_eq!(r.adversarial, img);
            assert_eq!(r.linf, 0.0);
            assert_eq!(r.loss_trace[0].len(), cfg.iterations + 1);
        }
    }

    #[test]
    fn zero_budget_shortcut_matches_the_loop() {
        // With ε = 0 the projection always returns the input, so running the
        // iterations and skipping them must agree.
        let img = scene(5);
        let mask = random_rect_mask(16, 16, 0.1, RngSeed(6)).unwrap();
        let target = solid_target(16, 16, [0.0, 0.0, 1.0]).unwrap();
        let model = small_model(5);
        let obj = MarkObjective::new(&cheap_loss(), &target).unwrap();
        let mut adv = img.clone();
        for _ in 0..3 {
            let g = input_gradient(model.as_ref(), &adv, &mask, &obj).unwrap();
            let eta = g.gradient.map(|v| 0.0 * sign(v));
            adv = apply_update(&adv, &eta, &mask, &img, 0.0).unwrap();
        }
        assert_eq!(adv, img);
    }

    #[test]
    fn eot_masks_respect_coverage() {
        let cfg = EoTConfig { n_masks: 30, m_min: 0.02, m_max: 0.1, ..EoTConfig::new(0.1) };
        let masks = sample_eot_masks(32, 32, &cfg).unwrap();
        assert_eq!(masks.len(), 30);
        for m in &masks {
            let c = mask_coverage(m);
            assert!((0.02..=0.1).contains(&c), "{c}");
        }
        assert_eq!(masks, sample_eot_masks(32, 32, &cfg).unwrap());
    }

    #[test]
    fn eot_attack_is_bounded_and_deterministic() {
        let img = scene(7);
        let target = solid_target(16, 16, [1.0, 1.0, 0.0]).unwrap();
        let mut cfg = EoTConfig { n_masks: 5, m_min: 0.05, m_max: 0.15, ..EoTConfig::new(0.05) };
        cfg.attack.iterations = 8;
        cfg.attack.loss = cheap_loss();
        let models = [small_model(7)];
        let r = markpaint_eot(&img, &target, &models, &cfg).unwrap();
        assert!(r.linf <= 0.05 + 1e-6 && r.linf > 0.0);
        assert_eq!(r.loss_trace[0].len(), 9);
        assert_eq!(r, markpaint_eot(&img, &target, &models, &cfg).unwrap());
        cfg.attack.epsilon = 0.0;
        cfg.attack.step = 0.0;
        assert_eq!(markpaint_eot(&img, &target, &models, &cfg).unwrap().adversarial, img);
    }

    #[test]
    fn rejects_bad_setups() {
        let img = scene(8);
        let mask = Mask::ones(16, 16);
        let target = solid_target(16, 16, [1.0, 0.0, 0.0]).unwrap();
        let cfg = AttackConfig { iterations: 1, loss: cheap_loss(), ..AttackConfig::new(0.1) };
        assert!(markpaint(&img, &mask, &target, &[], &cfg).is_err());
        let wrong = solid_target(8, 8, [1.0, 0.0, 0.0]).unwrap();
        assert!(markpaint(&img, &mask, &wrong, &[small_model(1)], &cfg).is_err());
        let odd = crate::corpus::synthetic_scene(15, RngSeed(1));
        let odd_mask = Mask::ones(15, 15);
        let odd_target = solid_target(15, 15, [1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            markpaint(&odd, &odd_mask, &odd_target, &[small_model(1)], &cfg),
            Err(Error::UnsupportedDimensions { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn projection_stays_in_budget(
            o in prop::collection::vec(0.0f32..=1.0, 12),
            d in prop::collection::vec(-2.0f32..2.0, 12),
            eps in 0.0f64..=1.0,
        ) {
            let origin = Image::from_tensor(Tensor::from_vec(3, 2, 2, o.clone())).unwrap();
            let cand = Tensor::from_vec(3, 2, 2, o.iter().zip(&d).map(|(a, b)| a + b).collect());
            let p = project_raw(cand, &origin, eps).unwrap();
            prop_assert!(linf_distance(&p, &origin).unwrap() <= eps + 1e-6);
            prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(project_budget(&p, &origin, eps).unwrap(), p);
        }
    }
}
