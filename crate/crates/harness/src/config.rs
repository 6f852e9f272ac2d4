//! Experiment configuration: a TOML document, validated into ready-to-run
//! inputs (images, targets, models, loss).
//!
//! ```toml
//! corpus = "scenes"            # relative paths resolve against this file
//! models = ["toy:toy.mpkt"]
//! epsilons = [0.0, 0.05, 0.1, 0.3]
//! targets = ["red", "#00ff00", "logo.png"]
//!
//! [attack]
//! iterations = 100
//! step = "eps/50"
//!
//! [loss]
//! alpha = 4.0
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use markpaint::corpus::corpus_files;
use markpaint::imaging::{center_square, load_image, solid_target};
use markpaint::{AdapterRegistry, DefenseSpec, FeatureExtractor, Image, InpainterModel, LossConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Per-iteration step: a fixed value or a fraction of the budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSpec {
    Absolute(f64),
    /// `eps/N`
    Fraction(f64),
}

impl StepSpec {
    pub fn resolve(&self, epsilon: f64) -> f64 {
        match *self {
            StepSpec::Absolute(v) => v,
            StepSpec::Fraction(d) => epsilon / d,
        }
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some(d) = s.strip_prefix("eps/") {
            let d: f64 = d.parse().map_err(|_| format!("bad divisor in '{s}'"))?;
            if !(d > 0.0 && d.is_finite()) {
                return Err(format!("divisor in '{s}' must be positive"));
            }
            return Ok(StepSpec::Fraction(d));
        }
        let v: f64 = s
            .parse()
            .map_err(|_| format!("step '{s}' is neither a number nor of the form eps/N"))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(format!("step {v} must be >= 0"));
        }
        Ok(StepSpec::Absolute(v))
    }
}

impl fmt::Display for StepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSpec::Absolute(v) => write!(f, "{v}"),
            StepSpec::Fraction(d) => write!(f, "eps/{d}"),
        }
    }
}

impl Serialize for StepSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSpec::Absolute(v) => s.serialize_f64(*v),
            StepSpec::Fraction(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for StepSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => StepSpec::parse(&v.to_string()),
            Raw::Text(s) => StepSpec::parse(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    pub iterations: usize,
    pub step: StepSpec,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            iterations: 100,
            step: StepSpec::Fraction(50.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub alpha: f64,
    /// VGG16 safetensors file; the built-in random pyramid is used without one.
    pub feature_weights: Option<PathBuf>,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            feature_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EotParams {
    pub n_masks: usize,
    pub m_min: f64,
    pub m_max: f64,
    pub iterations: usize,
    pub step: StepSpec,
    /// Coverages of the held-out evaluation masks.
    pub eval_coverages: Vec<f64>,
    /// Held-out masks per evaluation coverage.
    pub eval_masks: usize,
}

impl Default for EotParams {
    fn default() -> Self {
        Self {
            n_masks: 40,
            m_min: 0.01,
            m_max: 0.1,
            iterations: 1500,
            step: StepSpec::Fraction(30.0),
            eval_coverages: vec![0.025, 0.05, 0.1],
            eval_masks: 10,
        }
    }
}

fn default_image_size() -> usize {
    256
}

fn default_coverages() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

fn default_masks_per_coverage() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_defenses() -> Vec<String> {
    markpaint::defense::default_grid().iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    /// Use only the first N images (sorted by file name).
    #[serde(default)]
    pub max_images: Option<usize>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Models attacked, as `adapter:argument` references.
    pub models: Vec<String>,
    /// Models evaluated in transfer runs; defaults to `models`.
    #[serde(default)]
    pub eval_models: Vec<String>,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_coverages")]
    pub coverages: Vec<f64>,
    #[serde(default = "default_masks_per_coverage")]
    pub masks_per_coverage: usize,
    /// Colour names, `#rrggbb`, or image paths.
    pub targets: Vec<String>,
    #[serde(default)]
    pub attack: AttackParams,
    #[serde(default)]
    pub loss: LossParams,
    #[serde(default)]
    pub eot: EotParams,
    /// Defense specs as `kind:parameter`.
    #[serde(default = "default_defenses")]
    pub defenses: Vec<String>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Parses a TOML document. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| format!("config (bytes {}..{})", s.start, s.end))
                .unwrap_or_else(|| "config".into());
            HarnessError::config(path, e.message().to_string())
        })?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            HarnessError::Config { path: p, message } => {
                HarnessError::config(format!("{}: {p}", path.display()), message)
            }
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        self.corpus = join(&self.corpus);
        self.output = join(&self.output);
        if let Some(w) = &self.loss.feature_weights {
            self.loss.feature_weights = Some(join(w));
        }
        let fix_model = |m: &String| match m.split_once(':') {
            Some((adapter, arg)) if !arg.is_empty() && Path::new(arg).is_relative() => {
                format!("{adapter}:{}", base.join(arg).display())
            }
            None if m.ends_with(".mpkt") && Path::new(m).is_relative() => base.join(m).display().to_string(),
            _ => m.clone(),
        };
        self.models = self.models.iter().map(fix_model).collect();
        self.eval_models = self.eval_models.iter().map(fix_model).collect();
        self.targets = self
            .targets
            .iter()
            .map(|t| {
                if parse_color(t).is_some() || Path::new(t).is_absolute() {
                    t.clone()
                } else {
                    base.join(t).display().to_string()
                }
            })
            .collect();
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so the hash
    /// does not depend on field order in the source document.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Field checks that need no file access.
    pub fn validate_fields(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(err("models", "at least one model is required"));
        }
        if self.epsilons.is_empty() {
            return Err(err("epsilons", "at least one epsilon is required"));
        }
        if self.targets.is_empty() {
            return Err(err("targets", "at least one target is required"));
        }
        if self.coverages.is_empty() {
            return Err(err("coverages", "at least one coverage is required"));
        }
        if self.image_size < 16 {
            return Err(err("image_size", format!("{} is below the minimum of 16", self.image_size)));
        }
        if self.masks_per_coverage == 0 {
            return Err(err("masks_per_coverage", "must be >= 1"));
        }
        if self.max_images == Some(0) {
            return Err(err("max_images", "must be >= 1"));
        }
        for (i, &e) in self.epsilons.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) {
                return Err(err(format!("epsilons[{i}]"), format!("{e} outside [0, 1]")));
            }
            for (path, step) in [("attack.step", self.attack.step), ("eot.step", self.eot.step)] {
                let s = step.resolve(e);
                if s > e {
                    return Err(err(path, format!("step {s} exceeds epsilon {e}")));
                }
            }
        }
        for (i, &c) in self.coverages.iter().enumerate() {
            if !(c > 0.0 && c < 1.0) {
                return Err(err(format!("coverages[{i}]"), format!("{c} outside (0, 1)")));
            }
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite()) {
            return Err(err("loss.alpha", format!("{} must be >= 0", self.loss.alpha)));
        }
        let e = &self.eot;
        if e.n_masks == 0 {
            return Err(err("eot.n_masks", "must be >= 1"));
        }
        if !(e.m_min > 0.0 && e.m_min <= e.m_max && e.m_max < 1.0) {
            return Err(err(
                "eot.m_min",
                format!("coverage range [{}, {}] must satisfy 0 < m_min <= m_max < 1", e.m_min, e.m_max),
            ));
        }
        for (i, &c) in e.eval_coverages.iter().enumerate() {
            if !(c > 0.0 && c < 1.0) {
                return Err(err(format!("eot.eval_coverages[{i}]"), format!("{c} outside (0, 1)")));
            }
        }
        if e.eval_masks == 0 {
            return Err(err("eot.eval_masks", "must be >= 1"));
        }
        for (i, d) in self.defenses.iter().enumerate() {
            d.parse::<DefenseSpec>()
                .map_err(|e| err(format!("defenses[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// Full validation: loads the corpus, targets, models and loss.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate_fields()?;
        let size = self.image_size;

        let mut files = corpus_files(&self.corpus).map_err(|e| err("corpus", e.to_string()))?;
        if files.is_empty() {
            return Err(err("corpus", format!("no PNG/JPEG images in {}", self.corpus.display())));
        }
        if let Some(n) = self.max_images {
            files.truncate(n);
        }
        let images = files
            .iter()
            .map(|p| center_square(&load_image(p)?, size))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err("corpus", e.to_string()))?;
        let image_names = files
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();

        let targets = self
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let img = match parse_color(t) {
                    Some(c) => solid_target(size, size, c),
                    None => load_image(t).and_then(|img| center_square(&img, size)),
                };
                let img = img.map_err(|e| err(format!("targets[{i}]"), e.to_string()))?;
                Ok((target_label(t), img))
            })
            .collect::<Result<Vec<_>>>()?;

        let registry = AdapterRegistry::with_builtins();
        let load_models = |field: &str, refs: &[String]| -> Result<Vec<Arc<dyn InpainterModel>>> {
            let models = refs
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let m = registry
                        .instantiate(r)
                        .map_err(|e| err(format!("{field}[{i}]"), e.to_string()))?;
                    if !m.differentiable() {
                        return Err(err(format!("{field}[{i}]"), format!("model '{}' is not differentiable", m.identifier())));
                    }
                    m.check_dimensions(size, size)
                        .map_err(|e| err(format!("{field}[{i}]"), e.to_string()))?;
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, m) in models.iter().enumerate() {
                if models[..i].iter().any(|o| o.identifier() == m.identifier()) {
                    return Err(err(
                        format!("{field}[{i}]"),
                        format!("duplicate model identifier '{}'", m.identifier()),
                    ));
                }
            }
            Ok(models)
        };
        let models = load_models("models", &self.models)?;
        let eval_models = if self.eval_models.is_empty() {
            models.clone()
        } else {
            load_models("eval_models", &self.eval_models)?
        };

        let extractor = FeatureExtractor::from_weights(self.loss.feature_weights.as_deref())
            .map_err(|e| err("loss.feature_weights", e.to_string()))?;
        let loss = LossConfig::new(self.loss.alpha, Arc::new(extractor))
            .map_err(|e| err("loss.alpha", e.to_string()))?;
        let defenses = self
            .defenses
            .iter()
            .map(|d| d.parse().expect("checked in validate_fields"))
            .collect();
        Ok(Prepared {
            image_names,
            images,
            targets,
            models,
            eval_models,
            loss,
            defenses,
        })
    }
}

fn err(path: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::config(path, message)
}

/// Validated, loaded experiment inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// File names of `images`, in corpus order.
    pub image_names: Vec<String>,
    pub images: Vec<Image>,
    /// `(label, image)` pairs.
    pub targets: Vec<(String, Image)>,
    pub models: Vec<Arc<dyn InpainterModel>>,
    pub eval_models: Vec<Arc<dyn InpainterModel>>,
    pub loss: LossConfig,
    pub defenses: Vec<DefenseSpec>,
}

const NAMED_COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
];

/// A colour name from a fixed palette or `#rrggbb`.
pub fn parse_color(s: &str) -> Option<[f32; 3]> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix('#') {
        if hex.len() != 6 || !hex.is_ascii() {
            return None;
        }
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            *v = u8::from_str_radix(&hex[2 * k..2 * k + 2], 16).ok()? as f32 / 255.0;
        }
        return Some(c);
    }
    NAMED_COLORS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(s))
        .map(|(_, c)| *c)
}

/// CSV label of a target: the colour spec, or the image's file name.
pub fn target_label(spec: &str) -> String {
    if parse_color(spec).is_some() {
        spec.trim().to_string()
    } else {
        Path::new(spec)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| spec.to_string())
    }
}
