use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, Sequential, Tensor};

/// Seed of the hermetic random-feature pyramid.
const PYRAMID_SEED: u64 = 0x6d61_726b_7061_696e;
const PYRAMID_CHANNELS: [usize; 4] = [8, 16, 32, 32];

/// ImageNet statistics the VGG weights were trained with.
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Convolution widths of the VGG16 trunk up to `conv4_3`; `0` is a max-pool.
const VGG16_TRUNK: [usize; 13] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512];
/// Index of each convolution in torchvision's `features` sequence.
const VGG16_TORCH_INDEX: [usize; 10] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21];
/// Convolutions (1-based) whose ReLU output is tapped.
const VGG16_TAPPED_CONVS: [usize; 4] = [2, 4, 7, 10];

/// A frozen convolutional feature map used by the perceptual term.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    identifier: String,
    net: Sequential,
    /// Activation indices (0 is the raw input) whose values are compared.
    taps: Vec<usize>,
    min_size: usize,
}

impl FeatureExtractor {
    /// Single tap on the raw pixels; the perceptual term then equals MSE.
    pub fn identity() -> Self {
        Self {
            identifier: "identity".into(),
            net: Sequential::new(Vec::new()),
            taps: vec![0],
            min_size: 1,
        }
    }

    /// Fixed-seed random-weight four-level convolution pyramid.
    pub fn random_pyramid() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PYRAMID_SEED);
        let mut layers = vec![Layer::Normalize {
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }];
        let mut taps = Vec::new();
        let mut in_ch = 3;
        for (level, &ch) in PYRAMID_CHANNELS.iter().enumerate() {
            if level > 0 {
                layers.push(Layer::AvgPool2);
            }
            layers.push(Layer::Conv(Conv2d::he_init(in_ch, ch, 1, &mut rng)));
            layers.push(Layer::Relu);
            taps.push(layers.len());
            in_ch = ch;
        }
        Self {
            identifier: "random-pyramid".into(),
            net: Sequential::new(layers),
            taps,
            min_size: 1 << (PYRAMID_CHANNELS.len() - 1),
        }
    }

    /// VGG16 features tapped at `relu1_2`, `relu2_2`, `relu3_3` and `relu4_3`,
    /// read from a safetensors file with torchvision's `features.N.weight`
    /// / `features.N.bias` names.
    pub fn vgg16(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let fetch = |name: &str, expected: &[usize]| -> Result<Vec<f32>> {
            let view = st.tensor(name).map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: format!("{name}: {e}"),
            })?;
            if view.dtype() != safetensors::Dtype::F32 || view.shape() != expected {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    message: format!(
                        "{name}: expected f32 {expected:?}, found {:?} {:?}",
                        view.dtype(),
                        view.shape()
                    ),
                });
            }
            Ok(view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };

        let mut layers = vec![Layer::Normalize {
            mean: IMAGENET_MEAN.to_vec(),
            std: IMAGENET_STD.to_vec(),
        }];
        let mut taps = Vec::new();
        let mut in_ch = 3;
        let mut conv_no = 0;
        for &width in &VGG16_TRUNK {
            if width == 0 {
                layers.push(Layer::MaxPool2);
                continue;
            }
            let idx = VGG16_TORCH_INDEX[conv_no];
            conv_no += 1;
            let mut conv = Conv2d::zeros(in_ch, width, 1);
            conv.weight = fetch(&format!("features.{idx}.weight"), &[width, in_ch, 3, 3])?;
            conv.bias = fetch(&format!("features.{idx}.bias"), &[width])?;
            layers.push(Layer::Conv(conv));
            layers.push(Layer::Relu);
            if VGG16_TAPPED_CONVS.contains(&conv_no) {
                taps.push(layers.len());
            }
            in_ch = width;
        }
        Ok(Self {
            identifier: "vgg16".into(),
            net: Sequential::new(layers),
            taps,
            min_size: 8,
        })
    }

    /// VGG16 when `weights` is given, otherwise the hermetic pyramid.
    pub fn from_weights(weights: Option<&Path>) -> Result<Self> {
        match weights {
            Some(path) => Self::vgg16(path),
            None => {
                tracing::info!(
                    "no feature weights configured; using the random-feature pyramid extractor"
                );
                Ok(Self::random_pyramid())
            }
        }
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    /// Activation indices that are compared.
    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Smallest accepted height/width.
    pub fn min_size(&self) -> usize {
        self.min_size
    }

    pub(crate) fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height < self.min_size || width < self.min_size {
            return Err(Error::validation(format!(
                "{height}x{width} input is smaller than the {}x{} minimum of extractor '{}'",
                self.min_size, self.min_size, self.identifier
            )));
        }
        Ok(())
    }

    fn depth(&self) -> usize {
        self.taps.iter().copied().max().unwrap_or(0)
    }

    /// Activations at every tap.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x.height(), x.width())?;
        let acts = self.net.forward_traced(x, self.depth());
        Ok(self.taps.iter().map(|&t| acts[t].clone()).collect())
    }

    /// Layer-averaged mean squared feature distance between `x` and
    /// precomputed `reference` features.
    pub fn distance(&self, x: &Tensor, reference: &[Tensor]) -> Result<f64> {
        let feats = self.features(x)?;
        Ok(layer_average(&feats, reference))
    }

    /// Distance and its gradient with respect to `x`.
    pub fn distance_and_grad(&self, x: &Tensor, reference: &[Tensor]) -> Result<(f64, Tensor)> {
        self.check_input(x.height(), x.width())?;
        let acts = self.net.forward_traced(x, self.depth());
        let layers = self.taps.len() as f64;
        let mut value = 0.0;
        let mut seeds = Vec::with_capacity(self.taps.len());
        for (&tap, r) in self.taps.iter().zip(reference) {
            let f = &acts[tap];
            let n = f.data().len() as f64;
            let mut g = f.clone();
            let mut sq = 0.0f64;
            for (gv, &rv) in g.data_mut().iter_mut().zip(r.data()) {
                let d = *gv as f64 - rv as f64;
                sq += d * d;
                *gv = (2.0 * d / (n * layers)) as f32;
            }
            value += sq / n;
            seeds.push((tap, g));
        }
        let seed_refs: Vec<(usize, &Tensor)> = seeds.iter().map(|(i, g)| (*i, g)).collect();
        let grad = self
            .net
            .backward(&acts, &seed_refs, None, true)
            .expect("input gradient requested");
        Ok((value / layers, grad))
    }
}

fn layer_average(a: &[Tensor], b: &[Tensor]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(fa, fb)| {
            let sq: f64 = fa
                .data()
                .iter()
                .zip(fb.data())
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            sq / fa.data().len() as f64
        })
        .sum();
    total / a.len() as f64
}
