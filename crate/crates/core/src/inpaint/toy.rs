use serde::{Deserialize, Serialize};

use super::{InpainterModel, Pullback};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask, RngSeed};
use crate::nn::{upsample2x, upsample2x_backward, Conv2d, ConvGrads, Layer, ParamGrads, Sequential, Tensor};

const LEAKY_SLOPE: f32 = 0.2;

/// Shape of the reference U-Net inpainter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyInpainterConfig {
    /// Width of the first encoder block; block `i` has `base · 2^i` channels.
    pub base_channels: usize,
    /// Number of stride-2 blocks down (mirrored by upsampling blocks up).
    pub depth: usize,
}

impl ToyInpainterConfig {
    /// RGB plus the mask plane.
    pub const INPUT_CHANNELS: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::validation(format!(
                "toy inpainter needs base_channels >= 1 and depth >= 1, got {self:?}"
            )));
        }
        if self.depth > 8 {
            return Err(Error::validation(format!("depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    /// Inputs must be divisible by this on both axes.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

impl Default for ToyInpainterConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
        }
    }
}

/// Small trainable inpainter (a U-Net): `depth` stride-2 conv blocks down,
/// a bottleneck conv, then `depth` blocks up, each upsampling ×2 (nearest),
/// stacking the encoder activation of that resolution and convolving. A
/// sigmoid RGB head follows. The input is the masked image stacked with the
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInpainter {
    identifier: String,
    config: ToyInpainterConfig,
    encoder: Vec<Sequential>,
    bottleneck: Sequential,
    /// Ordered from the coarsest level to full resolution.
    decoder: Vec<Sequential>,
    head: Sequential,
}

/// Activations of one forward pass.
pub(crate) struct ToyTrace {
    input: Tensor,
    encoder: Vec<Vec<Tensor>>,
    bottleneck: Vec<Tensor>,
    decoder: Vec<Vec<Tensor>>,
    head: Vec<Tensor>,
}

impl ToyTrace {
    pub(crate) fn output(&self) -> &Tensor {
        last(&self.head)
    }

    /// Encoder-side activation at `level` (the input at level 0).
    fn skip(&self, level: usize) -> &Tensor {
        if level == 0 {
            &self.input
        } else {
            last(&self.encoder[level - 1])
        }
    }
}

fn last(acts: &[Tensor]) -> &Tensor {
    acts.last().expect("traced output")
}

fn block(conv: Conv2d) -> Sequential {
    Sequential::new(vec![Layer::Conv(conv), Layer::LeakyRelu(LEAKY_SLOPE)])
}

fn traced(seq: &Sequential, x: &Tensor) -> Vec<Tensor> {
    seq.forward_traced(x, seq.layers.len())
}

fn pull(seq: &Sequential, acts: &[Tensor], g: &Tensor, grads: Option<&mut ParamGrads>, need_input: bool) -> Option<Tensor> {
    seq.backward(acts, &[(seq.layers.len(), g)], grads, need_input)
}

/// Splits a gradient over stacked channels into its leading `n` channels and the rest.
fn split_channels(g: Tensor, n: usize) -> (Tensor, Tensor) {
    let (c, h, w) = g.shape();
    let rest = Tensor::from_vec(c - n, h, w, g.data()[n * h * w..].to_vec());
    (g.leading_channels(n), rest)
}

/// Parameter gradients, one slot per stage in [`ToyInpainter::convs`] order.
#[derive(Debug, Clone)]
pub(crate) struct ToyGrads {
    encoder: Vec<ParamGrads>,
    bottleneck: ParamGrads,
    decoder: Vec<ParamGrads>,
    head: ParamGrads,
}

impl ToyGrads {
    pub(crate) fn iter(&self) -> impl Iterator<Item = &ConvGrads> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(&self.decoder)
            .chain(std::iter::once(&self.head))
            .flatten()
            .flatten()
    }
}

impl ToyInpainter {
    /// Randomly initialised model.
    pub fn new(identifier: impl Into<String>, config: ToyInpainterConfig, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let width = |level: usize| config.base_channels << level;
        // Channels of the encoder-side activation at each resolution level.
        let skip = |level: usize| {
            if level == 0 {
                ToyInpainterConfig::INPUT_CHANNELS
            } else {
                width(level - 1)
            }
        };
        let encoder = (0..config.depth)
            .map(|level| block(Conv2d::he_init(skip(level), width(level), 2, &mut rng)))
            .collect();
        let deepest = width(config.depth - 1);
        let bottleneck = block(Conv2d::he_init(deepest, deepest, 1, &mut rng));
        let mut in_ch = deepest;
        let decoder = (0..config.depth)
            .rev()
            .map(|level| {
                let out = width(level.saturating_sub(1));
                let b = block(Conv2d::he_init(in_ch + skip(level), out, 1, &mut rng));
                in_ch = out;
                b
            })
            .collect();
        let head = Sequential::new(vec![
            Layer::Conv(Conv2d::he_init(in_ch, 3, 1, &mut rng)),
            Layer::Sigmoid,
        ]);
        Ok(Self {
            identifier: identifier.into(),
            config,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ToyInpainterConfig {
        &self.config
    }

    pub fn set_identifier(&mut self, identifier: impl Into<String>) {
        self.identifier = identifier.into();
    }

    fn stages(&self) -> impl Iterator<Item = &Sequential> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(&self.decoder)
            .chain(std::iter::once(&self.head))
    }

    /// All convolutions: encoder, bottleneck, decoder (coarse to fine), head.
    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.stages().flat_map(|s| s.convs())
    }

    pub(crate) fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoder.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .flat_map(|s| s.convs_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.stages().map(|s| s.parameter_count()).sum()
    }

    pub(crate) fn zero_grads(&self) -> ToyGrads {
        ToyGrads {
            encoder: self.encoder.iter().map(|s| s.zero_grads()).collect(),
            bottleneck: self.bottleneck.zero_grads(),
            decoder: self.decoder.iter().map(|s| s.zero_grads()).collect(),
            head: self.head.zero_grads(),
        }
    }

    pub(crate) fn network_input(masked: &Image, mask: &Mask) -> Tensor {
        masked.tensor().concat_channels(&mask.to_tensor())
    }

    pub(crate) fn forward_traced(&self, input: Tensor) -> ToyTrace {
        let mut encoder: Vec<Vec<Tensor>> = Vec::with_capacity(self.config.depth);
        for stage in &self.encoder {
            let x = encoder.last().map_or(&input, |t| last(t));
            let acts = traced(stage, x);
            encoder.push(acts);
        }
        let bottleneck = traced(&self.bottleneck, last(encoder.last().expect("depth >= 1")));
        let mut trace = ToyTrace {
            input,
            encoder,
            bottleneck,
            decoder: Vec::with_capacity(self.config.depth),
            head: Vec::new(),
        };
        for (k, stage) in self.decoder.iter().enumerate() {
            let level = self.config.depth - 1 - k;
            let prev = trace.decoder.last().map_or(&trace.bottleneck, |t| t);
            let stacked = upsample2x(last(prev)).concat_channels(trace.skip(level));
            let acts = traced(stage, &stacked);
            trace.decoder.push(acts);
        }
        trace.head = traced(&self.head, last(trace.decoder.last().expect("depth >= 1")));
        trace
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the sigmoid output).
    /// Returns the input gradient when `need_input` is set.
    pub(crate) fn backward(
        &self,
        trace: &ToyTrace,
        grad_out: &Tensor,
        mut grads: Option<&mut ToyGrads>,
        need_input: bool,
    ) -> Option<Tensor> {
        let depth = self.config.depth;
        let mut g = pull(&self.head, &trace.head, grad_out, grads.as_deref_mut().map(|g| &mut g.head), true)
            .expect("input gradient requested");
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth];
        for k in (0..depth).rev() {
            let level = depth - 1 - k;
            let slot = grads.as_deref_mut().map(|g| &mut g.decoder[k]);
            let stacked = pull(&self.decoder[k], &trace.decoder[k], &g, slot, true).expect("input gradient requested");
            let up_ch = stacked.channels() - trace.skip(level).channels();
            let (g_up, g_skip) = split_channels(stacked, up_ch);
            skip_grads[level] = Some(g_skip);
            g = upsample2x_backward(&g_up);
        }
        let slot = grads.as_deref_mut().map(|g| &mut g.bottleneck);
        g = pull(&self.bottleneck, &trace.bottleneck, &g, slot, true).expect("input gradient requested");
        for level in (0..depth).rev() {
            if let Some(s) = skip_grads[level + 1..].first().and_then(|s| s.as_ref()) {
                g.add_scaled(s, 1.0);
            }
            let slot = grads.as_deref_mut().map(|g| &mut g.encoder[level]);
            g = pull(&self.encoder[level], &trace.encoder[level], &g, slot, need_input || level > 0)?;
        }
        g.add_scaled(skip_grads[0].as_ref().expect("level 0 visited"), 1.0);
        Some(g)
    }
}

impl InpainterModel for ToyInpainter {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn check_dimensions(&self, height: usize, width: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::UnsupportedDimensions {
                model: self.identifier.clone(),
                height,
                width,
                reason: format!("both sides must be positive multiples of {m}"),
            });
        }
        Ok(())
    }

    fn fill(&self, masked: &Image, mask: &Mask) -> Result<Tensor> {
        self.check_dimensions(masked.height(), masked.width())?;
        Ok(self.forward_traced(Self::network_input(masked, mask)).head.pop().expect("traced output"))
    }

    fn fill_with_pullback<'a>(&'a self, masked: &Image, mask: &Mask) -> Result<(Tensor, Pullback<'a>)> {
        self.check_dimensions(masked.height(), masked.width())?;
        let trace = self.forward_traced(Self::network_input(masked, mask));
        let raw = trace.output().clone();
        let pullback: Pullback<'a> = Box::new(move |grad_raw: &Tensor| {
            let grad = self
                .backward(&trace, grad_raw, None, true)
                .expect("input gradient requested");
            Ok(grad.leading_channels(3))
        });
        Ok((raw, pullback))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture() {
        let m = ToyInpainter::new("toy", ToyInpainterConfig::default(), RngSeed(0)).unwrap();
        let widths: Vec<(usize, usize, usize)> = m
            .convs()
            .map(|c| (c.in_channels, c.out_channels, c.stride))
            .collect();
        assert_eq!(
            widths,
            vec![
                (4, 32, 2),
                (32, 64, 2),
                (64, 128, 2),
                (128, 128, 1),
                (192, 64, 1),
                (96, 32, 1),
                (36, 32, 1),
                (32, 3, 1)
            ]
        );
        assert!(ToyInpainter::new("x", ToyInpainterConfig { base_channels: 0, depth: 2 }, RngSeed(0)).is_err());
        assert!(ToyInpainter::new("x", ToyInpainterConfig { base_channels: 2, depth: 0 }, RngSeed(0)).is_err());
    }

    #[test]
    fn fill_shape_and_range() {
        let m = ToyInpainter::new("toy", ToyInpainterConfig { base_channels: 4, depth: 3 }, RngSeed(0)).unwrap();
        let img = Image::filled(16, 24, 0.4).unwrap();
        let raw = m.fill(&img, &Mask::ones(16, 24)).unwrap();
        assert_eq!(raw.shape(), (3, 16, 24));
        assert!(raw.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.check_dimensions(12, 16).is_err());
    }
}
