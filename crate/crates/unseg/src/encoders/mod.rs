//! Encoder backbones behind a common strategy trait.
//!
//! Each family (residual bottleneck, ConvNeXt-style) implements [`Encoder`];
//! presets are registered by name and selected at runtime, so the CLI and
//! the U-Net builder never hard-code an architecture.
//!
//! Full presets mirror the classification networks they are named after and
//! their reference parameter counts (including the canonical 1000-class
//! classifier those totals are always quoted with). The `*-mini` presets are
//! desk-scale variants for tests and CPU experiments, and the `*-micro`
//! presets are 2-stage fixtures small enough for end-to-end finite-difference
//! checking.

mod convnext;
mod residual;

pub use convnext::ConvNextEncoder;
pub use residual::ResidualEncoder;

use crate::autograd::{Tape, Var};
use crate::elem::Element;
use crate::error::{Error, Result};
use crate::nn::{TensorRole, TensorVisitor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderFamily {
    Residual,
    ConvNextV2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Bottleneck,
    ConvNextBlock,
}

/// Structural description of a backbone.
#[derive(Clone, Debug)]
pub struct EncoderPreset {
    pub name: &'static str,
    pub family: EncoderFamily,
    pub block: BlockKind,
    pub stage_depths: Vec<usize>,
    /// Output channels of each stage (post-expansion for bottlenecks).
    pub stage_widths: Vec<usize>,
    /// Stem output channels; residual family only (the ConvNeXt stem width
    /// equals the first stage width).
    pub stem_width: usize,
    pub default_input_size: usize,
    pub default_batch_size: usize,
}

impl EncoderPreset {
    /// Downsampling factor of the deepest feature; inputs must be divisible
    /// by this.
    pub fn max_stride(&self) -> usize {
        // Both families reach stride 4 after their first stage and halve per
        // stage thereafter.
        4 << (self.stage_depths.len() - 1)
    }

    /// Channel counts of the feature pyramid, shallow to deep.
    pub fn feature_channels(&self) -> Vec<usize> {
        match self.family {
            EncoderFamily::Residual => {
                let mut ch = vec![self.stem_width];
                ch.extend(self.stage_widths.iter().copied());
                ch
            }
            EncoderFamily::ConvNextV2 => self.stage_widths.clone(),
        }
    }

    /// Strides of the feature pyramid, shallow to deep.
    pub fn feature_strides(&self) -> Vec<usize> {
        match self.family {
            EncoderFamily::Residual => {
                let mut s = vec![2];
                s.extend((0..self.stage_depths.len()).map(|i| 4 << i));
                s
            }
            EncoderFamily::ConvNextV2 => (0..self.stage_depths.len()).map(|i| 4 << i).collect(),
        }
    }
}

/// Multi-scale features produced by one encode pass, shallow to deep.
pub struct FeaturePyramid {
    pub features: Vec<Var>,
    pub strides: Vec<usize>,
}

/// Backbone strategy: turns an NCHW image batch into a feature pyramid.
pub trait Encoder<E: Element> {
    fn preset(&self) -> &EncoderPreset;
    fn encode(&mut self, tape: &mut Tape<E>, x: Var) -> Result<FeaturePyramid>;
    fn visit_tensors(&mut self, f: &mut TensorVisitor<E>);
    fn set_training(&mut self, on: bool);
}

/// Encoders require spatial dims divisible by their deepest stride (callers
/// that can't guarantee this pad first, as the U-Net does).
pub(crate) fn check_input_dims<E: Element>(
    preset: &EncoderPreset,
    tape: &Tape<E>,
    x: Var,
) -> Result<()> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    let stride = preset.max_stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::BadSpatialDims {
            h,
            w,
            reason: format!("must be divisible by the encoder stride {stride}"),
        });
    }
    Ok(())
}

/// Learnable parameter count of any built encoder.
pub fn param_count<E: Element>(encoder: &mut dyn Encoder<E>) -> usize {
    let mut total = 0usize;
    encoder.visit_tensors(&mut |_, role, t| {
        if role == TensorRole::Param {
            total += t.numel();
        }
    });
    total
}

/// The preset registry. Order is the CLI presentation order.
pub fn presets() -> Vec<EncoderPreset> {
    vec![
        EncoderPreset {
            name: "resnet50",
            family: EncoderFamily::Residual,
            block: BlockKind::Bottleneck,
            stage_depths: vec![3, 4, 6, 3],
            stage_widths: vec![256, 512, 1024, 2048],
            stem_width: 64,
            default_input_size: 270,
            default_batch_size: 12,
        },
        EncoderPreset {
            name: "resnet101",
            family: EncoderFamily::Residual,
            block: BlockKind::Bottleneck,
            stage_depths: vec![3, 4, 23, 3],
            stage_widths: vec![256, 512, 1024, 2048],
            stem_width: 64,
            default_input_size: 540,
            default_batch_size: 8,
        },
        EncoderPreset {
            name: "convnextv2-base",
            family: EncoderFamily::ConvNextV2,
            block: BlockKind::ConvNextBlock,
            stage_depths: vec![3, 3, 27, 3],
            stage_widths: vec![128, 256, 512, 1024],
            stem_width: 128,
            default_input_size: 384,
            default_batch_size: 24,
        },
        EncoderPreset {
            name: "convnextv2-huge",
            family: EncoderFamily::ConvNextV2,
            block: BlockKind::ConvNextBlock,
            stage_depths: vec![3, 3, 27, 3],
            stage_widths: vec![352, 704, 1408, 2816],
            stem_width: 352,
            default_input_size: 512,
            default_batch_size: 5,
        },
        EncoderPreset {
            name: "resnet-mini",
            family: EncoderFamily::Residual,
            block: BlockKind::Bottleneck,
            stage_depths: vec![2, 2, 2, 2],
            stage_widths: vec![16, 32, 64, 128],
            stem_width: 8,
            default_input_size: 64,
            default_batch_size: 8,
        },
        EncoderPreset {
            name: "convnext-mini",
            family: EncoderFamily::ConvNextV2,
            block: BlockKind::ConvNextBlock,
            stage_depths: vec![1, 1, 2, 1],
            stage_widths: vec![16, 32, 64, 128],
            stem_width: 16,
            default_input_size: 64,
            default_batch_size: 8,
        },
        // 2-stage fixtures for end-to-end gradient checking.
        EncoderPreset {
            name: "resnet-micro",
            family: EncoderFamily::Residual,
            block: BlockKind::Bottleneck,
            stage_depths: vec![1, 1],
            stage_widths: vec![8, 16],
            stem_width: 4,
            default_input_size: 16,
            default_batch_size: 2,
        },
        EncoderPreset {
            name: "convnext-micro",
            family: EncoderFamily::ConvNextV2,
            block: BlockKind::ConvNextBlock,
            stage_depths: vec![1, 1],
            stage_widths: vec![8, 16],
            stem_width: 8,
            default_input_size: 16,
            default_batch_size: 2,
        },
    ]
}

pub fn preset_names() -> Vec<&'static str> {
    presets().iter().map(|p| p.name).collect()
}

pub fn preset(name: &str) -> Result<EncoderPreset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

/// Build an encoder from a preset; `seed` fixes every initial weight.
pub fn build_encoder<E: Element>(preset: &EncoderPreset, seed: u64) -> Box<dyn Encoder<E>> {
    match preset.family {
        EncoderFamily::Residual => Box::new(ResidualEncoder::new(preset.clone(), seed)),
        EncoderFamily::ConvNextV2 => Box::new(ConvNextEncoder::new(preset.clone(), seed)),
    }
}

/// Shape-arithmetic parameter count of the bare encoder: sums layer shapes
/// without allocating anything. Construction mirrors this plan exactly, so
/// `plan == param_count(built)` for every preset.
pub fn encoder_param_plan(preset: &EncoderPreset) -> usize {
    match preset.family {
        EncoderFamily::Residual => residual::param_plan(preset),
        EncoderFamily::ConvNextV2 => convnext::param_plan(preset),
    }
}

/// Parameter count of the canonical classification network this preset
/// mirrors: the encoder plus the 1000-class classifier (and final norm for
/// the ConvNeXt family) that published totals for these backbones include.
pub fn reference_param_count(preset: &EncoderPreset) -> usize {
    const CLASSES: usize = 1000;
    let last = *preset.stage_widths.last().expect("presets have stages");
    let head = match preset.family {
        EncoderFamily::Residual => last * CLASSES + CLASSES,
        EncoderFamily::ConvNextV2 => 2 * last + last * CLASSES + CLASSES,
    };
    encoder_param_plan(preset) + head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!(preset("resnet-9000"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn full_preset_reference_counts_match_published_totals() {
        // (preset, published parameter count, in millions)
        let targets = [
            ("resnet50", 25.6e6),
            ("resnet101", 44.5e6),
            ("convnextv2-base", 88.7e6),
            ("convnextv2-huge", 660.0e6),
        ];
        for (name, target) in targets {
            let p = preset(name).unwrap();
            let count = reference_param_count(&p) as f64;
            let rel = (count - target).abs() / target;
            assert!(
                rel < 0.02,
                "{name}: reference count {count} vs {target} (rel {rel:.4})"
            );
        }
    }

    #[test]
    fn mini_plan_counts_are_frozen() {
        // Regression constants computed once by summing layer shapes.
        assert_eq!(encoder_param_plan(&preset("resnet-mini").unwrap()), 57_512);
        assert_eq!(
            encoder_param_plan(&preset("convnext-mini").unwrap()),
            270_880
        );
    }

    #[test]
    fn built_minis_match_their_plans() {
        for name in ["resnet-mini", "convnext-mini", "resnet-micro", "convnext-micro"] {
            let p = preset(name).unwrap();
            let mut enc = build_encoder::<f32>(&p, 0);
            assert_eq!(
                param_count(enc.as_mut()),
                encoder_param_plan(&p),
                "plan mismatch for {name}"
            );
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let p = preset("resnet-mini").unwrap();
        let collect = |seed: u64| {
            let mut enc = build_encoder::<f32>(&p, seed);
            let mut out: Vec<(String, Vec<f32>)> = Vec::new();
            enc.visit_tensors(&mut |name, _, t| out.push((name.to_string(), t.data().to_vec())));
            out
        };
        let a = collect(7);
        let b = collect(7);
        assert_eq!(a, b);
        let c = collect(8);
        assert_ne!(a, c);
    }

    #[test]
    fn residual_mini_pyramid_shapes() {
        let p = preset("resnet-mini").unwrap();
        let mut enc = build_encoder::<f32>(&p, 0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]));
        let pyr = enc.encode(&mut tape, x).unwrap();
        let dims: Vec<_> = pyr
            .features
            .iter()
            .map(|&f| tape.value(f).shape().to_vec())
            .collect();
        assert_eq!(
            dims,
            vec![
                vec![1, 8, 32, 32],
                vec![1, 16, 16, 16],
                vec![1, 32, 8, 8],
                vec![1, 64, 4, 4],
                vec![1, 128, 2, 2],
            ]
        );
        assert_eq!(pyr.strides, vec![2, 4, 8, 16, 32]);
    }

    #[test]
    fn convnext_mini_pyramid_shapes() {
        let p = preset("convnext-mini").unwrap();
        let mut enc = build_encoder::<f32>(&p, 0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 64, 64]));
        let pyr = enc.encode(&mut tape, x).unwrap();
        let dims: Vec<_> = pyr
            .features
            .iter()
            .map(|&f| tape.value(f).shape().to_vec())
            .collect();
        assert_eq!(
            dims,
            vec![
                vec![2, 16, 16, 16],
                vec![2, 32, 8, 8],
                vec![2, 64, 4, 4],
                vec![2, 128, 2, 2],
            ]
        );
        assert_eq!(pyr.strides, vec![4, 8, 16, 32]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let p = preset("resnet-mini").unwrap();
        let mut enc = build_encoder::<f32>(&p, 0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 48, 48]));
        assert!(matches!(
            enc.encode(&mut tape, x),
            Err(Error::BadSpatialDims { .. })
        ));
    }

    #[test]
    fn zero_input_stays_finite() {
        for name in ["resnet-mini", "convnext-mini"] {
            let p = preset(name).unwrap();
            let mut enc = build_encoder::<f32>(&p, 0);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]));
            let pyr = enc.encode(&mut tape, x).unwrap();
            for &f in &pyr.features {
                assert!(tape.value(f).is_all_finite(), "{name} produced non-finite");
            }
        }
    }
}
