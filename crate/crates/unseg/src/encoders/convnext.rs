//! ConvNeXt-style encoder with GRN blocks (the V2 design).
//!
//! Stem: 4x4 stride-4 patchify conv + channel layer norm. Downsampling
//! between stages: layer norm + 2x2 stride-2 conv. Block: depthwise 7x7 ->
//! channel layer norm -> 1x1 expand x4 -> GELU -> GRN -> 1x1 reduce, with a
//! residual add around the whole block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Encoder, EncoderPreset, FeaturePyramid};
use crate::autograd::{Tape, Var};
use crate::elem::Element;
use crate::error::Result;
use crate::nn::{Conv2d, ConvSpec, Grn, LayerNormCh, TensorVisitor};

/// MLP expansion inside each block.
const EXPAND: usize = 4;

struct ConvNextBlock<E: Element> {
    dw: Conv2d<E>,
    norm: LayerNormCh<E>,
    pw1: Conv2d<E>,
    grn: Grn<E>,
    pw2: Conv2d<E>,
}

impl<E: Element> ConvNextBlock<E> {
    fn new(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dw: Conv2d::new(
                format!("{name}.dwconv"),
                ConvSpec::dense(dim, dim, 7).groups(dim),
                rng,
            ),
            norm: LayerNormCh::new(format!("{name}.norm"), dim),
            pw1: Conv2d::new(
                format!("{name}.pw1"),
                ConvSpec::dense(dim, EXPAND * dim, 1).padding(0),
                rng,
            ),
            grn: Grn::new(format!("{name}.grn"), EXPAND * dim),
            pw2: Conv2d::new(
                format!("{name}.pw2"),
                ConvSpec::dense(EXPAND * dim, dim, 1).padding(0),
                rng,
            ),
        }
    }

    fn forward(&mut self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let mut y = self.dw.forward(tape, x)?;
        y = self.norm.forward(tape, y)?;
        y = self.pw1.forward(tape, y)?;
        y = tape.gelu(y);
        y = self.grn.forward(tape, y)?;
        y = self.pw2.forward(tape, y)?;
        tape.add(y, x)
    }

    fn visit(&mut self, f: &mut TensorVisitor<E>) {
        self.dw.visit(f);
        self.norm.visit(f);
        self.pw1.visit(f);
        self.grn.visit(f);
        self.pw2.visit(f);
    }
}

pub struct ConvNextEncoder<E: Element> {
    preset: EncoderPreset,
    stem_conv: Conv2d<E>,
    stem_norm: LayerNormCh<E>,
    /// One (norm, conv) downsample in front of each stage after the first.
    downsamples: Vec<(LayerNormCh<E>, Conv2d<E>)>,
    stages: Vec<Vec<ConvNextBlock<E>>>,
}

impl<E: Element> ConvNextEncoder<E> {
    pub fn new(preset: EncoderPreset, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = preset.stage_widths[0];
        let stem_conv = Conv2d::new(
            "enc.stem.conv",
            ConvSpec::dense(3, w0, 4).stride(4).padding(0),
            &mut rng,
        );
        let stem_norm = LayerNormCh::new("enc.stem.norm", w0);

        let mut downsamples = Vec::new();
        let mut stages = Vec::new();
        for (si, (&depth, &width)) in preset
            .stage_depths
            .iter()
            .zip(preset.stage_widths.iter())
            .enumerate()
        {
            if si > 0 {
                let prev = preset.stage_widths[si - 1];
                downsamples.push((
                    LayerNormCh::new(format!("enc.ds{si}.norm"), prev),
                    Conv2d::new(
                        format!("enc.ds{si}.conv"),
                        ConvSpec::dense(prev, width, 2).stride(2).padding(0),
                        &mut rng,
                    ),
                ));
            }
            let blocks = (0..depth)
                .map(|bi| ConvNextBlock::new(&format!("enc.s{si}.b{bi}"), width, &mut rng))
                .collect();
            stages.push(blocks);
        }
        Self {
            preset,
            stem_conv,
            stem_norm,
            downsamples,
            stages,
        }
    }
}

impl<E: Element> Encoder<E> for ConvNextEncoder<E> {
    fn preset(&self) -> &EncoderPreset {
        &self.preset
    }

    fn encode(&mut self, tape: &mut Tape<E>, x: Var) -> Result<FeaturePyramid> {
        super::check_input_dims(&self.preset, tape, x)?;
        let mut features = Vec::with_capacity(self.stages.len());
        let mut y = self.stem_conv.forward(tape, x)?;
        y = self.stem_norm.forward(tape, y)?;
        for (si, blocks) in self.stages.iter_mut().enumerate() {
            if si > 0 {
                let (norm, conv) = &mut self.downsamples[si - 1];
                y = norm.forward(tape, y)?;
                y = conv.forward(tape, y)?;
            }
            for block in blocks.iter_mut() {
                y = block.forward(tape, y)?;
            }
            features.push(y);
        }
        Ok(FeaturePyramid {
            features,
            strides: self.preset.feature_strides(),
        })
    }

    fn visit_tensors(&mut self, f: &mut TensorVisitor<E>) {
        self.stem_conv.visit(f);
        self.stem_norm.visit(f);
        for (si, blocks) in self.stages.iter_mut().enumerate() {
            if si > 0 {
                let (norm, conv) = &mut self.downsamples[si - 1];
                norm.visit(f);
                conv.visit(f);
            }
            for block in blocks.iter_mut() {
                block.visit(f);
            }
        }
    }

    fn set_training(&mut self, _on: bool) {
        // No batch statistics anywhere in this family.
    }
}

/// Layer-shape parameter count mirroring the construction above.
pub(super) fn param_plan(preset: &EncoderPreset) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let ln = |c: usize| 2 * c;
    let block = |d: usize| {
        // depthwise 7x7 + bias, norm, expand, GRN, reduce
        (d * 49 + d) + ln(d) + conv(d, EXPAND * d, 1) + 2 * EXPAND * d + conv(EXPAND * d, d, 1)
    };

    let w0 = preset.stage_widths[0];
    let mut total = conv(3, w0, 4) + ln(w0);
    for (si, (&depth, &width)) in preset
        .stage_depths
        .iter()
        .zip(preset.stage_widths.iter())
        .enumerate()
    {
        if si > 0 {
            let prev = preset.stage_widths[si - 1];
            total += ln(prev) + conv(prev, width, 2);
        }
        total += depth * block(width);
    }
    total
}
