//! Residual bottleneck encoder (ResNet-style).
//!
//! Canonical layout: 7x7 stride-2 stem with batch norm, 2x2 max pool, then
//! four stages of bottleneck blocks (1x1 reduce -> 3x3 -> 1x1 expand, batch
//! norm + ReLU, projection shortcut whenever stride or width changes). All
//! convolutions are bias-free; the norms carry the affine terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Encoder, EncoderPreset, FeaturePyramid};
use crate::autograd::{Tape, Var};
use crate::elem::Element;
use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, TensorVisitor};

/// Bottleneck expansion: stage width = 4x the inner width.
const EXPANSION: usize = 4;

struct Bottleneck<E: Element> {
    conv1: Conv2d<E>,
    bn1: BatchNorm2d<E>,
    conv2: Conv2d<E>,
    bn2: BatchNorm2d<E>,
    conv3: Conv2d<E>,
    bn3: BatchNorm2d<E>,
    shortcut: Option<(Conv2d<E>, BatchNorm2d<E>)>,
}

impl<E: Element> Bottleneck<E> {
    fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let inner = out_ch / EXPANSION;
        let conv1 = Conv2d::new(
            format!("{name}.conv1"),
            ConvSpec::dense(in_ch, inner, 1).padding(0).bias(false),
            rng,
        );
        let bn1 = BatchNorm2d::new(format!("{name}.bn1"), inner);
        let conv2 = Conv2d::new(
            format!("{name}.conv2"),
            ConvSpec::dense(inner, inner, 3).stride(stride).bias(false),
            rng,
        );
        let bn2 = BatchNorm2d::new(format!("{name}.bn2"), inner);
        let conv3 = Conv2d::new(
            format!("{name}.conv3"),
            ConvSpec::dense(inner, out_ch, 1).padding(0).bias(false),
            rng,
        );
        let bn3 = BatchNorm2d::new(format!("{name}.bn3"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(
                    format!("{name}.down.conv"),
                    ConvSpec::dense(in_ch, out_ch, 1)
                        .padding(0)
                        .stride(stride)
                        .bias(false),
                    rng,
                ),
                BatchNorm2d::new(format!("{name}.down.bn"), out_ch),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            shortcut,
        }
    }

    fn forward(&mut self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let mut y = self.conv1.forward(tape, x)?;
        y = self.bn1.forward(tape, y)?;
        y = tape.relu(y);
        y = self.conv2.forward(tape, y)?;
        y = self.bn2.forward(tape, y)?;
        y = tape.relu(y);
        y = self.conv3.forward(tape, y)?;
        y = self.bn3.forward(tape, y)?;
        let short = match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s)?
            }
            None => x,
        };
        let sum = tape.add(y, short)?;
        Ok(tape.relu(sum))
    }

    fn visit(&mut self, f: &mut TensorVisitor<E>) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        self.conv3.visit(f);
        self.bn3.visit(f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit(f);
            bn.visit(f);
        }
    }

    fn set_training(&mut self, on: bool) {
        self.bn1.training = on;
        self.bn2.training = on;
        self.bn3.training = on;
        if let Some((_, bn)) = self.shortcut.as_mut() {
            bn.training = on;
        }
    }
}

pub struct ResidualEncoder<E: Element> {
    preset: EncoderPreset,
    stem_conv: Conv2d<E>,
    stem_bn: BatchNorm2d<E>,
    stages: Vec<Vec<Bottleneck<E>>>,
}

impl<E: Element> ResidualEncoder<E> {
    pub fn new(preset: EncoderPreset, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv2d::new(
            "enc.stem.conv",
            ConvSpec::dense(3, preset.stem_width, 7)
                .stride(2)
                .padding(3)
                .bias(false),
            &mut rng,
        );
        let stem_bn = BatchNorm2d::new("enc.stem.bn", preset.stem_width);

        let mut stages = Vec::new();
        let mut in_ch = preset.stem_width;
        for (si, (&depth, &width)) in preset
            .stage_depths
            .iter()
            .zip(preset.stage_widths.iter())
            .enumerate()
        {
            let mut blocks = Vec::new();
            for bi in 0..depth {
                // Stage 0 follows the max pool, so its first block keeps
                // stride 1; later stages downsample in their first block.
                let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(
                    &format!("enc.s{si}.b{bi}"),
                    in_ch,
                    width,
                    stride,
                    &mut rng,
                ));
                in_ch = width;
            }
            stages.push(blocks);
        }
        Self {
            preset,
            stem_conv,
            stem_bn,
            stages,
        }
    }
}

impl<E: Element> Encoder<E> for ResidualEncoder<E> {
    fn preset(&self) -> &EncoderPreset {
        &self.preset
    }

    fn encode(&mut self, tape: &mut Tape<E>, x: Var) -> Result<FeaturePyramid> {
        super::check_input_dims(&self.preset, tape, x)?;
        let mut features = Vec::with_capacity(self.stages.len() + 1);
        let mut y = self.stem_conv.forward(tape, x)?;
        y = self.stem_bn.forward(tape, y)?;
        y = tape.relu(y);
        features.push(y); // stride 2
        y = tape.maxpool2(y)?;
        for blocks in self.stages.iter_mut() {
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
        self.stem_bn.visit(f);
        for blocks in self.stages.iter_mut() {
            for block in blocks.iter_mut() {
                block.visit(f);
            }
        }
    }

    fn set_training(&mut self, on: bool) {
        self.stem_bn.training = on;
        for blocks in self.stages.iter_mut() {
            for block in blocks.iter_mut() {
                block.set_training(on);
            }
        }
    }
}

/// Layer-shape parameter count mirroring the construction above.
pub(super) fn param_plan(preset: &EncoderPreset) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let bn = |c: usize| 2 * c;

    let mut total = conv(3, preset.stem_width, 7) + bn(preset.stem_width);
    let mut in_ch = preset.stem_width;
    for (si, (&depth, &width)) in preset
        .stage_depths
        .iter()
        .zip(preset.stage_widths.iter())
        .enumerate()
    {
        let inner = width / EXPANSION;
        for bi in 0..depth {
            let stride = if bi == 0 && si > 0 { 2 } else { 1 };
            total += conv(in_ch, inner, 1) + bn(inner);
            total += conv(inner, inner, 3) + bn(inner);
            total += conv(inner, width, 1) + bn(width);
            if stride != 1 || in_ch != width {
                total += conv(in_ch, width, 1) + bn(width);
            }
            in_ch = width;
        }
    }
    total
}
