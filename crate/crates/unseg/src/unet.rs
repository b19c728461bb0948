//! U-Net assembly: encoder pyramid, skip-concatenation decoder, logit head.
//!
//! Each decoder stage bilinearly upsamples the previous feature, concatenates
//! the same-resolution encoder skip, and applies two 3x3 conv + batch norm +
//! ReLU pairs. After the shallowest skip the feature is upsampled the rest of
//! the way to input resolution and a 1x1 convolution produces single-channel
//! crack logits.
//!
//! Input sizes that are not divisible by the encoder stride (the 270 / 540
//! presets) are reflect-padded up to the next multiple and the logits are
//! cropped back, so stride arithmetic stays exact at any configured size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::MaskBuf;
use crate::autograd::{Tape, UpsampleMode, Var};
use crate::elem::Element;
use crate::encoders::{build_encoder, Encoder, EncoderPreset};
use crate::error::{Error, Result};
use crate::kernels::pad::Pad2;
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, TensorRole, TensorVisitor};
use crate::tensor::Tensor;

/// Structural description of an assembled U-Net.
#[derive(Clone, Debug)]
pub struct UNetConfig {
    pub preset: EncoderPreset,
    /// (height, width) the model accepts.
    pub input_size: (usize, usize),
    /// Channels per decoder stage, deepest first; one per skip level.
    pub decoder_widths: Vec<usize>,
    /// Probability threshold for [`UNet::predict_mask`].
    pub threshold: f64,
}

impl UNetConfig {
    /// Default configuration for a preset: its native input size, decoder
    /// widths at half the corresponding skip widths, threshold 0.5.
    pub fn for_preset(preset: EncoderPreset, input_size: Option<(usize, usize)>) -> Self {
        let size = input_size.unwrap_or((preset.default_input_size, preset.default_input_size));
        let channels = preset.feature_channels();
        let skips = &channels[..channels.len() - 1];
        let decoder_widths = skips
            .iter()
            .rev()
            .map(|&c| (c / 2).max(4))
            .collect();
        Self {
            preset,
            input_size: size,
            decoder_widths,
            threshold: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        let skip_levels = self.preset.feature_channels().len() - 1;
        if self.decoder_widths.len() != skip_levels {
            return Err(Error::InvalidConfig(format!(
                "decoder widths ({}) must match skip levels ({skip_levels})",
                self.decoder_widths.len()
            )));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::InvalidConfig("input size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

struct DecoderBlock<E: Element> {
    conv1: Conv2d<E>,
    bn1: BatchNorm2d<E>,
    conv2: Conv2d<E>,
    bn2: BatchNorm2d<E>,
}

impl<E: Element> DecoderBlock<E> {
    fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(
                format!("{name}.conv1"),
                ConvSpec::dense(in_ch, out_ch, 3).bias(false),
                rng,
            ),
            bn1: BatchNorm2d::new(format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(
                format!("{name}.conv2"),
                ConvSpec::dense(out_ch, out_ch, 3).bias(false),
                rng,
            ),
            bn2: BatchNorm2d::new(format!("{name}.bn2"), out_ch),
        }
    }

    fn forward(&mut self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let mut y = self.conv1.forward(tape, x)?;
        y = self.bn1.forward(tape, y)?;
        y = tape.relu(y);
        y = self.conv2.forward(tape, y)?;
        y = self.bn2.forward(tape, y)?;
        Ok(tape.relu(y))
    }

    fn visit(&mut self, f: &mut TensorVisitor<E>) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
    }

    fn set_training(&mut self, on: bool) {
        self.bn1.training = on;
        self.bn2.training = on;
    }
}

pub struct UNet<E: Element> {
    pub config: UNetConfig,
    encoder: Box<dyn Encoder<E>>,
    decoder: Vec<DecoderBlock<E>>,
    /// Skip-free stages lifting the last decoder feature to full resolution,
    /// one per remaining factor of two.
    tail: Vec<DecoderBlock<E>>,
    head: Conv2d<E>,
    training: bool,
}

impl<E: Element> UNet<E> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = build_encoder::<E>(&config.preset, seed);
        // Decoder weights draw from their own stream so encoder init is
        // byte-identical whether or not a decoder follows it.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00de_c0de);

        let channels = config.preset.feature_channels();
        let strides = config.preset.feature_strides();
        let skips: Vec<usize> = channels[..channels.len() - 1].to_vec();

        let mut decoder = Vec::with_capacity(skips.len());
        let mut prev = *channels.last().expect("pyramid non-empty");
        for (i, &skip_ch) in skips.iter().rev().enumerate() {
            let out_ch = config.decoder_widths[i];
            decoder.push(DecoderBlock::new(
                &format!("dec.d{i}"),
                prev + skip_ch,
                out_ch,
                &mut rng,
            ));
            prev = out_ch;
        }

        // The shallowest skip sits above stride 1; finish with skip-free
        // upsample + conv stages so the head sees full-resolution features.
        let shallowest_stride = strides[0];
        debug_assert!(shallowest_stride.is_power_of_two());
        let mut tail = Vec::new();
        for i in 0..shallowest_stride.trailing_zeros() as usize {
            let out_ch = prev.max(16);
            tail.push(DecoderBlock::new(
                &format!("dec.t{i}"),
                prev,
                out_ch,
                &mut rng,
            ));
            prev = out_ch;
        }

        let head = Conv2d::new(
            "head.conv",
            ConvSpec::dense(prev, 1, 1).padding(0),
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
            tail,
            head,
            training: true,
        })
    }

    pub fn preset_name(&self) -> &'static str {
        self.config.preset.name
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
        self.encoder.set_training(on);
        for block in self.decoder.iter_mut().chain(self.tail.iter_mut()) {
            block.set_training(on);
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Visit every named tensor (parameters and norm buffers) in a fixed
    /// order: encoder, decoder, head.
    pub fn visit_tensors(&mut self, f: &mut TensorVisitor<E>) {
        self.encoder.visit_tensors(f);
        for block in self.decoder.iter_mut().chain(self.tail.iter_mut()) {
            block.visit(f);
        }
        self.head.visit(f);
    }

    /// Learnable parameter count.
    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_tensors(&mut |_, role, t| {
            if role == TensorRole::Param {
                total += t.numel();
            }
        });
        total
    }

    /// Zero the head weights; useful for calibration tests (all-zero logits
    /// mean probability 0.5 everywhere).
    pub fn zero_head(&mut self) {
        self.head.weight = Tensor::zeros(self.head.weight.shape());
        if let Some(b) = self.head.bias.as_mut() {
            *b = Tensor::zeros(b.shape());
        }
    }

    /// Forward pass to logits with the same spatial size as the input.
    pub fn forward(&mut self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        let (want_h, want_w) = self.config.input_size;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 input channels, got {c}"
            )));
        }
        if (h, w) != (want_h, want_w) {
            return Err(Error::BadInputSize {
                got_h: h,
                got_w: w,
                want_h,
                want_w,
            });
        }

        // Pad up to the encoder stride if needed, crop the logits back after.
        let stride = self.config.preset.max_stride();
        let pad_h = (stride - h % stride) % stride;
        let pad_w = (stride - w % stride) % stride;
        let pad = Pad2 {
            top: pad_h / 2,
            bottom: pad_h - pad_h / 2,
            left: pad_w / 2,
            right: pad_w - pad_w / 2,
        };
        let x_padded = tape.reflect_pad(x, pad)?;

        let pyramid = self.encoder.encode(tape, x_padded)?;
        let mut feats = pyramid.features;
        let mut y = feats.pop().expect("pyramid non-empty");
        for block in self.decoder.iter_mut() {
            let skip = feats.pop().expect("one skip per decoder stage");
            y = tape.upsample2(y, UpsampleMode::Bilinear)?;
            y = tape.concat_channels(y, skip)?;
            y = block.forward(tape, y)?;
        }
        for block in self.tail.iter_mut() {
            // Nearest, not bilinear: 1-2 px cracks survive replication but
            // not pre-smoothing, and the convs below do the interpolation.
            y = tape.upsample2(y, UpsampleMode::Nearest)?;
            y = block.forward(tape, y)?;
        }
        let logits = self.head.forward(tape, y)?;
        tape.crop(logits, pad.top, pad.left, h, w)
    }

    /// Crack probabilities for a single standardized image tensor
    /// (1 x 3 x H x W), in eval mode.
    pub fn predict_probs(&mut self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let was_training = self.training;
        self.set_training(false);
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let logits = self.forward(&mut tape, x);
        self.set_training(was_training);
        let logits = logits?;
        let mut t2 = Tape::new();
        let l = t2.constant(tape.value(logits).clone());
        let probs = t2.sigmoid(l);
        Ok(t2.value(probs).clone())
    }

    /// Threshold the probability map into a binary mask. The comparison is
    /// inclusive: probability exactly at the threshold counts as crack.
    pub fn predict_mask(&mut self, image: &Tensor<E>, threshold: f64) -> Result<MaskBuf> {
        let probs = self.predict_probs(image)?;
        let (_, _, h, w) = probs.dims4()?;
        let mut mask = MaskBuf::new(w, h);
        for (m, &p) in mask.data.iter_mut().zip(probs.data().iter()) {
            *m = u8::from(p.to_f64() >= threshold);
        }
        Ok(mask)
    }
}
