//! Convolutional encoder, Slot Attention and spatial broadcast decoder.
//!
//! Images are `[L, H, W, 3]` with values in `[-1, 1]`. Each slot is decoded
//! separately into RGB plus an alpha logit; the logits are normalized across
//! slots per pixel and used to mix the per-slot images.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::slot_attention::{
    BatchStats, NormalizationMode, SlotAttention, SlotAttentionConfig, DEFAULT_EPS,
};
use crate::tensor::{Tape, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Square image side.
    pub resolution: usize,
    pub encoder_channels: usize,
    pub encoder_layers: usize,
    pub decoder_channels: usize,
    /// Side of the grid each slot is tiled over before upsampling.
    pub broadcast: usize,
    /// Number of stride-2 transposed convolutions; `broadcast << upsample_layers`
    /// must equal `resolution`.
    pub upsample_layers: usize,
    /// Token, key/query/value and slot width.
    pub dim: usize,
    pub slot_mlp_hidden: usize,
    pub mode: NormalizationMode,
}

impl AutoencoderConfig {
    /// 32×32 images, 32 channels, 32-dimensional slots.
    pub fn desk(mode: NormalizationMode) -> Self {
        Self {
            resolution: 32,
            encoder_channels: 32,
            encoder_layers: 4,
            decoder_channels: 32,
            broadcast: 4,
            upsample_layers: 3,
            dim: 32,
            slot_mlp_hidden: 64,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.resolution > 0
            && self.encoder_channels > 0
            && self.encoder_layers > 0
            && self.decoder_channels > 0
            && self.broadcast > 0
            && self.dim > 0
            && self.slot_mlp_hidden > 0
            && self.broadcast.checked_shl(self.upsample_layers as u32) == Some(self.resolution);
        if !ok {
            return Err(Error::Config(format!(
                "autoencoder: need positive widths and broadcast * 2^upsample_layers == resolution ({} * 2^{} vs {})",
                self.broadcast, self.upsample_layers, self.resolution
            )));
        }
        self.mode.validate()
    }
}

/// Convolution or transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub transposed: bool,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        (stride, pad, out_pad): (usize, usize, usize),
        transposed: bool,
    ) -> Self {
        let shape = if transposed {
            [cin, k, k, cout]
        } else {
            [k, k, cin, cout]
        };
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &shape, k * k * cin, k * k * cout),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
            out_pad,
            transposed,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), p.var(self.bias));
        if self.transposed {
            tape.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
        } else {
            tape.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

/// Four linear ramps per cell, `[h * w, 4]`: left→right, right→left,
/// top→bottom, bottom→top, each spanning 0 to 1. An axis of extent 1 yields 0.
pub fn position_grid(h: usize, w: usize) -> Tensor {
    let ramp = |t: usize, n: usize| {
        if n <= 1 {
            (0.0, 0.0)
        } else {
            let span = (n - 1) as f64;
            (t as f64 / span, (n - 1 - t) as f64 / span)
        }
    };
    let mut data = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        let (down, up) = ramp(i, h);
        for j in 0..w {
            let (right, left) = ramp(j, w);
            data.extend_from_slice(&[right, left, down, up]);
        }
    }
    Tensor::from_parts(vec![h * w, 4], data)
}

/// Adds `affine(ramps)` to every image of `features: [B, H, W, C]`.
pub fn positional_embed(tape: &mut Tape, p: &Bound, features: Var, affine: &Linear) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    let [_, h, w, c] = shape[..] else {
        return Err(Error::shape(
            "positional_embed",
            format!("expected [B,H,W,C], got {shape:?}"),
        ));
    };
    if affine.in_dim != 4 || affine.out_dim != c {
        return Err(Error::shape(
            "positional_embed",
            format!(
                "affine maps {}→{}, features have {c} channels",
                affine.in_dim, affine.out_dim
            ),
        ));
    }
    let grid = tape.constant(position_grid(h, w));
    let emb = affine.forward(tape, p, grid)?;
    let emb = tape.reshape(emb, &[h, w, c])?;
    tape.add_broadcast(features, emb)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<ConvLayer>,
    pub position: Linear,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &AutoencoderConfig) -> Self {
        let c = cfg.encoder_channels;
        let convs = (0..cfg.encoder_layers)
            .map(|i| {
                let cin = if i == 0 { IMAGE_CHANNELS } else { c };
                ConvLayer::new(
                    store,
                    rng,
                    &format!("encoder.conv{i}"),
                    (cin, c, 5),
                    (1, 2, 0),
                    false,
                )
            })
            .collect();
        Self {
            convs,
            position: Linear::new(store, rng, "encoder.position", 4, c, true),
            norm: LayerNorm::new(store, "encoder.norm", c, DEFAULT_EPS),
            mlp: Mlp::new(store, rng, "encoder.mlp", c, cfg.dim, cfg.dim),
        }
    }

    /// `images: [L, H, W, 3] -> tokens [L * H * W, D]`, row-major per image.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var> {
        let shape = tape.value(images).shape().to_vec();
        let [l, h, w, c] = shape[..] else {
            return Err(Error::contract(
                "encode",
                format!("images must be [L,H,W,3], got {shape:?}"),
            ));
        };
        if c != IMAGE_CHANNELS {
            return Err(Error::contract(
                "encode",
                format!("expected 3 channels, got {c}"),
            ));
        }
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(tape, p, x)?;
            x = tape.relu(x);
        }
        let x = positional_embed(tape, p, x, &self.position)?;
        let width = tape.value(x).shape()[3];
        let x = tape.reshape(x, &[l * h * w, width])?;
        let x = self.norm.forward(tape, p, x)?;
        self.mlp.forward(tape, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub broadcast: usize,
    pub position: Linear,
    pub layers: Vec<ConvLayer>,
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &AutoencoderConfig) -> Self {
        let c = cfg.decoder_channels;
        let mut layers = Vec::new();
        for i in 0..cfg.upsample_layers {
            let cin = if i == 0 { cfg.dim } else { c };
            layers.push(ConvLayer::new(
                store,
                rng,
                &format!("decoder.up{i}"),
                (cin, c, 5),
                (2, 2, 1),
                true,
            ));
        }
        let cin = if cfg.upsample_layers == 0 { cfg.dim } else { c };
        layers.push(ConvLayer::new(
            store,
            rng,
            "decoder.refine",
            (cin, c, 5),
            (1, 2, 0),
            true,
        ));
        layers.push(ConvLayer::new(
            store,
            rng,
            "decoder.head",
            (c, IMAGE_CHANNELS + 1, 3),
            (1, 1, 0),
            true,
        ));
        Self {
            broadcast: cfg.broadcast,
            position: Linear::new(store, rng, "decoder.position", 4, cfg.dim, true),
            layers,
        }
    }

    /// `slots: [S, D] -> [S, H, W, 4]`; the last channel is the alpha logit.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, slots: Var) -> Result<Var> {
        let (s, d) = tape.value(slots).dims2()?;
        let g = self.broadcast;
        let x = tape.broadcast_rows(slots, g * g)?;
        let x = tape.reshape(x, &[s, g, g, d])?;
        let mut x = positional_embed(tape, p, x, &self.position)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

pub struct ForwardOutput {
    pub loss: Var,
    /// `[L, H * W, 3]`
    pub reconstruction: Var,
    /// `[L, K, H * W]`, softmax over slots per pixel.
    pub masks: Tensor,
    pub slots: Vec<Var>,
    /// First-iteration batch statistics in batch-scaled training.
    pub moments: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub encoder: Encoder,
    pub slot_attention: SlotAttention,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: AutoencoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, rng, &config);
        let sa_config =
            SlotAttentionConfig::new(config.dim, config.dim, config.slot_mlp_hidden, config.mode);
        let slot_attention = SlotAttention::new(store, rng, "slot_attention", sa_config)?;
        let decoder = Decoder::new(store, rng, &config);
        Ok(Self {
            config,
            encoder,
            slot_attention,
            decoder,
        })
    }

    /// Encodes, runs Slot Attention with `slots` freshly sampled slots per
    /// image, decodes, blends and scores the reconstruction.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        images: &Tensor,
        slots: usize,
        iters: usize,
        stats: Option<&BatchStats>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        let shape = images.shape().to_vec();
        let [l, h, w, _] = shape[..] else {
            return Err(Error::contract(
                "forward",
                format!("images must be [L,H,W,3], got {shape:?}"),
            ));
        };
        if h != self.config.resolution || w != self.config.resolution {
            return Err(Error::shape(
                "forward",
                format!(
                    "images are {h}x{w}, model expects {0}x{0}",
                    self.config.resolution
                ),
            ));
        }
        if slots == 0 {
            return Err(Error::contract("forward", "at least one slot is required"));
        }
        let pixels = h * w;
        let x = tape.constant(images.clone());
        let tokens = self.encoder.forward(tape, p, x)?;
        let inputs = (0..l)
            .map(|i| tape.slice_rows(tokens, i * pixels, pixels))
            .collect::<Result<Vec<_>>>()?;
        let init = (0..l)
            .map(|_| self.slot_attention.sample_slots(tape, p, slots, rng))
            .collect::<Result<Vec<_>>>()?;
        let run = self
            .slot_attention
            .run_batch(tape, p, &inputs, &init, iters, stats)?;

        let all = tape.concat_rows(&run.slots)?;
        let decoded = self.decoder.forward(tape, p, all)?;
        let decoded = tape.reshape(decoded, &[l, slots, pixels, IMAGE_CHANNELS + 1])?;
        let (reconstruction, masks) = tape.alpha_blend(decoded)?;
        let target = tape.constant(images.clone().reshape(&[l, pixels, IMAGE_CHANNELS])?);
        let loss = reconstruction_loss(tape, target, reconstruction)?;
        Ok(ForwardOutput {
            loss,
            reconstruction,
            masks,
            slots: run.slots,
            moments: run.moments,
        })
    }
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Softmax-over-slots masks and the mask-weighted sum of per-slot images.
/// `rgbs: [K, P, 3]`, `alpha_logits: [K, P]`; returns `([P, 3], [K, P])`.
pub fn blend(rgbs: &Tensor, alpha_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = rgbs.shape().to_vec();
    let [k, p, c] = shape[..] else {
        return Err(Error::shape(
            "blend",
            format!("rgbs must be [K,P,C], got {shape:?}"),
        ));
    };
    if alpha_logits.shape() != [k, p] {
        return Err(Error::shape(
            "blend",
            format!("alpha logits {:?} vs [{k}, {p}]", alpha_logits.shape()),
        ));
    }
    let mut packed = Vec::with_capacity(k * p * (c + 1));
    for ki in 0..k {
        for pi in 0..p {
            packed.extend_from_slice(&rgbs.data()[(ki * p + pi) * c..][..c]);
            packed.push(alpha_logits.data()[ki * p + pi]);
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, k, p, c + 1], packed)?);
    let (out, masks) = tape.alpha_blend(x)?;
    Ok((
        tape.value(out).clone().reshape(&[p, c])?,
        masks.reshape(&[k, p])?,
    ))
}

/// Per-pixel argmax over the slot axis of `masks: [K, P]` (any trailing
/// pixel shape); ties go to the lowest slot index.
pub fn extract_segmentation(masks: &Tensor) -> Result<Vec<usize>> {
    let shape = masks.shape();
    if shape.len() < 2 || shape[0] == 0 {
        return Err(Error::shape(
            "extract_segmentation",
            format!("expected [K, ...], got {shape:?}"),
        ));
    }
    let k = shape[0];
    let p = masks.numel() / k;
    let d = masks.data();
    Ok((0..p)
        .map(|pi| {
            let mut best = 0;
            for ki in 1..k {
                if d[ki * p + pi] > d[best * p + pi] {
                    best = ki;
                }
            }
            best
        })
        .collect())
}
