use serde::{Deserialize, Serialize};

use super::{check_classes, check_divisible, Layers, ModelError, Net};
use crate::autodiff::{Graph, NodeId, Scalar};

/// Stages of the image encoder; pooling follows all but the last.
const STAGES: usize = 6;
/// Spatial reduction from input to the bottleneck, `2^(STAGES − 1)`.
pub const CPN_DOWNSAMPLE: usize = 1 << (STAGES - 1);
/// Negative slope of the hidden activations. Under label permutation the class
/// marginal is uniform, so a constant output is a strong attractor, and plain
/// ReLU units in the narrow late stages tend to die into it.
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpnConfig {
    /// Multiplier applied to the reference channel schedules.
    pub width_mult: f64,
    pub image_widths: [usize; STAGES],
    pub decoder_widths: [usize; STAGES],
    /// Floor on the scaled decoder widths. The reference schedule narrows to 16
    /// channels at full resolution, which a width multiplier would otherwise
    /// squeeze below the class count.
    pub min_decoder_width: usize,
    /// Width of the hidden layers of the segmentation branch.
    pub seg_width: usize,
    /// Channels of the segmentation code entering the decoder.
    pub bottleneck_channels: usize,
    pub channels: usize,
}

impl Default for CpnConfig {
    fn default() -> Self {
        Self {
            width_mult: 0.25,
            image_widths: [16, 32, 64, 128, 256, 256],
            decoder_widths: [512, 256, 128, 64, 32, 16],
            min_decoder_width: 16,
            seg_width: 8,
            bottleneck_channels: 4,
            channels: 3,
        }
    }
}

impl CpnConfig {
    /// The reference (unscaled) architecture.
    pub fn reference() -> Self {
        Self { width_mult: 1.0, ..Self::default() }
    }

    fn scaled(&self, w: usize) -> usize {
        ((w as f64 * self.width_mult).round() as usize).max(1)
    }

    pub fn image_encoder_widths(&self) -> [usize; STAGES] {
        self.image_widths.map(|w| self.scaled(w))
    }

    pub fn decoder_stage_widths(&self) -> [usize; STAGES] {
        self.decoder_widths.map(|w| self.scaled(w).max(self.min_decoder_width))
    }

    /// Scalars per image carried by the segmentation branch into the decoder.
    pub fn bottleneck_size(&self, height: usize, width: usize) -> usize {
        self.bottleneck_channels * (height / CPN_DOWNSAMPLE) * (width / CPN_DOWNSAMPLE)
    }
}

/// Conditional prior network: reconstructs a (permuted) segmentation from the
/// image and a narrow code of the segmentation. Skips run from the image
/// encoder to the decoder only.
#[derive(Debug, Clone)]
pub struct CpnModel {
    pub cfg: CpnConfig,
    pub classes: usize,
    pub net: Net,
}

pub fn build_cpn(cfg: &CpnConfig, classes: usize, seed: u64, prefix: &str) -> Result<CpnModel, ModelError> {
    check_classes(classes, 1)?;
    if cfg.width_mult <= 0.0 || !cfg.width_mult.is_finite() {
        return Err(ModelError::Config(format!("width_mult must be positive, got {}", cfg.width_mult)));
    }
    if cfg.seg_width == 0 || cfg.bottleneck_channels == 0 || cfg.channels == 0 {
        return Err(ModelError::Config("CPN widths must be positive".into()));
    }
    let img = cfg.image_encoder_widths();
    let dec = cfg.decoder_stage_widths();
    let mut net = Net::new(prefix, seed);
    let mut cin = cfg.channels;
    for (s, &w) in img.iter().enumerate() {
        net.conv_layer(&format!("img{s}"), cin, w, 3);
        cin = w;
    }
    let mut cin = classes;
    for s in 0..STAGES - 1 {
        let cout = if s == STAGES - 2 { cfg.bottleneck_channels } else { cfg.seg_width };
        net.conv_layer(&format!("seg{s}"), cin, cout, 3);
        cin = cout;
    }
    let mut cin = cfg.bottleneck_channels;
    for s in 0..STAGES {
        let skip = img[STAGES - 1 - s];
        net.conv_layer(&format!("dec{s}"), cin + skip, dec[s], 3);
        cin = dec[s];
    }
    net.conv_layer("head", cin, classes, 1);
    Ok(CpnModel { cfg: cfg.clone(), classes, net })
}

/// Output nodes of one CPN application.
#[derive(Debug, Clone, Copy)]
pub struct CpnNodes {
    pub logits: NodeId,
    /// Segmentation code entering the decoder, `[N, bottleneck_channels, H/32, W/32]`.
    pub bottleneck: NodeId,
}

impl CpnModel {
    pub fn check_input(&self, height: usize, width: usize) -> Result<(), ModelError> {
        check_divisible(height, width, CPN_DOWNSAMPLE)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: NodeId, seg: NodeId, trainable: bool) -> CpnNodes {
        let l = Layers { prefix: self.net.prefix(), trainable };
        let conv_relu = |g: &mut Graph<T>, layer: &str, h: NodeId, stride: usize| {
            let h = l.conv(g, layer, h, stride, 1);
            g.leaky_relu(h, LEAK)
        };
        let mut skips = Vec::with_capacity(STAGES);
        let mut h = image;
        for s in 0..STAGES {
            let f = conv_relu(g, &format!("img{s}"), h, 1);
            skips.push(f);
            if s + 1 < STAGES {
                h = g.maxpool2(f);
            }
        }
        let mut code = seg;
        for s in 0..STAGES - 1 {
            code = if s == STAGES - 2 {
                l.conv(g, &format!("seg{s}"), code, 2, 1)
            } else {
                conv_relu(g, &format!("seg{s}"), code, 2)
            };
        }
        let bottleneck = code;
        let mut d = bottleneck;
        for s in 0..STAGES {
            if s > 0 {
                d = g.upsample2(d);
            }
            let cat = g.concat_channels(d, skips[STAGES - 1 - s]);
            d = conv_relu(g, &format!("dec{s}"), cat, 1);
        }
        let logits = l.conv(g, "head", d, 1, 0);
        CpnNodes { logits, bottleneck }
    }
}
