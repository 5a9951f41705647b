use serde::{Deserialize, Serialize};

use super::{check_divisible, infer_single, Layers, ModelError, Net};
use crate::autodiff::{Graph, NodeId, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslatorConfig {
    pub base_width: usize,
    pub res_blocks: usize,
    pub channels: usize,
    /// Feed the input image to the output head alongside the decoder features.
    pub input_skip: bool,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self { base_width: 8, res_blocks: 3, channels: 3, input_skip: true }
    }
}

/// ResNet-style image-to-image generator: two stride-2 encoder convs, a residual
/// trunk at quarter resolution, two transposed convs back up, and a
/// `0.5·tanh + 0.5` head so outputs stay in `[0, 1]`. With `input_skip` the head
/// also sees the full-resolution input, which the narrow quarter-resolution trunk
/// cannot carry on its own.
#[derive(Debug, Clone)]
pub struct TranslatorModel {
    pub cfg: TranslatorConfig,
    pub net: Net,
}

pub fn build_translator(cfg: &TranslatorConfig, seed: u64, prefix: &str) -> Result<TranslatorModel, ModelError> {
    if cfg.base_width == 0 || cfg.channels == 0 {
        return Err(ModelError::Config("translator widths must be positive".into()));
    }
    let (c, w) = (cfg.channels, cfg.base_width);
    let mut net = Net::new(prefix, seed);
    net.conv_layer("enc0", c, w, 3);
    net.conv_layer("enc1", w, 2 * w, 3);
    net.conv_layer("enc2", 2 * w, 2 * w, 3);
    for i in 0..cfg.res_blocks {
        net.conv_layer(&format!("res{i}a"), 2 * w, 2 * w, 3);
        net.conv_layer(&format!("res{i}b"), 2 * w, 2 * w, 3);
    }
    net.convt_layer("up0", 2 * w, 2 * w, 3, 2);
    net.convt_layer("up1", 2 * w, w, 3, 2);
    let head_in = if cfg.input_skip { w + c } else { w };
    net.conv_layer("out", head_in, c, 3);
    Ok(TranslatorModel { cfg: cfg.clone(), net })
}

impl TranslatorModel {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> NodeId {
        let l = Layers { prefix: self.net.prefix(), trainable };
        let block = |g: &mut Graph<T>, layer: &str, h: NodeId, stride: usize| {
            let h = l.conv(g, layer, h, stride, 1);
            let h = g.instance_norm(h);
            g.relu(h)
        };
        let mut h = block(g, "enc0", x, 1);
        h = block(g, "enc1", h, 2);
        h = block(g, "enc2", h, 2);
        for i in 0..self.cfg.res_blocks {
            let r = block(g, &format!("res{i}a"), h, 1);
            let r = l.conv(g, &format!("res{i}b"), r, 1, 1);
            let r = g.instance_norm(r);
            h = g.add(h, r);
        }
        for layer in ["up0", "up1"] {
            h = l.convt(g, layer, h);
            h = g.instance_norm(h);
            h = g.relu(h);
        }
        let h = if self.cfg.input_skip { g.concat_channels(h, x) } else { h };
        let h = l.conv(g, "out", h, 1, 1);
        let h = g.tanh(h);
        let h = g.scale(h, 0.5);
        g.add_scalar(h, 0.5)
    }

    /// Translate an `[N, C, H, W]` batch; extents must be divisible by 4.
    pub fn translate(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        if let [_, _, h, w] = *x.shape() {
            check_divisible(h, w, 4)?;
        }
        infer_single(&self.net, x, |g, input| self.forward(g, input, false))
    }
}
