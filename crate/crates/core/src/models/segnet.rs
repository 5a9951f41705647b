use serde::{Deserialize, Serialize};

use super::{check_classes, check_divisible, infer_single, Layers, ModelError, Net};
use crate::autodiff::{kernels, Graph, NodeId, Scalar, Tensor};
use crate::mask::SegMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub base_width: usize,
    pub channels: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { base_width: 8, channels: 3 }
    }
}

/// Two-level encoder/decoder with skip connections producing K-channel logits.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: SegConfig,
    pub classes: usize,
    pub net: Net,
}

pub fn build_segnet(cfg: &SegConfig, classes: usize, seed: u64, prefix: &str) -> Result<SegModel, ModelError> {
    check_classes(classes, 2)?;
    if cfg.base_width == 0 || cfg.channels == 0 {
        return Err(ModelError::Config("segmentation widths must be positive".into()));
    }
    let w = cfg.base_width;
    let mut net = Net::new(prefix, seed);
    net.conv_layer("e0a", cfg.channels, w, 3);
    net.conv_layer("e0b", w, w, 3);
    net.conv_layer("e1", w, 2 * w, 3);
    net.conv_layer("mid", 2 * w, 4 * w, 3);
    net.conv_layer("d1", 6 * w, 2 * w, 3);
    net.conv_layer("d0", 3 * w, w, 3);
    net.conv_layer("head", w, classes, 1);
    Ok(SegModel { cfg: cfg.clone(), classes, net })
}

impl SegModel {
    /// Logits `[N, K, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> NodeId {
        let l = Layers { prefix: self.net.prefix(), trainable };
        let conv_relu = |g: &mut Graph<T>, layer: &str, h: NodeId| {
            let h = l.conv(g, layer, h, 1, 1);
            g.relu(h)
        };
        let e0 = conv_relu(g, "e0a", x);
        let e0 = conv_relu(g, "e0b", e0);
        let p0 = g.maxpool2(e0);
        let e1 = conv_relu(g, "e1", p0);
        let p1 = g.maxpool2(e1);
        let m = conv_relu(g, "mid", p1);
        let u1 = g.upsample2(m);
        let c1 = g.concat_channels(u1, e1);
        let d1 = conv_relu(g, "d1", c1);
        let u0 = g.upsample2(d1);
        let c0 = g.concat_channels(u0, e0);
        let d0 = conv_relu(g, "d0", c0);
        l.conv(g, "head", d0, 1, 0)
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        if let [_, _, h, w] = *x.shape() {
            check_divisible(h, w, 4)?;
        }
        infer_single(&self.net, x, |g, input| self.forward(g, input, false))
    }

    /// Per-pixel class probabilities `[N, K, H, W]`.
    pub fn probabilities(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let logits = self.logits(x)?;
        let [n, k, h, w] = *logits.shape() else { unreachable!("segnet emits NCHW") };
        let p = kernels::softmax_channels(logits.data(), n, k, h * w, false);
        Ok(Tensor::new(logits.shape().to_vec(), p).expect("same size"))
    }

    /// Argmax label map per batch item.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<SegMask>, ModelError> {
        let logits = self.logits(x)?;
        Ok(argmax_masks(&logits))
    }
}

/// Channel argmax of an `[N, K, H, W]` tensor; ties go to the lower class id.
pub fn argmax_masks<T: Scalar>(scores: &Tensor<T>) -> Vec<SegMask> {
    let [n, k, h, w] = *scores.shape() else { panic!("argmax_masks needs NCHW") };
    let plane = h * w;
    (0..n)
        .map(|s| {
            let base = s * k * plane;
            let values = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if scores.data()[base + c * plane + p] > scores.data()[base + best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            SegMask::new(h, w, values).expect("sized")
        })
        .collect()
}
