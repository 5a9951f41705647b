use serde::{Deserialize, Serialize};

use super::{infer_single, Layers, ModelError, Net};
use crate::autodiff::{Graph, NodeId, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_width: 8, channels: 3 }
    }
}

/// PatchGAN: raw logits on a coarse grid, one score per receptive-field patch.
#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub cfg: DiscriminatorConfig,
    pub net: Net,
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64, prefix: &str) -> Result<DiscriminatorModel, ModelError> {
    if cfg.base_width == 0 || cfg.channels == 0 {
        return Err(ModelError::Config("discriminator widths must be positive".into()));
    }
    let w = cfg.base_width;
    let mut net = Net::new(prefix, seed);
    net.conv_layer("c0", cfg.channels, w, 4);
    net.conv_layer("c1", w, 2 * w, 4);
    net.conv_layer("c2", 2 * w, 1, 4);
    Ok(DiscriminatorModel { cfg: cfg.clone(), net })
}

impl DiscriminatorModel {
    /// Patch logits `[N, 1, H/4 − 1, W/4 − 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> NodeId {
        let l = Layers { prefix: self.net.prefix(), trainable };
        let h = l.conv(g, "c0", x, 2, 1);
        let h = g.leaky_relu(h, 0.2);
        let h = l.conv(g, "c1", h, 2, 1);
        let h = g.instance_norm(h);
        let h = g.leaky_relu(h, 0.2);
        l.conv(g, "c2", h, 1, 1)
    }

    pub fn scores(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        infer_single(&self.net, x, |g, input| self.forward(g, input, false))
    }
}
