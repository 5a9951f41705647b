//! Label permutation, prior-network training, and compatibility scoring.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, Bindings, Graph, GraphError, NodeId, OptimError, OptimState, Scalar, Tensor};
use crate::image::Image;
use crate::mask::{MaskError, SegMask, IGNORE};
use crate::models::{build_cpn, CpnConfig, CpnModel, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CpnError {
    #[error("permutation needs 1..=255 classes, got {0}")]
    ClassCount(usize),
    #[error("not a bijection on 0..{0}")]
    NotBijection(usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("example {index}: image is {image_h}x{image_w} but mask is {mask_h}x{mask_w}")]
    SizeMismatch {
        index: usize,
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error("segmentation is not normalized: pixel {pixel} sums to {sum}")]
    Unnormalized { pixel: usize, sum: f64 },
    #[error("segmentation has shape {seg:?} but image has shape {image:?}")]
    ShapeMismatch { seg: Vec<usize>, image: Vec<usize> },
    #[error("the prior network must be frozen before scoring")]
    NotFrozen,
    #[error("non-finite training loss at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// A bijection on class ids `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<u8>,
}

impl Permutation {
    pub fn identity(classes: usize) -> Result<Self, CpnError> {
        if classes == 0 || classes > 255 {
            return Err(CpnError::ClassCount(classes));
        }
        Ok(Self { mapping: (0..classes as u8).collect() })
    }

    pub fn from_mapping(mapping: Vec<u8>) -> Result<Self, CpnError> {
        let k = mapping.len();
        if k == 0 || k > 255 {
            return Err(CpnError::ClassCount(k));
        }
        let mut sorted = mapping.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &v)| v as usize != i) {
            return Err(CpnError::NotBijection(k));
        }
        Ok(Self { mapping })
    }

    pub fn classes(&self) -> usize {
        self.mapping.len()
    }

    pub fn mapping(&self) -> &[u8] {
        &self.mapping
    }

    pub fn apply(&self, class: u8) -> u8 {
        self.mapping[class as usize]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0u8; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m as usize] = i as u8;
        }
        Self { mapping: inv }
    }
}

/// Uniform draw over all `K!` permutations (Fisher–Yates).
pub fn sample_permutation<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Result<Permutation, CpnError> {
    let mut p = Permutation::identity(classes)?;
    for i in (1..classes).rev() {
        let j = rng.random_range(0..=i);
        p.mapping.swap(i, j);
    }
    Ok(p)
}

/// Relabel every pixel `i ↦ perm(i)`; ignored pixels stay ignored.
pub fn permute_mask(mask: &SegMask, perm: &Permutation) -> Result<SegMask, CpnError> {
    mask.validate(perm.classes())?;
    let values = mask.values().iter().map(|&v| if v == IGNORE { IGNORE } else { perm.apply(v) }).collect();
    Ok(SegMask::new(mask.height(), mask.width(), values)?)
}

/// `[N, K, H, W]` one-hot stack; ignored pixels become all-zero columns.
pub fn one_hot<T: Scalar>(masks: &[&SegMask], classes: usize) -> Tensor<T> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let plane = h * w;
    let mut t = Tensor::zeros(&[masks.len(), classes, h, w]);
    let data = t.data_mut();
    for (s, m) in masks.iter().enumerate() {
        for (p, &v) in m.values().iter().enumerate() {
            if v != IGNORE {
                data[(s * classes + v as usize) * plane + p] = T::one();
            }
        }
    }
    t
}

/// Mean over pixels of `Σ_k seg_k · log softmax(Q(seg, image))_k`, built in `g`.
/// `seg` holds per-pixel class distributions `[N, K, H, W]`.
pub fn cpn_score_node<T: Scalar>(g: &mut Graph<T>, prior: &CpnModel, seg: NodeId, image: NodeId) -> NodeId {
    cpn_score_split(g, prior, seg, seg, image)
}

/// The score as a training penalty: the bottleneck sees the hardened argmax map,
/// with no gradient, and only the scored copy of `seg` stays differentiable.
///
/// Differentiating through the bottleneck input rewards predictions that are
/// easy to squeeze through it, and a near-constant map is the easiest of all.
/// Soft inputs are also unlike the one-hot masks the prior was trained on, and
/// its reconstructions of them drift toward the dominant class. With a hard,
/// detached code the gradient only pulls `seg` toward the prior's reading of
/// its own argmax map.
pub fn cpn_penalty_node<T: Scalar>(g: &mut Graph<T>, prior: &CpnModel, seg: NodeId, image: NodeId) -> NodeId {
    let code = g.harden_channels(seg);
    cpn_score_split(g, prior, seg, code, image)
}

fn cpn_score_split<T: Scalar>(g: &mut Graph<T>, prior: &CpnModel, seg: NodeId, code: NodeId, image: NodeId) -> NodeId {
    let q = prior.forward(g, image, code, false).logits;
    let log_q = g.log_softmax_channels(q);
    let prod = g.mul(seg, log_q);
    let m = g.mean(prod);
    g.scale(m, prior.classes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Score the soft distribution as given.
    #[default]
    Soft,
    /// Harden to a one-hot argmax map first.
    Hard,
}

fn check_distribution(seg: &Tensor<f64>) -> Result<(), CpnError> {
    let [n, k, h, w] = *seg.shape() else {
        return Err(CpnError::ShapeMismatch { seg: seg.shape().to_vec(), image: vec![] });
    };
    let plane = h * w;
    for s in 0..n {
        for p in 0..plane {
            let mut sum = 0.0;
            for c in 0..k {
                let v = seg.data()[(s * k + c) * plane + p];
                if v < -1e-12 {
                    return Err(CpnError::Unnormalized { pixel: s * plane + p, sum: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CpnError::Unnormalized { pixel: s * plane + p, sum });
            }
        }
    }
    Ok(())
}

fn harden(seg: &Tensor<f64>) -> Tensor<f64> {
    let masks = crate::models::argmax_masks(seg);
    let refs: Vec<&SegMask> = masks.iter().collect();
    one_hot(&refs, seg.shape()[1])
}

fn score_inputs(prior: &CpnModel, seg: &Tensor<f64>, image: &Tensor<f64>, mode: ScoreMode) -> Result<Tensor<f64>, CpnError> {
    if !prior.net.params().is_frozen() {
        return Err(CpnError::NotFrozen);
    }
    let (ss, is) = (seg.shape(), image.shape());
    if ss.len() != 4 || is.len() != 4 || ss[0] != is[0] || ss[2..] != is[2..] || ss[1] != prior.classes {
        return Err(CpnError::ShapeMismatch { seg: ss.to_vec(), image: is.to_vec() });
    }
    prior.check_input(ss[2], ss[3])?;
    check_distribution(seg)?;
    Ok(match mode {
        ScoreMode::Soft => seg.clone(),
        ScoreMode::Hard => harden(seg),
    })
}

/// Log-compatibility of `seg` with `image` under a frozen prior, and its gradient
/// with respect to `seg` (taken at the scored, possibly hardened, input).
pub fn cpn_score_with_grad(
    prior: &CpnModel,
    seg: &Tensor<f64>,
    image: &Tensor<f64>,
    mode: ScoreMode,
) -> Result<(f64, Tensor<f64>), CpnError> {
    let seg = score_inputs(prior, seg, image, mode)?;
    let params = prior.net.params().cast::<f64>();
    let mut g = Graph::new();
    let (s, x) = (g.input_with_grad("seg"), g.input("image"));
    let score = cpn_score_node(&mut g, prior, s, x);
    let b = Bindings::new().tensor("seg", &seg).tensor("image", image).params(&params);
    let value = g.eval_scalar(&b, score)?;
    let mut grads = g.backward(score)?;
    Ok((value, grads.remove("seg").expect("seg requires grad")))
}

/// Log-compatibility (≤ 0; higher is more compatible).
pub fn cpn_score(prior: &CpnModel, seg: &Tensor<f64>, image: &Tensor<f64>, mode: ScoreMode) -> Result<f64, CpnError> {
    let seg = score_inputs(prior, seg, image, mode)?;
    let params = prior.net.params().cast::<f64>();
    let mut g = Graph::new();
    let (s, x) = (g.input("seg"), g.input("image"));
    let score = cpn_score_node(&mut g, prior, s, x);
    let b = Bindings::new().tensor("seg", &seg).tensor("image", image).params(&params);
    Ok(g.eval_scalar(&b, score)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpnTrainConfig {
    pub model: CpnConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for CpnTrainConfig {
    fn default() -> Self {
        Self {
            model: CpnConfig::default(),
            steps: 600,
            batch_size: 4,
            optimizer: AdamConfig { lr: 1e-3, decay_every: 400, ..AdamConfig::default() },
        }
    }
}

impl CpnTrainConfig {
    /// Reference optimizer settings: batch 4, lr 1e-4, ÷10 every 30000 iterations.
    pub fn reference() -> Self {
        Self {
            model: CpnConfig::reference(),
            steps: 90_000,
            batch_size: 4,
            optimizer: AdamConfig { lr: 1e-4, decay_every: 30_000, decay_factor: 0.1, ..AdamConfig::default() },
        }
    }
}

/// Trained prior plus the per-step training NLL.
#[derive(Debug, Clone)]
pub struct CpnTrained {
    pub model: CpnModel,
    pub trace: Vec<f64>,
}

/// Train the prior to reconstruct label-permuted masks from `(image, code(mask))`.
/// A fresh permutation is drawn per example per step. The returned model is frozen.
pub fn train_cpn(dataset: &[(&Image, &SegMask)], classes: usize, cfg: &CpnTrainConfig, seed: u64) -> Result<CpnTrained, CpnError> {
    if dataset.is_empty() {
        return Err(CpnError::EmptyDataset);
    }
    for (index, (img, m)) in dataset.iter().enumerate() {
        if img.height() != m.height() || img.width() != m.width() {
            return Err(CpnError::SizeMismatch {
                index,
                image_h: img.height(),
                image_w: img.width(),
                mask_h: m.height(),
                mask_w: m.width(),
            });
        }
        m.validate(classes)?;
    }
    let mut model = build_cpn(&cfg.model, classes, seed, "cpn")?;
    model.check_input(dataset[0].0.height(), dataset[0].0.width())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = OptimState::new(cfg.optimizer);
    let indices: Vec<usize> = (0..dataset.len()).collect();

    let mut g = Graph::<f32>::new();
    let (img_in, seg_in) = (g.input("image"), g.input("seg"));
    let logits = model.forward(&mut g, img_in, seg_in, true).logits;
    let loss = g.cross_entropy(logits, "y");

    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size.max(1)).map(|_| *indices.choose(&mut rng).expect("non-empty")).collect();
        let mut masks = Vec::with_capacity(batch.len());
        for &i in &batch {
            let perm = sample_permutation(classes, &mut rng)?;
            masks.push(permute_mask(dataset[i].1, &perm)?);
        }
        let refs: Vec<&SegMask> = masks.iter().collect();
        let seg = one_hot::<f32>(&refs, classes);
        let imgs: Vec<&Tensor<f32>> = batch.iter().map(|&i| dataset[i].0.tensor()).collect();
        let images = Tensor::stack(&imgs).expect("equal image sizes");
        let b = Bindings::new().tensor("image", &images).tensor("seg", &seg).labels("y", &masks).params(model.net.params());
        let value = g.eval_scalar(&b, loss)? as f64;
        if !value.is_finite() {
            return Err(CpnError::NonFinite(step));
        }
        let grads = g.backward(loss)?;
        drop(b);
        adam_step(model.net.params_mut(), &grads, &mut opt)?;
        trace.push(value);
    }
    model.net.params_mut().freeze();
    Ok(CpnTrained { model, trace })
}
