//! Scalar objectives and their weighted composition.
//!
//! Each loss exists twice: as a graph builder (used by training and gradient
//! checks) and as a plain function on tensors (used by tests and reporting).
//! Discriminator outputs are logits inside graphs. The log variant applies
//! the sigmoid itself; the least-squares variant scores the raw output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Bindings, Graph, GraphError, NodeId, PhaseOpts, Scalar, Tensor};
use crate::cpn::cpn_penalty_node;
use crate::mask::SegMask;
use crate::models::{CpnModel, DiscriminatorModel, ImageMap, SegModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss weight {name} must be finite and nonnegative, got {value}")]
    BadWeight { name: &'static str, value: f64 },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("log-variant score {0} makes the loss infinite or undefined")]
    ScoreRange(f64),
    #[error("empty score tensor")]
    Empty,
    #[error("the prior network must be frozen before it scores segmentations")]
    PriorNotFrozen,
    #[error("a positive lambda_cpn needs a prior network")]
    MissingPrior,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Weights of the adversarial, cycle, phase and prior terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_cyc: f64,
    pub lambda_ph: f64,
    pub lambda_cpn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_d: 1.0, lambda_cyc: 10.0, lambda_ph: 5.0, lambda_cpn: 0.5 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lambda_d: 0.0, lambda_cyc: 0.0, lambda_ph: 0.0, lambda_cpn: 0.0 }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("lambda_d", self.lambda_d),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_ph", self.lambda_ph),
            ("lambda_cpn", self.lambda_cpn),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanVariant {
    #[default]
    LeastSquares,
    Log,
}

// ---------------------------------------------------------------------------
// Value-level losses

/// Mean over labeled pixels of `−log softmax(logits)[label]`; logits are `[N, K, H, W]`.
pub fn cross_entropy_seg(logits: &Tensor<f64>, masks: &[SegMask]) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let x = g.input("logits");
    let ce = g.cross_entropy(x, "y");
    Ok(g.eval_scalar(&Bindings::new().tensor("logits", logits).labels("y", masks), ce)?)
}

/// Scores fed to `−log s` must lie in `(0, 1]`; to `−log(1 − s)`, in `[0, 1)`.
fn check_probabilities(scores: &Tensor<f64>, toward_one: bool) -> Result<(), LossError> {
    let ok = |s: f64| if toward_one { s > 0.0 && s <= 1.0 } else { (0.0..1.0).contains(&s) };
    match scores.data().iter().find(|&&s| !ok(s)) {
        Some(&s) => Err(LossError::ScoreRange(s)),
        None => Ok(()),
    }
}

fn mean_of(t: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Result<f64, LossError> {
    if t.numel() == 0 {
        return Err(LossError::Empty);
    }
    Ok(t.data().iter().map(|&v| f(v)).sum::<f64>() / t.numel() as f64)
}

/// Generator-side adversarial loss on discriminator scores of translated images.
/// Under the log variant the scores are probabilities `θ(fake)`.
pub fn gan_generator_loss(scores: &Tensor<f64>, variant: GanVariant) -> Result<f64, LossError> {
    match variant {
        GanVariant::Log => {
            check_probabilities(scores, true)?;
            mean_of(scores, |s| -s.ln())
        }
        GanVariant::LeastSquares => mean_of(scores, |s| (s - 1.0) * (s - 1.0)),
    }
}

pub fn gan_discriminator_loss(real: &Tensor<f64>, fake: &Tensor<f64>, variant: GanVariant) -> Result<f64, LossError> {
    match variant {
        GanVariant::Log => {
            check_probabilities(real, true)?;
            check_probabilities(fake, false)?;
            Ok(mean_of(real, |s| -s.ln())? + mean_of(fake, |s| -(1.0 - s).ln())?)
        }
        GanVariant::LeastSquares => Ok(mean_of(real, |s| (s - 1.0) * (s - 1.0))? + mean_of(fake, |s| s * s)?),
    }
}

/// Mean absolute difference over all elements.
pub fn cycle_loss(x: &Tensor<f64>, recon: &Tensor<f64>) -> Result<f64, LossError> {
    if x.shape() != recon.shape() {
        return Err(LossError::ShapeMismatch(x.shape().to_vec(), recon.shape().to_vec()));
    }
    Ok(x.data().iter().zip(recon.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64)
}

// ---------------------------------------------------------------------------
// Graph builders

/// Adversarial generator loss on discriminator logits.
pub fn gan_generator_node<T: Scalar>(g: &mut Graph<T>, logits: NodeId, variant: GanVariant) -> NodeId {
    match variant {
        GanVariant::Log => {
            let l = g.log_sigmoid(logits);
            let m = g.mean(l);
            g.scale(m, -1.0)
        }
        GanVariant::LeastSquares => {
            let d = g.add_scalar(logits, -1.0);
            let sq = g.square(d);
            g.mean(sq)
        }
    }
}

/// Discriminator loss: real images toward 1, translated images toward 0.
pub fn gan_discriminator_node<T: Scalar>(g: &mut Graph<T>, real: NodeId, fake: NodeId, variant: GanVariant) -> NodeId {
    let real_term = gan_generator_node(g, real, variant);
    let fake_term = match variant {
        GanVariant::Log => {
            // log(1 − σ(z)) = log σ(−z)
            let neg = g.scale(fake, -1.0);
            let l = g.log_sigmoid(neg);
            let m = g.mean(l);
            g.scale(m, -1.0)
        }
        GanVariant::LeastSquares => {
            let sq = g.square(fake);
            g.mean(sq)
        }
    };
    g.add(real_term, fake_term)
}

pub fn cycle_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, recon: NodeId) -> NodeId {
    let d = g.sub(recon, x);
    let a = g.abs(d);
    g.mean(a)
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(f64, Option<NodeId>)]) -> NodeId {
    let mut total: Option<NodeId> = None;
    for &(w, node) in terms {
        let Some(node) = node else { continue };
        let scaled = g.scale(node, w);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    }
    total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())))
}

/// The four networks of the translation stage.
pub struct TranslationModels<'a, F, B> {
    /// Source to target.
    pub forward: &'a F,
    /// Target to source.
    pub backward: &'a B,
    /// Scores source-domain images.
    pub disc_source: &'a DiscriminatorModel,
    /// Scores target-domain images.
    pub disc_target: &'a DiscriminatorModel,
}

/// Nodes of one translator objective; component nodes are absent when their weight is 0.
#[derive(Debug, Clone, Copy)]
pub struct TranslatorTerms {
    pub total: NodeId,
    pub adversarial: Option<NodeId>,
    pub cycle: Option<NodeId>,
    pub phase: Option<NodeId>,
    /// `T(x_s)`, the source batch carried to the target domain.
    pub source_translated: NodeId,
    /// `T⁻¹(x_t)`.
    pub target_translated: NodeId,
}

/// Generator objective `λ_D·L_D + λ_cyc·L_cyc + λ_ph·L_ph`, each term summed over
/// both translation directions. Discriminators enter frozen.
pub fn translator_objective<T: Scalar, F: ImageMap, B: ImageMap>(
    g: &mut Graph<T>,
    models: &TranslationModels<'_, F, B>,
    xs: NodeId,
    xt: NodeId,
    w: &LossWeights,
    variant: GanVariant,
    phase: PhaseOpts,
) -> TranslatorTerms {
    let ts = models.forward.apply(g, xs, true);
    let tt = models.backward.apply(g, xt, true);
    let adversarial = (w.lambda_d > 0.0).then(|| {
        let st = models.disc_target.forward(g, ts, false);
        let ss = models.disc_source.forward(g, tt, false);
        let a = gan_generator_node(g, st, variant);
        let b = gan_generator_node(g, ss, variant);
        g.add(a, b)
    });
    let cycle = (w.lambda_cyc > 0.0).then(|| {
        let back_s = models.backward.apply(g, ts, true);
        let back_t = models.forward.apply(g, tt, true);
        let a = cycle_node(g, xs, back_s);
        let b = cycle_node(g, xt, back_t);
        g.add(a, b)
    });
    let phase_term = (w.lambda_ph > 0.0).then(|| {
        let a = g.phase_loss(xs, ts, phase);
        let b = g.phase_loss(xt, tt, phase);
        g.add(a, b)
    });
    let total = weighted_sum(g, &[(w.lambda_d, adversarial), (w.lambda_cyc, cycle), (w.lambda_ph, phase_term)]);
    TranslatorTerms { total, adversarial, cycle, phase: phase_term, source_translated: ts, target_translated: tt }
}

/// Discriminator objective on real batches and (detached) translated batches,
/// halved as in the usual alternating scheme.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_objective<T: Scalar>(
    g: &mut Graph<T>,
    disc_source: &DiscriminatorModel,
    disc_target: &DiscriminatorModel,
    real_source: NodeId,
    real_target: NodeId,
    fake_source: NodeId,
    fake_target: NodeId,
    variant: GanVariant,
) -> NodeId {
    let rt = disc_target.forward(g, real_target, true);
    let ft = disc_target.forward(g, fake_target, true);
    let rs = disc_source.forward(g, real_source, true);
    let fs = disc_source.forward(g, fake_source, true);
    let a = gan_discriminator_node(g, rt, ft, variant);
    let b = gan_discriminator_node(g, rs, fs, variant);
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

#[derive(Debug, Clone, Copy)]
pub struct SegTerms {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    /// Log-compatibility of the target prediction under the prior (≤ 0); absent when `λ_cpn = 0`.
    pub score: Option<NodeId>,
}

/// `CE(φ(T(x_s)), y_s) − λ_cpn·score(φ(x_t) | x_t)`. The prior must be frozen, and its
/// parameters enter the graph as non-trainable leaves.
pub fn segmentation_objective<T: Scalar>(
    g: &mut Graph<T>,
    seg: &SegModel,
    prior: Option<&CpnModel>,
    translated_source: NodeId,
    source_labels: &str,
    target: NodeId,
    w: &LossWeights,
) -> Result<SegTerms, LossError> {
    let prior = match prior {
        Some(p) if !p.net.params().is_frozen() => return Err(LossError::PriorNotFrozen),
        Some(p) => Some(p),
        None if w.lambda_cpn > 0.0 => return Err(LossError::MissingPrior),
        None => None,
    };
    let logits_s = seg.forward(g, translated_source, true);
    let ce = g.cross_entropy(logits_s, source_labels);
    let score = prior.filter(|_| w.lambda_cpn > 0.0).map(|prior| {
        let logits_t = seg.forward(g, target, true);
        let probs = g.softmax_channels(logits_t);
        cpn_penalty_node(g, prior, probs, target)
    });
    let total = match score {
        Some(s) => {
            let penalty = g.scale(s, -w.lambda_cpn);
            g.add(ce, penalty)
        }
        None => ce,
    };
    Ok(SegTerms { total, cross_entropy: ce, score })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_d, w.lambda_cyc, w.lambda_ph, w.lambda_cpn), (1.0, 10.0, 5.0, 0.5));
        assert!(w.validate().is_ok());
        let bad = LossWeights { lambda_ph: -1.0, ..w };
        assert!(matches!(bad.validate(), Err(LossError::BadWeight { name: "lambda_ph", .. })));
    }

    #[test]
    fn scalar_gan_cases() {
        let ones = Tensor::full(&[2, 2], 1.0);
        assert_eq!(gan_generator_loss(&ones, GanVariant::Log).unwrap(), 0.0);
        assert!(gan_discriminator_loss(&ones, &ones, GanVariant::Log).is_err());
        let e = Tensor::full(&[3], (-1.0f64).exp());
        assert!((gan_generator_loss(&e, GanVariant::Log).unwrap() - 1.0).abs() < 1e-12);
        let half = Tensor::full(&[4], 0.5);
        assert_eq!(gan_generator_loss(&half, GanVariant::LeastSquares).unwrap(), 0.25);
        assert!(gan_generator_loss(&Tensor::full(&[1], 1.5), GanVariant::Log).is_err());
        assert_eq!(gan_discriminator_loss(&half, &half, GanVariant::LeastSquares).unwrap(), 0.5);
    }

    #[test]
    fn graph_gan_matches_values() {
        let z = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64 * 0.4 - 1.0);
        let y = Tensor::from_fn(&[1, 1, 2, 3], |i| 0.7 - i as f64 * 0.3);
        let sig = |t: &Tensor<f64>| t.map(|v| 1.0 / (1.0 + (-v).exp()));
        for variant in [GanVariant::Log, GanVariant::LeastSquares] {
            let mut g = Graph::new();
            let (a, b) = (g.input("z"), g.input("y"));
            let gen = gan_generator_node(&mut g, a, variant);
            let disc = gan_discriminator_node(&mut g, b, a, variant);
            g.forward(&Bindings::new().tensor("z", &z).tensor("y", &y)).unwrap();
            let (sz, sy) = match variant {
                GanVariant::Log => (sig(&z), sig(&y)),
                GanVariant::LeastSquares => (z.clone(), y.clone()),
            };
            let want_gen = gan_generator_loss(&sz, variant).unwrap();
            let want_disc = gan_discriminator_loss(&sy, &sz, variant).unwrap();
            assert!((g.value(gen).unwrap().item() - want_gen).abs() < 1e-12);
            assert!((g.value(disc).unwrap().item() - want_disc).abs() < 1e-12);
        }
    }
}
