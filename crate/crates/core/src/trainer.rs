//! Training orchestration: translators, prior network, segmentation,
//! self-training, and the ablation harness.
//!
//! Phases run sequentially. Every model consumed by a later phase is frozen,
//! and every random choice derives from `RunConfig::seed` through a named
//! stream, so data order does not depend on loss weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, Bindings, Graph, GraphError, OptimError, OptimState, PhaseOpts, Tensor};
use crate::cpn::{train_cpn, CpnError, CpnTrainConfig, CpnTrained};
use crate::image::Image;
use crate::io::{self, Checkpoint, JsonlWriter};
use crate::losses::{
    discriminator_objective, segmentation_objective, translator_objective, GanVariant, LossError, LossWeights,
    TranslationModels,
};
use crate::mask::{SegMask, IGNORE};
use crate::metrics::{semantic_preservation, ConfusionMatrix, IouReport, MetricsError};
use crate::models::{
    build_discriminator, build_segnet, build_translator, CpnModel, DiscriminatorConfig, DiscriminatorModel, ModelError,
    SegConfig, SegModel, TranslatorConfig, TranslatorModel,
};
use crate::spectral::phase_loss_tensor;
use crate::synthdata::{gen_scene, splitmix64, Dataset, Scene, SceneConfig, SynthError, TrainingView};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{0} must be frozen before this phase")]
    NotFrozen(&'static str),
    #[error("{phase} step {step}: {detail}")]
    NonFinite { phase: &'static str, step: usize, detail: String },
    #[error("training split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Cpn(#[from] CpnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    TensorFile(#[from] io::TensorFileError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub weights: LossWeights,
    pub gan_variant: GanVariant,
    pub phase_normalize: bool,
    pub phase_eps: f64,
    pub translator: TranslatorConfig,
    pub discriminator: DiscriminatorConfig,
    pub segnet: SegConfig,
    pub cpn: CpnTrainConfig,
    pub translator_steps: usize,
    pub translator_optim: AdamConfig,
    /// Discriminator updates per generator update.
    pub disc_steps_per_gen: usize,
    pub seg_steps: usize,
    pub seg_batch: usize,
    pub seg_optim: AdamConfig,
    /// Cross-entropy-only steps before the prior term joins the segmentation loss.
    pub cpn_warmup: usize,
    /// Scenes used to train the reference segmenter (target domain, separate seeds).
    pub reference_scenes: usize,
    pub reference_steps: usize,
    pub pseudo_threshold: f64,
    pub self_train_rounds: usize,
    pub self_train_steps: usize,
    /// Write translator checkpoints every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: LossWeights::default(),
            gan_variant: GanVariant::LeastSquares,
            phase_normalize: true,
            phase_eps: 1e-12,
            translator: TranslatorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            segnet: SegConfig::default(),
            cpn: CpnTrainConfig::default(),
            translator_steps: 2000,
            translator_optim: AdamConfig { lr: 2e-4, beta1: 0.5, ..AdamConfig::default() },
            disc_steps_per_gen: 1,
            seg_steps: 600,
            seg_batch: 4,
            seg_optim: AdamConfig::with_lr(2e-3),
            cpn_warmup: 300,
            reference_scenes: 60,
            reference_steps: 800,
            pseudo_threshold: 0.9,
            self_train_rounds: 1,
            self_train_steps: 300,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold <= 1.0) {
            return bad(format!("pseudo_threshold must lie in (0, 1], got {}", self.pseudo_threshold));
        }
        for (name, v) in [
            ("translator_steps", self.translator_steps),
            ("seg_steps", self.seg_steps),
            ("seg_batch", self.seg_batch),
            ("reference_steps", self.reference_steps),
            ("reference_scenes", self.reference_scenes),
            ("disc_steps_per_gen", self.disc_steps_per_gen),
            ("cpn.steps", self.cpn.steps),
            ("cpn.batch_size", self.cpn.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.phase_eps.is_nan() || self.phase_eps <= 0.0 {
            return bad("phase_eps must be positive".into());
        }
        Ok(())
    }

    pub fn phase_opts(&self) -> PhaseOpts {
        PhaseOpts { normalize: self.phase_normalize, eps: self.phase_eps }
    }

    /// Seed of a named random stream.
    pub fn stream(&self, name: &str) -> u64 {
        name.bytes().fold(splitmix64(self.seed), |acc, b| splitmix64(acc ^ b as u64))
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.stream(name))
    }
}

// ---------------------------------------------------------------------------
// Translators

#[derive(Debug, Clone)]
pub struct Translators {
    /// Source to target.
    pub forward: TranslatorModel,
    /// Target to source.
    pub backward: TranslatorModel,
    pub disc_source: DiscriminatorModel,
    pub disc_target: DiscriminatorModel,
}

impl Translators {
    pub fn build(cfg: &RunConfig) -> Result<Self, TrainError> {
        Ok(Self {
            forward: build_translator(&cfg.translator, cfg.stream("init/T"), "T")?,
            backward: build_translator(&cfg.translator, cfg.stream("init/Tinv"), "Tinv")?,
            disc_source: build_discriminator(&cfg.discriminator, cfg.stream("init/Ds"), "Ds")?,
            disc_target: build_discriminator(&cfg.discriminator, cfg.stream("init/Dt"), "Dt")?,
        })
    }

    fn freeze(&mut self) {
        for p in [
            self.forward.net.params_mut(),
            self.backward.net.params_mut(),
            self.disc_source.net.params_mut(),
            self.disc_target.net.params_mut(),
        ] {
            p.freeze();
        }
    }

    fn checkpoint(&self, dir: &Path, tag: &str, cfg: &RunConfig) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = serde_json::json!({ "config": cfg, "seed": cfg.seed, "tag": tag });
        for (name, params) in [
            ("T", self.forward.net.params()),
            ("Tinv", self.backward.net.params()),
            ("Ds", self.disc_source.net.params()),
            ("Dt", self.disc_target.net.params()),
        ] {
            io::write_checkpoint(&dir.join(format!("{name}_{tag}.tnsr")), &Checkpoint::from_params(params, meta.clone()))?;
        }
        Ok(())
    }
}

/// One generator/discriminator iteration. Weighted-out terms are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorRecord {
    pub step: usize,
    /// Indices of the source and target training images drawn this step.
    pub source_index: usize,
    pub target_index: usize,
    pub total: f64,
    pub adversarial: Option<f64>,
    pub cycle: Option<f64>,
    pub phase: Option<f64>,
    /// Normalized phase loss between the source batch and its translation,
    /// recorded whatever the weights.
    pub phase_monitor: f64,
    pub discriminator: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TranslatorRun {
    pub models: Translators,
    pub trace: Vec<TranslatorRecord>,
}

fn phase_value(reference: &Tensor<f32>, translated: &Tensor<f32>) -> f64 {
    phase_loss_tensor(&reference.cast(), &translated.cast(), true, 1e-12).map(|o| o.loss).unwrap_or(f64::NAN)
}

fn non_finite(phase: &'static str, step: usize, err: GraphError, out: Option<&Path>, last: Option<String>) -> TrainError {
    if let Some(dir) = out {
        let snapshot = serde_json::json!({ "phase": phase, "step": step, "error": err.to_string(), "last_record": last });
        if fs::create_dir_all(dir).is_ok() {
            let _ = fs::write(dir.join(format!("{phase}_failure.json")), snapshot.to_string());
        }
    }
    TrainError::NonFinite { phase, step, detail: err.to_string() }
}

/// Alternate one generator step with `disc_steps_per_gen` discriminator steps,
/// batch size 1. The returned models are frozen.
pub fn train_translators(cfg: &RunConfig, data: TrainingView<'_>) -> Result<TranslatorRun, TrainError> {
    cfg.validate()?;
    if data.source_len() == 0 {
        return Err(TrainError::EmptySplit("train_src"));
    }
    if data.target_len() == 0 {
        return Err(TrainError::EmptySplit("train_tgt"));
    }
    let out = cfg.out_dir.as_deref();
    let mut m = Translators::build(cfg)?;
    let mut rng = cfg.rng("data/translator");
    let (mut opt_f, mut opt_b) = (OptimState::new(cfg.translator_optim), OptimState::new(cfg.translator_optim));
    let (mut opt_ds, mut opt_dt) = (OptimState::new(cfg.translator_optim), OptimState::new(cfg.translator_optim));
    let adversarial = cfg.weights.lambda_d > 0.0;

    let mut gen = Graph::<f32>::new();
    let (xs, xt) = (gen.input("xs"), gen.input("xt"));
    let terms = {
        let models = TranslationModels {
            forward: &m.forward,
            backward: &m.backward,
            disc_source: &m.disc_source,
            disc_target: &m.disc_target,
        };
        translator_objective(&mut gen, &models, xs, xt, &cfg.weights, cfg.gan_variant, cfg.phase_opts())
    };
    let mut disc = Graph::<f32>::new();
    let (rs, rt, fs_, ft) = (disc.input("rs"), disc.input("rt"), disc.input("fs"), disc.input("ft"));
    let d_loss = discriminator_objective(&mut disc, &m.disc_source, &m.disc_target, rs, rt, fs_, ft, cfg.gan_variant);

    let mut trace: Vec<TranslatorRecord> = Vec::with_capacity(cfg.translator_steps);
    let last = |t: &Vec<TranslatorRecord>| t.last().map(|r| serde_json::to_string(r).unwrap_or_default());
    for step in 0..cfg.translator_steps {
        let i = rng.random_range(0..data.source_len());
        let j = rng.random_range(0..data.target_len());
        let src = data.source(i).0.batched();
        let tgt = data.target_image(j).batched();

        let (record, grads, fake_t, fake_s) = {
            let b = Bindings::new()
                .tensor("xs", &src)
                .tensor("xt", &tgt)
                .params(m.forward.net.params())
                .params(m.backward.net.params())
                .params(m.disc_source.net.params())
                .params(m.disc_target.net.params());
            gen.forward(&b).map_err(|e| non_finite("translator", step, e, out, last(&trace)))?;
            let val = |n: Option<crate::autodiff::NodeId>| n.map(|n| gen.value(n).expect("evaluated").item() as f64);
            let fake_t = gen.value(terms.source_translated).expect("evaluated").clone();
            let fake_s = gen.value(terms.target_translated).expect("evaluated").clone();
            let record = TranslatorRecord {
                step,
                source_index: i,
                target_index: j,
                total: val(Some(terms.total)).expect("present"),
                adversarial: val(terms.adversarial),
                cycle: val(terms.cycle),
                phase: val(terms.phase),
                phase_monitor: phase_value(&src, &fake_t),
                discriminator: None,
            };
            (record, gen.backward(terms.total)?, fake_t, fake_s)
        };
        adam_step(m.forward.net.params_mut(), &grads, &mut opt_f)?;
        adam_step(m.backward.net.params_mut(), &grads, &mut opt_b)?;

        let mut record = record;
        if adversarial {
            for _ in 0..cfg.disc_steps_per_gen {
                let b = Bindings::new()
                    .tensor("rs", &src)
                    .tensor("rt", &tgt)
                    .tensor("fs", &fake_s)
                    .tensor("ft", &fake_t)
                    .params(m.disc_source.net.params())
                    .params(m.disc_target.net.params());
                disc.forward(&b).map_err(|e| non_finite("discriminator", step, e, out, last(&trace)))?;
                record.discriminator = Some(disc.value(d_loss).expect("evaluated").item() as f64);
                let dg = disc.backward(d_loss)?;
                drop(b);
                adam_step(m.disc_source.net.params_mut(), &dg, &mut opt_ds)?;
                adam_step(m.disc_target.net.params_mut(), &dg, &mut opt_dt)?;
            }
        }
        if !record.total.is_finite() {
            return Err(non_finite(
                "translator",
                step,
                GraphError::NonFinite { node: terms.total.0, op: "total" },
                out,
                last(&trace),
            ));
        }
        trace.push(record);
        if let (Some(dir), c) = (out, cfg.checkpoint_every) {
            if c > 0 && (step + 1) % c == 0 {
                m.checkpoint(&dir.join("checkpoints"), &format!("step{:06}", step + 1), cfg)?;
            }
        }
    }
    m.freeze();
    Ok(TranslatorRun { models: m, trace })
}

/// Mean normalized phase loss between source images and their translations.
pub fn mean_phase_consistency(t: &TranslatorModel, images: &[&Image]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for img in images {
        let x = img.batched();
        total += phase_value(&x, &t.translate(&x)?);
    }
    Ok(total / images.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Prior network

/// Train the prior on label-permuted source masks.
pub fn train_prior(cfg: &RunConfig, data: TrainingView<'_>) -> Result<CpnTrained, TrainError> {
    let pairs: Vec<(&Image, &SegMask)> = (0..data.source_len()).map(|i| data.source(i)).collect();
    Ok(train_cpn(&pairs, data.classes(), &cfg.cpn, cfg.stream("cpn"))?)
}

// ---------------------------------------------------------------------------
// Segmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRecord {
    pub step: usize,
    pub total: f64,
    pub cross_entropy: f64,
    /// Log-compatibility under the prior; present when the prior term is active.
    pub cpn_score: Option<f64>,
    /// Cross-entropy on pseudo-labelled target pixels (self-training only).
    pub pseudo_cross_entropy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SegRun {
    pub model: SegModel,
    pub trace: Vec<SegRecord>,
}

/// Translate every source training image once with a frozen translator.
pub fn translate_sources(t: &TranslatorModel, data: TrainingView<'_>) -> Result<Vec<Tensor<f32>>, TrainError> {
    if !t.net.params().is_frozen() {
        return Err(TrainError::NotFrozen("translator"));
    }
    (0..data.source_len()).map(|i| Ok(t.translate(&data.source(i).0.batched())?)).collect()
}

fn stack(items: Vec<&Tensor<f32>>) -> Tensor<f32> {
    Tensor::stack(&items).expect("equal shapes")
}

/// Minimize `CE(φ(T(x_s)), y_s) − λ_cpn·score(φ(x_t))` with frozen `T` and prior.
pub fn train_segmentation(
    cfg: &RunConfig,
    translator: &TranslatorModel,
    prior: Option<&CpnModel>,
    data: TrainingView<'_>,
) -> Result<SegRun, TrainError> {
    cfg.validate()?;
    if let Some(p) = prior {
        if !p.net.params().is_frozen() {
            return Err(TrainError::NotFrozen("prior network"));
        }
    }
    let translated = translate_sources(translator, data)?;
    if data.target_len() == 0 && cfg.weights.lambda_cpn > 0.0 {
        return Err(TrainError::EmptySplit("train_tgt"));
    }
    let mut model = build_segnet(&cfg.segnet, data.classes(), cfg.stream("init/seg"), "seg")?;
    let mut rng = cfg.rng("data/seg");
    let mut opt = OptimState::new(cfg.seg_optim);

    let mut g = Graph::<f32>::new();
    let (xs, xt) = (g.input("xs"), g.input("xt"));
    let terms = segmentation_objective(&mut g, &model, prior, xs, "ys", xt, &cfg.weights)?;
    let prior_params = prior.map(|p| p.net.params().clone());

    let mut trace = Vec::with_capacity(cfg.seg_steps);
    for step in 0..cfg.seg_steps {
        let src: Vec<usize> = (0..cfg.seg_batch).map(|_| rng.random_range(0..data.source_len())).collect();
        let tgt: Vec<usize> = (0..cfg.seg_batch).map(|_| rng.random_range(0..data.target_len().max(1))).collect();
        let xs_v = stack(src.iter().map(|&i| &translated[i]).collect());
        let ys: Vec<SegMask> = src.iter().map(|&i| data.source(i).1.clone()).collect();
        let xt_v = if data.target_len() > 0 {
            stack(tgt.iter().map(|&j| data.target_image(j).tensor()).collect())
        } else {
            xs_v.clone()
        };
        let (record, grads) = {
            let mut b = Bindings::new().tensor("xs", &xs_v).tensor("xt", &xt_v).labels("ys", &ys).params(model.net.params());
            if let Some(p) = &prior_params {
                b = b.params(p);
            }
            g.forward(&b).map_err(|e| non_finite("segmentation", step, e, None, None))?;
            let val = |n| g.value(n).expect("evaluated").item() as f64;
            let objective = if step < cfg.cpn_warmup { terms.cross_entropy } else { terms.total };
            let record = SegRecord {
                step,
                total: val(objective),
                cross_entropy: val(terms.cross_entropy),
                cpn_score: terms.score.map(val),
                pseudo_cross_entropy: None,
            };
            (record, g.backward(objective)?)
        };
        adam_step(model.net.params_mut(), &grads, &mut opt)?;
        trace.push(record);
    }
    model.net.params_mut().freeze();
    Ok(SegRun { model, trace })
}

/// Mean IoU scores of `seg` on the target images of `scenes`.
pub fn evaluate_segmenter(seg: &SegModel, scenes: &[Scene]) -> Result<IouReport, TrainError> {
    let mut cm = ConfusionMatrix::new(seg.classes);
    for s in scenes {
        let pred = seg.predict(&s.target.batched())?;
        cm.accumulate(&pred[0], &s.mask)?;
    }
    Ok(cm.report()?)
}

/// Train the evaluation-only reference segmenter on target-domain renderings of
/// freshly seeded scenes (disjoint from every benchmark split).
pub fn train_reference_segmenter(cfg: &RunConfig, scene_cfg: &SceneConfig) -> Result<SegModel, TrainError> {
    cfg.validate()?;
    let base = cfg.stream("reference/scenes");
    let scenes = (0..cfg.reference_scenes)
        .map(|i| gen_scene(splitmix64(base ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)), scene_cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let images: Vec<Tensor<f32>> = scenes.iter().map(|s| s.target.batched()).collect();
    let masks: Vec<&SegMask> = scenes.iter().map(|s| &s.mask).collect();
    let mut model = build_segnet(&cfg.segnet, scene_cfg.classes, cfg.stream("init/reference"), "ref")?;
    supervised_fit(&mut model, &images, &masks, cfg.reference_steps, cfg.seg_batch, cfg.seg_optim, cfg.rng("data/reference"))?;
    model.net.params_mut().freeze();
    Ok(model)
}

fn supervised_fit(
    model: &mut SegModel,
    images: &[Tensor<f32>],
    masks: &[&SegMask],
    steps: usize,
    batch: usize,
    optim: AdamConfig,
    mut rng: ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    let mut g = Graph::<f32>::new();
    let x = g.input("x");
    let logits = model.forward(&mut g, x, true);
    let loss = g.cross_entropy(logits, "y");
    let mut opt = OptimState::new(optim);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..images.len())).collect();
        let xv = stack(idx.iter().map(|&i| &images[i]).collect());
        let ys: Vec<SegMask> = idx.iter().map(|&i| masks[i].clone()).collect();
        let grads = {
            let b = Bindings::new().tensor("x", &xv).labels("y", &ys).params(model.net.params());
            let v = g.eval_scalar(&b, loss).map_err(|e| non_finite("reference", step, e, None, None))?;
            trace.push(v as f64);
            g.backward(loss)?
        };
        adam_step(model.net.params_mut(), &grads, &mut opt)?;
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Self-training

/// Label pixels whose top softmax probability exceeds `threshold` with the argmax
/// class; ignore the rest. Returns the maps and the labelled-pixel fraction.
pub fn pseudo_label(seg: &SegModel, images: &[&Image], threshold: f64) -> Result<(Vec<SegMask>, f64), TrainError> {
    let mut masks = Vec::with_capacity(images.len());
    let (mut labelled, mut total) = (0usize, 0usize);
    for img in images {
        let p = seg.probabilities(&img.batched())?;
        let [_, k, h, w] = *p.shape() else { unreachable!("NCHW") };
        let plane = h * w;
        let values: Vec<u8> = (0..plane)
            .map(|px| {
                let (best, conf) = (0..k)
                    .map(|c| (c, p.data()[c * plane + px]))
                    .fold((0, f32::MIN), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
                if conf as f64 > threshold {
                    best as u8
                } else {
                    IGNORE
                }
            })
            .collect();
        let mask = SegMask::new(h, w, values).expect("sized");
        labelled += mask.labeled_pixels();
        total += plane;
        masks.push(mask);
    }
    Ok((masks, labelled as f64 / total.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainRecord {
    pub round: usize,
    pub coverage: f64,
    pub skipped: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub pseudo_labels: Vec<SegMask>,
    pub coverage: f64,
    /// Retrained network, or the input network when the round was skipped.
    pub model: SegModel,
    pub record: SelfTrainRecord,
    pub trace: Vec<SegRecord>,
}

/// Pseudo-label the target training split, then fine-tune on translated-source and
/// pseudo-labelled target batches mixed 1:1.
pub fn self_train_round(
    cfg: &RunConfig,
    seg: &SegModel,
    translator: &TranslatorModel,
    data: TrainingView<'_>,
    round: usize,
) -> Result<SelfTrainOutcome, TrainError> {
    cfg.validate()?;
    let targets: Vec<&Image> = (0..data.target_len()).map(|j| data.target_image(j)).collect();
    let (pseudo, coverage) = pseudo_label(seg, &targets, cfg.pseudo_threshold)?;
    if coverage == 0.0 {
        return Ok(SelfTrainOutcome {
            pseudo_labels: pseudo,
            coverage,
            model: seg.clone(),
            record: SelfTrainRecord {
                round,
                coverage,
                skipped: true,
                warning: Some(format!("no pixel exceeds confidence {}", cfg.pseudo_threshold)),
            },
            trace: vec![],
        });
    }
    let translated = translate_sources(translator, data)?;
    let mut model = seg.clone();
    model.net.params_mut().unfreeze();
    let mut rng = cfg.rng(&format!("data/self_train/{round}"));
    let mut opt = OptimState::new(cfg.seg_optim);

    let mut g = Graph::<f32>::new();
    let (xs, xt) = (g.input("xs"), g.input("xt"));
    let ls = model.forward(&mut g, xs, true);
    let lt = model.forward(&mut g, xt, true);
    let ce_s = g.cross_entropy(ls, "ys");
    let ce_t = g.cross_entropy(lt, "yt");
    let total = g.add(ce_s, ce_t);

    // batches draw only from images that carry at least one pseudo label
    let usable: Vec<usize> = (0..pseudo.len()).filter(|&j| pseudo[j].labeled_pixels() > 0).collect();
    let mut trace = Vec::with_capacity(cfg.self_train_steps);
    for step in 0..cfg.self_train_steps {
        let src: Vec<usize> = (0..cfg.seg_batch).map(|_| rng.random_range(0..data.source_len())).collect();
        let tgt: Vec<usize> = (0..cfg.seg_batch).map(|_| usable[rng.random_range(0..usable.len())]).collect();
        let xs_v = stack(src.iter().map(|&i| &translated[i]).collect());
        let xt_v = stack(tgt.iter().map(|&j| targets[j].tensor()).collect());
        let ys: Vec<SegMask> = src.iter().map(|&i| data.source(i).1.clone()).collect();
        let yt: Vec<SegMask> = tgt.iter().map(|&j| pseudo[j].clone()).collect();
        let (record, grads) = {
            let b = Bindings::new()
                .tensor("xs", &xs_v)
                .tensor("xt", &xt_v)
                .labels("ys", &ys)
                .labels("yt", &yt)
                .params(model.net.params());
            g.forward(&b).map_err(|e| non_finite("self_train", step, e, None, None))?;
            let val = |n| g.value(n).expect("evaluated").item() as f64;
            let record = SegRecord {
                step,
                total: val(total),
                cross_entropy: val(ce_s),
                cpn_score: None,
                pseudo_cross_entropy: Some(val(ce_t)),
            };
            (record, g.backward(total)?)
        };
        adam_step(model.net.params_mut(), &grads, &mut opt)?;
        trace.push(record);
    }
    model.net.params_mut().freeze();
    Ok(SelfTrainOutcome {
        pseudo_labels: pseudo,
        coverage,
        model,
        record: SelfTrainRecord { round, coverage, skipped: false, warning: None },
        trace,
    })
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AblationCell {
    pub phase: bool,
    pub cpn: bool,
    pub self_train: bool,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let s = |on: bool| if on { '+' } else { '-' };
        format!("{}phase {}cpn {}ssl", s(self.phase), s(self.cpn), s(self.self_train))
    }

    /// `{±phase} × {±CPN}` without self-training.
    pub fn grid_2x2() -> Vec<Self> {
        let mut cells = Vec::new();
        for phase in [false, true] {
            for cpn in [false, true] {
                cells.push(Self { phase, cpn, self_train: false });
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub cell: AblationCell,
    pub seed: u64,
    pub miou: f64,
    pub fwiou: f64,
    pub semantic_preservation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub cell: AblationCell,
    pub mean_miou: f64,
    pub mean_fwiou: f64,
    pub mean_semantic_preservation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub records: Vec<AblationRecord>,
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn best_cell(&self) -> Option<AblationCell> {
        self.summary
            .iter()
            .max_by(|a, b| a.mean_miou.total_cmp(&b.mean_miou))
            .map(|s| s.cell)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = JsonlWriter::create(path).map_err(io_err(path))?;
        for r in &self.records {
            w.write(r).map_err(io_err(path))?;
        }
        for s in &self.summary {
            w.write(s).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Evaluate every cell for every seed. Within a seed, cells share translators
/// (keyed by the phase flag), the prior, and every data-order stream.
pub fn ablation_run(
    cfg: &RunConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    dataset: &Dataset,
    reference: &SegModel,
    mut progress: impl FnMut(&AblationRecord),
) -> Result<AblationReport, TrainError> {
    let data = dataset.training_view();
    let src_pairs: Vec<(&Image, &SegMask)> = dataset.train_src.iter().map(|s| (&s.source, &s.mask)).collect();
    let mut records = Vec::new();
    for &seed in seeds {
        let base = RunConfig { seed, ..cfg.clone() };
        let mut translators: BTreeMap<bool, Translators> = BTreeMap::new();
        let mut prior: Option<CpnModel> = None;
        for &cell in cells {
            if let std::collections::btree_map::Entry::Vacant(slot) = translators.entry(cell.phase) {
                let mut w = base.weights;
                if !cell.phase {
                    w.lambda_ph = 0.0;
                }
                let run = train_translators(&RunConfig { weights: w, ..base.clone() }, data)?;
                slot.insert(run.models);
            }
            if cell.cpn && prior.is_none() {
                prior = Some(train_prior(&base, data)?.model);
            }
            let t = &translators[&cell.phase].forward;
            let mut w = base.weights;
            if !cell.cpn {
                w.lambda_cpn = 0.0;
            }
            let seg_cfg = RunConfig { weights: w, ..base.clone() };
            let mut seg = train_segmentation(&seg_cfg, t, prior.as_ref().filter(|_| cell.cpn), data)?.model;
            if cell.self_train {
                for round in 0..base.self_train_rounds {
                    seg = self_train_round(&seg_cfg, &seg, t, data, round)?.model;
                }
            }
            let report = evaluate_segmenter(&seg, &dataset.eval_tgt)?;
            let sp = semantic_preservation(reference, |x| t.translate(x), &src_pairs)?;
            let record = AblationRecord { cell, seed, miou: report.miou, fwiou: report.fwiou, semantic_preservation: sp };
            progress(&record);
            records.push(record);
        }
    }
    let summary = cells
        .iter()
        .map(|&cell| {
            let rs: Vec<&AblationRecord> = records.iter().filter(|r| r.cell == cell).collect();
            let mean = |f: fn(&AblationRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len().max(1) as f64;
            AblationSummary {
                cell,
                mean_miou: mean(|r| r.miou),
                mean_fwiou: mean(|r| r.fwiou),
                mean_semantic_preservation: mean(|r| r.semantic_preservation),
            }
        })
        .collect();
    Ok(AblationReport { records, summary })
}
