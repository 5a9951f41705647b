use std::sync::OnceLock;

use phaseda::cpn::CpnTrainConfig;
use phaseda::losses::LossWeights;
use phaseda::models::{CpnConfig, DiscriminatorConfig, SegConfig, TranslatorConfig};
use phaseda::synthdata::{gen_dataset, Dataset, SceneConfig};
use phaseda::trainer::{
    ablation_run, pseudo_label, self_train_round, train_prior, train_reference_segmenter, train_segmentation,
    train_translators, AblationCell, RunConfig, TrainError, TranslatorRun,
};

fn tiny() -> RunConfig {
    RunConfig {
        translator: TranslatorConfig { base_width: 4, res_blocks: 1, ..TranslatorConfig::default() },
        discriminator: DiscriminatorConfig { base_width: 4, channels: 3 },
        segnet: SegConfig { base_width: 4, channels: 3 },
        cpn: CpnTrainConfig {
            model: CpnConfig { width_mult: 0.125, min_decoder_width: 4, ..CpnConfig::default() },
            steps: 4,
            batch_size: 2,
            ..CpnTrainConfig::default()
        },
        translator_steps: 6,
        seg_steps: 4,
        seg_batch: 2,
        cpn_warmup: 1,
        reference_scenes: 4,
        reference_steps: 3,
        self_train_steps: 3,
        ..RunConfig::default()
    }
}

fn data() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| gen_dataset(12, 5, &SceneConfig { classes: 3, height: 32, width: 32, ..SceneConfig::default() }).unwrap())
}

fn translators() -> &'static TranslatorRun {
    static RUN: OnceLock<TranslatorRun> = OnceLock::new();
    RUN.get_or_init(|| train_translators(&tiny(), data().training_view()).unwrap())
}

#[test]
fn translator_trace_has_one_record_per_step() {
    let run = translators();
    assert_eq!(run.trace.len(), tiny().translator_steps);
    assert!(run.models.forward.net.params().is_frozen());
    for r in &run.trace {
        assert!(r.total.is_finite() && r.phase.is_some() && r.discriminator.is_some());
    }
}

#[test]
fn phase_weight_does_not_change_data_order() {
    let mut cfg = tiny();
    cfg.weights.lambda_ph = 0.0;
    let off = train_translators(&cfg, data().training_view()).unwrap();
    let order = |run: &TranslatorRun| run.trace.iter().map(|r| (r.source_index, r.target_index)).collect::<Vec<_>>();
    assert_eq!(order(&off), order(translators()));
    assert!(off.trace.iter().all(|r| r.phase.is_none()));
}

#[test]
fn identical_configs_reproduce_traces_bit_exactly() {
    let again = train_translators(&tiny(), data().training_view()).unwrap();
    assert_eq!(again.trace, translators().trace);
}

#[test]
fn segmentation_requires_frozen_inputs_and_leaves_them_untouched() {
    let cfg = tiny();
    let mut unfrozen = translators().models.forward.clone();
    unfrozen.net.params_mut().unfreeze();
    let no_cpn = RunConfig { weights: LossWeights { lambda_cpn: 0.0, ..cfg.weights }, ..cfg.clone() };
    assert!(matches!(
        train_segmentation(&no_cpn, &unfrozen, None, data().training_view()),
        Err(TrainError::NotFrozen(_))
    ));

    let mut prior = train_prior(&cfg, data().training_view()).unwrap().model;
    let t = &translators().models.forward;
    let (t_before, q_before) = (t.net.params().clone(), prior.net.params().clone());
    let run = train_segmentation(&cfg, t, Some(&prior), data().training_view()).unwrap();
    assert_eq!(run.trace.len(), cfg.seg_steps);
    for r in &run.trace {
        let s = r.cpn_score.expect("prior term active");
        assert!(s.is_finite() && s <= 0.0, "{s}");
    }
    assert_eq!(t.net.params(), &t_before);
    assert_eq!(prior.net.params(), &q_before);

    prior.net.params_mut().unfreeze();
    assert!(matches!(
        train_segmentation(&cfg, t, Some(&prior), data().training_view()),
        Err(TrainError::NotFrozen(_))
    ));
}

#[test]
fn self_training_threshold_boundaries() {
    let cfg = RunConfig { weights: LossWeights { lambda_cpn: 0.0, ..LossWeights::default() }, ..tiny() };
    let t = &translators().models.forward;
    let seg = train_segmentation(&cfg, t, None, data().training_view()).unwrap().model;

    let strict = RunConfig { pseudo_threshold: 1.0, ..cfg.clone() };
    let out = self_train_round(&strict, &seg, t, data().training_view(), 0).unwrap();
    assert!(out.record.skipped && out.record.warning.is_some());
    assert_eq!(out.coverage, 0.0);
    assert_eq!(out.model.net.params(), seg.net.params());

    let targets: Vec<_> = data().train_tgt.iter().map(|s| &s.target).collect();
    let (labels, coverage) = pseudo_label(&seg, &targets, 1e-9).unwrap();
    assert_eq!(coverage, 1.0);
    let argmax = seg.predict(&targets[0].batched()).unwrap();
    assert_eq!(labels[0], argmax[0]);

    let loose = RunConfig { pseudo_threshold: 1e-9, ..cfg };
    let out = self_train_round(&loose, &seg, t, data().training_view(), 0).unwrap();
    assert!(!out.record.skipped);
    assert_eq!(out.trace.len(), loose.self_train_steps);
    assert!(out.model.net.params().is_frozen());
}

#[test]
fn ablation_grid_bookkeeping() {
    let cfg = tiny();
    let reference = train_reference_segmenter(&cfg, &data().config).unwrap();
    let report = ablation_run(&cfg, &AblationCell::grid_2x2(), &[0, 1, 2], data(), &reference, |_| {}).unwrap();
    assert_eq!(report.records.len(), 12);
    assert_eq!(report.summary.len(), 4);
    for r in &report.records {
        assert!((0.0..=1.0).contains(&r.miou) && (0.0..=1.0).contains(&r.semantic_preservation));
    }
    // cells sharing a phase flag share translators, so semantic preservation agrees
    for seed in 0..3 {
        let sp = |phase: bool, cpn: bool| {
            report.records.iter().find(|r| r.seed == seed && r.cell == AblationCell { phase, cpn, self_train: false }).unwrap().semantic_preservation
        };
        assert_eq!(sp(true, false), sp(true, true));
        assert_eq!(sp(false, false), sp(false, true));
    }
}

#[test]
fn config_validation() {
    assert!(RunConfig { pseudo_threshold: 0.0, ..tiny() }.validate().is_err());
    assert!(RunConfig { seg_steps: 0, ..tiny() }.validate().is_err());
    assert!(RunConfig { weights: LossWeights { lambda_ph: -1.0, ..LossWeights::default() }, ..tiny() }.validate().is_err());
    let d = RunConfig::default();
    assert_eq!((d.weights.lambda_d, d.weights.lambda_cyc, d.weights.lambda_ph, d.weights.lambda_cpn), (1.0, 10.0, 5.0, 0.5));
    assert_eq!(d.pseudo_threshold, 0.9);
}
