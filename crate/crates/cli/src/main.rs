mod artifacts;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use phaseda::gradsuite;
use phaseda::io::{read_ppm, write_pgm, write_ppm, JsonlWriter};
use phaseda::spectral::amplitude_swap;
use phaseda::synthdata::{gen_dataset, write_dataset};
use phaseda::trainer::{
    ablation_run, evaluate_segmenter, self_train_round, train_prior, train_reference_segmenter, train_segmentation,
    train_translators, AblationCell,
};
use serde_json::json;

use artifacts::{DatasetInfo, Kind, RunManifest};
use config::FileConfig;

#[derive(Parser)]
#[command(name = "phaseda", version, about = "Phase-consistent domain adaptation for segmentation")]
struct Cli {
    /// TOML config with optional `[run]` and `[data]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set run.weights.lambda_ph=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark.
    GenData {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Number of classes (overrides `data.classes`).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source→target and target→source translators.
    TrainTranslator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional prior network on label-permuted source masks.
    TrainCpn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the target segmenter on translated source images.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        translator: PathBuf,
        /// Prior checkpoint; required when `run.weights.lambda_cpn` > 0.
        #[arg(long)]
        cpn: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-label the target split and retrain.
    SelfTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        translator: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a segmenter on the evaluation target split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Give the content image the Fourier amplitudes of the style image.
    AmpSwap {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the {±phase} × {±CPN} (× {±self-training} with --full) ablation.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        full: bool,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// Cases to run (default: all).
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTranslator { .. } => "train-translator",
            Command::TrainCpn { .. } => "train-cpn",
            Command::TrainSeg { .. } => "train-seg",
            Command::SelfTrain { .. } => "self-train",
            Command::Eval { .. } => "eval",
            Command::AmpSwap { .. } => "amp-swap",
            Command::Ablate { .. } => "ablate",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
            let record = json!({ "status": "error", "command": name, "error": err.to_string(), "causes": causes });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(cli: &Cli) -> Result<FileConfig> {
    let mut cfg = config::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Persist the resolved config and the run manifest next to the outputs.
fn finish(dir: &Path, command: &str, cfg: &FileConfig, inputs: Vec<PathBuf>, mut outputs: Vec<PathBuf>) -> Result<()> {
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).with_context(|| format!("cannot write {}", cfg_path.display()))?;
    outputs.push(cfg_path);
    let manifest = RunManifest {
        command: command.to_string(),
        seed: cfg.run.seed,
        config: serde_json::to_value(cfg)?,
        inputs,
        outputs,
    };
    let path = manifest.write(dir)?;
    println!("{}", json!({ "status": "ok", "command": command, "manifest": path }));
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in records {
        w.write(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    let command = cli.command.name();
    let mut inputs: Vec<PathBuf> = cli.config.iter().cloned().collect();
    match cli.command {
        Command::GenData { n, k, out } => {
            if let Some(k) = k {
                cfg.data.classes = k;
                cfg.data.validate()?;
            }
            prepare_out(&out)?;
            let ds = gen_dataset(n, cfg.run.seed, &cfg.data)?;
            let mut outputs = write_dataset(&ds, &out)?;
            let info_path = out.join(artifacts::DATASET_INFO);
            let info = DatasetInfo { seed: cfg.run.seed, scenes: n, config: cfg.data.clone() };
            fs::write(&info_path, serde_json::to_string_pretty(&info)? + "\n")?;
            outputs.push(info_path);
            finish(&out, command, &cfg, inputs, outputs)
        }
        Command::TrainTranslator { data, out } => {
            let (ds, used) = artifacts::load_dataset(&data)?;
            inputs.extend(used);
            prepare_out(&out)?;
            cfg.run.out_dir = Some(out.clone());
            let run = train_translators(&cfg.run, ds.training_view())?;
            let mut outputs = Vec::new();
            let m = &run.models;
            for (file, kind, net, model_cfg) in [
                ("T.tnsr", Kind::Translator, &m.forward.net, serde_json::to_value(&m.forward.cfg)?),
                ("Tinv.tnsr", Kind::Translator, &m.backward.net, serde_json::to_value(&m.backward.cfg)?),
                ("Ds.tnsr", Kind::Discriminator, &m.disc_source.net, serde_json::to_value(&m.disc_source.cfg)?),
                ("Dt.tnsr", Kind::Discriminator, &m.disc_target.net, serde_json::to_value(&m.disc_target.cfg)?),
            ] {
                let path = out.join(file);
                artifacts::save_model(&path, kind, net, model_cfg, None, cfg.run.seed)?;
                outputs.push(path);
            }
            let trace = out.join("translator_trace.jsonl");
            write_jsonl(&trace, &run.trace)?;
            outputs.push(trace);
            finish(&out, command, &cfg, inputs, outputs)
        }
        Command::TrainCpn { data, out } => {
            let (ds, used) = artifacts::load_dataset(&data)?;
            inputs.extend(used);
            prepare_out(&out)?;
            let trained = train_prior(&cfg.run, ds.training_view())?;
            let path = out.join("cpn.tnsr");
            let m = &trained.model;
            artifacts::save_model(&path, Kind::Prior, &m.net, &m.cfg, Some(m.classes), cfg.run.seed)?;
            let trace = out.join("cpn_trace.jsonl");
            let records: Vec<_> = trained.trace.iter().enumerate().map(|(step, nll)| json!({ "step": step, "nll": nll })).collect();
            write_jsonl(&trace, &records)?;
            finish(&out, command, &cfg, inputs, vec![path, trace])
        }
        Command::TrainSeg { data, translator, cpn, out } => {
            let (ds, used) = artifacts::load_dataset(&data)?;
            inputs.extend(used);
            let t = artifacts::load_translator(&translator)?;
            inputs.push(translator);
            let prior = match &cpn {
                Some(p) => Some(artifacts::load_prior(p)?),
                None => None,
            };
            inputs.extend(cpn);
            if prior.is_none() && cfg.run.weights.lambda_cpn > 0.0 {
                bail!("run.weights.lambda_cpn is {} but no --cpn checkpoint was given", cfg.run.weights.lambda_cpn);
            }
            prepare_out(&out)?;
            let run = train_segmentation(&cfg.run, &t, prior.as_ref(), ds.training_view())?;
            let path = out.join("seg.tnsr");
            let m = &run.model;
            artifacts::save_model(&path, Kind::Segmenter, &m.net, &m.cfg, Some(m.classes), cfg.run.seed)?;
            let trace = out.join("seg_trace.jsonl");
            write_jsonl(&trace, &run.trace)?;
            finish(&out, command, &cfg, inputs, vec![path, trace])
        }
        Command::SelfTrain { data, translator, seg, out } => {
            let (ds, used) = artifacts::load_dataset(&data)?;
            inputs.extend(used);
            let t = artifacts::load_translator(&translator)?;
            let mut model = artifacts::load_segmenter(&seg)?;
            inputs.extend([translator, seg]);
            prepare_out(&out)?;
            let mut outputs = Vec::new();
            let mut records = Vec::new();
            let mut last_labels = Vec::new();
            for round in 0..cfg.run.self_train_rounds {
                let o = self_train_round(&cfg.run, &model, &t, ds.training_view(), round)?;
                if let Some(w) = &o.record.warning {
                    eprintln!("{}", json!({ "status": "warning", "command": command, "round": round, "warning": w }));
                }
                records.push(o.record.clone());
                model = o.model;
                last_labels = o.pseudo_labels;
            }
            let labels_dir = out.join("pseudo_labels");
            prepare_out(&labels_dir)?;
            for (j, mask) in last_labels.iter().enumerate() {
                let p = labels_dir.join(format!("{j:04}.pgm"));
                write_pgm(&p, mask)?;
                outputs.push(p);
            }
            let path = out.join("seg.tnsr");
            artifacts::save_model(&path, Kind::Segmenter, &model.net, &model.cfg, Some(model.classes), cfg.run.seed)?;
            let log = out.join("self_train.jsonl");
            write_jsonl(&log, &records)?;
            outputs.extend([path, log]);
            finish(&out, command, &cfg, inputs, outputs)
        }
        Command::Eval { data, seg, out } => {
            let (ds, _) = artifacts::load_dataset(&data)?;
            let model = artifacts::load_segmenter(&seg)?;
            let report = evaluate_segmenter(&model, &ds.eval_tgt)?;
            let text = serde_json::to_string(&report)?;
            if let Some(path) = out {
                fs::write(&path, format!("{text}\n")).with_context(|| format!("cannot write {}", path.display()))?;
            }
            println!("{text}");
            Ok(())
        }
        Command::AmpSwap { content, style, out } => {
            artifacts::require_file(&content)?;
            artifacts::require_file(&style)?;
            let c = read_ppm(&content)?;
            let s = read_ppm(&style)?;
            let swapped = amplitude_swap(&c, &s)?;
            write_ppm(&out, &swapped)?;
            println!("{}", json!({ "status": "ok", "command": command, "output": out }));
            Ok(())
        }
        Command::Ablate { data, out, seeds, full } => {
            let (ds, used) = artifacts::load_dataset(&data)?;
            inputs.extend(used);
            prepare_out(&out)?;
            let mut cells = AblationCell::grid_2x2();
            if full {
                let with_ssl: Vec<_> = cells.iter().map(|c| AblationCell { self_train: true, ..*c }).collect();
                cells.extend(with_ssl);
            }
            let reference = train_reference_segmenter(&cfg.run, &ds.config)?;
            let report = ablation_run(&cfg.run, &cells, &seeds, &ds, &reference, |r| {
                eprintln!("{}", json!({ "status": "progress", "cell": r.cell.label(), "seed": r.seed, "miou": r.miou }));
            })?;
            let path = out.join("ablation.jsonl");
            report.write_jsonl(&path)?;
            for s in &report.summary {
                println!(
                    "{:<24} mIoU {:6.2}  fwIoU {:6.2}  semantic preservation {:6.2}",
                    s.cell.label(),
                    100.0 * s.mean_miou,
                    100.0 * s.mean_fwiou,
                    100.0 * s.mean_semantic_preservation
                );
            }
            finish(&out, command, &cfg, inputs, vec![path])
        }
        Command::GradCheck { cases, instances } => {
            let cases: Vec<String> =
                if cases.is_empty() { gradsuite::CASES.iter().map(|c| c.to_string()).collect() } else { cases };
            let mut failed = Vec::new();
            for (i, case) in cases.iter().enumerate() {
                let report = gradsuite::run_case(case, instances, cfg.run.seed.wrapping_add(i as u64))?;
                println!("{}", json!({ "report": report, "passed": report.passed(), "tolerance": gradsuite::TOLERANCE }));
                if !report.passed() {
                    failed.push(case.clone());
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed for: {}", failed.join(", "));
            }
            Ok(())
        }
    }
}
