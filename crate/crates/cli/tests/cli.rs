use std::path::Path;
use std::process::{Command, Output};

use phaseda::image::Image;
use phaseda::io::{read_ppm, write_ppm};
use phaseda::spectral::{dft2, split_amp_phase};

fn phaseda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phaseda")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    serde_json::from_str(&line).unwrap_or_else(|_| panic!("not a JSON record: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_manifest_and_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&phaseda(&["gen-data", "--n", "100", "--k", "5", "--seed", "7", "--out", s(&out)]));
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config"]["data"]["classes"], 5);
    // every output of the run is listed, and exists
    for p in run["outputs"].as_array().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).is_file(), "{p}");
    }
    assert!(out.join("config.toml").is_file());
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok(&phaseda(&["gen-data", "--n", "6", "--k", "3", "--seed", "1", "--out", s(&out)]));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n).join("train_src/0000_source.tnsr")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn amp_swap_takes_phase_from_content_and_amplitude_from_style() {
    let dir = tempfile::tempdir().unwrap();
    let content = Image::new(3, 8, 8, (0..192).map(|i| ((i * 37 % 101) as f32 / 101.0) * 0.5 + 0.25).collect()).unwrap();
    let style = Image::new(3, 8, 8, (0..192).map(|i| ((i * 53 % 97) as f32 / 97.0) * 0.5 + 0.25).collect()).unwrap();
    let (a, b, c) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"), dir.path().join("c.ppm"));
    write_ppm(&a, &content).unwrap();
    write_ppm(&b, &style).unwrap();
    ok(&phaseda(&["amp-swap", "--content", s(&a), "--style", s(&b), "--out", s(&c)]));
    let swapped = read_ppm(&c).unwrap();
    assert_eq!((swapped.channels(), swapped.height(), swapped.width()), (3, 8, 8));
    // the output is 8-bit quantized, so compare spectra loosely
    let plane = |img: &Image| phaseda::autodiff::Tensor::new(vec![8, 8], img.plane(0).iter().map(|&v| v as f64).collect()).unwrap();
    let (amp_out, _) = split_amp_phase(&dft2(&plane(&swapped)).unwrap());
    let (amp_style, _) = split_amp_phase(&dft2(&plane(&read_ppm(&b).unwrap())).unwrap());
    let (amp_content, _) = split_amp_phase(&dft2(&plane(&read_ppm(&a).unwrap())).unwrap());
    let dist = |x: &phaseda::autodiff::Tensor<f64>, y: &phaseda::autodiff::Tensor<f64>| x.max_abs_diff(y);
    assert!(dist(&amp_out, &amp_style) < dist(&amp_out, &amp_content));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[run]\nseed = 3\nlearning_rate = 0.1\n").unwrap();
    let out = phaseda(&["--config", s(&cfg), "gen-data", "--n", "3", "--out", s(&dir.path().join("d"))]);
    let rec = error_record(&out);
    let msg = rec["error"].as_str().unwrap();
    assert!(msg.contains("run.learning_rate"), "{msg}");
    assert!(msg.contains("translator_steps") && msg.contains("pseudo_threshold"), "{msg}");
    assert_eq!(rec["status"], "error");
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.ppm");
    let out = phaseda(&["amp-swap", "--content", s(&missing), "--style", s(&missing), "--out", s(&dir.path().join("o.ppm"))]);
    let rec = error_record(&out);
    assert!(rec["error"].as_str().unwrap().contains("nowhere.ppm"));
}

#[test]
fn default_config_ships_published_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&phaseda(&["gen-data", "--n", "2", "--out", s(&out)]));
    let cfg: toml::Table = std::fs::read_to_string(out.join("config.toml")).unwrap().parse().unwrap();
    let w = &cfg["run"]["weights"];
    assert_eq!(w["lambda_d"].as_float(), Some(1.0));
    assert_eq!(w["lambda_cyc"].as_float(), Some(10.0));
    assert_eq!(w["lambda_ph"].as_float(), Some(5.0));
    assert_eq!(w["lambda_cpn"].as_float(), Some(0.5));
    assert_eq!(cfg["run"]["pseudo_threshold"].as_float(), Some(0.9));
}

#[test]
fn full_pipeline_with_tiny_models() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("tiny.toml");
    std::fs::write(
        &cfg,
        "[run]\ntranslator_steps = 2\nseg_steps = 2\nseg_batch = 1\nself_train_steps = 1\npseudo_threshold = 0.3\n\
         [run.translator]\nbase_width = 4\nres_blocks = 1\n[run.discriminator]\nbase_width = 4\n\
         [run.cpn]\nsteps = 2\nbatch_size = 1\n[run.cpn.model]\nwidth_mult = 0.125\n\
         [data]\nclasses = 3\nheight = 32\nwidth = 32\n",
    )
    .unwrap();
    let c = s(&cfg);
    ok(&phaseda(&["--config", c, "gen-data", "--n", "8", "--seed", "2", "--out", s(&p("data"))]));
    ok(&phaseda(&["--config", c, "train-translator", "--data", s(&p("data")), "--out", s(&p("tr"))]));
    let trace = std::fs::read_to_string(p("tr/translator_trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    ok(&phaseda(&["--config", c, "train-cpn", "--data", s(&p("data")), "--out", s(&p("cpn"))]));
    let t = p("tr/T.tnsr");
    ok(&phaseda(&["--config", c, "train-seg", "--data", s(&p("data")), "--translator", s(&t), "--cpn", s(&p("cpn/cpn.tnsr")), "--out", s(&p("seg"))]));
    // a prior is required while its weight is positive
    let rec = error_record(&phaseda(&["--config", c, "train-seg", "--data", s(&p("data")), "--translator", s(&t), "--out", s(&p("x"))]));
    assert!(rec["error"].as_str().unwrap().contains("--cpn"));
    ok(&phaseda(&["--config", c, "self-train", "--data", s(&p("data")), "--translator", s(&t), "--seg", s(&p("seg/seg.tnsr")), "--out", s(&p("st"))]));
    let eval = phaseda(&["eval", "--data", s(&p("data")), "--seg", s(&p("st/seg.tnsr"))]);
    ok(&eval);
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(report["miou"].as_f64().unwrap() >= 0.0);
    // a checkpoint of the wrong kind is refused
    let rec = error_record(&phaseda(&["eval", "--data", s(&p("data")), "--seg", s(&t)]));
    assert!(rec["error"].as_str().unwrap().contains("Segmenter"));
}

#[test]
fn grad_check_reports_each_case() {
    let out = phaseda(&["grad-check", "--case", "conv2d", "--case", "phase_loss", "--instances", "2"]);
    ok(&out);
    let lines: Vec<serde_json::Value> =
        String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["passed"] == true));
    let rec = error_record(&phaseda(&["grad-check", "--case", "nonsense"]));
    assert!(rec["error"].as_str().unwrap().contains("known cases"));
}
