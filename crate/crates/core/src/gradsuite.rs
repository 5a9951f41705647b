//! Randomized finite-difference checks for every graph primitive and every
//! composite loss used in training.
//!
//! Piecewise-linear ops (relu, abs, max-pool) are checked on inputs drawn away
//! from their kinks. Deep composites cannot control every hidden kink, so a
//! failing instance whose error shrinks at least tenfold under a tenfold
//! smaller step is redrawn and counted in `redrawn`: a central difference
//! straddling a kink behaves that way, a wrong analytic gradient does not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{grad_check, grad_check_strided, Bindings, GradCheckReport, Graph, GraphError, NodeId, ParamStore, PhaseOpts, Tensor};
use crate::cpn::cpn_score_node;
use crate::losses::{cycle_node, gan_discriminator_node, gan_generator_node, GanVariant};
use crate::mask::{SegMask, IGNORE};
use crate::models::{build_cpn, CpnConfig};

/// Central-difference step used by the suite.
pub const STEP: f64 = 1e-4;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const MAX_REDRAWS: usize = 5;

/// Names of the cases checked by [`run_case`].
pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "conv2d",
    "conv2d_stride2",
    "conv_transpose2d",
    "maxpool2",
    "upsample2",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "log_sigmoid",
    "abs",
    "square",
    "log",
    "instance_norm",
    "softmax_channels",
    "log_softmax_channels",
    "concat_channels",
    "sum",
    "mean",
    "cross_entropy",
    "phase_loss",
    "phase_loss_unnormalized",
    "cycle",
    "gan_generator_log",
    "gan_generator_least_squares",
    "gan_discriminator_log",
    "gan_discriminator_least_squares",
    "cpn_score",
];

#[derive(Debug, Error)]
pub enum GradSuiteError {
    #[error("unknown grad-check case `{0}`; known cases: {known}", known = CASES.join(", "))]
    UnknownCase(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub redrawn: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in [0.1, 1): far from zero relative to the step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values on a 0.01 grid, shuffled, so every pooling window has a clear winner.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("sized")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.2..2.0))
}

struct Instance {
    graph: Graph<f64>,
    loss: NodeId,
    tensors: Vec<(String, Tensor<f64>)>,
    labels: Vec<(String, Vec<SegMask>)>,
    params: Option<ParamStore<f64>>,
    /// Coordinates per leaf to check, with a stride offset; all when `None`.
    sample: Option<(usize, usize)>,
}

impl Instance {
    fn new() -> Self {
        Self { graph: Graph::new(), loss: NodeId(0), tensors: vec![], labels: vec![], params: None, sample: None }
    }

    fn leaf(&mut self, name: &str, value: Tensor<f64>) -> NodeId {
        self.tensors.push((name.to_string(), value));
        self.graph.input_with_grad(name)
    }

    /// Reduce a non-scalar output with fixed random weights so no coordinate's
    /// gradient is trivially uniform.
    fn weighted(&mut self, rng: &mut ChaCha8Rng, out: NodeId, shape: &[usize]) {
        let w = self.graph.constant(normal(rng, shape));
        let p = self.graph.mul(out, w);
        self.loss = self.graph.sum(p);
    }

    fn check(&mut self, step: f64) -> Result<GradCheckReport, GraphError> {
        let mut b = Bindings::new();
        for (k, v) in &self.tensors {
            b.set(k.clone(), v);
        }
        for (k, v) in &self.labels {
            b = b.labels(k.clone(), v);
        }
        if let Some(p) = &self.params {
            b = b.params(p);
        }
        match self.sample {
            Some((per_leaf, offset)) => grad_check_strided(&mut self.graph, self.loss, &b, step, per_leaf, offset),
            None => grad_check(&mut self.graph, self.loss, &b, step),
        }
    }
}

fn unary(rng: &mut ChaCha8Rng, draw: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>, op: fn(&mut Graph<f64>, NodeId) -> NodeId) -> Instance {
    let shape = [2, 3, 4, 4];
    let mut inst = Instance::new();
    let x = inst.leaf("x", draw(rng, &shape));
    let y = op(&mut inst.graph, x);
    let out_shape = if matches!(inst.graph.op(y), crate::autodiff::Op::Sum(_) | crate::autodiff::Op::Mean(_)) {
        vec![]
    } else {
        shape.to_vec()
    };
    if out_shape.is_empty() {
        inst.loss = y;
    } else {
        inst.weighted(rng, y, &out_shape);
    }
    inst
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, NodeId, NodeId) -> NodeId) -> Instance {
    let shape = [2, 3, 3];
    let mut inst = Instance::new();
    let a = inst.leaf("a", normal(rng, &shape));
    let b = inst.leaf("b", normal(rng, &shape));
    let y = op(&mut inst.graph, a, b);
    inst.weighted(rng, y, &shape);
    inst
}

fn random_masks(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> Vec<SegMask> {
    (0..n)
        .map(|_| {
            let v = (0..h * w)
                .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..k) as u8 })
                .collect();
            SegMask::new(h, w, v).expect("sized")
        })
        .collect()
}

fn build(case: &str, rng: &mut ChaCha8Rng) -> Instance {
    match case {
        "add" => binary(rng, |g, a, b| g.add(a, b)),
        "sub" => binary(rng, |g, a, b| g.sub(a, b)),
        "mul" => binary(rng, |g, a, b| g.mul(a, b)),
        "scale" => unary(rng, normal, |g, x| g.scale(x, -1.7)),
        "add_scalar" => unary(rng, normal, |g, x| {
            let y = g.add_scalar(x, 0.3);
            g.square(y)
        }),
        "matmul" => {
            let mut inst = Instance::new();
            let a = inst.leaf("a", normal(rng, &[3, 4]));
            let b = inst.leaf("b", normal(rng, &[4, 5]));
            let y = inst.graph.matmul(a, b);
            inst.weighted(rng, y, &[3, 5]);
            inst
        }
        "conv2d" | "conv2d_stride2" => {
            let (stride, pad, k) = if case == "conv2d" { (1, 1, 3) } else { (2, 1, 4) };
            let mut inst = Instance::new();
            let x = inst.leaf("x", normal(rng, &[2, 2, 6, 6]));
            let w = inst.leaf("w", normal(rng, &[3, 2, k, k]));
            let b = inst.leaf("b", normal(rng, &[3]));
            let y = inst.graph.conv2d(x, w, Some(b), stride, pad);
            let o = (6 + 2 * pad - k) / stride + 1;
            inst.weighted(rng, y, &[2, 3, o, o]);
            inst
        }
        "conv_transpose2d" => {
            let mut inst = Instance::new();
            let x = inst.leaf("x", normal(rng, &[2, 3, 3, 3]));
            let w = inst.leaf("w", normal(rng, &[3, 2, 3, 3]));
            let b = inst.leaf("b", normal(rng, &[2]));
            let y = inst.graph.conv_transpose2d(x, w, Some(b), 2, 1, 1);
            inst.weighted(rng, y, &[2, 2, 6, 6]);
            inst
        }
        "maxpool2" => {
            let mut inst = Instance::new();
            let x = inst.leaf("x", distinct(rng, &[2, 2, 4, 6]));
            let y = inst.graph.maxpool2(x);
            inst.weighted(rng, y, &[2, 2, 2, 3]);
            inst
        }
        "upsample2" => {
            let mut inst = Instance::new();
            let x = inst.leaf("x", normal(rng, &[1, 2, 3, 2]));
            let y = inst.graph.upsample2(x);
            inst.weighted(rng, y, &[1, 2, 6, 4]);
            inst
        }
        "relu" => unary(rng, off_kink, |g, x| g.relu(x)),
        "leaky_relu" => unary(rng, off_kink, |g, x| g.leaky_relu(x, 0.2)),
        "tanh" => unary(rng, normal, |g, x| g.tanh(x)),
        "sigmoid" => unary(rng, normal, |g, x| g.sigmoid(x)),
        "log_sigmoid" => unary(rng, normal, |g, x| g.log_sigmoid(x)),
        "abs" => unary(rng, off_kink, |g, x| g.abs(x)),
        "square" => unary(rng, normal, |g, x| g.square(x)),
        "log" => unary(rng, positive, |g, x| g.log(x)),
        "instance_norm" => unary(rng, normal, |g, x| g.instance_norm(x)),
        "softmax_channels" => unary(rng, normal, |g, x| g.softmax_channels(x)),
        "log_softmax_channels" => unary(rng, normal, |g, x| g.log_softmax_channels(x)),
        "concat_channels" => {
            let mut inst = Instance::new();
            let a = inst.leaf("a", normal(rng, &[2, 1, 3, 3]));
            let b = inst.leaf("b", normal(rng, &[2, 2, 3, 3]));
            let y = inst.graph.concat_channels(a, b);
            inst.weighted(rng, y, &[2, 3, 3, 3]);
            inst
        }
        "sum" => unary(rng, normal, |g, x| g.sum(x)),
        "mean" => unary(rng, normal, |g, x| g.mean(x)),
        "cross_entropy" => {
            let mut inst = Instance::new();
            let x = inst.leaf("logits", normal(rng, &[2, 4, 3, 3]));
            let mut masks = random_masks(rng, 2, 4, 3, 3);
            masks[0].values_mut()[0] = 1;
            inst.labels.push(("y".into(), masks));
            inst.loss = inst.graph.cross_entropy(x, "y");
            inst
        }
        "phase_loss" | "phase_loss_unnormalized" => {
            let normalize = case == "phase_loss";
            let mut inst = Instance::new();
            let r = inst.leaf("reference", normal(rng, &[1, 2, 4, 8]));
            let t = inst.leaf("translated", normal(rng, &[1, 2, 4, 8]));
            inst.loss = inst.graph.phase_loss(r, t, PhaseOpts { normalize, eps: 1e-12 });
            inst
        }
        "cycle" => {
            let mut inst = Instance::new();
            let xv = normal(rng, &[1, 3, 4, 4]);
            let gap = off_kink(rng, &[1, 3, 4, 4]);
            let rv = Tensor::from_fn(&[1, 3, 4, 4], |i| xv.data()[i] + gap.data()[i]);
            let x = inst.leaf("x", xv);
            let r = inst.leaf("recon", rv);
            inst.loss = cycle_node(&mut inst.graph, x, r);
            inst
        }
        "gan_generator_log" | "gan_generator_least_squares" => {
            let variant = if case.ends_with("log") { GanVariant::Log } else { GanVariant::LeastSquares };
            let mut inst = Instance::new();
            let z = inst.leaf("logits", normal(rng, &[1, 1, 5, 5]));
            inst.loss = gan_generator_node(&mut inst.graph, z, variant);
            inst
        }
        "gan_discriminator_log" | "gan_discriminator_least_squares" => {
            let variant = if case.ends_with("log") { GanVariant::Log } else { GanVariant::LeastSquares };
            let mut inst = Instance::new();
            let r = inst.leaf("real", normal(rng, &[1, 1, 5, 5]));
            let f = inst.leaf("fake", normal(rng, &[1, 1, 5, 5]));
            inst.loss = gan_discriminator_node(&mut inst.graph, r, f, variant);
            inst
        }
        "cpn_score" => {
            let cfg = CpnConfig { width_mult: 0.0625, seg_width: 2, bottleneck_channels: 2, min_decoder_width: 1, ..CpnConfig::default() };
            let prior = build_cpn(&cfg, 3, rng.random(), "q").expect("valid config");
            let mut inst = Instance::new();
            let (h, w) = (32, 32);
            // a proper per-pixel distribution, as the score expects
            let raw = positive(rng, &[1, 3, h, w]);
            let plane = h * w;
            let seg = Tensor::from_fn(&[1, 3, h, w], |i| {
                let p = i % plane;
                raw.data()[i] / (0..3).map(|c| raw.data()[c * plane + p]).sum::<f64>()
            });
            let s = inst.leaf("seg", seg);
            inst.tensors.push(("image".into(), Tensor::from_fn(&[1, 3, h, w], |_| rng.random_range(0.0..1.0))));
            let x = inst.graph.input("image");
            inst.loss = cpn_score_node(&mut inst.graph, &prior, s, x);
            inst.params = Some(prior.net.params().cast());
            inst.sample = Some((256, rng.random_range(0..12)));
            inst
        }
        other => unreachable!("case `{other}` is listed in CASES"),
    }
}

/// Check `instances` fresh random instances of `case`.
pub fn run_case(case: &str, instances: usize, seed: u64) -> Result<CaseReport, GradSuiteError> {
    if !CASES.contains(&case) {
        return Err(GradSuiteError::UnknownCase(case.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CaseReport { case: case.to_string(), instances: 0, max_rel_error: 0.0, coordinates: 0, redrawn: 0 };
    while report.instances < instances {
        let mut inst = build(case, &mut rng);
        let r = inst.check(STEP)?;
        if r.max_rel_error > TOLERANCE && report.redrawn < MAX_REDRAWS * instances {
            let fine = inst.check(STEP / 10.0)?;
            if fine.max_rel_error * 10.0 <= r.max_rel_error {
                report.redrawn += 1;
                continue;
            }
        }
        report.instances += 1;
        report.coordinates += r.coordinates;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_cases_pass() {
        for case in ["add", "conv2d", "maxpool2", "log_softmax_channels", "cross_entropy", "phase_loss"] {
            let r = run_case(case, 3, 11).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
