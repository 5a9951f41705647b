//! Toy-scale networks built on the autodiff graph.
//!
//! Every model owns an f32 [`ParamStore`] whose tensor names carry the model's
//! prefix (`"T.enc0.w"`, `"cpn.dec3.b"`, ...), so several models can share one
//! graph and one set of bindings. `forward` only needs names and shapes, so the
//! same model can be instantiated in an f64 graph for gradient checks.

mod cpn;
mod discriminator;
mod segnet;
mod translator;

pub use cpn::{build_cpn, CpnConfig, CpnModel, CpnNodes, CPN_DOWNSAMPLE};
pub use discriminator::{build_discriminator, DiscriminatorConfig, DiscriminatorModel};
pub use segnet::{argmax_masks, build_segnet, SegConfig, SegModel};
pub use translator::{build_translator, TranslatorConfig, TranslatorModel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Bindings, Graph, GraphError, NodeId, ParamStore, Scalar, Tensor};

/// Anything that maps an image batch to an image batch inside a graph.
pub trait ImageMap {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> NodeId;
}

/// The identity translator.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl ImageMap for IdentityMap {
    fn apply<T: Scalar>(&self, _g: &mut Graph<T>, x: NodeId, _trainable: bool) -> NodeId {
        x
    }
}

impl ImageMap for TranslatorModel {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> NodeId {
        self.forward(g, x, trainable)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("need at least {min} classes, got {found}")]
    TooFewClasses { min: usize, found: usize },
    #[error("spatial extent {extent} is not divisible by {factor}")]
    Indivisible { extent: usize, factor: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Named parameters plus a deterministic initializer.
///
/// Each layer draws from its own ChaCha stream, keyed by the layer name, so two
/// nets built from one seed agree on every layer whose shape they share.
#[derive(Debug, Clone)]
pub struct Net {
    prefix: String,
    params: ParamStore<f32>,
    seed: u64,
}

/// FNV-1a over the layer name.
fn layer_stream(layer: &str) -> u64 {
    layer.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl Net {
    fn new(prefix: &str, seed: u64) -> Self {
        Self { prefix: prefix.to_string(), params: ParamStore::new(), seed }
    }

    fn key(&self, layer: &str, kind: &str) -> String {
        format!("{}.{layer}.{kind}", self.prefix)
    }

    /// He-style normal weights with the given fan-in, zero bias.
    fn add_layer(&mut self, layer: &str, shape: [usize; 4], fan_in: usize, bias: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(layer_stream(layer));
        let w = Tensor::from_fn(&shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        });
        let (wk, bk) = (self.key(layer, "w"), self.key(layer, "b"));
        self.params.insert(wk, w);
        self.params.insert(bk, Tensor::zeros(&[bias]));
    }

    fn conv_layer(&mut self, layer: &str, cin: usize, cout: usize, k: usize) {
        self.add_layer(layer, [cout, cin, k, k], cin * k * k, cout);
    }

    fn convt_layer(&mut self, layer: &str, cin: usize, cout: usize, k: usize, stride: usize) {
        self.add_layer(layer, [cin, cout, k, k], (cin * k * k / (stride * stride)).max(1), cout);
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Re-key every parameter under a new prefix.
    pub fn rename(&mut self, prefix: &str) {
        let frozen = self.params.is_frozen();
        let old = std::mem::take(&mut self.params).into_inner();
        let cut = self.prefix.len();
        self.params =
            ParamStore::from_map(old.into_iter().map(|(k, v)| (format!("{prefix}{}", &k[cut..]), v)).collect());
        if frozen {
            self.params.freeze();
        }
        self.prefix = prefix.to_string();
    }

    /// Replace the parameters with `store`, which must carry the same names and shapes.
    pub fn load(&mut self, store: ParamStore<f32>) -> Result<(), ModelError> {
        for (name, t) in self.params.iter() {
            let other = store.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if other.shape() != t.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: other.shape().to_vec(),
                });
            }
        }
        let frozen = self.params.is_frozen();
        let wanted: Vec<String> = self.params.names().cloned().collect();
        let mut map = store.into_inner();
        map.retain(|k, _| wanted.contains(k));
        self.params = ParamStore::from_map(map);
        if frozen {
            self.params.freeze();
        }
        Ok(())
    }
}

/// Graph-building helpers bound to one model's parameter names.
struct Layers<'a> {
    prefix: &'a str,
    trainable: bool,
}

impl Layers<'_> {
    fn params<T: Scalar>(&self, g: &mut Graph<T>, layer: &str) -> (NodeId, NodeId) {
        let w = g.param(&format!("{}.{layer}.w", self.prefix), self.trainable);
        let b = g.param(&format!("{}.{layer}.b", self.prefix), self.trainable);
        (w, b)
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, layer: &str, x: NodeId, stride: usize, pad: usize) -> NodeId {
        let (w, b) = self.params(g, layer);
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn convt<T: Scalar>(&self, g: &mut Graph<T>, layer: &str, x: NodeId) -> NodeId {
        let (w, b) = self.params(g, layer);
        g.conv_transpose2d(x, w, Some(b), 2, 1, 1)
    }
}

fn check_classes(k: usize, min: usize) -> Result<(), ModelError> {
    if k < min {
        return Err(ModelError::TooFewClasses { min, found: k });
    }
    Ok(())
}

fn check_divisible(h: usize, w: usize, factor: usize) -> Result<(), ModelError> {
    for extent in [h, w] {
        if extent == 0 || extent % factor != 0 {
            return Err(ModelError::Indivisible { extent, factor });
        }
    }
    Ok(())
}

/// Run a single-input network on `x` outside of any training graph.
pub(crate) fn infer_single<F>(net: &Net, x: &Tensor<f32>, build: F) -> Result<Tensor<f32>, ModelError>
where
    F: FnOnce(&mut Graph<f32>, NodeId) -> NodeId,
{
    let mut g = Graph::new();
    let input = g.input("x");
    let out = build(&mut g, input);
    let b = Bindings::new().tensor("x", x).params(net.params());
    g.forward(&b)?;
    Ok(g.value(out).expect("evaluated").clone())
}
