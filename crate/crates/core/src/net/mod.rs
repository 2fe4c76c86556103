//! Network architecture and forward passes.
//!
//! The encoder is `k` preparation networks (one per secret) plus a
//! hiding network; the decoder is `k` independent reveal networks:
//!
//! * **prep** — 2 aggregated layers, 3 channels in, 65 out. Each secret
//!   image is lifted to a 65-channel feature map.
//! * **hiding** — 5 aggregated layers over `[cover ‖ prep_1 ‖ … ‖ prep_k]`
//!   (3 + 65k channels in), then a linear 1x1 projection to 3 channels:
//!   the container image.
//! * **reveal** — per secret: 5 aggregated layers (3 in) plus a linear
//!   1x1 projection to 3 channels: the decoded secret.
//!
//! An *aggregated layer* is three parallel convolutions (kernels 3/4/5,
//! channels 50/10/5, stride 1, shape-preserving padding), each followed
//! by ReLU, concatenated to 65 channels. Even kernels pad asymmetrically
//! (one before, two after per axis).
//!
//! Container and decoded values are unbounded floats during training;
//! clamping to `[0, 1]` happens only at the file-codec boundary, where
//! images become bytes.

pub(crate) mod conv;

use ndarray::{s, Array1, Array4, ArrayView4, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::StegoBatch;
use crate::seeds::{self, Stream};

pub(crate) use conv::AggGrads;

/// Image channel count (RGB).
pub const IMAGE_CHANNELS: usize = 3;

/// Errors from network construction and forward passes.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("model expects {expected} secrets, got {got}")]
    SecretCountMismatch { expected: usize, got: usize },
    #[error("{context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
}

/// The parallel-convolution recipe of one aggregated layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    /// Output channels per branch.
    pub channel_counts: Vec<usize>,
    /// Square kernel size per branch, ascending.
    pub kernel_sizes: Vec<usize>,
}

impl Default for BranchSpec {
    fn default() -> Self {
        BranchSpec { channel_counts: vec![50, 10, 5], kernel_sizes: vec![3, 4, 5] }
    }
}

impl BranchSpec {
    /// Total output channels of one aggregated layer (65 by default).
    pub fn total_channels(&self) -> usize {
        self.channel_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.channel_counts.is_empty() || self.channel_counts.len() != self.kernel_sizes.len() {
            return Err(NetError::InvalidSpec(format!(
                "branch lists must be non-empty and equal length, got {} channel counts and {} kernel sizes",
                self.channel_counts.len(),
                self.kernel_sizes.len()
            )));
        }
        if self.channel_counts.iter().any(|&c| c == 0) || self.kernel_sizes.iter().any(|&k| k == 0) {
            return Err(NetError::InvalidSpec("channel counts and kernel sizes must be positive".into()));
        }
        if self.kernel_sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(NetError::InvalidSpec(format!(
                "kernel sizes must be ascending, got {:?}",
                self.kernel_sizes
            )));
        }
        Ok(())
    }
}

/// Architecture parameters of the full model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Number of secrets `k` (one prep and one reveal network each).
    pub secret_count: usize,
    /// Aggregated layers per prep network.
    pub prep_depth: usize,
    /// Aggregated layers in the hiding network (before its projection).
    pub hiding_depth: usize,
    /// Aggregated layers per reveal network (before its projection).
    pub reveal_depth: usize,
    pub branch: BranchSpec,
}

impl NetworkSpec {
    /// The reference architecture for `k` secrets: prep depth 2, hiding
    /// and reveal depth 5, branches 50/10/5 with kernels 3/4/5.
    pub fn new(secret_count: usize) -> Self {
        NetworkSpec {
            secret_count,
            prep_depth: 2,
            hiding_depth: 5,
            reveal_depth: 5,
            branch: BranchSpec::default(),
        }
    }

    /// Input channels of the hiding network: cover + k prep outputs.
    pub fn hiding_in_channels(&self) -> usize {
        IMAGE_CHANNELS + self.branch.total_channels() * self.secret_count
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.secret_count == 0 {
            return Err(NetError::InvalidSpec("secret_count must be at least 1".into()));
        }
        if self.prep_depth == 0 || self.hiding_depth == 0 || self.reveal_depth == 0 {
            return Err(NetError::InvalidSpec("network depths must be at least 1".into()));
        }
        self.branch.validate()
    }
}

/// One convolution's parameters: `weight` is `(oc, kh, kw, ic)`, laid
/// out to match NHWC activations; `bias` has length `oc`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Conv2d<F> {
    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Post-convolution activation of an aggregated layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Parallel convolutions over one input, channel-concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct AggLayer<F> {
    pub branches: Vec<Conv2d<F>>,
    pub activation: Activation,
}

impl<F: NdFloat> AggLayer<F> {
    /// Branch kernel heights, in branch order (e.g. `[3, 4, 5]`).
    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.branches.iter().map(|c| c.weight.dim().1).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].weight.dim().3
    }

    /// Channels after concatenating every branch.
    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(Conv2d::out_channels).sum()
    }
}

/// A sequence of aggregated layers; prep networks end on an aggregated
/// layer, hiding/reveal networks end on a linear projection layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<F> {
    pub layers: Vec<AggLayer<F>>,
}

/// Layer-input/output cache from a traced forward pass.
/// `activations[i]` is the input of layer `i`; the last entry is the
/// stack output.
#[derive(Clone, Debug)]
pub(crate) struct StackTrace<F> {
    pub activations: Vec<Array4<F>>,
}

impl<F> StackTrace<F> {
    pub(crate) fn output(&self) -> &Array4<F> {
        self.activations.last().expect("trace is never empty")
    }
}

impl<F: NdFloat> ConvStack<F> {
    fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    /// Plain forward pass, retaining nothing.
    pub fn forward(&self, input: ArrayView4<F>) -> Result<Array4<F>, NetError> {
        self.check_input(input)?;
        let mut current = conv::forward_agg(input, &self.layers[0]);
        for layer in &self.layers[1..] {
            current = conv::forward_agg(current.view(), layer);
        }
        Ok(current)
    }

    /// Forward pass retaining every layer input for backprop.
    pub(crate) fn forward_traced(&self, input: ArrayView4<F>) -> Result<StackTrace<F>, NetError> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for layer in &self.layers {
            let next = conv::forward_agg(activations.last().unwrap().view(), layer);
            activations.push(next);
        }
        Ok(StackTrace { activations })
    }

    /// Backpropagate `grad_out` through the stack.
    ///
    /// Returns the input gradient (if `need_input_grad`) and per-layer
    /// parameter gradients (if `need_param_grads`; skipped for frozen
    /// stacks, which only relay gradients).
    pub(crate) fn backward(
        &self,
        trace: &StackTrace<F>,
        grad_out: Array4<F>,
        need_input_grad: bool,
        need_param_grads: bool,
    ) -> (Option<Array4<F>>, Option<Vec<AggGrads<F>>>) {
        debug_assert_eq!(trace.activations.len(), self.layers.len() + 1);
        let mut grads: Vec<Option<AggGrads<F>>> = (0..self.layers.len()).map(|_| None).collect();
        let mut grad = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = i > 0 || need_input_grad;
            let (dx, dw) = conv::backward_agg(
                trace.activations[i].view(),
                trace.activations[i + 1].view(),
                grad.view(),
                layer,
                need_dx,
                need_param_grads,
            );
            grads[i] = dw;
            match dx {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        let param_grads = need_param_grads.then(|| grads.into_iter().map(Option::unwrap).collect());
        (need_input_grad.then_some(grad), param_grads)
    }

    fn check_input(&self, input: ArrayView4<F>) -> Result<(), NetError> {
        let (n, _, _, c) = input.dim();
        if n == 0 || c != self.in_channels() {
            return Err(NetError::ShapeMismatch {
                context: "stack input",
                expected: format!("(batch >= 1, h, w, {})", self.in_channels()),
                got: format!("{:?}", input.dim()),
            });
        }
        Ok(())
    }
}

/// Intermediate state of a traced encoder pass, consumed by training.
#[derive(Clone, Debug)]
pub(crate) struct EncodeTrace<F> {
    pub prep_traces: Vec<StackTrace<F>>,
    /// Trace of the hiding network; its first activation is the
    /// `[cover ‖ prep outputs]` concatenation.
    pub hiding_trace: StackTrace<F>,
}

impl<F> EncodeTrace<F> {
    pub(crate) fn container(&self) -> &Array4<F> {
        self.hiding_trace.output()
    }
}

/// All learnable parameters: `k` prep networks, one hiding network, `k`
/// reveal networks.
#[derive(Clone, Debug, PartialEq)]
pub struct StegoModel<F> {
    pub spec: NetworkSpec,
    pub preps: Vec<ConvStack<F>>,
    pub hiding: ConvStack<F>,
    pub reveals: Vec<ConvStack<F>>,
}

impl<F: NdFloat> StegoModel<F> {
    /// Initialize a model: weights from a fan-in-scaled uniform
    /// distribution (`±sqrt(6 / fan_in)`), biases zero, deterministic
    /// under `seed`. Panics on an invalid spec; validate first if the
    /// spec is untrusted.
    pub fn init(spec: &NetworkSpec, seed: u64) -> StegoModel<F> {
        spec.validate().expect("invalid network spec");
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::WeightInit, 0));
        let agg = spec.branch.total_channels();
        let stack = |in_ch: usize, depth: usize, project: bool, rng: &mut ChaCha8Rng| {
            let mut layers = Vec::with_capacity(depth + usize::from(project));
            for i in 0..depth {
                let cin = if i == 0 { in_ch } else { agg };
                let branches = spec
                    .branch
                    .kernel_sizes
                    .iter()
                    .zip(&spec.branch.channel_counts)
                    .map(|(&k, &oc)| init_conv(oc, k, cin, rng))
                    .collect();
                layers.push(AggLayer { branches, activation: Activation::Relu });
            }
            if project {
                layers.push(AggLayer {
                    branches: vec![init_conv(IMAGE_CHANNELS, 1, agg, rng)],
                    activation: Activation::Linear,
                });
            }
            ConvStack { layers }
        };

        let preps = (0..spec.secret_count)
            .map(|_| stack(IMAGE_CHANNELS, spec.prep_depth, false, &mut rng))
            .collect();
        let hiding = stack(spec.hiding_in_channels(), spec.hiding_depth, true, &mut rng);
        let reveals = (0..spec.secret_count)
            .map(|_| stack(IMAGE_CHANNELS, spec.reveal_depth, true, &mut rng))
            .collect();
        StegoModel { spec: spec.clone(), preps, hiding, reveals }
    }

    /// Number of secrets `k`.
    pub fn secret_count(&self) -> usize {
        self.spec.secret_count
    }

    /// Total learnable scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.named_convs()
            .iter()
            .map(|(_, c)| c.parameter_count())
            .sum()
    }

    /// Run prep network `i` on a batch of secrets (3 channels in, 65 out).
    pub fn prep_forward(&self, i: usize, secret: ArrayView4<F>) -> Result<Array4<F>, NetError> {
        self.preps[i].forward(secret)
    }

    /// Encode: prep each secret, concatenate `[cover ‖ prep outputs]`,
    /// and run the hiding network. Output shape equals the cover shape.
    pub fn encode_forward(&self, batch: &StegoBatch<F>) -> Result<Array4<F>, NetError> {
        self.check_batch(batch)?;
        let preps: Vec<Array4<F>> = self
            .preps
            .iter()
            .zip(&batch.secrets)
            .map(|(p, s)| p.forward(s.view()))
            .collect::<Result<_, _>>()?;
        let mut parts = vec![batch.cover.view()];
        parts.extend(preps.iter().map(|p| p.view()));
        let hidden_in = concat_channels(&parts);
        self.hiding.forward(hidden_in.view())
    }

    /// Traced encode for training; retains all layer activations.
    pub(crate) fn encode_traced(&self, batch: &StegoBatch<F>) -> Result<EncodeTrace<F>, NetError> {
        self.check_batch(batch)?;
        let prep_traces: Vec<StackTrace<F>> = self
            .preps
            .iter()
            .zip(&batch.secrets)
            .map(|(p, s)| p.forward_traced(s.view()))
            .collect::<Result<_, _>>()?;
        let mut parts = vec![batch.cover.view()];
        parts.extend(prep_traces.iter().map(|t| t.output().view()));
        let hidden_in = concat_channels(&parts);
        let hiding_trace = self.hiding.forward_traced(hidden_in.view())?;
        Ok(EncodeTrace { prep_traces, hiding_trace })
    }

    /// Run reveal network `i` on a container batch.
    pub fn reveal_forward(&self, i: usize, container: ArrayView4<F>) -> Result<Array4<F>, NetError> {
        self.reveals[i].forward(container)
    }

    /// Decode all secrets from a container; element `i` comes from
    /// reveal network `i`, matching encoding order.
    pub fn decode_all(&self, container: ArrayView4<F>) -> Result<Vec<Array4<F>>, NetError> {
        self.reveals.iter().map(|r| r.forward(container)).collect()
    }

    fn check_batch(&self, batch: &StegoBatch<F>) -> Result<(), NetError> {
        if batch.secret_count() != self.secret_count() {
            return Err(NetError::SecretCountMismatch {
                expected: self.secret_count(),
                got: batch.secret_count(),
            });
        }
        Ok(())
    }

    /// Stable named traversal of every convolution, in initialization
    /// order. Checkpoints and the optimizer both key off these names.
    pub fn named_convs(&self) -> Vec<(String, &Conv2d<F>)> {
        let mut out = Vec::new();
        for (i, prep) in self.preps.iter().enumerate() {
            collect_stack(&format!("prep{i}"), prep, &mut out);
        }
        collect_stack("hiding", &self.hiding, &mut out);
        for (i, reveal) in self.reveals.iter().enumerate() {
            collect_stack(&format!("reveal{i}"), reveal, &mut out);
        }
        out
    }

    /// Mutable counterpart of [`Self::named_convs`], same order.
    pub fn named_convs_mut(&mut self) -> Vec<(String, &mut Conv2d<F>)> {
        let mut out = Vec::new();
        for (i, prep) in self.preps.iter_mut().enumerate() {
            collect_stack_mut(&format!("prep{i}"), prep, &mut out);
        }
        collect_stack_mut("hiding", &mut self.hiding, &mut out);
        for (i, reveal) in self.reveals.iter_mut().enumerate() {
            collect_stack_mut(&format!("reveal{i}"), reveal, &mut out);
        }
        out
    }

    /// Encoder parameters (all preps, then hiding), mutable, in stable
    /// order.
    pub(crate) fn encoder_convs_mut(&mut self) -> Vec<&mut Conv2d<F>> {
        let mut out = Vec::new();
        for prep in &mut self.preps {
            for layer in &mut prep.layers {
                out.extend(layer.branches.iter_mut());
            }
        }
        for layer in &mut self.hiding.layers {
            out.extend(layer.branches.iter_mut());
        }
        out
    }

    /// Reveal parameters (all reveal networks), mutable, in stable order.
    pub(crate) fn reveal_convs_mut(&mut self) -> Vec<&mut Conv2d<F>> {
        let mut out = Vec::new();
        for reveal in &mut self.reveals {
            for layer in &mut reveal.layers {
                out.extend(layer.branches.iter_mut());
            }
        }
        out
    }

    /// Cast every parameter (used to run gradient checks in `f64` on a
    /// model trained or initialized in `f32`).
    pub fn cast<G: NdFloat>(&self) -> StegoModel<G> {
        let cast_conv = |c: &Conv2d<F>| Conv2d {
            weight: c.weight.mapv(|v| G::from(v).unwrap()),
            bias: c.bias.mapv(|v| G::from(v).unwrap()),
        };
        let cast_stack = |s: &ConvStack<F>| ConvStack {
            layers: s
                .layers
                .iter()
                .map(|l| AggLayer {
                    branches: l.branches.iter().map(cast_conv).collect(),
                    activation: l.activation,
                })
                .collect(),
        };
        StegoModel {
            spec: self.spec.clone(),
            preps: self.preps.iter().map(cast_stack).collect(),
            hiding: cast_stack(&self.hiding),
            reveals: self.reveals.iter().map(cast_stack).collect(),
        }
    }
}

fn collect_stack<'a, F: NdFloat>(
    prefix: &str,
    stack: &'a ConvStack<F>,
    out: &mut Vec<(String, &'a Conv2d<F>)>,
) {
    for (l, layer) in stack.layers.iter().enumerate() {
        for (b, conv) in layer.branches.iter().enumerate() {
            out.push((format!("{prefix}.layer{l}.branch{b}"), conv));
        }
    }
}

fn collect_stack_mut<'a, F: NdFloat>(
    prefix: &str,
    stack: &'a mut ConvStack<F>,
    out: &mut Vec<(String, &'a mut Conv2d<F>)>,
) {
    for (l, layer) in stack.layers.iter_mut().enumerate() {
        for (b, conv) in layer.branches.iter_mut().enumerate() {
            out.push((format!("{prefix}.layer{l}.branch{b}"), conv));
        }
    }
}

/// Concatenate same-shaped-except-channels tensors along the channel
/// axis into one row-major tensor. (`ndarray::concatenate` on the last
/// axis returns column-major data, which the convolution engine would
/// immediately have to copy back; this builds the standard layout
/// directly.)
fn concat_channels<F: NdFloat>(parts: &[ArrayView4<'_, F>]) -> Array4<F> {
    let (n, h, w, _) = parts[0].dim();
    let c_total = parts.iter().map(|p| p.dim().3).sum();
    let mut out = Array4::zeros((n, h, w, c_total));
    let mut lo = 0;
    for part in parts {
        let c = part.dim().3;
        out.slice_mut(s![.., .., .., lo..lo + c]).assign(part);
        lo += c;
    }
    out
}

fn init_conv<F: NdFloat>(oc: usize, k: usize, ic: usize, rng: &mut ChaCha8Rng) -> Conv2d<F> {
    let fan_in = (k * k * ic) as f64;
    let bound = (6.0 / fan_in).sqrt();
    // Draw in f64 and cast so the stream is precision-independent.
    let weight = Array4::from_shape_simple_fn((oc, k, k, ic), || {
        F::from(rng.random_range(-bound..=bound)).unwrap()
    });
    Conv2d { weight, bias: Array1::zeros(oc) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_sized_by_spec() {
        let spec = NetworkSpec::new(3);
        let a: StegoModel<f32> = StegoModel::init(&spec, 9);
        let b: StegoModel<f32> = StegoModel::init(&spec, 9);
        assert_eq!(a, b);
        assert_eq!(a.preps.len(), 3);
        assert_eq!(a.reveals.len(), 3);
        // Hiding input depth: 3 + 65k.
        assert_eq!(a.hiding.layers[0].in_channels(), 198);
        assert_eq!(spec.hiding_in_channels(), 198);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = NetworkSpec::new(1);
        let a: StegoModel<f32> = StegoModel::init(&spec, 1);
        let b: StegoModel<f32> = StegoModel::init(&spec, 2);
        assert_ne!(a, b);
    }

    #[test]
    fn weight_shapes_follow_channel_arithmetic() {
        let spec = NetworkSpec::new(2);
        let model: StegoModel<f32> = StegoModel::init(&spec, 0);
        // Prep layer 0: kernels 3/4/5 over 3 input channels.
        let shapes: Vec<_> = model.preps[0].layers[0].branches.iter().map(|c| c.weight.dim()).collect();
        assert_eq!(shapes, vec![(50, 3, 3, 3), (10, 4, 4, 3), (5, 5, 5, 3)]);
        // Prep layer 1 consumes 65 channels.
        assert_eq!(model.preps[0].layers[1].branches[0].weight.dim(), (50, 3, 3, 65));
        // Hiding layer 0 consumes 3 + 65*2 = 133 channels.
        assert_eq!(model.hiding.layers[0].branches[2].weight.dim(), (5, 5, 5, 133));
        // Projections are linear 1x1 to 3 channels.
        let proj = model.hiding.layers.last().unwrap();
        assert_eq!(proj.branches[0].weight.dim(), (3, 1, 1, 65));
        assert_eq!(proj.activation, Activation::Linear);
        assert_eq!(model.reveals[1].layers.last().unwrap().branches[0].weight.dim(), (3, 1, 1, 65));
    }

    #[test]
    fn named_traversal_covers_every_conv_once() {
        let spec = NetworkSpec::new(2);
        let model: StegoModel<f32> = StegoModel::init(&spec, 0);
        let names: Vec<String> = model.named_convs().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        // 2 preps * 2 layers * 3 branches + hiding (5*3 + 1) + 2 reveals * (5*3 + 1)
        assert_eq!(names.len(), 12 + 16 + 32);
        assert!(names.contains(&"hiding.layer5.branch0".to_string()));
        assert!(names.contains(&"reveal1.layer0.branch2".to_string()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = NetworkSpec::new(0);
        assert!(spec.validate().is_err());
        spec.secret_count = 1;
        spec.branch.kernel_sizes = vec![5, 4, 3];
        assert!(spec.validate().is_err());
        spec.branch.kernel_sizes = vec![3, 4];
        assert!(spec.validate().is_err());
    }
}
