//! Finite-difference verification of the analytic gradient.
//!
//! The backward pass is the part of this crate most likely to be
//! subtly wrong, so it gets an independent referee: central
//! differences of the actual loss, evaluated through the plain forward
//! path. For any single scalar parameter the loss is piecewise
//! quadratic (one linear use of the parameter followed by
//! piecewise-linear layers), so away from ReLU kinks the central
//! difference is essentially exact and disagreement points at the
//! backward pass, not at truncation error.
//!
//! Checks run on the noiseless path (noise would make the numeric loss
//! stochastic) and should run in `f64`: `f32` rounding alone is larger
//! than the tolerances worth testing.

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::StegoBatch;
use crate::net::{StegoModel, IMAGE_CHANNELS};
use crate::seeds::{self, Stream};

use super::{flatten_grads, full_loss, loss_grad, TrainError};

/// Relative disagreement between an analytic and a numeric derivative,
/// with the denominator floored at `1e-6` so near-zero true gradients
/// do not inflate the ratio. An analytic gradient that is off by a
/// factor of two scores ≈ 1 whenever the derivative is of ordinary
/// magnitude.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-6)
}

/// One probed parameter.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    /// Parameter tensor, e.g. `hiding.layer2.branch1.weight`.
    pub name: String,
    /// Flat index within that tensor (C order).
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    /// The probe with the largest relative error.
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compare the analytic gradient of the full (noiseless) loss against
/// central differences at `probe_count` parameters sampled uniformly
/// without replacement across the whole model, deterministically under
/// `seed`.
///
/// `h` is the finite-difference step; `1e-5` is a good default in
/// `f64`. Larger steps risk sweeping a downstream ReLU kink into the
/// probe window (the observed error then sits at 1e-3–1e-2 instead of
/// ~1e-6); much smaller steps surface `f64` rounding instead.
pub fn grad_check(
    model: &StegoModel<f64>,
    batch: &StegoBatch<f64>,
    lambda_c: f64,
    lambda_s: f64,
    probe_count: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    if probe_count == 0 {
        return Err(TrainError::InvalidConfig("probe_count must be at least 1".into()));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(TrainError::InvalidConfig(format!("step h must be positive, got {h}")));
    }

    // Analytic gradient of every parameter, once.
    let stacks = analytic_gradients(model, batch, lambda_c, lambda_s)?;
    let flat = flatten_grads(&stacks);
    let named = model.named_convs();
    debug_assert_eq!(flat.len(), named.len());

    let total: usize = named.iter().map(|(_, c)| c.parameter_count()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::GradProbe, 0));
    let mut indices: Vec<usize> =
        rand::seq::index::sample(&mut rng, total, probe_count.min(total)).into_vec();
    indices.sort_unstable();

    let mut work = model.clone();
    let mut probes = Vec::with_capacity(indices.len());
    for global in indices {
        let (conv_idx, within) = locate(&named, global);
        let (name, conv) = &named[conv_idx];
        let w_len = conv.weight.len();
        let (tensor, flat_index) = if within < w_len {
            ("weight", within)
        } else {
            ("bias", within - w_len)
        };
        let analytic = {
            let (dw, db) = flat[conv_idx];
            if within < w_len {
                dw.as_slice().expect("gradients are standard layout")[within]
            } else {
                db[within - w_len]
            }
        };

        let original = get_param(&work, conv_idx, within);
        set_param(&mut work, conv_idx, within, original + h);
        let plus = loss_at(&work, batch, lambda_c, lambda_s)?;
        set_param(&mut work, conv_idx, within, original - h);
        let minus = loss_at(&work, batch, lambda_c, lambda_s)?;
        // Restore the exact original bits before the next probe.
        set_param(&mut work, conv_idx, within, original);

        let numeric = (plus - minus) / (2.0 * h);
        probes.push(ProbeResult {
            name: format!("{name}.{tensor}"),
            flat_index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }

    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, probes })
}

/// Full-model analytic gradient on the noiseless path, as per-stack,
/// per-layer gradients in named-traversal order (preps, hiding,
/// reveals).
fn analytic_gradients(
    model: &StegoModel<f64>,
    batch: &StegoBatch<f64>,
    lambda_c: f64,
    lambda_s: f64,
) -> Result<Vec<Vec<crate::net::AggGrads<f64>>>, TrainError> {
    let b = batch.batch_size();
    let trace = model.encode_traced(batch)?;
    let container = trace.container();

    let mut d_container = loss_grad(container.view(), batch.cover.view(), lambda_c, b);
    let mut reveal_grads = Vec::with_capacity(model.secret_count());
    for (reveal, secret) in model.reveals.iter().zip(&batch.secrets) {
        let rtrace = reveal.forward_traced(container.view())?;
        let d_out = loss_grad(rtrace.output().view(), secret.view(), lambda_s, b);
        let (dx, grads) = reveal.backward(&rtrace, d_out, true, true);
        d_container += &dx.expect("input gradient was requested");
        reveal_grads.push(grads.expect("parameter gradients were requested"));
    }

    let (d_hidden, hiding_grads) =
        model.hiding.backward(&trace.hiding_trace, d_container, true, true);
    let d_hidden = d_hidden.expect("input gradient was requested");
    let agg = model.spec.branch.total_channels();

    let mut stacks = Vec::with_capacity(2 * model.secret_count() + 1);
    for (i, prep) in model.preps.iter().enumerate() {
        let lo = IMAGE_CHANNELS + i * agg;
        let d_prep = d_hidden.slice(s![.., .., .., lo..lo + agg]).to_owned();
        let (_, grads) = prep.backward(&trace.prep_traces[i], d_prep, false, true);
        stacks.push(grads.expect("parameter gradients were requested"));
    }
    stacks.push(hiding_grads.expect("parameter gradients were requested"));
    stacks.extend(reveal_grads);
    Ok(stacks)
}

/// Full noiseless loss through the plain forward path (no traces, no
/// shared code with the backward pass beyond the forward convolutions
/// themselves).
fn loss_at(
    model: &StegoModel<f64>,
    batch: &StegoBatch<f64>,
    lambda_c: f64,
    lambda_s: f64,
) -> Result<f64, TrainError> {
    let container = model.encode_forward(batch)?;
    let decoded = model.decode_all(container.view())?;
    let report = full_loss(
        container.view(),
        batch.cover.view(),
        &decoded,
        &batch.secrets,
        lambda_c,
        lambda_s,
    )?;
    Ok(report.total)
}

/// Map a global flat parameter index to (conv index in named order,
/// offset within that conv's weight-then-bias layout).
fn locate(named: &[(String, &crate::net::Conv2d<f64>)], mut index: usize) -> (usize, usize) {
    for (ci, (_, conv)) in named.iter().enumerate() {
        let n = conv.parameter_count();
        if index < n {
            return (ci, index);
        }
        index -= n;
    }
    panic!("flat parameter index out of range");
}

fn get_param(model: &StegoModel<f64>, conv_idx: usize, within: usize) -> f64 {
    let named = model.named_convs();
    let conv = named[conv_idx].1;
    let w_len = conv.weight.len();
    if within < w_len {
        conv.weight.as_slice().expect("standard layout")[within]
    } else {
        conv.bias[within - w_len]
    }
}

fn set_param(model: &mut StegoModel<f64>, conv_idx: usize, within: usize, value: f64) {
    let mut named = model.named_convs_mut();
    let conv = &mut named[conv_idx].1;
    let w_len = conv.weight.len();
    if within < w_len {
        conv.weight.as_slice_mut().expect("standard layout")[within] = value;
    } else {
        conv.bias[within - w_len] = value;
    }
}
