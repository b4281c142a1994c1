//! Gradient oracles: finite-difference checks and limit-case equivalences.
//!
//! The routed backward pass is verified against objectives it never
//! touches. For every module `n` the parameter gradients it emits must be
//! the exact gradient of one scalar function:
//!
//! * classifier parameters: the module's own loss `L_n`;
//! * backbone parameters: `alpha_eff * L_n + (1 - alpha_eff) * L_{n+1}`,
//!   where the successor term is evaluated with the activation *entering
//!   the flow range* frozen at its base value — parameters below the
//!   range therefore cannot influence it, mirroring the truncation.
//!
//! Central finite differences of those objectives are compared against
//! the router's output on randomly drawn tiny networks. Draws whose
//! forward pass carries a value too close to a rectifier kink are
//! rejected, so the objectives are smooth at the scale of the probe step.
//!
//! A second family of checks asserts limit cases that must hold to much
//! tighter tolerance: a single module reduces to plain backprop, zero
//! flow length decouples modules from everything downstream, full local
//! weight behaves like zero flow, an even full-span blend equals the
//! gradient of the averaged two-module objective, and the routed output
//! is affine in the blending weight.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::{AuxClassifierSpec, FeatureShape, LayerSpec, Mode, Network, NetworkSpec};
use crate::optim::softmax_xent;
use crate::params::{accumulate_scaled, GradMap, Owner, ParamKey};
use crate::router::{
    effective_alpha, partition, routed_step, BackLinkConfig, PartitionPlan,
};
use crate::rng::substream;
use crate::tape::{BackwardOptions, Tape};
use crate::tensor::max_abs_diff;
use crate::{Error, Result, Tensor};

/// Acceptance bar for the finite-difference comparison.
pub const FD_RELATIVE_TOLERANCE: f64 = 1e-4;

/// Forward passes are rejected when any rectifier input sits closer to
/// zero than this; the probe step can move activations by a few parts in
/// 1e-4, so the margin keeps every probe on one side of the kink.
const KINK_MARGIN: f64 = 2e-3;

const MAX_DRAW_ATTEMPTS: usize = 2000;

/// Central-difference step for a parameter value.
pub fn fd_step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

/// Symmetric relative error with an absolute floor of 1, so near-zero
/// pairs are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Random tiny networks
// ---------------------------------------------------------------------------

/// A randomly drawn, well-conditioned training problem: network,
/// partition, flow configuration, one batch, and its labels.
pub struct TinyNetwork {
    pub net: Network<f64>,
    pub plan: PartitionPlan,
    pub cfg: BackLinkConfig,
    pub classifier: AuxClassifierSpec,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
    /// Human-readable draw summary for failure reports.
    pub description: String,
}

/// Draw a tiny mixed dense/conv/residual network split into 2–3 modules.
pub fn random_tiny_network(rng: &mut ChaCha8Rng) -> Result<TinyNetwork> {
    random_tiny_network_with_modules(rng, None)
}

/// Like [`random_tiny_network`] with a forced module count.
pub fn random_tiny_network_with_modules(
    rng: &mut ChaCha8Rng,
    modules: Option<usize>,
) -> Result<TinyNetwork> {
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let tn = draw_candidate(rng, modules)?;
        if well_conditioned(&tn)? {
            return Ok(tn);
        }
    }
    Err(Error::Verification(format!(
        "no well-conditioned random network found in {} draws",
        MAX_DRAW_ATTEMPTS
    )))
}

fn draw_candidate(rng: &mut ChaCha8Rng, modules: Option<usize>) -> Result<TinyNetwork> {
    let classes = rng.gen_range(2..=4usize);
    let batch = rng.gen_range(2..=3usize);
    let total_units = rng.gen_range(3..=8usize);
    let k = modules
        .unwrap_or_else(|| rng.gen_range(2..=3usize))
        .min(total_units);

    let mut layers = Vec::new();
    let input;
    let mut image_units = 0;
    let mut width;
    if rng.gen_bool(0.5) {
        let mut c = rng.gen_range(2..=3usize);
        let mut s = rng.gen_range(4..=5usize);
        input = FeatureShape::Image {
            channels: c,
            height: s,
            width: s,
        };
        image_units = rng.gen_range(1..=total_units.min(3));
        for _ in 0..image_units {
            match rng.gen_range(0..3u8) {
                0 => {
                    let oc = rng.gen_range(2..=6usize);
                    layers.push(LayerSpec::Conv3x3 {
                        in_channels: c,
                        out_channels: oc,
                        stride: 1,
                    });
                    layers.push(LayerSpec::Relu);
                    c = oc;
                }
                2 if 2 * c <= 6 => {
                    layers.push(LayerSpec::ResidualBlock {
                        in_channels: c,
                        downsample: true,
                    });
                    c *= 2;
                    s = (s - 1) / 2 + 1;
                }
                _ => layers.push(LayerSpec::ResidualBlock {
                    in_channels: c,
                    downsample: false,
                }),
            }
        }
        width = c * s * s;
        if image_units < total_units {
            layers.push(LayerSpec::Flatten);
        }
    } else {
        width = rng.gen_range(4..=16usize);
        input = FeatureShape::Flat { features: width };
    }
    for _ in image_units..total_units {
        let out = rng.gen_range(4..=16usize);
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: out,
        });
        if rng.gen_bool(0.3) {
            layers.push(LayerSpec::BatchNorm);
        }
        layers.push(LayerSpec::Relu);
        width = out;
    }

    let net_seed: u64 = rng.gen();
    let mut net = Network::new(
        NetworkSpec {
            input: input.clone(),
            layers,
        },
        net_seed,
    )?;
    let plan = partition(total_units, k)?;

    let all_outputs_are_images = (0..k).all(|m| {
        matches!(
            net.unit_output_shape(plan.module_units(m).end - 1),
            FeatureShape::Image { .. }
        )
    });
    let classifier = if all_outputs_are_images && rng.gen_bool(0.5) {
        AuxClassifierSpec::ConvHead { hidden: 8 }
    } else {
        AuxClassifierSpec::Linear
    };
    for m in 0..k {
        let feat = net.unit_output_shape(plan.module_units(m).end - 1);
        net.init_classifier(m, &classifier, &feat, classes, net_seed)?;
    }

    let alpha = [0.0, 0.25, 0.5, 0.75, 1.0][rng.gen_range(0..5usize)];
    let cfg = BackLinkConfig::new(rng.gen_range(0..=3usize), alpha);

    let shape = input.batched(batch);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
    let input_batch = Tensor::new(shape, data)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();

    let description = format!(
        "units={} modules={} flow={} alpha={} classifier={:?} input={} batch={} seed={}",
        total_units, k, cfg.flow_length, alpha, classifier, input, batch, net_seed
    );
    Ok(TinyNetwork {
        net,
        plan,
        cfg,
        classifier,
        input: input_batch,
        labels,
        description,
    })
}

/// Accept a draw only if the whole forward pass (backbone plus every
/// classifier head) stays clear of rectifier kinks and produces finite
/// logits.
fn well_conditioned(tn: &TinyNetwork) -> Result<bool> {
    let mut tape = Tape::new();
    let x = tape.leaf(tn.input.clone());
    let rec = tn
        .net
        .record_stack(&mut tape, 0..tn.net.unit_count(), x, Mode::Train, None)?;
    for m in 0..tn.plan.module_count() {
        let h = rec.unit_outputs[tn.plan.module_units(m).end - 1];
        let logits = tn.net.record_classifier(&mut tape, m, &tn.classifier, h)?;
        if !tape.value(logits).all_finite() {
            return Ok(false);
        }
    }
    Ok(tape.min_abs_relu_input().map_or(true, |m| m >= KINK_MARGIN))
}

// ---------------------------------------------------------------------------
// Finite-difference check
// ---------------------------------------------------------------------------

struct BaseForward {
    /// Concrete input value of each module at the base parameters.
    module_inputs: Vec<Tensor<f64>>,
    /// Concrete output value of each unit, grouped per module.
    unit_outputs: Vec<Vec<Tensor<f64>>>,
}

fn base_forward(tn: &TinyNetwork) -> Result<BaseForward> {
    let mut module_inputs = Vec::new();
    let mut unit_outputs = Vec::new();
    let mut cur = tn.input.clone();
    for m in 0..tn.plan.module_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(cur.clone());
        let rec = tn
            .net
            .record_stack(&mut tape, tn.plan.module_units(m), x, Mode::Train, None)?;
        let outs: Vec<Tensor<f64>> = rec
            .unit_outputs
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect();
        module_inputs.push(cur);
        cur = outs.last().expect("modules are non-empty").clone();
        unit_outputs.push(outs);
    }
    Ok(BaseForward {
        module_inputs,
        unit_outputs,
    })
}

/// The module's own classifier loss, forwarded from a fixed input value.
fn local_loss(
    net: &Network<f64>,
    tn: &TinyNetwork,
    module: usize,
    x: &Tensor<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let rec = net.record_stack(&mut tape, tn.plan.module_units(module), xid, Mode::Train, None)?;
    let logits = net.record_classifier(&mut tape, module, &tn.classifier, rec.output())?;
    Ok(softmax_xent(tape.value(logits), &tn.labels)?.0)
}

/// The successor's classifier loss, forwarded from the frozen activation
/// at the flow-range entry: only in-range parameters of `module` (and the
/// successor itself, which is never perturbed here) can influence it.
fn successor_loss_frozen_entry(
    net: &Network<f64>,
    tn: &TinyNetwork,
    module: usize,
    entry: &Tensor<f64>,
    depth: usize,
) -> Result<f64> {
    let units = tn.plan.module_units(module);
    let mut tape = Tape::new();
    let e = tape.leaf(entry.clone());
    let tail = net.record_stack(&mut tape, units.end - depth..units.end, e, Mode::Train, None)?;
    let succ = net.record_stack(
        &mut tape,
        tn.plan.module_units(module + 1),
        tail.output(),
        Mode::Train,
        None,
    )?;
    let logits = net.record_classifier(&mut tape, module + 1, &tn.classifier, succ.output())?;
    Ok(softmax_xent(tape.value(logits), &tn.labels)?.0)
}

/// Per-network result of the finite-difference comparison.
pub struct GradCheckSummary {
    pub parameters_checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
}

/// Compare every routed parameter gradient of `tn` against central finite
/// differences of the matching module objective.
pub fn check_network_gradients(tn: &TinyNetwork) -> Result<GradCheckSummary> {
    let step = routed_step(
        &tn.net,
        &tn.plan,
        &tn.cfg,
        &tn.classifier,
        &tn.input,
        &tn.labels,
        None,
    )?;

    let trainable: Vec<ParamKey> = tn
        .net
        .params
        .iter()
        .filter(|(_, e)| e.kind.trainable())
        .map(|(k, _)| *k)
        .collect();
    for key in &trainable {
        if !step.grads.contains_key(key) {
            return Err(Error::Verification(format!(
                "router produced no gradient for {}",
                key
            )));
        }
    }
    if step.grads.len() != trainable.len() {
        return Err(Error::Verification(format!(
            "router produced {} gradients for {} trainable parameters",
            step.grads.len(),
            trainable.len()
        )));
    }

    let base = base_forward(tn)?;
    let mut net = tn.net.clone();
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = None;

    for m in 0..tn.plan.module_count() {
        let units = tn.plan.module_units(m);
        let size = units.len();
        let depth = tn.cfg.flow_length.min(size);
        let is_final = m == tn.plan.module_count() - 1;
        let alpha_eff = effective_alpha(tn.cfg.alpha, is_final, depth);
        let has_successor_term = !is_final && depth > 0 && alpha_eff < 1.0;
        let entry = if depth == 0 {
            None
        } else if depth == size {
            Some(base.module_inputs[m].clone())
        } else {
            Some(base.unit_outputs[m][size - depth - 1].clone())
        };

        let module_keys: Vec<ParamKey> = trainable
            .iter()
            .copied()
            .filter(|k| match k.owner {
                Owner::Unit(u) => units.contains(&u),
                Owner::Classifier(c) => c == m,
            })
            .collect();

        for key in module_keys {
            let classifier_param = matches!(key.owner, Owner::Classifier(_));
            let shape = net.params.value(key)?.shape().to_vec();
            let mut data = net.params.value(key)?.data().to_vec();
            let routed_grad = step.grads[&key].clone();

            for i in 0..data.len() {
                let base_v = data[i];
                let h = fd_step(base_v);
                let plus = base_v + h;
                let minus = base_v - h;
                let denom = plus - minus;

                data[i] = plus;
                net.params.set_value(key, Tensor::new(shape.clone(), data.clone())?)?;
                let j_plus = eval_objective(
                    &net, tn, m, alpha_eff, has_successor_term, &entry, depth,
                    &base.module_inputs[m], classifier_param,
                )?;

                data[i] = minus;
                net.params.set_value(key, Tensor::new(shape.clone(), data.clone())?)?;
                let j_minus = eval_objective(
                    &net, tn, m, alpha_eff, has_successor_term, &entry, depth,
                    &base.module_inputs[m], classifier_param,
                )?;

                data[i] = base_v;
                net.params.set_value(key, Tensor::new(shape.clone(), data.clone())?)?;

                let fd = (j_plus - j_minus) / denom;
                let rel = relative_error(routed_grad.data()[i], fd);
                checked += 1;
                if rel > max_rel {
                    max_rel = rel;
                    worst = Some(format!("{} [{}]", key, i));
                }
            }
        }
    }

    Ok(GradCheckSummary {
        parameters_checked: checked,
        max_relative_error: max_rel,
        worst_parameter: worst,
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_objective(
    net: &Network<f64>,
    tn: &TinyNetwork,
    module: usize,
    alpha_eff: f64,
    has_successor_term: bool,
    entry: &Option<Tensor<f64>>,
    depth: usize,
    module_input: &Tensor<f64>,
    classifier_param: bool,
) -> Result<f64> {
    if classifier_param {
        return local_loss(net, tn, module, module_input);
    }
    let mut j = 0.0;
    if alpha_eff > 0.0 {
        j += alpha_eff * local_loss(net, tn, module, module_input)?;
    }
    if has_successor_term {
        let entry = entry.as_ref().expect("successor term implies an entry");
        j += (1.0 - alpha_eff) * successor_loss_frozen_entry(net, tn, module, entry, depth)?;
    }
    Ok(j)
}

/// Aggregate result over a batch of random networks.
#[derive(Debug)]
pub struct SuiteReport {
    pub networks: usize,
    pub parameters_checked: usize,
    pub max_relative_error: f64,
    pub worst_case: Option<String>,
}

impl SuiteReport {
    pub fn require_within(&self, tolerance: f64) -> Result<()> {
        if self.max_relative_error <= tolerance {
            Ok(())
        } else {
            Err(Error::Verification(format!(
                "finite-difference mismatch: max relative error {:.3e} > {:.1e} at {}",
                self.max_relative_error,
                tolerance,
                self.worst_case.as_deref().unwrap_or("unknown")
            )))
        }
    }
}

/// Run the finite-difference comparison on `networks` fresh random draws.
pub fn run_gradient_suite(networks: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = substream(seed, "verify.suite", &[]);
    let mut report = SuiteReport {
        networks,
        parameters_checked: 0,
        max_relative_error: 0.0,
        worst_case: None,
    };
    for _ in 0..networks {
        let tn = random_tiny_network(&mut rng)?;
        let summary = check_network_gradients(&tn)?;
        report.parameters_checked += summary.parameters_checked;
        if summary.max_relative_error > report.max_relative_error {
            report.max_relative_error = summary.max_relative_error;
            report.worst_case = summary
                .worst_parameter
                .map(|p| format!("{} on [{}]", p, tn.description));
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Limit-case equivalences
// ---------------------------------------------------------------------------

fn max_grad_deviation(a: &GradMap<f64>, b: &GradMap<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Verification(format!(
            "gradient key sets differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut max = 0.0f64;
    for (key, ga) in a {
        let gb = b
            .get(key)
            .ok_or_else(|| Error::Verification(format!("missing gradient for {}", key)))?;
        max = max.max(max_abs_diff(ga, gb));
    }
    Ok(max)
}

/// Largest absolute deviation between routed gradients on a single-module
/// partition and one plain monolithic backward pass.
pub fn monolithic_reduction_deviation(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "verify.monolithic", &[]);
    let tn = random_tiny_network_with_modules(&mut rng, Some(1))?;
    // Flow settings must be irrelevant for a single (hence final) module.
    let cfg = BackLinkConfig::new(2, 0.3);
    let routed = routed_step(
        &tn.net, &tn.plan, &cfg, &tn.classifier, &tn.input, &tn.labels, None,
    )?;

    let mut tape = Tape::new();
    let x = tape.leaf(tn.input.clone());
    let rec = tn
        .net
        .record_stack(&mut tape, 0..tn.net.unit_count(), x, Mode::Train, None)?;
    let logits = tn
        .net
        .record_classifier(&mut tape, 0, &tn.classifier, rec.output())?;
    let (_, dlogits) = softmax_xent(tape.value(logits), &tn.labels)?;
    let direct = tape.backward(&[(logits, dlogits)], &BackwardOptions::default())?;
    max_grad_deviation(&routed.grads, &direct.param_grads)
}

/// With zero flow length, gradients and boundary errors of every
/// non-final module must be bit-identical before and after randomizing
/// all parameters of the final module. Returns the largest deviation
/// (expected exactly zero).
pub fn downstream_invariance_deviation(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "verify.invariance", &[]);
    let tn = random_tiny_network(&mut rng)?;
    let cfg = BackLinkConfig::new(0, tn.cfg.alpha);
    let before = routed_step(
        &tn.net, &tn.plan, &cfg, &tn.classifier, &tn.input, &tn.labels, None,
    )?;

    let k = tn.plan.module_count();
    let last_units = tn.plan.module_units(k - 1);
    let mut perturbed = tn.net.clone();
    let downstream: Vec<ParamKey> = perturbed
        .params
        .iter()
        .filter(|(key, e)| {
            e.kind.trainable()
                && match key.owner {
                    Owner::Unit(u) => last_units.contains(&u),
                    Owner::Classifier(c) => c == k - 1,
                }
        })
        .map(|(k, _)| *k)
        .collect();
    for key in downstream {
        let shape = perturbed.params.value(key)?.shape().to_vec();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        perturbed.params.set_value(key, Tensor::new(shape, data)?)?;
    }
    let after = routed_step(
        &perturbed, &tn.plan, &cfg, &tn.classifier, &tn.input, &tn.labels, None,
    )?;

    let mut max = 0.0f64;
    for (key, ga) in &before.grads {
        let upstream = match key.owner {
            Owner::Unit(u) => !last_units.contains(&u),
            Owner::Classifier(c) => c != k - 1,
        };
        if upstream {
            max = max.max(max_abs_diff(ga, &after.grads[key]));
        }
    }
    for m in 0..k - 1 {
        max = max.max(max_abs_diff(
            &before.boundary_errors[m],
            &after.boundary_errors[m],
        ));
    }
    Ok(max)
}

/// Full local weight must ignore the flow entirely: `alpha = 1` with a
/// positive flow length produces the same gradients as zero flow length.
pub fn alpha_one_reduction_deviation(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "verify.alpha-one", &[]);
    let tn = random_tiny_network(&mut rng)?;
    let flow = rng.gen_range(1..=3usize);
    let a = routed_step(
        &tn.net,
        &tn.plan,
        &BackLinkConfig::new(flow, 1.0),
        &tn.classifier,
        &tn.input,
        &tn.labels,
        None,
    )?;
    let b = routed_step(
        &tn.net,
        &tn.plan,
        &BackLinkConfig::new(0, 0.5),
        &tn.classifier,
        &tn.input,
        &tn.labels,
        None,
    )?;
    max_grad_deviation(&a.grads, &b.grads)
}

/// Two modules, flow spanning all of the first, even blend: the first
/// module's backbone gradients must match one monolithic backward pass
/// of `0.5 * L_0 + 0.5 * L_1`. Returns the largest per-element relative
/// error.
pub fn full_span_blend_deviation(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "verify.full-span", &[]);
    let tn = random_tiny_network_with_modules(&mut rng, Some(2))?;
    let cfg = BackLinkConfig::new(tn.plan.module_size(0), 0.5);
    let routed = routed_step(
        &tn.net, &tn.plan, &cfg, &tn.classifier, &tn.input, &tn.labels, None,
    )?;

    let mut tape = Tape::new();
    let x = tape.leaf(tn.input.clone());
    let rec0 = tn
        .net
        .record_stack(&mut tape, tn.plan.module_units(0), x, Mode::Train, None)?;
    let logits0 = tn
        .net
        .record_classifier(&mut tape, 0, &tn.classifier, rec0.output())?;
    let rec1 = tn.net.record_stack(
        &mut tape,
        tn.plan.module_units(1),
        rec0.output(),
        Mode::Train,
        None,
    )?;
    let logits1 = tn
        .net
        .record_classifier(&mut tape, 1, &tn.classifier, rec1.output())?;
    let (_, d0) = softmax_xent(tape.value(logits0), &tn.labels)?;
    let (_, d1) = softmax_xent(tape.value(logits1), &tn.labels)?;
    let joint = tape.backward(
        &[(logits0, d0.scale(0.5)), (logits1, d1.scale(0.5))],
        &BackwardOptions::default(),
    )?;

    let first = tn.plan.module_units(0);
    let mut max = 0.0f64;
    for (key, g) in &routed.grads {
        if let Owner::Unit(u) = key.owner {
            if first.contains(&u) {
                let j = &joint.param_grads[key];
                for (a, b) in g.data().iter().zip(j.data()) {
                    max = max.max(relative_error(*a, *b));
                }
            }
        }
    }
    Ok(max)
}

/// The routed gradient field is affine in the blending weight:
/// `g(alpha) = alpha * g(1) + (1 - alpha) * g(0)` for every parameter.
pub fn linearity_deviation(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "verify.linearity", &[]);
    let tn = random_tiny_network(&mut rng)?;
    let flow = rng.gen_range(1..=3usize);
    let alpha = [0.25, 0.5, 0.75][rng.gen_range(0..3usize)];
    let at = |a: f64| -> Result<GradMap<f64>> {
        Ok(routed_step(
            &tn.net,
            &tn.plan,
            &BackLinkConfig::new(flow, a),
            &tn.classifier,
            &tn.input,
            &tn.labels,
            None,
        )?
        .grads)
    };
    let g = at(alpha)?;
    let g_local = at(1.0)?;
    let g_global = at(0.0)?;
    let mut combo = GradMap::new();
    accumulate_scaled(&mut combo, &g_local, alpha)?;
    accumulate_scaled(&mut combo, &g_global, 1.0 - alpha)?;
    max_grad_deviation(&g, &combo)
}
