//! Partitioning and restricted backward error flow.
//!
//! The backbone's basic units are split into `K` contiguous modules, each
//! with an auxiliary classifier. During a training step every module
//! computes its own classifier loss; the gradient of that loss with
//! respect to the module *input* is handed to the predecessor, which lets
//! it flow back through at most `flow_length` of its last units. Unit
//! parameters blend the two signals as
//!
//! ```text
//! grad = alpha * d(local loss) + (1 - alpha) * d(successor loss)
//! ```
//!
//! with the second term present only inside the flow range. The final
//! module, and every module when `flow_length = 0`, trains on its local
//! loss at full weight. Classifier parameters always receive their raw
//! local gradient. A handed-over error is always the raw local one: the
//! successor's influence never crosses more than one boundary.
//!
//! Two equivalent implementations are provided: a two-pass form that
//! reuses each module's forward tape ([`routed_step`] with
//! [`Weighting::BoundaryOnce`]), and a unit-stepped form that walks
//! explicit [`ErrorPacket`]s one unit at a time
//! ([`routed_step_unitwise`]), which also supports the literal per-unit
//! re-weighting variant ([`Weighting::PerUnit`]).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::nn::{AuxClassifierSpec, BnUpdate, Mode, Network, NoiseKey};
use crate::optim::softmax_xent;
use crate::params::{accumulate_scaled, GradMap, Owner};
use crate::tape::{BackwardOptions, Tape, ValueId};
use crate::{Error, Real, Result, Tensor};

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

/// Contiguous assignment of basic units to modules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    modules: Vec<Range<usize>>,
}

/// Split `total_units` into `module_count` contiguous modules whose sizes
/// differ by at most one, larger modules first.
pub fn partition(total_units: usize, module_count: usize) -> Result<PartitionPlan> {
    if module_count == 0 {
        return Err(Error::invalid("partition", "at least one module is required"));
    }
    if total_units < module_count {
        return Err(Error::invalid(
            "partition",
            format!(
                "cannot split {} units into {} non-empty modules",
                total_units, module_count
            ),
        ));
    }
    let base = total_units / module_count;
    let extra = total_units % module_count;
    let mut modules = Vec::with_capacity(module_count);
    let mut start = 0;
    for m in 0..module_count {
        let size = base + usize::from(m < extra);
        modules.push(start..start + size);
        start += size;
    }
    Ok(PartitionPlan { modules })
}

impl PartitionPlan {
    /// Build a plan from explicit module sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(
                "partition",
                "module sizes must be a non-empty list of positive counts",
            ));
        }
        let mut modules = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            modules.push(start..start + s);
            start += s;
        }
        Ok(PartitionPlan { modules })
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    pub fn modules(&self) -> &[Range<usize>] {
        &self.modules
    }

    pub fn module_units(&self, module: usize) -> Range<usize> {
        self.modules[module].clone()
    }

    pub fn module_size(&self, module: usize) -> usize {
        self.modules[module].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.modules.iter().map(|r| r.len()).collect()
    }

    pub fn total_units(&self) -> usize {
        self.modules.last().map_or(0, |r| r.end)
    }

    pub fn module_of_unit(&self, unit: usize) -> Option<usize> {
        self.modules.iter().position(|r| r.contains(&unit))
    }

    /// Error unless the plan covers exactly `unit_count` units.
    pub fn check_covers(&self, unit_count: usize) -> Result<()> {
        if self.total_units() != unit_count {
            return Err(Error::invalid(
                "partition",
                format!(
                    "plan covers {} units but the network has {}",
                    self.total_units(),
                    unit_count
                ),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Flow configuration
// ---------------------------------------------------------------------------

/// Where the local/successor blending weights are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Blend once at the module boundary; both signals then travel the
    /// range unchanged.
    #[default]
    BoundaryOnce,
    /// Re-apply the weights at every unit the flow crosses, so a unit `j`
    /// crossings deep sees `alpha^j` local and `(1-alpha)^j` successor
    /// weight. Below the range the (already weighted) local signal is
    /// transported unchanged.
    PerUnit,
}

/// The three knobs of restricted error flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackLinkConfig {
    /// Number of trailing units per module the successor's error may
    /// reach. Zero decouples the modules completely.
    pub flow_length: usize,
    /// Weight of the local classifier error against the successor error.
    pub alpha: f64,
    #[serde(default)]
    pub weighting: Weighting,
}

impl BackLinkConfig {
    pub fn new(flow_length: usize, alpha: f64) -> Self {
        BackLinkConfig {
            flow_length,
            alpha,
            weighting: Weighting::BoundaryOnce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(
                "flow config",
                format!("alpha must lie in [0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Blending weight actually applied to a module's local backbone
/// gradients: modules that receive no successor signal (the final one, or
/// any when the flow length is zero) train at full weight.
pub fn effective_alpha(alpha: f64, is_final_module: bool, depth: usize) -> f64 {
    if is_final_module || depth == 0 {
        1.0
    } else {
        alpha
    }
}

/// The effective error at a blending point: `alpha * local +
/// (1 - alpha) * global`.
pub fn blend_errors<T: Real>(
    alpha: f64,
    local: &Tensor<T>,
    global: &Tensor<T>,
) -> Result<Tensor<T>> {
    let a = T::from_f64(alpha);
    let b = T::one() - a;
    local.zip_map(global, "error blend", |l, g| a * l + b * g)
}

/// Blend a module's raw local gradients with the raw gradients induced by
/// its successor's error. Classifier parameters pass through unweighted;
/// unit parameters outside the flow range (absent from `global`) are
/// scaled by `alpha_eff` alone.
pub fn combine_grads<T: Real>(
    alpha_eff: f64,
    local: &GradMap<T>,
    global: Option<&GradMap<T>>,
) -> Result<GradMap<T>> {
    let a = T::from_f64(alpha_eff);
    let b = T::one() - a;
    let mut out = GradMap::new();
    for (&key, lg) in local {
        let v = match key.owner {
            Owner::Classifier(_) => lg.clone(),
            Owner::Unit(_) => match global.and_then(|g| g.get(&key)) {
                Some(gg) => lg.zip_map(gg, "grad blend", |l, g| a * l + b * g)?,
                None => lg.scale(a),
            },
        };
        out.insert(key, v);
    }
    if let Some(g) = global {
        for (&key, gg) in g {
            out.entry(key).or_insert_with(|| gg.scale(b));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Error packets (unit-stepped form)
// ---------------------------------------------------------------------------

/// Backward error state at a unit boundary inside one module. Both
/// components are transported *raw*; the blending weights are applied to
/// each unit's parameter-gradient contribution, so the local component at
/// the module input is exactly the error handed to the predecessor.
pub struct ErrorPacket<T: Real> {
    /// Error of the module's own classifier loss.
    pub local: Tensor<T>,
    /// Error of the successor's classifier loss, while in range.
    pub global: Option<Tensor<T>>,
    /// Units the successor error may still cross.
    pub depth_remaining: usize,
    /// In-range crossings performed so far (drives per-unit weighting).
    pub crossings: usize,
    /// Blending weight fixed at injection time.
    pub alpha_eff: f64,
}

/// Build the packet entering a module at its output boundary. `local` and
/// `global` are raw errors with respect to the module output; the flow
/// depth is clamped to the module size. Supplying a successor error when
/// the flow length is zero is a configuration error.
pub fn inject_boundary_error<T: Real>(
    cfg: &BackLinkConfig,
    local: Tensor<T>,
    global: Option<Tensor<T>>,
    module_size: usize,
) -> Result<ErrorPacket<T>> {
    if cfg.flow_length == 0 && global.is_some() {
        return Err(Error::invalid(
            "error injection",
            "a successor error was supplied but the flow length is zero",
        ));
    }
    let depth = cfg.flow_length.min(module_size);
    let alpha_eff = if global.is_none() { 1.0 } else { cfg.alpha };
    Ok(ErrorPacket {
        local,
        global,
        depth_remaining: depth,
        crossings: 0,
        alpha_eff,
    })
}

/// Carry a packet backward across one unit: re-record the unit from its
/// cached input, transport both error components through the transposed
/// Jacobian, and emit this unit's weighted parameter gradients.
pub fn propagate_unit<T: Real>(
    net: &Network<T>,
    cfg: &BackLinkConfig,
    unit: usize,
    unit_input: &Tensor<T>,
    packet: ErrorPacket<T>,
    noise: Option<NoiseKey>,
) -> Result<(ErrorPacket<T>, GradMap<T>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(unit_input.clone());
    // Statistics updates are owned by the main forward pass; this replay
    // discards them.
    let rec = net.record_unit(&mut tape, unit, x, Mode::Train, noise)?;
    let y = rec.output;

    let in_range = packet.depth_remaining > 0 && packet.global.is_some();
    let (local_w, global_w) = match cfg.weighting {
        Weighting::BoundaryOnce => (packet.alpha_eff, 1.0 - packet.alpha_eff),
        Weighting::PerUnit => {
            let j = packet.crossings as i32 + i32::from(in_range);
            (cfg.alpha.powi(j), (1.0 - cfg.alpha).powi(j))
        }
    };

    let opts = BackwardOptions::wanting([x]);
    let local_pass = tape.backward(&[(y, packet.local.clone())], &opts)?;
    let local_in = local_pass
        .errors
        .get(&x)
        .cloned()
        .expect("requested errors are always reported");
    let mut grads = GradMap::new();
    accumulate_scaled(&mut grads, &local_pass.param_grads, T::from_f64(local_w))?;

    let mut global_in = None;
    if in_range {
        let g = packet.global.as_ref().expect("in_range implies a global component");
        let global_pass = tape.backward(&[(y, g.clone())], &opts)?;
        global_in = global_pass.errors.get(&x).cloned();
        accumulate_scaled(&mut grads, &global_pass.param_grads, T::from_f64(global_w))?;
    }

    let next = ErrorPacket {
        local: local_in,
        // After crossing its last allowed unit the successor error stops.
        global: if packet.depth_remaining > 1 { global_in } else { None },
        depth_remaining: packet.depth_remaining.saturating_sub(1),
        crossings: packet.crossings + usize::from(in_range),
        alpha_eff: packet.alpha_eff,
    };
    Ok((next, grads))
}

// ---------------------------------------------------------------------------
// One routed training step
// ---------------------------------------------------------------------------

/// Everything a training step produces before the optimizer runs.
pub struct RoutedStep<T: Real> {
    /// Blended gradients for every unit and classifier parameter.
    pub grads: GradMap<T>,
    /// Local classifier loss per module.
    pub module_losses: Vec<T>,
    /// Raw error of each module's loss at the module input.
    pub boundary_errors: Vec<Tensor<T>>,
    /// Deferred batch-norm running-statistics updates from the forward.
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Final module's logits, for training metrics.
    pub logits: Tensor<T>,
}

/// Run one full training step: forward all modules, route errors backward
/// under `cfg`, and return blended gradients. Dispatches on the weighting
/// mode; the boundary-once form reuses each module's forward tape.
pub fn routed_step<T: Real>(
    net: &Network<T>,
    plan: &PartitionPlan,
    cfg: &BackLinkConfig,
    classifier: &AuxClassifierSpec,
    input: &Tensor<T>,
    labels: &[usize],
    noise: Option<NoiseKey>,
) -> Result<RoutedStep<T>> {
    match cfg.weighting {
        Weighting::BoundaryOnce => routed_step_two_pass(net, plan, cfg, classifier, input, labels, noise),
        Weighting::PerUnit => routed_step_unitwise(net, plan, cfg, classifier, input, labels, noise),
    }
}

struct ModulePass<T: Real> {
    tape: Tape<T>,
    input: ValueId,
    unit_outputs: Vec<ValueId>,
    logits: ValueId,
    loss: T,
    dlogits: Tensor<T>,
}

fn forward_modules<T: Real>(
    net: &Network<T>,
    plan: &PartitionPlan,
    classifier: &AuxClassifierSpec,
    input: &Tensor<T>,
    labels: &[usize],
    noise: Option<NoiseKey>,
) -> Result<(Vec<ModulePass<T>>, Vec<BnUpdate<T>>)> {
    let mut passes = Vec::with_capacity(plan.module_count());
    let mut bn_updates = Vec::new();
    let mut cur = input.clone();
    for m in 0..plan.module_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(cur);
        let rec = net.record_stack(&mut tape, plan.module_units(m), x, Mode::Train, noise)?;
        let logits = net.record_classifier(&mut tape, m, classifier, rec.output())?;
        let (loss, dlogits) = softmax_xent(tape.value(logits), labels)?;
        cur = tape.value(rec.output()).clone();
        bn_updates.extend(rec.bn_updates);
        passes.push(ModulePass {
            tape,
            input: x,
            unit_outputs: rec.unit_outputs,
            logits,
            loss,
            dlogits,
        });
    }
    Ok((passes, bn_updates))
}

fn merge_disjoint<T: Real>(into: &mut GradMap<T>, from: GradMap<T>) {
    for (key, value) in from {
        let prev = into.insert(key, value);
        debug_assert!(prev.is_none(), "modules own disjoint parameter sets");
    }
}

fn routed_step_two_pass<T: Real>(
    net: &Network<T>,
    plan: &PartitionPlan,
    cfg: &BackLinkConfig,
    classifier: &AuxClassifierSpec,
    input: &Tensor<T>,
    labels: &[usize],
    noise: Option<NoiseKey>,
) -> Result<RoutedStep<T>> {
    cfg.validate()?;
    plan.check_covers(net.unit_count())?;
    let k = plan.module_count();
    let (passes, bn_updates) = forward_modules(net, plan, classifier, input, labels, noise)?;

    let mut grads = GradMap::new();
    let mut boundary_errors: Vec<Option<Tensor<T>>> = (0..k).map(|_| None).collect();
    let mut successor_error: Option<Tensor<T>> = None;
    for m in (0..k).rev() {
        let p = &passes[m];
        // Pass A: the module's own loss, raw. Also reads the error at the
        // module input, which is what the predecessor will receive.
        let pass_a = p.tape.backward(
            &[(p.logits, p.dlogits.clone())],
            &BackwardOptions::wanting([p.input]),
        )?;
        let own_error = pass_a
            .errors
            .get(&p.input)
            .cloned()
            .expect("requested errors are always reported");

        let size = p.unit_outputs.len();
        let depth = cfg.flow_length.min(size);
        let is_final = m == k - 1;
        // Pass B: the successor's raw input error, seeded at this module's
        // output and stopped at the entry of the flow range.
        let pass_b = match (&successor_error, is_final, depth) {
            (Some(err), false, d) if d > 0 => {
                let output = *p.unit_outputs.last().expect("modules are non-empty");
                let entry = if d == size {
                    p.input
                } else {
                    p.unit_outputs[size - d - 1]
                };
                let opts = BackwardOptions::default().stop([entry]);
                Some(p.tape.backward(&[(output, err.clone())], &opts)?.param_grads)
            }
            _ => None,
        };

        let alpha_eff = effective_alpha(cfg.alpha, is_final, depth);
        let combined = combine_grads(alpha_eff, &pass_a.param_grads, pass_b.as_ref())?;
        merge_disjoint(&mut grads, combined);
        boundary_errors[m] = Some(own_error.clone());
        successor_error = Some(own_error);
    }

    let final_pass = passes.last().expect("at least one module");
    Ok(RoutedStep {
        grads,
        module_losses: passes.iter().map(|p| p.loss).collect(),
        boundary_errors: boundary_errors
            .into_iter()
            .map(|e| e.expect("every module was visited"))
            .collect(),
        bn_updates,
        logits: final_pass.tape.value(final_pass.logits).clone(),
    })
}

/// Unit-stepped implementation: identical routing expressed as explicit
/// packet transport, one unit at a time. Supports both weighting modes;
/// used directly when per-unit weighting is requested and as a
/// cross-check of the two-pass form.
pub fn routed_step_unitwise<T: Real>(
    net: &Network<T>,
    plan: &PartitionPlan,
    cfg: &BackLinkConfig,
    classifier: &AuxClassifierSpec,
    input: &Tensor<T>,
    labels: &[usize],
    noise: Option<NoiseKey>,
) -> Result<RoutedStep<T>> {
    cfg.validate()?;
    plan.check_covers(net.unit_count())?;
    let k = plan.module_count();
    let (passes, bn_updates) = forward_modules(net, plan, classifier, input, labels, noise)?;

    // Cache the concrete unit input values; packet transport replays each
    // unit from them.
    let mut unit_inputs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(k);
    for p in &passes {
        let mut inputs = vec![p.tape.value(p.input).clone()];
        for &out in &p.unit_outputs[..p.unit_outputs.len() - 1] {
            inputs.push(p.tape.value(out).clone());
        }
        unit_inputs.push(inputs);
    }

    let mut grads = GradMap::new();
    let mut boundary_errors: Vec<Option<Tensor<T>>> = (0..k).map(|_| None).collect();
    let mut successor_error: Option<Tensor<T>> = None;
    for m in (0..k).rev() {
        let p = &passes[m];
        let units = plan.module_units(m);
        let size = units.len();

        // Classifier backward on its own small tape: raw head gradients
        // plus the raw local error at the module output.
        let mut cls_tape = Tape::new();
        let h = cls_tape.leaf(p.tape.value(*p.unit_outputs.last().unwrap()).clone());
        let logits = net.record_classifier(&mut cls_tape, m, classifier, h)?;
        let cls_pass = cls_tape.backward(
            &[(logits, p.dlogits.clone())],
            &BackwardOptions::wanting([h]),
        )?;
        let local_at_output = cls_pass
            .errors
            .get(&h)
            .cloned()
            .expect("requested errors are always reported");
        merge_disjoint(&mut grads, cls_pass.param_grads);

        let is_final = m == k - 1;
        let global = if is_final || cfg.flow_length == 0 {
            None
        } else {
            successor_error.clone()
        };
        let mut packet = inject_boundary_error(cfg, local_at_output, global, size)?;
        for (local_idx, unit) in units.clone().enumerate().rev() {
            let (next, unit_grads) = propagate_unit(
                net,
                cfg,
                unit,
                &unit_inputs[m][local_idx],
                packet,
                noise,
            )?;
            packet = next;
            merge_disjoint(&mut grads, unit_grads);
        }

        boundary_errors[m] = Some(packet.local.clone());
        successor_error = Some(packet.local);
    }

    let final_pass = passes.last().expect("at least one module");
    Ok(RoutedStep {
        grads,
        module_losses: passes.iter().map(|p| p.loss).collect(),
        boundary_errors: boundary_errors
            .into_iter()
            .map(|e| e.expect("every module was visited"))
            .collect(),
        bn_updates,
        logits: final_pass.tape.value(final_pass.logits).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{FeatureShape, LayerSpec, NetworkSpec};
    use crate::params::ParamKey;
    use crate::tensor::max_abs_diff;

    fn dense_net(widths: &[usize], seed: u64) -> Network<f64> {
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
            });
            layers.push(LayerSpec::Relu);
        }
        Network::new(
            NetworkSpec {
                input: FeatureShape::Flat { features: widths[0] },
                layers,
            },
            seed,
        )
        .unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(vec![rows, cols], |i| ((i as f64 + seed) * 0.7).sin())
    }

    fn setup(
        widths: &[usize],
        modules: usize,
        classes: usize,
    ) -> (Network<f64>, PartitionPlan, AuxClassifierSpec) {
        let mut net = dense_net(widths, 42);
        let plan = partition(net.unit_count(), modules).unwrap();
        let cspec = AuxClassifierSpec::Linear;
        for m in 0..plan.module_count() {
            let feat = net.unit_output_shape(plan.module_units(m).end - 1);
            net.init_classifier(m, &cspec, &feat, classes, 42).unwrap();
        }
        (net, plan, cspec)
    }

    fn grads_close(a: &GradMap<f64>, b: &GradMap<f64>, tol: f64) {
        assert_eq!(a.len(), b.len(), "gradient key sets differ");
        for (key, ga) in a {
            let gb = b.get(key).unwrap_or_else(|| panic!("missing {}", key));
            let d = max_abs_diff(ga, gb);
            assert!(d <= tol, "{} differs by {}", key, d);
        }
    }

    #[test]
    fn partition_balances_sizes_largest_first() {
        assert_eq!(partition(55, 16).unwrap().sizes(), {
            let mut v = vec![4; 7];
            v.extend(vec![3; 9]);
            v
        });
        assert_eq!(partition(10, 5).unwrap().sizes(), vec![2; 5]);
        assert_eq!(partition(7, 3).unwrap().sizes(), vec![3, 2, 2]);
        assert_eq!(partition(4, 4).unwrap().sizes(), vec![1; 4]);
        assert!(partition(5, 6).is_err());
        assert!(partition(5, 0).is_err());
        let plan = partition(7, 3).unwrap();
        assert_eq!(plan.module_units(1), 3..5);
        assert_eq!(plan.module_of_unit(4), Some(1));
        assert_eq!(plan.module_of_unit(9), None);
        assert_eq!(plan.total_units(), 7);
    }

    #[test]
    fn explicit_sizes_are_validated() {
        assert!(PartitionPlan::from_sizes(&[]).is_err());
        assert!(PartitionPlan::from_sizes(&[2, 0, 1]).is_err());
        let plan = PartitionPlan::from_sizes(&[2, 3]).unwrap();
        assert_eq!(plan.module_units(1), 2..5);
        assert!(plan.check_covers(5).is_ok());
        assert!(plan.check_covers(6).is_err());
    }

    #[test]
    fn blend_matches_the_hand_worked_example() {
        let local = Tensor::vector(vec![0.4, -0.2]);
        let global = Tensor::vector(vec![0.2, 0.0]);
        let blended = blend_errors(0.5, &local, &global).unwrap();
        assert!((blended.data()[0] - 0.3).abs() <= 1e-15);
        assert!((blended.data()[1] + 0.1).abs() <= 1e-15);
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        assert!(BackLinkConfig::new(1, -0.1).validate().is_err());
        assert!(BackLinkConfig::new(1, 1.1).validate().is_err());
        assert!(BackLinkConfig::new(1, f64::NAN).validate().is_err());
        assert!(BackLinkConfig::new(0, 0.0).validate().is_ok());
    }

    #[test]
    fn successor_error_with_zero_flow_is_rejected() {
        let cfg = BackLinkConfig::new(0, 0.5);
        let local = Tensor::vector(vec![1.0]);
        assert!(inject_boundary_error(&cfg, local.clone(), Some(local.clone()), 3).is_err());
        let packet = inject_boundary_error(&cfg, local, None, 3).unwrap();
        assert_eq!(packet.alpha_eff, 1.0);
        assert_eq!(packet.depth_remaining, 0);
        assert!(packet.global.is_none());
    }

    #[test]
    fn combine_keeps_classifier_gradients_unweighted() {
        let mut local = GradMap::new();
        local.insert(ParamKey::unit(0, 0), Tensor::vector(vec![1.0]));
        local.insert(ParamKey::unit(1, 0), Tensor::vector(vec![2.0]));
        local.insert(ParamKey::classifier(0, 0), Tensor::vector(vec![3.0]));
        let mut global = GradMap::new();
        global.insert(ParamKey::unit(1, 0), Tensor::vector(vec![4.0]));
        let out = combine_grads(0.25, &local, Some(&global)).unwrap();
        assert!((out[&ParamKey::unit(0, 0)].data()[0] - 0.25).abs() < 1e-15);
        assert!((out[&ParamKey::unit(1, 0)].data()[0] - (0.25 * 2.0 + 0.75 * 4.0)).abs() < 1e-15);
        assert_eq!(out[&ParamKey::classifier(0, 0)].data()[0], 3.0);
    }

    #[test]
    fn single_module_equals_monolithic_backprop() {
        let (net, plan, cspec) = setup(&[6, 5, 4], 1, 3);
        let x = batch(4, 6, 0.0);
        let labels = [0, 1, 2, 1];
        let cfg = BackLinkConfig::new(3, 0.3);
        let routed = routed_step(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();

        // The same computation written out by hand as one tape.
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let rec = net
            .record_stack(&mut tape, 0..net.unit_count(), xid, Mode::Train, None)
            .unwrap();
        let logits = net.record_classifier(&mut tape, 0, &cspec, rec.output()).unwrap();
        let (loss, dlogits) = softmax_xent(tape.value(logits), &labels).unwrap();
        let direct = tape
            .backward(&[(logits, dlogits)], &BackwardOptions::default())
            .unwrap();
        assert!((routed.module_losses[0] - loss).abs() < 1e-15);
        grads_close(&routed.grads, &direct.param_grads, 1e-12);
    }

    #[test]
    fn zero_flow_and_full_local_weight_coincide() {
        let (net, plan, cspec) = setup(&[6, 6, 5, 4], 2, 3);
        let x = batch(3, 6, 1.0);
        let labels = [2, 0, 1];
        let a = routed_step(&net, &plan, &BackLinkConfig::new(2, 1.0), &cspec, &x, &labels, None)
            .unwrap();
        let b = routed_step(&net, &plan, &BackLinkConfig::new(0, 0.123), &cspec, &x, &labels, None)
            .unwrap();
        grads_close(&a.grads, &b.grads, 1e-12);
    }

    #[test]
    fn zero_alpha_silences_units_below_the_flow_range() {
        // Three units in module 0, flow length 1: with alpha = 0 the two
        // below-range units get exactly zero gradient while the in-range
        // unit carries the successor's signal and classifiers stay live.
        let (net, plan, cspec) = setup(&[5, 5, 5, 5, 4], 2, 3);
        assert_eq!(plan.sizes(), vec![2, 2]);
        let x = batch(3, 5, 2.0);
        let labels = [0, 2, 1];
        let cfg = BackLinkConfig::new(1, 0.0);
        let step = routed_step(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();
        // Module 0 = units 0..2; unit 1 is in range, unit 0 is below it.
        for (key, grad) in &step.grads {
            match key.owner {
                Owner::Unit(0) => assert_eq!(grad.max_abs(), 0.0, "{}", key),
                Owner::Unit(1) => assert!(grad.max_abs() > 0.0, "{}", key),
                Owner::Classifier(_) => assert!(grad.max_abs() > 0.0, "{}", key),
                _ => {}
            }
        }
    }

    #[test]
    fn boundary_errors_ignore_flow_settings() {
        let (net, plan, cspec) = setup(&[6, 6, 5, 4], 2, 3);
        let x = batch(3, 6, 3.0);
        let labels = [1, 1, 0];
        let a = routed_step(&net, &plan, &BackLinkConfig::new(2, 0.3), &cspec, &x, &labels, None)
            .unwrap();
        let b = routed_step(&net, &plan, &BackLinkConfig::new(0, 0.9), &cspec, &x, &labels, None)
            .unwrap();
        for (ea, eb) in a.boundary_errors.iter().zip(&b.boundary_errors) {
            assert_eq!(max_abs_diff(ea, eb), 0.0);
        }
    }

    #[test]
    fn flow_length_clamps_to_module_size() {
        let (net, plan, cspec) = setup(&[6, 6, 5, 4], 2, 3);
        let x = batch(3, 6, 4.0);
        let labels = [2, 2, 0];
        let a = routed_step(&net, &plan, &BackLinkConfig::new(99, 0.4), &cspec, &x, &labels, None)
            .unwrap();
        let b = routed_step(&net, &plan, &BackLinkConfig::new(2, 0.4), &cspec, &x, &labels, None)
            .unwrap();
        grads_close(&a.grads, &b.grads, 0.0);
    }

    #[test]
    fn unitwise_transport_matches_the_two_pass_form() {
        let (net, plan, cspec) = setup(&[6, 6, 5, 5, 4], 2, 3);
        let x = batch(4, 6, 5.0);
        let labels = [0, 1, 2, 0];
        let cfg = BackLinkConfig::new(1, 0.3);
        let two_pass = routed_step(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();
        let stepped =
            routed_step_unitwise(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();
        grads_close(&two_pass.grads, &stepped.grads, 1e-10);
        for (ea, eb) in two_pass.boundary_errors.iter().zip(&stepped.boundary_errors) {
            assert!(max_abs_diff(ea, eb) <= 1e-10);
        }
        for (la, lb) in two_pass.module_losses.iter().zip(&stepped.module_losses) {
            assert!((la - lb).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_unit_weighting_equals_boundary_once_at_flow_length_one() {
        let (net, plan, cspec) = setup(&[6, 6, 5, 5, 4], 2, 3);
        let x = batch(4, 6, 6.0);
        let labels = [1, 0, 2, 2];
        let mut cfg = BackLinkConfig::new(1, 0.35);
        cfg.weighting = Weighting::PerUnit;
        let per_unit = routed_step(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();
        cfg.weighting = Weighting::BoundaryOnce;
        let stepped =
            routed_step_unitwise(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();
        grads_close(&per_unit.grads, &stepped.grads, 1e-13);
    }

    #[test]
    fn per_unit_weighting_compounds_deeper_into_the_range() {
        // With two in-range crossings the deeper unit sees alpha^2 local
        // weight under per-unit mode, but alpha under boundary-once.
        let (net, plan, cspec) = setup(&[5, 5, 5, 5, 4], 2, 3);
        let x = batch(3, 5, 7.0);
        let labels = [0, 1, 2];
        let alpha = 0.5;
        let mut cfg = BackLinkConfig::new(2, alpha);
        let once = routed_step(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();
        cfg.weighting = Weighting::PerUnit;
        let per_unit = routed_step(&net, &plan, &cfg, &cspec, &x, &labels, None).unwrap();
        let key = ParamKey::unit(0, 0);
        let d = max_abs_diff(&once.grads[&key], &per_unit.grads[&key]);
        assert!(d > 1e-9, "per-unit weighting must differ two crossings deep");
    }
}
