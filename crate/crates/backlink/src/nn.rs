//! Layers, basic units, and auxiliary classifier heads.
//!
//! A network is a flat list of [`LayerSpec`]s grouped into *basic units*:
//! each weighted layer (dense, convolution, residual block) starts a unit
//! and drags its trailing attachments (normalization, activation, pooling,
//! reshape, dropout) along with it; attachments before the first weighted
//! layer join the first unit. Units are the granularity at which the
//! backward flow length is counted and at which parameters are owned.
//!
//! [`Network`] validates a spec, initializes parameters, and records
//! forward passes of unit ranges and classifier heads onto a [`Tape`].

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::norm::{bn_update_running, BnBatchStats};
use crate::params::{Owner, ParamKey, ParamKind, ParamStore};
use crate::rng::substream;
use crate::tape::{Tape, ValueId};
use crate::{Error, Real, Result, Tensor};

/// Epsilon added to variances before the square root in batch norm.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistics blended into the running buffers.
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// Feature shapes
// ---------------------------------------------------------------------------

/// Per-example feature shape at a layer boundary (the batch dimension is
/// implicit and leading).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureShape {
    Flat { features: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match self {
            FeatureShape::Flat { features } => *features,
            FeatureShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Tensor shape for a batch of examples with these features.
    pub fn batched(&self, batch: usize) -> Vec<usize> {
        match self {
            FeatureShape::Flat { features } => vec![batch, *features],
            FeatureShape::Image {
                channels,
                height,
                width,
            } => vec![batch, *channels, *height, *width],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.numel() == 0 {
            return Err(Error::invalid(
                "feature shape",
                format!("every dimension must be positive, got {}", self),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureShape::Flat { features } => write!(f, "{}", features),
            FeatureShape::Image {
                channels,
                height,
                width,
            } => write!(f, "{}x{}x{}", channels, height, width),
        }
    }
}

// ---------------------------------------------------------------------------
// Layer specifications
// ---------------------------------------------------------------------------

/// One layer of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected layer on flat features; weight stored `[in, out]`.
    Dense { inputs: usize, outputs: usize },
    /// 3x3 convolution with padding 1 and a bias.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    /// Two 3x3 conv + batch norm stages with a skip connection and a final
    /// ReLU. `downsample` halves the spatial extent (stride 2) and doubles
    /// the channel count, using a 1x1 strided projection on the skip path.
    ResidualBlock {
        in_channels: usize,
        #[serde(default)]
        downsample: bool,
    },
    BatchNorm,
    Relu,
    MaxPool2x2,
    AvgPoolGlobal,
    Flatten,
    Dropout { p: f64 },
}

fn default_stride() -> usize {
    1
}

impl LayerSpec {
    /// Weighted layers start a new basic unit; everything else attaches to
    /// the unit in progress.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv3x3 { .. } | LayerSpec::ResidualBlock { .. }
        )
    }

    /// Stable lowercase name, matching the serialized tag.
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::BatchNorm => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "max_pool2x2",
            LayerSpec::AvgPoolGlobal => "avg_pool_global",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    /// Feature shape this layer produces from `input`, or why it cannot.
    pub fn out_shape(&self, input: &FeatureShape) -> Result<FeatureShape> {
        let err = |detail: String| Err(Error::invalid("layer", detail));
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return err("dense widths must be positive".into());
                }
                match input {
                    FeatureShape::Flat { features } if features == inputs => {
                        Ok(FeatureShape::Flat { features: *outputs })
                    }
                    other => err(format!("expects {} flat features, found {}", inputs, other)),
                }
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
            } => {
                if *in_channels == 0 || *out_channels == 0 {
                    return err("channel counts must be positive".into());
                }
                if *stride == 0 {
                    return err("stride must be positive".into());
                }
                match input {
                    FeatureShape::Image {
                        channels,
                        height,
                        width,
                    } if channels == in_channels => Ok(FeatureShape::Image {
                        channels: *out_channels,
                        height: conv_extent(*height, 3, *stride, 1)?,
                        width: conv_extent(*width, 3, *stride, 1)?,
                    }),
                    other => err(format!(
                        "expects image features with {} channels, found {}",
                        in_channels, other
                    )),
                }
            }
            LayerSpec::ResidualBlock {
                in_channels,
                downsample,
            } => {
                if *in_channels == 0 {
                    return err("channel count must be positive".into());
                }
                let stride = if *downsample { 2 } else { 1 };
                match input {
                    FeatureShape::Image {
                        channels,
                        height,
                        width,
                    } if channels == in_channels => Ok(FeatureShape::Image {
                        channels: if *downsample {
                            2 * in_channels
                        } else {
                            *in_channels
                        },
                        height: conv_extent(*height, 3, stride, 1)?,
                        width: conv_extent(*width, 3, stride, 1)?,
                    }),
                    other => err(format!(
                        "expects image features with {} channels, found {}",
                        in_channels, other
                    )),
                }
            }
            LayerSpec::BatchNorm | LayerSpec::Relu => Ok(*input),
            LayerSpec::MaxPool2x2 => match input {
                FeatureShape::Image {
                    channels,
                    height,
                    width,
                } if *height >= 2 && *width >= 2 => Ok(FeatureShape::Image {
                    channels: *channels,
                    height: height / 2,
                    width: width / 2,
                }),
                other => err(format!(
                    "needs image features at least 2x2 in extent, found {}",
                    other
                )),
            },
            LayerSpec::AvgPoolGlobal => match input {
                FeatureShape::Image { channels, .. } => Ok(FeatureShape::Flat {
                    features: *channels,
                }),
                other => err(format!("needs image features, found {}", other)),
            },
            LayerSpec::Flatten => match input {
                FeatureShape::Image { .. } => Ok(FeatureShape::Flat {
                    features: input.numel(),
                }),
                FeatureShape::Flat { .. } => err("features are already flat".into()),
            },
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return err(format!("keep probability requires p in [0, 1), got {}", p));
                }
                match input {
                    FeatureShape::Flat { .. } => Ok(*input),
                    other => err(format!("applies to flat features only, found {}", other)),
                }
            }
        }
    }
}

/// Output extent of a `k`-wide kernel over `extent` with the given stride
/// and symmetric padding.
fn conv_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::invalid(
            "layer",
            format!("kernel of width {} does not fit extent {} (pad {})", k, extent, pad),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Group layers into basic units: each weighted layer starts a unit,
/// leading attachments join the first one.
pub fn unit_ranges(layers: &[LayerSpec]) -> Result<Vec<Range<usize>>> {
    let first_weighted = layers
        .iter()
        .position(LayerSpec::is_weighted)
        .ok_or_else(|| {
            Error::invalid(
                "network",
                "at least one weighted layer is needed to form a basic unit",
            )
        })?;
    let mut starts = vec![0];
    for (i, layer) in layers.iter().enumerate().skip(first_weighted + 1) {
        if layer.is_weighted() {
            starts.push(i);
        }
    }
    starts.push(layers.len());
    Ok(starts.windows(2).map(|w| w[0]..w[1]).collect())
}

// ---------------------------------------------------------------------------
// Network specification
// ---------------------------------------------------------------------------

/// Input features plus the layer list; the serializable description of a
/// backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: FeatureShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Feature shape at every layer boundary; `shapes()[i]` feeds layer
    /// `i`, the last entry is the backbone output.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        self.input.validate()?;
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input);
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes[i];
            let next = layer.out_shape(&cur).map_err(|e| {
                let detail = match e {
                    Error::Invalid { detail, .. } => detail,
                    other => other.to_string(),
                };
                Error::invalid(
                    "network",
                    format!("layer {} ({}): {}", i, layer.name(), detail),
                )
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn unit_ranges(&self) -> Result<Vec<Range<usize>>> {
        unit_ranges(&self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes()?;
        self.unit_ranges()?;
        Ok(())
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }
}

// ---------------------------------------------------------------------------
// Auxiliary classifier heads
// ---------------------------------------------------------------------------

/// Classifier attached to a module's output during local training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxClassifierSpec {
    /// Global average pool (for image features) followed by one dense
    /// layer to the logits.
    Linear,
    /// 3x3 conv + ReLU, global average pool, then a two-layer MLP.
    ConvHead {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

fn default_hidden() -> usize {
    128
}

// ---------------------------------------------------------------------------
// Parameter planning and initialization
// ---------------------------------------------------------------------------

/// Shape and role of one parameter slot, in slot order.
pub(crate) struct ParamPlan {
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Fan-in for scaled normal weight draws; `None` for non-weights.
    pub fan_in: Option<usize>,
}

impl ParamPlan {
    fn weight(shape: Vec<usize>, fan_in: usize) -> Self {
        ParamPlan {
            kind: ParamKind::Weight,
            shape,
            fan_in: Some(fan_in),
        }
    }

    fn plain(kind: ParamKind, shape: Vec<usize>) -> Self {
        ParamPlan {
            kind,
            shape,
            fan_in: None,
        }
    }
}

fn bn_plans(channels: usize) -> impl Iterator<Item = ParamPlan> {
    [
        ParamPlan::plain(ParamKind::BnGamma, vec![channels]),
        ParamPlan::plain(ParamKind::BnBeta, vec![channels]),
        ParamPlan::plain(ParamKind::BnRunningMean, vec![channels]),
        ParamPlan::plain(ParamKind::BnRunningVar, vec![channels]),
    ]
    .into_iter()
}

/// Parameter slots of one layer given its input features. Slot order here
/// is the contract the forward recording relies on.
pub(crate) fn layer_param_plan(
    layer: &LayerSpec,
    input: &FeatureShape,
) -> Result<Vec<ParamPlan>> {
    let out = layer.out_shape(input)?;
    Ok(match layer {
        LayerSpec::Dense { inputs, outputs } => vec![
            ParamPlan::weight(vec![*inputs, *outputs], *inputs),
            ParamPlan::plain(ParamKind::Bias, vec![*outputs]),
        ],
        LayerSpec::Conv3x3 {
            in_channels,
            out_channels,
            ..
        } => vec![
            ParamPlan::weight(
                vec![*out_channels, *in_channels, 3, 3],
                in_channels * 9,
            ),
            ParamPlan::plain(ParamKind::Bias, vec![*out_channels]),
        ],
        LayerSpec::ResidualBlock {
            in_channels,
            downsample,
        } => {
            let oc = match out {
                FeatureShape::Image { channels, .. } => channels,
                FeatureShape::Flat { .. } => unreachable!("residual blocks keep image features"),
            };
            let mut plans = vec![
                ParamPlan::weight(vec![oc, *in_channels, 3, 3], in_channels * 9),
                ParamPlan::plain(ParamKind::Bias, vec![oc]),
            ];
            plans.extend(bn_plans(oc));
            plans.push(ParamPlan::weight(vec![oc, oc, 3, 3], oc * 9));
            plans.push(ParamPlan::plain(ParamKind::Bias, vec![oc]));
            plans.extend(bn_plans(oc));
            if *downsample {
                plans.push(ParamPlan::weight(vec![oc, *in_channels, 1, 1], *in_channels));
                plans.push(ParamPlan::plain(ParamKind::Bias, vec![oc]));
            }
            plans
        }
        LayerSpec::BatchNorm => {
            let channels = match input {
                FeatureShape::Flat { features } => *features,
                FeatureShape::Image { channels, .. } => *channels,
            };
            bn_plans(channels).collect()
        }
        _ => Vec::new(),
    })
}

/// Parameter slots of a classifier head reading `features`.
pub(crate) fn classifier_param_plan(
    spec: &AuxClassifierSpec,
    features: &FeatureShape,
    classes: usize,
) -> Result<Vec<ParamPlan>> {
    if classes < 2 {
        return Err(Error::invalid(
            "classifier",
            format!("needs at least 2 classes, got {}", classes),
        ));
    }
    match spec {
        AuxClassifierSpec::Linear => {
            let f = match features {
                FeatureShape::Flat { features } => *features,
                FeatureShape::Image { channels, .. } => *channels,
            };
            Ok(vec![
                ParamPlan::weight(vec![f, classes], f),
                ParamPlan::plain(ParamKind::Bias, vec![classes]),
            ])
        }
        AuxClassifierSpec::ConvHead { hidden } => {
            if *hidden == 0 {
                return Err(Error::invalid(
                    "classifier",
                    "hidden width must be positive",
                ));
            }
            let c = match features {
                FeatureShape::Image { channels, .. } => *channels,
                other => {
                    return Err(Error::invalid(
                        "classifier",
                        format!("a conv head needs image features, found {}", other),
                    ))
                }
            };
            Ok(vec![
                ParamPlan::weight(vec![c, c, 3, 3], c * 9),
                ParamPlan::plain(ParamKind::Bias, vec![c]),
                ParamPlan::weight(vec![c, *hidden], c),
                ParamPlan::plain(ParamKind::Bias, vec![*hidden]),
                ParamPlan::weight(vec![*hidden, classes], *hidden),
                ParamPlan::plain(ParamKind::Bias, vec![classes]),
            ])
        }
    }
}

/// Fill slots for one owner. Weights are scaled-normal draws (std
/// `sqrt(2 / fan_in)`) taken in f64 so every precision sees the same
/// values; biases and shift terms start at zero, scale terms at one.
fn init_owner<T: Real>(
    store: &mut ParamStore<T>,
    owner: Owner,
    plans: &[ParamPlan],
    seed: u64,
) -> Result<()> {
    let (domain, index) = match owner {
        Owner::Unit(u) => ("init.unit", u as u64),
        Owner::Classifier(m) => ("init.classifier", m as u64),
    };
    let mut rng = substream(seed, domain, &[index]);
    for (slot, plan) in plans.iter().enumerate() {
        let key = match owner {
            Owner::Unit(u) => ParamKey::unit(u, slot),
            Owner::Classifier(m) => ParamKey::classifier(m, slot),
        };
        let numel: usize = plan.shape.iter().product();
        let value = match plan.kind {
            ParamKind::Weight => {
                let fan_in = plan.fan_in.expect("weight slots carry a fan-in");
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                let data: Vec<T> = (0..numel)
                    .map(|_| T::from_f64(rng.sample(dist)))
                    .collect();
                Tensor::new(plan.shape.clone(), data)?
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => {
                Tensor::filled(plan.shape.clone(), T::one())
            }
            _ => Tensor::zeros(plan.shape.clone()),
        };
        store.insert(key, plan.kind, value);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Network with parameters
// ---------------------------------------------------------------------------

/// Forward pass flavor: training uses batch statistics and active dropout,
/// evaluation uses running statistics and no dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies the dropout noise of one optimization step so that
/// independent replays (sequential or pipelined) draw identical masks.
#[derive(Clone, Copy, Debug)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
}

/// Dropout stream for one unit at one step.
pub fn unit_noise(seed: u64, step: u64, unit: usize) -> ChaCha8Rng {
    substream(seed, "dropout", &[step, unit as u64])
}

/// Deferred running-statistics update produced by a training forward.
pub struct BnUpdate<T> {
    pub mean_key: ParamKey,
    pub var_key: ParamKey,
    pub stats: BnBatchStats<T>,
}

/// Result of recording one unit.
pub struct UnitRecording<T> {
    pub output: ValueId,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Result of recording a contiguous range of units.
pub struct StackRecording<T> {
    /// Output value of each recorded unit, in order.
    pub unit_outputs: Vec<ValueId>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T> StackRecording<T> {
    pub fn output(&self) -> ValueId {
        *self
            .unit_outputs
            .last()
            .expect("a recorded stack holds at least one unit")
    }
}

/// A validated backbone with its parameter store.
#[derive(Clone)]
pub struct Network<T: Real> {
    spec: NetworkSpec,
    units: Vec<Range<usize>>,
    shapes: Vec<FeatureShape>,
    /// Owning unit per layer.
    layer_unit: Vec<usize>,
    /// First parameter slot per layer within its unit.
    layer_slot: Vec<usize>,
    pub params: ParamStore<T>,
}

impl<T: Real> Network<T> {
    /// Validate `spec` and initialize backbone parameters from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let units = spec.unit_ranges()?;
        let mut layer_unit = vec![0; spec.layers.len()];
        let mut layer_slot = vec![0; spec.layers.len()];
        let mut params = ParamStore::new();
        for (u, range) in units.iter().enumerate() {
            let mut plans = Vec::new();
            for li in range.clone() {
                layer_unit[li] = u;
                layer_slot[li] = plans.len();
                plans.extend(layer_param_plan(&spec.layers[li], &shapes[li])?);
            }
            init_owner(&mut params, Owner::Unit(u), &plans, seed)?;
        }
        Ok(Network {
            spec,
            units,
            shapes,
            layer_unit,
            layer_slot,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[Range<usize>] {
        &self.units
    }

    /// Feature shape at every layer boundary.
    pub fn layer_shapes(&self) -> &[FeatureShape] {
        &self.shapes
    }

    pub fn unit_input_shape(&self, unit: usize) -> FeatureShape {
        self.shapes[self.units[unit].start]
    }

    pub fn unit_output_shape(&self, unit: usize) -> FeatureShape {
        self.shapes[self.units[unit].end]
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> FeatureShape {
        *self.shapes.last().expect("boundary shapes are never empty")
    }

    /// Create and initialize the parameters of module `module`'s
    /// classifier head reading `features`.
    pub fn init_classifier(
        &mut self,
        module: usize,
        spec: &AuxClassifierSpec,
        features: &FeatureShape,
        classes: usize,
        seed: u64,
    ) -> Result<()> {
        let plans = classifier_param_plan(spec, features, classes)?;
        init_owner(&mut self.params, Owner::Classifier(module), &plans, seed)
    }

    /// Record units `units` starting from the tape value `x`.
    pub fn record_stack(
        &self,
        tape: &mut Tape<T>,
        units: Range<usize>,
        x: ValueId,
        mode: Mode,
        noise: Option<NoiseKey>,
    ) -> Result<StackRecording<T>> {
        if units.start >= units.end || units.end > self.units.len() {
            return Err(Error::invalid(
                "forward",
                format!(
                    "unit range {}..{} is empty or out of bounds for {} units",
                    units.start,
                    units.end,
                    self.units.len()
                ),
            ));
        }
        self.check_features(tape.value(x).shape(), &self.unit_input_shape(units.start))?;
        let mut unit_outputs = Vec::with_capacity(units.len());
        let mut bn_updates = Vec::new();
        let mut cur = x;
        for u in units {
            let rec = self.record_unit(tape, u, cur, mode, noise)?;
            cur = rec.output;
            unit_outputs.push(rec.output);
            bn_updates.extend(rec.bn_updates);
        }
        Ok(StackRecording {
            unit_outputs,
            bn_updates,
        })
    }

    /// Record a single unit starting from the tape value `x`.
    pub fn record_unit(
        &self,
        tape: &mut Tape<T>,
        unit: usize,
        x: ValueId,
        mode: Mode,
        noise: Option<NoiseKey>,
    ) -> Result<UnitRecording<T>> {
        if unit >= self.units.len() {
            return Err(Error::invalid(
                "forward",
                format!("unit {} out of bounds for {} units", unit, self.units.len()),
            ));
        }
        let mut rng = None;
        let mut bn_updates = Vec::new();
        let mut cur = x;
        for li in self.units[unit].clone() {
            cur = self.record_layer(tape, li, cur, mode, noise, &mut rng, &mut bn_updates)?;
        }
        Ok(UnitRecording {
            output: cur,
            bn_updates,
        })
    }

    /// Record module `module`'s classifier head on features `x`, returning
    /// the logits value.
    pub fn record_classifier(
        &self,
        tape: &mut Tape<T>,
        module: usize,
        spec: &AuxClassifierSpec,
        x: ValueId,
    ) -> Result<ValueId> {
        let key = |slot: usize| ParamKey::classifier(module, slot);
        let rank = tape.value(x).shape().len();
        match spec {
            AuxClassifierSpec::Linear => {
                let feats = match rank {
                    2 => x,
                    4 => tape.avgpool_global(x)?,
                    other => {
                        return Err(Error::invalid(
                            "classifier",
                            format!("expects rank-2 or rank-4 features, got rank {}", other),
                        ))
                    }
                };
                self.record_dense(tape, feats, key(0), key(1))
            }
            AuxClassifierSpec::ConvHead { .. } => {
                if rank != 4 {
                    return Err(Error::invalid(
                        "classifier",
                        format!("a conv head needs rank-4 image features, got rank {}", rank),
                    ));
                }
                let cw = tape.param(key(0), self.params.value(key(0))?.clone());
                let cb = tape.param(key(1), self.params.value(key(1))?.clone());
                let h = tape.conv2d(x, cw, Some(cb), 1, 1)?;
                let h = tape.relu(h)?;
                let h = tape.avgpool_global(h)?;
                let h = self.record_dense(tape, h, key(2), key(3))?;
                let h = tape.relu(h)?;
                self.record_dense(tape, h, key(4), key(5))
            }
        }
    }

    /// Apply deferred running-statistics updates from a training forward.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        for u in updates {
            let mut rm = self.params.value(u.mean_key)?.clone();
            let mut rv = self.params.value(u.var_key)?.clone();
            bn_update_running(&mut rm, &mut rv, &u.stats, BN_MOMENTUM)?;
            self.params.set_value(u.mean_key, rm)?;
            self.params.set_value(u.var_key, rv)?;
        }
        Ok(())
    }

    fn check_features(&self, got: &[usize], expected: &FeatureShape) -> Result<()> {
        let ok = match expected {
            FeatureShape::Flat { features } => got.len() == 2 && got[1] == *features,
            FeatureShape::Image {
                channels,
                height,
                width,
            } => got.len() == 4 && got[1..] == [*channels, *height, *width],
        };
        if !ok || got[0] == 0 {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expected a batch of {} features, got tensor shape {:?}",
                    expected, got
                ),
            ));
        }
        Ok(())
    }

    fn record_dense(
        &self,
        tape: &mut Tape<T>,
        x: ValueId,
        wkey: ParamKey,
        bkey: ParamKey,
    ) -> Result<ValueId> {
        let w = tape.param(wkey, self.params.value(wkey)?.clone());
        let b = tape.param(bkey, self.params.value(bkey)?.clone());
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn record_bn(
        &self,
        tape: &mut Tape<T>,
        x: ValueId,
        gamma_key: ParamKey,
        beta_key: ParamKey,
        mean_key: ParamKey,
        var_key: ParamKey,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<ValueId> {
        let g = tape.param(gamma_key, self.params.value(gamma_key)?.clone());
        let b = tape.param(beta_key, self.params.value(beta_key)?.clone());
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, BN_EPS)?;
                updates.push(BnUpdate {
                    mean_key,
                    var_key,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                g,
                b,
                self.params.value(mean_key)?,
                self.params.value(var_key)?,
                BN_EPS,
            ),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record_layer(
        &self,
        tape: &mut Tape<T>,
        layer_index: usize,
        x: ValueId,
        mode: Mode,
        noise: Option<NoiseKey>,
        rng: &mut Option<ChaCha8Rng>,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<ValueId> {
        let unit = self.layer_unit[layer_index];
        let base = self.layer_slot[layer_index];
        let key = |slot: usize| ParamKey::unit(unit, base + slot);
        match &self.spec.layers[layer_index] {
            LayerSpec::Dense { .. } => self.record_dense(tape, x, key(0), key(1)),
            LayerSpec::Conv3x3 { stride, .. } => {
                let w = tape.param(key(0), self.params.value(key(0))?.clone());
                let b = tape.param(key(1), self.params.value(key(1))?.clone());
                tape.conv2d(x, w, Some(b), *stride, 1)
            }
            LayerSpec::ResidualBlock { downsample, .. } => {
                let stride = if *downsample { 2 } else { 1 };
                let c1w = tape.param(key(0), self.params.value(key(0))?.clone());
                let c1b = tape.param(key(1), self.params.value(key(1))?.clone());
                let mut h = tape.conv2d(x, c1w, Some(c1b), stride, 1)?;
                h = self.record_bn(tape, h, key(2), key(3), key(4), key(5), mode, updates)?;
                h = tape.relu(h)?;
                let c2w = tape.param(key(6), self.params.value(key(6))?.clone());
                let c2b = tape.param(key(7), self.params.value(key(7))?.clone());
                h = tape.conv2d(h, c2w, Some(c2b), 1, 1)?;
                h = self.record_bn(tape, h, key(8), key(9), key(10), key(11), mode, updates)?;
                let shortcut = if *downsample {
                    let sw = tape.param(key(12), self.params.value(key(12))?.clone());
                    let sb = tape.param(key(13), self.params.value(key(13))?.clone());
                    tape.conv2d(x, sw, Some(sb), 2, 0)?
                } else {
                    x
                };
                let sum = tape.add(h, shortcut)?;
                tape.relu(sum)
            }
            LayerSpec::BatchNorm => {
                self.record_bn(tape, x, key(0), key(1), key(2), key(3), mode, updates)
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::MaxPool2x2 => tape.maxpool2x2(x),
            LayerSpec::AvgPoolGlobal => tape.avgpool_global(x),
            LayerSpec::Flatten => tape.flatten(x),
            LayerSpec::Dropout { p } => match mode {
                Mode::Eval => Ok(x),
                Mode::Train => {
                    let r = match rng {
                        Some(r) => r,
                        None => {
                            let nk = noise.ok_or_else(|| {
                                Error::invalid(
                                    "dropout",
                                    "a training forward with dropout needs a noise key",
                                )
                            })?;
                            rng.insert(unit_noise(nk.seed, nk.step, unit))
                        }
                    };
                    tape.dropout(x, *p, r)
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;

    fn image(channels: usize, height: usize, width: usize) -> FeatureShape {
        FeatureShape::Image {
            channels,
            height,
            width,
        }
    }

    fn flat(features: usize) -> FeatureShape {
        FeatureShape::Flat { features }
    }

    fn conv(ic: usize, oc: usize, stride: usize) -> LayerSpec {
        LayerSpec::Conv3x3 {
            in_channels: ic,
            out_channels: oc,
            stride,
        }
    }

    #[test]
    fn unit_grouping_assigns_leading_attachments_to_first_unit() {
        let layers = vec![
            LayerSpec::Relu,
            conv(2, 2, 1),
            LayerSpec::BatchNorm,
            conv(2, 2, 1),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 32,
                outputs: 5,
            },
        ];
        let units = unit_ranges(&layers).unwrap();
        assert_eq!(units, vec![0..3, 3..6, 6..7]);
    }

    #[test]
    fn network_without_weighted_layers_is_rejected() {
        let err = unit_ranges(&[LayerSpec::Relu, LayerSpec::Flatten]).unwrap_err();
        assert!(err.to_string().contains("weighted"));
    }

    #[test]
    fn shape_inference_tracks_conv_pool_and_flatten() {
        let spec = NetworkSpec {
            input: image(3, 8, 8),
            layers: vec![
                conv(3, 4, 1),
                LayerSpec::MaxPool2x2,
                conv(4, 6, 2),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 24,
                    outputs: 10,
                },
            ],
        };
        let shapes = spec.shapes().unwrap();
        assert_eq!(
            shapes,
            vec![
                image(3, 8, 8),
                image(4, 8, 8),
                image(4, 4, 4),
                image(6, 2, 2),
                flat(24),
                flat(10),
            ]
        );
    }

    #[test]
    fn dense_on_image_features_is_rejected_with_layer_context() {
        let spec = NetworkSpec {
            input: image(3, 4, 4),
            layers: vec![LayerSpec::Dense {
                inputs: 48,
                outputs: 10,
            }],
        };
        let err = spec.shapes().unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{}", err);
        assert!(err.contains("dense"), "{}", err);
    }

    #[test]
    fn residual_block_shapes_and_slot_counts() {
        let plain = LayerSpec::ResidualBlock {
            in_channels: 4,
            downsample: false,
        };
        let down = LayerSpec::ResidualBlock {
            in_channels: 4,
            downsample: true,
        };
        assert_eq!(plain.out_shape(&image(4, 8, 8)).unwrap(), image(4, 8, 8));
        assert_eq!(down.out_shape(&image(4, 8, 8)).unwrap(), image(8, 4, 4));
        assert_eq!(layer_param_plan(&plain, &image(4, 8, 8)).unwrap().len(), 12);
        assert_eq!(layer_param_plan(&down, &image(4, 8, 8)).unwrap().len(), 14);
    }

    #[test]
    fn maxpool_floors_odd_extents_and_rejects_tiny_inputs() {
        assert_eq!(
            LayerSpec::MaxPool2x2.out_shape(&image(1, 5, 5)).unwrap(),
            image(1, 2, 2)
        );
        assert!(LayerSpec::MaxPool2x2.out_shape(&image(1, 1, 4)).is_err());
    }

    #[test]
    fn initialization_is_deterministic_and_precision_agnostic() {
        let spec = NetworkSpec {
            input: image(2, 4, 4),
            layers: vec![
                conv(2, 3, 1),
                LayerSpec::Relu,
                LayerSpec::ResidualBlock {
                    in_channels: 3,
                    downsample: true,
                },
                LayerSpec::AvgPoolGlobal,
                LayerSpec::Dense {
                    inputs: 6,
                    outputs: 4,
                },
            ],
        };
        let a = Network::<f64>::new(spec.clone(), 7).unwrap();
        let b = Network::<f64>::new(spec.clone(), 7).unwrap();
        let c = Network::<f64>::new(spec.clone(), 8).unwrap();
        let single = Network::<f32>::new(spec, 7).unwrap();
        let mut any_differs = false;
        for (key, entry) in a.params.iter() {
            let bv = b.params.value(*key).unwrap();
            assert_eq!(entry.value.data(), bv.data(), "{}", key);
            let cv = c.params.value(*key).unwrap();
            if entry.value.data() != cv.data() {
                any_differs = true;
            }
            let sv = single.params.value(*key).unwrap();
            let narrowed: Vec<f32> = entry.value.data().iter().map(|&v| v as f32).collect();
            assert_eq!(sv.data(), narrowed.as_slice(), "{}", key);
        }
        assert!(any_differs, "different seeds must draw different weights");
    }

    #[test]
    fn weight_draws_follow_the_fan_in_scale() {
        let spec = NetworkSpec {
            input: flat(200),
            layers: vec![LayerSpec::Dense {
                inputs: 200,
                outputs: 50,
            }],
        };
        let net = Network::<f64>::new(spec, 11).unwrap();
        let w = net.params.value(ParamKey::unit(0, 0)).unwrap();
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = (2.0 / 200.0_f64).sqrt();
        assert!(mean.abs() < 0.005, "mean {}", mean);
        assert!((var.sqrt() - target).abs() < 0.05 * target, "std {}", var.sqrt());
        let b = net.params.value(ParamKey::unit(0, 1)).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_conv_residual_reduces_to_relu_of_input() {
        let spec = NetworkSpec {
            input: image(2, 4, 4),
            layers: vec![LayerSpec::ResidualBlock {
                in_channels: 2,
                downsample: false,
            }],
        };
        let mut net = Network::<f64>::new(spec, 3).unwrap();
        for slot in [0, 6] {
            let key = ParamKey::unit(0, slot);
            let zero = Tensor::zeros(net.params.value(key).unwrap().shape().to_vec());
            net.params.set_value(key, zero).unwrap();
        }
        let x = Tensor::from_fn(vec![2, 2, 4, 4], |i| ((i * 37 % 19) as f64 - 9.0) * 0.3);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let rec = net
            .record_stack(&mut tape, 0..1, xid, Mode::Train, None)
            .unwrap();
        let expect = x.map(|v| v.max(0.0));
        assert_eq!(max_abs_diff(tape.value(rec.output()), &expect), 0.0);
        assert_eq!(rec.bn_updates.len(), 2);
    }

    #[test]
    fn eval_batch_norm_uses_running_buffers_even_for_single_rows() {
        let spec = NetworkSpec {
            input: flat(3),
            layers: vec![
                LayerSpec::Dense {
                    inputs: 3,
                    outputs: 3,
                },
                LayerSpec::BatchNorm,
            ],
        };
        let mut net = Network::<f64>::new(spec, 5).unwrap();
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        net.params.set_value(ParamKey::unit(0, 0), eye).unwrap();
        let gamma = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let beta = Tensor::vector(vec![0.5, 0.0, -1.0]);
        let rm = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let rv = Tensor::vector(vec![4.0, 9.0, 16.0]);
        net.params.set_value(ParamKey::unit(0, 2), gamma.clone()).unwrap();
        net.params.set_value(ParamKey::unit(0, 3), beta.clone()).unwrap();
        net.params.set_value(ParamKey::unit(0, 4), rm.clone()).unwrap();
        net.params.set_value(ParamKey::unit(0, 5), rv.clone()).unwrap();

        let x = Tensor::new(vec![1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let rec = net
            .record_stack(&mut tape, 0..1, xid, Mode::Eval, None)
            .unwrap();
        let got = tape.value(rec.output());
        for i in 0..3 {
            let istd = 1.0 / (rv.data()[i] + BN_EPS).sqrt();
            let want = gamma.data()[i] * ((x.data()[i] - rm.data()[i]) * istd) + beta.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
        assert!(rec.bn_updates.is_empty());

        // Training statistics need more than one row.
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        assert!(net
            .record_stack(&mut tape, 0..1, xid, Mode::Train, None)
            .is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scales_kept_values_in_train() {
        let spec = NetworkSpec {
            input: flat(4),
            layers: vec![
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 4,
                },
                LayerSpec::Dropout { p: 0.5 },
            ],
        };
        let mut net = Network::<f64>::new(spec, 1).unwrap();
        let eye = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        net.params.set_value(ParamKey::unit(0, 0), eye).unwrap();
        let x = Tensor::filled(vec![8, 4], 1.0);

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let rec = net
            .record_stack(&mut tape, 0..1, xid, Mode::Eval, None)
            .unwrap();
        assert_eq!(max_abs_diff(tape.value(rec.output()), &x), 0.0);

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let noise = NoiseKey { seed: 3, step: 0 };
        let rec = net
            .record_stack(&mut tape, 0..1, xid, Mode::Train, Some(noise))
            .unwrap();
        let y = tape.value(rec.output());
        let mut kept = 0;
        let mut dropped = 0;
        for &v in y.data() {
            if v == 0.0 {
                dropped += 1;
            } else {
                assert!((v - 2.0).abs() < 1e-12, "kept values are scaled by 1/(1-p)");
                kept += 1;
            }
        }
        assert!(kept > 0 && dropped > 0);

        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        assert!(net
            .record_stack(&mut tape, 0..1, xid, Mode::Train, None)
            .is_err());
    }

    #[test]
    fn classifier_heads_produce_logit_rows() {
        let spec = NetworkSpec {
            input: image(3, 4, 4),
            layers: vec![conv(3, 3, 1)],
        };
        let mut net = Network::<f64>::new(spec, 9).unwrap();
        net.init_classifier(0, &AuxClassifierSpec::Linear, &image(3, 4, 4), 7, 9)
            .unwrap();
        net.init_classifier(
            1,
            &AuxClassifierSpec::ConvHead { hidden: 5 },
            &image(3, 4, 4),
            7,
            9,
        )
        .unwrap();

        let x = Tensor::from_fn(vec![2, 3, 4, 4], |i| (i as f64 * 0.11).sin());
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let lin = net
            .record_classifier(&mut tape, 0, &AuxClassifierSpec::Linear, xid)
            .unwrap();
        assert_eq!(tape.value(lin).shape(), &[2, 7]);
        let head = net
            .record_classifier(&mut tape, 1, &AuxClassifierSpec::ConvHead { hidden: 5 }, xid)
            .unwrap();
        assert_eq!(tape.value(head).shape(), &[2, 7]);

        // Conv heads need image features.
        let err = net.init_classifier(2, &AuxClassifierSpec::ConvHead { hidden: 5 }, &flat(12), 7, 9);
        assert!(err.is_err());
        // Linear heads work directly on flat features.
        net.init_classifier(3, &AuxClassifierSpec::Linear, &flat(48), 7, 9)
            .unwrap();
        let flat_x = Tensor::from_fn(vec![2, 48], |i| (i as f64 * 0.07).cos());
        let fid = tape.leaf(flat_x);
        let lin2 = net
            .record_classifier(&mut tape, 3, &AuxClassifierSpec::Linear, fid)
            .unwrap();
        assert_eq!(tape.value(lin2).shape(), &[2, 7]);
    }

    #[test]
    fn layer_specs_round_trip_through_json() {
        let layers = vec![
            LayerSpec::Dense {
                inputs: 8,
                outputs: 4,
            },
            conv(3, 6, 2),
            LayerSpec::ResidualBlock {
                in_channels: 6,
                downsample: true,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::AvgPoolGlobal,
            LayerSpec::Flatten,
            LayerSpec::Dropout { p: 0.25 },
        ];
        let json = serde_json::to_string(&layers).unwrap();
        let back: Vec<LayerSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(layers, back);
        let tag = serde_json::to_value(&layers[1]).unwrap();
        assert_eq!(tag["kind"], "conv3x3");
        let cls = serde_json::to_value(AuxClassifierSpec::ConvHead { hidden: 128 }).unwrap();
        assert_eq!(cls["kind"], "conv_head");
    }

    #[test]
    fn record_stack_reports_unit_boundaries_and_updates() {
        let spec = NetworkSpec {
            input: image(1, 4, 4),
            layers: vec![conv(1, 2, 1), LayerSpec::BatchNorm, LayerSpec::Relu, conv(2, 3, 2)],
        };
        let net = Network::<f64>::new(spec, 2).unwrap();
        assert_eq!(net.unit_count(), 2);
        let x = Tensor::from_fn(vec![2, 1, 4, 4], |i| i as f64 * 0.1);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let rec = net
            .record_stack(&mut tape, 0..2, xid, Mode::Train, None)
            .unwrap();
        assert_eq!(rec.unit_outputs.len(), 2);
        assert_eq!(tape.value(rec.unit_outputs[0]).shape(), &[2, 2, 4, 4]);
        assert_eq!(tape.value(rec.unit_outputs[1]).shape(), &[2, 3, 2, 2]);
        assert_eq!(rec.bn_updates.len(), 1);

        // The same stack in eval mode records no statistics updates.
        let mut tape = Tape::new();
        let x2 = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64 * 0.1);
        let xid = tape.leaf(x2);
        let rec = net
            .record_stack(&mut tape, 0..2, xid, Mode::Eval, None)
            .unwrap();
        assert_eq!(rec.bn_updates.len(), 0);

        // A wrong input shape is rejected up front.
        let mut tape = Tape::new();
        let bad = tape.leaf(Tensor::<f64>::zeros(vec![2, 3, 4, 4]));
        assert!(net.record_stack(&mut tape, 0..2, bad, Mode::Eval, None).is_err());
    }
}
