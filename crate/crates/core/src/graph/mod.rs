//! Declarative description of a multi-state recurrent system.
//!
//! A [`GraphSpec`] lists states (fixed-size feature maps) and time-windowed
//! transitions between them; a [`SharingSpec`] says which unrolled weight
//! instances are tied; an [`IoSchedule`] says when the pre-net output is
//! injected and when the post-net reads out.

mod presets;
mod time;
mod validate;

pub use presets::{preset, PresetOptions, PRESET_NAMES};
pub use time::TimeSet;
pub use validate::{populated_states, validate};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One vertex of the state graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub name: String,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "c")]
    pub channels: usize,
}

impl StateSpec {
    pub fn new(name: impl Into<String>, height: usize, width: usize, channels: usize) -> Self {
        StateSpec {
            name: name.into(),
            height,
            width,
            channels,
        }
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// The operator applied along a transition.
///
/// `BRCxN` is N repetitions of BN-ReLU-Conv; `BRDxN` the same with
/// transposed convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    Conv,
    BRCx2,
    BRCx3,
    Deconv,
    BRDx2,
    BRDx3,
    MaxPool2x2,
}

impl Pipeline {
    pub const ALL: [Pipeline; 7] = [
        Pipeline::Conv,
        Pipeline::BRCx2,
        Pipeline::BRCx3,
        Pipeline::Deconv,
        Pipeline::BRDx2,
        Pipeline::BRDx3,
        Pipeline::MaxPool2x2,
    ];

    /// Number of (de)convolution layers in the pipeline.
    pub fn depth(self) -> usize {
        match self {
            Pipeline::Conv | Pipeline::Deconv => 1,
            Pipeline::BRCx2 | Pipeline::BRDx2 => 2,
            Pipeline::BRCx3 | Pipeline::BRDx3 => 3,
            Pipeline::MaxPool2x2 => 0,
        }
    }

    fn pre_activated(self) -> bool {
        matches!(
            self,
            Pipeline::BRCx2 | Pipeline::BRCx3 | Pipeline::BRDx2 | Pipeline::BRDx3
        )
    }

    fn transposed(self) -> bool {
        matches!(self, Pipeline::Deconv | Pipeline::BRDx2 | Pipeline::BRDx3)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A transition function from one state to another, active at the time
/// steps in `window`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub from: String,
    pub to: String,
    pub pipeline: Pipeline,
    /// Adds the identity `+I` branch around the pipeline.
    #[serde(default)]
    pub shortcut: bool,
    #[serde(default)]
    pub window: TimeSet,
}

impl TransitionSpec {
    pub fn new(from: &str, to: &str, pipeline: Pipeline) -> Self {
        TransitionSpec {
            from: from.into(),
            to: to.into(),
            pipeline,
            shortcut: false,
            window: TimeSet::All,
        }
    }

    pub fn with_shortcut(mut self) -> Self {
        self.shortcut = true;
        self
    }

    pub fn active(mut self, window: TimeSet) -> Self {
        self.window = window;
        self
    }

    pub fn label(&self) -> String {
        format!("{}->{}", self.from, self.to)
    }
}

/// Shape of the raw network input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    #[serde(rename = "c")]
    pub channels: usize,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            channels: 3,
            height: 32,
            width: 32,
        }
    }
}

/// Feedforward preprocessor feeding the first state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreNet {
    /// A single 3×3 convolution.
    #[default]
    Simple,
    /// Conv-BN-ReLU-Conv-BN-ReLU-Conv, all 3×3.
    Deep,
}

/// Post-processor: BN (with learnable scale/shift), ReLU, global average
/// pooling and a fully-connected classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostNet {
    pub classes: usize,
}

impl Default for PostNet {
    fn default() -> Self {
        PostNet { classes: 10 }
    }
}

/// The directed (possibly cyclic) multi-state graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub input: InputSpec,
    pub prenet: PreNet,
    pub postnet: PostNet,
    pub states: Vec<StateSpec>,
    pub transitions: Vec<TransitionSpec>,
    pub readout_state: String,
}

impl GraphSpec {
    pub fn state(&self, name: &str) -> Option<&StateSpec> {
        self.states.iter().find(|s| s.name == name)
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }

    /// The state receiving pre-net output.
    pub fn first_state(&self) -> Option<&StateSpec> {
        self.states.first()
    }

    /// Resolve the layer sequence of `transition`.
    pub fn layers(&self, transition: &TransitionSpec) -> Result<Vec<LayerPlan>> {
        let from = self
            .state(&transition.from)
            .ok_or_else(|| Error::Config(format!("unknown state `{}`", transition.from)))?;
        let to = self
            .state(&transition.to)
            .ok_or_else(|| Error::Config(format!("unknown state `{}`", transition.to)))?;
        plan_layers(transition.pipeline, from, to).map_err(|m| {
            Error::Config(format!("transition {} ({}): {m}", transition.label(), transition.pipeline))
        })
    }
}

/// Rounded mean of two feature counts, rounding halves down.
pub fn intermediate_feature_size(from_channels: usize, to_channels: usize) -> usize {
    (from_channels + to_channels) / 2
}

/// One concrete layer of a resolved pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerPlan {
    BatchNorm { channels: usize },
    Relu,
    /// 3×3 convolution, padding 1.
    Conv { cin: usize, cout: usize, stride: usize },
    /// 3×3 transposed convolution, padding 1, output padding `stride - 1`.
    Deconv { cin: usize, cout: usize, stride: usize },
    MaxPool,
}

impl LayerPlan {
    /// Weight tensor shape for parameterized layers.
    pub fn weight_shape(&self) -> Option<[usize; 4]> {
        match *self {
            LayerPlan::Conv { cin, cout, .. } => Some([cout, cin, 3, 3]),
            LayerPlan::Deconv { cin, cout, .. } => Some([cin, cout, 3, 3]),
            _ => None,
        }
    }
}

/// Number of halvings (positive) or doublings (negative) between sizes.
fn scale_steps(from: usize, to: usize) -> Option<i32> {
    if from == to {
        return Some(0);
    }
    let (big, small, sign) = if from > to { (from, to, 1) } else { (to, from, -1) };
    if big % small != 0 || !(big / small).is_power_of_two() {
        return None;
    }
    Some(sign * (big / small).trailing_zeros() as i32)
}

fn plan_layers(pipeline: Pipeline, from: &StateSpec, to: &StateSpec) -> Result<Vec<LayerPlan>, String> {
    let sh = scale_steps(from.height, to.height);
    let sw = scale_steps(from.width, to.width);
    let steps = match (sh, sw) {
        (Some(a), Some(b)) if a == b => a,
        _ => {
            return Err(format!(
                "cannot map {}x{} onto {}x{} by factors of 2",
                from.height, from.width, to.height, to.width
            ))
        }
    };
    let depth = pipeline.depth();
    if pipeline == Pipeline::MaxPool2x2 {
        if steps != 1 {
            return Err("2x2 max pooling must halve the spatial size exactly".into());
        }
        if from.channels != to.channels {
            return Err(format!(
                "max pooling keeps {} channels but target has {}",
                from.channels, to.channels
            ));
        }
        return Ok(vec![LayerPlan::MaxPool]);
    }
    if pipeline.transposed() && steps > 0 {
        return Err("transposed convolutions cannot downsample".into());
    }
    if !pipeline.transposed() && steps < 0 {
        return Err("convolutions cannot upsample".into());
    }
    if steps.unsigned_abs() as usize > depth {
        return Err(format!(
            "scale factor {} needs more than {depth} stride-2 layer(s)",
            1usize << steps.unsigned_abs()
        ));
    }
    let mid = intermediate_feature_size(from.channels, to.channels);
    let mut layers = Vec::new();
    for i in 0..depth {
        let cin = if i == 0 { from.channels } else { mid };
        let cout = if i + 1 == depth { to.channels } else { mid };
        let stride = if i < steps.unsigned_abs() as usize { 2 } else { 1 };
        if pipeline.pre_activated() {
            layers.push(LayerPlan::BatchNorm { channels: cin });
            layers.push(LayerPlan::Relu);
        }
        layers.push(if pipeline.transposed() {
            LayerPlan::Deconv { cin, cout, stride }
        } else {
            LayerPlan::Conv { cin, cout, stride }
        });
    }
    Ok(layers)
}

/// Identifies one unrolled weight instance: the `layer`-th (de)convolution
/// of the transition `from -> to` at time `t`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightKey {
    pub from: String,
    pub to: String,
    pub t: usize,
    #[serde(default)]
    pub layer: usize,
}

impl WeightKey {
    pub fn new(from: &str, to: &str, t: usize, layer: usize) -> Self {
        WeightKey {
            from: from.into(),
            to: to.into(),
            t,
            layer,
        }
    }
}

/// Partition of transition weight instances into tied groups.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SharingSpec {
    /// One group per (from, to, layer) spanning every active t.
    #[default]
    TimeShared,
    /// Every (from, to, t, layer) instance has its own weights.
    TimeUnshared,
    /// A single group holds every transition (de)convolution.
    AllShared,
    /// Listed groups are tied; unlisted instances are singletons.
    Explicit { groups: Vec<BTreeSet<WeightKey>> },
}

impl SharingSpec {
    /// Canonical parameter-group id of a weight instance.
    pub fn group_id(&self, key: &WeightKey) -> String {
        let base = format!("{}->{}/L{}", key.from, key.to, key.layer);
        match self {
            SharingSpec::TimeShared => base,
            SharingSpec::TimeUnshared => format!("{base}@t{}", key.t),
            SharingSpec::AllShared => "shared/conv".to_string(),
            SharingSpec::Explicit { groups } => groups
                .iter()
                .position(|g| g.contains(key))
                .map(|i| format!("group{i}"))
                .unwrap_or_else(|| format!("{base}@t{}", key.t)),
        }
    }
}

/// When the pre-net output is injected into the first state, and when the
/// post-net reads the readout state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSchedule {
    pub input_times: TimeSet,
    pub readout_times: BTreeSet<usize>,
}

impl IoSchedule {
    /// Input as a Kronecker delta at t=0, one readout at `readout`.
    pub fn static_input(readout: usize) -> Self {
        IoSchedule {
            input_times: TimeSet::only([0]),
            readout_times: BTreeSet::from([readout]),
        }
    }

    /// Input re-injected at every step.
    pub fn constant_input(readout: usize) -> Self {
        IoSchedule {
            input_times: TimeSet::All,
            readout_times: BTreeSet::from([readout]),
        }
    }

    pub fn max_readout(&self) -> Option<usize> {
        self.readout_times.iter().next_back().copied()
    }

    /// Same input schedule, single readout at `t`.
    pub fn with_readout(&self, t: usize) -> Self {
        IoSchedule {
            input_times: self.input_times.clone(),
            readout_times: BTreeSet::from([t]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intermediate_sizes() {
        assert_eq!(intermediate_feature_size(64, 64), 64);
        assert_eq!(intermediate_feature_size(64, 128), 96);
        assert_eq!(intermediate_feature_size(16, 17), 16);
    }

    #[test]
    fn brc_down_puts_stride_on_first_conv() {
        let a = StateSpec::new("a", 32, 32, 64);
        let b = StateSpec::new("b", 16, 16, 128);
        let layers = plan_layers(Pipeline::BRCx2, &a, &b).unwrap();
        assert_eq!(
            layers,
            vec![
                LayerPlan::BatchNorm { channels: 64 },
                LayerPlan::Relu,
                LayerPlan::Conv { cin: 64, cout: 96, stride: 2 },
                LayerPlan::BatchNorm { channels: 96 },
                LayerPlan::Relu,
                LayerPlan::Conv { cin: 96, cout: 128, stride: 1 },
            ]
        );
    }

    #[test]
    fn scaling_rules() {
        let a = StateSpec::new("a", 32, 32, 8);
        let b = StateSpec::new("b", 8, 8, 8);
        assert!(plan_layers(Pipeline::Conv, &a, &b).is_err());
        assert_eq!(plan_layers(Pipeline::BRCx2, &a, &b).unwrap()[2], LayerPlan::Conv { cin: 8, cout: 8, stride: 2 });
        assert!(plan_layers(Pipeline::BRDx2, &a, &b).is_err());
        assert!(plan_layers(Pipeline::BRDx2, &b, &a).is_ok());
        assert!(plan_layers(Pipeline::MaxPool2x2, &a, &b).is_err());
        let odd = StateSpec::new("c", 12, 12, 8);
        assert!(plan_layers(Pipeline::BRCx3, &a, &odd).is_err());
    }

    #[test]
    fn group_ids_follow_sharing_mode() {
        let k = WeightKey::new("h1", "h2", 3, 1);
        assert_eq!(SharingSpec::TimeShared.group_id(&k), "h1->h2/L1");
        assert_eq!(SharingSpec::TimeUnshared.group_id(&k), "h1->h2/L1@t3");
        assert_eq!(SharingSpec::AllShared.group_id(&k), "shared/conv");
        let ex = SharingSpec::Explicit {
            groups: vec![BTreeSet::from([WeightKey::new("x", "y", 1, 0)]), BTreeSet::from([k.clone()])],
        };
        assert_eq!(ex.group_id(&k), "group1");
        assert_eq!(ex.group_id(&WeightKey::new("x", "y", 2, 0)), "x->y/L0@t2");
    }
}
