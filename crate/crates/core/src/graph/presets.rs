use super::{
    validate, GraphSpec, InputSpec, IoSchedule, Pipeline, PostNet, PreNet, SharingSpec, StateSpec,
    TimeSet, TransitionSpec,
};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 8] = [
    "resnet_1state",
    "resnet_3state",
    "fullrec_2state",
    "fullrec_3state",
    "adjacent_3state",
    "adjacent_4state",
    "allshared_3state",
    "inhomogeneous_3state",
];

/// Knobs shared by all presets. `None` keeps the preset's own default.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PresetOptions {
    pub readout: Option<usize>,
    /// Feature count of the first state; the others scale proportionally.
    pub base_channels: Option<usize>,
    /// Independent weights at every t instead of sharing across time.
    pub time_unshared: bool,
    pub deep_prenet: Option<bool>,
    /// Drop self-transitions (multi-state presets only).
    pub no_self_transitions: bool,
    /// Residual blocks per stage for the ladder ResNet presets.
    pub blocks_per_stage: Option<usize>,
}

struct Ladder {
    /// (height/width, default channels) per state.
    sizes: Vec<(usize, usize)>,
}

impl Ladder {
    fn states(&self, base: Option<usize>) -> Vec<StateSpec> {
        let default_base = self.sizes[0].1;
        self.sizes
            .iter()
            .enumerate()
            .map(|(i, &(hw, c))| {
                let c = base.map_or(c, |b| (c * b / default_base).max(1));
                StateSpec::new(format!("h{}", i + 1), hw, hw, c)
            })
            .collect()
    }
}

fn state_name(i: usize) -> String {
    format!("h{}", i + 1)
}

/// Every (i, j) transition allowed by `connect`: self loops are BRCx2 with
/// an identity shortcut, downward edges BRCx2, upward edges BRDx2.
fn recurrent_transitions(
    n: usize,
    include_self: bool,
    connect: impl Fn(usize, usize) -> bool,
) -> Vec<TransitionSpec> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if !connect(i, j) {
                continue;
            }
            let (a, b) = (state_name(i), state_name(j));
            let tr = if i == j {
                if !include_self {
                    continue;
                }
                TransitionSpec::new(&a, &b, Pipeline::BRCx2).with_shortcut()
            } else if i < j {
                TransitionSpec::new(&a, &b, Pipeline::BRCx2)
            } else {
                TransitionSpec::new(&a, &b, Pipeline::BRDx2)
            };
            out.push(tr);
        }
    }
    out
}

fn graph(states: Vec<StateSpec>, transitions: Vec<TransitionSpec>, prenet: PreNet) -> GraphSpec {
    let readout_state = states.last().expect("presets have states").name.clone();
    GraphSpec {
        input: InputSpec::default(),
        prenet,
        postnet: PostNet::default(),
        states,
        transitions,
        readout_state,
    }
}

/// Three-stage residual ladder: `n` self-transitions per stage, stage
/// changes at `n + 1` and `2n + 2`, readout `3n + 2` unless overridden.
fn ladder_resnet(
    states: Vec<StateSpec>,
    cross: Pipeline,
    n: usize,
    prenet: PreNet,
) -> (GraphSpec, usize) {
    let (s1, s2) = (n + 1, 2 * n + 2);
    let transitions = vec![
        TransitionSpec::new("h1", "h1", Pipeline::BRCx2)
            .with_shortcut()
            .active(TimeSet::range(1, n)),
        TransitionSpec::new("h1", "h2", cross).active(TimeSet::only([s1])),
        TransitionSpec::new("h2", "h2", Pipeline::BRCx2)
            .with_shortcut()
            .active(TimeSet::range(s1 + 1, s2 - 1)),
        TransitionSpec::new("h2", "h3", cross).active(TimeSet::only([s2])),
        TransitionSpec::new("h3", "h3", Pipeline::BRCx2)
            .with_shortcut()
            .active(TimeSet::From(s2 + 1)),
    ];
    (graph(states, transitions, prenet), 3 * n + 2)
}

/// Build one of the named reference architectures.
pub fn preset(name: &str, opts: &PresetOptions) -> Result<(GraphSpec, SharingSpec, IoSchedule)> {
    let time_sharing = if opts.time_unshared {
        SharingSpec::TimeUnshared
    } else {
        SharingSpec::TimeShared
    };
    let prenet = |deep_default: bool| {
        if opts.deep_prenet.unwrap_or(deep_default) {
            PreNet::Deep
        } else {
            PreNet::Simple
        }
    };
    let blocks = opts.blocks_per_stage.unwrap_or(3).max(1);
    let three = Ladder { sizes: vec![(32, 64), (16, 128), (8, 256)] };
    let with_self = !opts.no_self_transitions;

    let (g, sharing, input, readout) = match name {
        "resnet_1state" => {
            let states = Ladder { sizes: vec![(32, 64)] }.states(opts.base_channels);
            let tr = vec![TransitionSpec::new("h1", "h1", Pipeline::BRCx2).with_shortcut()];
            (graph(states, tr, prenet(false)), time_sharing, TimeSet::only([0]), 10)
        }
        "resnet_3state" => {
            let states = Ladder { sizes: vec![(32, 16), (16, 32), (8, 64)] }.states(opts.base_channels);
            let (g, readout) = ladder_resnet(states, Pipeline::Conv, blocks, prenet(false));
            (g, time_sharing, TimeSet::only([0]), readout)
        }
        "allshared_3state" => {
            let c = opts.base_channels.unwrap_or(32);
            let states = (0..3).map(|i| StateSpec::new(state_name(i), 32 >> i, 32 >> i, c)).collect();
            let (g, readout) = ladder_resnet(states, Pipeline::MaxPool2x2, blocks, prenet(false));
            (g, SharingSpec::AllShared, TimeSet::only([0]), readout)
        }
        "fullrec_2state" => {
            let states = Ladder { sizes: vec![(32, 64), (32, 64)] }.states(opts.base_channels);
            let tr = recurrent_transitions(2, with_self, |_, _| true);
            (graph(states, tr, prenet(false)), time_sharing, TimeSet::only([0]), 10)
        }
        "fullrec_3state" | "inhomogeneous_3state" => {
            let states = three.states(opts.base_channels);
            let tr = recurrent_transitions(3, with_self, |_, _| true);
            let input = if name == "fullrec_3state" {
                TimeSet::only([0])
            } else {
                TimeSet::All
            };
            (graph(states, tr, prenet(true)), time_sharing, input, 5)
        }
        "adjacent_3state" => {
            let states = three.states(opts.base_channels);
            let tr = recurrent_transitions(3, with_self, |i, j| i.abs_diff(j) <= 1);
            (graph(states, tr, prenet(true)), time_sharing, TimeSet::only([0]), 5)
        }
        "adjacent_4state" => {
            let states = Ladder { sizes: vec![(32, 8), (16, 16), (8, 32), (4, 64)] }
                .states(opts.base_channels);
            let tr = recurrent_transitions(4, with_self, |i, j| i.abs_diff(j) <= 1);
            (graph(states, tr, prenet(true)), time_sharing, TimeSet::only([0]), 5)
        }
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    let io = IoSchedule {
        input_times: input,
        readout_times: [opts.readout.unwrap_or(readout)].into(),
    };
    let diags = validate(&g, &sharing, &io);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    Ok((g, sharing, io))
}
