//! Compile a cyclic state graph into a time-stamped DAG and run it.
//!
//! Unrolling simulates discrete time from the onset of the input: every
//! transition costs one step, a transition fires at `t` only if its source
//! state was populated at `t - 1`, and contributions arriving at the same
//! state instance are summed. Instances that cannot influence any readout
//! are pruned, so the DAG contains exactly the computation that reaches the
//! post-net.

mod exec;

pub use exec::{backward, classification_loss, forward, infer, Cache, ForwardOutput, GradMap, Mode};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    populated_states, validate, GraphSpec, IoSchedule, LayerPlan, PreNet, SharingSpec, WeightKey,
};

pub type NodeId = usize;

pub const POST_BN_SCALE: &str = "post/bn.scale";
pub const POST_BN_SHIFT: &str = "post/bn.shift";
pub const POST_FC_WEIGHT: &str = "post/fc.weight";
pub const POST_FC_BIAS: &str = "post/fc.bias";

/// Whether batch-norm statistics are indexed by time step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnTiming {
    /// Separate statistics for every unrolled t.
    #[default]
    TimeSpecific,
    /// One set of statistics per BN layer, pooled over all t.
    SharedAcrossTime,
}

/// Identifies one set of running batch-norm statistics.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BnKey {
    /// Layer path, e.g. `h1->h2/bn0`, `pre/bn1`, `post/bn`.
    pub node: String,
    /// `None` when statistics are shared across time.
    pub t: Option<usize>,
}

impl fmt::Display for BnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.t {
            Some(t) => write!(f, "{}@t{t}", self.node),
            None => write!(f, "{}@shared", self.node),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeOp {
    /// The image batch.
    Input,
    /// 3×3 convolution, padding 1.
    Conv { param: String, stride: usize },
    /// 3×3 transposed convolution, padding 1, output padding `stride - 1`.
    Deconv { param: String, stride: usize },
    /// `affine` uses the post-net scale/shift parameters.
    BatchNorm { stats: BnKey, affine: bool },
    Relu,
    MaxPool,
    GlobalAvgPool,
    FullyConnected { weight: String, bias: String },
    /// Elementwise sum of all inputs.
    Sum,
}

impl NodeOp {
    pub fn name(&self) -> &'static str {
        match self {
            NodeOp::Input => "input",
            NodeOp::Conv { .. } => "conv",
            NodeOp::Deconv { .. } => "deconv",
            NodeOp::BatchNorm { .. } => "bn",
            NodeOp::Relu => "relu",
            NodeOp::MaxPool => "maxpool",
            NodeOp::GlobalAvgPool => "gap",
            NodeOp::FullyConnected { .. } => "fc",
            NodeOp::Sum => "sum",
        }
    }

    /// Tied parameter group (or statistics key) the node reads, for dumps.
    pub fn group(&self) -> Option<String> {
        match self {
            NodeOp::Conv { param, .. } | NodeOp::Deconv { param, .. } => Some(param.clone()),
            NodeOp::FullyConnected { weight, .. } => Some(weight.clone()),
            NodeOp::BatchNorm { stats, .. } => Some(stats.to_string()),
            _ => None,
        }
    }
}

/// Where a node came from in the source graph.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    PreNet,
    /// Part of the transition `from -> to`.
    Transition { from: String, to: String },
    /// Combines the contributions arriving at `state`.
    State { state: String },
    PostNet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub op: NodeOp,
    pub t: usize,
    pub origin: Origin,
    /// Short human-readable tag, e.g. `h1->h1/conv0`.
    pub label: String,
    pub inputs: Vec<NodeId>,
    /// Output `(channels, height, width)`.
    pub dims: [usize; 3],
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// He-normal with the given fan-in.
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub shape: [usize; 4],
    pub init: ParamInit,
}

/// The unrolled, acyclic computation. Node ids index `nodes` and are already
/// in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledGraph {
    pub nodes: Vec<Node>,
    /// `(t, logits node)` per readout time.
    pub readouts: Vec<(usize, NodeId)>,
    /// Node holding the value of `(state, t)` for every computed instance.
    pub state_nodes: BTreeMap<(String, usize), NodeId>,
    /// Every parameter use, one entry per parameterized node.
    pub param_uses: Vec<(String, ParamDecl)>,
    pub bn_timing: BnTiming,
    pub horizon: usize,
    input_dims: [usize; 3],
    classes: usize,
}

impl UnrolledGraph {
    pub fn topo_order(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Distinct parameter groups with their declaration, first use wins.
    pub fn param_groups(&self) -> BTreeMap<&str, &ParamDecl> {
        let mut out = BTreeMap::new();
        for (name, decl) in &self.param_uses {
            out.entry(name.as_str()).or_insert(decl);
        }
        out
    }

    /// Every batch-norm statistics key read by the graph.
    pub fn bn_keys(&self) -> BTreeSet<&BnKey> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                NodeOp::BatchNorm { stats, .. } => Some(stats),
                _ => None,
            })
            .collect()
    }

    pub fn state_node(&self, state: &str, t: usize) -> Option<NodeId> {
        self.state_nodes.get(&(state.to_string(), t)).copied()
    }

    /// One node per line: id, op, t, tied group, inputs, label.
    pub fn dump(&self) -> String {
        let mut out = String::from("# id\top\tt\tgroup\tinputs\tlabel\n");
        for n in &self.nodes {
            let inputs = if n.inputs.is_empty() {
                "-".to_string()
            } else {
                n.inputs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                n.id,
                n.op.name(),
                n.t,
                n.op.group().unwrap_or_else(|| "-".into()),
                inputs,
                n.label
            ));
        }
        for (t, id) in &self.readouts {
            out.push_str(&format!("# readout t={t} node={id}\n"));
        }
        out
    }
}

/// Learnable parameter count, once per tied group reached by the graph.
pub fn param_count(u: &UnrolledGraph, _s: &SharingSpec) -> usize {
    u.param_groups()
        .values()
        .map(|d| d.shape.iter().product::<usize>())
        .sum()
}

/// Wall-clock latency range, in milliseconds, of a readout at step `t`,
/// taking 20-50 ms per transition.
pub fn wall_clock_estimate(t: usize) -> (usize, usize) {
    (20 * t, 50 * t)
}

struct Builder {
    nodes: Vec<Node>,
    param_uses: Vec<(String, ParamDecl)>,
}

impl Builder {
    fn push(&mut self, op: NodeOp, t: usize, origin: Origin, label: String, inputs: Vec<NodeId>, dims: [usize; 3]) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            op,
            t,
            origin,
            label,
            inputs,
            dims,
        });
        id
    }

    fn declare(&mut self, name: &str, shape: [usize; 4], init: ParamInit) {
        self.param_uses.push((name.to_string(), ParamDecl { shape, init }));
    }

    /// Append the layers of one pipeline; returns the last node.
    #[allow(clippy::too_many_arguments)]
    fn layers(
        &mut self,
        layers: &[LayerPlan],
        mut cur: NodeId,
        t: usize,
        origin: &Origin,
        prefix: &str,
        bn_t: Option<usize>,
        weight_name: &dyn Fn(usize) -> String,
    ) -> NodeId {
        let (mut conv_i, mut bn_i) = (0, 0);
        for layer in layers {
            let [c, h, w] = self.nodes[cur].dims;
            let (op, dims, label) = match *layer {
                LayerPlan::BatchNorm { .. } => {
                    let key = BnKey { node: format!("{prefix}/bn{bn_i}"), t: bn_t };
                    bn_i += 1;
                    (NodeOp::BatchNorm { stats: key, affine: false }, [c, h, w], format!("{prefix}/bn{}", bn_i - 1))
                }
                LayerPlan::Relu => (NodeOp::Relu, [c, h, w], format!("{prefix}/relu")),
                LayerPlan::MaxPool => (NodeOp::MaxPool, [c, h / 2, w / 2], format!("{prefix}/pool")),
                LayerPlan::Conv { cin, cout, stride } => {
                    let param = weight_name(conv_i);
                    self.declare(&param, [cout, cin, 3, 3], ParamInit::He { fan_in: cin * 9 });
                    conv_i += 1;
                    let dims = [cout, (h - 1) / stride + 1, (w - 1) / stride + 1];
                    (NodeOp::Conv { param, stride }, dims, format!("{prefix}/conv{}", conv_i - 1))
                }
                LayerPlan::Deconv { cin, cout, stride } => {
                    let param = weight_name(conv_i);
                    self.declare(&param, [cin, cout, 3, 3], ParamInit::He { fan_in: cin * 9 });
                    conv_i += 1;
                    (NodeOp::Deconv { param, stride }, [cout, h * stride, w * stride], format!("{prefix}/deconv{}", conv_i - 1))
                }
            };
            cur = self.push(op, t, origin.clone(), label, vec![cur], dims);
        }
        cur
    }
}

/// Unroll with time-specific batch-norm statistics.
pub fn unroll(g: &GraphSpec, s: &SharingSpec, io: &IoSchedule, horizon: usize) -> Result<UnrolledGraph> {
    unroll_with(g, s, io, horizon, BnTiming::TimeSpecific)
}

pub fn unroll_with(
    g: &GraphSpec,
    s: &SharingSpec,
    io: &IoSchedule,
    horizon: usize,
    bn_timing: BnTiming,
) -> Result<UnrolledGraph> {
    let diags = validate(g, s, io);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    let max_readout = io.max_readout().expect("validated: readouts non-empty");
    if horizon < max_readout {
        return Err(Error::Config(format!(
            "unroll horizon {horizon} is before the last readout time {max_readout}"
        )));
    }
    let pop = populated_states(g, io, max_readout);
    let readout_idx = g.state_index(&g.readout_state).expect("validated");
    for &t in &io.readout_times {
        if !pop[t].contains(&readout_idx) {
            return Err(Error::UnreachableReadout {
                state: g.readout_state.clone(),
                t,
            });
        }
    }

    // Resolved layers per transition, in declaration order.
    let plans: Vec<Vec<LayerPlan>> = g.transitions.iter().map(|tr| g.layers(tr)).collect::<Result<_>>()?;
    let idx = |name: &str| g.state_index(name).expect("validated");

    // Backward liveness: which (state, t) instances can reach a readout.
    let mut needed = vec![BTreeSet::new(); max_readout + 1];
    for &t in &io.readout_times {
        needed[t].insert(readout_idx);
    }
    for t in (1..=max_readout).rev() {
        let live: Vec<usize> = needed[t].iter().copied().collect();
        for j in live {
            for tr in g.transitions.iter().filter(|tr| idx(&tr.to) == j && tr.window.contains(t)) {
                let i = idx(&tr.from);
                if pop[t - 1].contains(&i) {
                    needed[t - 1].insert(i);
                }
            }
        }
    }

    let mut b = Builder { nodes: Vec::new(), param_uses: Vec::new() };
    let inp = &g.input;
    let input = b.push(NodeOp::Input, 0, Origin::PreNet, "input".into(), vec![], [inp.channels, inp.height, inp.width]);
    let c0 = g.states[0].channels;
    let pre_layers = match g.prenet {
        PreNet::Simple => vec![LayerPlan::Conv { cin: inp.channels, cout: c0, stride: 1 }],
        PreNet::Deep => vec![
            LayerPlan::Conv { cin: inp.channels, cout: c0, stride: 1 },
            LayerPlan::BatchNorm { channels: c0 },
            LayerPlan::Relu,
            LayerPlan::Conv { cin: c0, cout: c0, stride: 1 },
            LayerPlan::BatchNorm { channels: c0 },
            LayerPlan::Relu,
            LayerPlan::Conv { cin: c0, cout: c0, stride: 1 },
        ],
    };
    let prenet_out = b.layers(&pre_layers, input, 0, &Origin::PreNet, "pre", Some(0), &|i| format!("pre/conv{i}"));

    let bn_t = |t: usize| match bn_timing {
        BnTiming::TimeSpecific => Some(t),
        BnTiming::SharedAcrossTime => None,
    };

    let mut state_nodes: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
    for t in 0..=max_readout {
        for (j, st) in g.states.iter().enumerate() {
            if !needed[t].contains(&j) {
                continue;
            }
            let mut contributions = Vec::new();
            if j == 0 && io.input_times.contains(t) {
                contributions.push(prenet_out);
            }
            if t > 0 {
                let mut firing: Vec<usize> = (0..g.transitions.len())
                    .filter(|&k| {
                        let tr = &g.transitions[k];
                        idx(&tr.to) == j && tr.window.contains(t) && pop[t - 1].contains(&idx(&tr.from))
                    })
                    .collect();
                firing.sort_by_key(|&k| (idx(&g.transitions[k].from), g.transitions[k].pipeline));
                for k in firing {
                    let tr = &g.transitions[k];
                    let src = state_nodes[&(idx(&tr.from), t - 1)];
                    let origin = Origin::Transition { from: tr.from.clone(), to: tr.to.clone() };
                    let prefix = tr.label();
                    let name = |layer: usize| s.group_id(&WeightKey::new(&tr.from, &tr.to, t, layer));
                    let mut out = b.layers(&plans[k], src, t, &origin, &prefix, bn_t(t), &name);
                    if tr.shortcut {
                        let dims = b.nodes[out].dims;
                        out = b.push(NodeOp::Sum, t, origin, format!("{prefix}/+I"), vec![out, src], dims);
                    }
                    contributions.push(out);
                }
            }
            let node = match contributions.as_slice() {
                [] => unreachable!("needed instances are populated"),
                [single] => *single,
                many => b.push(
                    NodeOp::Sum,
                    t,
                    Origin::State { state: st.name.clone() },
                    format!("{}/sum", st.name),
                    many.to_vec(),
                    st.dims(),
                ),
            };
            state_nodes.insert((j, t), node);
        }
    }

    let classes = g.postnet.classes;
    let readout_dims = g.states[readout_idx].dims();
    b.declare(POST_BN_SCALE, [1, readout_dims[0], 1, 1], ParamInit::Ones);
    b.declare(POST_BN_SHIFT, [1, readout_dims[0], 1, 1], ParamInit::Zeros);
    b.declare(POST_FC_WEIGHT, [classes, readout_dims[0], 1, 1], ParamInit::He { fan_in: readout_dims[0] });
    b.declare(POST_FC_BIAS, [1, classes, 1, 1], ParamInit::Zeros);
    let mut readouts = Vec::new();
    for &t in &io.readout_times {
        let src = state_nodes[&(readout_idx, t)];
        let key = BnKey { node: "post/bn".into(), t: bn_t(t) };
        let bn = b.push(NodeOp::BatchNorm { stats: key, affine: true }, t, Origin::PostNet, "post/bn".into(), vec![src], readout_dims);
        let relu = b.push(NodeOp::Relu, t, Origin::PostNet, "post/relu".into(), vec![bn], readout_dims);
        let gap = b.push(NodeOp::GlobalAvgPool, t, Origin::PostNet, "post/gap".into(), vec![relu], [readout_dims[0], 1, 1]);
        let fc = b.push(
            NodeOp::FullyConnected { weight: POST_FC_WEIGHT.into(), bias: POST_FC_BIAS.into() },
            t,
            Origin::PostNet,
            "post/fc".into(),
            vec![gap],
            [classes, 1, 1],
        );
        readouts.push((t, fc));
    }

    Ok(UnrolledGraph {
        nodes: b.nodes,
        readouts,
        state_nodes: state_nodes
            .into_iter()
            .map(|((j, t), id)| ((g.states[j].name.clone(), t), id))
            .collect(),
        param_uses: b.param_uses,
        bn_timing,
        horizon,
        input_dims: [inp.channels, inp.height, inp.width],
        classes,
    })
}
