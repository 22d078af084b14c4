//! Forward and backward execution of an unrolled graph.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{
    add_n, batchnorm, batchnorm_backward, batchnorm_train, batchnorm_train_backward, conv2d, conv2d_backward,
    deconv2d, deconv2d_backward, fully_connected, fully_connected_backward, global_avg_pool,
    global_avg_pool_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward, softmax_cross_entropy, BnCache,
    BnStats, ConvParams, Tensor, BN_EPSILON,
};

use super::{NodeId, NodeOp, UnrolledGraph, POST_BN_SCALE, POST_BN_SHIFT};

/// Gradient per parameter group, summed over every tied instance.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics and records them.
    Train,
    /// Batch norm uses the stored running statistics.
    Eval,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug)]
pub struct Cache {
    mode: Mode,
    outputs: Vec<Tensor>,
    bn: BTreeMap<NodeId, BnCache>,
    batch_stats: Vec<(super::BnKey, BnStats)>,
}

impl Cache {
    pub fn output(&self, id: NodeId) -> &Tensor {
        &self.outputs[id]
    }

    /// Value of `state` at step `t`, if that instance was computed.
    pub fn state(&self, u: &UnrolledGraph, state: &str, t: usize) -> Option<&Tensor> {
        u.state_node(state, t).map(|id| &self.outputs[id])
    }

    /// Batch statistics seen by each training-mode BN node, in node order.
    pub fn batch_stats(&self) -> &[(super::BnKey, BnStats)] {
        &self.batch_stats
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `(t, logits)` per readout time.
    pub logits: Vec<(usize, Tensor)>,
    pub cache: Cache,
}

fn conv_params(params: &ParamStore, name: &str, stride: usize, deconv: bool) -> Result<ConvParams> {
    let p = ConvParams::new(params.weight(name)?.clone(), stride, 1);
    Ok(if deconv { p.with_output_padding(stride - 1) } else { p })
}

fn post_affine(params: &ParamStore) -> Result<(&[f64], &[f64])> {
    Ok((params.weight(POST_BN_SCALE)?.data(), params.weight(POST_BN_SHIFT)?.data()))
}

fn check_batch(u: &UnrolledGraph, batch: &Tensor) -> Result<()> {
    let [_, c, h, w] = batch.shape();
    if [c, h, w] != u.input_dims() || batch.batch() == 0 {
        return Err(shape_err!("input batch {:?} does not match graph input {:?}", batch.shape(), u.input_dims()));
    }
    Ok(())
}

/// Evaluate one node given its input values.
fn eval_node(
    op: &NodeOp,
    inputs: &[&Tensor],
    params: &ParamStore,
    mode: Mode,
) -> Result<(Tensor, Option<BnCache>)> {
    let x = || inputs[0];
    let out = match op {
        NodeOp::Input => unreachable!("input handled by caller"),
        NodeOp::Conv { param, stride } => conv2d(x(), &conv_params(params, param, *stride, false)?)?,
        NodeOp::Deconv { param, stride } => deconv2d(x(), &conv_params(params, param, *stride, true)?)?,
        NodeOp::BatchNorm { stats, affine } => {
            let (scale, shift) = if *affine {
                let (s, b) = post_affine(params)?;
                (Some(s), Some(b))
            } else {
                (None, None)
            };
            match mode {
                Mode::Train => {
                    let (y, cache) = batchnorm_train(x(), BN_EPSILON, scale, shift)?;
                    return Ok((y, Some(cache)));
                }
                Mode::Eval => {
                    let mut s = params.require_bn(stats)?;
                    s.scale = scale.map(<[f64]>::to_vec);
                    s.shift = shift.map(<[f64]>::to_vec);
                    batchnorm(x(), &s)?
                }
            }
        }
        NodeOp::Relu => relu(x()),
        NodeOp::MaxPool => maxpool2x2(x())?,
        NodeOp::GlobalAvgPool => global_avg_pool(x())?,
        NodeOp::FullyConnected { weight, bias } => {
            fully_connected(x(), params.weight(weight)?, Some(params.weight(bias)?.data()))?
        }
        NodeOp::Sum => add_n(inputs)?,
    };
    Ok((out, None))
}

/// Run the graph on `batch`, keeping every intermediate value.
pub fn forward(u: &UnrolledGraph, params: &ParamStore, batch: &Tensor, mode: Mode) -> Result<ForwardOutput> {
    check_batch(u, batch)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(u.nodes.len());
    let mut bn = BTreeMap::new();
    let mut batch_stats = Vec::new();
    for node in &u.nodes {
        let value = if node.op == NodeOp::Input {
            batch.clone()
        } else {
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &outputs[i]).collect();
            let (value, cache) = eval_node(&node.op, &inputs, params, mode)?;
            if let (Some(cache), NodeOp::BatchNorm { stats, .. }) = (cache, &node.op) {
                let mut recorded = cache.stats.clone();
                recorded.scale = None;
                recorded.shift = None;
                batch_stats.push((stats.clone(), recorded));
                bn.insert(node.id, cache);
            }
            value
        };
        outputs.push(value);
    }
    let logits = u.readouts.iter().map(|&(t, id)| (t, outputs[id].clone())).collect();
    Ok(ForwardOutput {
        logits,
        cache: Cache { mode, outputs, bn, batch_stats },
    })
}

/// Evaluation-mode forward pass that frees each value after its last use.
pub fn infer(u: &UnrolledGraph, params: &ParamStore, batch: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    check_batch(u, batch)?;
    let mut remaining = vec![0usize; u.nodes.len()];
    for node in &u.nodes {
        for &i in &node.inputs {
            remaining[i] += 1;
        }
    }
    for &(_, id) in &u.readouts {
        remaining[id] += 1;
    }
    let mut values: Vec<Option<Tensor>> = vec![None; u.nodes.len()];
    let mut logits = Vec::new();
    for node in &u.nodes {
        let value = if node.op == NodeOp::Input {
            batch.clone()
        } else {
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&i| values[i].as_ref().expect("inputs computed before use"))
                .collect();
            eval_node(&node.op, &inputs, params, Mode::Eval)?.0
        };
        for &i in &node.inputs {
            remaining[i] -= 1;
            if remaining[i] == 0 {
                values[i] = None;
            }
        }
        values[node.id] = Some(value);
        if let Some(&(t, _)) = u.readouts.iter().find(|(_, id)| *id == node.id) {
            logits.push((t, values[node.id].take().expect("just stored")));
        }
    }
    Ok(logits)
}

/// Sum of the softmax cross-entropy losses over all readouts, and the
/// gradient with respect to each readout's logits.
pub fn classification_loss(logits: &[(usize, Tensor)], labels: &[usize]) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (t, l) in logits {
        let (loss, g) = softmax_cross_entropy(l, labels)?;
        total += loss;
        grads.push((*t, g));
    }
    Ok((total, grads))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn accumulate_param(grads: &mut GradMap, name: &str, g: &Tensor) -> Result<()> {
    grads
        .get_mut(name)
        .ok_or_else(|| Error::MissingParam(name.to_string()))?
        .add_assign(g)
}

fn accumulate_vec(grads: &mut GradMap, name: &str, g: Vec<f64>) -> Result<()> {
    let slot = grads.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
    let g = Tensor::new(slot.shape(), g)?;
    slot.add_assign(&g)
}

/// Backpropagate `logit_grads` (one per readout, keyed by t) and return the
/// gradient of every parameter group. Tied instances accumulate into the
/// same entry, so each group receives the sum of its instance gradients.
pub fn backward(
    u: &UnrolledGraph,
    params: &ParamStore,
    cache: &Cache,
    logit_grads: &[(usize, Tensor)],
) -> Result<GradMap> {
    let mut grads: GradMap = u
        .param_groups()
        .iter()
        .map(|(name, decl)| (name.to_string(), Tensor::zeros(decl.shape)))
        .collect();
    let mut node_grads: Vec<Option<Tensor>> = vec![None; u.nodes.len()];
    for (t, g) in logit_grads {
        let &(_, id) = u
            .readouts
            .iter()
            .find(|(rt, _)| rt == t)
            .ok_or_else(|| Error::Config(format!("no readout at t={t}")))?;
        if g.shape() != cache.outputs[id].shape() {
            return Err(shape_err!("logit gradient {:?} vs logits {:?}", g.shape(), cache.outputs[id].shape()));
        }
        accumulate(&mut node_grads[id], g.clone())?;
    }

    for node in u.nodes.iter().rev() {
        let Some(g) = node_grads[node.id].take() else { continue };
        let input = |k: usize| &cache.outputs[node.inputs[k]];
        match &node.op {
            NodeOp::Input => {}
            NodeOp::Conv { param, stride } | NodeOp::Deconv { param, stride } => {
                let deconv = matches!(node.op, NodeOp::Deconv { .. });
                let p = conv_params(params, param, *stride, deconv)?;
                let cg = if deconv {
                    deconv2d_backward(input(0), &p, &g)?
                } else {
                    conv2d_backward(input(0), &p, &g)?
                };
                accumulate_param(&mut grads, param, &cg.weights)?;
                accumulate(&mut node_grads[node.inputs[0]], cg.input)?;
            }
            NodeOp::BatchNorm { stats, affine } => {
                let bg = match cache.mode {
                    Mode::Train => batchnorm_train_backward(&cache.bn[&node.id], &g)?,
                    Mode::Eval => {
                        let mut s = params.require_bn(stats)?;
                        if *affine {
                            let (sc, sh) = post_affine(params)?;
                            s.scale = Some(sc.to_vec());
                            s.shift = Some(sh.to_vec());
                        }
                        batchnorm_backward(input(0), &s, &g)?
                    }
                };
                if *affine {
                    if let Some(ds) = bg.scale {
                        accumulate_vec(&mut grads, POST_BN_SCALE, ds)?;
                    }
                    if let Some(db) = bg.shift {
                        accumulate_vec(&mut grads, POST_BN_SHIFT, db)?;
                    }
                }
                accumulate(&mut node_grads[node.inputs[0]], bg.input)?;
            }
            NodeOp::Relu => accumulate(&mut node_grads[node.inputs[0]], relu_backward(input(0), &g)?)?,
            NodeOp::MaxPool => accumulate(&mut node_grads[node.inputs[0]], maxpool2x2_backward(input(0), &g)?)?,
            NodeOp::GlobalAvgPool => {
                accumulate(&mut node_grads[node.inputs[0]], global_avg_pool_backward(input(0).shape(), &g)?)?
            }
            NodeOp::FullyConnected { weight, bias } => {
                let fg = fully_connected_backward(
                    input(0),
                    params.weight(weight)?,
                    Some(params.weight(bias)?.data()),
                    &g,
                )?;
                accumulate_param(&mut grads, weight, &fg.weights)?;
                if let Some(db) = fg.bias {
                    accumulate_vec(&mut grads, bias, db)?;
                }
                accumulate(&mut node_grads[node.inputs[0]], fg.input)?;
            }
            NodeOp::Sum => {
                for &i in &node.inputs {
                    accumulate(&mut node_grads[i], g.clone())?;
                }
            }
        }
    }
    Ok(grads)
}
