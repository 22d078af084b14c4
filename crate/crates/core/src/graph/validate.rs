use std::collections::{BTreeMap, BTreeSet};

use super::{plan_layers, GraphSpec, IoSchedule, LayerPlan, SharingSpec, TimeSet, WeightKey};

/// Indices of the states populated at each `t` in `0..=horizon`.
///
/// A state is populated at `t` when the pre-net injects into it at `t`, or
/// when some transition active at `t` leaves a state populated at `t - 1`.
/// Nothing carries over implicitly from one step to the next.
pub fn populated_states(g: &GraphSpec, io: &IoSchedule, horizon: usize) -> Vec<BTreeSet<usize>> {
    let mut pop: Vec<BTreeSet<usize>> = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut now = BTreeSet::new();
        if io.input_times.contains(t) && !g.states.is_empty() {
            now.insert(0);
        }
        if t > 0 {
            for tr in &g.transitions {
                if !tr.window.contains(t) {
                    continue;
                }
                if let (Some(i), Some(j)) = (g.state_index(&tr.from), g.state_index(&tr.to)) {
                    if pop[t - 1].contains(&i) {
                        now.insert(j);
                    }
                }
            }
        }
        pop.push(now);
    }
    pop
}

/// Check every structural invariant of a model description. Returns one
/// human-readable diagnostic per violation; empty means valid.
pub fn validate(g: &GraphSpec, s: &SharingSpec, io: &IoSchedule) -> Vec<String> {
    let mut diags = Vec::new();

    if g.states.is_empty() {
        diags.push("graph has no states".to_string());
    }
    let mut names = BTreeSet::new();
    for st in &g.states {
        if st.height == 0 || st.width == 0 || st.channels == 0 {
            diags.push(format!("state `{}` has a zero dimension", st.name));
        }
        if !names.insert(st.name.as_str()) {
            diags.push(format!("duplicate state name `{}`", st.name));
        }
    }
    let inp = &g.input;
    if inp.channels == 0 || inp.height == 0 || inp.width == 0 {
        diags.push("input has a zero dimension".to_string());
    }
    if let Some(first) = g.first_state() {
        if (first.height, first.width) != (inp.height, inp.width) {
            diags.push(format!(
                "pre-net output {}x{} does not match first state `{}` ({}x{})",
                inp.height, inp.width, first.name, first.height, first.width
            ));
        }
    }
    if g.postnet.classes == 0 {
        diags.push("post-net needs at least one class".to_string());
    }
    if g.state(&g.readout_state).is_none() {
        diags.push(format!("readout state `{}` does not exist", g.readout_state));
    }

    let mut seen: BTreeMap<(&str, &str), Vec<&TimeSet>> = BTreeMap::new();
    for tr in &g.transitions {
        let label = format!("transition {} ({})", tr.label(), tr.pipeline);
        let (from, to) = match (g.state(&tr.from), g.state(&tr.to)) {
            (Some(f), Some(t)) => (f, t),
            (f, t) => {
                for (name, found) in [(&tr.from, f.is_some()), (&tr.to, t.is_some())] {
                    if !found {
                        diags.push(format!("{label}: unknown state `{name}`"));
                    }
                }
                continue;
            }
        };
        if let Err(m) = plan_layers(tr.pipeline, from, to) {
            diags.push(format!("{label}: {m}"));
        }
        if tr.shortcut && from.dims() != to.dims() {
            diags.push(format!(
                "{label}: identity shortcut needs equal shapes, got {}x{}x{} -> {}x{}x{}",
                from.height, from.width, from.channels, to.height, to.width, to.channels
            ));
        }
        if tr.window.is_empty() {
            diags.push(format!("{label}: empty activity window"));
        }
        let windows = seen.entry((&tr.from, &tr.to)).or_default();
        if windows.iter().any(|w| w.overlaps(&tr.window)) {
            diags.push(format!("{label}: more than one transition for the same (from, to, t)"));
        }
        windows.push(&tr.window);
    }

    if io.readout_times.is_empty() {
        diags.push("no readout times".to_string());
    }
    if io.input_times.is_empty() {
        diags.push("no input times".to_string());
    }

    diags.extend(validate_sharing(g, s));

    if let (Some(horizon), false) = (io.max_readout(), g.states.is_empty()) {
        let pop = populated_states(g, io, horizon);
        let reached: BTreeSet<usize> = pop.iter().flatten().copied().collect();
        for (i, st) in g.states.iter().enumerate() {
            if !reached.contains(&i) {
                diags.push(format!("state `{}` is never populated by t={horizon}", st.name));
            }
        }
    }
    diags
}

fn weight_layers(g: &GraphSpec, from: &str, to: &str) -> Option<Vec<LayerPlan>> {
    let tr = g.transitions.iter().find(|t| t.from == from && t.to == to)?;
    let layers = g.layers(tr).ok()?;
    Some(layers.into_iter().filter(|l| l.weight_shape().is_some()).collect())
}

fn layer_kind(l: &LayerPlan) -> (&'static str, Option<[usize; 4]>) {
    let kind = if matches!(l, LayerPlan::Deconv { .. }) { "deconv" } else { "conv" };
    (kind, l.weight_shape())
}

fn validate_sharing(g: &GraphSpec, s: &SharingSpec) -> Vec<String> {
    let mut diags = Vec::new();
    match s {
        SharingSpec::TimeShared | SharingSpec::TimeUnshared => {}
        SharingSpec::AllShared => {
            let mut kinds = BTreeSet::new();
            for tr in &g.transitions {
                if let Some(layers) = weight_layers(g, &tr.from, &tr.to) {
                    kinds.extend(layers.iter().map(layer_kind));
                }
            }
            if kinds.len() > 1 {
                diags.push(format!(
                    "all_shared sharing needs identical layer shapes, found {}",
                    kinds
                        .iter()
                        .map(|(k, s)| format!("{k} {:?}", s.unwrap_or_default()))
                        .collect::<Vec<_>>()
                        .join(", ")
                ));
            }
        }
        SharingSpec::Explicit { groups } => {
            let mut owner: BTreeMap<&WeightKey, usize> = BTreeMap::new();
            for (gi, group) in groups.iter().enumerate() {
                let mut kinds = BTreeSet::new();
                for key in group {
                    if let Some(prev) = owner.insert(key, gi) {
                        diags.push(format!(
                            "weight {}->{}@t{} layer {} is in sharing groups {prev} and {gi}",
                            key.from, key.to, key.t, key.layer
                        ));
                    }
                    let tr = g.transitions.iter().find(|tr| {
                        tr.from == key.from && tr.to == key.to && tr.window.contains(key.t)
                    });
                    if tr.is_none() {
                        diags.push(format!(
                            "sharing group {gi}: no transition {}->{} active at t={}",
                            key.from, key.to, key.t
                        ));
                        continue;
                    }
                    match weight_layers(g, &key.from, &key.to) {
                        Some(layers) if key.layer < layers.len() => {
                            kinds.insert(layer_kind(&layers[key.layer]));
                        }
                        _ => diags.push(format!(
                            "sharing group {gi}: transition {}->{} has no weight layer {}",
                            key.from, key.to, key.layer
                        )),
                    }
                }
                if kinds.len() > 1 {
                    diags.push(format!("sharing group {gi} mixes parameter shapes"));
                }
            }
        }
    }
    diags
}
