//! Experiment documents: a JSON object with the sections `input`, `prenet`,
//! `postnet`, `states`, `transitions`, `readout_state`, `sharing`, `io` and
//! `train`. Unknown fields are rejected, and parse errors carry the field
//! path and the line/column of the offending token.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    preset, validate, GraphSpec, InputSpec, IoSchedule, PostNet, PreNet, PresetOptions, SharingSpec, StateSpec,
    TransitionSpec,
};
use crate::params::config_hash;
use crate::train::TrainConfig;

/// Everything needed to build, train and evaluate one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub graph: GraphSpec,
    pub sharing: SharingSpec,
    pub io: IoSchedule,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default)]
    input: InputSpec,
    #[serde(default)]
    prenet: PreNet,
    #[serde(default)]
    postnet: PostNet,
    states: Vec<StateSpec>,
    transitions: Vec<TransitionSpec>,
    readout_state: String,
    #[serde(default)]
    sharing: SharingSpec,
    io: IoSchedule,
    #[serde(default)]
    train: TrainConfig,
}

impl Experiment {
    pub fn from_preset(name: &str, opts: &PresetOptions, train: TrainConfig) -> Result<Self> {
        let (graph, sharing, io) = preset(name, opts)?;
        Ok(Experiment { graph, sharing, io, train })
    }

    /// Structural diagnostics for the model and the training configuration.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = validate(&self.graph, &self.sharing, &self.io);
        if let Err(Error::Validation(t)) = self.train.validate() {
            d.extend(t);
        }
        d
    }

    /// Hash identifying the model structure, excluding training settings
    /// and readout times, so a checkpoint can be evaluated at other t.
    pub fn model_hash(&self) -> String {
        let model = Experiment {
            train: TrainConfig {
                bn_timing: self.train.bn_timing,
                ..TrainConfig::default()
            },
            io: IoSchedule {
                readout_times: Default::default(),
                ..self.io.clone()
            },
            ..self.clone()
        };
        config_hash(&serialize_config(&model))
    }
}

/// Parse a document without validating it.
pub fn parse_config_unchecked(text: &str) -> Result<Experiment> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: Document = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    Ok(Experiment {
        graph: GraphSpec {
            input: doc.input,
            prenet: doc.prenet,
            postnet: doc.postnet,
            states: doc.states,
            transitions: doc.transitions,
            readout_state: doc.readout_state,
        },
        sharing: doc.sharing,
        io: doc.io,
        train: doc.train,
    })
}

/// Parse and validate a document.
pub fn parse_config(text: &str) -> Result<Experiment> {
    let exp = parse_config_unchecked(text)?;
    let diags = exp.diagnostics();
    if diags.is_empty() {
        Ok(exp)
    } else {
        Err(Error::Validation(diags))
    }
}

pub fn serialize_config(exp: &Experiment) -> String {
    let g = exp.graph.clone();
    let doc = Document {
        input: g.input,
        prenet: g.prenet,
        postnet: g.postnet,
        states: g.states,
        transitions: g.transitions,
        readout_state: g.readout_state,
        sharing: exp.sharing.clone(),
        io: exp.io.clone(),
        train: exp.train.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("documents always serialize")
}

pub fn load_config(path: &Path) -> Result<Experiment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
