use msrnn::config::{serialize_config, Experiment};
use msrnn::graph::PresetOptions;
use msrnn::train::TrainConfig;

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "fullrec_2state".into());
    let exp = Experiment::from_preset(&name, &PresetOptions::default(), TrainConfig::default()).unwrap();
    println!("{}", serialize_config(&exp));
}
