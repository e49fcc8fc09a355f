//! Trains the behaviour model on a synthetic corpus and saves it.
//!
//! Run with `--release`; the default corpus takes a few seconds there.

use cftrace::cli::{build_dataset, train_model, PipelineConfig, MODEL_FILE};
use cftrace::model::BehaviorModel;
use cftrace::synth::{generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = PipelineConfig {
        out: dir.path().to_path_buf(),
        holdout: 10,
        epochs: 5,
        synth: SynthConfig {
            benign_traces: 30,
            malicious_traces: 30,
            ..SynthConfig::default()
        },
        ..PipelineConfig::default()
    };

    generate_corpus(&config.synth_config(), config.m, dir.path())?;
    build_dataset(&config, &dir.path().join("manifest.csv"))?;
    print!("{}", train_model(&config, dir.path())?);

    let model = BehaviorModel::load(&dir.path().join(MODEL_FILE))?;
    let spec = model.input_spec();
    println!(
        "model: {}x{} input, {} channel(s), {} parameters",
        spec.side,
        spec.side,
        spec.channels,
        model.network.params().len()
    );
    Ok(())
}
