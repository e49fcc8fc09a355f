//! Detection on unseen traces: decode, pixelize, segment, score each segment
//! and average the scores into a trace verdict.
//!
//! Run with `--release`.

use cftrace::cli::{build_dataset, classify, train_model, PipelineConfig, MODEL_FILE};
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
    train_model(&config, dir.path())?;
    let model = BehaviorModel::load(&dir.path().join(MODEL_FILE))?;

    // A fresh corpus from another seed: new load addresses and control flow.
    let unseen = dir.path().join("unseen");
    let fresh = SynthConfig {
        seed: 99,
        benign_traces: 3,
        malicious_traces: 3,
        ..config.synth_config()
    };
    let manifest = generate_corpus(&fresh, config.m, &unseen)?;
    let traces: Vec<_> = manifest
        .entries
        .iter()
        .map(|e| {
            (
                e.trace_id.clone(),
                unseen.join(&e.trace_path),
                unseen.join(&e.map_path),
            )
        })
        .collect();
    let (verdicts, probs) = classify(&config, &model, None, &traces)?;
    for ((v, p), e) in verdicts.iter().zip(&probs).zip(&manifest.entries) {
        let flagged = p
            .iter()
            .filter(|s| s.p_malicious > config.threshold)
            .count();
        println!(
            "{:16} mean {:.3} -> {:9} ({flagged}/{} segments flagged, truth {})",
            v.trace_id,
            v.p_bar,
            v.decision.to_string(),
            p.len(),
            e.label
        );
    }
    Ok(())
}
