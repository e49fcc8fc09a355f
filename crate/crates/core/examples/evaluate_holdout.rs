//! Confusion counts, ROC/AUC and the rank-sum test on held-out traces, then
//! the same numbers from an exported probability file.
//!
//! Run with `--release`.

use cftrace::cli::{
    build_dataset, evaluate_model, evaluate_probabilities, train_model, PipelineConfig,
    HOLDOUT_MANIFEST, MODEL_FILE,
};
use cftrace::dataset::Label;
use cftrace::dataset::Manifest;
use cftrace::eval::{rank_sum_test, roc_auc, Prediction};
use cftrace::model::BehaviorModel;
use cftrace::synth::{generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = PipelineConfig {
        out: dir.path().to_path_buf(),
        holdout: 12,
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
    let holdout = Manifest::load(&dir.path().join(HOLDOUT_MANIFEST))?;

    let report = evaluate_model(&config, &model, &holdout)?;
    println!(
        "segments: {:?} auc {:?}",
        report.segments.confusion, report.segments.auc
    );
    println!(
        "traces:   {:?} auc {:?}",
        report.traces.confusion, report.traces.auc
    );
    println!(
        "rank-sum p-value between classes: {:?}",
        report.rank_sum_p_value
    );

    // The metric functions on their own.
    let preds = [
        (0.1, Label::Benign),
        (0.4, Label::Malicious),
        (0.6, Label::Benign),
        (0.9, Label::Malicious),
    ]
    .map(|(p, label)| Prediction { p, label });
    println!("toy AUC {}", roc_auc(&preds)?.auc);
    println!(
        "toy rank-sum p {}",
        rank_sum_test(&[1.0, 2.0], &[3.0, 4.0])?
    );

    // Probabilities from any other model can be scored the same way.
    let (_, probs) = cftrace::cli::classify(
        &config,
        &model,
        None,
        &holdout
            .entries
            .iter()
            .map(|e| (e.trace_id.clone(), e.trace_path.clone(), e.map_path.clone()))
            .collect::<Vec<_>>(),
    )?;
    let again = evaluate_probabilities(&config, &holdout, &probs.concat())?;
    assert_eq!(again, report);
    println!(
        "malicious trace means: {:?}",
        report.ensemble_probability.malicious
    );
    Ok(())
}
