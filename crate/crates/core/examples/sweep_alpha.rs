//! Blends two models' segment probabilities and reports accuracy and FPR for
//! each weight, with the Pareto-optimal weights.
//!
//! Run with `--release`.

use cftrace::cli::{
    build_dataset, classify, train_model, PipelineConfig, HOLDOUT_MANIFEST, MODEL_FILE,
};
use cftrace::dataset::Manifest;
use cftrace::ensemble::{alpha_grid, sweep_alpha};
use cftrace::model::BehaviorModel;
use cftrace::synth::{generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut config = PipelineConfig {
        out: dir.path().to_path_buf(),
        holdout: 12,
        synth: SynthConfig {
            benign_traces: 30,
            malicious_traces: 30,
            ..SynthConfig::default()
        },
        ..PipelineConfig::default()
    };
    generate_corpus(&config.synth_config(), config.m, dir.path())?;
    build_dataset(&config, &dir.path().join("manifest.csv"))?;

    // Two models that differ only in training length.
    let mut models = Vec::new();
    for epochs in [2, 8] {
        config.epochs = epochs;
        train_model(&config, dir.path())?;
        models.push(BehaviorModel::load(&dir.path().join(MODEL_FILE))?);
    }

    let holdout = Manifest::load(&dir.path().join(HOLDOUT_MANIFEST))?;
    let traces: Vec<_> = holdout
        .entries
        .iter()
        .map(|e| (e.trace_id.clone(), e.trace_path.clone(), e.map_path.clone()))
        .collect();
    let low = classify(&config, &models[0], None, &traces)?.1.concat();
    let high = classify(&config, &models[1], None, &traces)?.1.concat();
    let labels: Vec<_> = low
        .iter()
        .map(|p| {
            let e = holdout
                .entries
                .iter()
                .find(|e| e.trace_id == p.trace_id)
                .expect("listed");
            match e.attack_index {
                Some(k) if p.segment_index >= k => cftrace::dataset::Label::Malicious,
                _ => cftrace::dataset::Label::Benign,
            }
        })
        .collect();

    let report = sweep_alpha(&low, &high, &labels, &alpha_grid(10), config.threshold)?;
    println!("alpha,accuracy,fpr");
    print!("{}", report.to_text());
    println!(
        "pareto: {:?}, recommended range {:?}",
        report.pareto, report.recommended
    );
    Ok(())
}
