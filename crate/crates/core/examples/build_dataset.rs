//! Labels the segments of a generated corpus and splits them by trace.

use cftrace::cli::image_trace;
use cftrace::dataset::{split_dataset, Label, LabeledTrace, Manifest, Split, SplitRatios};
use cftrace::synth::{generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = SynthConfig {
        benign_traces: 12,
        malicious_traces: 12,
        packets_per_trace: 2000,
        ..SynthConfig::default()
    };
    generate_corpus(&config, 28, dir.path())?;
    let manifest = Manifest::load(&dir.path().join("manifest.csv"))?;

    let traces = manifest
        .entries
        .iter()
        .map(|e| {
            let series = image_trace(&e.trace_id, &e.trace_path, &e.map_path, 28)?;
            Ok(LabeledTrace::new(e.label, e.attack_index, series)?)
        })
        .collect::<Result<Vec<_>, Box<dyn std::error::Error>>>()?;

    let (dataset, holdout) = split_dataset(&traces, SplitRatios::default(), 4, 7)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!(
            "{split:>5}: {:4} benign {:4} malicious segments",
            dataset.count(split, Label::Benign),
            dataset.count(split, Label::Malicious)
        );
    }
    let ids: Vec<&str> = holdout.iter().map(|t| t.trace_id.as_str()).collect();
    println!("held out: {ids:?}");
    Ok(())
}
