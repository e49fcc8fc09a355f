//! The whole pipeline through the command-line entry point, stage by stage,
//! exactly as a shell script would drive the `cftrace` binary.
//!
//! Run with `--release`.

use cftrace::cli::run;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().to_str().expect("utf-8 path").to_string();
    let config = dir.path().join("pipeline.cfg");
    std::fs::write(
        &config,
        "# desk-scale run\nm = 28\nholdout = 10\nepochs = 4\nsynth_benign_traces = 30\nsynth_malicious_traces = 30\n",
    )?;
    let cfg = config.to_str().expect("utf-8 path").to_string();
    let stage = |args: &[&str]| -> Result<(), Box<dyn std::error::Error>> {
        let mut argv = vec!["cftrace"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--config", &cfg, "--out", &out]);
        println!("$ {}", argv.join(" "));
        run(argv)?;
        Ok(())
    };
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    stage(&["generate"])?;
    stage(&["decode", &p("traces/malicious-0000.pt")])?;
    stage(&[
        "pixelize",
        &p("traces/malicious-0000.pt"),
        &p("maps/malicious-0000.map"),
    ])?;
    stage(&["imagize", &p("malicious-0000.pix")])?;
    stage(&["build-dataset", &p("manifest.csv")])?;
    stage(&["train"])?;
    stage(&[
        "classify",
        "--model",
        &p("model.hnmdl"),
        "--manifest",
        &p("holdout.csv"),
    ])?;
    stage(&[
        "evaluate",
        "--model",
        &p("model.hnmdl"),
        "--manifest",
        &p("holdout.csv"),
    ])?;
    let mut files: Vec<String> = std::fs::read_dir(dir.path())?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()?;
    files.sort();
    println!("artifacts: {}", files.join(" "));
    Ok(())
}
