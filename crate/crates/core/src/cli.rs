//! Command-line pipeline. Every stage reads and writes files, so each one can
//! be rerun on its own.
//!
//! Configuration comes from a flat `key = value` file (`--config`) overlaid
//! by flags; every key has a flag of the same name with `_` spelled `-`.
//! Reports start with the effective configuration as `# key = value` lines
//! (JSON reports carry it under `"config"`). `out` and `jobs` are left out of
//! the echo because they do not affect results.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{decode_stream, PacketReader};
use crate::dataset::{
    split_dataset, Label, LabeledDataset, LabeledTrace, Manifest, ManifestEntry, SplitRatios,
};
use crate::ensemble::{
    aggregate, alpha_grid, combine_segments, sweep_alpha, verdicts_to_text, EnsembleVerdict,
};
use crate::eval::{EvaluationReport, Prediction};
use crate::imager::{segment, ImageBundle, ImageSeries};
use crate::model::{
    self, import_probabilities, predict, BehaviorModel, SegmentProbability, TrainConfig,
};
use crate::pixel::{pixelize_trace, BinaryMap, PixelStream};
use crate::synth::{generate_corpus, AttackProfile, BenignProfile, SynthConfig};

pub const MODEL_FILE: &str = "model.hnmdl";
pub const DATASET_IMAGES: &str = "dataset.hnimg";
pub const DATASET_LABELS: &str = "dataset.labels";
pub const HOLDOUT_MANIFEST: &str = "holdout.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(#[from] clap::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

fn io_stage<T>(stage: &'static str, path: &Path, r: std::io::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Stage {
        stage,
        source: format!("{}: {e}", path.display()).into(),
    })
}

/// Every configuration key with its flag help.
pub const KEYS: &[(&str, &str)] = &[
    ("m", "image side length"),
    (
        "threshold",
        "trace decision threshold on the mean probability",
    ),
    (
        "train_ratio",
        "share of non-holdout traces used for training",
    ),
    (
        "val_ratio",
        "share of non-holdout traces used for validation",
    ),
    ("test_ratio", "share of non-holdout traces used for testing"),
    (
        "holdout",
        "whole traces reserved for trace-level evaluation",
    ),
    ("learning_rate", "SGD step size"),
    ("batch_size", "SGD mini-batch size"),
    ("epochs", "training epochs"),
    ("channels", "model input channels (1 or 3)"),
    ("seed", "seed for splitting, training and generation"),
    ("jobs", "worker threads (0 = all cores)"),
    ("alpha", "weight of the first model when two are combined"),
    ("alpha_steps", "intervals in the alpha sweep grid"),
    ("synth_benign_traces", "benign traces to generate"),
    ("synth_malicious_traces", "malicious traces to generate"),
    (
        "synth_packets_per_trace",
        "benign packets per generated trace",
    ),
    ("synth_binary_count", "mapped binaries per generated trace"),
    ("synth_tnt_fraction", "share of TNT packets in benign flow"),
    ("synth_pool_size", "indirect-branch targets per binary"),
    ("synth_motif_count", "distinct loop motifs"),
    ("synth_motif_len_min", "shortest loop motif"),
    ("synth_motif_len_max", "longest loop motif"),
    ("synth_repeats_min", "fewest consecutive motif repeats"),
    ("synth_repeats_max", "most consecutive motif repeats"),
    ("synth_long_tnt_fraction", "share of long TNT packets"),
    (
        "synth_suppressed_fraction",
        "share of TIPs with suppressed targets",
    ),
    ("synth_gadget_count", "TIPs in an injected gadget chain"),
    (
        "synth_attack_tnt_fraction",
        "chance of a TNT between gadgets",
    ),
    (
        "synth_attack_position_min",
        "earliest injection point (fraction of trace)",
    ),
    (
        "synth_attack_position_max",
        "latest injection point (fraction of trace)",
    ),
    ("out", "output directory"),
];

const NOT_ECHOED: &[&str] = &["out", "jobs"];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub m: usize,
    pub threshold: f64,
    pub ratios: SplitRatios,
    pub holdout: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub channels: usize,
    pub seed: u64,
    pub jobs: usize,
    pub alpha: f64,
    pub alpha_steps: usize,
    pub synth: SynthConfig,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        PipelineConfig {
            m: 28,
            threshold: crate::ensemble::DEFAULT_THRESHOLD,
            ratios: SplitRatios::default(),
            holdout: 40,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            channels: train.channels,
            seed: 0,
            jobs: 0,
            alpha: crate::ensemble::DEFAULT_ALPHA,
            alpha_steps: 10,
            synth: SynthConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key} = {value:?}: {e}")))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let b: &mut BenignProfile = &mut self.synth.benign;
        let a: &mut AttackProfile = &mut self.synth.attack;
        match key {
            "m" => self.m = parse_value(key, v)?,
            "threshold" => self.threshold = parse_value(key, v)?,
            "train_ratio" => self.ratios.train = parse_value(key, v)?,
            "val_ratio" => self.ratios.val = parse_value(key, v)?,
            "test_ratio" => self.ratios.test = parse_value(key, v)?,
            "holdout" => self.holdout = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "jobs" => self.jobs = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "alpha_steps" => self.alpha_steps = parse_value(key, v)?,
            "synth_benign_traces" => self.synth.benign_traces = parse_value(key, v)?,
            "synth_malicious_traces" => self.synth.malicious_traces = parse_value(key, v)?,
            "synth_packets_per_trace" => self.synth.packets_per_trace = parse_value(key, v)?,
            "synth_binary_count" => self.synth.binary_count = parse_value(key, v)?,
            "synth_tnt_fraction" => b.tnt_fraction = parse_value(key, v)?,
            "synth_pool_size" => b.pool_size = parse_value(key, v)?,
            "synth_motif_count" => b.motif_count = parse_value(key, v)?,
            "synth_motif_len_min" => b.motif_len.0 = parse_value(key, v)?,
            "synth_motif_len_max" => b.motif_len.1 = parse_value(key, v)?,
            "synth_repeats_min" => b.repeats.0 = parse_value(key, v)?,
            "synth_repeats_max" => b.repeats.1 = parse_value(key, v)?,
            "synth_long_tnt_fraction" => b.long_tnt_fraction = parse_value(key, v)?,
            "synth_suppressed_fraction" => b.suppressed_fraction = parse_value(key, v)?,
            "synth_gadget_count" => a.gadget_count = parse_value(key, v)?,
            "synth_attack_tnt_fraction" => a.tnt_fraction = parse_value(key, v)?,
            "synth_attack_position_min" => a.position.0 = parse_value(key, v)?,
            "synth_attack_position_max" => a.position.1 = parse_value(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.synth.benign;
        let a = &self.synth.attack;
        Some(match key {
            "m" => self.m.to_string(),
            "threshold" => self.threshold.to_string(),
            "train_ratio" => self.ratios.train.to_string(),
            "val_ratio" => self.ratios.val.to_string(),
            "test_ratio" => self.ratios.test.to_string(),
            "holdout" => self.holdout.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "channels" => self.channels.to_string(),
            "seed" => self.seed.to_string(),
            "jobs" => self.jobs.to_string(),
            "alpha" => self.alpha.to_string(),
            "alpha_steps" => self.alpha_steps.to_string(),
            "synth_benign_traces" => self.synth.benign_traces.to_string(),
            "synth_malicious_traces" => self.synth.malicious_traces.to_string(),
            "synth_packets_per_trace" => self.synth.packets_per_trace.to_string(),
            "synth_binary_count" => self.synth.binary_count.to_string(),
            "synth_tnt_fraction" => b.tnt_fraction.to_string(),
            "synth_pool_size" => b.pool_size.to_string(),
            "synth_motif_count" => b.motif_count.to_string(),
            "synth_motif_len_min" => b.motif_len.0.to_string(),
            "synth_motif_len_max" => b.motif_len.1.to_string(),
            "synth_repeats_min" => b.repeats.0.to_string(),
            "synth_repeats_max" => b.repeats.1.to_string(),
            "synth_long_tnt_fraction" => b.long_tnt_fraction.to_string(),
            "synth_suppressed_fraction" => b.suppressed_fraction.to_string(),
            "synth_gadget_count" => a.gadget_count.to_string(),
            "synth_attack_tnt_fraction" => a.tnt_fraction.to_string(),
            "synth_attack_position_min" => a.position.0.to_string(),
            "synth_attack_position_max" => a.position.1.to_string(),
            "out" => self.out.display().to_string(),
            _ => return None,
        })
    }

    /// Applies a `key = value` file; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} is outside [0, 1]", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} is outside [0, 1]", self.alpha));
        }
        if self.alpha_steps == 0 {
            return bad("alpha_steps must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.epochs == 0
        {
            return bad("learning_rate, batch_size and epochs must be positive".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        self.ratios
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut synth = self.synth.clone();
        synth.seed = self.seed;
        synth
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Effective configuration without the keys that do not affect results.
    pub fn echo(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .filter(|(k, _)| !NOT_ECHOED.contains(k))
            .map(|(k, _)| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    fn echo_comment(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS.iter().filter(|(k, _)| !NOT_ECHOED.contains(k)) {
            let _ = writeln!(s, "# {k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            channels: self.channels,
        }
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn command() -> Command {
    let mut cmd = Command::new("cftrace")
        .about("Control-flow trace imaging and exploit detection pipeline")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .help("flat key = value configuration file"),
        );
    for (key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .global(true)
                .value_name("VALUE")
                .help(*help),
        );
    }
    let path = |name: &'static str, help: &'static str| {
        Arg::new(name).required(true).value_name("PATH").help(help)
    };
    let opt = |name: &'static str, help: &'static str| {
        Arg::new(name).long(name).value_name("PATH").help(help)
    };
    cmd.subcommand(
        Command::new("generate").about("write a synthetic corpus and manifest.csv into out"),
    )
    .subcommand(
        Command::new("decode")
            .about("list the packets of a raw trace")
            .arg(path("trace", "raw trace file")),
    )
    .subcommand(
        Command::new("pixelize")
            .about("convert a raw trace to a pixel stream")
            .arg(path("trace", "raw trace file"))
            .arg(path("map", "binary map file")),
    )
    .subcommand(
        Command::new("imagize")
            .about("segment a pixel stream into m x m images")
            .arg(path("pixels", "pixel stream file")),
    )
    .subcommand(
        Command::new("build-dataset")
            .about("label, split and store the images of a manifest")
            .arg(path("manifest", "trace manifest")),
    )
    .subcommand(
        Command::new("train")
            .about("train a behaviour model on out/dataset.*")
            .arg(opt(
                "dataset",
                "directory holding dataset.hnimg and dataset.labels (default: out)",
            )),
    )
    .subcommand(
        Command::new("classify")
            .about("decode, pixelize, segment, predict and aggregate traces")
            .arg(opt("model", "model file").required(true))
            .arg(opt(
                "second-model",
                "second model, combined as alpha * first + (1 - alpha) * second",
            ))
            .arg(opt("manifest", "classify every trace of a manifest"))
            .arg(
                Arg::new("trace")
                    .value_name("TRACE")
                    .requires("map")
                    .help("raw trace file"),
            )
            .arg(Arg::new("map").value_name("MAP").help("binary map file")),
    )
    .subcommand(
        Command::new("evaluate")
            .about("segment and trace metrics for the traces of a manifest")
            .arg(opt("manifest", "labelled trace manifest").required(true))
            .arg(opt("model", "model file"))
            .arg(opt(
                "probabilities",
                "externally produced segment probabilities",
            ))
            .group(
                clap::ArgGroup::new("source")
                    .args(["model", "probabilities"])
                    .required(true),
            ),
    )
    .subcommand(
        Command::new("sweep-alpha")
            .about("accuracy and FPR of the convex combination of two probability files")
            .arg(opt("manifest", "labelled trace manifest").required(true))
            .arg(
                opt(
                    "low",
                    "probabilities of the low-resolution model (alpha = 1)",
                )
                .required(true),
            )
            .arg(
                opt(
                    "high",
                    "probabilities of the high-resolution model (alpha = 0)",
                )
                .required(true),
            ),
    )
}

fn load_config(m: &ArgMatches) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let path = Path::new(path);
        let text = io_stage("config", path, fs::read_to_string(path))?;
        config.apply_text(&text)?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            config.set(key, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let config = load_config(sub)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .stage("threads")?;
    pool.install(|| dispatch(name, sub, &config))
}

fn dispatch(name: &str, m: &ArgMatches, config: &PipelineConfig) -> Result<(), CliError> {
    let out = &config.out;
    io_stage("output", out, fs::create_dir_all(out))?;
    let path = |id: &str| m.get_one::<String>(id).map(PathBuf::from);
    match name {
        "generate" => {
            let manifest =
                generate_corpus(&config.synth_config(), config.m, out).stage("generate")?;
            println!(
                "wrote {} traces to {}",
                manifest.entries.len(),
                out.join("manifest.csv").display()
            );
        }
        "decode" => {
            let trace = path("trace").expect("required");
            let listing = decode_listing(&trace)?;
            let dest = out.join(format!("{}.packets.txt", stem(&trace)));
            io_stage("decode", &dest, fs::write(&dest, listing))?;
            println!("wrote {}", dest.display());
        }
        "pixelize" => {
            let trace = path("trace").expect("required");
            let stream = pixelize_file(&trace, &path("map").expect("required"))?;
            let dest = out.join(format!("{}.pix", stem(&trace)));
            io_stage("pixelize", &dest, fs::write(&dest, &stream.pixels))?;
            println!("wrote {} pixels to {}", stream.len(), dest.display());
        }
        "imagize" => {
            let pixels = path("pixels").expect("required");
            let bytes = io_stage("imagize", &pixels, fs::read(&pixels))?;
            let series =
                segment(&PixelStream::new(stem(&pixels), bytes), config.m).stage("imagize")?;
            let dest = out.join(format!("{}.hnimg", stem(&pixels)));
            ImageBundle::from_gray(config.m, &series.images)
                .save(&dest)
                .stage("imagize")?;
            println!("wrote {} images to {}", series.len(), dest.display());
        }
        "build-dataset" => {
            let (dataset, holdout) = build_dataset(config, &path("manifest").expect("required"))?;
            println!(
                "wrote {} images and {} holdout traces to {}",
                dataset.samples.len(),
                holdout.entries.len(),
                out.display()
            );
        }
        "train" => {
            let dir = path("dataset").unwrap_or_else(|| out.clone());
            let report = train_model(config, &dir)?;
            println!("{}", report.trim_end());
        }
        "classify" => {
            let model = load_model(&path("model").expect("required"))?;
            let second = path("second-model").map(|p| load_model(&p)).transpose()?;
            let traces: Vec<(String, PathBuf, PathBuf)> =
                match (path("manifest"), path("trace"), path("map")) {
                    (Some(manifest), _, _) => Manifest::load(&manifest)
                        .stage("manifest")?
                        .entries
                        .into_iter()
                        .map(|e| (e.trace_id, e.trace_path, e.map_path))
                        .collect(),
                    (None, Some(trace), Some(map)) => vec![(stem(&trace), trace, map)],
                    _ => {
                        return Err(CliError::Config(
                            "classify needs --manifest or TRACE MAP".into(),
                        ))
                    }
                };
            let (verdicts, probs) = classify(config, &model, second.as_ref(), &traces)?;
            let probs: Vec<SegmentProbability> = probs.into_iter().flatten().collect();
            let dest = out.join("probabilities.csv");
            write_report(
                &dest,
                "classify",
                config,
                &model::probabilities_to_text(&probs),
            )?;
            let text = verdicts_to_text(&verdicts);
            write_report(&out.join("verdicts.csv"), "classify", config, &text)?;
            print!("{text}");
        }
        "evaluate" => {
            let manifest =
                Manifest::load(&path("manifest").expect("required")).stage("manifest")?;
            let report = match (path("model"), path("probabilities")) {
                (Some(model), _) => evaluate_model(config, &load_model(&model)?, &manifest)?,
                (None, Some(probs)) => {
                    let probs = import_probabilities(&probs).stage("evaluate")?;
                    evaluate_probabilities(config, &manifest, &probs)?
                }
                (None, None) => unreachable!("argument group is required"),
            };
            let dest = out.join(METRICS_FILE);
            io_stage("evaluate", &dest, fs::write(&dest, report.to_json()))?;
            println!(
                "segments: accuracy {:.4} fpr {:.4}; traces: accuracy {:.4} fpr {:.4}; wrote {}",
                report.segments.accuracy,
                report.segments.fpr,
                report.traces.accuracy,
                report.traces.fpr,
                dest.display()
            );
        }
        "sweep-alpha" => {
            let manifest =
                Manifest::load(&path("manifest").expect("required")).stage("manifest")?;
            let low = import_probabilities(&path("low").expect("required")).stage("sweep-alpha")?;
            let high =
                import_probabilities(&path("high").expect("required")).stage("sweep-alpha")?;
            let text = sweep_report(config, &manifest, &low, &high)?;
            write_report(&out.join("sweep.csv"), "sweep-alpha", config, &text)?;
            print!("{text}");
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into())
}

fn write_report(
    dest: &Path,
    stage: &'static str,
    config: &PipelineConfig,
    body: &str,
) -> Result<(), CliError> {
    let text = format!("{}{body}", config.echo_comment());
    io_stage(stage, dest, fs::write(dest, text))
}

fn load_model(path: &Path) -> Result<BehaviorModel, CliError> {
    BehaviorModel::load(path).stage("load model")
}

/// One line per packet: byte offset, packet, and the reconstructed target.
pub fn decode_listing(trace: &Path) -> Result<String, CliError> {
    let bytes = io_stage("decode", trace, fs::read(trace))?;
    let mut out = String::new();
    for d in PacketReader::new(&bytes) {
        let d = d.stage("decode")?;
        let _ = write!(out, "{:#08x} {}", d.offset, d.packet);
        if let Some(t) = d.target_ip {
            let _ = write!(out, " -> {t:#x}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn pixelize_file(trace: &Path, map: &Path) -> Result<PixelStream, CliError> {
    let bytes = io_stage("decode", trace, fs::read(trace))?;
    let packets = decode_stream(&bytes).stage("decode")?;
    let map = io_stage("pixelize", map, BinaryMap::load(map))?;
    pixelize_trace(stem(trace), &packets, &map).stage("pixelize")
}

/// decode, pixelize and segment one trace under `trace_id`.
pub fn image_trace(
    trace_id: &str,
    trace: &Path,
    map: &Path,
    side: usize,
) -> Result<ImageSeries, CliError> {
    let mut stream = pixelize_file(trace, map)?;
    stream.source_trace_id = trace_id.to_string();
    segment(&stream, side).stage("segment")
}

fn labeled_traces(
    config: &PipelineConfig,
    manifest: &Manifest,
) -> Result<Vec<LabeledTrace>, CliError> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let series = image_trace(&e.trace_id, &e.trace_path, &e.map_path, config.m)?;
            LabeledTrace::new(e.label, e.attack_index, series).stage("label")
        })
        .collect()
}

/// Writes the dataset files and the holdout manifest into `config.out`.
pub fn build_dataset(
    config: &PipelineConfig,
    manifest_path: &Path,
) -> Result<(LabeledDataset, Manifest), CliError> {
    let manifest = Manifest::load(manifest_path).stage("manifest")?;
    let traces = labeled_traces(config, &manifest)?;
    let (dataset, held) =
        split_dataset(&traces, config.ratios, config.holdout, config.seed).stage("split")?;
    let out = &config.out;
    dataset
        .save(&out.join(DATASET_IMAGES), &out.join(DATASET_LABELS))
        .stage("build-dataset")?;

    let by_id: BTreeMap<&str, &ManifestEntry> = manifest
        .entries
        .iter()
        .map(|e| (e.trace_id.as_str(), e))
        .collect();
    let mut holdout = Manifest::default();
    for t in &held {
        let e = by_id[t.trace_id.as_str()];
        holdout.entries.push(ManifestEntry {
            trace_path: relative_to(&e.trace_path, out)?,
            map_path: relative_to(&e.map_path, out)?,
            ..e.clone()
        });
    }
    let text = format!("{}{}", config.echo_comment(), holdout.to_text());
    let dest = out.join(HOLDOUT_MANIFEST);
    io_stage("build-dataset", &dest, fs::write(&dest, text))?;
    Ok((dataset, holdout))
}

/// `target` expressed relative to directory `base`.
fn relative_to(target: &Path, base: &Path) -> Result<PathBuf, CliError> {
    let target = io_stage("paths", target, target.canonicalize())?;
    let base = io_stage("paths", base, base.canonicalize())?;
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &t[common..] {
        rel.push(c);
    }
    Ok(rel)
}

/// Trains on `dir/dataset.*`, writes `model.hnmdl` and `train_report.txt`
/// into `config.out` and returns the report text.
pub fn train_model(config: &PipelineConfig, dir: &Path) -> Result<String, CliError> {
    let dataset = LabeledDataset::load(&dir.join(DATASET_IMAGES), &dir.join(DATASET_LABELS))
        .stage("load dataset")?;
    let (model, report) = model::train(&dataset, &config.train_config()).stage("train")?;
    model.save(&config.out.join(MODEL_FILE)).stage("train")?;

    let mut body = String::new();
    let _ = writeln!(body, "train_samples = {}", report.train_samples);
    let _ = writeln!(body, "val_samples = {}", report.val_samples);
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(body, "epoch {} loss = {loss}", i + 1);
    }
    if let Some(acc) = report.val_accuracy {
        let _ = writeln!(body, "val_accuracy = {acc}");
    }
    write_report(&config.out.join("train_report.txt"), "train", config, &body)?;
    Ok(body)
}

/// Per-trace verdicts and segment probabilities, in input order. With a
/// second model the segment probabilities are `alpha * first + (1 - alpha) * second`.
pub fn classify(
    config: &PipelineConfig,
    model: &BehaviorModel,
    second: Option<&BehaviorModel>,
    traces: &[(String, PathBuf, PathBuf)],
) -> Result<(Vec<EnsembleVerdict>, Vec<Vec<SegmentProbability>>), CliError> {
    let results: Vec<(EnsembleVerdict, Vec<SegmentProbability>)> = traces
        .par_iter()
        .map(|(id, trace, map)| {
            let series = image_trace(id, trace, map, config.m)?;
            let mut probs = predict(model, &series).stage("predict")?;
            if let Some(second) = second {
                let high = predict(second, &series).stage("predict")?;
                probs = combine_segments(&probs, &high, config.alpha).stage("combine")?;
            }
            let verdict = aggregate(&probs, config.threshold).stage("aggregate")?;
            Ok((verdict, probs))
        })
        .collect::<Result<_, CliError>>()?;
    Ok(results.into_iter().unzip())
}

fn labels_by_trace(manifest: &Manifest) -> BTreeMap<&str, (Label, Option<usize>)> {
    manifest
        .entries
        .iter()
        .map(|e| (e.trace_id.as_str(), (e.label, e.attack_index)))
        .collect()
}

fn segment_label(label: (Label, Option<usize>), index: usize) -> Label {
    match label.1 {
        Some(k) if index >= k => Label::Malicious,
        _ => Label::Benign,
    }
}

pub fn evaluate_model(
    config: &PipelineConfig,
    model: &BehaviorModel,
    manifest: &Manifest,
) -> Result<EvaluationReport, CliError> {
    let traces: Vec<_> = manifest
        .entries
        .iter()
        .map(|e| (e.trace_id.clone(), e.trace_path.clone(), e.map_path.clone()))
        .collect();
    let (_, probs) = classify(config, model, None, &traces)?;
    evaluate_probabilities(config, manifest, &probs.concat())
}

/// Metrics for externally produced (or previously exported) segment
/// probabilities of the manifest's traces.
pub fn evaluate_probabilities(
    config: &PipelineConfig,
    manifest: &Manifest,
    probs: &[SegmentProbability],
) -> Result<EvaluationReport, CliError> {
    let labels = labels_by_trace(manifest);
    let mut grouped: BTreeMap<&str, Vec<SegmentProbability>> = BTreeMap::new();
    let mut segment_preds = Vec::with_capacity(probs.len());
    for p in probs {
        let Some(&label) = labels.get(p.trace_id.as_str()) else {
            return Err(CliError::Stage {
                stage: "evaluate",
                source: format!("trace {} is not in the manifest", p.trace_id).into(),
            });
        };
        segment_preds.push(Prediction {
            p: p.p_malicious,
            label: segment_label(label, p.segment_index),
        });
        grouped
            .entry(p.trace_id.as_str())
            .or_default()
            .push(p.clone());
    }
    let mut trace_preds = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let segs = grouped
            .get(e.trace_id.as_str())
            .ok_or_else(|| CliError::Stage {
                stage: "evaluate",
                source: format!("no probabilities for trace {}", e.trace_id).into(),
            })?;
        let verdict = aggregate(segs, config.threshold).stage("aggregate")?;
        trace_preds.push(Prediction {
            p: verdict.p_bar,
            label: e.label,
        });
    }
    EvaluationReport::build(
        config.echo(),
        &segment_preds,
        &trace_preds,
        config.threshold,
    )
    .stage("evaluate")
}

/// `alpha,accuracy,fpr` rows followed by the Pareto set as comments.
pub fn sweep_report(
    config: &PipelineConfig,
    manifest: &Manifest,
    low: &[SegmentProbability],
    high: &[SegmentProbability],
) -> Result<String, CliError> {
    let labels = labels_by_trace(manifest);
    let seg_labels = low
        .iter()
        .map(|p| {
            labels
                .get(p.trace_id.as_str())
                .map(|&l| segment_label(l, p.segment_index))
                .ok_or_else(|| CliError::Stage {
                    stage: "sweep-alpha",
                    source: format!("trace {} is not in the manifest", p.trace_id).into(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = sweep_alpha(
        low,
        high,
        &seg_labels,
        &alpha_grid(config.alpha_steps),
        config.threshold,
    )
    .stage("sweep-alpha")?;
    let mut text = String::from("# alpha,accuracy,fpr\n");
    text.push_str(&report.to_text());
    let pareto: Vec<String> = report.pareto.iter().map(f64::to_string).collect();
    let _ = writeln!(text, "# pareto = {}", pareto.join(" "));
    let _ = writeln!(
        text,
        "# recommended = [{}, {}]",
        report.recommended.0, report.recommended.1
    );
    Ok(text)
}
