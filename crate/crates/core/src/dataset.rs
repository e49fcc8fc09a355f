//! Labelled per-segment training data built from labelled traces.
//!
//! A benign trace labels every segment benign. A malicious trace carries the
//! index `k` of the first attacked segment: segments before `k` are benign,
//! segments from `k` on are malicious.
//!
//! Splits are made per trace so that neighbouring segments of one trace never
//! land in different splits.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imager::{GrayImage, ImageBundle, ImageError, ImageSeries};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malicious trace {0} has no attack index")]
    MissingAttackIndex(String),
    #[error("benign trace {0} has an attack index")]
    UnexpectedAttackIndex(String),
    #[error("trace {trace}: attack index {index} is outside 0..{segments}")]
    AttackIndexOutOfRange {
        trace: String,
        index: usize,
        segments: usize,
    },
    #[error(
        "need at least {needed} traces for {holdout} held out plus one per split, got {available}"
    )]
    InsufficientTraces {
        needed: usize,
        holdout: usize,
        available: usize,
    },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("{file} line {line}: {reason}")]
    Syntax {
        file: &'static str,
        line: usize,
        reason: String,
    },
    #[error("label file has {labels} rows but the image file has {images} images")]
    CountMismatch { labels: usize, images: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    /// Class index; malicious is the positive class 1.
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malicious => 1,
        }
    }

    pub fn is_malicious(self) -> bool {
        self == Label::Malicious
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "benign" => Ok(Label::Benign),
            "malicious" => Ok(Label::Malicious),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub trace_id: String,
    pub label: Label,
    pub attack_index: Option<usize>,
    pub series: ImageSeries,
}

impl LabeledTrace {
    pub fn new(
        label: Label,
        attack_index: Option<usize>,
        series: ImageSeries,
    ) -> Result<Self, DatasetError> {
        let trace = LabeledTrace {
            trace_id: series.trace_id.clone(),
            label,
            attack_index,
            series,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        match (self.label, self.attack_index) {
            (Label::Benign, None) => Ok(()),
            (Label::Benign, Some(_)) => {
                Err(DatasetError::UnexpectedAttackIndex(self.trace_id.clone()))
            }
            (Label::Malicious, None) => {
                Err(DatasetError::MissingAttackIndex(self.trace_id.clone()))
            }
            (Label::Malicious, Some(k)) if k >= self.series.len() => {
                Err(DatasetError::AttackIndexOutOfRange {
                    trace: self.trace_id.clone(),
                    index: k,
                    segments: self.series.len(),
                })
            }
            (Label::Malicious, Some(_)) => Ok(()),
        }
    }

    /// Label of segment `index` under the attack-onset rule.
    pub fn segment_label(&self, index: usize) -> Label {
        match self.attack_index {
            Some(k) if index >= k => Label::Malicious,
            _ => Label::Benign,
        }
    }
}

pub fn label_images(trace: &LabeledTrace) -> Result<Vec<(GrayImage, Label)>, DatasetError> {
    trace.validate()?;
    Ok(trace
        .series
        .images
        .iter()
        .enumerate()
        .map(|(i, image)| (image.clone(), trace.segment_label(i)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: Label,
    pub trace_id: String,
    pub segment_index: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.split(split).filter(|s| s.label == label).count()
    }

    /// Side of the images, if any.
    pub fn image_side(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.side())
    }

    /// Writes the `HNIMG1` image file and the `trace_id,segment_index,label,split`
    /// sidecar.
    pub fn save(&self, images: &Path, labels: &Path) -> Result<(), DatasetError> {
        let side = self.image_side().unwrap_or(1);
        ImageBundle::from_gray(side, self.samples.iter().map(|s| &s.image)).save(images)?;
        fs::write(labels, self.labels_text())?;
        Ok(())
    }

    pub fn labels_text(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.trace_id, s.segment_index, s.label, s.split
            ));
        }
        out
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self, DatasetError> {
        let bundle = ImageBundle::load(images)?;
        let gray = bundle.to_gray()?;
        let text = fs::read_to_string(labels)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let syntax = |reason: String| DatasetError::Syntax {
                file: "label file",
                line: i + 1,
                reason,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(syntax(format!("expected 4 fields, got {}", f.len())));
            }
            let segment_index = f[1]
                .parse()
                .map_err(|e| syntax(format!("segment index: {e}")))?;
            rows.push((
                f[0].to_string(),
                segment_index,
                f[2].parse::<Label>().map_err(syntax)?,
                f[3].parse::<Split>().map_err(syntax)?,
            ));
        }
        if rows.len() != gray.len() {
            return Err(DatasetError::CountMismatch {
                labels: rows.len(),
                images: gray.len(),
            });
        }
        let samples = rows
            .into_iter()
            .zip(gray)
            .map(|((trace_id, segment_index, label, split), image)| Sample {
                image,
                label,
                trace_id,
                segment_index,
                split,
            })
            .collect();
        Ok(LabeledDataset { samples })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let r = [self.train, self.val, self.test];
        let positive = r.iter().all(|&x| x.is_finite() && x > 0.0);
        if !positive || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(r));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `total` items, train winning ties.
    /// Every split receives at least one item when `total >= 3`.
    pub fn apportion(&self, total: usize) -> [usize; 3] {
        let ratios = [self.train, self.val, self.test];
        let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
        let mut sizes: [usize; 3] = std::array::from_fn(|i| quotas[i].floor() as usize);
        let assigned: usize = sizes.iter().sum();
        let mut order = [0usize, 1, 2];
        // Stable sort keeps train ahead of val ahead of test on equal remainders.
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra)
        });
        for &i in order.iter().take(total.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        if total >= 3 {
            for i in 0..3 {
                if sizes[i] == 0 {
                    let donor = (0..3)
                        .max_by_key(|&j| (sizes[j], std::cmp::Reverse(j)))
                        .unwrap();
                    sizes[donor] -= 1;
                    sizes[i] = 1;
                }
            }
        }
        sizes
    }
}

/// Reserves `holdout` whole traces for trace-level evaluation and splits the
/// images of the rest into train/val/test by trace. Pure in its inputs.
pub fn split_dataset(
    traces: &[LabeledTrace],
    ratios: SplitRatios,
    holdout: usize,
    seed: u64,
) -> Result<(LabeledDataset, Vec<LabeledTrace>), DatasetError> {
    ratios.validate()?;
    let needed = holdout + 3;
    if traces.len() < needed {
        return Err(DatasetError::InsufficientTraces {
            needed,
            holdout,
            available: traces.len(),
        });
    }
    for t in traces {
        t.validate()?;
    }

    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (held, rest) = order.split_at(holdout);

    let [n_train, n_val, _] = ratios.apportion(rest.len());
    let mut assignment: Vec<Option<Split>> = vec![None; traces.len()];
    for (pos, &t) in rest.iter().enumerate() {
        assignment[t] = Some(if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }

    let mut samples = Vec::new();
    for (trace, split) in traces.iter().zip(&assignment) {
        let Some(split) = *split else { continue };
        for (segment_index, (image, label)) in label_images(trace)?.into_iter().enumerate() {
            samples.push(Sample {
                image,
                label,
                trace_id: trace.trace_id.clone(),
                segment_index,
                split,
            });
        }
    }

    let mut held: Vec<usize> = held.to_vec();
    held.sort_unstable();
    let held_out = held.into_iter().map(|i| traces[i].clone()).collect();
    Ok((LabeledDataset { samples }, held_out))
}

/// One line of a trace manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub trace_id: String,
    pub label: Label,
    pub attack_index: Option<usize>,
    pub trace_path: PathBuf,
    pub map_path: PathBuf,
}

/// Trace manifest: `trace_id,label,attack_index_or_dash,raw_trace_path,binary_map_path`.
/// Relative paths are resolved against the manifest's directory on load.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: String| DatasetError::Syntax {
                file: "manifest",
                line: i + 1,
                reason,
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(syntax(format!("expected 5 fields, got {}", f.len())));
            }
            let label: Label = f[1].parse().map_err(syntax)?;
            let attack_index = match f[2] {
                "-" => None,
                k => Some(
                    k.parse()
                        .map_err(|e| syntax(format!("attack index {k:?}: {e}")))?,
                ),
            };
            match (label, attack_index) {
                (Label::Malicious, None) => {
                    return Err(DatasetError::MissingAttackIndex(f[0].into()))
                }
                (Label::Benign, Some(_)) => {
                    return Err(DatasetError::UnexpectedAttackIndex(f[0].into()))
                }
                _ => {}
            }
            entries.push(ManifestEntry {
                trace_id: f[0].to_string(),
                label,
                attack_index,
                trace_path: f[3].into(),
                map_path: f[4].into(),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn to_text(&self) -> String {
        let mut out =
            String::from("# trace_id,label,attack_index,raw_trace_path,binary_map_path\n");
        for e in &self.entries {
            let k = e
                .attack_index
                .map_or_else(|| "-".to_string(), |k| k.to_string());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.trace_id,
                e.label,
                k,
                e.trace_path.display(),
                e.map_path.display()
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let mut manifest = Manifest::parse(&fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for e in &mut manifest.entries {
            e.trace_path = dir.join(&e.trace_path);
            e.map_path = dir.join(&e.map_path);
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imager::segment;
    use crate::pixel::PixelStream;

    fn trace(id: &str, segments: usize, label: Label, k: Option<usize>) -> LabeledTrace {
        let stream = PixelStream::new(id, vec![id.len() as u8; segments * 4]);
        LabeledTrace::new(label, k, segment(&stream, 2).unwrap()).unwrap()
    }

    fn labels(t: &LabeledTrace) -> Vec<Label> {
        label_images(t)
            .unwrap()
            .into_iter()
            .map(|(_, l)| l)
            .collect()
    }

    #[test]
    fn labelling_rule() {
        use Label::{Benign as B, Malicious as M};
        assert_eq!(labels(&trace("b", 5, B, None)), vec![B; 5]);
        assert_eq!(labels(&trace("m", 5, M, Some(0))), vec![M; 5]);
        assert_eq!(labels(&trace("m", 5, M, Some(3))), vec![B, B, B, M, M]);
    }

    #[test]
    fn trace_validation() {
        let series = segment(&PixelStream::new("x", vec![1; 8]), 2).unwrap();
        assert!(matches!(
            LabeledTrace::new(Label::Malicious, None, series.clone()),
            Err(DatasetError::MissingAttackIndex(_))
        ));
        assert!(matches!(
            LabeledTrace::new(Label::Benign, Some(0), series.clone()),
            Err(DatasetError::UnexpectedAttackIndex(_))
        ));
        assert!(matches!(
            LabeledTrace::new(Label::Malicious, Some(2), series),
            Err(DatasetError::AttackIndexOutOfRange {
                index: 2,
                segments: 2,
                ..
            })
        ));
        let mut t = trace("m", 3, Label::Malicious, Some(1));
        t.attack_index = None;
        assert!(matches!(
            label_images(&t),
            Err(DatasetError::MissingAttackIndex(_))
        ));
    }

    #[test]
    fn apportion_largest_remainder() {
        let r = SplitRatios::default();
        assert_eq!(r.apportion(8), [6, 1, 1]);
        assert_eq!(r.apportion(10), [8, 1, 1]);
        assert_eq!(r.apportion(3), [1, 1, 1]);
        // 0.5/0.25/0.25 of 2: val and test tie on remainder, val comes first.
        let half = SplitRatios {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        assert_eq!(half.apportion(2), [1, 1, 0]);
        assert_eq!(half.apportion(5), [3, 1, 1]);
        for total in 3..200 {
            let s = r.apportion(total);
            assert_eq!(s.iter().sum::<usize>(), total);
            assert!(s.iter().all(|&x| x >= 1));
        }
    }

    #[test]
    fn split_by_trace() {
        let traces: Vec<_> = (0..10)
            .map(|i| {
                let label = if i % 2 == 0 {
                    Label::Benign
                } else {
                    Label::Malicious
                };
                trace(&format!("t{i}"), 2 + i, label, (i % 2 == 1).then_some(1))
            })
            .collect();
        let (ds, held) = split_dataset(&traces, SplitRatios::default(), 2, 42).unwrap();
        assert_eq!(held.len(), 2);
        let mut split_of = std::collections::HashMap::new();
        for s in &ds.samples {
            let prev = split_of.insert(s.trace_id.clone(), s.split);
            assert!(
                prev.is_none() || prev == Some(s.split),
                "trace spans splits"
            );
        }
        assert_eq!(split_of.len(), 8);
        let count = |sp| split_of.values().filter(|&&v| v == sp).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (6, 1, 1)
        );
        for h in &held {
            assert!(!split_of.contains_key(&h.trace_id));
        }

        let (again, held_again) = split_dataset(&traces, SplitRatios::default(), 2, 42).unwrap();
        assert_eq!(again, ds);
        assert_eq!(held_again, held);

        assert!(matches!(
            split_dataset(&traces, SplitRatios::default(), 10, 42),
            Err(DatasetError::InsufficientTraces { .. })
        ));
        assert!(matches!(
            split_dataset(
                &traces,
                SplitRatios {
                    train: 0.5,
                    val: 0.5,
                    test: 0.1
                },
                2,
                42
            ),
            Err(DatasetError::InvalidRatios(_))
        ));
    }

    #[test]
    fn manifest_format() {
        let text = "# header\nb0,benign,-,traces/b0.pt,maps/b0.map\nm0,malicious,3,traces/m0.pt,maps/m0.map\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].attack_index, Some(3));
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(matches!(
            Manifest::parse("m0,malicious,-,a,b"),
            Err(DatasetError::MissingAttackIndex(_))
        ));
        assert!(matches!(
            Manifest::parse("m0,evil,-,a,b"),
            Err(DatasetError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn dataset_files_round_trip() {
        let traces: Vec<_> = (0..5)
            .map(|i| trace(&format!("t{i}"), 3, Label::Benign, None))
            .collect();
        let (ds, _) = split_dataset(&traces, SplitRatios::default(), 1, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("d.hnimg"), dir.path().join("d.labels"));
        ds.save(&img, &lab).unwrap();
        assert_eq!(LabeledDataset::load(&img, &lab).unwrap(), ds);
        fs::write(&lab, "t0,0,benign,train\n").unwrap();
        assert!(matches!(
            LabeledDataset::load(&img, &lab),
            Err(DatasetError::CountMismatch { .. })
        ));
    }
}
