//! Seeded synthetic traces: benign control flow with recurring structure and
//! malicious traces that end in a dense chain of gadget transfers.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)` with a
//! per-purpose stream selected by `set_stream`:
//!
//! | stream            | drives                                           |
//! |-------------------|--------------------------------------------------|
//! | `u64::MAX`        | application structure: target pools and motifs   |
//! | `2 * index`       | benign control flow and load bases of trace `index` |
//! | `2 * index + 1`   | attack position and gadget chain of trace `index`  |
//!
//! A corpus is therefore identical on every platform for a given config, and
//! a malicious trace with zero gadgets is byte-identical to the benign trace
//! with the same index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{
    encode_stream, reconstruct_ip, DecoderState, LongTnt, PtPacket, ShortTnt, TipPacket,
    LONG_TNT_MAX_BRANCHES, SHORT_TNT_MAX_BRANCHES,
};
use crate::dataset::{DatasetError, Label, Manifest, ManifestEntry};
use crate::imager::segment_count;
use crate::pixel::{pixel_count, BinaryMap, MapEntry};

/// Size of every synthetic binary's mapping.
pub const BINARY_SIZE: u64 = 1 << 20;
const BASE_REGION: u64 = 0x0000_7ff0_0000_0000;
const BASE_STRIDE: u64 = 0x1000_0000;
const BASE_ALIGN: u64 = 0x1_0000;
const STRUCTURE_STREAM: u64 = u64::MAX;
/// Mean number of consecutive benign TIPs.
const MEAN_TIP_RUN: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenignProfile {
    /// Stationary fraction of packets that are TNT.
    pub tnt_fraction: f64,
    /// Distinct indirect-branch targets per binary.
    pub pool_size: usize,
    /// Number of loop motifs shared by all traces.
    pub motif_count: usize,
    /// Inclusive range of motif lengths in branches.
    pub motif_len: (usize, usize),
    /// Inclusive range of consecutive repeats of one motif.
    pub repeats: (usize, usize),
    /// Probability that a TNT packet uses the long form.
    pub long_tnt_fraction: f64,
    /// Probability that a TIP is emitted with its target suppressed.
    pub suppressed_fraction: f64,
}

impl Default for BenignProfile {
    fn default() -> Self {
        BenignProfile {
            tnt_fraction: 0.7,
            pool_size: 24,
            motif_count: 6,
            motif_len: (4, 16),
            repeats: (1, 8),
            long_tnt_fraction: 0.3,
            suppressed_fraction: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackProfile {
    /// TIPs in the injected chain.
    pub gadget_count: usize,
    /// Probability of a short TNT between two gadgets.
    pub tnt_fraction: f64,
    /// Injection point as a fraction of the benign packet count.
    pub position: (f64, f64),
}

impl Default for AttackProfile {
    fn default() -> Self {
        AttackProfile {
            gadget_count: 2000,
            tnt_fraction: 0.05,
            position: (0.1, 0.35),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub benign_traces: usize,
    pub malicious_traces: usize,
    pub packets_per_trace: usize,
    pub binary_count: usize,
    pub benign: BenignProfile,
    pub attack: AttackProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            benign_traces: 100,
            malicious_traces: 100,
            packets_per_trace: 5000,
            binary_count: 4,
            benign: BenignProfile::default(),
            attack: AttackProfile::default(),
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SynthError::InvalidConfig(format!(
            "{name} = {v} is outside [0, 1]"
        )))
    }
}

fn check_count(name: &str, v: usize) -> Result<(), SynthError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(SynthError::InvalidConfig(format!(
            "{name} must be at least 1"
        )))
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: (T, T)) -> Result<(), SynthError> {
    if r.0 <= r.1 {
        Ok(())
    } else {
        Err(SynthError::InvalidConfig(format!(
            "{name} range {r:?} is reversed"
        )))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let b = &self.benign;
        let a = &self.attack;
        check_fraction("tnt_fraction", b.tnt_fraction)?;
        check_fraction("long_tnt_fraction", b.long_tnt_fraction)?;
        check_fraction("suppressed_fraction", b.suppressed_fraction)?;
        check_fraction("attack tnt_fraction", a.tnt_fraction)?;
        check_fraction("attack position start", a.position.0)?;
        check_fraction("attack position end", a.position.1)?;
        check_range("attack position", a.position)?;
        check_count(
            "benign_traces + malicious_traces",
            self.benign_traces + self.malicious_traces,
        )?;
        check_count("packets_per_trace", self.packets_per_trace)?;
        check_count("binary_count", self.binary_count)?;
        check_count("pool_size", b.pool_size)?;
        check_count("motif_count", b.motif_count)?;
        check_count("motif length", b.motif_len.0)?;
        check_count("repeats", b.repeats.0)?;
        check_range("motif length", b.motif_len)?;
        check_range("repeats", b.repeats)?;
        if self.binary_count > u8::MAX as usize {
            return Err(SynthError::InvalidConfig(format!(
                "binary_count {} exceeds {}",
                self.binary_count,
                u8::MAX
            )));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Structure shared by every trace of a corpus: per-binary target offsets and
/// branch motifs.
struct Application {
    pools: Vec<Vec<u64>>,
    motifs: Vec<Vec<bool>>,
}

impl Application {
    fn new(config: &SynthConfig) -> Self {
        let mut rng = rng_for(config.seed, STRUCTURE_STREAM);
        let b = &config.benign;
        let pools = (0..config.binary_count)
            .map(|_| {
                (0..b.pool_size)
                    .map(|_| rng.gen_range(0..BINARY_SIZE))
                    .collect()
            })
            .collect();
        let motifs = (0..b.motif_count)
            .map(|_| {
                let len = rng.gen_range(b.motif_len.0..=b.motif_len.1);
                (0..len).map(|_| rng.gen_bool(0.5)).collect()
            })
            .collect();
        Application { pools, motifs }
    }
}

/// Per-trace load bases: binary `i` sits in its own stride with a random
/// aligned slide, so mappings never overlap.
fn binary_map(config: &SynthConfig, rng: &mut ChaCha8Rng) -> BinaryMap {
    let slots = (BASE_STRIDE - BINARY_SIZE) / BASE_ALIGN;
    let entries = (0..config.binary_count)
        .map(|i| {
            let base = BASE_REGION + i as u64 * BASE_STRIDE + rng.gen_range(0..slots) * BASE_ALIGN;
            MapEntry {
                id: (i + 1) as u8,
                base,
                end: base + BINARY_SIZE,
                name: format!("module{}.dll", i + 1),
            }
        })
        .collect();
    BinaryMap::new(entries).expect("synthetic mappings are disjoint")
}

struct TipEncoder {
    last_ip: u64,
}

impl TipEncoder {
    fn tip(&mut self, target: u64) -> PtPacket {
        let packet = TipPacket::compress(target, self.last_ip);
        self.last_ip = target;
        packet.into()
    }
}

fn benign_packets(
    config: &SynthConfig,
    app: &Application,
    map: &BinaryMap,
    rng: &mut ChaCha8Rng,
    enc: &mut TipEncoder,
) -> Vec<PtPacket> {
    let b = &config.benign;
    let f = b.tnt_fraction;
    // Two-state chain whose stationary TNT share is `f`.
    let leave_tip = 1.0 / MEAN_TIP_RUN;
    let leave_tnt = if f >= 1.0 {
        0.0
    } else {
        (leave_tip * (1.0 - f) / f).min(1.0)
    };
    let mut in_tnt = f > 0.0;
    let mut branches: Vec<bool> = Vec::new();
    let mut packets = Vec::with_capacity(config.packets_per_trace);

    while packets.len() < config.packets_per_trace {
        if in_tnt {
            let long = rng.gen_bool(b.long_tnt_fraction);
            let width = if long {
                LONG_TNT_MAX_BRANCHES
            } else {
                SHORT_TNT_MAX_BRANCHES
            };
            while branches.len() < width {
                let motif = &app.motifs[rng.gen_range(0..app.motifs.len())];
                for _ in 0..rng.gen_range(b.repeats.0..=b.repeats.1) {
                    branches.extend_from_slice(motif);
                }
            }
            let taken: Vec<bool> = branches.drain(..width).collect();
            packets.push(if long {
                LongTnt::from_branches(&taken)
                    .expect("width within limit")
                    .into()
            } else {
                ShortTnt::from_branches(&taken)
                    .expect("width within limit")
                    .into()
            });
            in_tnt = !rng.gen_bool(leave_tnt);
        } else {
            if rng.gen_bool(b.suppressed_fraction) {
                packets.push(TipPacket::suppressed().into());
            } else {
                let bin = rng.gen_range(0..map.entries().len());
                let pool = &app.pools[bin];
                let target = map.entries()[bin].base + pool[rng.gen_range(0..pool.len())];
                packets.push(enc.tip(target));
            }
            in_tnt = f > 0.0 && rng.gen_bool(leave_tip);
        }
    }
    packets
}

/// A benign trace's packets and the mapping its TIP targets resolve in.
pub fn benign_trace(
    config: &SynthConfig,
    trace_index: usize,
) -> Result<(Vec<PtPacket>, BinaryMap), SynthError> {
    config.validate()?;
    let app = Application::new(config);
    Ok(benign_with(config, &app, trace_index))
}

fn benign_with(
    config: &SynthConfig,
    app: &Application,
    trace_index: usize,
) -> (Vec<PtPacket>, BinaryMap) {
    let mut rng = rng_for(config.seed, 2 * trace_index as u64);
    let map = binary_map(config, &mut rng);
    let mut enc = TipEncoder { last_ip: 0 };
    let packets = benign_packets(config, app, &map, &mut rng, &mut enc);
    (packets, map)
}

pub fn generate_benign(
    config: &SynthConfig,
    trace_index: usize,
) -> Result<(Vec<u8>, BinaryMap), SynthError> {
    let (packets, map) = benign_trace(config, trace_index)?;
    Ok((encode_stream(&packets), map))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaliciousTrace {
    pub bytes: Vec<u8>,
    pub map: BinaryMap,
    /// Index of the first injected packet.
    pub attack_packet: usize,
    /// Pixel offset of the first injected packet.
    pub attack_pixel: usize,
    /// Segment containing `attack_pixel` for the requested side.
    pub attack_index: usize,
}

pub fn malicious_trace(
    config: &SynthConfig,
    trace_index: usize,
) -> Result<(Vec<PtPacket>, BinaryMap, usize), SynthError> {
    config.validate()?;
    let app = Application::new(config);
    Ok(malicious_with(config, &app, trace_index))
}

fn malicious_with(
    config: &SynthConfig,
    app: &Application,
    trace_index: usize,
) -> (Vec<PtPacket>, BinaryMap, usize) {
    let (mut packets, map) = benign_with(config, app, trace_index);
    let a = &config.attack;
    let mut rng = rng_for(config.seed, 2 * trace_index as u64 + 1);
    let frac = if a.position.0 < a.position.1 {
        rng.gen_range(a.position.0..=a.position.1)
    } else {
        a.position.0
    };
    let at = ((frac * packets.len() as f64).floor() as usize).min(packets.len());
    if a.gadget_count == 0 {
        return (packets, map, at);
    }

    packets.truncate(at);
    let mut state = DecoderState::new();
    for p in &packets {
        if let PtPacket::Tip(tip) = p {
            let _ = reconstruct_ip(tip, &mut state);
        }
    }
    let mut enc = TipEncoder {
        last_ip: state.last_ip(),
    };
    let entries = map.entries();
    for _ in 0..a.gadget_count {
        if rng.gen_bool(a.tnt_fraction) {
            let n = rng.gen_range(1..=SHORT_TNT_MAX_BRANCHES);
            let taken: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            packets.push(
                ShortTnt::from_branches(&taken)
                    .expect("width within limit")
                    .into(),
            );
        }
        let entry = &entries[rng.gen_range(0..entries.len())];
        packets.push(enc.tip(entry.base + rng.gen_range(0..BINARY_SIZE)));
    }
    (packets, map, at)
}

/// Pixel offset of packet `at` and the segment holding it, clamped to the
/// last segment when nothing follows the injection point.
fn locate_attack(packets: &[PtPacket], at: usize, side: usize) -> (usize, usize) {
    let attack_pixel: usize = packets[..at].iter().map(pixel_count).sum();
    let total: usize = packets.iter().map(pixel_count).sum();
    let k = (attack_pixel / (side * side)).min(segment_count(total, side).saturating_sub(1));
    (attack_pixel, k)
}

/// Generates malicious trace `trace_index` and locates its attack segment
/// for images of side `side`.
pub fn generate_malicious(
    config: &SynthConfig,
    trace_index: usize,
    side: usize,
) -> Result<MaliciousTrace, SynthError> {
    check_count("side", side)?;
    let (packets, map, at) = malicious_trace(config, trace_index)?;
    let (attack_pixel, attack_index) = locate_attack(&packets, at, side);
    Ok(MaliciousTrace {
        bytes: encode_stream(&packets),
        map,
        attack_packet: at,
        attack_pixel,
        attack_index,
    })
}

/// Label, ordinal, raw bytes, map and attack index of one corpus trace.
type GeneratedTrace = (Label, usize, Vec<u8>, BinaryMap, Option<usize>);

pub fn trace_id(label: Label, ordinal: usize) -> String {
    format!("{label}-{ordinal:04}")
}

/// Writes `traces/<id>.pt`, `maps/<id>.map` and `manifest.csv` under `dir`
/// and returns the manifest (with paths relative to `dir`). Malicious trace
/// `j` uses generator index `benign_traces + j`.
pub fn generate_corpus(
    config: &SynthConfig,
    side: usize,
    dir: &Path,
) -> Result<Manifest, SynthError> {
    config.validate()?;
    check_count("side", side)?;
    let app = Application::new(config);
    let jobs: Vec<(Label, usize)> = (0..config.benign_traces)
        .map(|i| (Label::Benign, i))
        .chain((0..config.malicious_traces).map(|j| (Label::Malicious, j)))
        .collect();

    let traces: Vec<GeneratedTrace> = jobs
        .par_iter()
        .map(|&(label, ordinal)| match label {
            Label::Benign => {
                let (packets, map) = benign_with(config, &app, ordinal);
                (label, ordinal, encode_stream(&packets), map, None)
            }
            Label::Malicious => {
                let (packets, map, at) =
                    malicious_with(config, &app, config.benign_traces + ordinal);
                let (_, k) = locate_attack(&packets, at, side);
                (label, ordinal, encode_stream(&packets), map, Some(k))
            }
        })
        .collect();

    fs::create_dir_all(dir.join("traces"))?;
    fs::create_dir_all(dir.join("maps"))?;
    let mut manifest = Manifest::default();
    for (label, ordinal, bytes, map, k) in traces {
        let id = trace_id(label, ordinal);
        let trace_path = PathBuf::from("traces").join(format!("{id}.pt"));
        let map_path = PathBuf::from("maps").join(format!("{id}.map"));
        fs::write(dir.join(&trace_path), bytes)?;
        map.save(&dir.join(&map_path))?;
        manifest.entries.push(ManifestEntry {
            trace_id: id,
            label,
            attack_index: k,
            trace_path,
            map_path,
        });
    }
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_stream, PacketReader};
    use crate::imager::segment;
    use crate::pixel::pixelize_trace;

    fn small() -> SynthConfig {
        SynthConfig {
            seed: 7,
            benign_traces: 3,
            malicious_traces: 3,
            packets_per_trace: 1500,
            attack: AttackProfile {
                gadget_count: 300,
                ..AttackProfile::default()
            },
            ..SynthConfig::default()
        }
    }

    fn tip_count(bytes: &[u8]) -> usize {
        decode_stream(bytes)
            .unwrap()
            .iter()
            .filter(|p| matches!(p, PtPacket::Tip(_)))
            .count()
    }

    #[test]
    fn deterministic() {
        let c = small();
        assert_eq!(
            generate_benign(&c, 0).unwrap(),
            generate_benign(&c, 0).unwrap()
        );
        assert_eq!(
            generate_malicious(&c, 4, 28).unwrap(),
            generate_malicious(&c, 4, 28).unwrap()
        );
        assert_ne!(
            generate_benign(&c, 0).unwrap().0,
            generate_benign(&c, 1).unwrap().0
        );
        let other = SynthConfig { seed: 8, ..small() };
        assert_ne!(
            generate_benign(&c, 0).unwrap().0,
            generate_benign(&other, 0).unwrap().0
        );
    }

    #[test]
    fn all_tnt_has_no_tips() {
        let mut c = small();
        c.benign.tnt_fraction = 1.0;
        let (bytes, _) = generate_benign(&c, 0).unwrap();
        assert_eq!(tip_count(&bytes), 0);
        assert_eq!(decode_stream(&bytes).unwrap().len(), c.packets_per_trace);
    }

    #[test]
    fn all_tip_has_no_tnt() {
        let mut c = small();
        c.benign.tnt_fraction = 0.0;
        let (bytes, _) = generate_benign(&c, 0).unwrap();
        assert_eq!(tip_count(&bytes), c.packets_per_trace);
    }

    #[test]
    fn tnt_share_tracks_config() {
        let c = SynthConfig {
            packets_per_trace: 20_000,
            ..small()
        };
        let (bytes, _) = generate_benign(&c, 0).unwrap();
        let share = 1.0 - tip_count(&bytes) as f64 / c.packets_per_trace as f64;
        assert!((share - 0.7).abs() < 0.03, "{share}");
    }

    #[test]
    fn targets_resolve_and_streams_round_trip() {
        let c = small();
        for i in 0..3 {
            let (bytes, map) = generate_benign(&c, i).unwrap();
            let m = generate_malicious(&c, 3 + i, 28).unwrap();
            for (bytes, map) in [(&bytes, &map), (&m.bytes, &m.map)] {
                let mut n = 0;
                for d in PacketReader::new(bytes) {
                    let d = d.unwrap();
                    if let Some(t) = d.target_ip {
                        assert!(map.resolve(t).is_some(), "{t:#x}");
                        n += 1;
                    }
                }
                assert!(n > 0);
                assert_eq!(&encode_stream(&decode_stream(bytes).unwrap()), bytes);
            }
        }
    }

    #[test]
    fn zero_gadgets_is_benign() {
        let mut c = small();
        c.attack.gadget_count = 0;
        let m = generate_malicious(&c, 2, 28).unwrap();
        let (bytes, map) = generate_benign(&c, 2).unwrap();
        assert_eq!((m.bytes, m.map), (bytes, map));
    }

    #[test]
    fn attack_index_matches_pixel_offset() {
        let mut c = small();
        c.attack.position = (0.5, 0.5);
        for side in [16, 28] {
            let m = generate_malicious(&c, 5, side).unwrap();
            assert_eq!(m.attack_packet, c.packets_per_trace / 2);
            // Recount pixels of the decoded prefix independently.
            let packets = decode_stream(&m.bytes).unwrap();
            let stream = pixelize_trace("t", &packets[..m.attack_packet], &m.map).unwrap();
            assert_eq!(stream.len(), m.attack_pixel);
            assert_eq!(m.attack_index, m.attack_pixel / (side * side));
            let full = pixelize_trace("t", &packets, &m.map).unwrap();
            assert!(m.attack_index < segment(&full, side).unwrap().len());
        }
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let manifest = generate_corpus(&c, 28, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        assert_eq!(manifest.entries[0].trace_id, "benign-0000");
        assert_eq!(manifest.entries[3].trace_id, "malicious-0000");
        let loaded = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
        for (e, l) in manifest.entries.iter().zip(&loaded.entries) {
            assert_eq!(e.attack_index, l.attack_index);
            assert!(l.trace_path.exists() && l.map_path.exists());
        }
        let direct = generate_malicious(&c, 3, 28).unwrap();
        assert_eq!(
            fs::read(&loaded.entries[3].trace_path).unwrap(),
            direct.bytes
        );
        assert_eq!(loaded.entries[3].attack_index, Some(direct.attack_index));
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.benign.tnt_fraction = 1.5;
        assert!(matches!(
            generate_benign(&c, 0),
            Err(SynthError::InvalidConfig(_))
        ));
        let mut c = small();
        c.binary_count = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.attack.position = (0.4, 0.2);
        assert!(c.validate().is_err());
    }
}
