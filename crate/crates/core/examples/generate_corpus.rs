//! Writes a small synthetic corpus (raw traces, binary maps, manifest) and
//! compares TIP density before and after the attack point.
//!
//! Usage: `generate_corpus [DIR]` (defaults to a temporary directory).

use cftrace::codec::{decode_stream, PtPacket};
use cftrace::dataset::Label;
use cftrace::synth::{generate_corpus, SynthConfig};

fn tip_share(packets: &[PtPacket]) -> f64 {
    packets
        .iter()
        .filter(|p| matches!(p, PtPacket::Tip(_)))
        .count() as f64
        / packets.len().max(1) as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    let config = SynthConfig {
        seed: 42,
        benign_traces: 5,
        malicious_traces: 5,
        ..SynthConfig::default()
    };
    let manifest = generate_corpus(&config, 28, &dir)?;
    println!("{}", manifest.to_text());

    for e in &manifest.entries {
        let packets = decode_stream(&std::fs::read(dir.join(&e.trace_path))?)?;
        match e.label {
            Label::Benign => println!(
                "{}: {} packets, TIP share {:.2}",
                e.trace_id,
                packets.len(),
                tip_share(&packets)
            ),
            Label::Malicious => println!(
                "{}: {} packets, attack from segment {}, TIP share {:.2}",
                e.trace_id,
                packets.len(),
                e.attack_index.unwrap_or(0),
                tip_share(&packets)
            ),
        }
    }
    Ok(())
}
