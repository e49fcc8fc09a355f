//! Generators and independent oracles shared by the integration tests.

#![allow(dead_code)]

use cftrace::codec::{IpBytes, LongTnt, PtPacket, ShortTnt, TipPacket};
use cftrace::dataset::Label;
use cftrace::eval::Prediction;
use proptest::prelude::*;
use rand::Rng;

pub fn random_packet(rng: &mut impl Rng) -> PtPacket {
    match rng.gen_range(0..3) {
        0 => {
            let n = rng.gen_range(1..=6);
            let b: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            ShortTnt::from_branches(&b).unwrap().into()
        }
        1 => {
            let n = rng.gen_range(1..=47);
            let b: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            LongTnt::from_branches(&b).unwrap().into()
        }
        _ => {
            let mode = IpBytes::ALL[rng.gen_range(0..IpBytes::ALL.len())];
            let payload: Vec<u8> = (0..mode.payload_len()).map(|_| rng.gen()).collect();
            TipPacket::new(mode, &payload).unwrap().into()
        }
    }
}

pub fn arb_packet() -> impl Strategy<Value = PtPacket> {
    prop_oneof![
        prop::collection::vec(any::<bool>(), 1..=6)
            .prop_map(|b| ShortTnt::from_branches(&b).unwrap().into()),
        prop::collection::vec(any::<bool>(), 1..=47)
            .prop_map(|b| LongTnt::from_branches(&b).unwrap().into()),
        (0..IpBytes::ALL.len(), prop::array::uniform8(any::<u8>())).prop_map(|(i, bytes)| {
            let mode = IpBytes::ALL[i];
            TipPacket::new(mode, &bytes[..mode.payload_len()])
                .unwrap()
                .into()
        }),
    ]
}

/// Short TNT semantics read off the binary spelling of the byte: the lowest
/// digit must be 0, the leading 1 is the stop marker, and the digits between
/// are branch outcomes, oldest first.
pub fn short_tnt_by_text(byte: u8) -> Option<Vec<bool>> {
    let text = format!("{byte:b}");
    if !text.ends_with('0') {
        return None;
    }
    let digits = text.trim_start_matches('0');
    if digits.len() < 3 {
        return None;
    }
    Some(
        digits[1..digits.len() - 1]
            .chars()
            .map(|c| c == '1')
            .collect(),
    )
}

/// Fraction of (malicious, benign) pairs in which the malicious score is
/// higher, ties counted one half.
pub fn pairwise_auc(preds: &[Prediction]) -> f64 {
    let pos: Vec<f64> = preds
        .iter()
        .filter(|p| p.label == Label::Malicious)
        .map(|p| p.p)
        .collect();
    let neg: Vec<f64> = preds
        .iter()
        .filter(|p| p.label == Label::Benign)
        .map(|p| p.p)
        .collect();
    let mut twice = 0u64;
    for &a in &pos {
        for &b in &neg {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Binomial coefficient as an exact float for small arguments.
pub fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1u128, |acc, i| acc * u128::from(n - i) / u128::from(i + 1)) as f64
}
