//! Builds a short packet stream by hand, encodes it, and walks the bytes with
//! the streaming reader, printing each packet and reconstructed target.
//!
//! Pass a path to decode a raw trace file instead.

use cftrace::codec::{
    encode_stream, extract_tnt_bits, LongTnt, PacketReader, PtPacket, ShortTnt, TipPacket,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bytes = match std::env::args().nth(1) {
        Some(path) => std::fs::read(path)?,
        None => {
            let base = 0x7ff6_1000_0000u64;
            let packets: Vec<PtPacket> = vec![
                TipPacket::compress(base + 0x1234, 0).into(),
                ShortTnt::from_branches(&[true, true, false])?.into(),
                LongTnt::from_branches(&[true; 20])?.into(),
                TipPacket::compress(base + 0x1f00, base + 0x1234).into(),
                TipPacket::suppressed().into(),
                TipPacket::compress(base + 0x8_0000, base + 0x1f00).into(),
            ];
            encode_stream(&packets)
        }
    };

    let mut tips = 0;
    let mut branches = 0;
    for decoded in PacketReader::new(&bytes) {
        let d = decoded?;
        print!("{:#06x}  {}", d.offset, d.packet);
        if let Some(target) = d.target_ip {
            print!("  -> {target:#x}");
            tips += 1;
        }
        if d.packet.is_tnt() {
            branches += extract_tnt_bits(&d.packet)?.len();
        }
        println!();
    }
    println!(
        "{} bytes, {tips} resolved targets, {branches} conditional branches",
        bytes.len()
    );
    Ok(())
}
