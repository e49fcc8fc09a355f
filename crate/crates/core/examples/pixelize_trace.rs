//! Pixel conversion of a packet stream against a binary map, and the
//! address-layout independence that makes images comparable across runs.

use cftrace::codec::{decode_stream, encode_stream, PtPacket, ShortTnt, TipPacket};
use cftrace::pixel::{pixelize_trace, BinaryMap, MapEntry};

fn layout(slide: u64) -> BinaryMap {
    BinaryMap::new(vec![
        MapEntry {
            id: 1,
            base: 0x40_0000 + slide,
            end: 0x50_0000 + slide,
            name: "reader.exe".into(),
        },
        MapEntry {
            id: 2,
            base: 0x7ff0_0000 + slide,
            end: 0x7ff8_0000 + slide,
            name: "plugin.dll".into(),
        },
    ])
    .expect("disjoint")
}

fn trace(map: &BinaryMap) -> Vec<PtPacket> {
    let exe = map.entries()[0].base;
    let dll = map.entries()[1].base;
    let mut last = 0;
    let mut tip = |target: u64| {
        let p = TipPacket::compress(target, last);
        last = target;
        PtPacket::from(p)
    };
    vec![
        tip(exe + 0x1234),
        ShortTnt::from_branches(&[true, false, true])
            .unwrap()
            .into(),
        tip(dll + 0x40),
        TipPacket::suppressed().into(),
        tip(exe + 0x1240),
    ]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = layout(0);
    let b = layout(0x3_0000);
    // Round-trip through bytes, as a real trace file would be read.
    let pa = decode_stream(&encode_stream(&trace(&a)))?;
    let pb = decode_stream(&encode_stream(&trace(&b)))?;
    let sa = pixelize_trace("run-a", &pa, &a)?;
    let sb = pixelize_trace("run-b", &pb, &b)?;
    println!("map:\n{}", a.to_text());
    println!("pixels ({}): {:02x?}", sa.len(), sa.pixels);
    println!(
        "same pixels under a different load address: {}",
        sa.pixels == sb.pixels
    );
    Ok(())
}
