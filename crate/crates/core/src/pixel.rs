//! Packet to pixel conversion.
//!
//! TNT packets become their raw bytes (a short TNT byte as-is, a long TNT's
//! valid payload bytes with the opcode removed). A TIP target becomes five
//! pixels: the 1-byte ID of the binary it falls in followed by the 4-byte
//! little-endian offset from that binary's load base, which removes the
//! effect of address space randomisation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::codec::{reconstruct_ip, DecoderState, PtPacket};

/// Pixels contributed by every non-suppressed TIP.
pub const TIP_PIXELS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PixelError {
    #[error("binary id {0} appears more than once")]
    DuplicateId(u8),
    #[error("binary {id}: base {base:#x} is not below end {end:#x}")]
    EmptyRange { id: u8, base: u64, end: u64 },
    #[error("binaries {0} and {1} have overlapping address ranges")]
    Overlap(u8, u8),
    #[error("binary map line {line}: {reason}")]
    MapSyntax { line: usize, reason: String },
    #[error("address {0:#x} is not inside any mapped binary")]
    UnmappedAddress(u64),
    #[error("offset of {addr:#x} from base {base:#x} does not fit in 32 bits")]
    OffsetOverflow { addr: u64, base: u64 },
    #[error("packet {index}: {source}")]
    AtPacket {
        index: usize,
        #[source]
        source: Box<PixelError>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapEntry {
    pub id: u8,
    pub base: u64,
    pub end: u64,
    pub name: String,
}

/// Runtime load map of the traced process. Entries are kept sorted by base.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BinaryMap {
    entries: Vec<MapEntry>,
}

impl BinaryMap {
    pub fn new(mut entries: Vec<MapEntry>) -> Result<Self, PixelError> {
        let mut seen = [false; 256];
        for e in &entries {
            if std::mem::replace(&mut seen[e.id as usize], true) {
                return Err(PixelError::DuplicateId(e.id));
            }
            if e.base >= e.end {
                return Err(PixelError::EmptyRange {
                    id: e.id,
                    base: e.base,
                    end: e.end,
                });
            }
        }
        entries.sort_by_key(|e| e.base);
        for pair in entries.windows(2) {
            if pair[1].base < pair[0].end {
                return Err(PixelError::Overlap(pair[0].id, pair[1].id));
            }
        }
        Ok(BinaryMap { entries })
    }

    pub fn entries(&self) -> &[MapEntry] {
        &self.entries
    }

    /// The entry whose `[base, end)` range contains `addr`.
    pub fn resolve(&self, addr: u64) -> Option<&MapEntry> {
        let idx = self.entries.partition_point(|e| e.base <= addr);
        let entry = self.entries.get(idx.checked_sub(1)?)?;
        (addr < entry.end).then_some(entry)
    }

    /// Parses `id,base_hex,end_hex,name` lines. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, PixelError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: String| PixelError::MapSyntax {
                line: i + 1,
                reason,
            };
            let fields: Vec<&str> = line.splitn(4, ',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(syntax(format!("expected 4 fields, got {}", fields.len())));
            }
            let id = fields[0]
                .parse::<u8>()
                .map_err(|e| syntax(format!("id {:?}: {e}", fields[0])))?;
            let base = parse_hex(fields[1]).map_err(syntax)?;
            let end = parse_hex(fields[2]).map_err(syntax)?;
            entries.push(MapEntry {
                id,
                base,
                end,
                name: fields[3].to_string(),
            });
        }
        BinaryMap::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# id,base,end,name\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{:#010x},{:#010x},{}", e.id, e.base, e.end, e.name);
        }
        out
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        BinaryMap::parse(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_text())
    }
}

fn parse_hex(field: &str) -> Result<u64, String> {
    let digits = field
        .strip_prefix("0x")
        .or_else(|| field.strip_prefix("0X"))
        .ok_or_else(|| format!("address {field:?} lacks 0x prefix"))?;
    u64::from_str_radix(digits, 16).map_err(|e| format!("address {field:?}: {e}"))
}

/// The one-dimensional pixel array of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PixelStream {
    pub pixels: Vec<u8>,
    pub source_trace_id: String,
}

impl PixelStream {
    pub fn new(source_trace_id: impl Into<String>, pixels: Vec<u8>) -> Self {
        PixelStream {
            pixels,
            source_trace_id: source_trace_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Pixels of a TNT packet; `None` for a TIP.
pub fn tnt_to_pixels(packet: &PtPacket) -> Option<Vec<u8>> {
    match packet {
        PtPacket::ShortTnt(p) => Some(vec![p.raw_byte()]),
        PtPacket::LongTnt(p) => Some(p.payload().to_vec()),
        PtPacket::Tip(_) => None,
    }
}

pub fn tip_to_pixels(target: u64, map: &BinaryMap) -> Result<[u8; TIP_PIXELS], PixelError> {
    let entry = map
        .resolve(target)
        .ok_or(PixelError::UnmappedAddress(target))?;
    let offset = u32::try_from(target - entry.base).map_err(|_| PixelError::OffsetOverflow {
        addr: target,
        base: entry.base,
    })?;
    let o = offset.to_le_bytes();
    Ok([entry.id, o[0], o[1], o[2], o[3]])
}

/// Concatenates the pixels of every packet in order. TIP targets are
/// reconstructed with a fresh decoder state; suppressed TIPs add nothing.
pub fn pixelize_trace(
    trace_id: impl Into<String>,
    packets: &[PtPacket],
    map: &BinaryMap,
) -> Result<PixelStream, PixelError> {
    let mut state = DecoderState::new();
    let mut pixels = Vec::with_capacity(packets.len() * 2);
    for (index, packet) in packets.iter().enumerate() {
        match packet {
            PtPacket::ShortTnt(p) => pixels.push(p.raw_byte()),
            PtPacket::LongTnt(p) => pixels.extend_from_slice(p.payload()),
            PtPacket::Tip(tip) => {
                let Ok(target) = reconstruct_ip(tip, &mut state) else {
                    continue;
                };
                let px = tip_to_pixels(target, map).map_err(|e| PixelError::AtPacket {
                    index,
                    source: Box::new(e),
                })?;
                pixels.extend_from_slice(&px);
            }
        }
    }
    Ok(PixelStream::new(trace_id, pixels))
}

/// Number of pixels `packet` contributes.
pub fn pixel_count(packet: &PtPacket) -> usize {
    match packet {
        PtPacket::ShortTnt(_) => 1,
        PtPacket::LongTnt(p) => p.payload().len(),
        PtPacket::Tip(tip) if tip.mode() == crate::codec::IpBytes::Suppressed => 0,
        PtPacket::Tip(_) => TIP_PIXELS,
    }
}
