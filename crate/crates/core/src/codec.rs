//! Streaming decoder and encoder for the control-flow packet subset used by
//! the pipeline: short TNT, long TNT and TIP. Any other byte is treated as
//! opaque filler and skipped one byte at a time.
//!
//! Wire layouts follow the processor trace conventions:
//!
//! * short TNT: one byte, bit 0 is a zero header bit, the most significant set
//!   bit is the stop bit and the bits between hold 1 to 6 branch outcomes with
//!   the oldest branch directly below the stop bit;
//! * long TNT: opcode `02 A3` followed by a 6-byte little-endian payload whose
//!   most significant set bit is the stop bit, holding up to 47 outcomes;
//! * TIP: header byte `ipbytes << 5 | 0b01101` followed by 0, 2, 4, 6, 6 or 8
//!   payload bytes depending on the IP compression mode.

use std::fmt;

use thiserror::Error;

/// Two-byte opcode introducing a long TNT packet.
pub const LONG_TNT_OPCODE: [u8; 2] = [0x02, 0xA3];
/// Payload bytes carried on the wire by every long TNT packet.
pub const LONG_TNT_WIRE_PAYLOAD: usize = 6;
/// Maximum number of branch outcomes in a short TNT packet.
pub const SHORT_TNT_MAX_BRANCHES: usize = 6;
/// Maximum number of branch outcomes in a long TNT packet.
pub const LONG_TNT_MAX_BRANCHES: usize = 47;

const TIP_OPCODE: u8 = 0b0_1101;
const TIP_OPCODE_MASK: u8 = 0b1_1111;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error(
        "truncated {kind} packet at offset {offset}: needs {needed} bytes, {available} remain"
    )]
    TruncatedPacket {
        kind: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("TNT packet carries no branch bits")]
    EmptyTnt,
    #[error("TIP packet has a suppressed target")]
    SuppressedTarget,
    #[error("invalid packet: {0}")]
    InvalidPacket(String),
}

/// IP compression mode of a TIP packet, stored in the top 3 header bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IpBytes {
    Suppressed,
    Update16,
    Update32,
    SignExt48,
    Update48,
    Full64,
}

impl IpBytes {
    pub const ALL: [IpBytes; 6] = [
        IpBytes::Suppressed,
        IpBytes::Update16,
        IpBytes::Update32,
        IpBytes::SignExt48,
        IpBytes::Update48,
        IpBytes::Full64,
    ];

    /// Parses the 3-bit field. Values 5 and 7 are reserved.
    pub fn from_bits(bits: u8) -> Result<Self, CodecError> {
        match bits {
            0 => Ok(IpBytes::Suppressed),
            1 => Ok(IpBytes::Update16),
            2 => Ok(IpBytes::Update32),
            3 => Ok(IpBytes::SignExt48),
            4 => Ok(IpBytes::Update48),
            6 => Ok(IpBytes::Full64),
            other => Err(CodecError::InvalidPacket(format!(
                "reserved TIP IPBytes value {other}"
            ))),
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            IpBytes::Suppressed => 0,
            IpBytes::Update16 => 1,
            IpBytes::Update32 => 2,
            IpBytes::SignExt48 => 3,
            IpBytes::Update48 => 4,
            IpBytes::Full64 => 6,
        }
    }

    pub fn payload_len(self) -> usize {
        match self {
            IpBytes::Suppressed => 0,
            IpBytes::Update16 => 2,
            IpBytes::Update32 => 4,
            IpBytes::SignExt48 | IpBytes::Update48 => 6,
            IpBytes::Full64 => 8,
        }
    }
}

/// One-byte TNT packet. The raw byte is kept verbatim since the pixel
/// conversion uses it as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShortTnt {
    raw: u8,
}

impl ShortTnt {
    pub fn from_byte(raw: u8) -> Result<Self, CodecError> {
        extract_short_tnt_bits(raw)?;
        Ok(ShortTnt { raw })
    }

    /// Packs 1 to 6 outcomes, oldest first.
    pub fn from_branches(branches: &[bool]) -> Result<Self, CodecError> {
        if branches.is_empty() || branches.len() > SHORT_TNT_MAX_BRANCHES {
            return Err(CodecError::InvalidPacket(format!(
                "short TNT holds 1..={SHORT_TNT_MAX_BRANCHES} branches, got {}",
                branches.len()
            )));
        }
        // Payload bits start at bit 1, above the header bit.
        let bits = pack_branches(branches) << 1;
        Ok(ShortTnt { raw: bits as u8 })
    }

    pub fn raw_byte(&self) -> u8 {
        self.raw
    }

    pub fn branches(&self) -> Vec<bool> {
        extract_short_tnt_bits(self.raw).expect("validated at construction")
    }
}

/// Long TNT packet. The payload is stored trimmed to its valid length: the
/// byte holding the stop bit is the last one kept.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LongTnt {
    payload: Vec<u8>,
}

impl LongTnt {
    /// Builds from 1 to 6 payload bytes (little-endian). Zero bytes above the
    /// stop bit are dropped.
    pub fn from_payload(payload: &[u8]) -> Result<Self, CodecError> {
        if payload.len() > LONG_TNT_WIRE_PAYLOAD {
            return Err(CodecError::InvalidPacket(format!(
                "long TNT payload is at most {LONG_TNT_WIRE_PAYLOAD} bytes, got {}",
                payload.len()
            )));
        }
        extract_long_tnt_bits(payload)?;
        let valid = payload.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
        Ok(LongTnt {
            payload: payload[..valid].to_vec(),
        })
    }

    /// Packs 1 to 47 outcomes, oldest first.
    pub fn from_branches(branches: &[bool]) -> Result<Self, CodecError> {
        if branches.is_empty() || branches.len() > LONG_TNT_MAX_BRANCHES {
            return Err(CodecError::InvalidPacket(format!(
                "long TNT holds 1..={LONG_TNT_MAX_BRANCHES} branches, got {}",
                branches.len()
            )));
        }
        let bytes = pack_branches(branches).to_le_bytes();
        LongTnt::from_payload(&bytes[..LONG_TNT_WIRE_PAYLOAD])
    }

    /// Valid payload bytes, headers removed.
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn branches(&self) -> Vec<bool> {
        extract_long_tnt_bits(&self.payload).expect("validated at construction")
    }
}

/// TIP packet as it appears on the wire. The target address is not stored:
/// it depends on decoder state and is produced by [`reconstruct_ip`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TipPacket {
    mode: IpBytes,
    payload: Vec<u8>,
}

impl TipPacket {
    pub fn new(mode: IpBytes, payload: &[u8]) -> Result<Self, CodecError> {
        if payload.len() != mode.payload_len() {
            return Err(CodecError::InvalidPacket(format!(
                "{mode:?} TIP needs {} payload bytes, got {}",
                mode.payload_len(),
                payload.len()
            )));
        }
        Ok(TipPacket {
            mode,
            payload: payload.to_vec(),
        })
    }

    pub fn suppressed() -> Self {
        TipPacket {
            mode: IpBytes::Suppressed,
            payload: Vec::new(),
        }
    }

    /// Encodes `target` with the most compact mode that reconstructs it
    /// exactly from `last_ip`.
    pub fn compress(target: u64, last_ip: u64) -> Self {
        let diff = target ^ last_ip;
        let sign_extended = ((target << 16) as i64 >> 16) as u64;
        let (mode, len) = if diff >> 16 == 0 {
            (IpBytes::Update16, 2)
        } else if diff >> 32 == 0 {
            (IpBytes::Update32, 4)
        } else if diff >> 48 == 0 {
            (IpBytes::Update48, 6)
        } else if sign_extended == target {
            (IpBytes::SignExt48, 6)
        } else {
            (IpBytes::Full64, 8)
        };
        TipPacket {
            mode,
            payload: target.to_le_bytes()[..len].to_vec(),
        }
    }

    pub fn mode(&self) -> IpBytes {
        self.mode
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PtPacket {
    ShortTnt(ShortTnt),
    LongTnt(LongTnt),
    Tip(TipPacket),
}

impl PtPacket {
    pub fn is_tnt(&self) -> bool {
        !matches!(self, PtPacket::Tip(_))
    }

    /// Size of the encoded packet in bytes.
    pub fn encoded_len(&self) -> usize {
        match self {
            PtPacket::ShortTnt(_) => 1,
            PtPacket::LongTnt(_) => LONG_TNT_OPCODE.len() + LONG_TNT_WIRE_PAYLOAD,
            PtPacket::Tip(tip) => 1 + tip.payload.len(),
        }
    }
}

impl From<ShortTnt> for PtPacket {
    fn from(p: ShortTnt) -> Self {
        PtPacket::ShortTnt(p)
    }
}

impl From<LongTnt> for PtPacket {
    fn from(p: LongTnt) -> Self {
        PtPacket::LongTnt(p)
    }
}

impl From<TipPacket> for PtPacket {
    fn from(p: TipPacket) -> Self {
        PtPacket::Tip(p)
    }
}

impl fmt::Display for PtPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits =
            |b: Vec<bool>| -> String { b.iter().map(|&t| if t { 'T' } else { 'N' }).collect() };
        match self {
            PtPacket::ShortTnt(p) => write!(f, "tnt.8 {:#04x} {}", p.raw, bits(p.branches())),
            PtPacket::LongTnt(p) => write!(f, "tnt.64 {}", bits(p.branches())),
            PtPacket::Tip(p) => {
                write!(f, "tip {:?}", p.mode)?;
                if !p.payload.is_empty() {
                    f.write_str(" ")?;
                    for b in &p.payload {
                        write!(f, "{b:02x}")?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Places a stop bit above the packed outcomes, oldest in the highest bit.
fn pack_branches(branches: &[bool]) -> u64 {
    let n = branches.len();
    let mut bits = 1u64 << n;
    for (i, &taken) in branches.iter().enumerate() {
        if taken {
            bits |= 1 << (n - 1 - i);
        }
    }
    bits
}

/// Reads the outcomes below the stop bit, from bit `stop - 1` down to `lowest`.
fn unpack_branches(bits: u64, lowest: u32) -> Result<Vec<bool>, CodecError> {
    if bits == 0 {
        return Err(CodecError::EmptyTnt);
    }
    let stop = 63 - bits.leading_zeros();
    if stop <= lowest {
        return Err(CodecError::EmptyTnt);
    }
    Ok((lowest..stop).rev().map(|i| bits >> i & 1 == 1).collect())
}

/// Branch outcomes of a short TNT byte, oldest first.
pub fn extract_short_tnt_bits(byte: u8) -> Result<Vec<bool>, CodecError> {
    if byte & 1 != 0 {
        return Err(CodecError::InvalidPacket(format!(
            "short TNT header bit set in {byte:#04x}"
        )));
    }
    unpack_branches(u64::from(byte), 1)
}

/// Branch outcomes of a long TNT payload (up to 6 bytes, little-endian),
/// oldest first.
pub fn extract_long_tnt_bits(payload: &[u8]) -> Result<Vec<bool>, CodecError> {
    if payload.len() > LONG_TNT_WIRE_PAYLOAD {
        return Err(CodecError::InvalidPacket(format!(
            "long TNT payload is at most {LONG_TNT_WIRE_PAYLOAD} bytes, got {}",
            payload.len()
        )));
    }
    let mut buf = [0u8; 8];
    buf[..payload.len()].copy_from_slice(payload);
    unpack_branches(u64::from_le_bytes(buf), 0)
}

/// Branch outcomes of a TNT packet, oldest first.
pub fn extract_tnt_bits(packet: &PtPacket) -> Result<Vec<bool>, CodecError> {
    match packet {
        PtPacket::ShortTnt(p) => Ok(p.branches()),
        PtPacket::LongTnt(p) => Ok(p.branches()),
        PtPacket::Tip(_) => Err(CodecError::InvalidPacket(
            "TIP packets carry no branch bits".into(),
        )),
    }
}

/// Per-stream decoder state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecoderState {
    last_ip: u64,
    offset: usize,
}

impl DecoderState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_last_ip(last_ip: u64) -> Self {
        DecoderState { last_ip, offset: 0 }
    }

    pub fn last_ip(&self) -> u64 {
        self.last_ip
    }

    pub fn offset(&self) -> usize {
        self.offset
    }
}

/// Rebuilds the full target address of a TIP from its payload and the last
/// saved IP, then stores it as the new last IP.
pub fn reconstruct_ip(packet: &TipPacket, state: &mut DecoderState) -> Result<u64, CodecError> {
    let mut buf = [0u8; 8];
    buf[..packet.payload.len()].copy_from_slice(&packet.payload);
    let value = u64::from_le_bytes(buf);
    let last = state.last_ip;
    let ip = match packet.mode {
        IpBytes::Suppressed => return Err(CodecError::SuppressedTarget),
        IpBytes::Update16 => (last & !0xFFFF) | value,
        IpBytes::Update32 => (last & !0xFFFF_FFFF) | value,
        IpBytes::Update48 => (last & !0xFFFF_FFFF_FFFF) | value,
        IpBytes::SignExt48 => ((value << 16) as i64 >> 16) as u64,
        IpBytes::Full64 => value,
    };
    state.last_ip = ip;
    Ok(ip)
}

/// A packet together with its byte offset and, for non-suppressed TIPs, the
/// reconstructed target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPacket {
    pub offset: usize,
    pub packet: PtPacket,
    pub target_ip: Option<u64>,
}

/// Streaming packet reader over a raw trace buffer.
///
/// Yields packets in stream order. After the first error the reader is
/// exhausted.
#[derive(Debug, Clone)]
pub struct PacketReader<'a> {
    data: &'a [u8],
    state: DecoderState,
    failed: bool,
}

impl<'a> PacketReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        PacketReader {
            data,
            state: DecoderState::new(),
            failed: false,
        }
    }

    pub fn state(&self) -> &DecoderState {
        &self.state
    }

    fn truncated(&self, kind: &'static str, needed: usize) -> CodecError {
        CodecError::TruncatedPacket {
            kind,
            offset: self.state.offset,
            needed,
            available: self.data.len() - self.state.offset,
        }
    }

    fn next_packet(&mut self) -> Option<Result<DecodedPacket, CodecError>> {
        while self.state.offset < self.data.len() {
            let at = self.state.offset;
            let rest = &self.data[at..];
            let header = rest[0];

            if rest.starts_with(&LONG_TNT_OPCODE) {
                let needed = LONG_TNT_OPCODE.len() + LONG_TNT_WIRE_PAYLOAD;
                if rest.len() < needed {
                    return Some(Err(self.truncated("long TNT", needed)));
                }
                if let Ok(tnt) = LongTnt::from_payload(&rest[2..needed]) {
                    self.state.offset += needed;
                    return Some(Ok(DecodedPacket {
                        offset: at,
                        packet: PtPacket::LongTnt(tnt),
                        target_ip: None,
                    }));
                }
            } else if header & TIP_OPCODE_MASK == TIP_OPCODE {
                let mode = match IpBytes::from_bits(header >> 5) {
                    Ok(mode) => mode,
                    Err(e) => return Some(Err(e)),
                };
                let needed = 1 + mode.payload_len();
                if rest.len() < needed {
                    return Some(Err(self.truncated("TIP", needed)));
                }
                let tip = TipPacket {
                    mode,
                    payload: rest[1..needed].to_vec(),
                };
                let target_ip = reconstruct_ip(&tip, &mut self.state).ok();
                self.state.offset += needed;
                return Some(Ok(DecodedPacket {
                    offset: at,
                    packet: PtPacket::Tip(tip),
                    target_ip,
                }));
            } else if let Ok(tnt) = ShortTnt::from_byte(header) {
                self.state.offset += 1;
                return Some(Ok(DecodedPacket {
                    offset: at,
                    packet: PtPacket::ShortTnt(tnt),
                    target_ip: None,
                }));
            }
            // Opaque byte.
            self.state.offset += 1;
        }
        None
    }
}

impl Iterator for PacketReader<'_> {
    type Item = Result<DecodedPacket, CodecError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self.next_packet();
        if matches!(item, Some(Err(_))) {
            self.failed = true;
        }
        item
    }
}

/// Decodes every TNT and TIP packet in `raw`, in stream order.
pub fn decode_stream(raw: &[u8]) -> Result<Vec<PtPacket>, CodecError> {
    PacketReader::new(raw)
        .map(|item| item.map(|decoded| decoded.packet))
        .collect()
}

pub fn encode_packet(packet: &PtPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(packet.encoded_len());
    encode_into(packet, &mut out);
    out
}

pub fn encode_stream<'a, I>(packets: I) -> Vec<u8>
where
    I: IntoIterator<Item = &'a PtPacket>,
{
    let mut out = Vec::new();
    for packet in packets {
        encode_into(packet, &mut out);
    }
    out
}

fn encode_into(packet: &PtPacket, out: &mut Vec<u8>) {
    match packet {
        PtPacket::ShortTnt(p) => out.push(p.raw),
        PtPacket::LongTnt(p) => {
            out.extend_from_slice(&LONG_TNT_OPCODE);
            out.extend_from_slice(&p.payload);
            out.resize(out.len() + LONG_TNT_WIRE_PAYLOAD - p.payload.len(), 0);
        }
        PtPacket::Tip(p) => {
            out.push(p.mode.bits() << 5 | TIP_OPCODE);
            out.extend_from_slice(&p.payload);
        }
    }
}
