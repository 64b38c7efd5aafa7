//! Byte-level AX.25 framing.
//!
//! Encoded frame layout (no bit stuffing or NRZI; byte model only):
//!
//! ```text
//! 0x7e | dest[7] | src[7] | path[15] | control | pid | info[0..=256] | fcs[2] | 0x7e
//! ```
//!
//! `path` is the zero-filled repeater/padding area that brings the fixed
//! overhead to 35 bytes. The FCS is CRC-16/X.25 over `dest..=info`, stored
//! least-significant byte first as AX.25 transmits it.
//!
//! Inside `info`, the first five bytes are a [`MessageHeader`]; the remaining
//! up to 251 bytes carry a slice of the message payload.

use std::collections::BTreeMap;

use crc::{Crc, CRC_16_IBM_SDLC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FLAG: u8 = 0x7e;
pub const ADDRESS_LEN: usize = 7;
pub const PATH_LEN: usize = 15;
pub const INFO_MAX: usize = 256;
pub const HEADER_LEN: usize = 5;
pub const DATA_PER_FRAME: usize = INFO_MAX - HEADER_LEN;
pub const FRAME_OVERHEAD: usize = 35;
pub const MAX_FRAME_LEN: usize = FRAME_OVERHEAD + INFO_MAX;
pub const MAX_FRAMES: usize = u8::MAX as usize;
pub const MAX_PAYLOAD: usize = DATA_PER_FRAME * MAX_FRAMES;

/// Unnumbered information frame.
pub const CONTROL_UI: u8 = 0x03;
/// No layer-3 protocol.
pub const PID_NONE: u8 = 0xf0;

const X25: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_SDLC);

pub fn crc16_x25(bytes: &[u8]) -> u16 {
    X25.checksum(bytes)
}

/// Standard AX.25 address field: six space-padded callsign characters
/// shifted left one bit, then the SSID byte.
pub fn address(callsign: &str, ssid: u8, last: bool) -> [u8; ADDRESS_LEN] {
    let mut out = [b' ' << 1; ADDRESS_LEN];
    for (slot, ch) in out.iter_mut().zip(callsign.bytes().take(6)) {
        *slot = ch.to_ascii_uppercase() << 1;
    }
    out[6] = 0b0110_0000 | ((ssid & 0x0f) << 1) | last as u8;
    out
}

pub fn ground_address() -> [u8; ADDRESS_LEN] {
    address("GROUND", 0, false)
}

pub fn satellite_address() -> [u8; ADDRESS_LEN] {
    address("SPCHSM", 1, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Request,
    Response,
    Beacon,
    Attestation,
    /// A full signed certificate, broadcast in the clear.
    Certificate,
}

impl MessageKind {
    pub fn tag(self) -> u8 {
        match self {
            MessageKind::Request => 0,
            MessageKind::Response => 1,
            MessageKind::Beacon => 2,
            MessageKind::Attestation => 3,
            MessageKind::Certificate => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => MessageKind::Request,
            1 => MessageKind::Response,
            2 => MessageKind::Beacon,
            3 => MessageKind::Attestation,
            4 => MessageKind::Certificate,
            _ => return None,
        })
    }
}

/// `message_id u16 | total_frames u8 | frame_index u8 | kind u8`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub message_id: u16,
    pub total_frames: u8,
    pub frame_index: u8,
    pub kind: MessageKind,
}

impl MessageHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let id = self.message_id.to_be_bytes();
        [
            id[0],
            id[1],
            self.total_frames,
            self.frame_index,
            self.kind.tag(),
        ]
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::BadHeader("info shorter than message header"));
        }
        let header = Self {
            message_id: u16::from_be_bytes([bytes[0], bytes[1]]),
            total_frames: bytes[2],
            frame_index: bytes[3],
            kind: MessageKind::from_tag(bytes[4])
                .ok_or(FrameError::BadHeader("unknown message kind"))?,
        };
        if header.total_frames == 0 || header.frame_index >= header.total_frames {
            return Err(FrameError::BadHeader("frame index out of range"));
        }
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {len} bytes exceeds the {max}-byte message limit")]
    Size { len: usize, max: usize },
    #[error("frame length {0} outside [{min}, {max}]", min = FRAME_OVERHEAD, max = MAX_FRAME_LEN)]
    Length(usize),
    #[error("missing frame delimiter")]
    Delimiter,
    #[error("fcs mismatch: carried {carried:#06x}, computed {computed:#06x}")]
    Fcs { carried: u16, computed: u16 },
    #[error("bad message header: {0}")]
    BadHeader(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ax25Frame {
    pub dest_addr: [u8; ADDRESS_LEN],
    pub src_addr: [u8; ADDRESS_LEN],
    pub control: u8,
    pub pid: u8,
    pub info: Vec<u8>,
}

impl Ax25Frame {
    pub fn new(dest_addr: [u8; 7], src_addr: [u8; 7], info: Vec<u8>) -> Self {
        debug_assert!(info.len() <= INFO_MAX);
        Self {
            dest_addr,
            src_addr,
            control: CONTROL_UI,
            pid: PID_NONE,
            info,
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.info.len()
    }

    fn body(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(self.encoded_len() - 4);
        body.extend_from_slice(&self.dest_addr);
        body.extend_from_slice(&self.src_addr);
        body.extend_from_slice(&[0u8; PATH_LEN]);
        body.push(self.control);
        body.push(self.pid);
        body.extend_from_slice(&self.info);
        body
    }

    pub fn fcs(&self) -> u16 {
        crc16_x25(&self.body())
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = self.body();
        let fcs = crc16_x25(&body);
        let mut out = Vec::with_capacity(body.len() + 4);
        out.push(FLAG);
        out.extend_from_slice(&body);
        out.extend_from_slice(&fcs.to_le_bytes());
        out.push(FLAG);
        out
    }

    /// Lowercase hex of the full encoded frame.
    pub fn to_hex(&self) -> String {
        hex::encode(self.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let n = bytes.len();
        if !(FRAME_OVERHEAD..=MAX_FRAME_LEN).contains(&n) {
            return Err(FrameError::Length(n));
        }
        if bytes[0] != FLAG || bytes[n - 1] != FLAG {
            return Err(FrameError::Delimiter);
        }
        let body = &bytes[1..n - 3];
        let carried = u16::from_le_bytes([bytes[n - 3], bytes[n - 2]]);
        let computed = crc16_x25(body);
        if carried != computed {
            return Err(FrameError::Fcs { carried, computed });
        }
        let info_start = 2 * ADDRESS_LEN + PATH_LEN + 2;
        Ok(Self {
            dest_addr: body[..7].try_into().unwrap(),
            src_addr: body[7..14].try_into().unwrap(),
            control: body[info_start - 2],
            pid: body[info_start - 1],
            info: body[info_start..].to_vec(),
        })
    }

    pub fn header(&self) -> Result<MessageHeader, FrameError> {
        MessageHeader::decode(&self.info)
    }

    pub fn data(&self) -> &[u8] {
        self.info.get(HEADER_LEN..).unwrap_or(&[])
    }
}

/// Number of frames `fragment` produces for a payload of `len` bytes. An
/// empty payload still occupies one header-only frame.
pub fn frame_count(len: usize) -> usize {
    len.div_ceil(DATA_PER_FRAME).max(1)
}

pub fn fragment(
    payload: &[u8],
    kind: MessageKind,
    message_id: u16,
) -> Result<Vec<Ax25Frame>, FrameError> {
    let (dest, src) = match kind {
        MessageKind::Request => (satellite_address(), ground_address()),
        _ => (address("CQ", 0, false), satellite_address()),
    };
    fragment_addressed(payload, kind, message_id, dest, src)
}

pub fn fragment_addressed(
    payload: &[u8],
    kind: MessageKind,
    message_id: u16,
    dest: [u8; 7],
    src: [u8; 7],
) -> Result<Vec<Ax25Frame>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::Size {
            len: payload.len(),
            max: MAX_PAYLOAD,
        });
    }
    let total = frame_count(payload.len());
    let frames = (0..total)
        .map(|i| {
            let header = MessageHeader {
                message_id,
                total_frames: total as u8,
                frame_index: i as u8,
                kind,
            };
            let lo = i * DATA_PER_FRAME;
            let hi = (lo + DATA_PER_FRAME).min(payload.len());
            let mut info = header.encode().to_vec();
            info.extend_from_slice(&payload[lo..hi]);
            Ax25Frame::new(dest, src, info)
        })
        .collect();
    Ok(frames)
}

/// Wire bytes for every frame of a message.
pub fn encoded_lengths(payload_len: usize) -> impl Iterator<Item = usize> {
    let total = frame_count(payload_len);
    (0..total).map(move |i| {
        let data = (payload_len - (i * DATA_PER_FRAME).min(payload_len)).min(DATA_PER_FRAME);
        FRAME_OVERHEAD + HEADER_LEN + data
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub message_id: u16,
    pub src_addr: [u8; 7],
    pub payload: Vec<u8>,
}

#[derive(Debug, Default)]
struct Partial {
    kind: Option<MessageKind>,
    total: u8,
    slices: BTreeMap<u8, Vec<u8>>,
}

/// Collects frames from any number of interleaved messages and yields each
/// message once all of its fragments have arrived.
#[derive(Debug, Default)]
pub struct Reassembler {
    partial: BTreeMap<(u16, u8), Partial>,
    /// Frames rejected for bad FCS, framing or header.
    pub discarded: u64,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, encoded: &[u8]) -> Option<Message> {
        let frame = match Ax25Frame::decode(encoded) {
            Ok(f) => f,
            Err(_) => {
                self.discarded += 1;
                return None;
            }
        };
        self.push_frame(frame)
    }

    pub fn push_frame(&mut self, frame: Ax25Frame) -> Option<Message> {
        let Ok(header) = frame.header() else {
            self.discarded += 1;
            return None;
        };
        let key = (header.message_id, header.kind.tag());
        let entry = self.partial.entry(key).or_default();
        if entry.kind.is_some() && entry.total != header.total_frames {
            // A reused id with a different shape starts over.
            *entry = Partial::default();
        }
        entry.kind = Some(header.kind);
        entry.total = header.total_frames;
        entry
            .slices
            .insert(header.frame_index, frame.data().to_vec());
        if entry.slices.len() < entry.total as usize {
            return None;
        }
        let done = self.partial.remove(&key).unwrap();
        Some(Message {
            kind: header.kind,
            message_id: header.message_id,
            src_addr: frame.src_addr,
            payload: done.slices.into_values().flatten().collect(),
        })
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("message incomplete")]
pub struct Incomplete;

/// Reassembles a single message from encoded frames in any order. Frames
/// failing the FCS are discarded.
pub fn reassemble<I, B>(frames: I) -> Result<Vec<u8>, Incomplete>
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut r = Reassembler::new();
    for f in frames {
        if let Some(msg) = r.push(f.as_ref()) {
            return Ok(msg.payload);
        }
    }
    Err(Incomplete)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_x25(b"123456789"), 0x906e);
    }

    #[test]
    fn full_frame_is_291_bytes() {
        let frames = fragment(&[0xaa; 251], MessageKind::Request, 1).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].info.len(), INFO_MAX);
        assert_eq!(frames[0].encode().len(), MAX_FRAME_LEN);
    }

    #[test]
    fn frame_counts_at_boundaries() {
        assert_eq!(
            fragment(&[0; 2560], MessageKind::Request, 0).unwrap().len(),
            11
        );
        assert_eq!(
            fragment(&[0; 251], MessageKind::Request, 0).unwrap().len(),
            1
        );
        let two = fragment(&[0; 252], MessageKind::Request, 0).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].data().len(), 1);
        assert_eq!(fragment(&[], MessageKind::Beacon, 0).unwrap().len(), 1);
        assert!(matches!(
            fragment(&vec![0; MAX_PAYLOAD + 1], MessageKind::Request, 0),
            Err(FrameError::Size { .. })
        ));
        assert_eq!(
            fragment(&vec![0; MAX_PAYLOAD], MessageKind::Request, 0)
                .unwrap()
                .len(),
            255
        );
    }

    #[test]
    fn encoded_lengths_match_frames() {
        for len in [0, 1, 250, 251, 252, 2560, 2588] {
            let frames = fragment(&vec![1; len], MessageKind::Request, 9).unwrap();
            let actual: Vec<usize> = frames.iter().map(|f| f.encode().len()).collect();
            assert_eq!(
                actual,
                encoded_lengths(len).collect::<Vec<_>>(),
                "len {len}"
            );
        }
        // 2560 bytes plus 40 bytes of framing per frame is 3000 bytes on air.
        assert_eq!(encoded_lengths(2560).sum::<usize>(), 3000);
    }

    #[test]
    fn layout_and_hex_dump() {
        let f = &fragment(b"hi", MessageKind::Beacon, 0x0102).unwrap()[0];
        let bytes = f.encode();
        assert_eq!(bytes[0], FLAG);
        assert_eq!(*bytes.last().unwrap(), FLAG);
        assert_eq!(&bytes[1..8], &address("CQ", 0, false));
        assert_eq!(&bytes[15..30], &[0; PATH_LEN]);
        assert_eq!(bytes[30], CONTROL_UI);
        assert_eq!(bytes[31], PID_NONE);
        assert_eq!(&bytes[32..37], &[0x01, 0x02, 1, 0, 2]);
        assert_eq!(&bytes[37..39], b"hi");
        assert_eq!(f.to_hex(), hex::encode(&bytes));
        assert_eq!(f.to_hex(), f.to_hex().to_lowercase());
        assert_eq!(Ax25Frame::decode(&bytes).unwrap(), *f);
    }

    #[test]
    fn reassembly_is_order_insensitive_and_detects_gaps() {
        let payload: Vec<u8> = (0..2560u32).map(|i| (i * 7) as u8).collect();
        let frames: Vec<Vec<u8>> = fragment(&payload, MessageKind::Request, 3)
            .unwrap()
            .iter()
            .map(Ax25Frame::encode)
            .collect();
        let mut rev = frames.clone();
        rev.reverse();
        assert_eq!(reassemble(&rev).unwrap(), payload);
        let mut missing = frames.clone();
        missing.remove(5);
        assert_eq!(reassemble(&missing), Err(Incomplete));
    }

    #[test]
    fn corrupting_any_byte_discards_the_frame() {
        let frames: Vec<Vec<u8>> = fragment(&[0x5a; 300], MessageKind::Request, 4)
            .unwrap()
            .iter()
            .map(Ax25Frame::encode)
            .collect();
        for pos in 0..frames[0].len() {
            let mut bad = frames.clone();
            bad[0][pos] ^= 0xff;
            let mut r = Reassembler::new();
            let out: Vec<_> = bad.iter().filter_map(|f| r.push(f)).collect();
            assert!(out.is_empty(), "byte {pos}");
            assert_eq!(r.discarded, 1);
        }
    }

    #[test]
    fn interleaved_messages() {
        let a = fragment(&[1; 600], MessageKind::Request, 1).unwrap();
        let b = fragment(&[2; 300], MessageKind::Request, 2).unwrap();
        let mut r = Reassembler::new();
        let mut done = vec![];
        for f in a
            .iter()
            .zip(b.iter())
            .flat_map(|(x, y)| [x, y])
            .chain(a.iter().skip(2))
        {
            if let Some(m) = r.push_frame(f.clone()) {
                done.push(m.message_id);
            }
        }
        assert_eq!(done, vec![2, 1]);
        assert_eq!(r.pending(), 0);
    }
}
