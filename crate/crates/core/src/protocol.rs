//! ISO/IEC 14443 Type A framing (odd parity, CRC_A, short and standard
//! frames) and the MIFARE Ultralight EV1 / MIFARE Classic 1K read sessions
//! the attack replays.
//!
//! Which frames carry a CRC_A is fixed per command in [`Command::carries_crc`]:
//! ATQA, the anticollision `SELECT`/`UID+BCC` pair and the Classic
//! authentication exchange (nonces and answers) are sent without one; every
//! other standard frame, including `HALT`, carries it.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A frame on the air, one entry per bit in transmission order.
pub type Bits = Vec<bool>;

pub const WUPA: u8 = 0x52;
pub const REQA: u8 = 0x26;
pub const CMD_READ: u8 = 0x30;
pub const CMD_FAST_READ: u8 = 0x3A;
pub const CMD_HALT: [u8; 2] = [0x50, 0x00];
pub const CMD_AUTH_A: u8 = 0x60;
pub const SEL_CL1: u8 = 0x93;
pub const NVB_ANTICOLLISION: u8 = 0x20;
pub const NVB_SELECT: u8 = 0x70;
pub const ATQA_ULTRALIGHT: [u8; 2] = [0x44, 0x00];
pub const ATQA_CLASSIC_1K: [u8; 2] = [0x04, 0x00];
pub const SAK_CLASSIC_1K: u8 = 0x08;

/// Last page fetched by the session's FAST READ.
pub const FAST_READ_END_PAGE: u8 = 0x13;
/// Block the Classic session authenticates to and reads.
pub const CLASSIC_AUTH_BLOCK: u8 = 0x07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sender {
    Reader,
    Card,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    /// 7 data bits, no parity, no CRC.
    Short,
    /// Whole bytes, each followed by an odd-parity bit.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CardKind {
    Ultralight,
    Classic,
}

/// Commands and responses appearing in the two read sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Wupa,
    Atqa,
    Read,
    ReadResult,
    FastRead,
    FastReadResult,
    Halt,
    Anticollision,
    UidBcc,
    Select,
    Sak,
    Auth,
    CardNonce,
    ReaderAnswer,
    CardAnswer,
}

impl Command {
    pub const ALL: [Command; 15] = [
        Command::Wupa,
        Command::Atqa,
        Command::Read,
        Command::ReadResult,
        Command::FastRead,
        Command::FastReadResult,
        Command::Halt,
        Command::Anticollision,
        Command::UidBcc,
        Command::Select,
        Command::Sak,
        Command::Auth,
        Command::CardNonce,
        Command::ReaderAnswer,
        Command::CardAnswer,
    ];

    pub fn carries_crc(self) -> bool {
        use Command::*;
        match self {
            Wupa | Atqa | Anticollision | UidBcc | CardNonce | ReaderAnswer | CardAnswer => false,
            Read | ReadResult | FastRead | FastReadResult | Halt | Select | Sak | Auth => true,
        }
    }

    pub fn description(self) -> &'static str {
        use Command::*;
        match self {
            Wupa => "WUPA",
            Atqa => "ATQA",
            Read => "READ",
            ReadResult => "READ result",
            FastRead => "FAST READ",
            FastReadResult => "FAST READ result",
            Halt => "HALT",
            Anticollision => "SELECT",
            UidBcc => "UID + BCC",
            Select => "SELECT + UID",
            Sak => "SAK (MIFARE 1K)",
            Auth => "AUTH",
            CardNonce => "n_T",
            ReaderAnswer => "n_R xor ks1 + a_R xor ks2",
            CardAnswer => "a_T xor ks3",
        }
    }

    pub fn from_description(text: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.description() == text)
    }
}

/// One protocol frame: payload bytes without CRC, plus how it is framed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub sender: Sender,
    pub payload: Vec<u8>,
    pub frame_kind: FrameKind,
    pub description: String,
    /// Whether a CRC_A follows the payload on the air.
    pub crc: bool,
}

impl Message {
    pub fn new(
        sender: Sender,
        payload: Vec<u8>,
        frame_kind: FrameKind,
        description: impl Into<String>,
        crc: bool,
    ) -> Result<Self> {
        let msg = Self { sender, payload, frame_kind, description: description.into(), crc };
        msg.validate()?;
        Ok(msg)
    }

    fn command(sender: Sender, command: Command, payload: Vec<u8>) -> Self {
        let frame_kind = if command == Command::Wupa { FrameKind::Short } else { FrameKind::Standard };
        Self {
            sender,
            payload,
            frame_kind,
            description: command.description().to_owned(),
            crc: command.carries_crc(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.frame_kind {
            FrameKind::Short => {
                if self.payload.len() != 1 || self.payload[0] & 0x80 != 0 || self.crc {
                    return Err(Error::Structural(
                        "a short frame carries exactly one 7-bit byte and no CRC".into(),
                    ));
                }
            }
            FrameKind::Standard => {
                if self.payload.is_empty() {
                    return Err(Error::Structural("standard frame with empty payload".into()));
                }
            }
        }
        Ok(())
    }

    /// Payload followed by CRC_A when the frame carries one.
    pub fn wire_bytes(&self) -> Vec<u8> {
        let mut bytes = self.payload.clone();
        if self.crc {
            bytes.extend_from_slice(&crc_a(&self.payload));
        }
        bytes
    }

    /// Encoded length in bits.
    pub fn bit_len(&self) -> usize {
        match self.frame_kind {
            FrameKind::Short => 7,
            FrameKind::Standard => 9 * (self.payload.len() + if self.crc { 2 } else { 0 }),
        }
    }
}

/// CRC_A: x^16 + x^12 + x^5 + 1, register preset 0x6363, LSB first, no
/// final inversion. Returned low byte first, the order it is transmitted.
pub fn crc_a(payload: &[u8]) -> [u8; 2] {
    let mut crc: u16 = 0x6363;
    for &byte in payload {
        let mut t = (byte ^ (crc & 0x00FF) as u8) as u16;
        t = (t ^ (t << 4)) & 0x00FF;
        crc = (crc >> 8) ^ (t << 8) ^ (t << 3) ^ (t >> 4);
    }
    crc.to_le_bytes()
}

fn odd_parity(byte: u8) -> bool {
    byte.count_ones() % 2 == 0
}

/// Bits of `msg` as transmitted: data LSB first, odd parity after each byte
/// for standard frames.
pub fn encode_frame(msg: &Message) -> Result<Bits> {
    msg.validate()?;
    match msg.frame_kind {
        FrameKind::Short => Ok((0..7).map(|i| msg.payload[0] >> i & 1 == 1).collect()),
        FrameKind::Standard => {
            let bytes = msg.wire_bytes();
            let mut bits = Vec::with_capacity(bytes.len() * 9);
            for b in bytes {
                bits.extend((0..8).map(|i| b >> i & 1 == 1));
                bits.push(odd_parity(b));
            }
            Ok(bits)
        }
    }
}

/// Inverse of [`encode_frame`]: checks length, parity and (when
/// `expect_crc`) CRC_A, returning the payload without the CRC.
pub fn decode_frame(bits: &[bool], kind: FrameKind, expect_crc: bool) -> Result<Vec<u8>> {
    let byte_of = |chunk: &[bool]| -> u8 {
        chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b as u8) << i)
    };
    match kind {
        FrameKind::Short => {
            if bits.len() != 7 {
                return Err(Error::Framing(format!("short frame has {} bits, expected 7", bits.len())));
            }
            Ok(vec![byte_of(bits)])
        }
        FrameKind::Standard => {
            if bits.is_empty() || bits.len() % 9 != 0 {
                return Err(Error::Framing(format!(
                    "standard frame has {} bits, not a positive multiple of 9",
                    bits.len()
                )));
            }
            let mut bytes = Vec::with_capacity(bits.len() / 9);
            for (index, chunk) in bits.chunks_exact(9).enumerate() {
                let b = byte_of(&chunk[..8]);
                if chunk[8] != odd_parity(b) {
                    return Err(Error::Parity { index });
                }
                bytes.push(b);
            }
            if expect_crc {
                if bytes.len() < 3 {
                    return Err(Error::Framing(format!(
                        "{} bytes cannot hold a payload and a CRC_A",
                        bytes.len()
                    )));
                }
                let split = bytes.len() - 2;
                let expected = u16::from_le_bytes(crc_a(&bytes[..split]));
                let found = u16::from_le_bytes([bytes[split], bytes[split + 1]]);
                if expected != found {
                    return Err(Error::Crc { expected, found });
                }
                bytes.truncate(split);
            }
            Ok(bytes)
        }
    }
}

/// Decodes a frame using the framing the message declares.
pub fn decode_message_bits(bits: &[bool], template: &Message) -> Result<Vec<u8>> {
    decode_frame(bits, template.frame_kind, template.crc)
}

/// `'0'`/`'1'` text form used for golden files.
pub fn bits_to_text(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn text_to_bits(text: &str) -> Result<Bits> {
    text.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Format(format!("invalid bit character {other:?}"))),
        })
        .collect()
}

/// Card memory: 4-byte pages (Ultralight) or 16-byte blocks (Classic).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardMemory {
    pub kind: CardKind,
    pub uid: Vec<u8>,
    pub pages: Vec<Vec<u8>>,
}

impl CardMemory {
    pub fn unit_size(kind: CardKind) -> usize {
        match kind {
            CardKind::Ultralight => 4,
            CardKind::Classic => 16,
        }
    }

    pub fn new(kind: CardKind, uid: Vec<u8>, pages: Vec<Vec<u8>>) -> Result<Self> {
        let mem = Self { kind, uid, pages };
        mem.validate()?;
        Ok(mem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.uid.len() != 4 && self.uid.len() != 7 {
            return Err(Error::Parameter(format!("UID must be 4 or 7 bytes, got {}", self.uid.len())));
        }
        let size = Self::unit_size(self.kind);
        if let Some(i) = self.pages.iter().position(|p| p.len() != size) {
            return Err(Error::Parameter(format!("page {i} is not {size} bytes")));
        }
        Ok(())
    }

    /// Ultralight EV1 fixture: 20 pages of incrementing bytes.
    pub fn default_ultralight() -> Self {
        Self {
            kind: CardKind::Ultralight,
            uid: vec![0x04, 0xA1, 0xB2, 0xC3, 0xD4, 0xE5, 0xF6],
            pages: (0..0x14u8).map(|p| (0..4).map(|j| p * 4 + j).collect()).collect(),
        }
    }

    /// Classic 1K fixture: 64 blocks of incrementing bytes with the UID,
    /// BCC and manufacturer bytes in block 0.
    pub fn default_classic() -> Self {
        let uid = vec![0xDE, 0xAD, 0xBE, 0xEF];
        let mut pages: Vec<Vec<u8>> = (0..64u32)
            .map(|b| (0..16u32).map(|j| ((b * 16 + j) & 0xFF) as u8).collect())
            .collect();
        pages[0][..4].copy_from_slice(&uid);
        pages[0][4] = bcc(&uid);
        pages[0][5] = SAK_CLASSIC_1K;
        pages[0][6..8].copy_from_slice(&ATQA_CLASSIC_1K);
        Self { kind: CardKind::Classic, uid, pages }
    }

    /// Hex dump: a `uid` line, then one page per line.
    pub fn to_hex_dump(&self) -> String {
        let kind = match self.kind {
            CardKind::Ultralight => "ultralight",
            CardKind::Classic => "classic",
        };
        let mut out = format!("# {kind}\nuid: {}\n", hex_spaced(&self.uid));
        for (i, page) in self.pages.iter().enumerate() {
            let _ = writeln!(out, "{i:02x}: {}", hex_spaced(page));
        }
        out
    }

    pub fn from_hex_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let kind = match lines.next().map(str::trim) {
            Some("# ultralight") => CardKind::Ultralight,
            Some("# classic") => CardKind::Classic,
            other => return Err(Error::Format(format!("bad memory dump header {other:?}"))),
        };
        let uid_line = lines.next().ok_or_else(|| Error::Format("missing uid line".into()))?;
        let uid = uid_line
            .strip_prefix("uid:")
            .ok_or_else(|| Error::Format(format!("expected uid line, got {uid_line:?}")))?;
        let uid = parse_hex(uid)?;
        let mut pages = Vec::new();
        for (i, line) in lines.enumerate() {
            let (addr, data) = line
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("bad page line {line:?}")))?;
            let addr = usize::from_str_radix(addr.trim(), 16)
                .map_err(|e| Error::Format(format!("bad page address {addr:?}: {e}")))?;
            if addr != i {
                return Err(Error::Format(format!("page {addr:02x} out of order")));
            }
            pages.push(parse_hex(data)?);
        }
        Self::new(kind, uid, pages)
    }
}

/// Block check character: XOR of the UID bytes.
pub fn bcc(uid: &[u8]) -> u8 {
    uid.iter().fold(0, |acc, b| acc ^ b)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_spaced(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

pub fn parse_hex(text: &str) -> Result<Vec<u8>> {
    let digits: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if digits.len() % 2 != 0 {
        return Err(Error::Format(format!("odd number of hex digits in {text:?}")));
    }
    (0..digits.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&digits[i..i + 2], 16)
                .map_err(|e| Error::Format(format!("bad hex {:?}: {e}", &digits[i..i + 2])))
        })
        .collect()
}

/// One complete read session, in air order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<Message>,
    pub card_kind: CardKind,
    /// Seed of the opaque authentication bytes (Classic only).
    pub session_seed: Option<u64>,
}

impl Transcript {
    pub fn card_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.sender == Sender::Card)
    }

    pub fn reader_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.sender == Sender::Reader)
    }

    /// Copy with the per-session bytes regenerated from `seed`. Ultralight
    /// sessions carry no per-session data and are returned unchanged.
    pub fn rekeyed(&self, seed: u64) -> Transcript {
        match self.card_kind {
            CardKind::Ultralight => self.clone(),
            CardKind::Classic => {
                let mut out = self.clone();
                let stream = ClassicSessionBytes::generate(seed);
                for m in &mut out.messages {
                    match Command::from_description(&m.description) {
                        Some(Command::CardNonce) => m.payload = stream.card_nonce.to_vec(),
                        Some(Command::ReaderAnswer) => m.payload = stream.reader_answer.to_vec(),
                        Some(Command::CardAnswer) => m.payload = stream.card_answer.to_vec(),
                        Some(Command::ReadResult) => {
                            let plain = xor(&m.payload, &self.read_keystream());
                            m.payload = xor(&plain, &stream.read_keystream);
                        }
                        _ => {}
                    }
                }
                out.session_seed = Some(seed);
                out
            }
        }
    }

    fn read_keystream(&self) -> [u8; 16] {
        self.session_seed.map(|s| ClassicSessionBytes::generate(s).read_keystream).unwrap_or([0; 16])
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<MessageRecord> = self.messages.iter().map(MessageRecord::from).collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }

    /// Parses the JSON message array. The card kind is inferred from the
    /// session shape and the seed is not recorded in the array.
    pub fn from_json(text: &str) -> Result<Transcript> {
        let records: Vec<MessageRecord> = serde_json::from_str(text)?;
        let messages = records.into_iter().map(Message::try_from).collect::<Result<Vec<_>>>()?;
        let card_kind = if messages.iter().any(|m| m.description == Command::Auth.description()) {
            CardKind::Classic
        } else {
            CardKind::Ultralight
        };
        Ok(Transcript { messages, card_kind, session_seed: None })
    }
}

fn xor(a: &[u8], b: &[u8]) -> Vec<u8> {
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

/// JSON form of a [`Message`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub sender: Sender,
    pub hex_payload: String,
    pub frame_kind: FrameKind,
    pub description: String,
    pub crc: bool,
}

impl From<&Message> for MessageRecord {
    fn from(m: &Message) -> Self {
        Self {
            sender: m.sender,
            hex_payload: hex(&m.payload),
            frame_kind: m.frame_kind,
            description: m.description.clone(),
            crc: m.crc,
        }
    }
}

impl TryFrom<MessageRecord> for Message {
    type Error = Error;

    fn try_from(r: MessageRecord) -> Result<Message> {
        Message::new(r.sender, parse_hex(&r.hex_payload)?, r.frame_kind, r.description, r.crc)
    }
}

/// The MIFARE Ultralight EV1 session: WUPA, ATQA, READ 00h, its 16-byte
/// result, FAST READ 00h..13h, its 80-byte result, HALT.
pub fn ultralight_transcript(mem: &CardMemory) -> Result<Transcript> {
    mem.validate()?;
    if mem.kind != CardKind::Ultralight {
        return Err(Error::Parameter("ultralight session needs Ultralight memory".into()));
    }
    let needed = FAST_READ_END_PAGE as usize + 1;
    if mem.pages.len() < needed {
        return Err(Error::Parameter(format!(
            "FAST READ up to page {FAST_READ_END_PAGE:02x}h needs {needed} pages, memory has {}",
            mem.pages.len()
        )));
    }
    // READ returns four pages, rolling over past the last page
    let read: Vec<u8> = (0..4).flat_map(|p| mem.pages[p % mem.pages.len()].clone()).collect();
    let fast: Vec<u8> = mem.pages[..needed].concat();
    use Command::*;
    use Sender::*;
    let messages = vec![
        Message::command(Reader, Wupa, vec![WUPA]),
        Message::command(Card, Atqa, ATQA_ULTRALIGHT.to_vec()),
        Message::command(Reader, Read, vec![CMD_READ, 0x00]),
        Message::command(Card, ReadResult, read),
        Message::command(Reader, FastRead, vec![CMD_FAST_READ, 0x00, FAST_READ_END_PAGE]),
        Message::command(Card, FastReadResult, fast),
        Message::command(Reader, Halt, CMD_HALT.to_vec()),
    ];
    Ok(Transcript { messages, card_kind: CardKind::Ultralight, session_seed: None })
}

/// Opaque per-session bytes of a Classic authentication. CRYPTO-1 itself is
/// not modeled; these only need to vary from session to session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassicSessionBytes {
    pub card_nonce: [u8; 4],
    pub reader_answer: [u8; 8],
    pub card_answer: [u8; 4],
    pub read_keystream: [u8; 16],
}

impl ClassicSessionBytes {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self {
            card_nonce: [0; 4],
            reader_answer: [0; 8],
            card_answer: [0; 4],
            read_keystream: [0; 16],
        };
        rng.fill_bytes(&mut out.card_nonce);
        rng.fill_bytes(&mut out.reader_answer);
        rng.fill_bytes(&mut out.card_answer);
        rng.fill_bytes(&mut out.read_keystream);
        out
    }
}

/// The MIFARE Classic 1K session: wake-up, anticollision and select,
/// authentication to block 07h, an encrypted READ of that block, HALT.
pub fn classic_transcript(mem: &CardMemory, seed: u64) -> Result<Transcript> {
    mem.validate()?;
    if mem.kind != CardKind::Classic {
        return Err(Error::Parameter("classic session needs Classic memory".into()));
    }
    if mem.uid.len() != 4 {
        return Err(Error::Parameter("classic session models single-size (4-byte) UIDs".into()));
    }
    let block = CLASSIC_AUTH_BLOCK as usize;
    if mem.pages.len() <= block {
        return Err(Error::Parameter(format!("memory has no block {block:02x}h")));
    }
    let s = ClassicSessionBytes::generate(seed);
    let check = bcc(&mem.uid);
    let mut uid_bcc = mem.uid.clone();
    uid_bcc.push(check);
    let mut select = vec![SEL_CL1, NVB_SELECT];
    select.extend_from_slice(&uid_bcc);
    use Command::*;
    use Sender::*;
    let messages = vec![
        Message::command(Reader, Wupa, vec![WUPA]),
        Message::command(Card, Atqa, ATQA_CLASSIC_1K.to_vec()),
        Message::command(Reader, Anticollision, vec![SEL_CL1, NVB_ANTICOLLISION]),
        Message::command(Card, UidBcc, uid_bcc),
        Message::command(Reader, Select, select),
        Message::command(Card, Sak, vec![SAK_CLASSIC_1K]),
        Message::command(Reader, Auth, vec![CMD_AUTH_A, CLASSIC_AUTH_BLOCK]),
        Message::command(Card, CardNonce, s.card_nonce.to_vec()),
        Message::command(Reader, ReaderAnswer, s.reader_answer.to_vec()),
        Message::command(Card, CardAnswer, s.card_answer.to_vec()),
        Message::command(Reader, Read, vec![CMD_READ, CLASSIC_AUTH_BLOCK]),
        Message::command(Card, ReadResult, xor(&mem.pages[block], &s.read_keystream)),
        Message::command(Reader, Halt, CMD_HALT.to_vec()),
    ];
    Ok(Transcript { messages, card_kind: CardKind::Classic, session_seed: Some(seed) })
}
