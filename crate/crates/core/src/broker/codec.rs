//! Bit-exact MQTT 3.1.1 codec for the supported subset: QoS 0/1, clean
//! sessions, no retain, no will, no credentials.

use bytes::Bytes;
use thiserror::Error;

use super::topic::{TopicError, TopicFilter, TopicName};

pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
const PROTOCOL_NAME: &[u8] = b"MQTT";
const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed packet: {0}")]
    Malformed(String),
    /// More bytes are needed; retry once they arrive.
    #[error("truncated packet")]
    Truncated,
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("remaining length {0} out of range")]
    OutOfRange(usize),
    #[error("packet of {0} bytes exceeds the configured maximum")]
    TooLarge(usize),
}

impl From<TopicError> for CodecError {
    fn from(e: TopicError) -> Self {
        CodecError::Malformed(e.to_string())
    }
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    fn from_bits(bits: u8) -> Result<Self, CodecError> {
        match bits {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Err(CodecError::UnsupportedFeature("QoS 2".into())),
            _ => Err(malformed("QoS 3 is reserved")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubackCode {
    Granted(QoS),
    Failure,
}

impl SubackCode {
    fn to_byte(self) -> u8 {
        match self {
            SubackCode::Granted(q) => q as u8,
            SubackCode::Failure => 0x80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: TopicName,
    pub payload: Bytes,
    pub qos: QoS,
    pub packet_id: Option<u16>,
    pub dup: bool,
}

impl Publish {
    pub fn qos0(topic: TopicName, payload: impl Into<Bytes>) -> Self {
        Publish {
            topic,
            payload: payload.into(),
            qos: QoS::AtMostOnce,
            packet_id: None,
            dup: false,
        }
    }

    pub fn qos1(topic: TopicName, payload: impl Into<Bytes>, packet_id: u16) -> Self {
        Publish {
            topic,
            payload: payload.into(),
            qos: QoS::AtLeastOnce,
            packet_id: Some(packet_id),
            dup: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect { client_id: String, keep_alive_s: u16 },
    Connack { return_code: u8 },
    Publish(Publish),
    Puback { packet_id: u16 },
    Subscribe { packet_id: u16, filters: Vec<(TopicFilter, QoS)> },
    Suback { packet_id: u16, granted: Vec<SubackCode> },
    Unsubscribe { packet_id: u16, filters: Vec<TopicFilter> },
    Unsuback { packet_id: u16 },
    Pingreq,
    Pingresp,
    Disconnect,
}

pub fn encode_remaining_length(n: usize) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(4);
    put_remaining_length(n, &mut out)?;
    Ok(out)
}

fn put_remaining_length(mut n: usize, out: &mut Vec<u8>) -> Result<(), CodecError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(CodecError::OutOfRange(n));
    }
    loop {
        let mut byte = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if n == 0 {
            return Ok(());
        }
    }
}

/// Returns `(value, bytes consumed)`.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<(usize, usize), CodecError> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for i in 0..4 {
        let Some(&byte) = bytes.get(i) else {
            return Err(CodecError::Truncated);
        };
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        multiplier *= 128;
    }
    Err(malformed("remaining length uses more than four bytes"))
}

fn put_u16(v: u16, out: &mut Vec<u8>) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(s: &str, out: &mut Vec<u8>) {
    put_u16(s.len() as u16, out);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_packet(p: &Packet) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(p, &mut out);
    out
}

/// Appends the encoded packet to `out`.
pub fn encode_into(p: &Packet, out: &mut Vec<u8>) {
    let mut body = Vec::new();
    let header: u8 = match p {
        Packet::Connect { client_id, keep_alive_s } => {
            put_str("MQTT", &mut body);
            body.push(PROTOCOL_LEVEL);
            body.push(0x02); // clean session
            put_u16(*keep_alive_s, &mut body);
            put_str(client_id, &mut body);
            0x10
        }
        Packet::Connack { return_code } => {
            body.extend_from_slice(&[0x00, *return_code]);
            0x20
        }
        Packet::Publish(publish) => {
            put_str(publish.topic.as_str(), &mut body);
            if let Some(id) = publish.packet_id {
                put_u16(id, &mut body);
            }
            body.extend_from_slice(&publish.payload);
            0x30 | (u8::from(publish.dup) << 3) | ((publish.qos as u8) << 1)
        }
        Packet::Puback { packet_id } => {
            put_u16(*packet_id, &mut body);
            0x40
        }
        Packet::Subscribe { packet_id, filters } => {
            put_u16(*packet_id, &mut body);
            for (filter, qos) in filters {
                put_str(filter.as_str(), &mut body);
                body.push(*qos as u8);
            }
            0x82
        }
        Packet::Suback { packet_id, granted } => {
            put_u16(*packet_id, &mut body);
            body.extend(granted.iter().map(|g| g.to_byte()));
            0x90
        }
        Packet::Unsubscribe { packet_id, filters } => {
            put_u16(*packet_id, &mut body);
            for filter in filters {
                put_str(filter.as_str(), &mut body);
            }
            0xA2
        }
        Packet::Unsuback { packet_id } => {
            put_u16(*packet_id, &mut body);
            0xB0
        }
        Packet::Pingreq => 0xC0,
        Packet::Pingresp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    out.push(header);
    put_remaining_length(body.len(), out).expect("packet body exceeds MQTT maximum");
    out.extend_from_slice(&body);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| malformed("body shorter than declared fields"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let hi = self.u8()?;
        let lo = self.u8()?;
        Ok(u16::from_be_bytes([hi, lo]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(malformed("body shorter than declared fields"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn string(&mut self) -> Result<&'a str, CodecError> {
        let len = self.u16()? as usize;
        let raw = self.bytes(len)?;
        let s = std::str::from_utf8(raw).map_err(|_| malformed("string is not UTF-8"))?;
        if s.contains('\0') {
            return Err(malformed("string contains U+0000"));
        }
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(malformed("trailing bytes in packet body"));
        }
        Ok(())
    }
}

fn nonzero_id(id: u16) -> Result<u16, CodecError> {
    if id == 0 {
        Err(malformed("packet identifier 0"))
    } else {
        Ok(id)
    }
}

pub fn decode_packet(bytes: &[u8]) -> Result<(Packet, usize), CodecError> {
    decode_packet_limited(bytes, MAX_REMAINING_LENGTH)
}

/// Like [`decode_packet`] but rejects packets whose remaining length
/// exceeds `max_remaining` before buffering the body.
pub fn decode_packet_limited(
    bytes: &[u8],
    max_remaining: usize,
) -> Result<(Packet, usize), CodecError> {
    let Some(&header) = bytes.first() else {
        return Err(CodecError::Truncated);
    };
    let (len, len_bytes) = decode_remaining_length(&bytes[1..])?;
    if len > max_remaining {
        return Err(CodecError::TooLarge(len));
    }
    let start = 1 + len_bytes;
    let total = start + len;
    if bytes.len() < total {
        return Err(CodecError::Truncated);
    }
    let packet = decode_body(header, &bytes[start..total])?;
    Ok((packet, total))
}

fn expect_flags(header: u8, flags: u8) -> Result<(), CodecError> {
    if header & 0x0F != flags {
        return Err(malformed(format!(
            "invalid fixed header flags {:#06b} for packet type {}",
            header & 0x0F,
            header >> 4
        )));
    }
    Ok(())
}

fn decode_body(header: u8, body: &[u8]) -> Result<Packet, CodecError> {
    let mut r = Reader::new(body);
    let packet = match header >> 4 {
        1 => {
            expect_flags(header, 0)?;
            let name = r.bytes(2).and_then(|l| {
                let n = u16::from_be_bytes([l[0], l[1]]) as usize;
                r.bytes(n)
            })?;
            if name != PROTOCOL_NAME {
                return Err(malformed("protocol name is not MQTT"));
            }
            let level = r.u8()?;
            if level != PROTOCOL_LEVEL {
                return Err(CodecError::UnsupportedFeature(format!(
                    "protocol level {level}"
                )));
            }
            let flags = r.u8()?;
            if flags & 0x01 != 0 {
                return Err(malformed("reserved connect flag set"));
            }
            if flags & 0x04 != 0 {
                return Err(CodecError::UnsupportedFeature("will message".into()));
            }
            if flags & 0x38 != 0 {
                return Err(malformed("will QoS/retain set without will flag"));
            }
            if flags & 0xC0 != 0 {
                return Err(CodecError::UnsupportedFeature("credentials".into()));
            }
            if flags & 0x02 == 0 {
                return Err(CodecError::UnsupportedFeature("persistent session".into()));
            }
            let keep_alive_s = r.u16()?;
            let client_id = r.string()?.to_owned();
            Packet::Connect {
                client_id,
                keep_alive_s,
            }
        }
        2 => {
            expect_flags(header, 0)?;
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(malformed("reserved connack flags set"));
            }
            if ack_flags & 0x01 != 0 {
                return Err(CodecError::UnsupportedFeature("session present".into()));
            }
            Packet::Connack {
                return_code: r.u8()?,
            }
        }
        3 => {
            let dup = header & 0x08 != 0;
            let qos = QoS::from_bits((header >> 1) & 0x03)?;
            if header & 0x01 != 0 {
                return Err(CodecError::UnsupportedFeature("retained message".into()));
            }
            if dup && qos == QoS::AtMostOnce {
                return Err(malformed("DUP set on a QoS 0 publish"));
            }
            let topic = TopicName::new(r.string()?)?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(nonzero_id(r.u16()?)?),
            };
            let payload = Bytes::copy_from_slice(r.rest());
            Packet::Publish(Publish {
                topic,
                payload,
                qos,
                packet_id,
                dup,
            })
        }
        4 => {
            expect_flags(header, 0)?;
            Packet::Puback {
                packet_id: nonzero_id(r.u16()?)?,
            }
        }
        5..=7 => return Err(CodecError::UnsupportedFeature("QoS 2 flow".into())),
        8 => {
            expect_flags(header, 0x02)?;
            let packet_id = nonzero_id(r.u16()?)?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let filter = TopicFilter::new(r.string()?)?;
                let opts = r.u8()?;
                if opts & 0xFC != 0 {
                    return Err(malformed("reserved subscription option bits set"));
                }
                // A QoS 2 request is granted at the supported maximum.
                let qos = match opts & 0x03 {
                    0 => QoS::AtMostOnce,
                    1 | 2 => QoS::AtLeastOnce,
                    _ => return Err(malformed("requested QoS 3")),
                };
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(malformed("subscribe without filters"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            expect_flags(header, 0)?;
            let packet_id = nonzero_id(r.u16()?)?;
            let granted = r
                .rest()
                .iter()
                .map(|b| match b {
                    0 => Ok(SubackCode::Granted(QoS::AtMostOnce)),
                    1 => Ok(SubackCode::Granted(QoS::AtLeastOnce)),
                    2 => Err(CodecError::UnsupportedFeature("QoS 2 grant".into())),
                    0x80 => Ok(SubackCode::Failure),
                    other => Err(malformed(format!("suback return code {other:#x}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Packet::Suback { packet_id, granted }
        }
        10 => {
            expect_flags(header, 0x02)?;
            let packet_id = nonzero_id(r.u16()?)?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                filters.push(TopicFilter::new(r.string()?)?);
            }
            if filters.is_empty() {
                return Err(malformed("unsubscribe without filters"));
            }
            Packet::Unsubscribe { packet_id, filters }
        }
        11 => {
            expect_flags(header, 0)?;
            Packet::Unsuback {
                packet_id: nonzero_id(r.u16()?)?,
            }
        }
        12 => {
            expect_flags(header, 0)?;
            Packet::Pingreq
        }
        13 => {
            expect_flags(header, 0)?;
            Packet::Pingresp
        }
        14 => {
            expect_flags(header, 0)?;
            Packet::Disconnect
        }
        t => return Err(malformed(format!("reserved packet type {t}"))),
    };
    r.finish()?;
    Ok(packet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remaining_length_vectors() {
        assert_eq!(encode_remaining_length(0).unwrap(), vec![0x00]);
        assert_eq!(encode_remaining_length(127).unwrap(), vec![0x7F]);
        assert_eq!(encode_remaining_length(128).unwrap(), vec![0x80, 0x01]);
        assert_eq!(encode_remaining_length(321).unwrap(), vec![0xC1, 0x02]);
        assert_eq!(
            encode_remaining_length(MAX_REMAINING_LENGTH).unwrap(),
            vec![0xFF, 0xFF, 0xFF, 0x7F]
        );
        assert_eq!(
            encode_remaining_length(MAX_REMAINING_LENGTH + 1),
            Err(CodecError::OutOfRange(MAX_REMAINING_LENGTH + 1))
        );
        assert_eq!(decode_remaining_length(&[0x00]).unwrap(), (0, 1));
        assert_eq!(decode_remaining_length(&[0xC1, 0x02]).unwrap(), (321, 2));
        assert!(matches!(
            decode_remaining_length(&[0x80, 0x80, 0x80, 0x80, 0x01]),
            Err(CodecError::Malformed(_))
        ));
        assert_eq!(decode_remaining_length(&[0x80]), Err(CodecError::Truncated));
    }

    #[test]
    fn fixed_byte_vectors() {
        assert_eq!(encode_packet(&Packet::Pingreq), vec![0xC0, 0x00]);
        assert_eq!(
            encode_packet(&Packet::Puback { packet_id: 1 }),
            vec![0x40, 0x02, 0x00, 0x01]
        );
        assert_eq!(
            encode_packet(&Packet::Connect {
                client_id: "a".into(),
                keep_alive_s: 60
            }),
            vec![0x10, 13, 0, 4, b'M', b'Q', b'T', b'T', 4, 0x02, 0, 60, 0, 1, b'a']
        );
    }

    #[test]
    fn truncated_is_resumable() {
        let bytes = encode_packet(&Packet::Publish(Publish::qos1(
            TopicName::new("a/b").unwrap(),
            vec![1, 2, 3],
            9,
        )));
        for cut in 0..bytes.len() {
            assert_eq!(decode_packet(&bytes[..cut]), Err(CodecError::Truncated));
        }
        assert_eq!(decode_packet(&bytes).unwrap().1, bytes.len());
    }

    #[test]
    fn unsupported_features_rejected() {
        // QoS 2 publish
        let qos2 = [0x34, 0x07, 0x00, 0x01, b'a', 0x00, 0x01, 0xAA, 0xBB];
        assert!(matches!(
            decode_packet(&qos2),
            Err(CodecError::UnsupportedFeature(_))
        ));
        // retained publish
        assert!(matches!(
            decode_packet(&[0x31, 0x03, 0x00, 0x01, b'a']),
            Err(CodecError::UnsupportedFeature(_))
        ));
        // PUBREC
        assert!(matches!(
            decode_packet(&[0x50, 0x02, 0x00, 0x01]),
            Err(CodecError::UnsupportedFeature(_))
        ));
        // CONNECT with will flag
        let mut connect = encode_packet(&Packet::Connect {
            client_id: "a".into(),
            keep_alive_s: 0,
        });
        connect[9] |= 0x04;
        assert!(matches!(
            decode_packet(&connect),
            Err(CodecError::UnsupportedFeature(_))
        ));
        connect[9] = 0x02 | 0x80;
        assert!(matches!(
            decode_packet(&connect),
            Err(CodecError::UnsupportedFeature(_))
        ));
    }

    #[test]
    fn malformed_inputs() {
        // packet id 0 on QoS 1 publish
        assert!(matches!(
            decode_packet(&[0x32, 0x05, 0x00, 0x01, b'a', 0x00, 0x00]),
            Err(CodecError::Malformed(_))
        ));
        // wildcard in publish topic
        assert!(matches!(
            decode_packet(&[0x30, 0x03, 0x00, 0x01, b'#']),
            Err(CodecError::Malformed(_))
        ));
        // subscribe with wrong flags
        assert!(matches!(
            decode_packet(&[0x80, 0x06, 0x00, 0x01, 0x00, 0x01, b'a', 0x00]),
            Err(CodecError::Malformed(_))
        ));
        // pingreq with body
        assert!(matches!(
            decode_packet(&[0xC0, 0x01, 0x00]),
            Err(CodecError::Malformed(_))
        ));
        // reserved type 15
        assert!(matches!(
            decode_packet(&[0xF0, 0x00]),
            Err(CodecError::Malformed(_))
        ));
    }

    #[test]
    fn size_limit_checked_before_body() {
        let header = [0x30, 0xFF, 0xFF, 0x7F];
        assert_eq!(
            decode_packet_limited(&header, 1024),
            Err(CodecError::TooLarge(0x1F_FFFF))
        );
    }
}
