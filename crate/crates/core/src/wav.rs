//! Minimal RIFF/WAVE reader and writer.
//!
//! Supports the formats the harness actually produces and consumes:
//! integer PCM (16/24/32 bit), IEEE float (32/64 bit) and the
//! WAVE_FORMAT_EXTENSIBLE wrappers around both. Multi-channel files are
//! averaged down to mono. The decoder is fed untrusted bytes (it is a
//! fuzz target), so every read is bounds-checked and allocations are
//! capped by what the buffer can actually hold.

use crate::error::{Error, Result};

const FMT_PCM: u16 = 0x0001;
const FMT_IEEE_FLOAT: u16 = 0x0003;
const FMT_EXTENSIBLE: u16 = 0xFFFE;

/// Decoded mono audio.
#[derive(Debug, Clone)]
pub struct WavData {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Wav(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<[u8; 4]> {
        let b = self.take(4)?;
        Ok([b[0], b[1], b[2], b[3]])
    }
}

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn parse_fmt(chunk: &[u8]) -> Result<Fmt> {
    let mut r = Reader { buf: chunk, pos: 0 };
    let mut format = r.u16()?;
    let channels = r.u16()?;
    let sample_rate = r.u32()?;
    let _byte_rate = r.u32()?;
    let _block_align = r.u16()?;
    let bits = r.u16()?;
    if format == FMT_EXTENSIBLE {
        let cb_size = r.u16()?;
        if cb_size < 22 {
            return Err(err("extensible fmt chunk too short"));
        }
        let _valid_bits = r.u16()?;
        let _channel_mask = r.u32()?;
        // First two GUID bytes carry the wrapped format code.
        format = r.u16()?;
    }
    Ok(Fmt {
        format,
        channels,
        sample_rate,
        bits,
    })
}

/// Decode a WAV file from raw bytes, downmixing to mono.
pub fn decode(bytes: &[u8]) -> Result<WavData> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if &r.tag()? != b"RIFF" {
        return Err(err("missing RIFF header"));
    }
    let _riff_len = r.u32()?;
    if &r.tag()? != b"WAVE" {
        return Err(err("missing WAVE tag"));
    }

    let mut fmt: Option<Fmt> = None;
    let mut data: Option<&[u8]> = None;
    while r.pos < r.buf.len() {
        // A trailing odd pad byte is tolerated.
        if r.buf.len() - r.pos < 8 {
            break;
        }
        let tag = r.tag()?;
        let len = r.u32()? as usize;
        let chunk = r.take(len.min(r.buf.len() - r.pos))?;
        if chunk.len() < len && &tag == b"data" {
            return Err(err("data chunk shorter than declared"));
        }
        match &tag {
            b"fmt " => fmt = Some(parse_fmt(chunk)?),
            b"data" => {
                data = Some(chunk);
                // fmt almost always precedes data; stop once both are seen.
                if fmt.is_some() {
                    break;
                }
            }
            _ => {}
        }
        // Chunks are word-aligned.
        if len % 2 == 1 && r.pos < r.buf.len() {
            r.pos += 1;
        }
    }

    let fmt = fmt.ok_or_else(|| err("missing fmt chunk"))?;
    let data = data.ok_or_else(|| err("missing data chunk"))?;
    if fmt.channels == 0 {
        return Err(err("zero channels"));
    }
    if fmt.sample_rate == 0 {
        return Err(err("zero sample rate"));
    }

    let bytes_per = match (fmt.format, fmt.bits) {
        (FMT_PCM, 16) => 2,
        (FMT_PCM, 24) => 3,
        (FMT_PCM, 32) => 4,
        (FMT_IEEE_FLOAT, 32) => 4,
        (FMT_IEEE_FLOAT, 64) => 8,
        (f, b) => return Err(err(format!("unsupported format {f} / {b} bits"))),
    };
    let frame_size = bytes_per * fmt.channels as usize;
    let n_frames = data.len() / frame_size;
    if n_frames == 0 {
        return Err(err("empty data chunk"));
    }

    let mut samples = Vec::with_capacity(n_frames);
    let inv_ch = 1.0 / f64::from(fmt.channels);
    for f in 0..n_frames {
        let frame = &data[f * frame_size..(f + 1) * frame_size];
        let mut acc = 0.0;
        for c in 0..fmt.channels as usize {
            let s = &frame[c * bytes_per..(c + 1) * bytes_per];
            let v = match (fmt.format, fmt.bits) {
                (FMT_PCM, 16) => f64::from(i16::from_le_bytes([s[0], s[1]])) / 32768.0,
                (FMT_PCM, 24) => {
                    let raw = i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8;
                    f64::from(raw) / 8_388_608.0
                }
                (FMT_PCM, 32) => {
                    f64::from(i32::from_le_bytes([s[0], s[1], s[2], s[3]])) / 2_147_483_648.0
                }
                (FMT_IEEE_FLOAT, 32) => {
                    f64::from(f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
                }
                (FMT_IEEE_FLOAT, 64) => f64::from_le_bytes([
                    s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7],
                ]),
                _ => unreachable!(),
            };
            acc += v;
        }
        samples.push(acc * inv_ch);
    }

    if samples.iter().any(|v| !v.is_finite()) {
        return Err(err("non-finite sample values"));
    }

    Ok(WavData {
        samples,
        sample_rate: fmt.sample_rate,
    })
}

/// Encode mono samples as 16-bit PCM, clamping to [-1, 1].
pub fn encode_pcm16(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FMT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Encode mono samples as 32-bit IEEE float.
pub fn encode_f32(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 4;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FMT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 4).to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}
