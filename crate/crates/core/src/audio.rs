//! Minimal RIFF WAV reader/writer.
//!
//! Supports the two encodings the engine produces and consumes: 16-bit PCM
//! (format tag 1) and 32-bit IEEE float (format tag 3), mono or interleaved
//! multichannel. Unknown chunks are skipped. Samples are exchanged as `f32`
//! in [-1, 1]; PCM16 is scaled by 1/32768.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

/// Decoded WAV: one `Vec<f32>` per channel, all the same length.
#[derive(Debug, Clone)]
pub struct Wave {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f32>>,
}

impl Wave {
    pub fn mono(sample_rate: u32, samples: Vec<f32>) -> Self {
        Wave { sample_rate, channels: vec![samples] }
    }

    pub fn len(&self) -> usize {
        self.channels.first().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn rd_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn rd_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read_wav(path: &Path) -> Result<Wave> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Audio(msg) => Error::Audio(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

pub fn parse_wav(bytes: &[u8]) -> Result<Wave> {
    let bad = |m: &str| Error::Audio(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = rd_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(bad("chunk overruns file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                fmt = Some((
                    rd_u16(bytes, body),
                    rd_u16(bytes, body + 2),
                    rd_u32(bytes, body + 4),
                    rd_u16(bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        pos = body + size + (size & 1); // chunks are word-aligned
    }
    let (tag, n_ch, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if n_ch == 0 {
        return Err(bad("zero channels"));
    }
    let n_ch = n_ch as usize;
    let decode = |bytes_per: usize| -> Result<Vec<Vec<f32>>> {
        if data.len() % (bytes_per * n_ch) != 0 {
            return Err(bad("data chunk not a whole number of frames"));
        }
        let frames = data.len() / (bytes_per * n_ch);
        let mut chans = vec![Vec::with_capacity(frames); n_ch];
        for fr in 0..frames {
            for (c, chan) in chans.iter_mut().enumerate() {
                let at = (fr * n_ch + c) * bytes_per;
                let v = match bytes_per {
                    2 => i16::from_le_bytes([data[at], data[at + 1]]) as f32 / 32768.0,
                    4 => f32::from_le_bytes([
                        data[at],
                        data[at + 1],
                        data[at + 2],
                        data[at + 3],
                    ]),
                    _ => unreachable!(),
                };
                chan.push(v);
            }
        }
        Ok(chans)
    };
    let channels = match (tag, bits) {
        (1, 16) => decode(2)?,
        (3, 32) => decode(4)?,
        _ => {
            return Err(bad(&format!(
                "unsupported encoding (format tag {}, {} bits); expected PCM16 or float32",
                tag, bits
            )))
        }
    };
    Ok(Wave { sample_rate: rate, channels })
}

pub fn write_wav(path: &Path, wave: &Wave, format: SampleFormat) -> Result<()> {
    if wave.channels.is_empty() {
        return Err(Error::invalid("cannot write a WAV with zero channels"));
    }
    let len = wave.channels[0].len();
    if wave.channels.iter().any(|c| c.len() != len) {
        return Err(Error::contract("all channels must have equal length"));
    }
    let n_ch = wave.channels.len() as u16;
    let (tag, bits): (u16, u16) = match format {
        SampleFormat::Pcm16 => (1, 16),
        SampleFormat::Float32 => (3, 32),
    };
    let bytes_per = (bits / 8) as u32;
    let data_len = len as u32 * n_ch as u32 * bytes_per;
    let byte_rate = wave.sample_rate * n_ch as u32 * bytes_per;
    let block_align = n_ch * bits / 8;

    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&n_ch.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for fr in 0..len {
        for chan in &wave.channels {
            match format {
                SampleFormat::Pcm16 => {
                    let v = (chan[fr] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&v.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&chan[fr].to_le_bytes()),
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float32_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = Wave {
            sample_rate: 16000,
            channels: vec![vec![0.0, 0.5, -0.25, 1.0e-7], vec![1.0, -1.0, 0.125, 0.0]],
        };
        write_wav(&p, &w, SampleFormat::Float32).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.channels, w.channels);
    }

    #[test]
    fn pcm16_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = Wave::mono(16000, vec![0.0, 0.5, -0.5, 0.999]);
        write_wav(&p, &w, SampleFormat::Pcm16).unwrap();
        let r = read_wav(&p).unwrap();
        for (a, b) in r.channels[0].iter().zip(&w.channels[0]) {
            assert!((a - b).abs() < 1.0 / 32000.0, "{} vs {}", a, b);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_wav(b"not a wav at all").is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = Wave::mono(16000, vec![0.25, -0.25]);
        write_wav(&p, &w, SampleFormat::Float32).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // splice a LIST chunk between fmt and data
        let mut spliced = bytes[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&4u32.to_le_bytes());
        spliced.extend_from_slice(b"info");
        spliced.extend_from_slice(&bytes[36..]);
        let riff_len = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&riff_len.to_le_bytes());
        bytes = spliced;
        let r = parse_wav(&bytes).unwrap();
        assert_eq!(r.channels[0], vec![0.25, -0.25]);
    }
}
