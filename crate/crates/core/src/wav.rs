//! Minimal RIFF/WAVE reader and writer for 16 kHz mono 16-bit PCM.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct WavAudio {
    /// Samples scaled to [-1, 1) by 1/32768.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Wav(format!("malformed header: {}", msg.into()))
}

pub fn parse_wav(bytes: &[u8]) -> Result<WavAudio> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE signature"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                malformed(format!(
                    "chunk '{}' runs past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk shorter than 16 bytes"));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (audio_format, channels, sample_rate, bits) =
                    format.ok_or_else(|| malformed("data chunk before fmt chunk"))?;
                if audio_format != 1 || bits != 16 {
                    return Err(Error::Wav(format!(
                        "unsupported encoding (format tag {audio_format}, {bits} bits); need 16-bit PCM"
                    )));
                }
                if channels != 1 {
                    return Err(Error::Wav(format!(
                        "unsupported channel count {channels}; need mono"
                    )));
                }
                if sample_rate != SAMPLE_RATE {
                    return Err(Error::Wav(format!(
                        "unsupported sample rate {sample_rate} Hz; need {SAMPLE_RATE}"
                    )));
                }
                if !size.is_multiple_of(2) {
                    return Err(malformed("odd data chunk size for 16-bit samples"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                    .collect();
                return Ok(WavAudio {
                    samples,
                    sample_rate,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    Err(malformed("no data chunk"))
}

pub fn read_wav(path: &Path) -> Result<WavAudio> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Wav(msg) => Error::Wav(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serializes 16 kHz mono PCM16 with a canonical 44-byte header.
pub fn encode_wav(samples: &[i16]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    std::fs::write(path, encode_wav(samples)).map_err(|e| Error::io(path, e))
}

/// Rounds and clamps `[-1, 1]` amplitudes to PCM16.
pub fn to_pcm16(samples: &[f64]) -> Vec<i16> {
    samples
        .iter()
        .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_format(channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut b = encode_wav(&[]);
        b[22..24].copy_from_slice(&channels.to_le_bytes());
        b[24..28].copy_from_slice(&rate.to_le_bytes());
        b[34..36].copy_from_slice(&bits.to_le_bytes());
        b[40..44].copy_from_slice(&(data.len() as u32).to_le_bytes());
        b.extend_from_slice(data);
        b
    }

    #[test]
    fn scales_by_32768() {
        let w = parse_wav(&encode_wav(&[16384])).unwrap();
        assert_eq!(w.samples, vec![0.5]);
        let w = parse_wav(&encode_wav(&[-32768, 32767])).unwrap();
        assert_eq!(w.samples[0], -1.0);
        assert!(w.samples[1] < 1.0);
        assert_eq!(w.sample_rate, 16_000);
    }

    #[test]
    fn rejects_stereo() {
        let err = parse_wav(&with_format(2, 16_000, 16, &[0, 0, 0, 0])).unwrap_err();
        assert!(err.to_string().contains("unsupported channel count"), "{err}");
    }

    #[test]
    fn rejects_other_rates_and_depths() {
        let err = parse_wav(&with_format(1, 44_100, 16, &[0, 0])).unwrap_err();
        assert!(err.to_string().contains("sample rate"), "{err}");
        let err = parse_wav(&with_format(1, 16_000, 8, &[0, 0])).unwrap_err();
        assert!(err.to_string().contains("unsupported encoding"), "{err}");
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(parse_wav(b"not a wav file at all").is_err());
        let mut b = encode_wav(&[1, 2, 3]);
        b.truncate(b.len() - 1);
        assert!(parse_wav(&b).unwrap_err().to_string().contains("malformed"));
    }

    #[test]
    fn skips_unknown_chunks() {
        let base = encode_wav(&[100, -100]);
        let mut b = base[..36].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]); // odd size plus pad byte
        b.extend_from_slice(&base[36..]);
        let w = parse_wav(&b).unwrap();
        assert_eq!(w.samples.len(), 2);
    }

    #[test]
    fn pcm16_round_trip() {
        let pcm = vec![0i16, 1, -1, 12345, -32768, 32767];
        let w = parse_wav(&encode_wav(&pcm)).unwrap();
        assert_eq!(to_pcm16(&w.samples), pcm);
    }
}
