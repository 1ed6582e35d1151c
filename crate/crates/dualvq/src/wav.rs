//! Mono PCM16 RIFF/WAVE reading and writing.
//!
//! The reader accepts exactly the subset the pipeline produces: RIFF/WAVE,
//! PCM format 1, one channel, 16 bits. Unknown chunks are skipped; anything
//! else is rejected with a format diagnostic. Samples map to `[-1, 1]` by
//! dividing by 32768, so write∘read is identity up to one 16-bit step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/WAVE file: {0}")]
    NotWave(&'static str),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("malformed wav: {0}")]
    Malformed(&'static str),
    #[error("empty audio")]
    Empty,
}

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), WavError> {
    r.read_exact(buf).map_err(|_| WavError::Malformed(what))
}

fn u16le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parse a mono PCM16 WAV from any reader.
pub fn read_wav_from(mut r: impl Read) -> Result<AudioSignal, WavError> {
    let mut hdr = [0u8; 12];
    read_exact_or(&mut r, &mut hdr, "truncated RIFF header")?;
    if &hdr[0..4] != b"RIFF" {
        return Err(WavError::NotWave("missing RIFF tag"));
    }
    if &hdr[8..12] != b"WAVE" {
        return Err(WavError::NotWave("missing WAVE tag"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    loop {
        let mut chunk = [0u8; 8];
        if r.read_exact(&mut chunk).is_err() {
            return Err(WavError::Malformed("no data chunk"));
        }
        let id = &chunk[0..4];
        let size = u32le(&chunk[4..8]) as usize;
        if id == b"fmt " {
            if size < 16 {
                return Err(WavError::Malformed("fmt chunk too short"));
            }
            let mut body = [0u8; 16];
            read_exact_or(&mut r, &mut body, "truncated fmt chunk")?;
            let format = u16le(&body[0..2]);
            let channels = u16le(&body[2..4]);
            let rate = u32le(&body[4..8]);
            let bits = u16le(&body[14..16]);
            fmt = Some((format, channels, rate, bits));
            skip(&mut r, size - 16)?;
        } else if id == b"data" {
            let (format, channels, rate, bits) =
                fmt.ok_or(WavError::Malformed("data chunk before fmt"))?;
            if format != 1 {
                return Err(WavError::Unsupported(format!(
                    "wave format code {format}, only PCM (1) is supported"
                )));
            }
            if channels != 1 {
                return Err(WavError::Unsupported(format!(
                    "{channels} channels, only mono is supported"
                )));
            }
            if bits != 16 {
                return Err(WavError::Unsupported(format!(
                    "{bits}-bit samples, only 16-bit is supported"
                )));
            }
            if rate == 0 {
                return Err(WavError::Malformed("zero sample rate"));
            }
            let n = size / 2;
            if n == 0 {
                return Err(WavError::Empty);
            }
            let mut samples = Vec::new();
            let mut buf = [0u8; 4096];
            let mut remaining = n * 2;
            let mut carry: Option<u8> = None;
            while remaining > 0 {
                let take = remaining.min(buf.len());
                let got = r.read(&mut buf[..take])?;
                if got == 0 {
                    return Err(WavError::Malformed("data chunk truncated"));
                }
                let mut start = 0;
                if let Some(lo) = carry.take() {
                    let s = i16::from_le_bytes([lo, buf[0]]);
                    samples.push(s as f64 / 32768.0);
                    start = 1;
                }
                let mut pairs = buf[start..got].chunks_exact(2);
                for pair in &mut pairs {
                    let s = i16::from_le_bytes([pair[0], pair[1]]);
                    samples.push(s as f64 / 32768.0);
                }
                if let [lo] = pairs.remainder() {
                    carry = Some(*lo);
                }
                remaining -= got;
            }
            if samples.is_empty() {
                return Err(WavError::Empty);
            }
            return Ok(AudioSignal::new(samples, rate));
        } else {
            // pad byte keeps chunks 16-bit aligned
            skip(&mut r, size + (size & 1))?;
        }
    }
}

fn skip(r: &mut impl Read, mut n: usize) -> Result<(), WavError> {
    let mut buf = [0u8; 4096];
    while n > 0 {
        let take = n.min(buf.len());
        let got = r.read(&mut buf[..take])?;
        if got == 0 {
            return Err(WavError::Malformed("chunk truncated"));
        }
        n -= got;
    }
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal, WavError> {
    read_wav_from(BufReader::new(File::open(path)?))
}

/// Write a mono PCM16 WAV. Samples are scaled by 32768 and clamped to the
/// i16 range.
pub fn write_wav_to(signal: &AudioSignal, mut w: impl Write) -> Result<(), WavError> {
    if signal.samples.is_empty() {
        return Err(WavError::Empty);
    }
    let data_len = (signal.samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&signal.sample_rate.to_le_bytes())?;
    w.write_all(&(signal.sample_rate * 2).to_le_bytes())?; // byte rate
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    let mut buf = Vec::with_capacity(signal.samples.len() * 2);
    for &s in &signal.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_wav(signal: &AudioSignal, path: impl AsRef<Path>) -> Result<(), WavError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_wav_to(signal, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(signal: &AudioSignal) -> AudioSignal {
        let mut bytes = Vec::new();
        write_wav_to(signal, &mut bytes).unwrap();
        read_wav_from(&bytes[..]).unwrap()
    }

    #[test]
    fn one_second_has_sample_rate_samples() {
        let sig = AudioSignal::new(vec![0.25; 16000], 16000);
        let back = roundtrip(&sig);
        assert_eq!(back.len(), 16000);
        assert_eq!(back.sample_rate, 16000);
    }

    #[test]
    fn stereo_is_rejected() {
        let sig = AudioSignal::new(vec![0.0; 4], 16000);
        let mut bytes = Vec::new();
        write_wav_to(&sig, &mut bytes).unwrap();
        bytes[22] = 2; // channel count
        let err = read_wav_from(&bytes[..]).unwrap_err();
        assert!(err.to_string().contains("mono"), "{err}");
    }

    #[test]
    fn non_pcm_is_rejected() {
        let sig = AudioSignal::new(vec![0.0; 4], 16000);
        let mut bytes = Vec::new();
        write_wav_to(&sig, &mut bytes).unwrap();
        bytes[20] = 3; // IEEE float
        assert!(read_wav_from(&bytes[..]).is_err());
    }

    #[test]
    fn garbage_is_rejected_not_panicked() {
        assert!(read_wav_from(&b"not a wav at all"[..]).is_err());
        assert!(read_wav_from(&b""[..]).is_err());
        assert!(read_wav_from(&b"RIFF\xff\xff\xff\xffWAVE"[..]).is_err());
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let sig = AudioSignal::new(vec![0.5, -0.5], 16000);
        let mut bytes = Vec::new();
        write_wav_to(&sig, &mut bytes).unwrap();
        // splice a LIST chunk between header and fmt
        let mut spliced = bytes[..12].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&4u32.to_le_bytes());
        spliced.extend_from_slice(b"info");
        spliced.extend_from_slice(&bytes[12..]);
        let back = read_wav_from(&spliced[..]).unwrap();
        assert_eq!(back.len(), 2);
    }

    proptest! {
        #[test]
        fn roundtrip_error_within_one_quantization_step(
            samples in proptest::collection::vec(-1.0f64..1.0, 1..400),
        ) {
            let sig = AudioSignal::new(samples, 16000);
            let back = roundtrip(&sig);
            prop_assert_eq!(back.len(), sig.len());
            for (a, b) in sig.samples.iter().zip(&back.samples) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
