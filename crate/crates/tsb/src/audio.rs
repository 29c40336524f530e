//! Mono 16 kHz waveforms and the RIFF/WAVE codec used throughout the toolkit.
//!
//! Corpus audio is always 16-bit PCM little-endian, mono, 16000 Hz; the
//! reader rejects anything else with a diagnostic naming the offending field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Nominal corpus sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioSignal {
    /// Builds a signal, enforcing finite samples, non-emptiness and a
    /// positive rate.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("empty sample buffer".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if let Some(pos) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Audio(format!("non-finite sample at index {pos}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
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

    /// Consumes the signal, returning the raw sample buffer.
    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Float sample -> 16-bit PCM, round-to-nearest with clamping to [-1, 1].
pub fn sample_to_i16(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16
}

/// 16-bit PCM -> float sample in [-1, 1].
pub fn i16_to_sample(v: i16) -> f32 {
    (v as f64 / 32767.0) as f32
}

/// One least significant bit of the 16-bit quantizer, in float amplitude.
pub const PCM16_LSB: f64 = 1.0 / 32767.0;

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav { path: path.to_path_buf(), msg: msg.into() }
}

/// Reads a 16-bit PCM mono 16 kHz RIFF/WAVE file.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_wav(path, &bytes)
}

/// Reads just the sample count of a WAV file (header parse only).
pub fn read_wav_len(path: &Path) -> Result<usize> {
    // Small files; decoding is cheap enough that a dedicated header-only
    // parse is not worth a second code path.
    Ok(read_wav(path)?.len())
}

fn decode_wav(path: &Path, bytes: &[u8]) -> Result<AudioSignal> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err(path, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(wav_err(path, format!("chunk {:?} overruns file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err(path, "fmt chunk too short"));
                }
                let b = &bytes[body_start..body_end];
                let format = u16::from_le_bytes([b[0], b[1]]);
                let channels = u16::from_le_bytes([b[2], b[3]]);
                let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                let bits = u16::from_le_bytes([b[14], b[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| wav_err(path, "missing fmt chunk"))?;
    if format != 1 {
        return Err(wav_err(path, format!("unsupported format tag {format} (want 1 = PCM)")));
    }
    if channels != 1 {
        return Err(wav_err(path, format!("unsupported channel count {channels} (want mono)")));
    }
    if rate != SAMPLE_RATE {
        return Err(wav_err(path, format!("unsupported sample rate {rate} Hz (want {SAMPLE_RATE})")));
    }
    if bits != 16 {
        return Err(wav_err(path, format!("unsupported bit depth {bits} (want 16)")));
    }
    let data = data.ok_or_else(|| wav_err(path, "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(wav_err(path, "data chunk has odd byte length"));
    }
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16_to_sample(i16::from_le_bytes([c[0], c[1]])))
        .collect();
    if samples.is_empty() {
        return Err(wav_err(path, "empty data chunk"));
    }
    AudioSignal::new(samples, rate)
}

/// Writes a signal as 16-bit PCM mono RIFF/WAVE.
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    if signal.sample_rate() != SAMPLE_RATE {
        return Err(wav_err(path, format!("refusing to write {} Hz (corpus rate is {SAMPLE_RATE})", signal.sample_rate())));
    }
    let n = signal.len();
    let data_bytes = (n * 2) as u32;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_bytes).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&SAMPLE_RATE.to_le_bytes())?;
    w.write_all(&(SAMPLE_RATE * 2).to_le_bytes())?; // byte rate
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits
    w.write_all(b"data")?;
    w.write_all(&data_bytes.to_le_bytes())?;
    for &s in signal.samples() {
        w.write_all(&sample_to_i16(s).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_signals() {
        assert!(AudioSignal::new(vec![], SAMPLE_RATE).is_err());
        assert!(AudioSignal::new(vec![0.1, f32::NAN], SAMPLE_RATE).is_err());
        assert!(AudioSignal::new(vec![0.1], 0).is_err());
    }

    #[test]
    fn wav_round_trip_is_exact_post_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.013).sin() * 0.8).collect();
        let sig = AudioSignal::new(samples.clone(), SAMPLE_RATE).unwrap();
        write_wav(&path, &sig).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), sig.len());
        for (a, b) in back.samples().iter().zip(sig.samples()) {
            assert!((a - b).abs() as f64 <= PCM16_LSB);
        }
        // A second decode of the same bytes is bit-identical.
        let again = read_wav(&path).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn reader_rejects_wrong_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("RIFF"), "{err}");

        // Stereo file must be refused with a channel diagnostic.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
        bytes.extend_from_slice(&(SAMPLE_RATE * 4).to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let p2 = dir.path().join("stereo.wav");
        std::fs::write(&p2, &bytes).unwrap();
        let err = read_wav(&p2).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }
}
