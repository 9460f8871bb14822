//! Audio input: RIFF/WAVE decoding, band-limited resampling and constant padding.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Canonical analysis rate for every segment fed to the spectrogram stage.
pub const CANONICAL_RATE: u32 = 21_900;

/// A mono buffer of samples tagged with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
    /// Start position inside the source recording, in seconds.
    pub offset_seconds: f64,
}

impl AudioSegment {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("an audio segment needs at least one sample"));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
            offset_seconds: 0.0,
        })
    }

    pub fn with_offset(mut self, offset_seconds: f64) -> Self {
        self.offset_seconds = offset_seconds;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Sample encodings understood by the reader and writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleEncoding {
    Pcm8,
    Pcm16,
    Pcm24,
    Pcm32,
    Float32,
}

impl SampleEncoding {
    fn bytes(self) -> usize {
        match self {
            SampleEncoding::Pcm8 => 1,
            SampleEncoding::Pcm16 => 2,
            SampleEncoding::Pcm24 => 3,
            SampleEncoding::Pcm32 | SampleEncoding::Float32 => 4,
        }
    }

    fn format_tag(self) -> u16 {
        match self {
            SampleEncoding::Float32 => 3,
            _ => 1,
        }
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct FmtChunk {
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    encoding: SampleEncoding,
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(Error::format("fmt ", format!("chunk is {} bytes, need at least 16", body.len())));
    }
    let mut tag = le_u16(&body[0..2]);
    let channels = le_u16(&body[2..4]);
    let sample_rate = le_u32(&body[4..8]);
    let block_align = le_u16(&body[12..14]);
    let bits = le_u16(&body[14..16]);
    if tag == FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) then the sub-format GUID.
        if body.len() < 26 {
            return Err(Error::format("fmt ", "extensible format without sub-format GUID"));
        }
        tag = le_u16(&body[24..26]);
    }
    if channels == 0 {
        return Err(Error::format("fmt ", "zero channels"));
    }
    if sample_rate == 0 {
        return Err(Error::format("fmt ", "zero sample rate"));
    }
    let encoding = match (tag, bits) {
        (FORMAT_PCM, 8) => SampleEncoding::Pcm8,
        (FORMAT_PCM, 16) => SampleEncoding::Pcm16,
        (FORMAT_PCM, 24) => SampleEncoding::Pcm24,
        (FORMAT_PCM, 32) => SampleEncoding::Pcm32,
        (FORMAT_FLOAT, 32) => SampleEncoding::Float32,
        (FORMAT_PCM, b) => return Err(Error::UnsupportedEncoding(format!("{b}-bit integer PCM"))),
        (FORMAT_FLOAT, b) => return Err(Error::UnsupportedEncoding(format!("{b}-bit IEEE float"))),
        (t, _) => return Err(Error::UnsupportedEncoding(format!("format tag 0x{t:04x}"))),
    };
    if block_align as usize != channels as usize * encoding.bytes() {
        return Err(Error::format(
            "fmt ",
            format!("block align {block_align} does not match {channels} channel(s) of {bits}-bit samples"),
        ));
    }
    Ok(FmtChunk {
        channels,
        sample_rate,
        block_align,
        encoding,
    })
}

fn decode_sample(bytes: &[u8], encoding: SampleEncoding) -> f64 {
    match encoding {
        SampleEncoding::Pcm8 => (bytes[0] as f64 - 128.0) / 128.0,
        SampleEncoding::Pcm16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64 / 32_768.0,
        SampleEncoding::Pcm24 => {
            let v = i32::from_le_bytes([0, bytes[0], bytes[1], bytes[2]]) >> 8;
            v as f64 / 8_388_608.0
        }
        SampleEncoding::Pcm32 => {
            i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64 / 2_147_483_648.0
        }
        SampleEncoding::Float32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
    }
}

/// Decode an in-memory RIFF/WAVE image into a mono segment.
///
/// Channels are mixed down by their arithmetic mean; integer samples are
/// divided by the magnitude of the type's most negative value.
pub fn decode_wav(bytes: &[u8], source_id: &str) -> Result<AudioSegment> {
    if bytes.len() < 12 {
        return Err(Error::format("RIFF", "file shorter than the 12-byte RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::format("RIFF", "missing 'RIFF' magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::format("RIFF", "form type is not 'WAVE'"));
    }

    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        match id {
            b"fmt " => {
                let end = body_start
                    .checked_add(size)
                    .filter(|&e| e <= bytes.len())
                    .ok_or_else(|| Error::format("fmt ", "chunk extends past end of file"))?;
                fmt = Some(parse_fmt(&bytes[body_start..end])?);
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| Error::format("data", "data chunk appears before 'fmt '"))?;
                let end = body_start
                    .checked_add(size)
                    .filter(|&e| e <= bytes.len())
                    .ok_or_else(|| Error::format("data", "chunk extends past end of file"))?;
                let body = &bytes[body_start..end];
                let frame = fmt.block_align as usize;
                if body.len() % frame != 0 {
                    return Err(Error::format(
                        "data",
                        format!("{} bytes is not a whole number of {frame}-byte frames", body.len()),
                    ));
                }
                if body.is_empty() {
                    return Err(Error::format("data", "no sample frames"));
                }
                let width = fmt.encoding.bytes();
                let channels = fmt.channels as usize;
                let samples = body
                    .chunks_exact(frame)
                    .map(|fr| {
                        let sum: f64 = fr
                            .chunks_exact(width)
                            .map(|s| decode_sample(s, fmt.encoding))
                            .sum();
                        (sum / channels as f64) as f32
                    })
                    .collect();
                return AudioSegment::new(samples, fmt.sample_rate, source_id);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }
    match fmt {
        None => Err(Error::format("fmt ", "no 'fmt ' chunk found")),
        Some(_) => Err(Error::format("data", "no 'data' chunk found")),
    }
}

/// Read a WAV file; the file stem becomes the segment's source id.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSegment> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(&bytes, &id)
}

/// Encode a mono segment as a RIFF/WAVE image. Integer encodings clamp to the
/// representable range.
pub fn encode_wav(seg: &AudioSegment, encoding: SampleEncoding) -> Vec<u8> {
    let width = encoding.bytes();
    let data_len = seg.samples.len() * width;
    let mut out = Vec::with_capacity(44 + data_len + 1);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len + (data_len & 1)) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&encoding.format_tag().to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&seg.sample_rate.to_le_bytes());
    out.extend_from_slice(&(seg.sample_rate * width as u32).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&((width * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &seg.samples {
        let s = s as f64;
        match encoding {
            SampleEncoding::Pcm8 => {
                let v = (s * 128.0 + 128.0).round().clamp(0.0, 255.0) as u8;
                out.push(v);
            }
            SampleEncoding::Pcm16 => {
                let v = (s * 32_768.0).round().clamp(-32_768.0, 32_767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
            SampleEncoding::Pcm24 => {
                let v = (s * 8_388_608.0).round().clamp(-8_388_608.0, 8_388_607.0) as i32;
                out.extend_from_slice(&v.to_le_bytes()[0..3]);
            }
            SampleEncoding::Pcm32 => {
                let v = (s * 2_147_483_648.0).round().clamp(-2_147_483_648.0, 2_147_483_647.0) as i32;
                out.extend_from_slice(&v.to_le_bytes());
            }
            SampleEncoding::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    if data_len & 1 == 1 {
        out.push(0);
    }
    out
}

pub fn write_wav(seg: &AudioSegment, path: impl AsRef<Path>, encoding: SampleEncoding) -> Result<()> {
    fs::write(path, encode_wav(seg, encoding))?;
    Ok(())
}

/// Kaiser shape parameter of the resampling window.
pub const KAISER_BETA: f64 = 8.0;
/// Zero crossings of the interpolation kernel spanned at the lower of the two rates.
pub const TAPS_PER_BRANCH: usize = 64;
/// Kernel cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.92;
const MAX_TABULATED_PHASES: u64 = 8192;

fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct SincKernel {
    cutoff: f64,
    half_width: f64,
    i0_beta: f64,
}

impl SincKernel {
    fn new(in_rate: u32, out_rate: u32) -> Self {
        let ratio = (out_rate as f64 / in_rate as f64).min(1.0);
        let cutoff = ratio * ROLLOFF;
        Self {
            cutoff,
            half_width: (TAPS_PER_BRANCH / 2) as f64 / ratio,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    /// Kernel weight at distance `d` (input samples) from the output instant.
    fn at(&self, d: f64) -> f64 {
        let r = d / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
        self.cutoff * sinc(self.cutoff * d) * w
    }
}

/// Output length after resampling `len` samples, rounding half up.
pub fn resampled_len(len: usize, in_rate: u32, out_rate: u32) -> usize {
    let num = len as u128 * out_rate as u128 * 2 + in_rate as u128;
    (num / (2 * in_rate as u128)) as usize
}

/// Windowed-sinc (Kaiser) resampling to `target_rate`.
///
/// Output sample `n` sits at input position `n * in / out`. Rational ratios
/// with a manageable number of polyphase branches use precomputed per-phase
/// kernels.
pub fn resample(seg: &AudioSegment, target_rate: u32) -> Result<AudioSegment> {
    if target_rate == 0 {
        return Err(Error::invalid("target_rate must be positive"));
    }
    if target_rate == seg.sample_rate {
        return Ok(seg.clone());
    }
    let in_rate = seg.sample_rate as u64;
    let out_rate = target_rate as u64;
    let g = gcd(in_rate, out_rate);
    let (step, phases) = (in_rate / g, out_rate / g);
    let kernel = SincKernel::new(seg.sample_rate, target_rate);
    let reach = kernel.half_width.ceil() as i64;
    let taps = (2 * reach) as usize;
    let out_len = resampled_len(seg.len(), seg.sample_rate, target_rate).max(1);
    let x = &seg.samples;
    let n_in = x.len() as i64;

    let table: Option<Vec<f64>> = (phases <= MAX_TABULATED_PHASES).then(|| {
        let mut t = Vec::with_capacity(phases as usize * taps);
        for p in 0..phases {
            let frac = p as f64 / phases as f64;
            for j in 0..taps as i64 {
                // input index = base + j - reach + 1
                t.push(kernel.at(frac - (j - reach + 1) as f64));
            }
        }
        t
    });

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        // position n*in/out expressed as base + phase/phases
        let num = n * step;
        let base = (num / phases) as i64;
        let phase = num % phases;
        let frac = phase as f64 / phases as f64;
        let first = base - reach + 1;
        let mut acc = 0.0f64;
        for j in 0..taps as i64 {
            let k = first + j;
            if k < 0 || k >= n_in {
                continue;
            }
            let w = match &table {
                Some(t) => t[phase as usize * taps + j as usize],
                None => kernel.at(frac - (j - reach + 1) as f64),
            };
            acc += w * x[k as usize] as f64;
        }
        out.push(acc as f32);
    }
    Ok(AudioSegment {
        samples: out,
        sample_rate: target_rate,
        source_id: seg.source_id.clone(),
        offset_seconds: seg.offset_seconds,
    })
}

/// Pad with `pad_value` on both sides so the result holds `target_len` samples,
/// original samples centered (left pad is the floor of half the slack).
pub fn pad_to_length(seg: &AudioSegment, target_len: usize, pad_value: f32) -> Result<AudioSegment> {
    let len = seg.len();
    if target_len < len {
        return Err(Error::invalid(format!(
            "target length {target_len} is shorter than the segment ({len} samples); truncation is not allowed"
        )));
    }
    let left = (target_len - len) / 2;
    let right = target_len - len - left;
    let mut samples = Vec::with_capacity(target_len);
    samples.resize(left, pad_value);
    samples.extend_from_slice(&seg.samples);
    samples.resize(left + len + right, pad_value);
    Ok(AudioSegment {
        samples,
        sample_rate: seg.sample_rate,
        source_id: seg.source_id.clone(),
        offset_seconds: seg.offset_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(samples: Vec<f32>, rate: u32) -> AudioSegment {
        AudioSegment::new(samples, rate, "t").unwrap()
    }

    fn sine(freq: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    fn wav_bytes(fmt_tag: u16, channels: u16, bits: u16, rate: u32, data: &[u8]) -> Vec<u8> {
        let block = channels * bits / 8;
        let mut v = Vec::new();
        v.extend_from_slice(b"RIFF");
        v.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        v.extend_from_slice(b"WAVE");
        v.extend_from_slice(b"fmt ");
        v.extend_from_slice(&16u32.to_le_bytes());
        v.extend_from_slice(&fmt_tag.to_le_bytes());
        v.extend_from_slice(&channels.to_le_bytes());
        v.extend_from_slice(&rate.to_le_bytes());
        v.extend_from_slice(&(rate * block as u32).to_le_bytes());
        v.extend_from_slice(&block.to_le_bytes());
        v.extend_from_slice(&bits.to_le_bytes());
        v.extend_from_slice(b"data");
        v.extend_from_slice(&(data.len() as u32).to_le_bytes());
        v.extend_from_slice(data);
        v
    }

    #[test]
    fn reads_16_bit_mono_at_native_rate() {
        let data: Vec<u8> = (0..44_100).flat_map(|i| ((i % 200) as i16).to_le_bytes()).collect();
        let s = decode_wav(&wav_bytes(1, 1, 16, 44_100, &data), "rec").unwrap();
        assert_eq!(s.sample_rate, 44_100);
        assert_eq!(s.len(), 44_100);
        assert_eq!(s.source_id, "rec");
    }

    #[test]
    fn scales_integer_samples_by_type_magnitude() {
        let s = decode_wav(&wav_bytes(1, 1, 16, 8000, &32_767i16.to_le_bytes()), "x").unwrap();
        assert_eq!(s.samples[0], (32_767.0f64 / 32_768.0) as f32);
        let s = decode_wav(&wav_bytes(1, 1, 8, 8000, &[0u8, 128, 255, 0]), "x").unwrap();
        assert_eq!(s.samples[..3], [-1.0, 0.0, 127.0 / 128.0]);
        let s = decode_wav(&wav_bytes(1, 1, 24, 8000, &[0x00, 0x00, 0x80]), "x").unwrap();
        assert_eq!(s.samples[0], -1.0);
    }

    #[test]
    fn stereo_is_mixed_to_channel_mean() {
        let mut data = Vec::new();
        data.extend_from_slice(&0.5f32.to_le_bytes());
        data.extend_from_slice(&(-0.5f32).to_le_bytes());
        let s = decode_wav(&wav_bytes(3, 2, 32, 16_000, &data), "x").unwrap();
        assert_eq!(s.samples, vec![0.0]);
    }

    #[test]
    fn skips_unknown_chunks_and_padding() {
        let mut v = Vec::new();
        v.extend_from_slice(b"RIFF\0\0\0\0WAVE");
        v.extend_from_slice(b"LIST");
        v.extend_from_slice(&3u32.to_le_bytes());
        v.extend_from_slice(&[1, 2, 3, 0]);
        let tail = wav_bytes(1, 1, 16, 8000, &1000i16.to_le_bytes());
        v.extend_from_slice(&tail[12..]);
        let s = decode_wav(&v, "x").unwrap();
        assert_eq!(s.samples, vec![1000.0 / 32_768.0]);
    }

    #[test]
    fn malformed_headers_name_the_chunk() {
        match decode_wav(b"RIFX\0\0\0\0WAVE", "x") {
            Err(Error::Format { chunk, .. }) => assert_eq!(chunk, "RIFF"),
            other => panic!("{other:?}"),
        }
        let mut v = wav_bytes(1, 1, 16, 8000, &[0, 0, 0, 0]);
        v.truncate(v.len() - 2);
        match decode_wav(&v, "x") {
            Err(Error::Format { chunk, .. }) => assert_eq!(chunk, "data"),
            other => panic!("{other:?}"),
        }
        let mut v = wav_bytes(1, 1, 16, 8000, &[0, 0]);
        v[16] = 8; // fmt chunk claims 8 bytes
        assert!(matches!(decode_wav(&v, "x"), Err(Error::Format { chunk, .. }) if chunk == "fmt "));
    }

    #[test]
    fn rejects_data_before_fmt() {
        let mut v = Vec::new();
        v.extend_from_slice(b"RIFF\0\0\0\0WAVE");
        v.extend_from_slice(b"data");
        v.extend_from_slice(&2u32.to_le_bytes());
        v.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_wav(&v, "x"), Err(Error::Format { chunk, .. }) if chunk == "data"));
    }

    #[test]
    fn unsupported_codecs_are_reported() {
        let v = wav_bytes(0x55, 1, 16, 8000, &[0, 0]);
        assert!(matches!(decode_wav(&v, "x"), Err(Error::UnsupportedEncoding(_))));
        let v = wav_bytes(3, 1, 64, 8000, &[0; 8]);
        assert!(matches!(decode_wav(&v, "x"), Err(Error::UnsupportedEncoding(_))));
    }

    #[test]
    fn resample_length_follows_round_rule() {
        let s = seg(sine(440.0, 44_100, 44_100), 44_100);
        let r = resample(&s, CANONICAL_RATE).unwrap();
        assert_eq!(r.sample_rate, 21_900);
        assert_eq!(r.len(), 21_900);
        assert_eq!(resampled_len(3, 2, 1), 2); // 1.5 rounds up
        assert_eq!(resampled_len(10, 3, 1), 3);
    }

    #[test]
    fn resample_at_same_rate_is_identity() {
        let s = seg(sine(440.0, 21_900, 1000), 21_900);
        assert_eq!(resample(&s, 21_900).unwrap(), s);
    }

    #[test]
    fn resample_keeps_tone_frequency() {
        let s = seg(sine(1000.0, 44_100, 44_100), 44_100);
        let r = resample(&s, CANONICAL_RATE).unwrap();
        // Plain DFT magnitude scan over the 1 Hz bins near the tone.
        let n = r.len();
        let mut best = (0usize, 0.0f64);
        for k in (500..2000).step_by(1) {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in r.samples.iter().enumerate() {
                let a = -2.0 * PI * k as f64 * i as f64 / n as f64;
                re += v as f64 * a.cos();
                im += v as f64 * a.sin();
            }
            let m = re * re + im * im;
            if m > best.1 {
                best = (k, m);
            }
        }
        let bin_hz = 21_900.0 / n as f64;
        assert!((best.0 as f64 * bin_hz - 1000.0).abs() <= bin_hz, "peak at bin {}", best.0);
    }

    #[test]
    fn resample_suppresses_content_above_new_nyquist() {
        // 15 kHz is above the 10.95 kHz Nyquist of the canonical rate.
        let s = seg(sine(15_000.0, 44_100, 22_050), 44_100);
        let r = resample(&s, CANONICAL_RATE).unwrap();
        let mid = &r.samples[2000..r.len() - 2000];
        let rms = (mid.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / mid.len() as f64).sqrt();
        assert!(rms < 1e-3, "aliased energy rms {rms}");
    }

    #[test]
    fn pad_centers_with_floor_rule() {
        let s = seg(vec![1.0; 10], 100);
        assert_eq!(pad_to_length(&s, 10, 0.0).unwrap(), s);
        let p = pad_to_length(&s, 15, 0.0).unwrap();
        assert_eq!(&p.samples[..2], &[0.0, 0.0]);
        assert_eq!(&p.samples[12..], &[0.0, 0.0, 0.0]);
        assert_eq!(&p.samples[2..12], &s.samples[..]);
        assert!(matches!(pad_to_length(&s, 9, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn segment_invariants_are_checked() {
        assert!(AudioSegment::new(vec![], 100, "x").is_err());
        assert!(AudioSegment::new(vec![0.0], 0, "x").is_err());
        assert_eq!(seg(vec![0.0; 50], 100).duration_seconds(), 0.5);
    }

    fn envelope(i: usize, n: usize) -> f64 {
        // Raised-cosine ramps over the first and last 20% so the signal is
        // effectively zero outside the buffer.
        let ramp = n / 5;
        let w = |k: usize| 0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos();
        if i < ramp {
            w(i)
        } else if i >= n - ramp {
            w(n - 1 - i)
        } else {
            1.0
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn resample_round_trip_is_accurate_in_band(
            freqs in proptest::collection::vec(0.02f64..0.4, 1..4),
            phases in proptest::collection::vec(0.0f64..6.28, 3),
            rates in prop_oneof![Just((44_100u32, 21_900u32)), Just((16_000, 21_900)), Just((48_000, 32_000))],
        ) {
            let (a, b) = rates;
            let lower_nyquist = a.min(b) as f64 / 2.0;
            let n = 4000;
            let samples: Vec<f32> = (0..n).map(|i| {
                let t = i as f64 / a as f64;
                let v: f64 = freqs.iter().zip(phases.iter().cycle())
                    .map(|(f, p)| (2.0 * PI * f * lower_nyquist * t + p).sin())
                    .sum::<f64>() / freqs.len() as f64;
                (v * envelope(i, n)) as f32
            }).collect();
            let s = seg(samples, a);
            let there = resample(&s, b).unwrap();
            let back = resample(&there, a).unwrap();
            // Each leg rounds its length; the pair stays within one sample.
            prop_assert!((back.len() as i64 - n as i64).abs() <= 1);
            let err: f64 = s.samples.iter().zip(&back.samples).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
            let norm: f64 = s.samples.iter().map(|x| (*x as f64).powi(2)).sum();
            prop_assert!((err / norm).sqrt() < 1e-3, "relative L2 error {}", (err / norm).sqrt());
        }

        #[test]
        fn resample_len_is_rounded_ratio(len in 1usize..5000, a in 1000u32..96_000, b in 1000u32..96_000) {
            let exact = len as f64 * b as f64 / a as f64;
            prop_assert!((resampled_len(len, a, b) as f64 - exact).abs() <= 0.5 + 1e-9);
        }

        #[test]
        fn pad_is_lossless_and_idempotent(
            v in proptest::collection::vec(-1.0f32..1.0, 1..300),
            extra in 0usize..300,
        ) {
            let s = seg(v.clone(), 1000);
            let target = v.len() + extra;
            let p = pad_to_length(&s, target, 0.0).unwrap();
            prop_assert_eq!(p.len(), target);
            let left = extra / 2;
            prop_assert_eq!(&p.samples[left..left + v.len()], &v[..]);
            let before: f64 = v.iter().map(|x| x.abs() as f64).sum();
            let after: f64 = p.samples.iter().map(|x| x.abs() as f64).sum();
            prop_assert_eq!(before, after);
            prop_assert_eq!(pad_to_length(&p, target, 0.0).unwrap(), p);
        }

        #[test]
        fn pcm_round_trips_bit_exactly(v in proptest::collection::vec(any::<i16>(), 1..500)) {
            let samples: Vec<f32> = v.iter().map(|&x| x as f32 / 32_768.0).collect();
            let s = seg(samples, 21_900);
            for enc in [SampleEncoding::Pcm16, SampleEncoding::Pcm24, SampleEncoding::Pcm32, SampleEncoding::Float32] {
                let back = decode_wav(&encode_wav(&s, enc), "t").unwrap();
                prop_assert_eq!(&back.samples, &s.samples);
                prop_assert_eq!(back.sample_rate, 21_900);
            }
        }
    }
}
