//! Decibel Mel spectrogram images: Hann-windowed STFT power, triangular Mel
//! filterbank, decibel scaling against the grid maximum, and an affine map
//! onto `[0, 255]`.

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioSegment, CANONICAL_RATE};
use crate::error::{Error, Result};
use crate::framing;

/// Lower clamp of the decibel scale, relative to the grid maximum.
pub const DB_FLOOR: f64 = -80.0;
/// Power values below this are treated as this value before taking logs.
pub const POWER_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: CANONICAL_RATE as f64 / 2.0,
            sample_rate: CANONICAL_RATE,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 {
            return Err(Error::invalid("fft_size must be positive"));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::invalid("hop must satisfy 0 < hop <= fft_size"));
        }
        if self.n_mels < 2 {
            return Err(Error::invalid("n_mels must be at least 2"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::invalid(format!(
                "need 0 <= fmin < fmax <= {nyquist} Hz, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of whole blocks in `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Power,
    Db,
    Normalized,
}

/// A `rows x cols` grid, row-major, rows are frequency (bin or Mel band,
/// lowest first) and columns are time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub scale: Scale,
    pub config: SpectrogramConfig,
}

impl SpectrogramImage {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, col)).collect()
    }

    fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Values as `f32`, the precision the network and the tensor cache use.
    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn write_spec1<W: Write>(&self, w: &mut W) -> Result<()> {
        framing::write_grid(w, self.rows, self.cols, &self.to_f32())
    }

    /// Binary PGM (P5, maxval 255), highest band in the top row. Values are
    /// rounded and clamped into bytes here and nowhere else.
    pub fn write_pgm<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        for r in (0..self.rows).rev() {
            for c in 0..self.cols {
                buf.push(self.at(r, c).round().clamp(0.0, 255.0) as u8);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time power spectrum: frame `t` covers `[t*hop, t*hop + fft_size)`,
/// Hann windowed, `|X_k|^2` for `k = 0..=fft_size/2`.
pub fn stft_power(seg: &AudioSegment, cfg: &SpectrogramConfig) -> Result<SpectrogramImage> {
    cfg.validate()?;
    if seg.len() < cfg.fft_size {
        return Err(Error::invalid(format!(
            "segment of {} samples is shorter than one {}-sample block",
            seg.len(),
            cfg.fft_size
        )));
    }
    let n = cfg.fft_size;
    let n_bins = cfg.n_bins();
    let n_frames = cfg.n_frames(seg.len());
    let window = hann(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = vec![0.0; n_bins * n_frames];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(seg.samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_bins {
            values[k * n_frames + t] = buf[k].norm_sqr();
        }
    }
    Ok(SpectrogramImage {
        rows: n_bins,
        cols: n_frames,
        values,
        scale: Scale::Power,
        config: *cfg,
    })
}

/// Triangular filters with peaks equally spaced in Mel between `fmin` and
/// `fmax`, peak weight 1, evaluated at the FFT bin centre frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major `n_mels x n_bins`.
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let rising = (f - left) / (centre - left);
                let falling = (right - f) / (right - centre);
                weights[m * n_bins + k] = rising.min(falling).max(0.0);
            }
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Project a linear-frequency power grid onto the Mel bands.
    pub fn apply(&self, power: &SpectrogramImage) -> Result<SpectrogramImage> {
        if power.scale != Scale::Power || power.rows != self.n_bins {
            return Err(Error::invalid(format!(
                "filterbank expects a {}-bin power grid, got {} rows of {:?}",
                self.n_bins, power.rows, power.scale
            )));
        }
        let cols = power.cols;
        let mut values = vec![0.0; self.n_mels * cols];
        for m in 0..self.n_mels {
            let out = &mut values[m * cols..(m + 1) * cols];
            for (k, &w) in self.row(m).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &power.values[k * cols..(k + 1) * cols];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        Ok(SpectrogramImage {
            rows: self.n_mels,
            cols,
            values,
            scale: Scale::Power,
            config: power.config,
        })
    }
}

/// Decibels relative to the grid maximum, clamped below at [`DB_FLOOR`].
pub fn to_db(power: &SpectrogramImage) -> Result<SpectrogramImage> {
    if power.scale != Scale::Power {
        return Err(Error::invalid(format!("to_db expects a power grid, got {:?}", power.scale)));
    }
    let peak = power.values.iter().cloned().fold(0.0f64, f64::max);
    let reference = 10.0 * peak.max(POWER_EPS).log10();
    let values = power
        .values
        .iter()
        .map(|&p| (10.0 * p.max(POWER_EPS).log10() - reference).max(DB_FLOOR))
        .collect();
    Ok(SpectrogramImage {
        values,
        scale: Scale::Db,
        ..power.clone()
    })
}

/// Affine map of a decibel grid onto `[0, 255]`; a constant grid maps to zeros.
pub fn normalize_to_image(db: &SpectrogramImage) -> Result<SpectrogramImage> {
    if db.scale != Scale::Db {
        return Err(Error::invalid(format!(
            "normalize_to_image expects a decibel grid, got {:?}",
            db.scale
        )));
    }
    let (lo, hi) = db.min_max();
    let values = if hi > lo {
        let span = hi - lo;
        db.values.iter().map(|&v| (v - lo) / span * 255.0).collect()
    } else {
        vec![0.0; db.values.len()]
    };
    Ok(SpectrogramImage {
        values,
        scale: Scale::Normalized,
        ..db.clone()
    })
}

/// Reusable waveform-to-image transform with the filterbank built once.
#[derive(Debug, Clone)]
pub struct MelImager {
    pub config: SpectrogramConfig,
    pub filterbank: MelFilterbank,
}

impl MelImager {
    pub fn new(config: SpectrogramConfig) -> Result<Self> {
        Ok(Self {
            filterbank: MelFilterbank::new(&config)?,
            config,
        })
    }

    pub fn mel_power(&self, seg: &AudioSegment) -> Result<SpectrogramImage> {
        self.filterbank.apply(&stft_power(seg, &self.config)?)
    }

    pub fn mel_db(&self, seg: &AudioSegment) -> Result<SpectrogramImage> {
        to_db(&self.mel_power(seg)?)
    }

    pub fn image(&self, seg: &AudioSegment) -> Result<SpectrogramImage> {
        normalize_to_image(&self.mel_db(seg)?)
    }
}

/// STFT power, Mel projection, decibels, then normalization to `[0, 255]`.
pub fn waveform_to_image(seg: &AudioSegment, cfg: &SpectrogramConfig) -> Result<SpectrogramImage> {
    MelImager::new(*cfg)?.image(seg)
}
