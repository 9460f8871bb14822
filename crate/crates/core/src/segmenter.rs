//! Vocalization segmentation.
//!
//! Frames whose RMS level clears a noise floor by a margin are "active";
//! maximal active runs become spans, spans closer than `merge_gap_s` are
//! merged, and only spans strictly longer than `min_duration_s` survive.
//! The span CSV lets hand-made span lists replace the detector.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::audio_io::AudioSegment;
use crate::error::{Error, Result};
use crate::stats::percentile;

/// Slack for comparing span boundaries that were produced by float arithmetic.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub min_duration_s: f64,
    pub merge_gap_s: f64,
    pub frame_s: f64,
    pub threshold_db_above_noise: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            min_duration_s: 0.5,
            merge_gap_s: 2.0,
            frame_s: 0.05,
            threshold_db_above_noise: 10.0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_duration_s > 0.0) {
            return Err(Error::invalid("min_duration_s must be positive"));
        }
        if !(self.merge_gap_s >= 0.0) {
            return Err(Error::invalid("merge_gap_s must be non-negative"));
        }
        if !(self.frame_s > 0.0) {
            return Err(Error::invalid("frame_s must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl SegmentSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(end_s > start_s) || !start_s.is_finite() || !end_s.is_finite() {
            return Err(Error::invalid(format!("span [{start_s}, {end_s}] is empty or not finite")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Per-frame activity decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveFrames {
    pub flags: Vec<bool>,
    /// Exact duration of one frame (the frame length is a whole number of samples).
    pub frame_duration_s: f64,
    pub frame_len: usize,
    pub sample_rate: u32,
}

/// Frame energies in dB; the last frame may be short.
fn frame_levels_db(seg: &AudioSegment, frame_len: usize) -> Vec<f64> {
    seg.samples
        .chunks(frame_len)
        .map(|fr| {
            let ms = fr.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / fr.len() as f64;
            10.0 * (ms + 1e-20).log10()
        })
        .collect()
}

/// Mark frames whose level exceeds the 10th-percentile level by the configured margin.
pub fn detect_active_frames(seg: &AudioSegment, cfg: &SegmentationConfig) -> Result<ActiveFrames> {
    cfg.validate()?;
    let frame_len = ((cfg.frame_s * seg.sample_rate as f64).round() as usize).max(1);
    if seg.len() < frame_len {
        return Err(Error::invalid(format!(
            "recording of {} samples is shorter than one {frame_len}-sample frame",
            seg.len()
        )));
    }
    let levels = frame_levels_db(seg, frame_len);
    let floor = percentile(&levels, 10.0);
    let flags = levels
        .iter()
        .map(|&l| l > floor + cfg.threshold_db_above_noise)
        .collect();
    Ok(ActiveFrames {
        flags,
        frame_duration_s: frame_len as f64 / seg.sample_rate as f64,
        frame_len,
        sample_rate: seg.sample_rate,
    })
}

/// Merge spans separated by less than `merge_gap_s`, then drop spans not
/// longer than `min_duration_s`. Input order does not matter.
pub fn merge_spans(spans: &[SegmentSpan], cfg: &SegmentationConfig) -> Vec<SegmentSpan> {
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));
    let mut merged: Vec<SegmentSpan> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match merged.last_mut() {
            Some(cur) if s.start_s - cur.end_s < cfg.merge_gap_s - TIME_EPS => {
                cur.end_s = cur.end_s.max(s.end_s);
            }
            _ => merged.push(s),
        }
    }
    merged.retain(|s| s.duration_s() > cfg.min_duration_s + TIME_EPS);
    merged
}

/// Runs of active frames as spans, merged and filtered by the segment rules.
pub fn spans_from_flags(frames: &ActiveFrames, cfg: &SegmentationConfig) -> Vec<SegmentSpan> {
    let sr = frames.sample_rate as f64;
    let at = |frame: usize| (frame * frames.frame_len) as f64 / sr;
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &on) in frames.flags.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(SegmentSpan { start_s: at(s), end_s: at(i) });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(SegmentSpan {
            start_s: at(s),
            end_s: at(frames.flags.len()),
        });
    }
    merge_spans(&runs, cfg)
}

/// Automatic segmentation of one recording.
pub fn segment_recording(rec: &AudioSegment, cfg: &SegmentationConfig) -> Result<Vec<SegmentSpan>> {
    let mut spans = spans_from_flags(&detect_active_frames(rec, cfg)?, cfg);
    // The last frame may be short; keep span ends inside the recording.
    let dur = rec.duration_seconds();
    for s in &mut spans {
        s.end_s = s.end_s.min(dur);
    }
    Ok(spans)
}

/// Slice each span out of the recording. Offsets are absolute within the source.
pub fn extract_segments(rec: &AudioSegment, spans: &[SegmentSpan]) -> Result<Vec<AudioSegment>> {
    let sr = rec.sample_rate as f64;
    spans
        .iter()
        .map(|span| {
            if span.start_s < -TIME_EPS || !(span.end_s > span.start_s) {
                return Err(Error::invalid(format!("span [{}, {}] is invalid", span.start_s, span.end_s)));
            }
            let a = (span.start_s * sr).round().max(0.0) as usize;
            let b = (span.end_s * sr).round() as usize;
            if b > rec.len() || a >= b {
                return Err(Error::invalid(format!(
                    "span [{}, {}] s lies outside the {:.3} s recording '{}'",
                    span.start_s,
                    span.end_s,
                    rec.duration_seconds(),
                    rec.source_id
                )));
            }
            Ok(AudioSegment {
                samples: rec.samples[a..b].to_vec(),
                sample_rate: rec.sample_rate,
                source_id: rec.source_id.clone(),
                offset_seconds: rec.offset_seconds + a as f64 / sr,
            })
        })
        .collect()
}

/// Write spans as `source_id,start_s,end_s` rows with a header.
pub fn write_span_csv<W: Write>(w: W, rows: &[(String, SegmentSpan)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["source_id", "start_s", "end_s"]).map_err(csv_err)?;
    for (id, s) in rows {
        out.write_record([id.as_str(), &s.start_s.to_string(), &s.end_s.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_span_csv<R: Read>(r: R) -> Result<Vec<(String, SegmentSpan)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["source_id", "start_s", "end_s"] {
        return Err(Error::validation(format!(
            "span CSV header must be 'source_id,start_s,end_s', got '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::validation(format!("span CSV row {}: {e}", line + 1)))
        };
        let span = SegmentSpan::new(num(1)?, num(2)?)
            .map_err(|e| Error::validation(format!("span CSV row {}: {e}", line + 1)))?;
        rows.push((rec.get(0).unwrap_or("").to_string(), span));
    }
    Ok(rows)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::validation(format!("{other:?}")),
        }
    } else {
        Error::validation(e.to_string())
    }
}
