//! Recordings to labeled spectrogram instances, and the on-disk instance cache.
//!
//! Cache layout under one directory:
//!
//! ```text
//! cache.json       preprocessing config + input fingerprint
//! instances.csv    id,labels,file
//! spec/<id>.spec1  normalized image as a SPEC1 grid
//! spec/<id>.pgm    optional preview
//! truth.csv        id,behavior (synthetic corpora only)
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{pad_to_length, read_wav, resample, AudioSegment, CANONICAL_RATE};
use crate::dataset::{Behavior, CandidateLabelSet, LabeledInstance, ManifestEntry};
use crate::error::{Error, Result};
use crate::framing::read_grid;
use crate::segmenter::{csv_err, extract_segments, read_span_csv, segment_recording, SegmentSpan, SegmentationConfig};
use crate::spectrogram::{MelImager, Scale, SpectrogramConfig, SpectrogramImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub segmentation: SegmentationConfig,
    pub spectrogram: SpectrogramConfig,
    pub target_rate: u32,
    pub pad_value: f32,
    /// Common segment length in samples; the longest segment when absent.
    pub target_len: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            segmentation: SegmentationConfig::default(),
            spectrogram: SpectrogramConfig::default(),
            target_rate: CANONICAL_RATE,
            pad_value: 0.0,
            target_len: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.spectrogram.validate()?;
        if self.spectrogram.sample_rate != self.target_rate {
            return Err(Error::invalid("spectrogram sample rate must equal the target rate"));
        }
        Ok(())
    }
}

/// A resampled segment with its provenance.
#[derive(Debug, Clone)]
pub struct LabeledSegment {
    pub id: String,
    pub audio: AudioSegment,
    pub label_set: CandidateLabelSet,
}

/// Spans for one manifest entry: its span CSV rows for this source, or the
/// automatic segmenter on the recording.
pub fn spans_for(entry: &ManifestEntry, rec: &AudioSegment, cfg: &SegmentationConfig) -> Result<Vec<SegmentSpan>> {
    match &entry.spans {
        Some(path) => {
            let ctx = path.display().to_string();
            let rows = read_span_csv(File::open(path).map_err(|e| Error::from(e).context(&ctx))?)
                .map_err(|e| e.context(&ctx))?;
            Ok(rows
                .into_iter()
                .filter(|(id, _)| *id == entry.source_id)
                .map(|(_, s)| s)
                .collect())
        }
        None => segment_recording(rec, cfg),
    }
}

/// Read, segment and resample every recording. Segment ids are
/// `<source_id>_<k>` with `k` counting from 0 in time order.
pub fn segments_from_manifest(entries: &[ManifestEntry], cfg: &PreprocessConfig) -> Result<Vec<LabeledSegment>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for entry in entries {
        let run = || -> Result<Vec<LabeledSegment>> {
            let rec = read_wav(&entry.path)?;
            let spans = spans_for(entry, &rec, &cfg.segmentation)?;
            extract_segments(&rec, &spans)?
                .into_iter()
                .enumerate()
                .map(|(k, seg)| {
                    Ok(LabeledSegment {
                        id: format!("{}_{k:03}", entry.source_id),
                        audio: resample(&seg, cfg.target_rate)?,
                        label_set: entry.label_set,
                    })
                })
                .collect()
        };
        out.extend(run().map_err(|e| e.context(&entry.source_id))?);
    }
    Ok(out)
}

/// Pad every segment to a common length and image it.
pub fn instances_from_segments(segments: &[LabeledSegment], cfg: &PreprocessConfig) -> Result<Vec<LabeledInstance>> {
    cfg.validate()?;
    let longest = segments.iter().map(|s| s.audio.len()).max().unwrap_or(0);
    let target = cfg.target_len.unwrap_or(longest).max(cfg.spectrogram.fft_size);
    let imager = MelImager::new(cfg.spectrogram)?;
    segments
        .iter()
        .map(|s| {
            let padded = pad_to_length(&s.audio, target, cfg.pad_value).map_err(|e| e.context(&s.id))?;
            LabeledInstance::new(s.id.clone(), imager.image(&padded)?, s.label_set)
        })
        .collect()
}

pub fn instances_from_manifest(entries: &[ManifestEntry], cfg: &PreprocessConfig) -> Result<Vec<LabeledInstance>> {
    instances_from_segments(&segments_from_manifest(entries, cfg)?, cfg)
}

/// SHA-256 over the config and every input file the manifest points at.
pub fn fingerprint(entries: &[ManifestEntry], cfg: &PreprocessConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).map_err(|e| Error::invalid(e.to_string()))?);
    for e in entries {
        h.update(e.source_id.as_bytes());
        h.update([0, e.label_set.mask()]);
        h.update(fs::read(&e.path).map_err(|err| Error::from(err).context(&e.source_id))?);
        if let Some(p) = &e.spans {
            h.update(fs::read(p).map_err(|err| Error::from(err).context(&p.display().to_string()))?);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    spectrogram: SpectrogramConfig,
    fingerprint: String,
}

/// Instances read back from a cache directory.
#[derive(Debug, Clone)]
pub struct CachedCorpus {
    pub instances: Vec<LabeledInstance>,
    /// Present for synthetic corpora.
    pub true_labels: Option<Vec<Behavior>>,
    pub fingerprint: String,
}

pub fn write_cache(
    dir: &Path,
    instances: &[LabeledInstance],
    true_labels: Option<&[Behavior]>,
    fingerprint: &str,
    with_pgm: bool,
) -> Result<()> {
    let first = instances
        .first()
        .ok_or_else(|| Error::validation("no instances to cache"))?;
    let spec_dir = dir.join("spec");
    fs::create_dir_all(&spec_dir)?;
    let mut index = csv::Writer::from_path(dir.join("instances.csv")).map_err(csv_err)?;
    index.write_record(["id", "labels", "file"]).map_err(csv_err)?;
    for inst in instances {
        let file = format!("spec/{}.spec1", inst.id);
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        inst.image.write_spec1(&mut w)?;
        w.flush()?;
        if with_pgm {
            let mut w = BufWriter::new(File::create(spec_dir.join(format!("{}.pgm", inst.id)))?);
            inst.image.write_pgm(&mut w)?;
            w.flush()?;
        }
        index
            .write_record([inst.id.as_str(), &inst.label_set.letters(), &file])
            .map_err(csv_err)?;
    }
    index.flush()?;
    if let Some(truth) = true_labels {
        let mut w = csv::Writer::from_path(dir.join("truth.csv")).map_err(csv_err)?;
        w.write_record(["id", "behavior"]).map_err(csv_err)?;
        for (inst, b) in instances.iter().zip(truth) {
            w.write_record([inst.id.as_str(), &b.letter().to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
    }
    let meta = CacheMeta {
        spectrogram: first.image.config,
        fingerprint: fingerprint.to_string(),
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(dir.join("cache.json"), json)?;
    Ok(())
}

/// Fingerprint recorded in a cache directory, if one is there.
pub fn cached_fingerprint(dir: &Path) -> Option<String> {
    let bytes = fs::read(dir.join("cache.json")).ok()?;
    serde_json::from_slice::<CacheMeta>(&bytes).ok().map(|m| m.fingerprint)
}

pub fn read_cache(dir: &Path) -> Result<CachedCorpus> {
    let ctx = |p: &Path| p.display().to_string();
    let meta_path = dir.join("cache.json");
    let bytes = fs::read(&meta_path).map_err(|e| Error::from(e).context(&ctx(&meta_path)))?;
    let meta: CacheMeta =
        serde_json::from_slice(&bytes).map_err(|e| Error::validation(format!("{}: {e}", ctx(&meta_path))))?;
    let mut rdr = csv::Reader::from_path(dir.join("instances.csv")).map_err(csv_err)?;
    let mut instances = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let (id, labels, file) = (&rec[0], &rec[1], &rec[2]);
        let path: PathBuf = dir.join(file);
        let mut r = BufReader::new(File::open(&path).map_err(|e| Error::from(e).context(&ctx(&path)))?);
        let (rows, cols, values) = read_grid(&mut r).map_err(|e| e.context(id))?;
        let image = SpectrogramImage {
            rows,
            cols,
            values: values.into_iter().map(f64::from).collect(),
            scale: Scale::Normalized,
            config: meta.spectrogram,
        };
        let set: CandidateLabelSet = labels.parse().map_err(|e: Error| e.context(id))?;
        instances.push(LabeledInstance::new(id, image, set)?);
    }
    let truth_path = dir.join("truth.csv");
    let true_labels = if truth_path.exists() {
        let mut rdr = csv::Reader::from_path(&truth_path).map_err(csv_err)?;
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let b = rec[1]
                .chars()
                .next()
                .and_then(Behavior::from_letter)
                .ok_or_else(|| Error::validation(format!("truth.csv: bad behavior '{}'", &rec[1])))?;
            out.push(b);
        }
        if out.len() != instances.len() {
            return Err(Error::validation("truth.csv does not match instances.csv"));
        }
        Some(out)
    } else {
        None
    };
    Ok(CachedCorpus {
        instances,
        true_labels,
        fingerprint: meta.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::{write_wav, SampleEncoding};
    use crate::dataset::parse_manifest;

    fn tone(secs: f64, rate: u32, on: &[(f64, f64)]) -> AudioSegment {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                let active = on.iter().any(|(a, b)| t >= *a && t < *b);
                let noise = (((i * 7919) % 101) as f64 / 101.0 - 0.5) * 1e-3;
                (if active { 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * t).sin() } else { 0.0 } + noise) as f32
            })
            .collect();
        AudioSegment::new(samples, rate, "x").unwrap()
    }

    fn corpus(dir: &Path) -> Vec<ManifestEntry> {
        write_wav(&tone(6.0, 44_100, &[(1.0, 2.0)]), dir.join("a.wav"), SampleEncoding::Pcm16).unwrap();
        write_wav(&tone(6.0, 22_050, &[(0.5, 1.2), (4.0, 5.6)]), dir.join("b.wav"), SampleEncoding::Pcm16).unwrap();
        let m = "source_id,path,labels\na,a.wav,TF\nb,b.wav,S\n";
        parse_manifest(m.as_bytes())
            .unwrap()
            .into_iter()
            .map(|e| e.resolved(dir))
            .collect()
    }

    #[test]
    fn segments_share_width_after_padding() {
        let dir = tempfile::tempdir().unwrap();
        let entries = corpus(dir.path());
        let cfg = PreprocessConfig::default();
        let segs = segments_from_manifest(&entries, &cfg).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[0].id, "a_000");
        assert!(segs.iter().all(|s| s.audio.sample_rate == CANONICAL_RATE));
        let lens: Vec<_> = segs.iter().map(|s| s.audio.len()).collect();
        assert!(lens[0] != lens[2]);
        let inst = instances_from_segments(&segs, &cfg).unwrap();
        assert!(inst.iter().all(|i| i.image.cols == inst[0].image.cols && i.image.rows == 128));
        assert_eq!(inst[2].label_set, "S".parse().unwrap());
    }

    #[test]
    fn cache_round_trip_and_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let entries = corpus(dir.path());
        let cfg = PreprocessConfig::default();
        let inst = instances_from_manifest(&entries, &cfg).unwrap();
        let fp = fingerprint(&entries, &cfg).unwrap();
        assert_eq!(fp, fingerprint(&entries, &cfg).unwrap());
        let cache = dir.path().join("cache");
        write_cache(&cache, &inst, None, &fp, true).unwrap();
        assert_eq!(cached_fingerprint(&cache).as_deref(), Some(fp.as_str()));
        let back = read_cache(&cache).unwrap();
        assert!(back.true_labels.is_none());
        assert_eq!(back.instances.len(), inst.len());
        for (a, b) in back.instances.iter().zip(&inst) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image.to_f32(), b.image.to_f32());
        }
        assert!(cache.join("spec/a_000.pgm").exists());
        // Any change to an input changes the fingerprint.
        write_wav(&tone(6.0, 44_100, &[(1.0, 2.5)]), dir.path().join("a.wav"), SampleEncoding::Pcm16).unwrap();
        assert_ne!(fp, fingerprint(&entries, &cfg).unwrap());
    }

    #[test]
    fn span_csv_overrides_detector() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = corpus(dir.path());
        fs::write(dir.path().join("spans.csv"), "source_id,start_s,end_s\na,0.0,3.0\nb,1.0,2.0\n").unwrap();
        entries[0].spans = Some(dir.path().join("spans.csv"));
        let segs = segments_from_manifest(&entries, &PreprocessConfig::default()).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[0].audio.len(), 3 * CANONICAL_RATE as usize);
    }

    #[test]
    fn corrupt_wav_error_names_source() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = corpus(dir.path());
        fs::write(dir.path().join("bad.wav"), b"RIFFxxxxWAVEjunk").unwrap();
        entries[1].path = dir.path().join("bad.wav");
        let err = segments_from_manifest(&entries, &PreprocessConfig::default()).unwrap_err();
        assert!(err.to_string().contains("b:"), "{err}");
    }
}
