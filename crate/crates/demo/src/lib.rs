//! Browser bindings: synthetic call spectrograms, the partial-label loss for
//! one instance, and guessing baselines for a label distribution.

use orca_pll::dataset::{Behavior, CandidateLabelSet};
use orca_pll::eval::{baseline_accuracies, parse_label_counts};
use orca_pll::pll::{candidate_weights, instance_loss, softmax, Logits, WeightGradient};
use orca_pll::synthetic::{generate_synthetic_dataset, SuperfluousProfile, SyntheticSpec};
use wasm_bindgen::prelude::*;

/// Grayscale image, highest Mel band in the top row.
#[wasm_bindgen]
pub struct DemoImage {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

#[wasm_bindgen]
impl DemoImage {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// RGBA bytes, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|&p| [p, p, p, 255]).collect()
    }
}

pub fn synth_image(behavior: char, snr_db: f64, duration_s: f64, seed: u64) -> Result<DemoImage, String> {
    let b = Behavior::from_letter(behavior.to_ascii_uppercase()).ok_or_else(|| format!("unknown behavior '{behavior}'"))?;
    if !(0.05..=5.0).contains(&duration_s) {
        return Err("duration must lie in [0.05, 5] s".into());
    }
    let spec = SyntheticSpec {
        n_per_class: 1,
        duration_s,
        snr_db,
        profile: SuperfluousProfile::None,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let i = ds.true_labels.iter().position(|t| *t == b).ok_or("behavior missing from corpus")?;
    let img = &ds.instances[i].image;
    let mut pixels = Vec::with_capacity(img.rows * img.cols);
    for r in (0..img.rows).rev() {
        for c in 0..img.cols {
            pixels.push(img.at(r, c).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(DemoImage {
        rows: img.rows,
        cols: img.cols,
        pixels,
    })
}

/// `[loss, softmax x4, weights x4, frozen grad x4, full grad x4]`.
pub fn pll_explain(logits: &[f64], labels: &str) -> Result<Vec<f64>, String> {
    let f: Logits = logits.try_into().map_err(|_| "need exactly four logits".to_string())?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err("logits must be finite".into());
    }
    let set: CandidateLabelSet = labels.parse().map_err(|e: orca_pll::Error| e.to_string())?;
    let (loss, frozen) = instance_loss(&f, set, WeightGradient::Frozen);
    let (_, full) = instance_loss(&f, set, WeightGradient::Full);
    let mut out = vec![loss];
    out.extend(softmax(&f));
    out.extend(candidate_weights(&f, set));
    out.extend(frozen);
    out.extend(full);
    Ok(out)
}

/// Baseline table for a `labels,count` CSV.
pub fn baseline_text(counts_csv: &str) -> Result<String, String> {
    let counts = parse_label_counts(counts_csv.as_bytes()).map_err(|e| e.to_string())?;
    Ok(baseline_accuracies(&counts).map_err(|e| e.to_string())?.to_string())
}

#[wasm_bindgen]
pub fn synth_spectrogram(behavior: char, snr_db: f64, duration_s: f64, seed: u32) -> Result<DemoImage, JsError> {
    synth_image(behavior, snr_db, duration_s, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn pll_loss_breakdown(logits: &[f64], labels: &str) -> Result<Vec<f64>, JsError> {
    pll_explain(logits, labels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn baseline_table(counts_csv: &str) -> Result<String, JsError> {
    baseline_text(counts_csv).map_err(|e| JsError::new(&e))
}
