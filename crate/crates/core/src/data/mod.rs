//! Parcel time series: preprocessing from pixel sets, datasets, label masking
//! and feature standardization.

mod format;
mod synthetic;

pub use format::{labels_sidecar_path, read_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use synthetic::{default_phenology, generate_split, generate_synthetic, Phenology, SyntheticConfig};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Pixel reflectances of one parcel, `[n_pixels × timesteps × bands]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelParcel {
    pub parcel_id: i64,
    pub n_pixels: usize,
    pub timesteps: usize,
    pub bands: usize,
    pub pixels: Vec<f64>,
    pub label: Option<usize>,
}

impl PixelParcel {
    pub fn new(
        parcel_id: i64,
        n_pixels: usize,
        timesteps: usize,
        bands: usize,
        pixels: Vec<f64>,
        label: Option<usize>,
    ) -> Result<Self> {
        if n_pixels == 0 || timesteps == 0 || bands == 0 {
            return Err(invalid("parcel needs at least one pixel, timestep and band"));
        }
        if pixels.len() != n_pixels * timesteps * bands {
            return Err(invalid(format!(
                "pixel buffer has {} values, expected {n_pixels}×{timesteps}×{bands}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite reflectance"));
        }
        Ok(Self { parcel_id, n_pixels, timesteps, bands, pixels, label })
    }

    fn at(&self, p: usize, t: usize, b: usize) -> f64 {
        self.pixels[(p * self.timesteps + t) * self.bands + b]
    }
}

/// Per-timestep band statistics of a parcel: `[T × 2B]`, means then population stds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSeries {
    pub parcel_id: i64,
    pub features: Vec<f32>,
    label: Option<usize>,
    label_present: bool,
}

impl StatSeries {
    pub fn new(parcel_id: i64, features: Vec<f32>, label: Option<usize>) -> Self {
        Self { parcel_id, features, label_present: label.is_some(), label }
    }

    /// Record whose label is kept for evaluation but hidden from training.
    pub fn with_hidden_label(parcel_id: i64, features: Vec<f32>, label: Option<usize>) -> Self {
        Self { parcel_id, features, label, label_present: false }
    }

    /// Label visible to training; `None` for unlabelled records.
    pub fn train_label(&self) -> Option<usize> {
        if self.label_present {
            self.label
        } else {
            None
        }
    }

    /// Ground truth for evaluation, hidden or not.
    pub fn eval_label(&self) -> Option<usize> {
        self.label
    }

    pub fn label_present(&self) -> bool {
        self.label_present
    }

    pub(crate) fn set_label_present(&mut self, present: bool) {
        self.label_present = present && self.label.is_some();
    }

    /// Overwrite the stored (possibly hidden) label.
    pub fn set_hidden_label(&mut self, label: Option<usize>) {
        self.label = label;
        if label.is_none() {
            self.label_present = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<StatSeries>,
    pub timesteps: usize,
    pub features: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(timesteps: usize, features: usize, num_classes: usize, class_names: Vec<String>) -> Self {
        Self { records: Vec::new(), timesteps, features, num_classes, class_names }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn default_class_names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class_{i}")).collect()
    }

    /// Checks the shared-shape and label-range invariants.
    pub fn validate(&self) -> Result<()> {
        let width = self.timesteps * self.features;
        for (i, r) in self.records.iter().enumerate() {
            if r.features.len() != width {
                return Err(invalid(format!("record {i} has {} values, expected {width}", r.features.len())));
            }
            if let Some(l) = r.eval_label() {
                if l >= self.num_classes {
                    return Err(invalid(format!("record {i} label {l} >= K={}", self.num_classes)));
                }
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("record {i} has non-finite features")));
            }
        }
        Ok(())
    }

    pub fn labelled_count(&self) -> usize {
        self.records.iter().filter(|r| r.train_label().is_some()).count()
    }

    /// Number of records per (evaluation) class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            if let Some(l) = r.eval_label() {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { records: indices.iter().map(|&i| self.records[i].clone()).collect(), ..self.empty_like() }
    }

    pub fn empty_like(&self) -> Dataset {
        Dataset::new(self.timesteps, self.features, self.num_classes, self.class_names.clone())
    }
}

/// Median filter along time with the given window and stride, per pixel and band.
///
/// Output length is `(T_raw - window) / stride + 1`.
pub fn temporal_median_downsample(parcel: &PixelParcel, window: usize, stride: usize) -> Result<PixelParcel> {
    if window == 0 || stride == 0 {
        return Err(invalid("window and stride must be >= 1"));
    }
    if window > parcel.timesteps {
        return Err(invalid(format!("window {window} exceeds series length {}", parcel.timesteps)));
    }
    let t_out = (parcel.timesteps - window) / stride + 1;
    let mut out = Vec::with_capacity(parcel.n_pixels * t_out * parcel.bands);
    let mut buf = Vec::with_capacity(window);
    for p in 0..parcel.n_pixels {
        for t in 0..t_out {
            for b in 0..parcel.bands {
                buf.clear();
                buf.extend((0..window).map(|w| parcel.at(p, t * stride + w, b)));
                out.push(median(&mut buf));
            }
        }
    }
    Ok(PixelParcel { timesteps: t_out, pixels: out, ..parcel.clone() })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-timestep mean and population std over the parcel's pixels.
pub fn parcel_statistics(parcel: &PixelParcel) -> StatSeries {
    let (np, t_len, bands) = (parcel.n_pixels, parcel.timesteps, parcel.bands);
    let f = 2 * bands;
    let mut features = vec![0f32; t_len * f];
    let inv = 1.0 / np as f64;
    for t in 0..t_len {
        for b in 0..bands {
            let mean = (0..np).map(|p| parcel.at(p, t, b)).sum::<f64>() * inv;
            let var = (0..np).map(|p| (parcel.at(p, t, b) - mean).powi(2)).sum::<f64>() * inv;
            features[t * f + b] = mean as f32;
            features[t * f + bands + b] = var.sqrt() as f32;
        }
    }
    StatSeries::new(parcel.parcel_id, features, parcel.label)
}

/// Hide labels so that, per class, `round_half_up(fraction · n_k)` stay visible.
///
/// Hidden labels stay on the record for evaluation.
pub fn mask_labels(ds: &Dataset, labelled_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
        return Err(invalid(format!("labelled fraction {labelled_fraction} outside (0, 1]")));
    }
    let mut out = ds.clone();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if let Some(l) = r.train_label() {
            by_class.entry(l).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by_class.values_mut() {
        let keep = (labelled_fraction * idx.len() as f64 + 0.5 + 1e-9).floor() as usize;
        idx.shuffle(&mut rng);
        for &i in &idx[keep.min(idx.len())..] {
            out.records[i].set_label_present(false);
        }
    }
    Ok(out)
}

/// Per-feature z-score statistics computed over all records and timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let f = ds.features;
        let mut sum = vec![0f64; f];
        let mut n = 0usize;
        for r in &ds.records {
            for row in r.features.chunks_exact(f) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut var = vec![0f64; f];
        for r in &ds.records {
            for row in r.features.chunks_exact(f) {
                for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x as f64 - m).powi(2);
                }
            }
        }
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|v| ((v / n).sqrt().max(1e-6)) as f32).collect(),
        }
    }

    pub fn identity(features: usize) -> Self {
        Self { mean: vec![0.0; features], std: vec![1.0; features] }
    }

    pub fn apply(&self, features: &[f32]) -> Vec<f32> {
        let f = self.mean.len();
        features.iter().enumerate().map(|(i, &v)| (v - self.mean[i % f]) / self.std[i % f]).collect()
    }
}
