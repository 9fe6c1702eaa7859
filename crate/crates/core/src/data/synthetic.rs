//! Synthetic parcels with double-logistic phenology.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{parcel_statistics, temporal_median_downsample, Dataset, PixelParcel};
use crate::error::{invalid, Result};

/// Season-relative curve parameters of one class. Times are fractions of the season.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phenology {
    pub onset: f64,
    pub peak: f64,
    pub amplitude: f64,
    /// Logistic slope scale.
    pub width: f64,
    /// Per-band multiplier on the vegetation signal.
    pub band_gain: Vec<f64>,
    /// Per-band bare-soil reflectance.
    pub soil: Vec<f64>,
}

impl Phenology {
    /// Vegetation signal in [0, amplitude] at season fraction `s`; senescence mirrors green-up around the peak.
    pub fn signal(&self, s: f64) -> f64 {
        let offset = 2.0 * self.peak - self.onset;
        let rise = 1.0 / (1.0 + (-(s - self.onset) / self.width).exp());
        let fall = 1.0 / (1.0 + (-(s - offset) / self.width).exp());
        self.amplitude * (rise - fall)
    }

    fn shifted(&self, shift: f64, amp_scale: f64) -> Self {
        Self {
            onset: self.onset + shift,
            peak: self.peak + shift,
            amplitude: self.amplitude * amp_scale,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub timesteps: usize,
    pub bands: usize,
    pub n_parcels: usize,
    /// Inclusive range of pixels per parcel.
    pub pixels_per_parcel: (usize, usize),
    /// One entry per class; `None` derives them from the seed.
    pub phenology: Option<Vec<Phenology>>,
    pub noise_sigma: f64,
    /// Std of per-parcel timing shift (season fraction); amplitude jitters by five times this.
    pub parcel_jitter: f64,
    /// Relative class frequencies; uniform when `None`.
    pub class_weights: Option<Vec<f64>>,
    /// Raw observations per output timestep; raw series are median-filtered with this window and stride.
    pub raw_step: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            timesteps: 64,
            bands: 4,
            n_parcels: 2000,
            pixels_per_parcel: (8, 24),
            phenology: None,
            noise_sigma: 0.03,
            parcel_jitter: 0.02,
            class_weights: None,
            raw_step: 5,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("synthetic data needs K >= 2"));
        }
        if self.timesteps == 0 || self.bands == 0 || self.raw_step == 0 {
            return Err(invalid("timesteps, bands and raw_step must be >= 1"));
        }
        let (lo, hi) = self.pixels_per_parcel;
        if lo == 0 || hi < lo {
            return Err(invalid(format!("bad pixel range {lo}..={hi}")));
        }
        if self.noise_sigma < 0.0 || self.parcel_jitter < 0.0 {
            return Err(invalid("noise levels must be non-negative"));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes || w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(invalid("class weights must be K non-negative values with positive sum"));
            }
        }
        if let Some(p) = &self.phenology {
            if p.len() != self.num_classes {
                return Err(invalid(format!("{} phenology entries for K={}", p.len(), self.num_classes)));
            }
            for (i, a) in p.iter().enumerate() {
                if a.band_gain.len() != self.bands || a.soil.len() != self.bands || a.width <= 0.0 {
                    return Err(invalid(format!("phenology {i} has wrong band count or non-positive width")));
                }
                if p[..i].iter().any(|b| b == a) {
                    return Err(invalid(format!("phenology {i} duplicates an earlier class")));
                }
            }
        }
        Ok(())
    }

    fn class_phenology(&self) -> Vec<Phenology> {
        self.phenology.clone().unwrap_or_else(|| default_phenology(self.num_classes, self.bands, self.seed))
    }
}

/// Spread K classes over onset, season length, amplitude and spectral signature.
pub fn default_phenology(k: usize, bands: usize, seed: u64) -> Vec<Phenology> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let perm = |rng: &mut ChaCha8Rng| {
        let mut p: Vec<usize> = (0..k).collect();
        p.shuffle(rng);
        p
    };
    let (p_onset, p_len, p_amp) = (perm(&mut rng), perm(&mut rng), perm(&mut rng));
    let step = |i: usize| i as f64 / (k - 1).max(1) as f64;
    // blue, green, red, nir; extra bands reuse the nir response
    let base_gain = [-0.03, 0.04, -0.06, 0.35];
    (0..k)
        .map(|c| {
            let onset = 0.12 + 0.30 * step(p_onset[c]);
            let peak = onset + 0.10 + 0.12 * step(p_len[c]);
            let band_gain =
                (0..bands).map(|b| base_gain[b.min(3)] * (1.0 + 0.3 * rng.random_range(-1.0..1.0))).collect();
            let soil = (0..bands).map(|b| 0.06 + 0.02 * b as f64 + rng.random_range(0.0..0.08)).collect();
            Phenology { onset, peak, amplitude: 0.5 + 0.5 * step(p_amp[c]), width: 0.025, band_gain, soil }
        })
        .collect()
}

/// Labels for `n` records following the class weights; exact largest-remainder counts, shuffled.
fn assign_labels(cfg: &SyntheticConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = cfg.num_classes;
    let w = cfg.class_weights.clone().unwrap_or_else(|| vec![1.0; k]);
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|v| v / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[c] += 1;
        missing -= 1;
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
    labels.shuffle(rng);
    labels
}

fn render_parcel(
    cfg: &SyntheticConfig,
    id: i64,
    label: usize,
    pheno: &Phenology,
    rng: &mut ChaCha8Rng,
) -> Result<PixelParcel> {
    let (lo, hi) = cfg.pixels_per_parcel;
    let n_px = rng.random_range(lo..=hi);
    let t_raw = cfg.timesteps * cfg.raw_step;
    let b = cfg.bands;
    let jitter = Normal::new(0.0, cfg.parcel_jitter.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let (shift, amp) =
        if cfg.parcel_jitter > 0.0 { (jitter.sample(rng), 1.0 + 5.0 * jitter.sample(rng)) } else { (0.0, 1.0) };
    let curve = pheno.shifted(shift, amp.max(0.1));
    let clean: Vec<f64> = (0..t_raw)
        .flat_map(|t| {
            let v = curve.signal((t as f64 + 0.5) / t_raw as f64);
            let curve = &curve;
            (0..b).map(move |j| curve.soil[j] + curve.band_gain[j] * v)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut pixels = Vec::with_capacity(n_px * t_raw * b);
    for _ in 0..n_px {
        if cfg.noise_sigma > 0.0 {
            pixels.extend(clean.iter().map(|&c| c + noise.sample(rng)));
        } else {
            pixels.extend_from_slice(&clean);
        }
    }
    PixelParcel::new(id, n_px, t_raw, b, pixels, Some(label))
}

fn generate_with(cfg: &SyntheticConfig, n: usize, stream: u64, id_base: i64) -> Result<Dataset> {
    cfg.validate()?;
    let phenology = cfg.class_phenology();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let labels = assign_labels(cfg, n, &mut rng);
    let mut ds =
        Dataset::new(cfg.timesteps, 2 * cfg.bands, cfg.num_classes, Dataset::default_class_names(cfg.num_classes));
    for (i, &label) in labels.iter().enumerate() {
        let raw = render_parcel(cfg, id_base + i as i64, label, &phenology[label], &mut rng)?;
        let filtered = temporal_median_downsample(&raw, cfg.raw_step, cfg.raw_step)?;
        ds.records.push(parcel_statistics(&filtered));
    }
    Ok(ds)
}

/// `cfg.n_parcels` labelled parcels, deterministic under `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    generate_with(cfg, cfg.n_parcels, 0, 0)
}

/// Train and test sets sharing class phenology but drawn from disjoint random streams.
pub fn generate_split(cfg: &SyntheticConfig, n_test: usize) -> Result<(Dataset, Dataset)> {
    let train = generate_with(cfg, cfg.n_parcels, 0, 0)?;
    let test = generate_with(cfg, n_test, 1, cfg.n_parcels as i64)?;
    Ok((train, test))
}
