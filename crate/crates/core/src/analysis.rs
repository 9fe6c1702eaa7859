//! Classification metrics, PCA variance ratios and latent dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, ParamCount};
use crate::Model32;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(invalid("confusion matrix must be square"));
        }
        Ok(Self { k, counts: rows.iter().flatten().copied().collect() })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(invalid(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(invalid(format!("class ({truth}, {pred}) out of range for K={}", self.k)));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, pred)).sum()
    }

    /// Header row of class names, then one row per true class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}"));
        let mut s = String::from("true\\pred");
        for p in 0..self.k {
            s.push(',');
            s.push_str(&name(p));
        }
        s.push('\n');
        for t in 0..self.k {
            s.push_str(&name(t));
            for p in 0..self.k {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}

/// How classes with no true and no predicted records enter the macro mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClasses {
    #[default]
    Exclude,
    /// Count them with zero precision, recall and F1.
    Include,
}

/// Percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn macro_metrics(cm: &ConfusionMatrix, absent: AbsentClasses) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(invalid("empty confusion matrix"));
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut r_sum, mut f_sum, mut used) = (0.0, 0.0, 0.0, 0usize);
    let mut trace = 0;
    for c in 0..cm.num_classes() {
        let tp = cm.get(c, c);
        trace += tp;
        let (pred, truth) = (cm.col_sum(c), cm.row_sum(c));
        if pred == 0 && truth == 0 && absent == AbsentClasses::Exclude {
            continue;
        }
        let p = ratio(tp, pred);
        let r = ratio(tp, truth);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        used += 1;
    }
    let u = used.max(1) as f64;
    Ok(Metrics {
        oa: 100.0 * trace as f64 / total as f64,
        precision: 100.0 * p_sum / u,
        recall: 100.0 * r_sum / u,
        f1: 100.0 * f_sum / u,
    })
}

/// Fraction of variance along the leading principal axes of the rows of `z` (`n × d`, row-major).
pub fn pca_variance_ratios(z: &[f64], n: usize, d: usize, n_components: usize) -> Result<Vec<f64>> {
    if n <= 1 || z.len() != n * d || d == 0 {
        return Err(invalid(format!("need N > 1 rows of dimension {d}, got {} values for N={n}", z.len())));
    }
    let mut m = DMatrix::from_row_slice(n, d, z);
    for c in 0..d {
        let mean = m.column(c).mean();
        m.column_mut(c).add_scalar_mut(-mean);
    }
    let cov = (m.transpose() * &m) / (n as f64 - 1.0);
    let trace = cov.trace();
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig.resize(n_components, 0.0);
    if trace <= 0.0 {
        return Ok(vec![0.0; n_components]);
    }
    Ok(eig.iter().map(|v| (v / trace).min(1.0)).collect())
}

/// Exact trainable-parameter count per module for a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<ParamCount> {
    Ok(Model32::new(cfg.clone(), 0)?.param_count())
}

/// Posterior means with labels and the predictions of every head.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub dim: usize,
    /// `n × dim`, row-major.
    pub z: Vec<f32>,
    pub labels: Vec<Option<usize>>,
    /// Heads Y, Z, Cos; `None` when a head is unavailable.
    pub predictions: Vec<[Option<usize>; 3]>,
}

const LATENT_MAGIC: &[u8; 4] = b"SLAT";
const LATENT_VERSION: u16 = 1;
const NONE: u16 = u16::MAX;

impl LatentDump {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self) -> Result<()> {
        if self.z.len() != self.len() * self.dim || self.predictions.len() != self.len() {
            return Err(invalid("latent dump fields disagree in length"));
        }
        Ok(())
    }

    /// Binary layout: magic, u16 version, u32 N, u32 D, then per row D f32, u16 label, 3 × u16 predictions (little-endian, 0xFFFF = none).
    pub fn write(&self, path: &Path) -> Result<()> {
        self.check()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(LATENT_MAGIC)?;
        w.write_all(&LATENT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let code = |v: Option<usize>| v.map_or(NONE, |c| c as u16);
        for i in 0..self.len() {
            for v in self.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&code(self.labels[i]).to_le_bytes())?;
            for p in self.predictions[i] {
                w.write_all(&code(p).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        let fail = |offset: usize, message: &str| Error::Format { offset: offset as u64, message: message.into() };
        if buf.len() < 14 || &buf[..4] != LATENT_MAGIC {
            return Err(fail(0, "not a latent dump"));
        }
        if u16::from_le_bytes([buf[4], buf[5]]) != LATENT_VERSION {
            return Err(fail(4, "unsupported latent dump version"));
        }
        let n = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(buf[10..14].try_into().expect("4 bytes")) as usize;
        let row = dim * 4 + 8;
        if buf.len() != 14 + n * row {
            return Err(fail(buf.len(), "latent dump length does not match its header"));
        }
        let decode = |b: &[u8]| match u16::from_le_bytes([b[0], b[1]]) {
            NONE => None,
            c => Some(c as usize),
        };
        let mut dump = LatentDump { dim, z: Vec::with_capacity(n * dim), labels: Vec::new(), predictions: Vec::new() };
        for i in 0..n {
            let r = &buf[14 + i * row..14 + (i + 1) * row];
            dump.z.extend(r[..dim * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))));
            let tail = &r[dim * 4..];
            dump.labels.push(decode(&tail[0..2]));
            dump.predictions.push([decode(&tail[2..4]), decode(&tail[4..6]), decode(&tail[6..8])]);
        }
        Ok(dump)
    }

    /// Columns `label,pred_y,pred_z,pred_cos,z0..z{D-1}`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,pred_y,pred_z,pred_cos");
        for j in 0..self.dim {
            s.push_str(&format!(",z{j}"));
        }
        s.push('\n');
        let opt = |v: Option<usize>| v.map(|c| c.to_string()).unwrap_or_default();
        for i in 0..self.len() {
            let p = self.predictions[i];
            s.push_str(&format!("{},{},{},{}", opt(self.labels[i]), opt(p[0]), opt(p[1]), opt(p[2])));
            for v in self.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// PCA variance ratios of the dumped latents.
    pub fn pca(&self, n_components: usize) -> Result<Vec<f64>> {
        let z: Vec<f64> = self.z.iter().map(|&v| v as f64).collect();
        pca_variance_ratios(&z, self.len(), self.dim, n_components)
    }
}
