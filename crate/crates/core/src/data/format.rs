//! `.sits` binary datasets with a `<name>.labels.json` class-name sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, StatSeries};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SITS";
pub const FORMAT_VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 16;
const NO_LABEL: u16 = 0xFFFF;

/// `data/train.sits` → `data/train.labels.json`.
pub fn labels_sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.labels.json"))
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    if ds.num_classes >= NO_LABEL as usize {
        return Err(Error::InvalidArgument(format!("K={} too large for u16 labels", ds.num_classes)));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    for (v, what) in [(ds.len(), "N"), (ds.timesteps, "T"), (ds.features, "F"), (ds.num_classes, "K")] {
        w.write_all(&u32_field(v, what)?.to_le_bytes())?;
    }
    for r in &ds.records {
        w.write_all(&r.parcel_id.to_le_bytes())?;
        w.write_all(&[r.label_present() as u8])?;
        let label = r.eval_label().map(|l| l as u16).unwrap_or(NO_LABEL);
        w.write_all(&label.to_le_bytes())?;
        for v in &r.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let names: BTreeMap<String, &String> = ds.class_names.iter().enumerate().map(|(i, n)| (i.to_string(), n)).collect();
    fs::write(labels_sidecar_path(path), serde_json::to_vec_pretty(&names)?)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                message: format!("unexpected end of file in {}", context()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Reads a `.sits` file. Class names come from the sidecar when present.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut ds = parse(&bytes)?;
    let sidecar = labels_sidecar_path(path);
    if sidecar.exists() {
        let names: BTreeMap<String, String> = serde_json::from_slice(&fs::read(sidecar)?)?;
        for (k, v) in names {
            let i: usize =
                k.parse().map_err(|_| Error::InvalidArgument(format!("sidecar key {k:?} is not a class index")))?;
            if i < ds.class_names.len() {
                ds.class_names[i] = v;
            }
        }
    }
    Ok(ds)
}

fn parse(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let header = || "header".to_string();
    if c.take(4, &header)? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected SITS".into() });
    }
    let version = c.take(1, &header)?[0];
    if version != FORMAT_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(c.take(4, &header)?.try_into().unwrap()) as usize;
    }
    let [n, t, f, k] = dims;
    debug_assert_eq!(c.pos, HEADER_LEN);
    let mut ds = Dataset::new(t, f, k, Dataset::default_class_names(k));
    ds.records.reserve(n.min(1 << 20));
    for i in 0..n {
        let start = c.pos as u64;
        let ctx = || format!("record {i}");
        let id = i64::from_le_bytes(c.take(8, &ctx)?.try_into().unwrap());
        let present = c.take(1, &ctx)?[0];
        let raw = u16::from_le_bytes(c.take(2, &ctx)?.try_into().unwrap());
        let feat = c.take(4 * t * f, &ctx)?;
        let features = feat.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let label = if raw == NO_LABEL { None } else { Some(raw as usize) };
        if let Some(l) = label {
            if l >= k {
                return Err(Error::Format { offset: start + 9, message: format!("record {i} label {l} >= K={k}") });
            }
        }
        if present > 1 || (present == 1 && label.is_none()) {
            return Err(Error::Format {
                offset: start + 8,
                message: format!("record {i} has inconsistent label flag"),
            });
        }
        ds.records.push(if present == 1 {
            StatSeries::new(id, features, label)
        } else {
            StatSeries::with_hidden_label(id, features, label)
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format { offset: c.pos as u64, message: "trailing bytes after last record".into() });
    }
    Ok(ds)
}
