//! Data model shared by every other module: multichannel windows,
//! standardization, segmentation, balanced subsampling, and the binary
//! dataset file format.

use crate::error::{Error, Result};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// One multichannel time-series segment, stored channel-major (C x T).
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    values: Array2<f32>,
}

impl Window {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("window must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("window contains non-finite values"));
        }
        Ok(Window {
            values: if values.is_standard_layout() {
                values
            } else {
                values.as_standard_layout().to_owned()
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn channel(&self, c: usize) -> ndarray::ArrayView1<'_, f32> {
        self.values.row(c)
    }

    /// Per-channel standardization to zero mean and unit population
    /// standard deviation (divisor T). Constant channels map to zeros.
    pub fn standardize(&self) -> Window {
        let mut out = self.values.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let t = row.len() as f32;
            let mean = row.sum() / t;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / t;
            if var <= 0.0 {
                row.fill(0.0);
            } else {
                let inv_std = var.sqrt().recip();
                row.mapv_inplace(|v| (v - mean) * inv_std);
            }
        }
        Window { values: out }
    }
}

/// A collection of equally shaped windows, optionally labeled and/or
/// carrying the adjacent next-in-time window per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub windows: Vec<Window>,
    pub labels: Option<Vec<u32>>,
    pub paired: Option<Vec<Window>>,
    pub n_classes: Option<u32>,
}

impl Dataset {
    pub fn unlabeled(windows: Vec<Window>) -> Result<Self> {
        let ds = Dataset {
            windows,
            labels: None,
            paired: None,
            n_classes: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn labeled(windows: Vec<Window>, labels: Vec<u32>, n_classes: u32) -> Result<Self> {
        let ds = Dataset {
            windows,
            labels: Some(labels),
            paired: None,
            n_classes: Some(n_classes),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_pairs(windows: Vec<Window>, paired: Vec<Window>) -> Result<Self> {
        let ds = Dataset {
            windows,
            labels: None,
            paired: Some(paired),
            n_classes: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::invalid("dataset has no windows"));
        }
        let (c, t) = (self.windows[0].channels(), self.windows[0].len());
        for w in &self.windows {
            if w.channels() != c || w.len() != t {
                return Err(Error::invalid("all windows must share C and T"));
            }
        }
        if let Some(p) = &self.paired {
            if p.len() != self.windows.len() {
                return Err(Error::invalid("paired length must match windows"));
            }
            for w in p {
                if w.channels() != c || w.len() != t {
                    return Err(Error::invalid("paired windows must share C and T"));
                }
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.windows.len() {
                return Err(Error::invalid("labels length must match windows"));
            }
            let nc = self
                .n_classes
                .ok_or_else(|| Error::invalid("labeled dataset needs n_classes"))?;
            if l.iter().any(|&x| x >= nc) {
                return Err(Error::invalid("label out of range"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.windows[0].channels()
    }

    pub fn window_len(&self) -> usize {
        self.windows[0].len()
    }

    /// Subset by instance indices, carrying labels and pairs along.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            paired: self
                .paired
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i].clone()).collect()),
            n_classes: self.n_classes,
        }
    }
}

/// Cut a C x T_total series into floor(T_total / window_len) consecutive
/// non-overlapping windows. With `emit_pairs`, entry i holds window i as
/// primary and window i+1 as paired (the final window is dropped).
pub fn segment(series: &Array2<f32>, window_len: usize, emit_pairs: bool) -> Result<Dataset> {
    let t_total = series.ncols();
    if window_len == 0 || window_len > t_total {
        return Err(Error::invalid(format!(
            "window_len {window_len} invalid for series of length {t_total}"
        )));
    }
    let n = t_total / window_len;
    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        let slice = series
            .slice(ndarray::s![.., i * window_len..(i + 1) * window_len])
            .to_owned();
        windows.push(Window::new(slice)?);
    }
    if emit_pairs {
        if n < 2 {
            return Err(Error::invalid("emit_pairs requires at least two windows"));
        }
        let paired = windows[1..].to_vec();
        windows.pop();
        Dataset::with_pairs(windows, paired)
    } else {
        Dataset::unlabeled(windows)
    }
}

/// Draw exactly `n_per_class` instances per class without replacement,
/// deterministically in `seed`. Returns the drawn subset and the
/// remaining pool, so a subsequent validation draw can never overlap.
pub fn sample_balanced(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("sample_balanced requires labels"))?;
    let n_classes = ds.n_classes.unwrap_or(0) as usize;
    let (drawn, rest) = sample_balanced_indices(labels, n_classes, n_per_class, seed)?;
    Ok((ds.select(&drawn), ds.select(&rest)))
}

/// Index-level form of `sample_balanced`, for callers operating on
/// precomputed per-window features instead of windows.
pub fn sample_balanced_indices(
    labels: &[u32],
    n_classes: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l as usize].push(i);
    }
    for (c, idx) in per_class.iter().enumerate() {
        if idx.len() < n_per_class {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} instances, need {n_per_class}",
                idx.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = Vec::with_capacity(n_per_class * n_classes);
    let mut rest = Vec::new();
    for idx in &mut per_class {
        idx.shuffle(&mut rng);
        drawn.extend_from_slice(&idx[..n_per_class]);
        rest.extend_from_slice(&idx[n_per_class..]);
    }
    rest.sort_unstable();
    Ok((drawn, rest))
}

const MAGIC: &[u8; 4] = b"MVTS";
const VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;
const FLAG_PAIRED: u16 = 2;

/// Write a dataset in the binary little-endian container format. The
/// file is written to a temporary sibling and atomically renamed.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let tmp = crate::persist::temp_sibling(path);
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        let mut flags = 0u16;
        if ds.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if ds.paired.is_some() {
            flags |= FLAG_PAIRED;
        }
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&flags.to_le_bytes())?;
        f.write_all(&(ds.len() as u32).to_le_bytes())?;
        f.write_all(&(ds.channels() as u32).to_le_bytes())?;
        f.write_all(&(ds.window_len() as u32).to_le_bytes())?;
        f.write_all(&ds.n_classes.unwrap_or(0).to_le_bytes())?;
        for w in &ds.windows {
            write_f32s(&mut f, w.values())?;
        }
        if let Some(p) = &ds.paired {
            for w in p {
                write_f32s(&mut f, w.values())?;
            }
        }
        if let Some(l) = &ds.labels {
            for &x in l {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_f32s<W: Write>(f: &mut W, a: &Array2<f32>) -> Result<()> {
    for &v in a.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::format(self.offset, format!("truncated: expected {N} more bytes"))
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn window(&mut self, c: usize, t: usize) -> Result<Window> {
        let mut buf = vec![0u8; c * t * 4];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::format(self.offset, "truncated window payload".to_string())
        })?;
        self.offset += buf.len() as u64;
        let vals: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let arr = Array2::from_shape_vec((c, t), vals)
            .map_err(|e| Error::format(self.offset, e.to_string()))?;
        Window::new(arr)
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = Reader {
        inner: std::io::BufReader::new(std::fs::File::open(path)?),
        offset: 0,
    };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let flags = r.u16()?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let t = r.u32()? as usize;
    let n_classes = r.u32()?;
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        windows.push(r.window(c, t)?);
    }
    let paired = if flags & FLAG_PAIRED != 0 {
        let mut p = Vec::with_capacity(n);
        for _ in 0..n {
            p.push(r.window(c, t)?);
        }
        Some(p)
    } else {
        None
    };
    let labels = if flags & FLAG_LABELS != 0 {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u32()?);
        }
        Some(l)
    } else {
        None
    };
    let ds = Dataset {
        windows,
        labels,
        paired,
        n_classes: if n_classes == 0 { None } else { Some(n_classes) },
    };
    ds.validate()
        .map_err(|e| Error::format(r.offset, e.to_string()))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(rows: &[&[f32]]) -> Window {
        let arr = Array2::from_shape_vec(
            (rows.len(), rows[0].len()),
            rows.iter().flat_map(|r| r.iter().cloned()).collect(),
        )
        .unwrap();
        Window::new(arr).unwrap()
    }

    #[test]
    fn standardize_constant_channel_maps_to_zeros() {
        let w = win(&[&[1.0, 1.0, 1.0, 1.0]]);
        assert!(w.standardize().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_two_point_channel() {
        let w = win(&[&[0.0, 2.0]]);
        let s = w.standardize();
        assert!((s.values()[[0, 0]] + 1.0).abs() < 1e-6);
        assert!((s.values()[[0, 1]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn standardize_population_std() {
        let w = win(&[&[-3.0, -1.0, 1.0, 3.0]]);
        let s = w.standardize();
        let expect = [-1.3416f32, -0.4472, 0.4472, 1.3416];
        for (a, e) in s.values().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn standardize_idempotent() {
        let w = win(&[&[0.3, -1.2, 4.5, 0.0, 2.2], &[1.0, 2.0, 3.0, 4.0, 5.0]]);
        let s1 = w.standardize();
        let s2 = s1.standardize();
        for (a, b) in s1.values().iter().zip(s2.values().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn segment_counts_and_pairing() {
        let series = Array2::from_shape_fn((2, 9000), |(c, t)| (c * 9000 + t) as f32);
        let ds = segment(&series, 3000, false).unwrap();
        assert_eq!(ds.len(), 3);
        let ds = segment(&Array2::zeros((2, 9500)), 3000, false).unwrap();
        assert_eq!(ds.len(), 3);
        let ds = segment(&series, 3000, true).unwrap();
        assert_eq!(ds.len(), 2);
        let p = ds.paired.as_ref().unwrap();
        assert_eq!(ds.windows[1].values(), p[0].values());
    }

    #[test]
    fn segment_preserves_values() {
        let series = Array2::from_shape_fn((2, 10), |(c, t)| (c * 10 + t) as f32);
        let ds = segment(&series, 3, false).unwrap();
        for (i, w) in ds.windows.iter().enumerate() {
            assert_eq!(
                w.values(),
                &series.slice(ndarray::s![.., i * 3..(i + 1) * 3]).to_owned()
            );
        }
    }

    #[test]
    fn segment_zero_window_errors() {
        assert!(segment(&Array2::zeros((2, 10)), 0, false).is_err());
        assert!(segment(&Array2::zeros((2, 10)), 11, false).is_err());
    }

    #[test]
    fn balanced_sampling_counts_and_determinism() {
        let n = 2000;
        let windows: Vec<Window> = (0..n)
            .map(|i| win(&[&[i as f32, 1.0], &[2.0, 3.0]]))
            .collect();
        let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let ds = Dataset::labeled(windows, labels, 2).unwrap();
        let (train, rest) = sample_balanced(&ds, 10, 42).unwrap();
        assert_eq!(train.len(), 20);
        let hist = train
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .filter(|&&l| l == 1)
            .count();
        assert_eq!(hist, 10);
        assert_eq!(rest.len(), n - 20);
        let (train2, _) = sample_balanced(&ds, 10, 42).unwrap();
        assert_eq!(train, train2);
        // A validation draw from the remainder cannot overlap: all first
        // column values are unique ids, so check disjointness through them.
        let (val, _) = sample_balanced(&rest, 10, 43).unwrap();
        let ids: std::collections::HashSet<u32> = train
            .windows
            .iter()
            .map(|w| w.values()[[0, 0]] as u32)
            .collect();
        assert!(val
            .windows
            .iter()
            .all(|w| !ids.contains(&(w.values()[[0, 0]] as u32))));
    }

    #[test]
    fn balanced_sampling_insufficient_errors_with_class() {
        let windows: Vec<Window> = (0..30).map(|_| win(&[&[0.0, 1.0]])).collect();
        let labels: Vec<u32> = (0..30).map(|i| if i < 10 { 0 } else { 1 }).collect();
        let ds = Dataset::labeled(windows, labels, 2).unwrap();
        let err = sample_balanced(&ds, 11, 1).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.mvts");
        let windows: Vec<Window> = (0..3)
            .map(|i| win(&[&[i as f32, 0.25, -1.5], &[3.25, f32::MIN_POSITIVE, 2.0]]))
            .collect();
        let paired = windows.clone();
        let mut ds = Dataset::with_pairs(windows, paired).unwrap();
        ds.labels = Some(vec![0, 1, 1]);
        ds.n_classes = Some(2);
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn file_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mvts");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let good = dir.path().join("good.mvts");
        let ds = Dataset::unlabeled(vec![win(&[&[1.0, 2.0]]); 4]).unwrap();
        write_dataset(&ds, &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        // Header claims 5 windows but payload holds 4.
        bytes[8] = 5;
        std::fs::write(&good, &bytes).unwrap();
        let err = read_dataset(&good).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
