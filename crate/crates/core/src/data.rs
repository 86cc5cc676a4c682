//! Datasets: the Gaussian robust/non-robust synthetic task, CIFAR-style
//! binary records, a lossless container for derived datasets, and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DataFormatError, Error, Result};
use crate::tensor::Tensor;

/// Coordinate roles of a synthetic dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub robust: Vec<usize>,
    pub non_robust: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub meta: Option<FeatureMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() || inputs.shape().len() < 2 {
            return Err(Error::Dimension(format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index(format!("label {bad} with {classes} classes")));
        }
        Ok(Self { inputs, labels, classes, meta: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            meta: self.meta.clone(),
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn as_batch(&self) -> Batch {
        Batch { x: self.inputs.clone(), y: self.labels.clone() }
    }
}

/// Two-class Gaussian task with robust and non-robust coordinates.
///
/// Robust coordinates are drawn from `N(s * robust_margin, noise^2)`, non-robust
/// ones from `N(s * nonrobust_margin, noise^2)`, with `s = 2y - 1`. An l-inf
/// perturbation of size `flip_budget` can reverse the class correlation of
/// every non-robust coordinate but not of the robust ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_robust: usize,
    pub d_nonrobust: usize,
    pub robust_margin: f64,
    pub nonrobust_margin: f64,
    pub noise: f64,
    pub flip_budget: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            d_robust: 5,
            d_nonrobust: 400,
            robust_margin: 2.0,
            nonrobust_margin: 0.2,
            noise: 1.0,
            flip_budget: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_robust == 0 {
            return Err(Error::Config("synthetic spec needs n >= 1 and d_robust >= 1".into()));
        }
        if !(self.robust_margin > self.flip_budget
            && self.flip_budget > self.nonrobust_margin
            && self.nonrobust_margin > 0.0)
        {
            return Err(Error::Config(format!(
                "synthetic margins must satisfy robust ({}) > flip budget ({}) > non-robust ({}) > 0",
                self.robust_margin, self.flip_budget, self.nonrobust_margin
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d_robust + self.d_nonrobust
    }
}

pub fn generate_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.dim();
    let mut data = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..spec.n {
        let y = rng.random_range(0..2usize);
        let s = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            let mu = if j < spec.d_robust { spec.robust_margin } else { spec.nonrobust_margin };
            data.push(s * mu + noise.sample(rng));
        }
        labels.push(y);
    }
    let mut ds = Dataset::new(Tensor::new(vec![spec.n, d], data)?, labels, 2)?;
    ds.meta = Some(FeatureMeta { robust: (0..spec.d_robust).collect(), non_robust: (spec.d_robust..d).collect() });
    Ok(ds)
}

/// One label byte followed by 3x32x32 pixel bytes.
pub const IMAGE_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 style binary records, scaling pixels to `[0, 1]`.
pub fn parse_binary_images(bytes: &[u8]) -> Result<Dataset> {
    let k = bytes.len() / IMAGE_RECORD_BYTES;
    let rem = bytes.len() % IMAGE_RECORD_BYTES;
    if rem != 0 {
        return Err(DataFormatError::Truncated { offset: k * IMAGE_RECORD_BYTES, remaining: rem }.into());
    }
    if k == 0 {
        return Err(Error::InsufficientData("image file holds no records".into()));
    }
    let mut labels = Vec::with_capacity(k);
    let mut pixels = Vec::with_capacity(k * (IMAGE_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(IMAGE_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(DataFormatError::BadLabel { offset: i * IMAGE_RECORD_BYTES, label: rec[0] }.into());
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![k, 3, 32, 32], pixels)?, labels, 10)
}

pub fn load_binary_images(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_binary_images(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `[n, 3, 32, 32]` inputs in `[0, 1]` as binary records (pixels rounded to bytes).
pub fn encode_binary_images(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.input_shape() != [3, 32, 32] || ds.classes > 10 {
        return Err(Error::Dimension(format!(
            "binary image records hold [3, 32, 32] inputs with <= 10 classes, got {:?}",
            ds.input_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * IMAGE_RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.inputs.row(i).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub const DATASET_MAGIC: &[u8; 8] = b"RRMDATA1";

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    format_version: u32,
    shape: Vec<usize>,
    classes: usize,
}

/// Lossless container: magic, u64 LE header length, JSON header, u32 LE
/// labels, f64 LE inputs.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let header = ContainerHeader { format_version: 1, shape: ds.inputs.shape().to_vec(), classes: ds.classes };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + ds.len() * 4 + ds.inputs.len() * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for v in ds.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let bad = |m: &str| Error::from(DataFormatError::Container(m.to_string()));
    if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("missing RRMDATA1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != 1 {
        return Err(bad(&format!("unsupported version {}", header.format_version)));
    }
    let n = *header.shape.first().ok_or_else(|| bad("empty shape"))?;
    let count: usize = header.shape.iter().product();
    let expected = hend + n * 4 + count * 8;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let labels =
        bytes[hend..hend + n * 4].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let data = bytes[hend + n * 4..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Dataset::new(Tensor::new(header.shape, data)?, labels, header.classes)
}

/// Sidecar path holding [`FeatureMeta`] next to a dataset file.
pub fn meta_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))?;
    if let Some(meta) = &ds.meta {
        let side = meta_sidecar(path);
        let text = serde_json::to_string_pretty(meta).expect("meta serialises");
        fs::write(&side, text).map_err(|e| Error::io(side, e))?;
    }
    Ok(())
}

/// Loads either container format, picking by magic bytes.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(DATASET_MAGIC) {
        return parse_binary_images(&bytes);
    }
    let mut ds = decode_dataset(&bytes)?;
    let side = meta_sidecar(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        ds.meta = Some(serde_json::from_str(&text).map_err(|e| DataFormatError::Container(e.to_string()))?);
    }
    Ok(ds)
}

/// Index partition of one epoch; the last batch may be short.
pub fn batch_indices<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches<R: Rng + ?Sized>(ds: &Dataset, batch_size: usize, shuffle: bool, rng: &mut R) -> Result<Vec<Batch>> {
    Ok(batch_indices(ds.len(), batch_size, shuffle, rng)?
        .into_iter()
        .map(|idx| Batch { x: ds.inputs.select_rows(&idx), y: idx.iter().map(|&i| ds.labels[i]).collect() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_sizes_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch_indices(10, 3, false, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
        let s1 = batch_indices(10, 4, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let s2 = batch_indices(10, 4, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(s1, s2);
        let mut all = s1.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_indices(10, 0, false, &mut rng).is_err());
    }

    #[test]
    fn record_arithmetic() {
        let zeros = vec![0u8; IMAGE_RECORD_BYTES * 3];
        let ds = parse_binary_images(&zeros).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels[0], 0);
        assert!(ds.inputs.data().iter().all(|&v| v == 0.0));

        let mut cut = zeros.clone();
        cut.push(7);
        match parse_binary_images(&cut).unwrap_err() {
            Error::DataFormat(DataFormatError::Truncated { offset, remaining }) => {
                assert_eq!((offset, remaining), (3 * IMAGE_RECORD_BYTES, 1));
            }
            e => panic!("{e}"),
        }

        let mut bad = zeros;
        bad[IMAGE_RECORD_BYTES] = 10;
        assert!(matches!(
            parse_binary_images(&bad),
            Err(Error::DataFormat(DataFormatError::BadLabel { offset: IMAGE_RECORD_BYTES, label: 10 }))
        ));
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let mut rec = vec![0u8; IMAGE_RECORD_BYTES];
        rec[0] = 9;
        rec[1] = 255;
        rec[2] = 51;
        let ds = parse_binary_images(&rec).unwrap();
        assert_eq!(ds.labels, vec![9]);
        assert_eq!(ds.inputs.data()[0], 1.0);
        assert_eq!(ds.inputs.data()[1], 0.2);
        assert_eq!(encode_binary_images(&ds).unwrap(), rec);
    }

    #[test]
    fn container_round_trip() {
        let spec = SyntheticSpec { n: 20, d_nonrobust: 7, ..Default::default() };
        let ds = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
        let bytes = encode_dataset(&ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn noiseless_synthetic_is_exact() {
        let spec = SyntheticSpec { n: 50, noise: 0.0, d_nonrobust: 3, ..Default::default() };
        let ds = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for i in 0..ds.len() {
            let s = if ds.labels[i] == 1 { 1.0 } else { -1.0 };
            let row = ds.inputs.row(i);
            assert!(row[..5].iter().all(|&v| v == s * 2.0));
            // Separable by the sign of the robust sum.
            assert_eq!((row[..5].iter().sum::<f64>() > 0.0) as usize, ds.labels[i]);
        }
        let meta = ds.meta.unwrap();
        assert_eq!(meta.robust, vec![0, 1, 2, 3, 4]);
        assert_eq!(meta.non_robust, vec![5, 6, 7]);
    }

    #[test]
    fn spec_invariants_enforced() {
        let bad = SyntheticSpec { nonrobust_margin: 0.6, ..Default::default() };
        assert!(matches!(generate_synthetic(&bad, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
        let bad = SyntheticSpec { flip_budget: 2.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
