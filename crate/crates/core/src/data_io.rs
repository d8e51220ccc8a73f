//! CIFAR-10 binary ingestion, normalization statistics and checkpoints.
//!
//! CIFAR-10 batch files are runs of 3073-byte records: one label byte then
//! 1024 red, 1024 green and 1024 blue pixel bytes (row-major 32×32 planes).
//!
//! Checkpoint layout (all integers little-endian u32):
//!
//! ```text
//! "APVT" | version | entry count | { name len | name | rank | extents.. | f32 payload }*
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILES: [&str; 1] = ["test_batch.bin"];
/// Normalization sidecar written next to the batch files.
pub const STATS_FILE: &str = "apvt_norm_stats.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => &TEST_FILES,
        }
    }
}

/// Labels and channel-planar pixel bytes, in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawRecords {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn parse_records(bytes: &[u8], path: &Path) -> Result<RawRecords> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::RecordLength { path: path.to_path_buf(), len: bytes.len() as u64, record: RECORD_BYTES });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut out = RawRecords { labels: Vec::with_capacity(n), pixels: Vec::with_capacity(n * IMAGE_BYTES) };
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::BadLabel { index: i, label: rec[0] });
        }
        out.labels.push(rec[0]);
        out.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(out)
}

fn split_paths(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = split.files().iter().map(|f| dir.join(f)).collect();
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        return Err(Error::MissingFile(missing.clone()));
    }
    Ok(paths)
}

/// Reads every record of a split. Files are parsed concurrently and
/// concatenated in file order.
pub fn read_split(dir: &Path, split: Split) -> Result<RawRecords> {
    let paths = split_paths(dir, split)?;
    let parts: Vec<Result<RawRecords>> = std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .iter()
            .map(|p| s.spawn(move || parse_records(&fs::read(p)?, p)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("reader thread panicked")).collect()
    });
    let mut all = RawRecords::default();
    let mut offset = 0;
    for part in parts {
        let part = part.map_err(|e| match e {
            Error::BadLabel { index, label } => Error::BadLabel { index: index + offset, label },
            other => other,
        })?;
        offset += part.len();
        all.labels.extend(part.labels);
        all.pixels.extend(part.pixels);
    }
    Ok(all)
}

/// Per-channel mean and population std of pixels scaled to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn from_records(raw: &RawRecords) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in raw.pixels.chunks_exact(IMAGE_BYTES) {
            for ch in 0..3 {
                for &b in &img[ch * plane..(ch + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (raw.len() * plane) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0f64; 3];
        for ch in 0..3 {
            let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
            // constant channels would divide by zero
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    /// `mean_r mean_g mean_b std_r std_g std_b`.
    pub fn to_sidecar(&self) -> String {
        let v: Vec<String> = self.mean.iter().chain(&self.std).map(|x| format!("{x:.17e}")).collect();
        format!("{}\n", v.join(" "))
    }

    pub fn parse_sidecar(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadSidecar { path: path.to_path_buf(), reason };
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("`{t}`: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 6 {
            return Err(bad(format!("expected 6 numbers, found {}", vals.len())));
        }
        if vals[3..].iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(bad("standard deviations must be positive".into()));
        }
        Ok(Self { mean: [vals[0], vals[1], vals[2]], std: [vals[3], vals[4], vals[5]] })
    }

    /// Reads the sidecar in `dir`, or computes the statistics from the full
    /// training split and writes the sidecar.
    pub fn load_or_compute(dir: &Path) -> Result<Self> {
        let path = dir.join(STATS_FILE);
        if path.is_file() {
            return Self::parse_sidecar(&fs::read_to_string(&path)?, &path);
        }
        let stats = Self::from_records(&read_split(dir, Split::Train)?)?;
        fs::write(&path, stats.to_sidecar())?;
        Ok(stats)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, 3, 32, 32]`, normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn from_records(raw: &RawRecords, stats: &NormStats, split: Split, limit: Option<usize>) -> Result<Self> {
        let n = limit.map_or(raw.len(), |l| l.min(raw.len()));
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut data = Vec::with_capacity(n * IMAGE_BYTES);
        for img in raw.pixels.chunks_exact(IMAGE_BYTES).take(n) {
            for ch in 0..3 {
                let (m, s) = (stats.mean[ch], stats.std[ch]);
                data.extend(img[ch * plane..(ch + 1) * plane].iter().map(|&b| ((b as f64 / 255.0 - m) / s) as f32));
            }
        }
        Ok(Self {
            images: Tensor::new(&[n, 3, IMAGE_SIDE, IMAGE_SIDE], data)?,
            labels: raw.labels[..n].iter().map(|&l| l as usize).collect(),
            num_classes: NUM_CLASSES,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given records into a `[B, 3, 32, 32]` batch, optionally
    /// mirroring selected images horizontally.
    pub fn batch<T: Scalar>(&self, indices: &[usize], flip: Option<&[bool]>) -> (Tensor<T>, Vec<usize>) {
        let data = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for (k, &i) in indices.iter().enumerate() {
            let img = &data[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
            if flip.is_some_and(|f| f[k]) {
                for row in img.chunks_exact(IMAGE_SIDE) {
                    out.extend(row.iter().rev().map(|&v| T::from_f64(v as f64)));
                }
            } else {
                out.extend(img.iter().map(|&v| T::from_f64(v as f64)));
            }
        }
        let t = Tensor::new(&[indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], out).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `limit` records whose label is in `classes`, relabeled to the
    /// position of their class in `classes`.
    pub fn class_subset(&self, classes: &[usize], limit: usize) -> Result<Self> {
        let picked: Vec<(usize, usize)> = self
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| classes.iter().position(|c| c == l).map(|k| (i, k)))
            .take(limit)
            .collect();
        if picked.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let src = self.images.data();
        let mut data = Vec::with_capacity(picked.len() * IMAGE_BYTES);
        for &(i, _) in &picked {
            data.extend_from_slice(&src[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
        }
        Ok(Self {
            images: Tensor::new(&[picked.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)?,
            labels: picked.iter().map(|&(_, k)| k).collect(),
            num_classes: classes.len(),
            split: self.split,
        })
    }
}

/// Loads a split, normalized with training-split statistics. `limit` keeps
/// the first records in file order.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let raw = read_split(dir, split)?;
    let stats = NormStats::load_or_compute(dir)?;
    Dataset::from_records(&raw, &stats, split, limit)
}

/// Writes records in the CIFAR-10 binary layout.
pub fn write_cifar_batch(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * IMAGE_BYTES {
        return Err(Error::Config(format!("{} labels but {} pixel bytes", labels.len(), pixels.len())));
    }
    let mut buf = Vec::with_capacity(labels.len() * RECORD_BYTES);
    for (l, img) in labels.iter().zip(pixels.chunks_exact(IMAGE_BYTES)) {
        buf.push(*l);
        buf.extend_from_slice(img);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Class-conditioned stand-in images in the CIFAR-10 layout: each class has
/// its own grating orientation, frequency and tint, with random phase,
/// contrast and per-pixel noise. Labels cycle through the ten classes in a
/// seeded random order.
pub fn synthetic_records(n: usize, seed: u64) -> RawRecords {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = RawRecords { labels: Vec::with_capacity(n), pixels: Vec::with_capacity(n * IMAGE_BYTES) };
    for _ in 0..n {
        let label: u8 = rng.gen_range(0..NUM_CLASSES as u8);
        let k = label as f64;
        let angle = k * std::f64::consts::PI / NUM_CLASSES as f64;
        let freq = 0.25 + 0.05 * (k % 3.0);
        let (ca, sa) = (angle.cos(), angle.sin());
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let contrast: f64 = rng.gen_range(8.0..24.0);
        for ch in 0..3 {
            let tint = 128.0 + 6.0 * ((k + 1.0) * (ch as f64 + 1.0)).sin() + rng.gen_range(-30.0..30.0);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let t = freq * (ca * x as f64 + sa * y as f64) + phase;
                    let v = tint + contrast * t.sin() + rng.gen_range(-64.0..64.0);
                    out.pixels.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        out.labels.push(label);
    }
    out
}

/// Writes a full synthetic split set (`per_file` records in each of the six
/// batch files) into `dir`.
pub fn write_synthetic_cifar(dir: &Path, per_file: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, name) in TRAIN_FILES.iter().chain(&TEST_FILES).enumerate() {
        let raw = synthetic_records(per_file, seed.wrapping_add(i as u64));
        write_cifar_batch(&dir.join(name), &raw.labels, &raw.pixels)?;
    }
    Ok(())
}

// ── checkpoints ─────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"APVT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes the registry in order; payloads are always f32.
pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!("unexpected end of file reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Corrupt(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Corrupt(format!("entry `{name}` shape overflows")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("payload overflows".into()))?, "payload")?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Validates every entry against the registry before writing any of them.
pub fn apply_checkpoint<T: Scalar>(store: &mut ParamStore<T>, entries: &[CheckpointEntry]) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some(e) = entries.get(i) else {
            return Err(Error::NameMismatch { index: i, expected: name.clone(), found: "<end of checkpoint>".into() });
        };
        if &e.name != name {
            return Err(Error::NameMismatch { index: i, expected: name.clone(), found: e.name.clone() });
        }
        if &e.shape != shape {
            return Err(Error::ShapeMismatch { name: name.clone(), expected: shape.clone(), found: e.shape.clone() });
        }
    }
    if entries.len() > expected.len() {
        let i = expected.len();
        return Err(Error::NameMismatch { index: i, expected: "<end of model>".into(), found: entries[i].name.clone() });
    }
    for e in entries {
        let t = store.by_name_mut(&e.name).expect("validated above");
        for (dst, &src) in t.data_mut().iter_mut().zip(&e.data) {
            *dst = T::from_f64(src as f64);
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(&model.store))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let entries = decode_checkpoint(&fs::read(path)?)?;
    apply_checkpoint(&mut model.store, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; RECORD_BYTES];
        r[0] = label;
        r
    }

    #[test]
    fn parse_is_position_exact() {
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            let mut r = record(i, 0);
            r[1] = 10 * i;
            r[RECORD_BYTES - 1] = 10 * i + 1;
            bytes.extend(r);
        }
        let raw = parse_records(&bytes, Path::new("x")).unwrap();
        assert_eq!(raw.labels, [0, 1, 2, 3]);
        for i in 0..4 {
            assert_eq!(raw.pixels[i * IMAGE_BYTES], 10 * i as u8);
            assert_eq!(raw.pixels[(i + 1) * IMAGE_BYTES - 1], 10 * i as u8 + 1);
        }
    }

    #[test]
    fn parse_errors() {
        let short = vec![0u8; RECORD_BYTES + 5];
        assert!(matches!(parse_records(&short, Path::new("x")), Err(Error::RecordLength { .. })));
        let mut bad = record(3, 0);
        bad.extend(record(10, 0));
        assert!(matches!(parse_records(&bad, Path::new("x")), Err(Error::BadLabel { index: 1, label: 10 })));
    }

    #[test]
    fn zero_record_normalizes_to_minus_mean_over_std() {
        let raw = parse_records(&record(0, 0), Path::new("x")).unwrap();
        let stats = NormStats { mean: [0.49, 0.48, 0.45], std: [0.25, 0.24, 0.26] };
        let ds = Dataset::from_records(&raw, &stats, Split::Test, None).unwrap();
        assert_eq!(ds.labels, [0]);
        for ch in 0..3 {
            let v = ds.images.get(&[0, ch, 5, 7]);
            assert_eq!(v, ((0.0 - stats.mean[ch]) / stats.std[ch]) as f32);
        }
    }

    #[test]
    fn sidecar_round_trip_and_errors() {
        let s = NormStats { mean: [0.1, 0.2, 0.3], std: [0.4, 0.5, 0.6] };
        let p = Path::new("s");
        assert_eq!(NormStats::parse_sidecar(&s.to_sidecar(), p).unwrap(), s);
        assert!(NormStats::parse_sidecar("1 2 3", p).is_err());
        assert!(NormStats::parse_sidecar("1 2 3 4 5 0", p).is_err());
        assert!(NormStats::parse_sidecar("1 2 3 4 5 x", p).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::ones(&[3, 2]), true).unwrap();
        let bytes = encode_checkpoint(&store);
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 8 + 24);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Corrupt(_))));
    }
}
