//! Deterministic ring-and-texture images whose appearance encodes age.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const DATA_MAGIC: &[u8; 4] = b"CILF";
pub const DATA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.cilf";
pub const AGE_MIN: f64 = 1.0;
pub const AGE_MAX: f64 = 80.0;

/// Little-endian `CILF` blob: magic, version, rank, dims (u64), f32 payload.
pub fn encode_cilf(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Cursor over a byte buffer that reports where it ran short.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Rank, dims and f32 payload.
    pub fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let start = self.pos;
        let rank = self.u32(what)? as usize;
        if rank > 8 {
            return Err(Error::Corrupt {
                offset: start as u64,
                detail: format!("{what}: implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(what)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some());
        let Some(n) = n else {
            return Err(Error::Corrupt {
                offset: start as u64,
                detail: format!("{what}: shape {shape:?} overflows"),
            });
        };
        let bytes = self.take(4 * n, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode_cilf(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != DATA_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "expected CILF magic, found {magic:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != DATA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: DATA_VERSION,
        });
    }
    let t = r.tensor("payload")?;
    if r.remaining() != 0 {
        return Err(Error::Corrupt {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(t)
}

pub fn write_cilf(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_cilf(t)).map_err(|e| Error::io(path, e))
}

pub fn read_cilf(path: &Path) -> Result<Tensor> {
    decode_cilf(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Fixed 80/10/10 partition in sample order.
    pub fn standard(n: usize) -> Self {
        let a = n * 8 / 10;
        let b = a + n / 10;
        Self {
            train: 0..a,
            val: a..b,
            test: b..n,
        }
    }

    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        match name {
            "train" => Some(self.train.clone()),
            "val" => Some(self.val.clone()),
            "test" => Some(self.test.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub samples: usize,
    /// `[H, W, C]`
    pub image_shape: [usize; 3],
    pub seed: u64,
    pub age_range: [f64; 2],
    pub splits: Splits,
    pub ages: Vec<f64>,
    pub images: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::Data(format!("manifest: {m}"));
        if self.version != DATA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.version,
                expected: DATA_VERSION,
            });
        }
        if self.ages.len() != self.samples || self.samples == 0 {
            return Err(bad(format!(
                "{} ages for {} samples",
                self.ages.len(),
                self.samples
            )));
        }
        let s = &self.splits;
        if s.train.start != 0
            || s.train.end != s.val.start
            || s.val.end != s.test.start
            || s.test.end != self.samples
        {
            return Err(bad(format!("splits {s:?} must tile 0..{}", self.samples)));
        }
        if s.train.start > s.train.end || s.val.start > s.val.end || s.test.start > s.test.end {
            return Err(bad(format!("splits {s:?} have reversed bounds")));
        }
        let [lo, hi] = self.age_range;
        if let Some(a) = self.ages.iter().find(|&&a| !(a >= lo && a <= hi)) {
            return Err(bad(format!("age {a} outside [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Images `[N, H, W, 3]` with their manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Tensor,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
        manifest.validate()?;
        let images = read_cilf(&dir.join(&manifest.images))?;
        let [h, w, c] = manifest.image_shape;
        if images.shape() != [manifest.samples, h, w, c] {
            return Err(Error::Data(format!(
                "image tensor {:?} does not match manifest {:?}",
                images.shape(),
                [manifest.samples, h, w, c]
            )));
        }
        Ok(Self { manifest, images })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_cilf(&dir.join(&self.manifest.images), &self.images)?;
        let mpath = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
    }

    pub fn len(&self) -> usize {
        self.manifest.samples
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples == 0
    }

    pub fn image_side(&self) -> usize {
        self.manifest.image_shape[0]
    }

    /// Images `[idx.len(), H, W, C]` in the given order.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let [h, w, c] = self.manifest.image_shape;
        let per = h * w * c;
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![idx.len(), h, w, c], out).expect("gathered shape")
    }

    pub fn ages_of(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.manifest.ages[i]).collect()
    }

    pub fn split(&self, name: &str) -> Result<Vec<usize>> {
        self.manifest
            .splits
            .get(name)
            .map(|r| r.collect())
            .ok_or_else(|| Error::contract("dataset", format!("unknown split `{name}`")))
    }
}

/// Ring radius in pixels for an age.
pub fn ring_radius(age: f64, size: usize) -> f64 {
    size as f64 * (0.12 + 0.30 * (age - AGE_MIN) / (AGE_MAX - AGE_MIN))
}

/// Stripe frequency in cycles per image for an age.
pub fn texture_frequency(age: f64) -> f64 {
    2.0 + 6.0 * (age - AGE_MIN) / (AGE_MAX - AGE_MIN)
}

/// One `[size, size, 3]` image: ring (ch 0), oriented stripes (ch 1), their product (ch 2), plus noise.
pub fn render_sample<R: Rng + ?Sized>(age: f64, size: usize, rng: &mut R) -> Vec<f32> {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-1.0..1.0);
    let cy = s / 2.0 + rng.random_range(-1.0..1.0);
    let r = ring_radius(age, size) + 0.2 * rng.sample::<f64, _>(StandardNormal);
    let width = s / 32.0;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = texture_frequency(age);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let ring = (-(d - r).powi(2) / (2.0 * width * width)).exp();
            let stripes =
                0.5 + 0.5 * (std::f64::consts::TAU * freq * (fx * ct + fy * st) / s + phase).sin();
            for v in [ring, 0.5 * stripes, ring * stripes] {
                out.push((v + 0.05 * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
        }
    }
    out
}

/// In-memory dataset; the same seed always yields identical bits.
pub fn synthesize(seed: u64, n: usize, size: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::contract(
            "generate_synthetic_dataset",
            "need at least one sample",
        ));
    }
    if size < 4 || !size.is_power_of_two() {
        return Err(Error::contract(
            "generate_synthetic_dataset",
            format!("image side {size} must be a power of two >= 4"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ages = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * size * size * 3);
    for _ in 0..n {
        let age = rng.random_range(AGE_MIN as u32..=AGE_MAX as u32) as f64;
        data.extend(render_sample(age, size, &mut rng));
        ages.push(age);
    }
    let manifest = DatasetManifest {
        version: DATA_VERSION,
        samples: n,
        image_shape: [size, size, 3],
        seed,
        age_range: [AGE_MIN, AGE_MAX],
        splits: Splits::standard(n),
        ages,
        images: IMAGES_FILE.to_string(),
    };
    Ok(Dataset {
        manifest,
        images: Tensor::new(vec![n, size, size, 3], data)?,
    })
}

/// Writes `manifest.json` and `images.cilf` under `out`.
pub fn generate_synthetic_dataset(
    seed: u64,
    n: usize,
    size: usize,
    out: &Path,
) -> Result<DatasetManifest> {
    let ds = synthesize(seed, n, size)?;
    ds.save(out)?;
    Ok(ds.manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Handcrafted estimate of the ring radius: centroid of the bright ring
/// pixels, then their mean distance from it.
pub fn ring_radius_feature(image: &[f32], size: usize) -> f64 {
    let pix: Vec<(f64, f64, f64)> = (0..size * size)
        .map(|i| {
            (
                (i % size) as f64 + 0.5,
                (i / size) as f64 + 0.5,
                image[3 * i] as f64,
            )
        })
        .filter(|p| p.2 > 0.5)
        .collect();
    if pix.is_empty() {
        return 0.0;
    }
    let total: f64 = pix.iter().map(|p| p.2).sum();
    let cx = pix.iter().map(|p| p.0 * p.2).sum::<f64>() / total;
    let cy = pix.iter().map(|p| p.1 * p.2).sum::<f64>() / total;
    pix.iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt() * p.2)
        .sum::<f64>()
        / total
}

/// Ordinary least squares `y ~ a x + b`.
pub fn least_squares_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (a, my - a * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(5, 12, 16, &dir.path().join("a")).unwrap();
        generate_synthetic_dataset(5, 12, 16, &dir.path().join("b")).unwrap();
        for f in [MANIFEST_FILE, IMAGES_FILE] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let other = synthesize(6, 12, 16).unwrap();
        assert_ne!(
            other.images,
            Dataset::load(&dir.path().join("a")).unwrap().images
        );
    }

    #[test]
    fn ages_stay_in_range_and_splits_tile() {
        let ds = synthesize(1, 503, 8).unwrap();
        assert!(ds
            .manifest
            .ages
            .iter()
            .all(|&a| (1.0..=80.0).contains(&a) && a.fract() == 0.0));
        ds.manifest.validate().unwrap();
        let s = &ds.manifest.splits;
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (402, 50, 51));
    }

    #[test]
    fn ring_feature_predicts_age_by_least_squares() {
        let ds = synthesize(11, 1000, 32).unwrap();
        let per = 32 * 32 * 3;
        let feats: Vec<f64> = (0..1000)
            .map(|i| ring_radius_feature(&ds.images.data()[i * per..(i + 1) * per], 32))
            .collect();
        let (a, b) = least_squares_line(&feats, &ds.manifest.ages);
        let mae = feats
            .iter()
            .zip(&ds.manifest.ages)
            .map(|(f, y)| (a * f + b - y).abs())
            .sum::<f64>()
            / 1000.0;
        assert!(mae < 8.0, "{mae}");
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(synthesize(1, 0, 16).is_err());
        assert!(synthesize(1, 4, 12).is_err());
    }

    #[test]
    fn cilf_round_trip_and_damage() {
        let t = Tensor::new(
            vec![2, 3],
            vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, 7.0],
        )
        .unwrap();
        let bytes = encode_cilf(&t);
        assert_eq!(&bytes[..4], b"CILF");
        assert_eq!(decode_cilf(&bytes).unwrap(), t);
        match decode_cilf(&bytes[..bytes.len() - 3]) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, 28),
            other => panic!("{other:?}"),
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            decode_cilf(&v),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        v[0] = b'X';
        assert!(matches!(decode_cilf(&v), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn manifest_rejects_gaps_and_out_of_range_ages() {
        let mut m = synthesize(2, 20, 8).unwrap().manifest;
        m.ages[3] = 81.0;
        assert!(m.validate().is_err());
        m.ages[3] = 40.0;
        m.splits.val.start += 1;
        assert!(m.validate().is_err());
    }
}
