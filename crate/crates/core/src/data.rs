//! Synthetic phantoms, volume preprocessing and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and `records.bin`. The record
//! file is a sequence of blobs, each preceded by its byte length as a
//! little-endian u64. A blob is laid out as
//!
//! | size        | content                                          |
//! |-------------|--------------------------------------------------|
//! | 4           | magic `CRSL`                                     |
//! | 4           | version (u32)                                    |
//! | 4           | height `H` (u32)                                 |
//! | 4           | width `W` (u32)                                  |
//! | 8·H·W       | k-space as complex64 (f32 re, f32 im), row-major |
//! | ⌈W/8⌉       | mask column bitmap, LSB first                    |
//!
//! The manifest lists each record's id, blob offset and length, split,
//! provenance and mask parameters.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::transforms::{apply_mask, fft2c, ifft2c, make_cartesian_mask, ComplexImage, KSpace, KSpaceSlice, SamplingMask};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";
const BLOB_MAGIC: &[u8; 4] = b"CRSL";
const BLOB_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

/// Slices dropped from each end of an acquired volume.
pub const EDGE_SLICES: usize = 5;
/// Side length of preprocessed images.
pub const TARGET_SIZE: usize = 320;

/// Seed derived from a label and a list of parts, stable across platforms.
pub fn derive_seed(label: &str, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for p in parts {
        h.update([0x1f]);
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Fastmri,
}

/// One fully sampled slice with its undersampling mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub kspace_full: KSpace,
    pub image_gt: ComplexImage,
    pub mask: SamplingMask,
    pub provenance: Provenance,
    pub split: Split,
}

impl DatasetRecord {
    /// Derives the groundtruth image from the k-space.
    pub fn new(id: String, kspace_full: KSpace, mask: SamplingMask, provenance: Provenance, split: Split) -> Result<Self> {
        let (_, w) = kspace_full.shape();
        if mask.width() != w {
            return Err(Error::ShapeMismatch {
                expected: vec![w],
                actual: vec![mask.width()],
            });
        }
        let image_gt = ifft2c(&kspace_full)?;
        Ok(Self {
            id,
            kspace_full,
            image_gt,
            mask,
            provenance,
            split,
        })
    }

    /// Noise-free undersampled measurement.
    pub fn measured(&self) -> Result<KSpaceSlice> {
        apply_mask(&self.kspace_full, &self.mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    #[serde(default)]
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split_fractions", "must be in [0, 1] and sum to 1"));
        }
        Ok(())
    }

    /// Train, val and test counts for `n` volumes; test takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        (train, val, n - train - val)
    }

    /// Split tags in volume order after a seeded shuffle.
    pub fn assign(&self, n: usize, seed: u64) -> Vec<Split> {
        let (train, val, _) = self.counts(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut tags = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            if rank < train {
                tags[i] = Split::Train;
            } else if rank < train + val {
                tags[i] = Split::Val;
            }
        }
        tags
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub size: usize,
    pub accel: f64,
    pub center_frac: f64,
    pub seed: u64,
    pub split_fractions: SplitFractions,
    /// Peak image magnitude. Chosen so the evaluation noise levels are a
    /// visible fraction of the signal.
    pub intensity_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 200,
            size: 64,
            accel: 4.0,
            center_frac: 0.08,
            seed: 0,
            split_fractions: SplitFractions::default(),
            intensity_scale: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub provenance: Provenance,
    pub accel: f64,
    pub center_frac: f64,
    pub seed: u64,
    pub intensity_scale: f64,
}

/// An in-memory dataset in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, records: Vec<DatasetRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self { meta, records })
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob_file = Vec::new();
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let blob = encode_blob(r);
            let offset = blob_file.len() as u64 + 8;
            blob_file.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            blob_file.extend_from_slice(&blob);
            entries.push(ManifestEntry {
                id: r.id.clone(),
                offset,
                length: blob.len() as u64,
                split: r.split,
                provenance: r.provenance,
                mask: MaskInfo {
                    accel: r.mask.accel(),
                    center_frac: r.mask.center_frac(),
                    seed: r.mask.seed(),
                    sampled: r.mask.sampled_count(),
                },
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            meta: self.meta.clone(),
            records: entries,
        };
        write_atomic(&dir.join(RECORDS_FILE), &blob_file)?;
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(
            &fs::read(&manifest_path)
                .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", manifest_path.display())))?,
        )
        .map_err(|e| Error::Dataset(format!("bad manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", manifest.version)));
        }
        let blobs = fs::read(dir.join(RECORDS_FILE))
            .map_err(|e| Error::Dataset(format!("cannot read {RECORDS_FILE}: {e}")))?;
        let mut records = Vec::with_capacity(manifest.records.len());
        for e in manifest.records {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|&end| end <= blobs.len() && start >= 8)
                .ok_or_else(|| Error::Dataset(format!("record {} lies outside {RECORDS_FILE}", e.id)))?;
            let prefix = u64::from_le_bytes(blobs[start - 8..start].try_into().unwrap());
            if prefix != e.length {
                return Err(Error::Dataset(format!("record {} length prefix disagrees with manifest", e.id)));
            }
            let (kspace, columns) = decode_blob(&blobs[start..end]).map_err(|err| Error::Dataset(format!("record {}: {err}", e.id)))?;
            let mask = SamplingMask::from_columns(columns, e.mask.center_frac, e.mask.seed)?;
            records.push(DatasetRecord::new(e.id, kspace, mask, e.provenance, e.split)?);
        }
        Dataset::new(manifest.meta, records)
    }
}

#[derive(Serialize, Deserialize)]
struct MaskInfo {
    accel: f64,
    center_frac: f64,
    seed: u64,
    sampled: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    offset: u64,
    length: u64,
    split: Split,
    provenance: Provenance,
    mask: MaskInfo,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: DatasetMeta,
    records: Vec<ManifestEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn encode_blob(r: &DatasetRecord) -> Vec<u8> {
    let (h, w) = r.kspace_full.shape();
    let mut out = Vec::with_capacity(16 + 8 * h * w + w.div_ceil(8));
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in r.kspace_full.as_array().iter() {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    let mut bitmap = vec![0u8; w.div_ceil(8)];
    for c in r.mask.sampled_indices() {
        bitmap[c / 8] |= 1 << (c % 8);
    }
    out.extend_from_slice(&bitmap);
    out
}

fn decode_blob(blob: &[u8]) -> std::result::Result<(KSpace, Vec<bool>), String> {
    if blob.len() < 16 || &blob[..4] != BLOB_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(blob[i..i + 4].try_into().unwrap());
    if word(4) != BLOB_VERSION {
        return Err(format!("unsupported version {}", word(4)));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 8 * h * w + w.div_ceil(8);
    if blob.len() != expected {
        return Err(format!("blob is {} bytes, expected {expected}", blob.len()));
    }
    let f = |i: usize| f32::from_le_bytes(blob[i..i + 4].try_into().unwrap()) as f64;
    let data = Array2::from_shape_fn((h, w), |(r, c)| {
        let i = 16 + 8 * (r * w + c);
        Complex64::new(f(i), f(i + 4))
    });
    let bitmap = &blob[16 + 8 * h * w..];
    let columns = (0..w).map(|c| bitmap[c / 8] & (1 << (c % 8)) != 0).collect();
    Ok((KSpace::new(data).map_err(|e| e.to_string())?, columns))
}

/// Rounds every entry through f32 so in-memory records equal their stored form.
fn quantize(k: &KSpace) -> Result<KSpace> {
    KSpace::new(k.as_array().mapv(|v| Complex64::new(v.re as f32 as f64, v.im as f32 as f64)))
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, center: f64, axes: (f64, f64), value: (f64, f64)) -> Self {
        let angle = rng.random_range(0.0..PI);
        Self {
            cx: rng.random_range(-center..=center),
            cy: rng.random_range(-center..=center),
            a: rng.random_range(axes.0..axes.1),
            b: rng.random_range(axes.0..axes.1),
            cos: angle.cos(),
            sin: angle.sin(),
            value: rng.random_range(value.0..value.1),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Random ellipse phantom with a smooth phase, magnitude in `[0, 1]`.
///
/// A large body ellipse carries a gentle intensity gradient; smaller
/// ellipses add or remove intensity inside it. Edges are 2×2 supersampled.
pub fn generate_phantom(size: usize, seed: u64) -> Result<ComplexImage> {
    if size < 16 {
        return Err(Error::invalid("size", format!("phantoms need at least 16 pixels, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.65..0.9),
        b: rng.random_range(0.65..0.9),
        cos: 1.0,
        sin: 0.0,
        value: rng.random_range(0.35..0.55),
    };
    let slope = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let count = rng.random_range(5..=10);
    let inner: Vec<Ellipse> = (0..count)
        .map(|_| {
            let mut e = Ellipse::random(&mut rng, 0.45, (0.05, 0.35), (0.1, 0.45));
            if rng.random_bool(0.3) {
                e.value = -e.value;
            }
            e
        })
        .collect();
    let phase = (
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.8..0.8),
        rng.random_range(-PI..PI),
    );

    let n = size as f64;
    let img = Array2::from_shape_fn((size, size), |(r, c)| {
        let mut acc = 0.0;
        for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            let y = 2.0 * (r as f64 + sy) / n - 1.0;
            let x = 2.0 * (c as f64 + sx) / n - 1.0;
            if !body.contains(x, y) {
                continue;
            }
            let mut v = body.value + slope.0 * x + slope.1 * y;
            for e in &inner {
                if e.contains(x, y) {
                    v += e.value;
                }
            }
            acc += v.clamp(0.0, 1.0);
        }
        let mag = acc / 4.0;
        let y = 2.0 * (r as f64 + 0.5) / n - 1.0;
        let x = 2.0 * (c as f64 + 0.5) / n - 1.0;
        let theta = phase.0 * x + phase.1 * y + phase.2 * (x * x + y * y) + phase.3;
        Complex64::from_polar(mag, theta)
    });
    ComplexImage::new(img)
}

/// Bilinear resampling of the real and imaginary parts with pixel-center
/// alignment. Returns the input unchanged when the size already matches.
pub fn resize_bilinear(img: &ComplexImage, height: usize, width: usize) -> Result<ComplexImage> {
    let (h, w) = img.shape();
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("size", "target size must be positive"));
    }
    let src = img.as_array();
    let coord = |dst: usize, n_out: usize, n_in: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let out = Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, fr) = coord(r, height, h);
        let (c0, c1, fc) = coord(c, width, w);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    });
    ComplexImage::new(out)
}

/// Center crop to a square on the shorter side.
pub fn center_crop_square(img: &ComplexImage) -> ComplexImage {
    let (h, w) = img.shape();
    let side = h.min(w);
    let (r0, c0) = ((h - side) / 2, (w - side) / 2);
    let view = img.as_array().slice(ndarray::s![r0..r0 + side, c0..c0 + side]).to_owned();
    ComplexImage::new(view).expect("cropped from a finite image")
}

/// Drops the edge slices of a volume, then center-crops each remaining
/// image to a square and rescales it to `size × size`. Volumes with too few
/// slices yield nothing.
pub fn preprocess_volume(slices: &[ComplexImage], size: usize) -> Result<Vec<ComplexImage>> {
    if slices.len() <= 2 * EDGE_SLICES {
        return Ok(Vec::new());
    }
    slices[EDGE_SLICES..slices.len() - EDGE_SLICES]
        .iter()
        .map(|s| resize_bilinear(&center_crop_square(s), size, size))
        .collect()
}

/// Mask settings applied to ingested volumes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub accel: f64,
    pub center_frac: f64,
    pub seed: u64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            accel: 4.0,
            center_frac: 0.08,
            seed: 0,
        }
    }
}

/// Turns the fully sampled k-space slices of one acquired volume into
/// records: images are preprocessed and k-space regenerated from them.
pub fn records_from_volume(
    volume: &str,
    kspace: &[KSpace],
    size: usize,
    mask: MaskParams,
    split: Split,
) -> Result<Vec<DatasetRecord>> {
    let images = kspace.iter().map(ifft2c).collect::<Result<Vec<_>>>()?;
    preprocess_volume(&images, size)?
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            let index = i + EDGE_SLICES;
            let id = format!("{volume}/{index}");
            let seed = derive_seed("mask", &[&mask.seed.to_string(), &id]);
            let m = make_cartesian_mask(size, size, mask.accel, mask.center_frac, seed)?;
            DatasetRecord::new(id, quantize(&fft2c(&img)?)?, m, Provenance::Fastmri, split)
        })
        .collect()
}

/// Deterministic synthetic dataset; each phantom is its own volume for the
/// split shuffle.
pub fn make_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.split_fractions.validate()?;
    if !(spec.intensity_scale > 0.0 && spec.intensity_scale.is_finite()) {
        return Err(Error::invalid("intensity_scale", "must be positive"));
    }
    let splits = spec.split_fractions.assign(spec.n, derive_seed("split", &[&spec.seed.to_string()]));
    let records = (0..spec.n)
        .map(|i| {
            let id = format!("s{i}");
            let seed_str = spec.seed.to_string();
            let phantom = generate_phantom(spec.size, derive_seed("phantom", &[&seed_str, &id]))?;
            let scaled = ComplexImage::new(phantom.into_array().mapv(|v| v * spec.intensity_scale))?;
            let mask = make_cartesian_mask(
                spec.size,
                spec.size,
                spec.accel,
                spec.center_frac,
                derive_seed("mask", &[&seed_str, &id]),
            )?;
            DatasetRecord::new(id, quantize(&fft2c(&scaled)?)?, mask, Provenance::Synthetic, splits[i])
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        DatasetMeta {
            provenance: Provenance::Synthetic,
            accel: spec.accel,
            center_frac: spec.center_frac,
            seed: spec.seed,
            intensity_scale: spec.intensity_scale,
        },
        records,
    )
}

/// Reads the `kspace` dataset of a single-coil HDF5 volume.
#[cfg(feature = "fastmri")]
pub fn read_fastmri_kspace(path: &Path) -> Result<Vec<KSpace>> {
    let fail = |reason: String| Error::Dataset(format!("{}: {reason}", path.display()));
    let file = hdf5::File::open(path).map_err(|e| fail(e.to_string()))?;
    let ds = file
        .dataset("kspace")
        .map_err(|_| fail("missing dataset key `kspace`".into()))?;
    let shape = ds.shape();
    if shape.len() != 3 {
        return Err(fail(format!("`kspace` must have rank 3, found rank {}", shape.len())));
    }
    let dtype = ds.dtype().map_err(|e| fail(e.to_string()))?;
    if !matches!(
        dtype.to_descriptor(),
        Ok(hdf5::types::TypeDescriptor::Compound(ref c)) if c.fields.len() == 2
    ) {
        return Err(fail("`kspace` is not complex".into()));
    }
    let raw: Vec<H5Complex> = ds.read_raw().map_err(|e| fail(e.to_string()))?;
    let (h, w) = (shape[1], shape[2]);
    raw.chunks_exact(h * w)
        .map(|s| KSpace::new(Array2::from_shape_fn((h, w), |(r, c)| {
            let v = s[r * w + c];
            Complex64::new(v.r as f64, v.i as f64)
        })))
        .collect()
}

/// FastMRI stores complex samples as an `(r, i)` compound.
#[cfg(feature = "fastmri")]
#[derive(hdf5::H5Type, Clone, Copy)]
#[repr(C)]
struct H5Complex {
    r: f32,
    i: f32,
}

/// One record per retained slice of a FastMRI single-coil volume.
#[cfg(feature = "fastmri")]
pub fn load_fastmri_volume(path: &Path, mask: MaskParams, split: Split) -> Result<Vec<DatasetRecord>> {
    let kspace = read_fastmri_kspace(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    records_from_volume(&name, &kspace, TARGET_SIZE, mask, split)
}
