//! Generation, storage and loading of `(src = u_T, tar = u_0)` pairs.
//!
//! # File layout
//!
//! Little-endian throughout. An 80-byte header:
//!
//! | offset | type    | field                       |
//! |--------|---------|-----------------------------|
//! | 0      | [u8; 4] | magic `CIP1`                |
//! | 4      | u32     | version (1)                 |
//! | 8      | u32     | grid_n                      |
//! | 12     | u64     | n_samples                   |
//! | 20     | u32     | float width in bytes (4)    |
//! | 24     | u32     | reserved (0)                |
//! | 28     | f64 ×3  | gamma, kappa, dt            |
//! | 52     | u32     | n_steps                     |
//! | 56     | f64     | init_amp                    |
//! | 64     | u64     | seed                        |
//! | 72     | f64     | scale hint                  |
//!
//! followed by `n_samples` records of `src` then `tar`, each `grid_n²` f32
//! values in row-major order. A `<stem>.meta.json` sidecar repeats the header.
//! The Dirichlet value is not stored; files always use zero boundary data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward_solver::simulate;
use crate::grid_field::{Field, PdeParams};
use crate::rng::{child_seed, SplitMix64};

pub const MAGIC: [u8; 4] = *b"CIP1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 80;
/// Default bound of the uniform initial data.
pub const INIT_AMP: f64 = 0.02;

const GENERATION_CHUNK: usize = 256;

/// One dataset record in physical amplitude (or training scale after
/// [`to_training_scale`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub index: u64,
    /// Late-time field `u_T`.
    pub src: Field,
    /// Initial condition `u_0`.
    pub tar: Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub grid_n: usize,
    pub n_samples: u64,
    pub pde: PdeParams,
    pub init_amp: f64,
    pub seed: u64,
    /// Factor that maps physical amplitudes to training units.
    pub scale: f64,
    /// Serialized float width in bytes.
    #[serde(default = "default_width")]
    pub precision: u32,
}

fn default_width() -> u32 {
    4
}

impl DatasetMeta {
    /// Metadata with the default scale `1 / init_amp` (1 when `init_amp` is 0).
    pub fn new(pde: PdeParams, n_samples: u64, init_amp: f64, seed: u64) -> Result<Self> {
        let scale = if init_amp > 0.0 { 1.0 / init_amp } else { 1.0 };
        let meta = Self { grid_n: pde.grid_n(), n_samples, pde, init_amp, seed, scale, precision: 4 };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::InvalidParam("n_samples must be >= 1".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidParam(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.init_amp.is_finite() && self.init_amp >= 0.0) {
            return Err(Error::InvalidParam(format!("init_amp must be >= 0, got {}", self.init_amp)));
        }
        if self.grid_n != self.pde.grid_n() {
            return Err(Error::InvalidParam(format!(
                "grid_n {} disagrees with pde grid {}",
                self.grid_n,
                self.pde.grid_n()
            )));
        }
        if self.pde.bc_value() != 0.0 {
            return Err(Error::InvalidParam("dataset files require zero Dirichlet data".into()));
        }
        if self.precision != 4 {
            return Err(Error::InvalidParam(format!("unsupported float width {}", self.precision)));
        }
        Ok(())
    }

    pub fn record_len(&self) -> u64 {
        2 * (self.grid_n * self.grid_n) as u64 * self.precision as u64
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.n_samples * self.record_len()
    }

    pub fn header_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN as usize);
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.grid_n as u32).to_le_bytes());
        b.extend_from_slice(&self.n_samples.to_le_bytes());
        b.extend_from_slice(&self.precision.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&self.pde.gamma().to_le_bytes());
        b.extend_from_slice(&self.pde.kappa().to_le_bytes());
        b.extend_from_slice(&self.pde.dt().to_le_bytes());
        b.extend_from_slice(&self.pde.n_steps().to_le_bytes());
        b.extend_from_slice(&self.init_amp.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.scale.to_le_bytes());
        debug_assert_eq!(b.len() as u64, HEADER_LEN);
        b
    }

    /// Hex SHA-256 of the header bytes; identifies the dataset configuration.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.header_bytes()))
    }

    fn parse_header(b: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let bad = |offset: u64, message: String| Error::Format { offset, message };

        if b[0..4] != MAGIC {
            return Err(bad(0, format!("bad magic {:?}", &b[0..4])));
        }
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(4, format!("unsupported version {version}")));
        }
        let width = u32_at(20);
        if width != 4 {
            return Err(bad(20, format!("unsupported float width {width}")));
        }
        if u32_at(24) != 0 {
            return Err(bad(24, "reserved field is not zero".into()));
        }
        let grid_n = u32_at(8) as usize;
        let pde = PdeParams::new(f64_at(28), f64_at(36), f64_at(44), u32_at(52), grid_n, 0.0)
            .map_err(|e| bad(28, format!("invalid PDE parameters: {e}")))?;
        let meta = Self {
            grid_n,
            n_samples: u64_at(12),
            pde,
            init_amp: f64_at(56),
            seed: u64_at(64),
            scale: f64_at(72),
            precision: width,
        };
        meta.validate().map_err(|e| bad(12, e.to_string()))?;
        Ok(meta)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Interior nodes i.i.d. uniform on `[-amp, amp)`, drawn row-major; the
/// boundary ring is zero.
pub fn sample_initial_condition(rng: &mut SplitMix64, grid_n: usize, amp: f64) -> Result<Field> {
    if !(amp.is_finite() && amp >= 0.0) {
        return Err(Error::InvalidParam(format!("amplitude must be >= 0, got {amp}")));
    }
    Field::from_fn(grid_n, |i, j| {
        if i == 0 || j == 0 || i == grid_n - 1 || j == grid_n - 1 {
            0.0
        } else {
            rng.symmetric(amp)
        }
    })
}

fn quantize(f: &Field) -> Field {
    f.map(|v| v as f32 as f64)
}

/// Builds record `k` of a dataset. The initial condition is rounded to f32
/// before it is evolved, so the stored pair satisfies
/// `src == f32(simulate(tar))` exactly.
pub fn make_pair(meta: &DatasetMeta, k: u64) -> Result<SamplePair> {
    let mut rng = SplitMix64::new(child_seed(meta.seed, k));
    let tar = quantize(&sample_initial_condition(&mut rng, meta.grid_n, meta.init_amp)?);
    let src = quantize(&simulate(&tar, &meta.pde, meta.pde.n_steps() as usize)?);
    Ok(SamplePair { index: k, src, tar })
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub count: u64,
    pub elapsed_secs: f64,
    pub bytes: u64,
}

pub fn meta_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes `meta.n_samples` pairs to `out_path` plus its JSON sidecar.
/// Output bytes depend only on `meta`, never on thread count.
pub fn generate_dataset(meta: &DatasetMeta, out_path: &Path) -> Result<GenerateSummary> {
    meta.validate()?;
    let start = Instant::now();
    let mut w = BufWriter::new(File::create(out_path)?);
    w.write_all(&meta.header_bytes())?;
    let mut next = 0u64;
    while next < meta.n_samples {
        let end = (next + GENERATION_CHUNK as u64).min(meta.n_samples);
        let pairs: Vec<SamplePair> =
            (next..end).into_par_iter().map(|k| make_pair(meta, k)).collect::<Result<_>>()?;
        for p in &pairs {
            write_field(&mut w, &p.src)?;
            write_field(&mut w, &p.tar)?;
        }
        next = end;
    }
    w.flush()?;
    write_sidecar(meta, out_path)?;
    Ok(GenerateSummary {
        count: meta.n_samples,
        elapsed_secs: start.elapsed().as_secs_f64(),
        bytes: meta.file_len(),
    })
}

/// Writes already-built pairs (physical amplitude) under `meta`.
pub fn write_pairs(meta: &DatasetMeta, pairs: &[SamplePair], out_path: &Path) -> Result<()> {
    meta.validate()?;
    if pairs.len() as u64 != meta.n_samples {
        return Err(Error::InvalidParam(format!(
            "{} pairs but meta declares {}",
            pairs.len(),
            meta.n_samples
        )));
    }
    let mut w = BufWriter::new(File::create(out_path)?);
    w.write_all(&meta.header_bytes())?;
    for p in pairs {
        if p.src.n() != meta.grid_n || p.tar.n() != meta.grid_n {
            return Err(Error::Shape {
                expected: format!("{0}x{0}", meta.grid_n),
                actual: format!("{0}x{0} / {1}x{1}", p.src.n(), p.tar.n()),
            });
        }
        write_field(&mut w, &p.src)?;
        write_field(&mut w, &p.tar)?;
    }
    w.flush()?;
    write_sidecar(meta, out_path)
}

fn write_sidecar(meta: &DatasetMeta, out_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(meta_sidecar_path(out_path), json + "\n")?;
    Ok(())
}

fn write_field(w: &mut impl Write, f: &Field) -> Result<()> {
    for &v in f.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads and validates the header only.
pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let mut file = File::open(path)?;
    read_header(&mut file)
}

fn read_header(file: &mut File) -> Result<DatasetMeta> {
    let len = file.metadata()?.len();
    let mut header = [0u8; HEADER_LEN as usize];
    if len < HEADER_LEN {
        return Err(Error::Format { offset: len, message: "truncated header".into() });
    }
    file.read_exact(&mut header)?;
    let meta = DatasetMeta::parse_header(&header)?;
    if len != meta.file_len() {
        let offset = len.min(meta.file_len());
        return Err(Error::Format {
            offset,
            message: format!("file is {len} bytes, header implies {}", meta.file_len()),
        });
    }
    Ok(meta)
}

/// Loads records in `range` (all records when `None`).
pub fn load_pairs(path: &Path, range: Option<Range<u64>>) -> Result<(DatasetMeta, Vec<SamplePair>)> {
    let mut file = File::open(path)?;
    let meta = read_header(&mut file)?;
    let range = range.unwrap_or(0..meta.n_samples);
    if range.start > range.end || range.end > meta.n_samples {
        return Err(Error::InvalidParam(format!(
            "range {range:?} outside 0..{}",
            meta.n_samples
        )));
    }
    file.seek(SeekFrom::Start(HEADER_LEN + range.start * meta.record_len()))?;
    let mut r = BufReader::new(file);
    let cells = meta.grid_n * meta.grid_n;
    let mut buf = vec![0u8; cells * 4];
    let mut pairs = Vec::with_capacity((range.end - range.start) as usize);
    for index in range {
        let src = read_field(&mut r, &mut buf, meta.grid_n, HEADER_LEN + index * meta.record_len())?;
        let tar = read_field(&mut r, &mut buf, meta.grid_n, HEADER_LEN + index * meta.record_len() + (cells * 4) as u64)?;
        pairs.push(SamplePair { index, src, tar });
    }
    Ok((meta, pairs))
}

/// Loads the records with the given indices, in the order given.
pub fn load_indices(path: &Path, indices: &[u64]) -> Result<(DatasetMeta, Vec<SamplePair>)> {
    let meta = read_meta(path)?;
    let mut pairs = Vec::with_capacity(indices.len());
    for &k in indices {
        if k >= meta.n_samples {
            return Err(Error::InvalidParam(format!("index {k} outside 0..{}", meta.n_samples)));
        }
        pairs.extend(load_pairs(path, Some(k..k + 1))?.1);
    }
    Ok((meta, pairs))
}

fn read_field(r: &mut impl Read, buf: &mut [u8], n: usize, offset: u64) -> Result<Field> {
    r.read_exact(buf).map_err(|e| Error::Format { offset, message: format!("short record: {e}") })?;
    let values = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Field::from_vec(n, values).map_err(|e| Error::Format { offset, message: e.to_string() })
}

/// Multiplies both fields by `scale`.
pub fn to_training_scale(p: &SamplePair, scale: f64) -> Result<SamplePair> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidParam(format!("scale must be positive, got {scale}")));
    }
    Ok(SamplePair { index: p.index, src: p.src.map(|v| v * scale), tar: p.tar.map(|v| v * scale) })
}

/// Inverse of [`to_training_scale`].
pub fn from_training_scale(p: &SamplePair, scale: f64) -> Result<SamplePair> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidParam(format!("scale must be positive, got {scale}")));
    }
    Ok(SamplePair { index: p.index, src: p.src.map(|v| v / scale), tar: p.tar.map(|v| v / scale) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_field::make_field;

    fn meta(grid: usize, n: u64, seed: u64) -> DatasetMeta {
        DatasetMeta::new(PdeParams::standard(grid).unwrap(), n, INIT_AMP, seed).unwrap()
    }

    /// First interior row for seed 42 on an 8-grid, produced once by an
    /// independent SplitMix64 script and frozen here.
    const GOLDEN_SEED42_GRID8: [f64; 6] = [
        0.009662595150872933,
        -0.013603584284923196,
        -0.008855954789794453,
        -0.006232371339054499,
        -0.018478793258390153,
        0.014729123061861294,
    ];

    #[test]
    fn initial_condition_range_and_boundary() {
        let mut rng = SplitMix64::new(5);
        let f = sample_initial_condition(&mut rng, 32, 0.02).unwrap();
        assert!(f.boundary_equals(0.0));
        assert!(f.values().iter().all(|v| (-0.02..=0.02).contains(v)));
        let mut rng = SplitMix64::new(5);
        let z = sample_initial_condition(&mut rng, 8, 0.0).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert!(sample_initial_condition(&mut rng, 8, -1.0).is_err());
    }

    #[test]
    fn initial_condition_matches_golden_stream() {
        let mut rng = SplitMix64::new(42);
        let f = sample_initial_condition(&mut rng, 8, 0.02).unwrap();
        assert_eq!(&f.values()[9..15], &GOLDEN_SEED42_GRID8);
    }

    #[test]
    fn zero_amplitude_gives_zero_source() {
        let m = DatasetMeta::new(PdeParams::standard(8).unwrap(), 2, 0.0, 1).unwrap();
        let p = make_pair(&m, 1).unwrap();
        assert_eq!(p.src, make_field(8, 0.0).unwrap());
    }

    #[test]
    fn header_layout_is_80_bytes() {
        let m = meta(16, 3, 9);
        let h = m.header_bytes();
        assert_eq!(h.len(), 80);
        assert_eq!(&h[0..4], b"CIP1");
        assert_eq!(u64::from_le_bytes(h[12..20].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(h[36..44].try_into().unwrap()), 4.7);
        assert_eq!(f64::from_le_bytes(h[72..80].try_into().unwrap()), 50.0);
    }

    #[test]
    fn full_scale_payload_size() {
        let m = meta(128, 50_000, 0);
        assert_eq!(m.file_len() - HEADER_LEN, 50_000 * 2 * 128 * 128 * 4);
    }

    #[test]
    fn slice_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cip");
        let m = meta(8, 3, 2);
        generate_dataset(&m, &path).unwrap();
        let (_, pairs) = load_pairs(&path, Some(1..2)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].index, 1);
        assert_eq!(pairs[0], make_pair(&m, 1).unwrap());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_pairs(&path, None), Err(Error::Format { offset: 0, .. })));

        bytes[0] = b'C';
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_pairs(&path, None), Err(Error::Format { .. })));
    }

    #[test]
    fn sidecar_duplicates_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cip");
        let m = meta(8, 2, 3);
        generate_dataset(&m, &path).unwrap();
        let side = dir.path().join("train.meta.json");
        let parsed: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(side).unwrap()).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(read_meta(&path).unwrap(), m);
    }

    #[test]
    fn training_scale_round_trip() {
        let m = meta(8, 1, 4);
        let p = make_pair(&m, 0).unwrap();
        let s = to_training_scale(&p, 50.0).unwrap();
        assert!(s.tar.values().iter().all(|v| v.abs() <= 1.0));
        let back = from_training_scale(&s, 50.0).unwrap();
        for (a, b) in back.tar.values().iter().zip(p.tar.values()) {
            assert!((a - b).abs() <= f64::EPSILON * b.abs());
        }
        assert_eq!(to_training_scale(&p, 1.0).unwrap(), p);
        let one = SamplePair { index: 0, src: make_field(3, 0.02).unwrap(), tar: make_field(3, 0.02).unwrap() };
        assert_eq!(to_training_scale(&one, 50.0).unwrap().tar.get(1, 1), 1.0);
        assert!(to_training_scale(&p, 0.0).is_err());
    }

    #[test]
    fn scaled_targets_are_centred() {
        let m = meta(16, 120, 77);
        let mut sum = 0.0;
        let mut count = 0.0;
        for k in 0..m.n_samples {
            let p = to_training_scale(&make_pair(&m, k).unwrap(), m.scale).unwrap();
            assert!(p.tar.min_value() >= -1.0 && p.tar.max_value() <= 1.0);
            sum += p.tar.values().iter().sum::<f64>();
            count += p.tar.len() as f64;
        }
        assert!((sum / count).abs() < 0.01);
    }
}
