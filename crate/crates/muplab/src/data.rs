//! Input batches with controlled norm scaling: synthetic Gaussian
//! classification data, a CIFAR-10 binary-format loader, and one-hot sparse
//! batches.
//!
//! A `Batch` is immutable once built and keeps its size fixed across a width
//! sweep; only the network width varies between sweep cells.

use crate::linalg::{DensityTag, Vector};
use crate::parametrization::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// CIFAR-10 binary v1 record: 1 label byte + 32·32·3 pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 3073;
/// Pixels per CIFAR-10 image (row-major R, G, B planes).
pub const CIFAR_PIXELS: usize = 3072;

/// Magic bytes of the framed batch cache format.
pub const CACHE_MAGIC: &[u8; 4] = b"SSB1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed data at byte offset {offset}: {detail}")]
    FileFormat {
        path: String,
        offset: u64,
        detail: String,
    },
    #[error("requested {requested} samples but only {available} match")]
    InsufficientSamples { requested: usize, available: usize },
}

/// A fixed set of (input, target) pairs. Targets are ±1 scalars unless the
/// batch was built externally with wider targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
    pub density: DensityTag,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].dim()
    }

    pub fn target_dim(&self) -> usize {
        self.targets[0].dim()
    }
}

/// `B` inputs with i.i.d. `N(0,1)` entries and ±1 targets given by the sign
/// of a fixed random hyperplane. Reproducible from `seed`.
pub fn synthetic_gaussian(b: usize, d0: usize, seed: u64) -> Batch {
    assert!(b >= 1 && d0 >= 1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut hyper_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4b9a));
    let hyperplane: Vec<f64> = (0..d0).map(|_| normal.sample(&mut hyper_rng)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x11fe));
    let mut inputs = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for _ in 0..b {
        let x = Vector::from_fn(d0, |_| normal.sample(&mut rng));
        let margin = crate::linalg::kernels::dot(x.as_slice(), &hyperplane);
        let label = if margin >= 0.0 { 1.0 } else { -1.0 };
        inputs.push(x);
        targets.push(Vector::new(vec![label]).unwrap());
    }
    Batch {
        inputs,
        targets,
        density: DensityTag::Dense,
    }
}

/// `B` one-hot inputs in `vocab` dimensions with ±1 targets given by a fixed
/// random sign per vocabulary index. Every input has `‖x‖₂ = 1`.
pub fn one_hot_batch(b: usize, vocab: usize, seed: u64) -> Batch {
    assert!(b >= 1 && vocab >= 1);
    let mut sign_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x51f7));
    let signs: Vec<f64> = (0..vocab)
        .map(|_| if sign_rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0e07));
    let mut inputs = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for _ in 0..b {
        let idx = rng.random_range(0..vocab);
        inputs.push(Vector::one_hot(vocab, idx));
        targets.push(Vector::new(vec![signs[idx]]).unwrap());
    }
    Batch {
        inputs,
        targets,
        density: DensityTag::Sparse,
    }
}

/// One parsed CIFAR-10 record: class label and raw pixel bytes.
#[derive(Debug, Clone)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Parse a CIFAR-10 binary v1 file into raw records. Fails with the byte
/// offset of the first incomplete record if the file size is not a multiple
/// of the record size.
pub fn parse_cifar10_records(path: &Path) -> Result<Vec<CifarRecord>, DataError> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let offset = (bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES) as u64;
        return Err(DataError::FileFormat {
            path: display,
            offset,
            detail: format!(
                "file length {} is not a multiple of the {}-byte record size",
                bytes.len(),
                CIFAR_RECORD_BYTES
            ),
        });
    }
    Ok(bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .map(|rec| CifarRecord {
            label: rec[0],
            pixels: rec[1..].to_vec(),
        })
        .collect())
}

/// Load a two-class batch from a CIFAR-10 binary file.
///
/// `B` samples are drawn seeded, without replacement, from records whose
/// label is one of `classes`. Pixels are standardized to mean 0 and variance
/// 1 per entry position over the drawn batch, so `‖x‖₂ = Θ(√3072)`. Targets
/// are −1 for `classes.0` and +1 for `classes.1`.
pub fn load_cifar10_binary(
    path: &Path,
    classes: (u8, u8),
    b: usize,
    seed: u64,
) -> Result<Batch, DataError> {
    let records = parse_cifar10_records(path)?;
    let matching: Vec<&CifarRecord> = records
        .iter()
        .filter(|r| r.label == classes.0 || r.label == classes.1)
        .collect();
    if matching.len() < b {
        return Err(DataError::InsufficientSamples {
            requested: b,
            available: matching.len(),
        });
    }
    // Partial Fisher-Yates for a seeded draw without replacement.
    let mut indices: Vec<usize> = (0..matching.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xc1fa));
    for i in 0..b {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let chosen: Vec<&CifarRecord> = indices[..b].iter().map(|&i| matching[i]).collect();

    // Per-entry standardization over the drawn batch.
    let bf = b as f64;
    let mut mean = vec![0.0f64; CIFAR_PIXELS];
    for rec in &chosen {
        for (m, &px) in mean.iter_mut().zip(&rec.pixels) {
            *m += px as f64;
        }
    }
    for m in &mut mean {
        *m /= bf;
    }
    let mut var = vec![0.0f64; CIFAR_PIXELS];
    for rec in &chosen {
        for ((v, &px), m) in var.iter_mut().zip(&rec.pixels).zip(&mean) {
            let d = px as f64 - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= bf;
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-12)).collect();

    let mut inputs = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for rec in &chosen {
        let x = Vector::from_fn(CIFAR_PIXELS, |i| (rec.pixels[i] as f64 - mean[i]) / std[i]);
        let label = if rec.label == classes.0 { -1.0 } else { 1.0 };
        inputs.push(x);
        targets.push(Vector::new(vec![label]).unwrap());
    }
    Ok(Batch {
        inputs,
        targets,
        density: DensityTag::Dense,
    })
}

/// Write a batch to the framed binary cache: magic `SSB1`, little-endian u32
/// sizes (B, input dim, target dim, density flag), then the f64 payload.
pub fn write_batch_cache(path: &Path, batch: &Batch) -> Result<(), DataError> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io {
        path: display.clone(),
        source,
    };
    let mut out = Vec::with_capacity(
        16 + 8 * batch.size() * (batch.input_dim() + batch.target_dim()),
    );
    out.extend_from_slice(CACHE_MAGIC);
    for v in [
        batch.size() as u32,
        batch.input_dim() as u32,
        batch.target_dim() as u32,
        match batch.density {
            DensityTag::Dense => 0u32,
            DensityTag::Sparse => 1u32,
        },
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in batch.inputs.iter().chain(&batch.targets) {
        for x in v.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io_err)
}

/// Read a batch back from the framed binary cache.
pub fn read_batch_cache(path: &Path) -> Result<Batch, DataError> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
    let format_err = |offset: u64, detail: &str| DataError::FileFormat {
        path: display.clone(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 20 {
        return Err(format_err(0, "file too short for header"));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(format_err(0, "bad magic, expected SSB1"));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (b, d_in, d_out, density_flag) = (read_u32(4), read_u32(8), read_u32(12), read_u32(16));
    if b == 0 || d_in == 0 || d_out == 0 {
        return Err(format_err(4, "sizes must be nonzero"));
    }
    let density = match density_flag {
        0 => DensityTag::Dense,
        1 => DensityTag::Sparse,
        _ => return Err(format_err(16, "density flag must be 0 or 1")),
    };
    let expected = 20 + 8 * b * (d_in + d_out);
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected) as u64,
            &format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut at = 20;
    let mut read_vec = |dim: usize| -> Vector {
        let v = Vector::from_fn(dim, |i| {
            f64::from_le_bytes(bytes[at + 8 * i..at + 8 * i + 8].try_into().unwrap())
        });
        at += 8 * dim;
        v
    };
    let inputs: Vec<Vector> = (0..b).map(|_| read_vec(d_in)).collect();
    let targets: Vec<Vector> = (0..b).map(|_| read_vec(d_out)).collect();
    Ok(Batch {
        inputs,
        targets,
        density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_rms_near_one() {
        let batch = synthetic_gaussian(16, 256, 3);
        for x in &batch.inputs {
            let rms = x.rms_norm();
            assert!((0.8..=1.2).contains(&rms), "rms {rms}");
        }
    }

    #[test]
    fn synthetic_seed_reproducible() {
        let a = synthetic_gaussian(8, 32, 11);
        let b = synthetic_gaussian(8, 32, 11);
        for (x, y) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
        for (x, y) in a.targets.iter().zip(&b.targets) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn synthetic_labels_balanced() {
        // Hyperplane labels are a fair coin: within 2√B of B/2 nearly always.
        let b = 200usize;
        let slack = 2.0 * (b as f64).sqrt();
        for seed in 0..20 {
            let batch = synthetic_gaussian(b, 64, seed);
            let positives = batch
                .targets
                .iter()
                .filter(|t| t.as_slice()[0] > 0.0)
                .count() as f64;
            assert!(
                (positives - b as f64 / 2.0).abs() <= slack,
                "seed {seed}: {positives} positives"
            );
        }
    }

    #[test]
    fn one_hot_vocab_one() {
        let batch = one_hot_batch(5, 1, 7);
        for x in &batch.inputs {
            assert_eq!(x.as_slice(), &[1.0]);
        }
    }

    #[test]
    fn one_hot_norms() {
        let vocab = 64;
        let batch = one_hot_batch(32, vocab, 9);
        assert_eq!(batch.density, DensityTag::Sparse);
        for x in &batch.inputs {
            assert!((x.l2_norm() - 1.0).abs() < 1e-15);
            assert!((x.rms_norm() - 1.0 / (vocab as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_indices_uniform_chi_square() {
        let vocab = 16;
        let b = 1600;
        let batch = one_hot_batch(b, vocab, 13);
        let mut counts = vec![0usize; vocab];
        for x in &batch.inputs {
            let idx = x.as_slice().iter().position(|&v| v == 1.0).unwrap();
            counts[idx] += 1;
        }
        let expected = b as f64 / vocab as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // Critical value of chi-square with 15 degrees of freedom at p = 0.001.
        assert!(chi2 < 37.697, "chi2 = {chi2}");
    }

    #[test]
    fn targets_are_plus_minus_one() {
        for batch in [synthetic_gaussian(32, 16, 1), one_hot_batch(32, 8, 1)] {
            for t in &batch.targets {
                assert!(t.as_slice()[0] == 1.0 || t.as_slice()[0] == -1.0);
            }
        }
    }
}
