//! Minimal binary container for real matrices.
//!
//! Layout (all little-endian):
//!
//! | offset | size    | field                          |
//! |--------|---------|--------------------------------|
//! | 0      | 4       | magic `SERE`                   |
//! | 4      | 4       | version (`u32`, currently 1)   |
//! | 8      | 4       | rows (`u32`)                   |
//! | 12     | 4       | cols (`u32`)                   |
//! | 16     | 4·r·c   | `f32` payload, row-major       |
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, SereError};

pub const MAGIC: &[u8; 4] = b"SERE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode(matrix: &Array2<f64>) -> Result<Vec<u8>> {
    let (rows, cols) = matrix.dim();
    let rows32 = u32::try_from(rows).map_err(|_| SereError::Shape(format!("{rows} rows")))?;
    let cols32 = u32::try_from(cols).map_err(|_| SereError::Shape(format!("{cols} cols")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for &v in matrix.iter() {
        let v = v as f32;
        if !v.is_finite() {
            return Err(SereError::Validation(format!(
                "non-finite value {v} cannot be stored"
            )));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(SereError::Format(format!(
            "tensor file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(SereError::Format("bad magic, expected \"SERE\"".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(SereError::Unsupported(format!("tensor file version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| SereError::Format("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(SereError::Format(format!(
            "{rows}x{cols} tensor needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let values = decode_f32_payload(&bytes[HEADER_LEN..])?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked above"))
}

/// Parses a raw little-endian `f32` dump, rejecting non-finite values.
pub fn decode_f32_payload(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(SereError::Format(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(SereError::Validation(format!("non-finite value at element {i}")))
            }
        })
        .collect()
}

/// Wraps a raw `f32` dump of a `rows x cols` matrix.
pub fn import_raw(bytes: &[u8], rows: usize, cols: usize) -> Result<Array2<f64>> {
    let want = rows * cols * 4;
    if bytes.len() != want {
        return Err(SereError::Format(format!(
            "declared {rows}x{cols} needs {want} payload bytes, got {}",
            bytes.len()
        )));
    }
    let values = decode_f32_payload(bytes)?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked above"))
}

pub fn read(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| SereError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        SereError::Format(m) => SereError::Format(format!("{}: {m}", path.display())),
        SereError::Validation(m) => SereError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    write_atomic(path, &encode(matrix)?)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| SereError::io(dir, e))?;
    let tmp_path = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp_path, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp_path);
        return Err(SereError::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn two_by_three_is_forty_bytes() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"SERE");
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn raw_import_checks_size_and_finiteness() {
        let raw: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let m = import_raw(&raw, 2, 3).unwrap();
        assert_eq!(encode(&m).unwrap().len(), 40);
        assert!(matches!(import_raw(&raw, 2, 2), Err(SereError::Format(_))));

        let mut bad = raw.clone();
        bad[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(import_raw(&bad, 2, 3), Err(SereError::Validation(_))));
    }

    #[test]
    fn rejects_truncated_and_foreign_headers() {
        assert!(matches!(decode(b"SER"), Err(SereError::Format(_))));
        let mut bytes = encode(&array![[1.0]]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(SereError::Format(_))));
        let mut bytes = encode(&array![[1.0]]).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(SereError::Format(_))));
        let mut bytes = encode(&array![[1.0]]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(SereError::Unsupported(_))));
    }

    #[test]
    fn atomic_write_round_trips() {
        let dir = std::env::temp_dir().join(format!("sere-tf-{}", std::process::id()));
        let path = dir.join("m.sere");
        let m = array![[0.5, -0.25], [8.0, 1e-3]];
        write(&path, &m).unwrap();
        assert_eq!(read(&path).unwrap(), m.mapv(|v| v as f32 as f64));
        std::fs::remove_dir_all(dir).unwrap();
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 0usize..12, cols in 0usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1e6f32..1e6) as f64);
            let back = decode(&encode(&m).unwrap()).unwrap();
            prop_assert_eq!(back.dim(), m.dim());
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
