//! The CNT1 on-disk tensor format.
//!
//! Layout: magic bytes `CNT1`, a little-endian `u32` rank, `rank`
//! little-endian `u64` extents, then the row-major `f64` payload as
//! little-endian bits. Write-then-read is bit-exact; there is no other
//! persistence format in this crate.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"CNT1";

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(4 + 4 + 8 * t.rank() + 8 * t.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };

    if bytes.len() < 8 {
        return Err(format_err(format!(
            "file too short for header: {} bytes",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(format_err(format!(
            "bad magic bytes {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(format_err(format!("unsupported rank {rank}")));
    }

    let header_end = 8 + 8 * rank;
    if bytes.len() < header_end {
        return Err(format_err("file truncated inside extent list".to_string()));
    }
    let mut shape = Vec::with_capacity(rank);
    for axis in 0..rank {
        let off = 8 + 8 * axis;
        let extent = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let extent = usize::try_from(extent)
            .map_err(|_| format_err(format!("extent {extent} overflows usize")))?;
        if extent == 0 {
            return Err(format_err(format!("extent 0 at axis {axis}")));
        }
        shape.push(extent);
    }

    let expected: usize = shape.iter().product();
    let payload = &bytes[header_end..];
    if payload.len() != 8 * expected {
        return Err(format_err(format!(
            "payload is {} bytes, shape {:?} requires {}",
            payload.len(),
            shape,
            8 * expected
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    Tensor::new(shape, data).map_err(|e| match e {
        Error::NonFinite { index } => {
            format_err(format!("non-finite payload value at flat index {index}"))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("convnorm-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_identical() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = tmp("roundtrip.cnt1");
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);

        let t1 = Tensor::new(vec![1], vec![0.0]).unwrap();
        let p1 = tmp("degenerate.cnt1");
        write_tensor(&p1, &t1).unwrap();
        assert_eq!(read_tensor(&p1).unwrap(), t1);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let p = tmp("badmagic.cnt1");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let p = tmp("corrupt.cnt1");
        write_tensor(&p, &t).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();

        // Rank 9 is out of range.
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));

        // Truncated payload.
        bytes[4] = 1;
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_payload_is_a_format_error() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let p = tmp("nonfinite.cnt1");
        write_tensor(&p, &t).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let nan = f64::NAN.to_le_bytes();
        let off = bytes.len() - 8;
        bytes[off..].copy_from_slice(&nan);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Bit-exactness over random shapes and values, including
        // negative zero and subnormals.
        #[test]
        fn round_trip_bits_exact(
            shape in proptest::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1e12..1e12);
                    if rng.gen_bool(0.1) { -0.0 } else { v }
                })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let p = tmp(&format!("prop-{seed}.cnt1"));
            write_tensor(&p, &t).unwrap();
            let back = read_tensor(&p).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            std::fs::remove_file(&p).ok();
        }
    }
}
