//! Binary tensor checkpoints.
//!
//! Layout (little endian): magic `SQHMCKPT`, `u32` version, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u64` rows,
//! `u64` cols, followed by all tensor payloads as `f64` in table order.

use std::io::{Read, Write};

use super::matrix::Matrix;
use super::NnError;

pub const MAGIC: &[u8; 8] = b"SQHMCKPT";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, &Matrix)]) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
    }
    for (_, m) in tensors {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Matrix)>, NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::CorruptCheckpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(NnError::CorruptCheckpoint(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NnError::CorruptCheckpoint(e.to_string()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        if rows.checked_mul(cols).is_none_or(|n| n > 1 << 32) {
            return Err(NnError::CorruptCheckpoint(format!("tensor {name} has shape {rows}x{cols}")));
        }
        table.push((name, rows, cols));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, rows, cols) in table {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NnError::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Copies checkpoint tensors into `targets`, matching by name and shape.
pub fn restore_into(
    loaded: Vec<(String, Matrix)>,
    names: &[String],
    targets: Vec<&mut Matrix>,
) -> Result<(), NnError> {
    if loaded.len() != names.len() {
        return Err(NnError::ShapeMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            loaded.len(),
            names.len()
        )));
    }
    for ((name, target), (lname, m)) in names.iter().zip(targets).zip(loaded) {
        if *name != lname {
            return Err(NnError::ShapeMismatch(format!("expected tensor {name}, found {lname}")));
        }
        if target.shape() != m.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "tensor {name}: model {:?}, checkpoint {:?}",
                target.shape(),
                m.shape()
            )));
        }
        *target = m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Matrix::from_vec(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]);
        let b = Matrix::from_vec(1, 3, vec![f64::MAX, -1e-300, 7.25]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a".into(), &a), ("enc.fwd.w".into(), &b)]).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].0, "enc.fwd.w");
        for (orig, (_, got)) in [&a, &b].into_iter().zip(&back) {
            assert_eq!(orig.shape(), got.shape());
            for (x, y) in orig.data().iter().zip(got.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(read_tensors(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
        let m = Matrix::zeros(2, 2);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("m".into(), &m)]).unwrap();
        assert!(read_tensors(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_tensors(extra.as_slice()).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut target = Matrix::zeros(1, 2);
        let loaded = vec![("w".to_string(), Matrix::from_vec(1, 2, vec![1.0, 2.0]))];
        restore_into(loaded, &["w".into()], vec![&mut target]).unwrap();
        assert_eq!(target.data(), &[1.0, 2.0]);
        let loaded = vec![("w".to_string(), Matrix::zeros(2, 1))];
        assert!(restore_into(loaded, &["w".into()], vec![&mut target]).is_err());
        let loaded = vec![("v".to_string(), Matrix::zeros(1, 2))];
        assert!(restore_into(loaded, &["w".into()], vec![&mut target]).is_err());
    }
}
