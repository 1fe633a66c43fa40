//! `LFSA` dense embedding files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"LFSA" | u32 version = 1 | u32 dim | u64 count | count * dim f32, row-major
//! ```
//!
//! A companion TSV index maps each row to a user or persona id (`row<TAB>id`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFSA";
pub const VERSION: u32 = 1;

pub fn write(path: &Path, rows: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (count, dim) = rows.dim();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())?;
    for &x in rows.iter() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Array2<f64>> {
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 20];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[0..4] != MAGIC {
        return Err(bad("missing LFSA magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != count * dim * 4 {
        return Err(bad(&format!(
            "expected {} payload bytes, found {}",
            count * dim * 4,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((count, dim), values).map_err(|e| bad(&e.to_string()))
}

pub fn write_index(path: &Path, ids: &[u64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (row, id) in ids.iter().enumerate() {
        writeln!(w, "{row}\t{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<u64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parse_err = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected `row<TAB>id`, got {line:?}"),
        };
        let mut parts = line.split('\t');
        let row: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let id: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        if row != ids.len() {
            return Err(parse_err());
        }
        ids.push(id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.lfsa");
        let rows = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write(&path, &rows).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"LFSA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 6 * 4);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[40..44], &6.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.lfsa");
        write(&path, &Array2::zeros((3, 2))).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 0..40), dim in 1usize..5) {
            let count = values.len() / dim;
            let data: Vec<f64> = values[..count * dim].iter().map(|&v| v as f64).collect();
            let rows = Array2::from_shape_vec((count, dim), data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.lfsa");
            write(&path, &rows).unwrap();
            prop_assert_eq!(read(&path).unwrap(), rows);
        }
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.tsv");
        write_index(&path, &[5, 9, 2]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0\t5\n1\t9\n2\t2\n");
        assert_eq!(read_index(&path).unwrap(), vec![5, 9, 2]);
    }
}
