//! "SDK1" binary arrays: little-endian f64 data in row-major order.
//!
//! Layout: 4-byte magic `SDK1`, `u32` rank, `u64` element count (16 bytes),
//! then `rank` `u64` dimensions, then the data.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("array of shape {dims:?} cannot hold {} values", data.len())));
        }
        Ok(Array { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array { dims: vec![data.len()], data }
    }

    /// Rows stacked into an `n x d` array; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows have different lengths"));
        }
        Ok(Array { dims: vec![rows.len(), d], data: rows.concat() })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Array { dims: vec![m.nrows(), m.ncols()], data }
    }

    /// Stack of equally shaped matrices as an `n x r x c` array.
    pub fn from_matrices(ms: &[DMatrix<f64>]) -> Result<Self> {
        let shape = ms.first().map_or((0, 0), |m| m.shape());
        if ms.iter().any(|m| m.shape() != shape) {
            return Err(Error::invalid("matrices have different shapes"));
        }
        let mut data = Vec::with_capacity(ms.len() * shape.0 * shape.1);
        for m in ms {
            data.extend(Array::from_matrix(m).data);
        }
        Ok(Array { dims: vec![ms.len(), shape.0, shape.1], data })
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!("expected a rank-2 array, found shape {:?}", self.dims)));
        }
        if self.dims[1] == 0 {
            return Ok(vec![Vec::new(); self.dims[0]]);
        }
        Ok(self.data.chunks(self.dims[1]).map(|c| c.to_vec()).collect())
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!("expected a rank-2 array, found shape {:?}", self.dims)));
        }
        Ok(DMatrix::from_row_slice(self.dims[0], self.dims[1], &self.data))
    }

    pub fn to_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        if self.dims.len() != 3 {
            return Err(Error::Format(format!("expected a rank-3 array, found shape {:?}", self.dims)));
        }
        let size = self.dims[1] * self.dims[2];
        Ok((0..self.dims[0])
            .map(|i| DMatrix::from_row_slice(self.dims[1], self.dims[2], &self.data[i * size..(i + 1) * size]))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing SDK1 header"));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16 + 8 * rank;
        if bytes.len() != data_start + 8 * count {
            return Err(bad("array length does not match its header"));
        }
        let dims: Vec<usize> = bytes[16..data_start].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        if dims.iter().product::<usize>() != count {
            return Err(bad("array dimensions do not match the element count"));
        }
        let data = bytes[data_start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Array { dims, data })
    }
}

pub fn write_array(path: &Path, a: &Array) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&a.to_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<Array> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Array::from_bytes(&bytes)
}

/// Array as CSV, one line per leading index; trailing axes are flattened row-major.
pub fn array_to_csv(a: &Array) -> Result<String> {
    let rows: Vec<Vec<f64>> = match a.dims.len() {
        0 => return Err(Error::Format("cannot export a rank-0 array".into())),
        1 => vec![a.data.clone()],
        _ => {
            let width: usize = a.dims[1..].iter().product();
            if width == 0 {
                vec![Vec::new(); a.dims[0]]
            } else {
                a.data.chunks(width).map(<[f64]>::to_vec).collect()
            }
        }
    };
    let mut s = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let a = Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[..4], b"SDK1");
        assert_eq!(b.len(), 16 + 16 + 48);
        assert_eq!(Array::from_bytes(&b).unwrap(), a);
        assert!(Array::from_bytes(&b[..b.len() - 1]).is_err());
        let m = a.to_matrix().unwrap();
        assert_eq!(m[(1, 2)], -6.5);
        assert_eq!(Array::from_matrix(&m), a);
    }

    #[test]
    fn matrix_stacks() {
        let ms = vec![DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), DMatrix::from_row_slice(1, 2, &[3.0, 4.0])];
        let a = Array::from_matrices(&ms).unwrap();
        assert_eq!(a.dims, vec![2, 1, 2]);
        assert_eq!(a.to_matrices().unwrap(), ms);
        assert_eq!(array_to_csv(&Array::vector(vec![1.0, 0.5])).unwrap(), "1e0,5e-1\n");
    }
}
