//! Little-endian binary matrices: magic `F0VM`, u32 version, u64 rows,
//! u64 cols, then rows*cols f64 values row-major.

use std::io::{Read, Write};
use std::path::Path;

use super::{DspError, F0Contour, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"F0VM";
pub const MATRIX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn write_matrix<W: Write>(mut w: W, m: &Matrix) -> std::io::Result<()> {
    w.write_all(&MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Matrix> {
    let mut head = [0u8; 24];
    r.read_exact(&mut head)
        .map_err(|_| DspError::Format("truncated header".into()))?;
    if head[..4] != MATRIX_MAGIC {
        return Err(DspError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(DspError::Format(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| DspError::Format("dimension overflow".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| DspError::Format(e.to_string()))?;
    if bytes.len() != n * 8 {
        return Err(DspError::Format(format!(
            "expected {} payload bytes, found {}",
            n * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix { rows, cols, data })
}

fn io_err(path: &Path, source: std::io::Error) -> DspError {
    DspError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_matrix_file(path: &Path, m: &Matrix) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_matrix(&mut w, m).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_matrix_file(path: &Path) -> Result<Matrix> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_matrix(std::io::BufReader::new(f))
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut s = String::new();
    for row in m.data.chunks(m.cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn write_contour_csv(path: &Path, c: &F0Contour) -> Result<()> {
    let mut s = String::from("frame,f0_hz,voiced\n");
    for (i, f) in c.frames.iter().enumerate() {
        s.push_str(&format!("{i},{},{}\n", f.f0_hz, u8::from(f.voiced)));
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}
