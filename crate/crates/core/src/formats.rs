//! Binary record files. Every file starts with `SAFL`, a record-type byte and
//! a little-endian `u32` format version, followed by record-specific fields.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mapper::{TopViewImage, VoxelGrid3D};

pub const MAGIC: &[u8; 4] = b"SAFL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    Voxel,
    TopView,
    Features,
    Difference,
}

impl Record {
    pub fn byte(self) -> u8 {
        match self {
            Record::Voxel => b'V',
            Record::TopView => b'T',
            Record::Features => b'F',
            Record::Difference => b'D',
        }
    }

    fn name(self) -> &'static str {
        match self {
            Record::Voxel => "voxel grid",
            Record::TopView => "top view",
            Record::Features => "feature file",
            Record::Difference => "difference matrix",
        }
    }
}

/// Size of the common header in bytes.
pub const HEADER_LEN: usize = 9;

pub fn write_header<W: Write>(w: &mut W, rec: Record) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[rec.byte()])?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R, rec: Record) -> Result<()> {
    let mut head = [0u8; HEADER_LEN];
    read_exact(r, &mut head, rec)?;
    if &head[..4] != MAGIC {
        return Err(format_err(rec, "missing SAFL magic"));
    }
    if head[4] != rec.byte() {
        return Err(format_err(
            rec,
            format!("record type `{}` where `{}` was expected", head[4] as char, rec.byte() as char),
        ));
    }
    let version = u32::from_le_bytes([head[5], head[6], head[7], head[8]]);
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn format_err(rec: Record, reason: impl Into<String>) -> Error {
    Error::Format {
        record: rec.name(),
        reason: reason.into(),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], rec: Record) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(rec, "truncated"),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, rec: Record) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, rec)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize, rec: Record) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, rec)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s<W: Write>(w: &mut W, vals: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn expect_end<R: Read>(r: &mut R, rec: Record) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(format_err(rec, "trailing bytes")),
    }
}

pub fn write_voxel_grid<W: Write>(w: &mut W, g: &VoxelGrid3D) -> Result<()> {
    write_header(w, Record::Voxel)?;
    w.write_all(&(g.size as u32).to_le_bytes())?;
    write_f32s(w, &[g.cell_size])?;
    write_f32s(w, &g.origin)?;
    w.write_all(&g.occupancy)?;
    Ok(())
}

pub fn read_voxel_grid<R: Read>(r: &mut R) -> Result<VoxelGrid3D> {
    let rec = Record::Voxel;
    read_header(r, rec)?;
    let size = read_u32(r, rec)? as usize;
    let cell = read_f32s(r, 1, rec)?[0];
    let o = read_f32s(r, 3, rec)?;
    let n = size
        .checked_pow(3)
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| format_err(rec, format!("grid size {size} too large")))?;
    let mut occupancy = vec![0u8; n];
    read_exact(r, &mut occupancy, rec)?;
    if occupancy.iter().any(|&v| v > 1) {
        return Err(format_err(rec, "occupancy values must be 0 or 1"));
    }
    expect_end(r, rec)?;
    Ok(VoxelGrid3D {
        size,
        cell_size: cell,
        origin: [o[0], o[1], o[2]],
        yaw: 0.0,
        occupancy,
    })
}

pub fn write_top_view<W: Write>(w: &mut W, t: &TopViewImage) -> Result<()> {
    write_header(w, Record::TopView)?;
    w.write_all(&(t.height as u32).to_le_bytes())?;
    w.write_all(&(t.width as u32).to_le_bytes())?;
    write_f32s(w, &[t.cell_size])?;
    write_f32s(w, &t.origin)?;
    write_f32s(w, &t.pixels)
}

pub fn read_top_view<R: Read>(r: &mut R) -> Result<TopViewImage> {
    let rec = Record::TopView;
    read_header(r, rec)?;
    let height = read_u32(r, rec)? as usize;
    let width = read_u32(r, rec)? as usize;
    let cell = read_f32s(r, 1, rec)?[0];
    let o = read_f32s(r, 3, rec)?;
    if height.saturating_mul(width) > 1 << 28 {
        return Err(format_err(rec, "image too large"));
    }
    let pixels = read_f32s(r, height * width, rec)?;
    if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(format_err(rec, "pixel outside [0, 1]"));
    }
    expect_end(r, rec)?;
    Ok(TopViewImage {
        height,
        width,
        cell_size: cell,
        origin: [o[0], o[1], o[2]],
        pixels,
    })
}

/// Row-major `count × dim` float matrix, used for feature files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            values: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut m = Self::new(dim);
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim.max(1))
    }
}

pub fn write_features<W: Write>(w: &mut W, f: &FeatureMatrix) -> Result<()> {
    write_header(w, Record::Features)?;
    w.write_all(&(f.count() as u32).to_le_bytes())?;
    w.write_all(&(f.dim as u32).to_le_bytes())?;
    write_f32s(w, &f.values)
}

pub fn read_features<R: Read>(r: &mut R) -> Result<FeatureMatrix> {
    let rec = Record::Features;
    read_header(r, rec)?;
    let count = read_u32(r, rec)? as usize;
    let dim = read_u32(r, rec)? as usize;
    let n = count
        .checked_mul(dim)
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| format_err(rec, "feature matrix too large"))?;
    let values = read_f32s(r, n, rec)?;
    expect_end(r, rec)?;
    Ok(FeatureMatrix { dim, values })
}

/// Dense difference matrix, rows = queries, columns = references.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DifferenceMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}×{cols} difference matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![v; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn write_difference_matrix<W: Write>(w: &mut W, d: &DifferenceMatrix) -> Result<()> {
    write_header(w, Record::Difference)?;
    w.write_all(&(d.rows as u32).to_le_bytes())?;
    w.write_all(&(d.cols as u32).to_le_bytes())?;
    let vals: Vec<f32> = d.values.iter().map(|&v| v as f32).collect();
    write_f32s(w, &vals)
}

pub fn read_difference_matrix<R: Read>(r: &mut R) -> Result<DifferenceMatrix> {
    let rec = Record::Difference;
    read_header(r, rec)?;
    let rows = read_u32(r, rec)? as usize;
    let cols = read_u32(r, rec)? as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| format_err(rec, "matrix too large"))?;
    let values = read_f32s(r, n, rec)?.into_iter().map(f64::from).collect();
    expect_end(r, rec)?;
    DifferenceMatrix::new(rows, cols, values)
}
