//! Cell-centered uniform grids and fields on them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Largest ambient dimension supported by the grid code.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub h: f64,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellKind {
    Interior = 0,
    Collar = 1,
    Wall = 2,
}

impl Grid {
    /// Cells of side `h` covering [lo, hi]; the upper corner is rounded up to a whole cell.
    pub fn new(lo: &[f64], hi: &[f64], h: f64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > MAX_DIM {
            return Err(Error::Parameter(format!("grid dimension must be 1..={MAX_DIM}")));
        }
        if !(h > 0.0) {
            return Err(Error::Parameter(format!("grid spacing must be positive, got {h}")));
        }
        let mut dims = Vec::with_capacity(lo.len());
        for (a, b) in lo.iter().zip(hi) {
            if !(b > a) {
                return Err(Error::Parameter(format!("empty box side [{a}, {b}]")));
            }
            dims.push(((b - a) / h - 1e-9).ceil().max(1.0) as usize);
        }
        let total: f64 = dims.iter().map(|&d| d as f64).product();
        if total > 4.0e8 {
            return Err(Error::Parameter(format!("grid of {total} cells is too large")));
        }
        Ok(Grid {
            lo: lo.to_vec(),
            h,
            dims,
        })
    }

    /// Grid whose cell centers sit at `center + (k + 1/2) h`, covering the cube of half-width `half`.
    pub fn centered(center: &[f64], half: f64, h: f64) -> Result<Self> {
        let k = (half / h - 1e-9).ceil();
        let lo: Vec<f64> = center.iter().map(|c| c - k * h).collect();
        let hi: Vec<f64> = center.iter().map(|c| c + k * h).collect();
        Grid::new(&lo, &hi, h)
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hi(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.dims)
            .map(|(l, &d)| l + d as f64 * self.h)
            .collect()
    }

    /// Index strides; the first axis varies fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.dim());
        let mut acc = 1;
        for &d in &self.dims {
            s.push(acc);
            acc *= d;
        }
        s
    }

    pub fn coords(&self, mut idx: usize, out: &mut [usize]) {
        for (a, &d) in self.dims.iter().enumerate() {
            out[a] = idx % d;
            idx /= d;
        }
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        for a in (0..self.dim()).rev() {
            idx = idx * self.dims[a] + coords[a];
        }
        idx
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        let mut c = [0usize; MAX_DIM];
        self.coords(idx, &mut c);
        (0..self.dim())
            .map(|a| self.lo[a] + (c[a] as f64 + 0.5) * self.h)
            .collect()
    }

    pub fn center_into(&self, idx: usize, out: &mut [f64]) {
        let mut c = [0usize; MAX_DIM];
        self.coords(idx, &mut c);
        for a in 0..self.dim() {
            out[a] = self.lo[a] + (c[a] as f64 + 0.5) * self.h;
        }
    }

    /// Cell containing x, if any.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut c = [0usize; MAX_DIM];
        for a in 0..self.dim() {
            let t = ((x[a] - self.lo[a]) / self.h).floor();
            if t < 0.0 || t >= self.dims[a] as f64 {
                return None;
            }
            c[a] = t as usize;
        }
        Some(self.index(&c[..self.dim()]))
    }

    /// Multilinear interpolation stencil over cell centers: (index, weight) pairs.
    pub fn stencil(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        let n = self.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for a in 0..n {
            let t = (x[a] - self.lo[a]) / self.h - 0.5;
            if t < -1e-9 || t > (self.dims[a] - 1) as f64 + 1e-9 || self.dims[a] < 2 {
                return Err(Error::Domain(format!(
                    "point {x:?} outside the cell-center hull of the grid"
                )));
            }
            let t = t.clamp(0.0, (self.dims[a] - 1) as f64);
            let b = (t.floor() as usize).min(self.dims[a] - 2);
            base[a] = b;
            frac[a] = t - b as f64;
        }
        let mut out = Vec::with_capacity(1 << n);
        let mut c = [0usize; MAX_DIM];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for a in 0..n {
                let up = (corner >> a) & 1;
                c[a] = base[a] + up;
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                out.push((self.index(&c[..n]), w));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub mask: Vec<CellKind>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    h: f64,
    order: String,
    dtype: String,
    values_file: String,
    mask_file: String,
    mask_encoding: std::collections::BTreeMap<String, String>,
}

impl GridField {
    pub fn new(grid: Grid, mask: Vec<CellKind>) -> Self {
        let len = grid.len();
        assert_eq!(mask.len(), len);
        GridField {
            grid,
            values: vec![0.0; len],
            mask,
        }
    }

    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.grid.stencil(x)?.iter().map(|&(i, w)| w * self.values[i]).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes `<stem>.f64` (little-endian), `<stem>.mask` (one byte per cell) and `<stem>.json`.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        let values_file = format!("{stem}.f64");
        let mask_file = format!("{stem}.mask");
        let mut bytes = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&values_file), bytes)?;
        let mask: Vec<u8> = self.mask.iter().map(|&k| k as u8).collect();
        std::fs::write(dir.join(&mask_file), mask)?;
        let sidecar = Sidecar {
            dims: self.grid.dims.clone(),
            lo: self.grid.lo.clone(),
            hi: self.grid.hi(),
            h: self.grid.h,
            order: "first axis fastest".into(),
            dtype: "f64 little-endian".into(),
            values_file,
            mask_file,
            mask_encoding: [("0", "interior"), ("1", "collar"), ("2", "wall")]
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        let mut f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(&mut f, &sidecar).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f)?;
        Ok(())
    }

    /// Reads a field written by [`GridField::dump`].
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let grid = Grid {
            lo: side.lo,
            h: side.h,
            dims: side.dims,
        };
        let raw = std::fs::read(dir.join(&side.values_file))?;
        if raw.len() != 8 * grid.len() {
            return Err(Error::Format(format!("{} bytes for {} cells", raw.len(), grid.len())));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = std::fs::read(dir.join(&side.mask_file))?
            .into_iter()
            .map(|b| match b {
                0 => Ok(CellKind::Interior),
                1 => Ok(CellKind::Collar),
                2 => Ok(CellKind::Wall),
                other => Err(Error::Format(format!("unknown mask code {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if mask.len() != grid.len() {
            return Err(Error::Format("mask length does not match the grid".into()));
        }
        Ok(GridField { grid, values, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn index_round_trip() {
        let g = Grid::new(&[0.0, 0.0, 0.0], &[1.0, 0.5, 0.25], 0.125).unwrap();
        assert_eq!(g.dims, vec![8, 4, 2]);
        let mut c = [0usize; 3];
        for i in 0..g.len() {
            g.coords(i, &mut c);
            assert_eq!(g.index(&c), i);
            assert_eq!(g.locate(&g.center(i)), Some(i));
        }
    }

    #[test]
    fn centered_grid_is_symmetric() {
        let g = Grid::centered(&[0.0, 0.0], 1.0, 0.1).unwrap();
        assert_eq!(g.dims, vec![20, 20]);
        let first = g.center(0);
        assert!((first[0] + 0.95).abs() < 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 1.0], 0.25).unwrap();
        let mut f = GridField::new(g, vec![CellKind::Interior; 16]);
        f.mask[3] = CellKind::Collar;
        f.mask[5] = CellKind::Wall;
        for (i, v) in f.values.iter_mut().enumerate() {
            *v = i as f64 / 7.0;
        }
        let dir = std::env::temp_dir().join(format!("urlab-grid-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        f.dump(&dir, "u").unwrap();
        let back = GridField::load(&dir, "u").unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!(back.mask, f.mask);
        assert_eq!(back.grid, f.grid);
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn interpolation_reproduces_affine_functions(x in 0.2f64..0.8, y in 0.2f64..0.8, z in 0.2f64..0.8) {
            let g = Grid::new(&[0.0; 3], &[1.0; 3], 0.1).unwrap();
            let mut f = GridField::new(g.clone(), vec![CellKind::Interior; g.len()]);
            for i in 0..g.len() {
                let c = g.center(i);
                f.values[i] = 1.0 + 2.0 * c[0] - c[1] + 0.5 * c[2];
            }
            let v = f.interpolate(&[x, y, z]).unwrap();
            prop_assert!((v - (1.0 + 2.0 * x - y + 0.5 * z)).abs() < 1e-12);
        }
    }
}
