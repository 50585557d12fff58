//! Periodic unit cells built from moving-morphable-component (MMC) bars.
//!
//! Each component carries a superellipse topology description function
//! `phi(x) = 1 - sum_i (x'_i / L_i)^p` in its local frame. A cell is the union
//! (pointwise max) of its components and all their periodic images, sampled
//! at voxel centers into a binary raster.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::FRAC_PI_4;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bar half-length along its axis for the builtin cells. Long enough that the
/// superellipse end taper is invisible inside the cell (< 1e-4 in `phi`).
const BAR_HALF_LENGTH: f64 = 4.0;
/// Upper bound on member half-thickness for the builtin cells.
const MAX_HALF_THICKNESS: f64 = 0.25;
const FRACTION_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmcComponent {
    pub center: Vec<f64>,
    pub half_lengths: Vec<f64>,
    /// 2D: one angle. 3D: intrinsic z-y-x angles.
    pub orientation: Vec<f64>,
    pub exponent: u32,
}

impl MmcComponent {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n != 2 && n != 3 {
            return Err(Error::param(format!("component dimension {n} unsupported")));
        }
        if self.half_lengths.len() != n {
            return Err(Error::dim(n, self.half_lengths.len()));
        }
        let angles = if n == 2 { 1 } else { 3 };
        if self.orientation.len() != angles {
            return Err(Error::dim(angles, self.orientation.len()));
        }
        if self.half_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::param("component half-lengths must be positive"));
        }
        if self.center.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::param("component center must lie in the unit cell"));
        }
        if self.exponent < 2 || !self.exponent.is_multiple_of(2) {
            return Err(Error::param("superellipse exponent must be an even integer >= 2"));
        }
        Ok(())
    }

    /// Rotation matrix whose columns are the local axes in cell coordinates.
    fn rotation(&self) -> [[f64; 3]; 3] {
        if self.dim() == 2 {
            let (s, c) = self.orientation[0].sin_cos();
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        } else {
            let (sz, cz) = self.orientation[0].sin_cos();
            let (sy, cy) = self.orientation[1].sin_cos();
            let (sx, cx) = self.orientation[2].sin_cos();
            [
                [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
                [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
                [-sy, cy * sx, cy * cx],
            ]
        }
    }
}

/// Binary (0/1) density on a regular `N^n` voxel grid over the unit cell,
/// interpreted periodically. Voxel `(i, j, k)` sits at flat index
/// `i + N (j + N k)`; its center is `((i + 1/2)/N, ...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRaster {
    dim: usize,
    resolution: usize,
    density: Vec<f64>,
}

impl CellRaster {
    pub fn new(dim: usize, resolution: usize, density: Vec<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::param(format!("unsupported dimension {dim}")));
        }
        if resolution < 8 {
            return Err(Error::Resolution(resolution));
        }
        let len = resolution.pow(dim as u32);
        if density.len() != len {
            return Err(Error::dim(len, density.len()));
        }
        if density.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::param("raster density outside [0, 1]"));
        }
        Ok(CellRaster { dim, resolution, density })
    }

    pub fn filled(dim: usize, resolution: usize, value: f64) -> Result<Self> {
        CellRaster::new(dim, resolution, vec![value; resolution.pow(dim as u32)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        let n = self.resolution;
        ijk[0] + n * (ijk[1] + if self.dim == 3 { n * ijk[2] } else { 0 })
    }

    pub fn at(&self, ijk: [usize; 3]) -> f64 {
        self.density[self.index(ijk)]
    }

    pub fn is_solid(&self, voxel: usize) -> bool {
        self.density[voxel] >= 0.5
    }

    /// Density at a cell coordinate, wrapped periodically with floor semantics.
    pub fn sample(&self, y: &[f64]) -> f64 {
        let n = self.resolution;
        let mut ijk = [0usize; 3];
        for (d, &yd) in y.iter().enumerate().take(self.dim) {
            let f = yd - yd.floor();
            ijk[d] = ((f * n as f64) as usize).min(n - 1);
        }
        self.at(ijk)
    }

    /// Stable content hash, used as part of cell-solve cache keys.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dim.hash(&mut h);
        self.resolution.hash(&mut h);
        for d in &self.density {
            d.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// The 2D raster rotated by +90 degrees about the cell center, so that the
    /// new field satisfies `chi'(x) = chi(R^T x)`.
    pub fn rot90(&self) -> Result<CellRaster> {
        if self.dim != 2 {
            return Err(Error::param("rot90 is defined for 2D rasters"));
        }
        let n = self.resolution;
        let mut out = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                out[i + n * j] = self.density[j + n * (n - 1 - i)];
            }
        }
        CellRaster::new(2, n, out)
    }

    /// Copies a 2D raster along a third axis.
    pub fn extrude(&self) -> Result<CellRaster> {
        if self.dim != 2 {
            return Err(Error::param("only 2D rasters can be extruded"));
        }
        let n = self.resolution;
        let mut out = Vec::with_capacity(n * n * n);
        for _ in 0..n {
            out.extend_from_slice(&self.density);
        }
        CellRaster::new(3, n, out)
    }

    /// Writes a binary PGM (P5). The first image row is the highest `x2` row.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        if self.dim != 2 {
            return Err(Error::param("PGM export requires a 2D raster"));
        }
        let n = self.resolution;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{n} {n}\n255\n")?;
        for row in (0..n).rev() {
            let bytes: Vec<u8> = (0..n).map(|i| (self.density[i + n * row] * 255.0).round() as u8).collect();
            f.write_all(&bytes)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<CellRaster> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (w, h, maxval, data) = parse_pgm(&bytes)?;
        if w != h {
            return Err(Error::param(format!("cell image must be square, got {w}x{h}")));
        }
        let n = w;
        let mut density = vec![0.0; n * n];
        for row in 0..n {
            for i in 0..n {
                let v = data[(n - 1 - row) * n + i] as f64 / maxval as f64;
                density[i + n * row] = if v >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        CellRaster::new(2, n, density)
    }

    /// Writes the voxel format: magic `GMCVOX1\0`, then little-endian `u32`
    /// dimension and three `u32` extents, then one byte per voxel (0 or 255)
    /// with `x1` varying fastest. 2D rasters use extent 1 on the third axis.
    pub fn write_voxels(&self, path: &Path) -> Result<()> {
        let n = self.resolution as u32;
        let nz = if self.dim == 3 { n } else { 1 };
        write_voxel_file(path, self.dim as u32, [n, n, nz], self.density.iter().copied())
    }

    pub fn read_voxels(path: &Path) -> Result<CellRaster> {
        let (dim, ext, data) = read_voxel_file(path)?;
        if ext[0] != ext[1] || (dim == 3 && ext[2] != ext[0]) {
            return Err(Error::param("voxel cell must be a cube"));
        }
        let density = data.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
        CellRaster::new(dim, ext[0], density)
    }
}

pub(crate) fn write_voxel_file(
    path: &Path,
    dim: u32,
    extents: [u32; 3],
    values: impl Iterator<Item = f64>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"GMCVOX1\0")?;
    f.write_all(&dim.to_le_bytes())?;
    for e in extents {
        f.write_all(&e.to_le_bytes())?;
    }
    let bytes: Vec<u8> = values.map(|d| (d.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub(crate) fn read_voxel_file(path: &Path) -> Result<(usize, [usize; 3], Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != b"GMCVOX1\0" {
        return Err(Error::param("not a voxel file (bad magic)"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let dim = word(0);
    let ext = [word(1), word(2), word(3)];
    let count = ext[0] * ext[1] * ext[2];
    if bytes.len() != 24 + count {
        return Err(Error::param(format!("voxel payload has {} bytes, header declares {count}", bytes.len() - 24)));
    }
    Ok((dim, ext, bytes[24..].to_vec()))
}

pub(crate) fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let bad = || Error::param("malformed PGM header");
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" {
        return Err(Error::param("only binary PGM (P5) is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::param("PGM maxval must be in 1..=255"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?;
    Ok((w, h, maxval, data))
}

/// Solid fraction `|Y_s|`: the mean voxel density.
pub fn solid_fraction(raster: &CellRaster) -> f64 {
    raster.density.iter().sum::<f64>() / raster.density.len() as f64
}

/// Rasterizes the union of `components` (with periodic images) at voxel centers.
pub fn rasterize_mmc(components: &[MmcComponent], resolution: usize) -> Result<CellRaster> {
    let dim = components.first().map(|c| c.dim()).unwrap_or(2);
    rasterize_mmc_dim(dim, components, resolution)
}

/// As [`rasterize_mmc`] with an explicit dimension, so that an empty list can
/// produce a 3D raster.
pub fn rasterize_mmc_dim(dim: usize, components: &[MmcComponent], resolution: usize) -> Result<CellRaster> {
    if resolution < 8 {
        return Err(Error::Resolution(resolution));
    }
    for c in components {
        c.validate()?;
        if c.dim() != dim {
            return Err(Error::dim(dim, c.dim()));
        }
    }
    let n = resolution;
    let mut density = vec![0.0; n.pow(dim as u32)];
    for c in components {
        paint_component(dim, n, c, &mut density);
    }
    CellRaster::new(dim, n, density)
}

fn paint_component(dim: usize, n: usize, c: &MmcComponent, density: &mut [f64]) {
    let r = c.rotation();
    let p = c.exponent as i32;
    // Axis-aligned half-extent of the rotated superellipse (it lies inside
    // its local box of half-lengths L).
    let mut ext = [0.0f64; 3];
    for i in 0..dim {
        ext[i] = (0..dim).map(|j| r[i][j].abs() * c.half_lengths[j]).sum();
    }
    let h = 1.0 / n as f64;
    let mut shift_lo = [0i64; 3];
    let mut shift_hi = [0i64; 3];
    for i in 0..dim {
        shift_lo[i] = (-c.center[i] - ext[i]).floor() as i64;
        shift_hi[i] = (1.0 - c.center[i] + ext[i]).ceil() as i64;
    }
    let zr = if dim == 3 { shift_lo[2]..=shift_hi[2] } else { 0..=0 };
    for sz in zr {
        for sy in shift_lo[1]..=shift_hi[1] {
            for sx in shift_lo[0]..=shift_hi[0] {
                let shift = [sx as f64, sy as f64, sz as f64];
                let mut center = [0.0; 3];
                let mut lo = [0usize; 3];
                let mut hi = [1usize; 3];
                let mut empty = false;
                for i in 0..dim {
                    center[i] = c.center[i] + shift[i];
                    // Voxel k has center (k + 1/2) h; keep those within the extent.
                    let a = ((center[i] - ext[i]) / h - 0.5).ceil().max(0.0);
                    let b = ((center[i] + ext[i]) / h - 0.5).floor().min(n as f64 - 1.0);
                    if b < a {
                        empty = true;
                        break;
                    }
                    lo[i] = a as usize;
                    hi[i] = b as usize + 1;
                }
                if empty {
                    continue;
                }
                for k in lo[2]..hi[2] {
                    for j in lo[1]..hi[1] {
                        for i in lo[0]..hi[0] {
                            let idx = i + n * (j + n * k);
                            if density[idx] == 1.0 {
                                continue;
                            }
                            let x = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (k as f64 + 0.5) * h];
                            let mut phi = 1.0;
                            for a in 0..dim {
                                // Local coordinate along axis a: column a of R dotted with (x - c).
                                let mut xl = 0.0;
                                for b in 0..dim {
                                    xl += r[b][a] * (x[b] - center[b]);
                                }
                                phi -= (xl / c.half_lengths[a]).powi(p);
                            }
                            if phi >= 0.0 {
                                density[idx] = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinCell {
    #[serde(rename = "x_2d")]
    X2d,
    #[serde(rename = "smiley_2d")]
    Smiley2d,
    #[serde(rename = "x_extruded_3d")]
    XExtruded3d,
    #[serde(rename = "orthogonal_cross_3d")]
    OrthogonalCross3d,
}

impl BuiltinCell {
    pub fn dim(self) -> usize {
        match self {
            BuiltinCell::X2d | BuiltinCell::Smiley2d => 2,
            BuiltinCell::XExtruded3d | BuiltinCell::OrthogonalCross3d => 3,
        }
    }

    /// Component list for member half-thickness `t`.
    pub fn components(self, t: f64) -> Vec<MmcComponent> {
        self.components_scaled(t, 1.0)
    }

    /// As [`BuiltinCell::components`] with disk radii multiplied by `s`.
    fn components_scaled(self, t: f64, s: f64) -> Vec<MmcComponent> {
        let bar2 = |angle: f64, center: [f64; 2], half: [f64; 2]| MmcComponent {
            center: center.to_vec(),
            half_lengths: half.to_vec(),
            orientation: vec![angle],
            exponent: 6,
        };
        let disk = |center: [f64; 2], radius: f64| MmcComponent {
            center: center.to_vec(),
            half_lengths: vec![radius, radius],
            orientation: vec![0.0],
            exponent: 2,
        };
        match self {
            BuiltinCell::X2d | BuiltinCell::XExtruded3d => vec![
                bar2(FRAC_PI_4, [0.5, 0.5], [BAR_HALF_LENGTH, t]),
                bar2(-FRAC_PI_4, [0.5, 0.5], [BAR_HALF_LENGTH, t]),
            ],
            BuiltinCell::Smiley2d => {
                let mut v = vec![
                    bar2(0.0, [0.5, 0.0], [BAR_HALF_LENGTH, t]),
                    bar2(0.5 * std::f64::consts::PI, [0.0, 0.5], [BAR_HALF_LENGTH, t]),
                    disk([0.36, 0.64], s * (0.05 + 0.6 * t)),
                    disk([0.64, 0.64], s * (0.05 + 0.6 * t)),
                ];
                for k in 0..7 {
                    let a = (200.0 + 140.0 * k as f64 / 6.0).to_radians();
                    v.push(disk([0.5 + 0.2 * a.cos(), 0.52 + 0.2 * a.sin()], s * (0.03 + 0.4 * t)));
                }
                v
            }
            BuiltinCell::OrthogonalCross3d => (0..3)
                .map(|axis| {
                    let mut half = [t, t, t];
                    half[axis] = BAR_HALF_LENGTH;
                    MmcComponent {
                        center: vec![0.5; 3],
                        half_lengths: half.to_vec(),
                        orientation: vec![0.0; 3],
                        exponent: 6,
                    }
                })
                .collect(),
        }
    }

    fn rasterize(self, t: f64, resolution: usize) -> Result<CellRaster> {
        self.rasterize_scaled(t, 1.0, resolution)
    }

    fn rasterize_scaled(self, t: f64, s: f64, resolution: usize) -> Result<CellRaster> {
        match self {
            BuiltinCell::XExtruded3d => BuiltinCell::X2d.rasterize(t, resolution)?.extrude(),
            _ => rasterize_mmc_dim(self.dim(), &self.components_scaled(t, s), resolution),
        }
    }
}

/// A builtin cell with its member thickness chosen by bisection so that the
/// solid fraction is within 0.005 of `target_fraction`.
pub fn builtin_cell(cell: BuiltinCell, target_fraction: f64, resolution: usize) -> Result<CellRaster> {
    Ok(builtin_cell_with_thickness(cell, target_fraction, resolution)?.0)
}

/// As [`builtin_cell`], also returning the member half-thickness found.
pub fn builtin_cell_with_thickness(
    cell: BuiltinCell,
    target_fraction: f64,
    resolution: usize,
) -> Result<(CellRaster, f64)> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(Error::param(format!("target fraction {target_fraction} outside (0, 1)")));
    }
    if resolution < 8 {
        return Err(Error::Resolution(resolution));
    }
    let frac = |t: f64| cell.rasterize(t, resolution).map(|r| (solid_fraction(&r), r));
    let (f_max, r_max) = frac(MAX_HALF_THICKNESS)?;
    if f_max < target_fraction - FRACTION_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "{cell:?} reaches at most solid fraction {f_max:.4} < {target_fraction}"
        )));
    }
    let mut lo = 0.0;
    let mut hi = MAX_HALF_THICKNESS;
    let mut best = (f_max, r_max, hi);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (f, r) = frac(mid)?;
        if (f - target_fraction).abs() < (best.0 - target_fraction).abs() {
            best = (f, r, mid);
        }
        if f < target_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    // Axis-aligned frame bars gain whole voxel rows at once; the smiley's
    // disks vary smoothly, so close the remaining gap with their radius.
    if cell == BuiltinCell::Smiley2d && (best.0 - target_fraction).abs() > FRACTION_TOLERANCE {
        let (mut s_lo, mut s_hi) = (0.5, 3.0);
        for _ in 0..60 {
            let s = 0.5 * (s_lo + s_hi);
            let r = cell.rasterize_scaled(lo, s, resolution)?;
            let f = solid_fraction(&r);
            if (f - target_fraction).abs() < (best.0 - target_fraction).abs() {
                best = (f, r, lo);
            }
            if f < target_fraction {
                s_lo = s;
            } else {
                s_hi = s;
            }
            if s_hi - s_lo < 1e-9 {
                break;
            }
        }
    }
    if (best.0 - target_fraction).abs() > FRACTION_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "{cell:?} at N={resolution} cannot hit fraction {target_fraction} (closest {:.4})",
            best.0
        )));
    }
    Ok((best.1, best.2))
}

/// Half-length of the builtin bars, exposed for oracle tests.
pub fn builtin_bar_half_length() -> f64 {
    BAR_HALF_LENGTH
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let r = builtin_cell(BuiltinCell::Smiley2d, 0.3, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        r.write_pgm(&p).unwrap();
        assert_eq!(CellRaster::read_pgm(&p).unwrap(), r);
    }

    #[test]
    fn voxel_round_trip() {
        let r = builtin_cell(BuiltinCell::OrthogonalCross3d, 0.3, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vox");
        r.write_voxels(&p).unwrap();
        assert_eq!(CellRaster::read_voxels(&p).unwrap(), r);
    }

    #[test]
    fn sample_wraps_negative_coordinates() {
        let mut d = vec![0.0; 64];
        d[7] = 1.0; // voxel (7, 0)
        let r = CellRaster::new(2, 8, d).unwrap();
        assert_eq!(r.sample(&[-0.01, 0.01]), 1.0);
        assert_eq!(r.sample(&[0.99, 1.01]), 1.0);
        assert_eq!(r.sample(&[0.01, 0.01]), 0.0);
    }
}
