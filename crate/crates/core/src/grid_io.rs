//! ZGRID: a portable gridded-field container.
//!
//! A ZGRID file is a compact UTF-8 JSON header, terminated by `\n\0`,
//! followed by the raw payload in little-endian IEEE-754 (`f32` or `f16`),
//! row-major over `[z, y, x]`. Terrain grids use the same layout with a
//! single level.

use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

pub const DEFAULT_MISSING: f32 = -9999.0;

const HEADER_TERMINATOR: &[u8] = b"\n\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeightDatum {
    #[serde(rename = "MSL")]
    Msl,
    #[serde(rename = "AGL")]
    Agl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F16,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

/// Unit of the horizontal coordinate vectors. Distances are always taken
/// in these raw units; no geodesy is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoordUnits {
    #[default]
    Km,
    Degrees,
}

/// A regular 3-D scalar field stored row-major as `[z, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3D {
    pub name: String,
    pub units: String,
    pub z_coords: Vec<f64>,
    pub y_coords: Vec<f64>,
    pub x_coords: Vec<f64>,
    pub horizontal_units: CoordUnits,
    pub height_datum: HeightDatum,
    pub dtype: Dtype,
    pub missing_value: f32,
    pub values: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    units: String,
    dims: [usize; 3],
    z_coords: Vec<f64>,
    y_coords: Vec<f64>,
    x_coords: Vec<f64>,
    height_datum: HeightDatum,
    dtype: Dtype,
    missing_value: f32,
    #[serde(default)]
    horizontal_units: CoordUnits,
}

fn check_axis(label: &str, coords: &[f64]) -> Result<()> {
    if coords.is_empty() {
        return validation(format!("{label} axis is empty"));
    }
    if coords.iter().any(|c| !c.is_finite()) {
        return validation(format!("{label} coordinates must be finite"));
    }
    if coords.windows(2).any(|w| w[1] <= w[0]) {
        return validation(format!("{label} coordinates must be strictly ascending"));
    }
    Ok(())
}

impl Grid3D {
    /// Builds a grid and checks its invariants. `dtype` defaults to `f32`,
    /// `missing_value` to [`DEFAULT_MISSING`] and the horizontal units to km.
    pub fn new(
        name: impl Into<String>,
        units: impl Into<String>,
        z_coords: Vec<f64>,
        y_coords: Vec<f64>,
        x_coords: Vec<f64>,
        height_datum: HeightDatum,
        values: Vec<f32>,
    ) -> Result<Self> {
        let grid = Grid3D {
            name: name.into(),
            units: units.into(),
            z_coords,
            y_coords,
            x_coords,
            horizontal_units: CoordUnits::Km,
            height_datum,
            dtype: Dtype::F32,
            missing_value: DEFAULT_MISSING,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// A single-level field on the given horizontal axes.
    pub fn from_2d(
        name: impl Into<String>,
        units: impl Into<String>,
        y_coords: Vec<f64>,
        x_coords: Vec<f64>,
        values: Vec<f32>,
    ) -> Result<Self> {
        Self::new(name, units, vec![0.0], y_coords, x_coords, HeightDatum::Agl, values)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.z_coords.len(), self.y_coords.len(), self.x_coords.len())
    }

    pub fn nz(&self) -> usize {
        self.z_coords.len()
    }

    pub fn ny(&self) -> usize {
        self.y_coords.len()
    }

    pub fn nx(&self) -> usize {
        self.x_coords.len()
    }

    pub fn plane_len(&self) -> usize {
        self.ny() * self.nx()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.ny() + y) * self.nx() + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }

    pub fn level(&self, z: usize) -> &[f32] {
        let n = self.plane_len();
        &self.values[z * n..(z + 1) * n]
    }

    #[inline]
    pub fn is_missing(&self, v: f32) -> bool {
        v == self.missing_value || v.is_nan()
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("z", &self.z_coords)?;
        check_axis("y", &self.y_coords)?;
        check_axis("x", &self.x_coords)?;
        let (nz, ny, nx) = self.dims();
        if self.values.len() != nz * ny * nx {
            return validation(format!("payload holds {} values but dims {nz}x{ny}x{nx} need {}", self.values.len(), nz * ny * nx));
        }
        Ok(())
    }

    /// Same grid shape with new values.
    pub fn with_values(&self, name: impl Into<String>, units: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        let mut g = self.clone();
        g.name = name.into();
        g.units = units.into();
        g.values = values;
        g.validate()?;
        Ok(g)
    }
}

/// Serializes a grid to bytes in ZGRID layout.
pub fn encode_grid(grid: &Grid3D) -> Result<Vec<u8>> {
    grid.validate()?;
    let header = Header {
        name: grid.name.clone(),
        units: grid.units.clone(),
        dims: [grid.nz(), grid.ny(), grid.nx()],
        z_coords: grid.z_coords.clone(),
        y_coords: grid.y_coords.clone(),
        x_coords: grid.x_coords.clone(),
        height_datum: grid.height_datum,
        dtype: grid.dtype,
        missing_value: grid.missing_value,
        horizontal_units: grid.horizontal_units,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.extend_from_slice(HEADER_TERMINATOR);
    out.reserve(grid.values.len() * grid.dtype.width());
    match grid.dtype {
        Dtype::F32 => {
            for v in &grid.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for v in &grid.values {
                out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses ZGRID bytes.
pub fn decode_grid(bytes: &[u8]) -> Result<Grid3D> {
    let split = bytes
        .windows(HEADER_TERMINATOR.len())
        .position(|w| w == HEADER_TERMINATOR)
        .ok_or_else(|| Error::Format("header terminator not found".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let [nz, ny, nx] = header.dims;
    if header.z_coords.len() != nz || header.y_coords.len() != ny || header.x_coords.len() != nx {
        return validation(format!(
            "dims {:?} disagree with coordinate lengths ({}, {}, {})",
            header.dims,
            header.z_coords.len(),
            header.y_coords.len(),
            header.x_coords.len()
        ));
    }
    let payload = &bytes[split + HEADER_TERMINATOR.len()..];
    let width = header.dtype.width();
    let expected = nz * ny * nx;
    if payload.len() != expected * width {
        return validation(format!(
            "payload has {} bytes, dims {nz}x{ny}x{nx} of {:?} need {}",
            payload.len(),
            header.dtype,
            expected * width
        ));
    }
    let values: Vec<f32> = match header.dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::F16 => payload.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
    };
    let grid = Grid3D {
        name: header.name,
        units: header.units,
        z_coords: header.z_coords,
        y_coords: header.y_coords,
        x_coords: header.x_coords,
        horizontal_units: header.horizontal_units,
        height_datum: header.height_datum,
        dtype: header.dtype,
        missing_value: header.missing_value,
        values,
    };
    grid.validate()?;
    Ok(grid)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid3D> {
    let bytes = fs::read(path)?;
    decode_grid(&bytes)
}

pub fn write_grid(grid: &Grid3D, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_grid(grid)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Column maximum over z, ignoring missing values. Returned as a
/// single-level grid; columns with no valid value are set to the sentinel.
pub fn composite_max(grid: &Grid3D) -> Result<Grid3D> {
    grid.validate()?;
    let n = grid.plane_len();
    let mut out = vec![f32::NEG_INFINITY; n];
    for z in 0..grid.nz() {
        for (o, &v) in out.iter_mut().zip(grid.level(z)) {
            if !grid.is_missing(v) && v > *o {
                *o = v;
            }
        }
    }
    for o in &mut out {
        if *o == f32::NEG_INFINITY {
            *o = grid.missing_value;
        }
    }
    Ok(Grid3D {
        name: format!("{}_composite", grid.name),
        units: grid.units.clone(),
        z_coords: vec![0.0],
        y_coords: grid.y_coords.clone(),
        x_coords: grid.x_coords.clone(),
        horizontal_units: grid.horizontal_units,
        height_datum: grid.height_datum,
        dtype: Dtype::F32,
        missing_value: grid.missing_value,
        values: out,
    })
}

/// Ground elevation (km above sea level) on a horizontal grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainGrid {
    pub y_coords: Vec<f64>,
    pub x_coords: Vec<f64>,
    pub elevation: Vec<f64>,
}

impl TerrainGrid {
    pub fn new(y_coords: Vec<f64>, x_coords: Vec<f64>, elevation: Vec<f64>) -> Result<Self> {
        let t = TerrainGrid { y_coords, x_coords, elevation };
        t.validate()?;
        Ok(t)
    }

    pub fn flat(y_coords: Vec<f64>, x_coords: Vec<f64>, height_km: f64) -> Result<Self> {
        let n = y_coords.len() * x_coords.len();
        Self::new(y_coords, x_coords, vec![height_km; n])
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("y", &self.y_coords)?;
        check_axis("x", &self.x_coords)?;
        if self.elevation.len() != self.y_coords.len() * self.x_coords.len() {
            return validation("terrain elevation length does not match its coordinates");
        }
        if self.elevation.iter().any(|e| !e.is_finite()) {
            return validation("terrain elevation must be finite");
        }
        Ok(())
    }

    pub fn to_grid(&self) -> Result<Grid3D> {
        let values = self.elevation.iter().map(|&e| e as f32).collect();
        Grid3D::new("terrain", "km", vec![0.0], self.y_coords.clone(), self.x_coords.clone(), HeightDatum::Msl, values)
    }

    pub fn from_grid(grid: &Grid3D) -> Result<Self> {
        if grid.nz() != 1 {
            return validation(format!("terrain grid must have one level, found {}", grid.nz()));
        }
        if grid.values.iter().any(|&v| grid.is_missing(v)) {
            return validation("terrain grid contains missing values");
        }
        Self::new(grid.y_coords.clone(), grid.x_coords.clone(), grid.values.iter().map(|&v| v as f64).collect())
    }
}

pub fn read_terrain(path: impl AsRef<Path>) -> Result<TerrainGrid> {
    TerrainGrid::from_grid(&read_grid(path)?)
}

pub fn write_terrain(terrain: &TerrainGrid, path: impl AsRef<Path>) -> Result<()> {
    write_grid(&terrain.to_grid()?, path)
}

/// `n` evenly spaced values from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (n - 1) as f64;
            (0..n).map(|i| start + step * i as f64).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_grid() -> Grid3D {
        Grid3D::new(
            "refl",
            "dBZ",
            vec![0.5, 1.0, 1.5],
            vec![0.0, 3.0],
            vec![0.0, 3.0, 6.0],
            HeightDatum::Agl,
            (0..18).map(|v| v as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = small_grid();
        g.values[4] = f32::from_bits(0x3dcc_cccd);
        g.y_coords = vec![0.1, 0.30000000000000004];
        let back = decode_grid(&encode_grid(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        for (a, b) in back.values.iter().zip(&g.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_voxel_grid() {
        let g = Grid3D::new("w", "m/s", vec![1.0], vec![0.0], vec![0.0], HeightDatum::Agl, vec![42.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.zgrid");
        write_grid(&g, &p).unwrap();
        let back = read_grid(&p).unwrap();
        assert_eq!(back.values, vec![42.0]);
    }

    #[test]
    fn payload_length_mismatch_is_validation_error() {
        let g = small_grid();
        let mut bytes = encode_grid(&g).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_grid(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn coords_dims_mismatch_is_validation_error() {
        let g = small_grid();
        let bytes = encode_grid(&g).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let text = text.replacen("\"dims\":[3,2,3]", "\"dims\":[3,2,4]", 1);
        assert!(matches!(decode_grid(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_header_is_format_error() {
        assert!(matches!(decode_grid(b"{not json\n\0abcd"), Err(Error::Format(_))));
        assert!(matches!(decode_grid(b"no terminator"), Err(Error::Format(_))));
    }

    #[test]
    fn descending_coords_rejected_before_write() {
        let mut g = small_grid();
        g.x_coords = vec![0.0, 6.0, 3.0];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.zgrid");
        assert!(matches!(write_grid(&g, &p), Err(Error::Validation(_))));
        assert!(!p.exists());
    }

    #[test]
    fn empty_dims_rejected() {
        let r = Grid3D::new("e", "", vec![], vec![0.0], vec![0.0], HeightDatum::Agl, vec![]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_grid("/nonexistent/file.zgrid"), Err(Error::Io(_))));
    }

    #[test]
    fn f16_payload_halves_size() {
        let mut g = small_grid();
        let full = encode_grid(&g).unwrap().len();
        g.dtype = Dtype::F16;
        let half = encode_grid(&g).unwrap();
        assert_eq!(full - half.len(), 18 * 2);
        assert_eq!(decode_grid(&half).unwrap(), g);
    }

    #[test]
    fn composite_takes_column_max() {
        let mut g = Grid3D::new(
            "refl",
            "dBZ",
            vec![1.0, 2.0, 3.0],
            vec![0.0],
            vec![0.0, 1.0],
            HeightDatum::Agl,
            vec![10.0, DEFAULT_MISSING, 35.0, DEFAULT_MISSING, 20.0, DEFAULT_MISSING],
        )
        .unwrap();
        let c = composite_max(&g).unwrap();
        assert_eq!(c.values, vec![35.0, DEFAULT_MISSING]);
        g.values[1] = -5.0;
        assert_eq!(composite_max(&g).unwrap().values, vec![35.0, -5.0]);
    }

    #[test]
    fn composite_of_single_level_is_identity() {
        let g = Grid3D::from_2d("a", "dBZ", vec![0.0, 1.0], vec![0.0], vec![3.0, -1.0]).unwrap();
        let c = composite_max(&g).unwrap();
        assert_eq!(c.values, g.values);
        assert_eq!(composite_max(&c).unwrap().values, c.values);
    }

    #[test]
    fn terrain_round_trip() {
        let t = TerrainGrid::new(vec![0.0, 1.0], vec![0.0], vec![1.5, 0.25]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.zgrid");
        write_terrain(&t, &p).unwrap();
        assert_eq!(read_terrain(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn prop_round_trip(nz in 1usize..4, ny in 1usize..5, nx in 1usize..5, seed in any::<u64>()) {
            let n = nz * ny * nx;
            let values: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) as u32) & 0x7f7f_ffff))
                .collect();
            let g = Grid3D::new(
                "p", "u",
                (0..nz).map(|i| i as f64 * 0.37).collect(),
                (0..ny).map(|i| -1.0 + i as f64 / 3.0).collect(),
                (0..nx).map(|i| i as f64 * 1e-3).collect(),
                HeightDatum::Msl,
                values,
            ).unwrap();
            let back = decode_grid(&encode_grid(&g).unwrap()).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn prop_composite_dominates_levels(vals in proptest::collection::vec(-50f32..80.0, 12)) {
            let g = Grid3D::new("r", "dBZ", vec![1.0, 2.0, 3.0], vec![0.0, 1.0], vec![0.0, 1.0], HeightDatum::Agl, vals).unwrap();
            let c = composite_max(&g).unwrap();
            for z in 0..3 {
                for (cv, lv) in c.values.iter().zip(g.level(z)) {
                    prop_assert!(cv >= lv);
                }
            }
        }
    }
}
