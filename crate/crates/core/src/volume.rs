//! Dense 3D grids and the `.v3d` file format.
//!
//! A `.v3d` file is a JSON header
//! `{"shape":[D,H,W],"spacing_mm":[sz,sy,sx],"dtype":"f32"|"u8","order":"C","endian":"little"}`;
//! the voxel payload lives next to it with the extension replaced by `.raw`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel element types storable in a `.v3d` payload.
pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// Row-major `[D, H, W]` grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<T>,
}

pub type Image = Grid<f32>;
pub type Labels = Grid<u8>;

impl<T: Voxel> Grid<T> {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "grid {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], spacing_mm: [f64; 3], value: T) -> Self {
        Self {
            shape,
            spacing_mm,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    /// Copies the sub-grid starting at `origin` with extents `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if origin[a] + size[a] > self.shape[a] {
                return Err(Error::Dimension(format!(
                    "crop {origin:?}+{size:?} exceeds grid {:?}",
                    self.shape
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(Self {
            shape: size,
            spacing_mm: self.spacing_mm,
            data,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
    endian: String,
}

/// Payload path paired with a `.v3d` header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn write_v3d<T: Voxel>(path: &Path, grid: &Grid<T>) -> Result<()> {
    let header = Header {
        shape: grid.shape,
        spacing_mm: grid.spacing_mm,
        dtype: T::DTYPE.into(),
        order: "C".into(),
        endian: "little".into(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut payload = Vec::with_capacity(grid.len() * T::BYTES);
    for &v in &grid.data {
        v.write_le(&mut payload);
    }
    let raw = payload_path(path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_v3d<T: Voxel>(path: &Path) -> Result<Grid<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::format("header", e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            "dtype",
            format!("expected {}, file has {}", T::DTYPE, header.dtype),
        ));
    }
    if header.order != "C" {
        return Err(Error::format(
            "order",
            format!("unsupported order {:?}", header.order),
        ));
    }
    if header.endian != "little" {
        return Err(Error::format(
            "endian",
            format!("unsupported endian {:?}", header.endian),
        ));
    }
    if header
        .spacing_mm
        .iter()
        .any(|&s| !(s > 0.0 && s.is_finite()))
    {
        return Err(Error::format(
            "spacing_mm",
            format!("must be positive, got {:?}", header.spacing_mm),
        ));
    }
    let n = header
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("shape", "voxel count overflows"))?;
    let raw = payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != n * T::BYTES {
        return Err(Error::format(
            "payload",
            format!(
                "shape {:?} needs {} bytes, payload has {}",
                header.shape,
                n * T::BYTES,
                bytes.len()
            ),
        ));
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(Grid {
        shape: header.shape,
        spacing_mm: header.spacing_mm,
        data,
    })
}
