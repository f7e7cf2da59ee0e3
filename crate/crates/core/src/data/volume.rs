use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};

/// Scalar image on a `D×H×W` grid (x fastest) with spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

/// Integer labels (0 background, 1 organ, 2 tumor) on a `D×H×W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<u16>,
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    let n: usize = dims.iter().product();
    if dims.contains(&0) {
        return Err(Error::Data(format!("dims {dims:?} must be positive")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Data(format!("spacing {spacing:?} must be positive")));
    }
    if n != len {
        return Err(Error::Data(format!(
            "dims {dims:?} hold {n} voxels but {len} values were given"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Self { dims, spacing, data })
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u16>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Self { dims, spacing, data })
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    F32,
    U16,
}

impl VoxelType {
    fn size(self) -> usize {
        match self {
            VoxelType::F32 => 4,
            VoxelType::U16 => 2,
        }
    }
}

pub const ORDER_X_FASTEST: &str = "x-fastest";

/// JSON sidecar describing a raw little-endian payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: VoxelType,
    pub order: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_raw(path: &Path, sidecar: &Sidecar, payload: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, payload).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(sidecar).map_err(json_err(&side))?;
    fs::write(&side, json).map_err(io_err(&side))
}

fn read_raw(path: &Path, want: VoxelType) -> Result<(Sidecar, Vec<u8>)> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(io_err(&side))?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(json_err(&side))?;
    if sidecar.dtype != want {
        return Err(Error::Data(format!(
            "{}: dtype {:?}, expected {want:?}",
            path.display(),
            sidecar.dtype
        )));
    }
    if sidecar.order != ORDER_X_FASTEST {
        return Err(Error::Data(format!(
            "{}: unsupported voxel order {:?}",
            path.display(),
            sidecar.order
        )));
    }
    let payload = fs::read(path).map_err(io_err(path))?;
    let n: usize = sidecar.dims.iter().product();
    let expect = n * want.size();
    if payload.len() != expect {
        return Err(Error::Data(format!(
            "{}: sidecar dims {:?} need {n} voxels ({expect} bytes), payload has {} bytes ({} voxels)",
            path.display(),
            sidecar.dims,
            payload.len(),
            payload.len() / want.size()
        )));
    }
    Ok((sidecar, payload))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let payload = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    let sidecar = Sidecar {
        dims: v.dims,
        spacing: v.spacing,
        dtype: VoxelType::F32,
        order: ORDER_X_FASTEST.into(),
    };
    write_raw(path, &sidecar, payload)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (s, payload) = read_raw(path, VoxelType::F32)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(s.dims, s.spacing, data)
}

pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<()> {
    let payload = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    let sidecar = Sidecar {
        dims: v.dims,
        spacing: v.spacing,
        dtype: VoxelType::U16,
        order: ORDER_X_FASTEST.into(),
    };
    write_raw(path, &sidecar, payload)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let (s, payload) = read_raw(path, VoxelType::U16)?;
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelVolume::new(s.dims, s.spacing, data)
}
