//! Dataset and estimate files.
//!
//! Fields are `AMV1` files: the magic, four little-endian `u32`
//! (layers, channels, rows, cols) and row-major little-endian `f32` values.
//! Masks are `AMSK` files: the magic, three `u32` (layers, rows, cols) and
//! one byte per pixel, 1 when observed. A `manifest.json` maps roles to files.

use crate::error::{AmvError, Result};
use crate::grid::{GridShape, ImageStack, ObservationSet, PhysicsConstants, PressureGrid, Timestamp, CHANNELS};
use crate::synth::{SyntheticDataset, SyntheticSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

const FIELD_MAGIC: &[u8; 4] = b"AMV1";
const MASK_MAGIC: &[u8; 4] = b"AMSK";

/// A stack of `layers x channels` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub layers: usize,
    pub channels: usize,
    pub shape: GridShape,
    pub values: Vec<f64>,
}

impl Field {
    pub fn expect(self, layers: usize, channels: usize, shape: GridShape, what: &str) -> Result<Vec<f64>> {
        if self.layers != layers || self.channels != channels || self.shape != shape {
            return Err(AmvError::ShapeMismatch(format!(
                "{what}: expected {layers}x{channels}x{}x{}, found {}x{}x{}x{}",
                shape.rows, shape.cols, self.layers, self.channels, self.shape.rows, self.shape.cols
            )));
        }
        Ok(self.values)
    }
}

fn u32_at(bytes: &[u8], i: usize) -> usize {
    u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| AmvError::Format(format!("dimension {v} does not fit in u32")))
}

pub fn write_field(path: &Path, layers: usize, channels: usize, shape: GridShape, values: &[f64]) -> Result<()> {
    if values.len() != layers * channels * shape.len() {
        return Err(AmvError::ShapeMismatch(format!(
            "{} values for a {layers}x{channels}x{}x{} field",
            values.len(),
            shape.rows,
            shape.cols
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    for d in [layers, channels, shape.rows, shape.cols] {
        w.write_all(&dim(d)?.to_le_bytes())?;
    }
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = fs::read(path)?;
    let name = path.display();
    if bytes.len() < 20 || &bytes[..4] != FIELD_MAGIC {
        return Err(AmvError::Format(format!("{name}: not an AMV1 field file")));
    }
    let (layers, channels, rows, cols) = (u32_at(&bytes, 0), u32_at(&bytes, 1), u32_at(&bytes, 2), u32_at(&bytes, 3));
    let shape = GridShape::new(rows, cols)?;
    let n = layers * channels * shape.len();
    if bytes.len() != 20 + 4 * n {
        return Err(AmvError::Format(format!("{name}: expected {n} values, file holds {} bytes", bytes.len())));
    }
    let values = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Field { layers, channels, shape, values })
}

pub fn write_mask(path: &Path, layers: usize, shape: GridShape, mask: &[bool]) -> Result<()> {
    if mask.len() != layers * shape.len() {
        return Err(AmvError::ShapeMismatch(format!("{} mask entries for {layers} layers", mask.len())));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MASK_MAGIC)?;
    for d in [layers, shape.rows, shape.cols] {
        w.write_all(&dim(d)?.to_le_bytes())?;
    }
    w.write_all(&mask.iter().map(|b| u8::from(*b)).collect::<Vec<u8>>())?;
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(usize, GridShape, Vec<bool>)> {
    let bytes = fs::read(path)?;
    let name = path.display();
    if bytes.len() < 16 || &bytes[..4] != MASK_MAGIC {
        return Err(AmvError::Format(format!("{name}: not an AMSK mask file")));
    }
    let (layers, rows, cols) = (u32_at(&bytes, 0), u32_at(&bytes, 1), u32_at(&bytes, 2));
    let shape = GridShape::new(rows, cols)?;
    let n = layers * shape.len();
    if bytes.len() != 16 + n {
        return Err(AmvError::Format(format!("{name}: expected {n} mask bytes")));
    }
    let mut mask = Vec::with_capacity(n);
    for b in &bytes[16..] {
        mask.push(match b {
            0 => false,
            1 => true,
            other => return Err(AmvError::Format(format!("{name}: mask byte {other} is neither 0 nor 1"))),
        });
    }
    Ok((layers, shape, mask))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AmvError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AmvError::Format(format!("{}: {e}", path.display())))
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rows: usize,
    pub cols: usize,
    pub layers: usize,
    pub sigma: f64,
    /// Role (`y0`, `y1`, `mask0`, `mask1`, `truth_d`, `truth_w`, `truth_x0`,
    /// `truth_x1`, `levels`, `gamma`) to file name.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
}

impl Manifest {
    pub fn shape(&self) -> Result<GridShape> {
        GridShape::new(self.rows, self.cols)
    }

    fn file(&self, dir: &Path, role: &str) -> Result<std::path::PathBuf> {
        self.files
            .get(role)
            .map(|f| dir.join(f))
            .ok_or_else(|| AmvError::Format(format!("manifest has no '{role}' entry")))
    }

    pub fn has(&self, role: &str) -> bool {
        self.files.contains_key(role)
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Writes every part of a synthetic dataset into `dir`.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let shape = ds.truth.shape;
    let k = ds.truth.layers;
    let mut files = BTreeMap::new();
    let mut put = |role: &str, name: &str| {
        files.insert(role.to_string(), name.to_string());
        dir.join(name)
    };
    write_field(&put("y0", "y0.amv"), k, CHANNELS, shape, &ds.obs.y0)?;
    write_field(&put("y1", "y1.amv"), k, CHANNELS, shape, &ds.obs.y1)?;
    write_mask(&put("mask0", "mask0.amsk"), k, shape, &ds.obs.mask0)?;
    write_mask(&put("mask1", "mask1.amsk"), k, shape, &ds.obs.mask1)?;
    write_field(&put("truth_d", "truth_d.amv"), k, 2, shape, &ds.truth.d)?;
    write_field(&put("truth_w", "truth_w.amv"), k + 1, 1, shape, &ds.truth.omega)?;
    write_field(&put("truth_x0", "truth_x0.amv"), k, CHANNELS, shape, &ds.x_t0.values)?;
    write_field(&put("truth_x1", "truth_x1.amv"), k, CHANNELS, shape, &ds.x_t1.values)?;
    write_json(&put("levels", "levels.json"), &ds.grid.levels())?;
    write_json(&put("gamma", "gamma.json"), &ds.gamma)?;
    let manifest = Manifest {
        rows: shape.rows,
        cols: shape.cols,
        layers: k,
        sigma: ds.obs.sigma,
        files,
        spec: Some(ds.spec.clone()),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Observations and physical constants of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub manifest: Manifest,
    pub grid: PressureGrid,
    pub gamma: PhysicsConstants,
    pub obs: ObservationSet,
}

pub fn read_dataset(dir: &Path) -> Result<DatasetFiles> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let shape = manifest.shape()?;
    let k = manifest.layers;
    let levels: Vec<f64> = read_json(&manifest.file(dir, "levels")?)?;
    let grid = PressureGrid::new(&levels)?;
    if grid.layers() != k {
        return Err(AmvError::ShapeMismatch(format!("{} pressure levels for {k} layers", levels.len())));
    }
    let gamma: PhysicsConstants = read_json(&manifest.file(dir, "gamma")?)?;
    gamma.check_layers(k)?;
    let y0 = read_field(&manifest.file(dir, "y0")?)?.expect(k, CHANNELS, shape, "y0")?;
    let y1 = read_field(&manifest.file(dir, "y1")?)?.expect(k, CHANNELS, shape, "y1")?;
    let mask = |role: &str| -> Result<Vec<bool>> {
        let (layers, s, m) = read_mask(&manifest.file(dir, role)?)?;
        if layers != k || s != shape {
            return Err(AmvError::ShapeMismatch(format!("{role} does not match the manifest")));
        }
        Ok(m)
    };
    let obs = ObservationSet::new(shape, k, y0, y1, mask("mask0")?, mask("mask1")?, manifest.sigma)?;
    Ok(DatasetFiles { manifest, grid, gamma, obs })
}

/// `(d, omega)` ground truth of a dataset directory.
pub fn read_truth(dir: &Path, manifest: &Manifest) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = manifest.shape()?;
    let k = manifest.layers;
    let d = read_field(&manifest.file(dir, "truth_d")?)?.expect(k, 2, shape, "truth_d")?;
    let w = read_field(&manifest.file(dir, "truth_w")?)?.expect(k + 1, 1, shape, "truth_w")?;
    Ok((d, w))
}

/// Noise-free image pair of a dataset directory.
pub fn read_truth_images(dir: &Path, manifest: &Manifest) -> Result<(ImageStack, ImageStack)> {
    let shape = manifest.shape()?;
    let k = manifest.layers;
    let x0 = read_field(&manifest.file(dir, "truth_x0")?)?.expect(k, CHANNELS, shape, "truth_x0")?;
    let x1 = read_field(&manifest.file(dir, "truth_x1")?)?.expect(k, CHANNELS, shape, "truth_x1")?;
    Ok((
        ImageStack::from_values(shape, k, Timestamp::T0, x0)?,
        ImageStack::from_values(shape, k, Timestamp::T1, x1)?,
    ))
}

/// Metadata written next to an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateInfo {
    pub variant: String,
    pub rows: usize,
    pub cols: usize,
    pub layers: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub runtime: f64,
    pub final_objective: f64,
}

pub const ESTIMATE_INFO: &str = "estimate.json";

/// Writes `d.amv`, `w.amv`, `x.amv` (the `t1` image) and `estimate.json`.
pub fn write_estimate(
    dir: &Path,
    info: &EstimateInfo,
    d: &[f64],
    omega: &[f64],
    x_t1: &[f64],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let shape = GridShape::new(info.rows, info.cols)?;
    write_field(&dir.join("d.amv"), info.layers, 2, shape, d)?;
    write_field(&dir.join("w.amv"), info.layers + 1, 1, shape, omega)?;
    write_field(&dir.join("x.amv"), info.layers, CHANNELS, shape, x_t1)?;
    write_json(&dir.join(ESTIMATE_INFO), info)
}

/// `(info, d, omega)` of an estimate directory.
pub fn read_estimate(dir: &Path) -> Result<(EstimateInfo, Vec<f64>, Vec<f64>)> {
    let info: EstimateInfo = read_json(&dir.join(ESTIMATE_INFO))?;
    let shape = GridShape::new(info.rows, info.cols)?;
    let d = read_field(&dir.join("d.amv"))?.expect(info.layers, 2, shape, "d")?;
    let w = read_field(&dir.join("w.amv"))?.expect(info.layers + 1, 1, shape, "w")?;
    Ok((info, d, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, MaskStyle};

    #[test]
    fn field_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.amv");
        let shape = GridShape::new(4, 8).unwrap();
        let values: Vec<f64> = (0..2 * 3 * 32).map(|i| i as f64 * 0.25 - 7.0).collect();
        write_field(&path, 2, 3, shape, &values).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"AMV1");
        assert_eq!(&bytes[4..20], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0, 8, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &(-7.0f32).to_le_bytes());
        let f = read_field(&path).unwrap();
        assert_eq!((f.layers, f.channels, f.shape), (2, 3, shape));
        assert_eq!(f.values, values);
    }

    #[test]
    fn nan_sentinel_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.amv");
        let shape = GridShape::square(2).unwrap();
        write_field(&path, 1, 1, shape, &[1.0, f64::NAN, 3.0, 4.0]).unwrap();
        assert!(read_field(&path).unwrap().values[1].is_nan());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amsk");
        let shape = GridShape::square(4).unwrap();
        let mask: Vec<bool> = (0..32).map(|i| i % 3 != 0).collect();
        write_mask(&path, 2, shape, &mask).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"AMSK");
        assert_eq!(bytes.len(), 16 + 32);
        assert_eq!(read_mask(&path).unwrap(), (2, shape, mask));
    }

    #[test]
    fn corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"XXXX0000000000000000").unwrap();
        assert!(matches!(read_field(&path), Err(AmvError::Format(_))));
        fs::write(&path, b"AMV1\x01\0\0\0\x01\0\0\0\x02\0\0\0\x02\0\0\0\0\0").unwrap();
        assert!(matches!(read_field(&path), Err(AmvError::Format(_))));
        fs::write(&path, b"AMSK\x01\0\0\0\x01\0\0\0\x01\0\0\0\x07").unwrap();
        assert!(matches!(read_mask(&path), Err(AmvError::Format(_))));
        assert!(matches!(read_field(&dir.path().join("missing")), Err(AmvError::Io(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let spec = SyntheticSpec {
            rows: 16,
            cols: 16,
            sigma: 0.05,
            mask: MaskStyle::Random { coverage: 0.6 },
            ..SyntheticSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.grid, ds.grid);
        assert_eq!(back.gamma, ds.gamma);
        assert_eq!(back.obs.mask0, ds.obs.mask0);
        assert_eq!(back.manifest.spec.as_ref(), Some(&spec));
        for (a, b) in back.obs.y1.iter().zip(&ds.obs.y1) {
            assert!((a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let (d, w) = read_truth(dir.path(), &back.manifest).unwrap();
        assert!(d.iter().zip(&ds.truth.d).all(|(a, b)| (a - b).abs() < 1e-5 * b.abs().max(1.0)));
        assert_eq!(w.len(), 5 * 256);
    }
}
