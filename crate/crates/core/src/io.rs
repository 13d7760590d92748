//! On-disk formats.
//!
//! Every array is stored as a JSON metadata sidecar (`<stem>.json`) next to a
//! raw payload (`<stem>.raw`) of little-endian `f64` values. Multi-component
//! arrays are component-major; within a component the first dimension varies
//! fastest. Geometries are plain text, one pose per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{make_pose, AcquisitionGeometry, CoefficientVolume, DetectorSpec, ScalarVolume, VolumeGrid};
use crate::models::MeasurementSet;
use crate::projector::Sinogram;
use crate::sphharm::{compute_all_weights, sphere_grid, PoseWeights};

pub const FORMAT_NAME: &str = "axdt-raw";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";
pub const ORDER: &str = "x-fastest";
pub const COEFFICIENT_ORDERING: &str = "(k,m) lexicographic, even k, m=-k..k, coefficient-major";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub dims: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 3]>,
    pub dtype: String,
    pub order: String,
    pub components: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient_ordering: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub attributes: Map<String, Value>,
}

impl ContainerMeta {
    pub fn new(kind: &str, dims: [usize; 3], components: Vec<String>) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            kind: kind.into(),
            dims,
            spacing: None,
            origin: None,
            dtype: DTYPE.into(),
            order: ORDER.into(),
            components,
            coefficient_ordering: None,
            max_degree: None,
            attributes: Map::new(),
        }
    }

    fn for_grid(kind: &str, grid: &VolumeGrid, components: Vec<String>) -> Self {
        let mut m = Self::new(kind, grid.dims, components);
        m.spacing = Some(grid.spacing);
        m.origin = Some(grid.origin);
        m
    }

    pub fn value_count(&self) -> usize {
        self.dims.iter().product::<usize>() * self.components.len().max(1)
    }

    fn grid(&self, path: &Path) -> Result<VolumeGrid> {
        let spacing = self.spacing.ok_or_else(|| Error::format(path, "missing spacing"))?;
        let origin = self.origin.ok_or_else(|| Error::format(path, "missing origin"))?;
        VolumeGrid::new(self.dims, spacing, origin)
    }

    fn attr_u64(&self, key: &str, path: &Path) -> Result<u64> {
        self.attributes
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::format(path, format!("missing integer attribute `{key}`")))
    }
}

/// `(metadata, payload)` paths for a stem; any extension on `stem` is replaced.
pub fn container_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

pub fn write_container(stem: &Path, meta: &ContainerMeta, values: &[f64]) -> Result<()> {
    if values.len() != meta.value_count() {
        return Err(Error::shape(format!(
            "container `{}` declares {} values, got {}",
            meta.kind,
            meta.value_count(),
            values.len()
        )));
    }
    let (json, raw) = container_paths(stem);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_container(stem: &Path) -> Result<(ContainerMeta, Vec<f64>)> {
    let (json, raw) = container_paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: ContainerMeta = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    if meta.format != FORMAT_NAME || meta.dtype != DTYPE || meta.order != ORDER {
        return Err(Error::format(&json, "unsupported format, dtype or order"));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != meta.value_count() * 8 {
        return Err(Error::format(
            &raw,
            format!("expected {} bytes, found {}", meta.value_count() * 8, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((meta, values))
}

fn expect_kind(meta: &ContainerMeta, kind: &str, stem: &Path) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::format(
            stem,
            format!("expected a `{kind}` container, found `{}`", meta.kind),
        ));
    }
    Ok(())
}

pub fn write_scalar_volume(stem: &Path, vol: &ScalarVolume) -> Result<()> {
    let meta = ContainerMeta::for_grid("scalar_volume", &vol.grid, vec!["value".into()]);
    write_container(stem, &meta, &vol.values)
}

pub fn read_scalar_volume(stem: &Path) -> Result<ScalarVolume> {
    let (meta, values) = read_container(stem)?;
    expect_kind(&meta, "scalar_volume", stem)?;
    ScalarVolume::from_values(meta.grid(stem)?, values)
}

pub fn write_coefficient_volume(stem: &Path, eta: &CoefficientVolume) -> Result<()> {
    let components = eta.terms().into_iter().map(|(k, m)| format!("Y{k},{m}")).collect();
    let mut meta = ContainerMeta::for_grid("coefficient_volume", &eta.grid, components);
    meta.coefficient_ordering = Some(COEFFICIENT_ORDERING.into());
    meta.max_degree = Some(eta.max_degree);
    write_container(stem, &meta, &eta.values)
}

pub fn read_coefficient_volume(stem: &Path) -> Result<CoefficientVolume> {
    let (meta, values) = read_container(stem)?;
    expect_kind(&meta, "coefficient_volume", stem)?;
    let degree = meta
        .max_degree
        .ok_or_else(|| Error::format(stem, "missing max_degree"))?;
    CoefficientVolume::from_values(meta.grid(stem)?, degree, values)
}

pub fn write_sinogram(stem: &Path, sino: &Sinogram) -> Result<()> {
    let meta = ContainerMeta::new("sinogram", [sino.cols, sino.rows, sino.n_poses], vec!["value".into()]);
    write_container(stem, &meta, &sino.values)
}

pub fn read_sinogram(stem: &Path) -> Result<Sinogram> {
    let (meta, values) = read_container(stem)?;
    expect_kind(&meta, "sinogram", stem)?;
    let [cols, rows, n_poses] = meta.dims;
    Ok(Sinogram {
        n_poses,
        rows,
        cols,
        values,
    })
}

pub const MEASUREMENT_COMPONENTS: [&str; 4] = ["a_s", "b_s", "a_r", "b_r"];

pub fn write_measurements(stem: &Path, data: &MeasurementSet) -> Result<()> {
    let mut meta = ContainerMeta::new(
        "measurements",
        [data.cols, data.rows, data.n_poses],
        MEASUREMENT_COMPONENTS.iter().map(|s| s.to_string()).collect(),
    );
    meta.attributes
        .insert("phase_steps".into(), Value::from(data.phase_steps as u64));
    meta.attributes
        .insert("clamped".into(), Value::from(data.clamped as u64));
    let values = [&data.a_s, &data.b_s, &data.a_r, &data.b_r]
        .iter()
        .flat_map(|c| c.iter().copied())
        .collect::<Vec<_>>();
    write_container(stem, &meta, &values)
}

pub fn read_measurements(stem: &Path) -> Result<MeasurementSet> {
    let (meta, values) = read_container(stem)?;
    expect_kind(&meta, "measurements", stem)?;
    if meta.components.len() != 4 {
        return Err(Error::format(stem, "measurements need four components"));
    }
    let [cols, rows, n_poses] = meta.dims;
    let n = cols * rows * n_poses;
    let part = |i: usize| values[i * n..(i + 1) * n].to_vec();
    let phase_steps = meta.attr_u64("phase_steps", stem)? as usize;
    let mut data = MeasurementSet::new(n_poses, rows, cols, phase_steps, part(0), part(1), part(2), part(3))?;
    data.clamped += meta.attr_u64("clamped", stem).unwrap_or(0) as usize;
    Ok(data)
}

pub fn write_pose_weights(stem: &Path, weights: &PoseWeights, key: &str) -> Result<()> {
    let mut meta = ContainerMeta::new(
        "pose_weights",
        [weights.n_coefficients, weights.n_poses(), 1],
        vec!["w".into()],
    );
    meta.coefficient_ordering = Some(COEFFICIENT_ORDERING.into());
    meta.max_degree = Some(weights.max_degree);
    meta.attributes.insert("geometry_hash".into(), Value::from(key));
    write_container(stem, &meta, &weights.values)
}

pub fn read_pose_weights(stem: &Path) -> Result<(PoseWeights, String)> {
    let (meta, values) = read_container(stem)?;
    expect_kind(&meta, "pose_weights", stem)?;
    let max_degree = meta
        .max_degree
        .ok_or_else(|| Error::format(stem, "missing max_degree"))?;
    let key = meta
        .attributes
        .get("geometry_hash")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((
        PoseWeights {
            max_degree,
            n_coefficients: meta.dims[0],
            values,
        },
        key,
    ))
}

/// Text form of a geometry; parsing it back reproduces every pose exactly.
pub fn geometry_to_string(geom: &AcquisitionGeometry) -> String {
    let g = &geom.grid;
    let d = geom.detector();
    let mut s = String::from("# axdt geometry v1: Euler angles are intrinsic Z-X'-Z'' in radians\n");
    let _ = writeln!(
        s,
        "grid {} {} {} {} {} {} {} {} {}",
        g.dims[0],
        g.dims[1],
        g.dims[2],
        g.spacing[0],
        g.spacing[1],
        g.spacing[2],
        g.origin[0],
        g.origin[1],
        g.origin[2]
    );
    let _ = writeln!(s, "detector {} {} {}", d.rows, d.cols, d.pitch);
    for p in &geom.poses {
        let _ = writeln!(s, "pose {} {} {}", p.euler[0], p.euler[1], p.euler[2]);
    }
    s
}

pub fn parse_geometry(text: &str, path: &Path) -> Result<AcquisitionGeometry> {
    let mut grid = None;
    let mut detector = None;
    let mut angles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", lineno + 1));
        let mut fields = line.split_whitespace();
        let key = fields.next().unwrap_or_default();
        let nums: Vec<&str> = fields.collect();
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad("expected a number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("expected an integer"));
        match key {
            "grid" if nums.len() == 9 => {
                grid = Some(VolumeGrid::new(
                    [int(nums[0])?, int(nums[1])?, int(nums[2])?],
                    [float(nums[3])?, float(nums[4])?, float(nums[5])?],
                    [float(nums[6])?, float(nums[7])?, float(nums[8])?],
                )?);
            }
            "detector" if nums.len() == 3 => {
                detector = Some(DetectorSpec::new(int(nums[0])?, int(nums[1])?, float(nums[2])?)?);
            }
            "pose" if nums.len() == 3 => {
                angles.push([float(nums[0])?, float(nums[1])?, float(nums[2])?]);
            }
            _ => return Err(bad("unrecognised record")),
        }
    }
    let grid = grid.ok_or_else(|| Error::format(path, "missing grid record"))?;
    let detector = detector.ok_or_else(|| Error::format(path, "missing detector record"))?;
    let poses = angles
        .into_iter()
        .map(|[a, b, c]| make_pose(a, b, c, detector))
        .collect::<Result<Vec<_>>>()?;
    AcquisitionGeometry::new(poses, grid)
}

pub fn write_geometry(path: &Path, geom: &AcquisitionGeometry) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, geometry_to_string(geom)).map_err(|e| Error::io(path, e))
}

pub fn read_geometry(path: &Path) -> Result<AcquisitionGeometry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_geometry(&text, path)
}

/// Cache key for the weights of a geometry at a quadrature level and degree.
pub fn weights_key(geom: &AcquisitionGeometry, level: usize, max_degree: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(geometry_to_string(geom).as_bytes());
    hasher.update(format!("level={level};degree={max_degree}").as_bytes());
    hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Loads cached weights from `cache_dir` or computes and stores them.
pub fn load_or_compute_weights(
    cache_dir: &Path,
    geom: &AcquisitionGeometry,
    level: usize,
    max_degree: usize,
) -> Result<PoseWeights> {
    let key = weights_key(geom, level, max_degree);
    let stem = cache_dir.join(format!("weights-{key}"));
    if container_paths(&stem).0.exists() {
        let (w, stored) = read_pose_weights(&stem)?;
        if stored == key && w.n_poses() == geom.n_poses() && w.max_degree == max_degree {
            return Ok(w);
        }
        log::warn!("stale weight cache at {}, recomputing", stem.display());
    }
    let w = compute_all_weights(geom, &sphere_grid(level), max_degree)?;
    write_pose_weights(&stem, &w, &key)?;
    Ok(w)
}
