//! On-disk arrays: a JSON manifest `<stem>.json` next to a raw little-endian
//! f32 payload `<stem>.f32`, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use lensless_core::SystemGeometry;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantic {
    PsfStack,
    SensorImage,
    Volume,
    Heightmap,
}

impl Semantic {
    fn ndim(self) -> usize {
        match self {
            Semantic::PsfStack | Semantic::Volume => 3,
            Semantic::SensorImage | Semantic::Heightmap => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
    pub endianness: String,
    pub semantic: Semantic,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_planes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<SystemGeometry>,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    /// Free-form parameters of the command that produced the array.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayContainer {
    pub manifest: Manifest,
    pub data: ArrayD<f32>,
}

/// Manifest and payload paths for `path`, which may name either file or the bare stem.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".f32"))
}

impl ArrayContainer {
    pub fn new(semantic: Semantic, units: &str, data: ArrayD<f32>) -> Self {
        Self {
            manifest: Manifest {
                dtype: "f32".into(),
                shape: data.shape().to_vec(),
                order: "row-major".into(),
                endianness: "little".into(),
                semantic,
                units: units.into(),
                depth_planes: None,
                geometry: None,
                payload: String::new(),
                params: None,
            },
            data,
        }
    }

    /// Narrows an f64 array to f32 storage.
    pub fn from_f64<D: ndarray::Dimension>(semantic: Semantic, units: &str, a: &ndarray::Array<f64, D>) -> Self {
        Self::new(semantic, units, a.mapv(|v| v as f32).into_dyn())
    }

    pub fn with_depth_planes(mut self, planes: Vec<f64>) -> Self {
        self.manifest.depth_planes = Some(planes);
        self
    }

    pub fn with_geometry(mut self, geometry: SystemGeometry) -> Self {
        self.manifest.geometry = Some(geometry);
        self
    }

    pub fn with_params(mut self, params: serde_json::Value) -> Self {
        self.manifest.params = Some(params);
        self
    }

    pub fn to_f64(&self) -> ArrayD<f64> {
        self.data.mapv(f64::from)
    }

    pub fn validate(&self) -> CliResult<()> {
        let m = &self.manifest;
        let bad = |msg: String| Err(CliError::validation(format!("invalid container: {msg}")));
        if m.dtype != "f32" || m.order != "row-major" || m.endianness != "little" {
            return bad(format!("unsupported layout {}/{}/{}", m.dtype, m.order, m.endianness));
        }
        if m.shape != self.data.shape() {
            return bad(format!("manifest shape {:?} vs data {:?}", m.shape, self.data.shape()));
        }
        if m.shape.len() != m.semantic.ndim() {
            return bad(format!("{:?} must be {}-D, got shape {:?}", m.semantic, m.semantic.ndim(), m.shape));
        }
        if m.semantic == Semantic::PsfStack {
            match &m.depth_planes {
                Some(p) if p.len() == m.shape[0] => {}
                Some(p) => return bad(format!("{} depth planes for {} slices", p.len(), m.shape[0])),
                None => return bad("psf_stack requires depth_planes".into()),
            }
        }
        Ok(())
    }

    /// Writes manifest and payload; returns the manifest path.
    pub fn write(&self, path: &Path) -> CliResult<PathBuf> {
        self.validate()?;
        let (json, raw) = container_paths(path);
        if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let mut manifest = self.manifest.clone();
        manifest.payload = raw.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut bytes = Vec::with_capacity(4 * self.data.len());
        for v in self.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw, bytes).map_err(|e| CliError::io(&raw, e))?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::io(&json, e))?;
        fs::write(&json, text + "\n").map_err(|e| CliError::io(&json, e))?;
        Ok(json)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let (json, _) = container_paths(path);
        let text = fs::read_to_string(&json).map_err(|e| CliError::io(&json, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", json.display())))?;
        let raw = json.parent().unwrap_or(Path::new("")).join(&manifest.payload);
        let bytes = fs::read(&raw).map_err(|e| CliError::io(&raw, e))?;
        let count: usize = manifest.shape.iter().product();
        if bytes.len() != 4 * count {
            return Err(CliError::validation(format!(
                "{}: payload has {} bytes, shape {:?} needs {}",
                raw.display(),
                bytes.len(),
                manifest.shape,
                4 * count
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let data = ArrayD::from_shape_vec(IxDyn(&manifest.shape), values)
            .map_err(|e| CliError::validation(format!("{}: {e}", json.display())))?;
        let out = Self { manifest, data };
        out.validate()?;
        Ok(out)
    }

    /// Reads a container and checks its semantic.
    pub fn read_as(path: &Path, semantic: Semantic) -> CliResult<Self> {
        let c = Self::read(path)?;
        if c.manifest.semantic != semantic {
            return Err(CliError::validation(format!(
                "{}: expected {semantic:?}, found {:?}",
                path.display(),
                c.manifest.semantic
            )));
        }
        Ok(c)
    }
}
