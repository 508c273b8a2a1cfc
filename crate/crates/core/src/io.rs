//! On-disk formats: scene packs, depth grids, checkpoints and debug dumps.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParamStore, Tensor};
use crate::contrast::ContrastBatch;
use crate::error::{Error, Result};
use crate::frame::{CameraView, DepthMap, Image};
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics};
use crate::model::{Model, ModelConfig};
use crate::scene::{ProceduralScene, ScenePack};

pub const DEPTH_MAGIC: &[u8; 8] = b"CNRFDPTH";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CNRFCKPT";
pub const CHECKPOINT_SCHEMA: u32 = 1;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * depth.data().len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    for &d in depth.data() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(format_err(path, "missing depth header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * w * h {
        return Err(format_err(
            path,
            format!("{} data bytes for a {w}x{h} grid", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    DepthMap::new(w, h, data)
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write(path, &encode_depth(depth))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&read(path)?, path)
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(img.width() as usize, img.height() as usize, data)
}

/// Camera as stored in `cam_XXXX.json`: `R` and `t` are camera-to-world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]))
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let t = c.extrinsics.center();
        Self {
            k: rows(c.intrinsics.k()),
            r: rows(c.extrinsics.rotation()),
            t: [t.x, t.y, t.z],
            width: c.width(),
            height: c.height(),
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        let m = |a: &[[f64; 3]; 3]| Matrix3::from_fn(|i, j| a[i][j]);
        Ok(Camera::new(
            CameraIntrinsics::new(m(&self.k), self.width, self.height)?,
            CameraExtrinsics::new(m(&self.r), Vector3::from(self.t))?,
        ))
    }
}

fn view_path(dir: &Path, prefix: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_{i:04}.{ext}"))
}

/// Writes `scene.json` and per-view `cam_XXXX.json`, `rgb_XXXX.png` and
/// `depth_XXXX.bin` (when the view has depth).
pub fn save_pack(dir: &Path, pack: &ScenePack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(
        &dir.join("scene.json"),
        serde_json::to_string_pretty(&pack.scene)?.as_bytes(),
    )?;
    for (i, v) in pack.views.iter().enumerate() {
        let cam = serde_json::to_string_pretty(&CameraRecord::from(&v.camera))?;
        write(&view_path(dir, "cam", i, "json"), cam.as_bytes())?;
        save_png(&view_path(dir, "rgb", i, "png"), &v.image)?;
        if let Some(d) = &v.depth {
            save_depth(&view_path(dir, "depth", i, "bin"), d)?;
        }
    }
    Ok(())
}

/// Reads views `0, 1, ...` until the first missing `cam_XXXX.json`.
pub fn load_pack(dir: &Path) -> Result<ScenePack> {
    let scene_path = dir.join("scene.json");
    let scene: ProceduralScene = serde_json::from_slice(&read(&scene_path)?)?;
    let mut views = Vec::new();
    loop {
        let cam_path = view_path(dir, "cam", views.len(), "json");
        if !cam_path.exists() {
            break;
        }
        let rec: CameraRecord = serde_json::from_slice(&read(&cam_path)?)?;
        let camera = rec.to_camera()?;
        let image = load_png(&view_path(dir, "rgb", views.len(), "png"))?;
        if (image.width(), image.height()) != (camera.width(), camera.height()) {
            return Err(format_err(&cam_path, "image size differs from camera size"));
        }
        let depth_path = view_path(dir, "depth", views.len(), "bin");
        let depth = if depth_path.exists() {
            Some(load_depth(&depth_path)?)
        } else {
            None
        };
        views.push(CameraView { camera, image, depth });
    }
    if views.is_empty() {
        return Err(format_err(dir, "no cam_0000.json"));
    }
    Ok(ScenePack { scene, views })
}

/// Scene directories `scene_XXXX` under `root`, in name order.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_packs(root: &Path) -> Result<Vec<ScenePack>> {
    if root.join("scene.json").is_file() {
        return Ok(vec![load_pack(root)?]);
    }
    let dirs = scene_dirs(root)?;
    if dirs.is_empty() {
        return Err(format_err(root, "no scene directories"));
    }
    dirs.iter().map(|d| load_pack(d)).collect()
}

#[derive(Serialize)]
struct PairRecord {
    i: usize,
    j: usize,
    n_drawn: usize,
    pixels: Vec<[f64; 2]>,
    positives: Vec<[f64; 2]>,
    negatives: Vec<Vec<[f64; 2]>>,
    weights: Vec<Vec<f64>>,
}

/// Dumps a contrast batch for inspection as `pairs_XXXX.json` in `dir`.
pub fn dump_pairs(dir: &Path, index: usize, batch: &ContrastBatch) -> Result<PathBuf> {
    let px = |v: &[crate::frame::Pixel]| v.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>();
    let records: Vec<PairRecord> = batch
        .pairs
        .iter()
        .map(|p| PairRecord {
            i: p.i,
            j: p.j,
            n_drawn: p.n_drawn,
            pixels: px(&p.pixels),
            positives: px(&p.positives),
            negatives: p.negatives.iter().map(|n| px(n)).collect(),
            weights: p.weights.clone(),
        })
        .collect();
    let path = view_path(dir, "pairs", index, "json");
    write(&path, serde_json::to_string(&records)?.as_bytes())?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON header of a checkpoint. `train` holds the training config verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema: u32,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub train: serde_json::Value,
    pub iterations: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Layout: magic, u32 schema, u64 header length, JSON header, then every
/// tensor's values as little-endian `f64` in header order.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: AdamConfig,
    train: serde_json::Value,
    iterations: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        schema: CHECKPOINT_SCHEMA,
        model: model.config.clone(),
        adam,
        train,
        iterations,
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params.n_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = read(path)?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint"));
    }
    let schema = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if schema != CHECKPOINT_SCHEMA {
        return Err(format_err(
            path,
            format!("schema {schema}, expected {CHECKPOINT_SCHEMA}"),
        ));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + n)
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let mut body = &bytes[20 + n..];
    let mut params = ParamStore::new();
    for e in &header.tensors {
        let len = 8 * e.rows * e.cols;
        if body.len() < len {
            return Err(format_err(path, format!("truncated tensor `{}`", e.name)));
        }
        let data = body[..len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)?);
        body = &body[len..];
    }
    if !body.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", body.len())));
    }
    let model = Model::with_params(header.model.clone(), params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip_keeps_infinity() {
        let d = DepthMap::new(3, 2, vec![1.5, f64::INFINITY, 2.25, 0.125, 7.0, 3.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        save_depth(&p, &d).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], DEPTH_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(load_depth(&p).unwrap(), d);
        assert!(decode_depth(&bytes[..20], &p).is_err());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        fs::write(&p, b"CNRFCKPT\x09\0\0\0").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
