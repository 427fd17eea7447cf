//! Scene documents, ASCII PLY import and model checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor2;

/// On-disk scene document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_ids: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_ids: Option<Vec<i64>>,
}

/// A point cloud with optional ground truth. Labels are per point;
/// `-1` marks background instances and unlabeled classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub instance_ids: Option<Vec<i64>>,
    pub class_ids: Option<Vec<i64>>,
}

impl LabeledScene {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Ground-truth labels, or an error if the scene is unlabeled.
    pub fn labels(&self) -> Result<(&[i64], &[i64])> {
        match (&self.instance_ids, &self.class_ids) {
            (Some(i), Some(c)) => Ok((i, c)),
            _ => Err(Error::InvalidInput(format!(
                "scene {:?} has no ground truth labels",
                self.cloud.id
            ))),
        }
    }

    /// Non-negative instance ids in ascending order.
    pub fn instances(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self
            .instance_ids
            .iter()
            .flatten()
            .copied()
            .filter(|&i| i >= 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

impl SceneFile {
    pub fn into_scene(self, id: impl Into<String>) -> Result<LabeledScene> {
        let n = self.points.len();
        for (name, v) in [
            ("instance_ids", &self.instance_ids),
            ("class_ids", &self.class_ids),
        ] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::InvalidInput(format!(
                        "{name} has {} entries for {n} points",
                        v.len()
                    )));
                }
            }
        }
        if let Some(c) = &self.colors {
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput("colors must lie in [0, 1]".into()));
            }
        }
        let cloud = PointCloud::with_colors(self.points, self.colors)?.with_id(id);
        Ok(LabeledScene {
            cloud,
            instance_ids: self.instance_ids,
            class_ids: self.class_ids,
        })
    }

    pub fn from_scene(scene: &LabeledScene) -> Self {
        Self {
            points: scene.cloud.positions().to_vec(),
            colors: scene.cloud.colors().map(|c| c.to_vec()),
            instance_ids: scene.instance_ids.clone(),
            class_ids: scene.class_ids.clone(),
        }
    }
}

pub fn parse_scene(text: &str, id: impl Into<String>) -> Result<LabeledScene> {
    let file: SceneFile = serde_json::from_str(text)?;
    file.into_scene(id)
}

pub fn scene_to_json(scene: &LabeledScene) -> Result<String> {
    Ok(serde_json::to_string(&SceneFile::from_scene(scene))?)
}

/// Reads a scene document, or an ASCII PLY file when the extension is `.ply`.
pub fn read_scene(path: &Path) -> Result<LabeledScene> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        let file = fs::File::open(path)?;
        return read_ply(BufReader::new(file))?.into_scene(id);
    }
    parse_scene(&fs::read_to_string(path)?, id)
}

pub fn write_scene(path: &Path, scene: &LabeledScene) -> Result<()> {
    fs::write(path, scene_to_json(scene)?)?;
    Ok(())
}

/// Parses an ASCII PLY with a `vertex` element carrying `x y z` and
/// optionally `red green blue` (0–255 integers or 0–1 floats).
pub fn read_ply(reader: impl BufRead) -> Result<SceneFile> {
    let mut lines = reader.lines();
    let mut next_line =
        || -> Result<Option<String>> { lines.next().transpose().map_err(Error::from) };
    match next_line()? {
        Some(l) if l.trim() == "ply" => {}
        _ => return Err(Error::Parse("missing ply magic".into())),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, String)> = Vec::new();
    // element name and count of everything before the vertex element
    let mut skip_before = 0usize;
    loop {
        let line = next_line()?.ok_or_else(|| Error::Parse("unterminated ply header".into()))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(Error::Parse(format!("unsupported ply format {fmt}")));
                }
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad element count {count}")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                } else if vertex_count.is_none() {
                    skip_before += count;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Parse(
                    "list properties on vertices are not supported".into(),
                ));
            }
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            ["end_header"] => break,
            _ => {}
        }
    }
    let n = vertex_count.ok_or_else(|| Error::Parse("ply has no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|(_, p)| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Parse("vertex element lacks x, y, z".into())),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let color_scale = rgb.map(|[r, _, _]| match props[r].0.as_str() {
        "float" | "float32" | "double" | "float64" => 1.0,
        _ => 1.0 / 255.0,
    });
    for _ in 0..skip_before {
        next_line()?.ok_or_else(|| Error::Parse("truncated ply body".into()))?;
    }
    let mut points = Vec::with_capacity(n);
    let mut colors = rgb.map(|_| Vec::with_capacity(n));
    for i in 0..n {
        let line =
            next_line()?.ok_or_else(|| Error::Parse(format!("ply ends at vertex {i} of {n}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number {t:?} at vertex {i}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() < props.len() {
            return Err(Error::Parse(format!(
                "vertex {i} has {} values, expected {}",
                vals.len(),
                props.len()
            )));
        }
        points.push([vals[xi], vals[yi], vals[zi]]);
        if let (Some(c), Some([r, g, b]), Some(s)) = (colors.as_mut(), rgb, color_scale) {
            c.push([vals[r] * s, vals[g] * s, vals[b] * s]);
        }
    }
    Ok(SceneFile {
        points,
        colors,
        instance_ids: None,
        class_ids: None,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CLKSEG01";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// One row of the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Name → shape listing of every tensor in the model, in storage order.
pub fn manifest(model: &ModelParams) -> Vec<TensorEntry> {
    model
        .store
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
        })
        .collect()
}

/// Layout: 8-byte magic, little-endian u32 header length, JSON header
/// (version, config, manifest), then each tensor's values as row-major
/// little-endian f32 in manifest order.
pub fn write_checkpoint(model: &ModelParams, mut w: impl Write) -> Result<()> {
    let header = CheckpointHeader {
        version: model.version.clone(),
        config: model.config.clone(),
        tensors: manifest(model),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in model.store.iter() {
        buf.clear();
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut model = ModelParams::new(header.config)?;
    model.version = header.version;
    let expected = manifest(&model);
    if expected != header.tensors {
        return Err(Error::Checkpoint(
            "tensor manifest does not match the configured architecture".into(),
        ));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let mut bytes = vec![0u8; entry.rows * entry.cols * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        *model.store.get_mut(id) = Tensor2::from_vec(entry.rows, entry.cols, data)?;
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after the last tensor".into(),
        ));
    }
    if !model.store.all_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_roundtrip() {
        let text = r#"{"points":[[0,0,0],[1,2,3]],"colors":[[0.1,0.2,0.3],[1,1,1]],"instance_ids":[-1,0],"class_ids":[5,2]}"#;
        let s = parse_scene(text, "a").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.instances(), vec![0]);
        let back = parse_scene(&scene_to_json(&s).unwrap(), "a").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn malformed_scenes() {
        assert!(parse_scene(r#"{"points":[]}"#, "x").is_err());
        assert!(parse_scene(r#"{"points":[[0,0,0]],"instance_ids":[1,2]}"#, "x").is_err());
        assert!(parse_scene(r#"{"points":[[0,0,0]],"colors":[[2,0,0]]}"#, "x").is_err());
        assert!(parse_scene(r#"{"pts":[[0,0,0]]}"#, "x").is_err());
    }

    #[test]
    fn ply_with_colors() {
        let ply = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
                   property uchar red\nproperty uchar green\nproperty uchar blue\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n\
                   0 0 0 255 0 0\n1.5 2 -3 0 51 255\n";
        let f = read_ply(ply.as_bytes()).unwrap();
        assert_eq!(f.points, vec![[0.0, 0.0, 0.0], [1.5, 2.0, -3.0]]);
        assert_eq!(f.colors.unwrap()[1], [0.0, 0.2, 1.0]);
    }

    #[test]
    fn ply_rejections() {
        assert!(read_ply("obj\n".as_bytes()).is_err());
        let bin = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n";
        assert!(read_ply(bin.as_bytes()).is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(read_ply(short.as_bytes()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_after_rounding() {
        let mut m = ModelParams::new(ModelConfig::tiny(2)).unwrap();
        m.round_to_f32();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.config, m.config);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
