//! Line-delimited dataset format: one self-describing JSON record per
//! scene, bulk numeric arrays base64-encoded little-endian f64. Reading
//! streams scene by scene; a full round trip is lossless at the bit level.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use roifusion_tensor::Tensor;

use super::{GtBox, Scene, SceneCamera};
use crate::geometry::{Box3D, CameraModel, Point3D};
use crate::roi::Proposal;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("dataset line {line}: unsupported version {found} (expected {DATASET_VERSION})")]
    Version { line: usize, found: u32 },
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    version: u32,
    id: u64,
    extras_per_point: usize,
    /// x, y, z, extras... per point, base64 LE f64.
    points: String,
    cameras: Vec<CameraRecord>,
    gt_boxes: Vec<GtRecord>,
    proposals: Vec<ProposalRecord>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    width: usize,
    height: usize,
    /// Row-major 3x3, base64 LE f64.
    intrinsics: String,
    /// Row-major 4x4, base64 LE f64.
    extrinsics: String,
    /// [3, height, width] image, base64 LE f64.
    image: String,
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    /// x, y, z, l, h, w, theta.
    box3d: [f64; 7],
    class_id: usize,
    num_points: usize,
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    box3d: [f64; 7],
    score: f64,
}

fn encode_f64s(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(s: &str, line: usize) -> Result<Vec<f64>, SceneIoError> {
    let bytes = B64.decode(s).map_err(|e| SceneIoError::Malformed {
        line,
        reason: format!("bad base64: {e}"),
    })?;
    if bytes.len() % 8 != 0 {
        return Err(SceneIoError::Malformed {
            line,
            reason: "f64 array length not a multiple of 8 bytes".to_string(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn box_to_array(b: &Box3D) -> [f64; 7] {
    [b.x, b.y, b.z, b.l, b.h, b.w, b.theta]
}

fn box_from_array(a: &[f64; 7], line: usize) -> Result<Box3D, SceneIoError> {
    Box3D::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6]).map_err(|e| SceneIoError::Malformed {
        line,
        reason: format!("invalid box: {e}"),
    })
}

fn to_record(scene: &Scene) -> SceneRecord {
    let extras_per_point = scene.points.first().map_or(0, |p| p.extras.len());
    SceneRecord {
        version: DATASET_VERSION,
        id: scene.id,
        extras_per_point,
        points: encode_f64s(scene.points.iter().flat_map(|p| {
            [p.x, p.y, p.z]
                .into_iter()
                .chain(p.extras.iter().copied())
                .collect::<Vec<_>>()
        })),
        cameras: scene
            .cameras
            .iter()
            .map(|c| CameraRecord {
                width: c.model.width,
                height: c.model.height,
                intrinsics: encode_f64s(c.model.intrinsics.iter().flatten().copied()),
                extrinsics: encode_f64s(c.model.extrinsics.iter().flatten().copied()),
                image: encode_f64s(c.image.data().iter().copied()),
            })
            .collect(),
        gt_boxes: scene
            .gt_boxes
            .iter()
            .map(|g| GtRecord {
                box3d: box_to_array(&g.box3d),
                class_id: g.class_id,
                num_points: g.num_points,
            })
            .collect(),
        proposals: scene
            .proposals
            .iter()
            .map(|p| ProposalRecord {
                box3d: box_to_array(&p.box3d),
                score: p.score,
            })
            .collect(),
    }
}

fn from_record(rec: SceneRecord, line: usize) -> Result<Scene, SceneIoError> {
    if rec.version != DATASET_VERSION {
        return Err(SceneIoError::Version {
            line,
            found: rec.version,
        });
    }
    let stride = 3 + rec.extras_per_point;
    let flat = decode_f64s(&rec.points, line)?;
    if stride == 0 || flat.len() % stride != 0 {
        return Err(SceneIoError::Malformed {
            line,
            reason: format!(
                "point array length {} not divisible by {stride}",
                flat.len()
            ),
        });
    }
    let points = flat
        .chunks_exact(stride)
        .map(|c| Point3D::with_extras(c[0], c[1], c[2], c[3..].to_vec()))
        .collect();

    let mut cameras = Vec::with_capacity(rec.cameras.len());
    for cam in &rec.cameras {
        let k = decode_f64s(&cam.intrinsics, line)?;
        let e = decode_f64s(&cam.extrinsics, line)?;
        if k.len() != 9 || e.len() != 16 {
            return Err(SceneIoError::Malformed {
                line,
                reason: "camera matrices must be 3x3 and 4x4".to_string(),
            });
        }
        let mut intrinsics = [[0.0; 3]; 3];
        for (i, row) in intrinsics.iter_mut().enumerate() {
            row.copy_from_slice(&k[i * 3..(i + 1) * 3]);
        }
        let mut extrinsics = [[0.0; 4]; 4];
        for (i, row) in extrinsics.iter_mut().enumerate() {
            row.copy_from_slice(&e[i * 4..(i + 1) * 4]);
        }
        let image_data = decode_f64s(&cam.image, line)?;
        if image_data.len() != 3 * cam.height * cam.width {
            return Err(SceneIoError::Malformed {
                line,
                reason: format!(
                    "image has {} values, expected {}",
                    image_data.len(),
                    3 * cam.height * cam.width
                ),
            });
        }
        cameras.push(SceneCamera {
            // Augmented worlds may carry mirrored or scaled extrinsics, so
            // the strict constructor is not used on the read path.
            model: CameraModel::from_parts_unchecked(intrinsics, extrinsics, cam.width, cam.height),
            image: Tensor::from_vec(&[3, cam.height, cam.width], image_data)
                .expect("length checked above"),
        });
    }

    let mut gt_boxes = Vec::with_capacity(rec.gt_boxes.len());
    for g in &rec.gt_boxes {
        gt_boxes.push(GtBox {
            box3d: box_from_array(&g.box3d, line)?,
            class_id: g.class_id,
            num_points: g.num_points,
        });
    }
    let mut proposals = Vec::with_capacity(rec.proposals.len());
    for p in &rec.proposals {
        proposals.push(Proposal {
            box3d: box_from_array(&p.box3d, line)?,
            score: p.score,
        });
    }
    Ok(Scene {
        id: rec.id,
        points,
        cameras,
        gt_boxes,
        proposals,
    })
}

/// Incremental scene writer.
pub struct DatasetWriter {
    out: BufWriter<File>,
    written: usize,
}

impl DatasetWriter {
    pub fn create(path: &Path) -> Result<Self, SceneIoError> {
        Ok(DatasetWriter {
            out: BufWriter::new(File::create(path)?),
            written: 0,
        })
    }

    pub fn write_scene(&mut self, scene: &Scene) -> Result<(), SceneIoError> {
        let json = serde_json::to_string(&to_record(scene)).expect("record serializes");
        self.out.write_all(json.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize, SceneIoError> {
        self.out.flush()?;
        Ok(self.written)
    }
}

/// Write all scenes to `path`.
pub fn write_dataset<'a>(
    path: &Path,
    scenes: impl IntoIterator<Item = &'a Scene>,
) -> Result<usize, SceneIoError> {
    let mut w = DatasetWriter::create(path)?;
    for scene in scenes {
        w.write_scene(scene)?;
    }
    w.finish()
}

/// Streaming reader: scenes are decoded one line at a time.
pub struct DatasetReader {
    lines: Lines<BufReader<File>>,
    line: usize,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, SceneIoError> {
        Ok(DatasetReader {
            lines: BufReader::new(File::open(path)?).lines(),
            line: 0,
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Scene, SceneIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(text) => {
                    if text.trim().is_empty() {
                        continue;
                    }
                    let line = self.line;
                    let parsed: Result<SceneRecord, _> = serde_json::from_str(&text);
                    return Some(match parsed {
                        Err(e) => Err(SceneIoError::Malformed {
                            line,
                            reason: e.to_string(),
                        }),
                        Ok(rec) => from_record(rec, line),
                    });
                }
            }
        }
    }
}

/// Read a whole dataset into memory.
pub fn read_dataset(path: &Path) -> Result<Vec<Scene>, SceneIoError> {
    DatasetReader::open(path)?.collect()
}
