//! On-disk dataset format.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic        4 bytes  "DRSD"
//! version      u32      currently 1
//! manifest_len u32
//! manifest     UTF-8 JSON (frame count, grid spec, generator config hash, seed)
//! frames       frame_count fixed-stride records, each of little-endian f32:
//!   raster      n_range * n_azimuth values
//!   object list capacity * n_features values
//!   power grid  n_range * n_azimuth values
//! ```
//!
//! The file is seekable (fixed stride) and round-trips byte-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use drs_tensor::Tensor;

use crate::scene::{ObjectList, PolarGridSpec, RadarFrame, SceneRaster};

pub const MAGIC: [u8; 4] = *b"DRSD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected \"DRSD\"")]
    BadMagic,

    #[error("unsupported dataset version {found}")]
    UnsupportedVersion { found: u32 },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated payload while reading {0}")]
    Truncated(String),

    #[error("manifest mismatch: {0}")]
    Manifest(String),
}

/// Header metadata stored as JSON inside the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frame_count: usize,
    pub grid: PolarGridSpec,
    pub object_capacity: usize,
    pub n_features: usize,
    pub config_hash: u64,
    pub seed: u64,
}

/// One stored sample: conditioning inputs and the observed power grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub raster: SceneRaster,
    pub objects: ObjectList,
    pub frame: RadarFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, frames: Vec<FrameRecord>) -> Result<Self, DatasetError> {
        if manifest.frame_count != frames.len() {
            return Err(DatasetError::Manifest(format!(
                "manifest says {} frames, got {}",
                manifest.frame_count,
                frames.len()
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.raster.spec != manifest.grid || f.frame.spec != manifest.grid {
                return Err(DatasetError::Manifest(format!(
                    "frame {i} grid spec differs from manifest"
                )));
            }
        }
        Ok(Self { manifest, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Stable content hash over the manifest and every frame payload, equal for
/// datasets that would serialize to identical files.
pub fn dataset_content_hash(dataset: &Dataset) -> u64 {
    use drs_tensor::checkpoint::fnv1a64;
    let mut bytes =
        serde_json::to_vec(&dataset.manifest).expect("manifest serializes");
    for record in &dataset.frames {
        for chunk in [
            record.raster.layers.data(),
            record.objects.features.data(),
            record.frame.power.data(),
        ] {
            bytes.reserve(chunk.len() * 4);
            for v in chunk {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fnv1a64(&bytes)
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let manifest = serde_json::to_string(&dataset.manifest)
        .map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    for record in &dataset.frames {
        write_f32s(&mut w, record.raster.layers.data())?;
        write_f32s(&mut w, record.objects.features.data())?;
        write_f32s(&mut w, record.frame.power.data())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), DatasetError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Truncated(what.to_string())
        } else {
            DatasetError::Io(e)
        }
    })
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>, DatasetError> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mut v = [0u8; 4];
    read_exact(&mut r, &mut v, "version")?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion { found: version });
    }
    let mut len = [0u8; 4];
    read_exact(&mut r, &mut len, "manifest length")?;
    let mut manifest_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(&mut r, &mut manifest_bytes, "manifest")?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;
    manifest
        .grid
        .validate()
        .map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;

    let grid_cells = manifest.grid.n_cells();
    let obj_len = manifest.object_capacity * manifest.n_features;
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for idx in 0..manifest.frame_count {
        let raster = read_f32s(&mut r, grid_cells, &format!("frame {idx} raster"))?;
        let objects = read_f32s(&mut r, obj_len, &format!("frame {idx} object list"))?;
        let power = read_f32s(&mut r, grid_cells, &format!("frame {idx} power grid"))?;
        frames.push(FrameRecord {
            raster: SceneRaster {
                spec: manifest.grid.clone(),
                layers: Tensor::new(
                    vec![manifest.grid.n_range, manifest.grid.n_azimuth, 1],
                    raster,
                )
                .map_err(|e| DatasetError::CorruptHeader(e.to_string()))?,
            },
            objects: ObjectList {
                features: Tensor::new(vec![manifest.object_capacity, 1, manifest.n_features], objects)
                    .map_err(|e| DatasetError::CorruptHeader(e.to_string()))?,
            },
            frame: RadarFrame {
                spec: manifest.grid.clone(),
                power: Tensor::new(
                    vec![manifest.grid.n_range, manifest.grid.n_azimuth, 1],
                    power,
                )
                .map_err(|e| DatasetError::CorruptHeader(e.to_string()))?,
            },
        });
    }
    // Anything left over means the manifest under-counts the records.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DatasetError::Manifest(
            "file holds more frame bytes than the manifest frame count".to_string(),
        ));
    }
    Dataset::new(manifest, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        encode_object_list, rasterize_terrain, render_points, Corridor, ObjectClass, SceneObject,
        OBJECT_CAPACITY,
    };

    fn sample_dataset(n: usize) -> Dataset {
        let grid = PolarGridSpec::default();
        let frames: Vec<FrameRecord> = (0..n)
            .map(|i| {
                let corridor = Corridor {
                    heading_rad: 0.01 * i as f64,
                    half_width_m: 4.0 + i as f64 * 0.1,
                };
                let raster = rasterize_terrain(&corridor, &grid).unwrap();
                let objects = encode_object_list(
                    &[SceneObject {
                        x: 10.0 + i as f32,
                        y: 0.5,
                        heading: 0.0,
                        speed: 1.0,
                        class: ObjectClass::Ccr,
                    }],
                    OBJECT_CAPACITY,
                )
                .unwrap();
                let frame = render_points(
                    &[(10.0 + i as f64, 0.02, -48.0 - i as f64)],
                    &grid,
                );
                FrameRecord {
                    raster,
                    objects,
                    frame,
                }
            })
            .collect();
        Dataset::new(
            DatasetManifest {
                frame_count: n,
                grid,
                object_capacity: OBJECT_CAPACITY,
                n_features: crate::scene::N_FEATURES,
                config_hash: 0xabcdef,
                seed: 7,
            },
            frames,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.drsd");
        let p2 = dir.path().join("b.drsd");
        let ds = sample_dataset(10);
        write_dataset(&p1, &ds).unwrap();
        let loaded = read_dataset(&p1).unwrap();
        assert_eq!(loaded, ds);
        write_dataset(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_by_one_byte_is_a_truncated_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.drsd");
        write_dataset(&p, &sample_dataset(3)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_dataset(&p), Err(DatasetError::Truncated(_))));
    }

    #[test]
    fn manifest_count_mismatch_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.drsd");
        let ds = sample_dataset(3);
        write_dataset(&p, &ds).unwrap();
        // Rewrite the manifest claiming fewer frames than stored.
        let bytes = std::fs::read(&p).unwrap();
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = String::from_utf8(bytes[12..12 + manifest_len].to_vec()).unwrap();
        let patched = manifest.replace("\"frame_count\":3", "\"frame_count\":2");
        assert_ne!(manifest, patched);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + manifest_len..]);
        std::fs::write(&p, &out).unwrap();
        assert!(matches!(read_dataset(&p), Err(DatasetError::Manifest(_))));
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.drsd");
        write_dataset(&p, &sample_dataset(1)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'x';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(DatasetError::BadMagic)));
        bytes[0] = b'D';
        bytes[4] = 42;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_dataset(&p),
            Err(DatasetError::UnsupportedVersion { found: 42 })
        ));
    }
}
