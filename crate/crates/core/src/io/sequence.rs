//! Garment-plus-collider animation sequences and their on-disk archive.
//!
//! An archive is a directory:
//!
//! ```text
//! manifest.json      counts, topology hashes, frame rate, config, checksums
//! garment_rest.obj   rest garment (defines the garment topology)
//! garment.frames     packed garment positions
//! collider_rest.obj  collider triangulation at frame 0
//! collider.frames    packed collider positions
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frames::{read_frames, write_frames};
use super::obj::{load_obj, save_obj};
use super::{sha256_file, write_atomic};
use crate::collider::ColliderFrame;
use crate::error::{Error, Result};
use crate::geometry::{TriMesh, Vec3};

pub const MANIFEST_FILE: &str = "manifest.json";
const GARMENT_REST: &str = "garment_rest.obj";
const GARMENT_FRAMES: &str = "garment.frames";
const COLLIDER_REST: &str = "collider_rest.obj";
const COLLIDER_FRAMES: &str = "collider.frames";

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frame_rate: f64,
    pub garment_rest: TriMesh,
    pub garment_frames: Vec<Vec<Vec3>>,
    pub collider_rest: TriMesh,
    pub collider_frames: Vec<Vec<Vec3>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.garment_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.garment_frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.collider_frames.len() != self.garment_frames.len() {
            return Err(Error::Dimension(format!(
                "{} garment frames but {} collider frames",
                self.garment_frames.len(),
                self.collider_frames.len()
            )));
        }
        let nv = self.garment_rest.vertex_count();
        let nc = self.collider_rest.vertex_count();
        for (k, (g, c)) in self.garment_frames.iter().zip(&self.collider_frames).enumerate() {
            if g.len() != nv || c.len() != nc {
                return Err(Error::Dimension(format!("frame {k} has the wrong vertex count")));
            }
            if !g.iter().chain(c).all(|p| p.iter().all(|x| x.is_finite())) {
                return Err(Error::NonFinite(format!("positions of frame {k}")));
            }
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::InvalidArgument("frame rate must be positive".into()));
        }
        Ok(())
    }

    pub fn garment_mesh(&self, frame: usize) -> Result<TriMesh> {
        self.garment_rest.with_positions(self.garment_frames[frame].clone())
    }

    pub fn collider_frame(&self, frame: usize) -> Result<ColliderFrame> {
        ColliderFrame::new(self.collider_rest.with_positions(self.collider_frames[frame].clone())?)
    }

    /// All collider frames, built in parallel.
    pub fn colliders(&self) -> Result<Vec<Arc<ColliderFrame>>> {
        (0..self.len())
            .into_par_iter()
            .map(|k| self.collider_frame(k).map(Arc::new))
            .collect()
    }

    /// Same motion on another garment triangulation (positions given per frame).
    pub fn with_garment(&self, name: &str, rest: TriMesh, frames: Vec<Vec<Vec3>>) -> Self {
        Sequence {
            name: name.to_string(),
            frame_rate: self.frame_rate,
            garment_rest: rest,
            garment_frames: frames,
            collider_rest: self.collider_rest.clone(),
            collider_frames: self.collider_frames.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshEntry {
    pub rest: String,
    pub frames: String,
    pub vertex_count: usize,
    pub face_count: usize,
    pub topology_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub format_version: u32,
    pub name: String,
    pub frame_rate: f64,
    pub frame_count: usize,
    pub garment: MeshEntry,
    pub collider: MeshEntry,
    /// Free-form generator configuration.
    #[serde(default)]
    pub config: serde_json::Value,
    /// sha256 of every data file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

fn hash_bytes(mesh: &TriMesh) -> Result<[u8; 32]> {
    let v = hex::decode(mesh.topology().hash_hex()).map_err(|e| Error::Format(e.to_string()))?;
    v.try_into().map_err(|_| Error::Format("topology hash length".into()))
}

/// Writes `seq` as an archive directory and returns its manifest.
pub fn write_sequence(dir: &Path, seq: &Sequence, config: serde_json::Value) -> Result<SequenceManifest> {
    seq.validate()?;
    fs::create_dir_all(dir)?;
    save_obj(&dir.join(GARMENT_REST), seq.garment_rest.vertices(), seq.garment_rest.faces())?;
    save_obj(&dir.join(COLLIDER_REST), seq.collider_rest.vertices(), seq.collider_rest.faces())?;
    let gh = hash_bytes(&seq.garment_rest)?;
    let ch = hash_bytes(&seq.collider_rest)?;
    write_atomic(&dir.join(GARMENT_FRAMES), |w| write_frames(w, &gh, &seq.garment_frames))?;
    write_atomic(&dir.join(COLLIDER_FRAMES), |w| write_frames(w, &ch, &seq.collider_frames))?;
    let mut checksums = BTreeMap::new();
    for f in [GARMENT_REST, GARMENT_FRAMES, COLLIDER_REST, COLLIDER_FRAMES] {
        checksums.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    let entry = |rest: &str, frames: &str, m: &TriMesh| MeshEntry {
        rest: rest.into(),
        frames: frames.into(),
        vertex_count: m.vertex_count(),
        face_count: m.face_count(),
        topology_hash: m.topology().hash_hex(),
    };
    let manifest = SequenceManifest {
        format_version: 1,
        name: seq.name.clone(),
        frame_rate: seq.frame_rate,
        frame_count: seq.len(),
        garment: entry(GARMENT_REST, GARMENT_FRAMES, &seq.garment_rest),
        collider: entry(COLLIDER_REST, COLLIDER_FRAMES, &seq.collider_rest),
        config,
        checksums,
    };
    write_atomic(&dir.join(MANIFEST_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        Ok(())
    })?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<SequenceManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads an archive, verifying checksums, counts and topology hashes.
pub fn read_sequence(dir: &Path) -> Result<(Sequence, SequenceManifest)> {
    let manifest = read_manifest(dir)?;
    for (file, expected) in &manifest.checksums {
        let actual = sha256_file(&dir.join(file))?;
        if &actual != expected {
            return Err(Error::Format(format!("checksum mismatch for {file}")));
        }
    }
    let load = |e: &MeshEntry| -> Result<(TriMesh, Vec<Vec<Vec3>>)> {
        let rest = load_obj(&dir.join(&e.rest))?;
        if rest.vertex_count() != e.vertex_count || rest.face_count() != e.face_count {
            return Err(Error::Format(format!("{} does not match the manifest counts", e.rest)));
        }
        if rest.topology().hash_hex() != e.topology_hash {
            return Err(Error::Format(format!("{} topology hash mismatch", e.rest)));
        }
        let packed = read_frames(std::io::BufReader::new(fs::File::open(dir.join(&e.frames))?))?;
        if hex::encode(packed.topology_hash) != e.topology_hash || packed.vertex_count != e.vertex_count {
            return Err(Error::Format(format!("{} was written for another topology", e.frames)));
        }
        if packed.frames.len() != manifest.frame_count {
            return Err(Error::Format(format!(
                "{} holds {} frames, manifest declares {}",
                e.frames,
                packed.frames.len(),
                manifest.frame_count
            )));
        }
        Ok((rest, packed.frames))
    };
    let (garment_rest, garment_frames) = load(&manifest.garment)?;
    let (collider_rest, collider_frames) = load(&manifest.collider)?;
    let seq = Sequence {
        name: manifest.name.clone(),
        frame_rate: manifest.frame_rate,
        garment_rest,
        garment_frames,
        collider_rest,
        collider_frames,
    };
    seq.validate()?;
    Ok((seq, manifest))
}
