//! Named collections of simulated sequences written as archives.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::body::{BodyShape, ColliderSpec, Motion};
use super::garment::{GarmentShape, GarmentSpec, PinMode};
use super::{analytic_penetration, simulate, SimConfig};
use crate::error::{Error, Result};
use crate::geometry::shapes;
use crate::io::{sha256_file, write_atomic, write_sequence, Sequence};

pub const CORPUS_MANIFEST: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CorpusSource {
    Simulate {
        garment: GarmentSpec,
        sim: SimConfig,
        frames: usize,
    },
    /// Midpoint-subdivided copy of an earlier entry, `levels` rounds.
    Remesh { of: String, levels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub name: String,
    #[serde(flatten)]
    pub source: CorpusSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub name: String,
    pub frame_count: usize,
    pub face_count: usize,
    /// Deepest vertex penetration into the analytic body, m.
    pub max_penetration: f64,
    /// sha256 of the sequence's own manifest file.
    pub manifest_sha256: String,
    pub entry: CorpusEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub sequences: Vec<CorpusRecord>,
}

/// Vertices may not sit deeper than this inside the analytic body.
pub const PENETRATION_TOLERANCE: f64 = 1e-6;

/// Simulates (in parallel) and derives every entry, in entry order.
pub fn build_sequences(entries: &[CorpusEntry]) -> Result<Vec<(Sequence, f64)>> {
    let mut names = BTreeMap::new();
    for (k, e) in entries.iter().enumerate() {
        if names.insert(e.name.as_str(), k).is_some() {
            return Err(Error::Config(format!("duplicate corpus entry {}", e.name)));
        }
        if let CorpusSource::Remesh { of, .. } = &e.source {
            match names.get(of.as_str()) {
                Some(&j) if j < k => {}
                _ => return Err(Error::Config(format!("{} remeshes unknown or later entry {of}", e.name))),
            }
        }
    }
    let mut simulated: Vec<Option<(Sequence, f64)>> = entries
        .par_iter()
        .map(|e| match &e.source {
            CorpusSource::Simulate { garment, sim, frames } => {
                let seq = simulate(&e.name, &garment.build()?, sim, *frames)?;
                let depth = analytic_penetration(&seq, &sim.collider);
                if depth > PENETRATION_TOLERANCE {
                    return Err(Error::Config(format!(
                        "{} fails the penetration audit ({depth:.3e} m)",
                        e.name
                    )));
                }
                Ok(Some((seq, depth)))
            }
            CorpusSource::Remesh { .. } => Ok(None),
        })
        .collect::<Result<_>>()?;
    for (k, e) in entries.iter().enumerate() {
        if let CorpusSource::Remesh { of, levels } = &e.source {
            let (base, depth) = simulated[names[of.as_str()]].clone().expect("earlier entry is built");
            let mut rest = base.garment_rest.clone();
            let mut frames = base.garment_frames.clone();
            for _ in 0..*levels {
                let sub = shapes::subdivide(&rest);
                frames = frames.iter().map(|f| sub.transfer(f)).collect();
                rest = sub.mesh;
            }
            simulated[k] = Some((base.with_garment(&e.name, rest, frames), depth));
        }
    }
    Ok(simulated.into_iter().map(|s| s.expect("every entry is built")).collect())
}

/// Writes one archive per entry under `out_dir/<name>` and a corpus manifest.
pub fn make_corpus(entries: &[CorpusEntry], out_dir: &Path) -> Result<CorpusManifest> {
    let built = build_sequences(entries)?;
    fs::create_dir_all(out_dir)?;
    let mut sequences = Vec::with_capacity(entries.len());
    for (entry, (seq, depth)) in entries.iter().zip(&built) {
        let dir = out_dir.join(&entry.name);
        write_sequence(&dir, seq, serde_json::to_value(entry)?)?;
        sequences.push(CorpusRecord {
            name: entry.name.clone(),
            frame_count: seq.len(),
            face_count: seq.garment_rest.face_count(),
            max_penetration: *depth,
            manifest_sha256: sha256_file(&dir.join(crate::io::sequence::MANIFEST_FILE))?,
            entry: entry.clone(),
        });
    }
    let manifest = CorpusManifest {
        format_version: 1,
        sequences,
    };
    write_atomic(&out_dir.join(CORPUS_MANIFEST), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        Ok(())
    })?;
    Ok(manifest)
}

pub fn read_corpus_manifest(dir: &Path) -> Result<CorpusManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(CORPUS_MANIFEST))?)?)
}

fn orbiting_sphere() -> ColliderSpec {
    ColliderSpec {
        shape: BodyShape::Sphere {
            radius: 0.25,
            subdivisions: 3,
        },
        center: [0.0; 3],
        motion: Motion::Orbit {
            radius: 0.12,
            period: 1.6,
            ramp: 0.4,
        },
    }
}

fn skirt(panels: usize, segments: usize, rings: usize) -> GarmentShape {
    let (top_radius, bottom_radius, top_z, length) = (0.24, 0.34, 0.1, 0.45);
    if panels == 0 {
        GarmentShape::Skirt {
            top_radius,
            bottom_radius,
            top_z,
            length,
            segments,
            rings,
        }
    } else {
        GarmentShape::PanelSkirt {
            top_radius,
            bottom_radius,
            top_z,
            length,
            segments,
            rings,
            panels,
            cut_fraction: 0.75,
        }
    }
}

/// Skirt draped over a sphere that starts orbiting horizontally.
pub fn skirt_on_sphere(name: &str, segments: usize, rings: usize, frames: usize, seed: u64) -> CorpusEntry {
    CorpusEntry {
        name: name.into(),
        source: CorpusSource::Simulate {
            garment: GarmentSpec {
                shape: skirt(0, segments, rings),
                pins: PinMode::TopAttached,
            },
            sim: SimConfig {
                seed,
                collider: orbiting_sphere(),
                ..SimConfig::default()
            },
            frames,
        },
    }
}

/// Same motion on a skirt split into two panels from the hem upward.
pub fn panel_skirt_on_sphere(name: &str, segments: usize, rings: usize, frames: usize, seed: u64) -> CorpusEntry {
    let mut e = skirt_on_sphere(name, segments, rings, frames, seed);
    if let CorpusSource::Simulate { garment, .. } = &mut e.source {
        garment.shape = skirt(2, segments, rings);
    }
    e
}

/// Sheet hanging behind a capsule that swings about the x axis.
pub fn cape_on_pendulum(name: &str, frames: usize, seed: u64) -> CorpusEntry {
    CorpusEntry {
        name: name.into(),
        source: CorpusSource::Simulate {
            garment: GarmentSpec {
                shape: GarmentShape::Sheet {
                    width: 0.3,
                    height: 0.5,
                    nx: 12,
                    nz: 22,
                    origin: [0.0, -0.1, 0.85],
                },
                pins: PinMode::TopAttached,
            },
            sim: SimConfig {
                seed,
                substeps: 120,
                collider: ColliderSpec {
                    shape: BodyShape::Capsule {
                        half_length: 0.25,
                        radius: 0.08,
                        segments: 16,
                        cap_rings: 4,
                    },
                    center: [0.0, 0.0, 0.6],
                    motion: Motion::Pendulum {
                        pivot: [0.0, 0.0, 1.0],
                        axis: [1.0, 0.0, 0.0],
                        amplitude: 0.5,
                        period: 1.6,
                        ramp: 0.3,
                    },
                },
                ..SimConfig::default()
            },
            frames,
        },
    }
}

/// The standard desk-scale corpus: skirt on an orbiting sphere, cape on a
/// capsule pendulum, a two-panel cut skirt and a remeshed skirt.
pub fn default_corpus(frames: usize, seed: u64) -> Vec<CorpusEntry> {
    vec![
        skirt_on_sphere("skirt_orbit", 32, 16, frames, seed),
        cape_on_pendulum("cape_pendulum", frames, seed + 1),
        panel_skirt_on_sphere("panel_skirt_orbit", 32, 16, frames, seed + 2),
        CorpusEntry {
            name: "skirt_orbit_remeshed".into(),
            source: CorpusSource::Remesh {
                of: "skirt_orbit".into(),
                levels: 1,
            },
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_list_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(&[], dir.path()).unwrap();
        assert!(m.sequences.is_empty());
        assert_eq!(read_corpus_manifest(dir.path()).unwrap(), m);
    }

    #[test]
    fn default_corpus_is_reproducible_and_audited() {
        let entries = default_corpus(12, 3);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = make_corpus(&entries, a.path()).unwrap();
        let mb = make_corpus(&entries, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.sequences.len(), 4);
        for r in &ma.sequences {
            assert!(r.max_penetration <= PENETRATION_TOLERANCE, "{}", r.name);
            assert!((500..=5200).contains(&r.face_count), "{} has {} faces", r.name, r.face_count);
            for file in ["garment.frames", "collider.frames", "manifest.json"] {
                let fa = fs::read(a.path().join(&r.name).join(file)).unwrap();
                let fb = fs::read(b.path().join(&r.name).join(file)).unwrap();
                assert_eq!(fa, fb, "{}/{file}", r.name);
            }
        }
        let (seq, _) = crate::io::read_sequence(&a.path().join("skirt_orbit_remeshed")).unwrap();
        assert_eq!(seq.garment_rest.face_count(), 4 * 1024);
    }

    #[test]
    fn remesh_of_unknown_entry_is_rejected() {
        let entries = vec![CorpusEntry {
            name: "x".into(),
            source: CorpusSource::Remesh {
                of: "missing".into(),
                levels: 1,
            },
        }];
        assert!(matches!(build_sequences(&entries), Err(Error::Config(_))));
    }

    #[test]
    fn entry_serializes_as_flat_table() {
        let e = skirt_on_sphere("s", 8, 4, 3, 0);
        let text = toml::to_string(&e).unwrap();
        let back: CorpusEntry = toml::from_str(&text).unwrap();
        assert_eq!(back, e);
    }
}
