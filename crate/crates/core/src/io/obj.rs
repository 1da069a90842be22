//! Minimal Wavefront OBJ support: vertex positions and polygonal faces.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{TriMesh, Vec3};

/// Writes positions with 9 significant digits and 1-based triangle indices.
pub fn write_obj<W: Write>(mut w: W, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    for v in vertices {
        writeln!(w, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z)?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn save_obj(path: &Path, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    super::write_atomic(path, |w| write_obj(w, vertices, faces))
}

/// Reads `v` and `f` records. Polygons are fan-triangulated; texture and
/// normal indices (`f 1/2/3`) and negative indices are accepted.
pub fn read_obj<R: BufRead>(r: R) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", lineno + 1));
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for x in &mut c {
                    *x = parts
                        .next()
                        .ok_or_else(|| bad("vertex needs three coordinates"))?
                        .parse()
                        .map_err(|_| bad("unparsable coordinate"))?;
                }
                vertices.push(Vec3::from(c));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in parts {
                    let head = tok.split('/').next().unwrap_or_default();
                    let i: i64 = head.parse().map_err(|_| bad("unparsable face index"))?;
                    let resolved = match i {
                        0 => return Err(bad("face index 0")),
                        i if i > 0 => i - 1,
                        i => vertices.len() as i64 + i,
                    };
                    if resolved < 0 {
                        return Err(bad("face index out of range"));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let (v, f) = read_obj(BufReader::new(File::open(path)?))?;
    TriMesh::new(v, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    #[test]
    fn round_trip_keeps_nine_digits() {
        let m = shapes::icosphere(1, 0.731);
        let mut buf = Vec::new();
        write_obj(&mut buf, m.vertices(), m.faces()).unwrap();
        let (v, f) = read_obj(buf.as_slice()).unwrap();
        assert_eq!(f, m.faces());
        for (a, b) in v.iter().zip(m.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 5e-9 * b[k].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn polygons_and_slashes() {
        let src = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1 -1/1\n";
        let (v, f) = read_obj(src.as_bytes()).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(f, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(matches!(read_obj("v 1 2\n".as_bytes()), Err(Error::Format(_))));
        assert!(matches!(read_obj("v 0 0 0\nf 1 0 1\n".as_bytes()), Err(Error::Format(_))));
    }
}
