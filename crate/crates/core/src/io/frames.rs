//! Packed per-frame vertex positions for a fixed topology.
//!
//! Header: magic, version, frame count, vertex count and the 32-byte topology
//! hash; then `frames × vertices × 3` little-endian f32 values.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

const MAGIC: &[u8; 8] = b"GFFRAMES";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedFrames {
    pub topology_hash: [u8; 32],
    pub vertex_count: usize,
    pub frames: Vec<Vec<Vec3>>,
}

pub fn write_frames<W: Write>(mut w: W, topology_hash: &[u8; 32], frames: &[Vec<Vec3>]) -> Result<()> {
    let nv = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != nv) {
        return Err(Error::Dimension("frames disagree on vertex count".into()));
    }
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(frames.len() as u64)?;
    w.write_u64::<LittleEndian>(nv as u64)?;
    w.write_all(topology_hash)?;
    for frame in frames {
        for v in frame {
            for &c in v.iter() {
                w.write_f32::<LittleEndian>(c as f32)?;
            }
        }
    }
    Ok(())
}

pub fn read_frames<R: Read>(mut r: R) -> Result<PackedFrames> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a packed frame file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported frame file version {version}")));
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    let nv = r.read_u64::<LittleEndian>()? as usize;
    if count.saturating_mul(nv) > 1 << 32 {
        return Err(Error::Format(format!("implausible frame file size {count}x{nv}")));
    }
    let mut topology_hash = [0u8; 32];
    r.read_exact(&mut topology_hash)?;
    let mut buf = vec![0f32; 3 * nv];
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_f32_into::<LittleEndian>(&mut buf)?;
        frames.push(
            buf.chunks_exact(3)
                .map(|c| Vec3::new(c[0].into(), c[1].into(), c[2].into()))
                .collect(),
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last frame".into()));
    }
    Ok(PackedFrames {
        topology_hash,
        vertex_count: nv,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_single_precision() {
        let frames = vec![
            vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 2.5, 1e-3)],
            vec![Vec3::new(0.4, 0.5, 0.6), Vec3::new(7.0, 8.0, 9.0)],
        ];
        let hash = [7u8; 32];
        let mut buf = Vec::new();
        write_frames(&mut buf, &hash, &frames).unwrap();
        let back = read_frames(buf.as_slice()).unwrap();
        assert_eq!(back.topology_hash, hash);
        assert_eq!(back.vertex_count, 2);
        for (a, b) in back.frames.iter().flatten().zip(frames.iter().flatten()) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_fail() {
        let frames = vec![vec![Vec3::zeros(); 3]];
        let mut buf = Vec::new();
        write_frames(&mut buf, &[0; 32], &frames).unwrap();
        assert!(read_frames(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_frames(buf.as_slice()).is_err());
    }
}
