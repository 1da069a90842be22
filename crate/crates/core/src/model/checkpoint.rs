//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, version, weight dtype, config JSON, named
//! tensors, normalization statistics (always f64), metadata JSON and an
//! optional optimizer section holding Adam moments (always f64).

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::features::NormStats;

const MAGIC: &[u8; 8] = b"GFCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: serde_json::Value,
    pub optimizer: Option<OptimizerState>,
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 32 {
        return Err(Error::Format(format!("implausible section length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>, dtype: Dtype) -> Result<()> {
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for &x in m.iter() {
        match dtype {
            Dtype::F64 => w.write_f64::<LittleEndian>(x)?,
            Dtype::F32 => w.write_f32::<LittleEndian>(x as f32)?,
        }
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, dtype: Dtype) -> Result<Array2<f64>> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= 1 << 31)
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {rows}x{cols}")))?;
    let data = match dtype {
        Dtype::F64 => {
            let mut d = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut d)?;
            d
        }
        Dtype::F32 => {
            let mut d = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut d)?;
            d.into_iter().map(f64::from).collect()
        }
    };
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            metadata: serde_json::Value::Null,
            optimizer: None,
        }
    }

    pub fn write<W: Write>(&self, mut w: W, dtype: Dtype) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(match dtype {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        })?;
        write_bytes(&mut w, &serde_json::to_vec(self.model.config())?)?;
        let params = self.model.params();
        w.write_u64::<LittleEndian>(params.tensors.len() as u64)?;
        for (name, t) in params.names.iter().zip(&params.tensors) {
            write_bytes(&mut w, name.as_bytes())?;
            write_matrix(&mut w, t, dtype)?;
        }
        let stats = self.model.stats();
        w.write_u64::<LittleEndian>(stats.dim() as u64)?;
        for &x in stats.mean.iter().chain(&stats.std) {
            w.write_f64::<LittleEndian>(x)?;
        }
        write_bytes(&mut w, &serde_json::to_vec(&self.metadata)?)?;
        match &self.optimizer {
            None => w.write_u8(0)?,
            Some(opt) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(opt.step)?;
                for t in opt.m.iter().chain(&opt.v) {
                    write_matrix(&mut w, t, Dtype::F64)?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let dtype = match r.read_u8()? {
            0 => Dtype::F64,
            1 => Dtype::F32,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
        let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        if count > 1 << 20 {
            return Err(Error::Format(format!("implausible tensor count {count}")));
        }
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            names.push(name);
            tensors.push(read_matrix(&mut r, dtype)?);
        }
        let dim = r.read_u64::<LittleEndian>()? as usize;
        if dim > 1 << 24 {
            return Err(Error::Format(format!("implausible statistics width {dim}")));
        }
        let mut mean = vec![0.0; dim];
        let mut std = vec![0.0; dim];
        r.read_f64_into::<LittleEndian>(&mut mean)?;
        r.read_f64_into::<LittleEndian>(&mut std)?;
        let metadata = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let model = Model::from_parts(config, Params { names, tensors }, NormStats { mean, std })?;
        let optimizer = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>()?;
                let read_set = |r: &mut R| -> Result<Vec<Array2<f64>>> {
                    (0..count).map(|_| read_matrix(r, Dtype::F64)).collect()
                };
                let m = read_set(&mut r)?;
                let v = read_set(&mut r)?;
                for (a, b) in m.iter().chain(&v).zip(model.params().tensors.iter().cycle()) {
                    if a.dim() != b.dim() {
                        return Err(Error::Format("optimizer state shape mismatch".into()));
                    }
                }
                Some(OptimizerState { step, m, v })
            }
            other => return Err(Error::Format(format!("unknown optimizer tag {other}"))),
        };
        Ok(Checkpoint {
            model,
            metadata,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write(w, dtype))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionBias;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let cfg = ModelConfig {
            n_hist: 2,
            n_layers: 1,
            n_embed: 8,
            n_ff: 8,
            n_heads: 2,
            n_conn: 1,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = cfg.token_dim();
        let stats = NormStats {
            mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            std: (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        Model::new(cfg, stats, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut ck = Checkpoint::new(m.clone());
        ck.metadata = serde_json::json!({"step": 12, "loss": 0.25});
        ck.optimizer = Some(OptimizerState {
            step: 12,
            m: m.params().zeros_like(),
            v: m.params().tensors.iter().map(|t| t * 0.5).collect(),
        });
        let mut buf = Vec::new();
        ck.write(&mut buf, Dtype::F64).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Array2::from_shape_simple_fn((3, m.config().token_dim()), || rng.random_range(-1.0..1.0));
        let bias = AttentionBias::uniform(3);
        assert_eq!(m.forward(&t, &bias).unwrap(), back.model.forward(&t, &bias).unwrap());
    }

    #[test]
    fn f32_weights_round_to_single_precision() {
        let m = model();
        let mut buf = Vec::new();
        Checkpoint::new(m.clone()).write(&mut buf, Dtype::F32).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        for (a, b) in m.params().tensors.iter().zip(&back.model.params().tensors) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(back.model.stats(), m.stats());
    }

    #[test]
    fn corrupted_header_rejected() {
        let mut buf = Vec::new();
        Checkpoint::new(model()).write(&mut buf, Dtype::F64).unwrap();
        buf[0] = b'X';
        assert!(matches!(Checkpoint::read(buf.as_slice()), Err(Error::Format(_))));
        assert!(Checkpoint::read(&buf[..5]).is_err());
    }
}
