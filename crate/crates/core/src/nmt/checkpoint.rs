//! Binary checkpoint: `NMTX`, u32 version, hyperparameters, named tensors
//! with shape headers as little-endian f32, then an optional optimizer
//! block.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::adam::OptimizerState;
use super::params::{HyperParams, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NMTX";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn data(&mut self, t: &Array2<f32>) {
        self.0.reserve(t.len() * 4);
        for v in t.iter() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn data(&mut self, shape: (usize, usize)) -> Result<Array2<f32>> {
        let bytes = self.take(shape.0 * shape.1 * 4)?;
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Array2::from_shape_vec(shape, v).expect("length matches shape"))
    }
}

pub fn save_checkpoint(m: &ModelParams<f32>, opt: Option<&OptimizerState>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let h = m.hyper();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    for v in [h.layers, h.d_model, h.heads, h.d_ff, h.src_vocab, h.tgt_vocab] {
        w.u64(v as u64);
    }
    w.u8(h.tied_embeddings as u8);
    w.u32(m.tensors().len() as u32);
    for (spec, t) in m.layout().specs.iter().zip(m.tensors()) {
        w.u32(spec.name.len() as u32);
        w.0.extend_from_slice(spec.name.as_bytes());
        w.u64(t.nrows() as u64);
        w.u64(t.ncols() as u64);
        w.data(t);
    }
    match opt {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            for v in [s.step, s.epoch, s.cursor, s.checkpoints] {
                w.u64(v);
            }
            w.f64(s.best_perplexity);
            w.u64(s.bad_checkpoints);
            for t in s.m.iter().chain(&s.v) {
                w.data(t);
            }
        }
    }
    std::fs::write(path, w.0).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, Option<OptimizerState>)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(r.err("bad magic bytes, not an NMTX checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let hyper = HyperParams {
        layers: dims[0],
        d_model: dims[1],
        heads: dims[2],
        d_ff: dims[3],
        src_vocab: dims[4],
        tgt_vocab: dims[5],
        tied_embeddings: r.u8()? != 0,
    };
    hyper.validate().map_err(|e| r.err(e.to_string()))?;
    let layout = super::params::Layout::new(&hyper);
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(r.err(format!("{count} tensors, layout expects {}", layout.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in &layout.specs {
        let n = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(n)?).into_owned();
        if name != spec.name {
            return Err(r.err(format!("tensor `{name}` where `{}` was expected", spec.name)));
        }
        let shape = (r.u64()? as usize, r.u64()? as usize);
        if shape != spec.shape {
            return Err(r.err(format!("{name} has shape {shape:?}, expected {:?}", spec.shape)));
        }
        tensors.push(r.data(shape)?);
    }
    let model = ModelParams::from_tensors(hyper, tensors).map_err(|e| r.err(e.to_string()))?;
    let opt = match r.u8()? {
        0 => None,
        1 => {
            let (step, epoch, cursor, checkpoints) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
            let best_perplexity = r.f64()?;
            let bad_checkpoints = r.u64()?;
            let mut read_all = || -> Result<Vec<Array2<f32>>> { layout.specs.iter().map(|s| r.data(s.shape)).collect() };
            let m = read_all()?;
            let v = read_all()?;
            Some(OptimizerState {
                step,
                epoch,
                cursor,
                checkpoints,
                best_perplexity,
                bad_checkpoints,
                m,
                v,
            })
        }
        other => return Err(r.err(format!("bad optimizer flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((model, opt))
}

/// Path of the companion checkpoint holding the best snapshot of a run.
pub fn best_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}
