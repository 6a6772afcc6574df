//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32` unless noted:
//!
//! ```text
//! "ATNS" | version | precision (u8: 4 or 8) | n m l n' K_x K_y
//! source vocab: count, then (len, UTF-8 bytes) per shortlist token
//! target vocab: same
//! tensor table: count, then per tensor (len, name) rows cols values
//! optional optimizer table: same encoding as the tensor table
//! ```
//!
//! Reserved symbols are implicit and not stored. The context mode rides in
//! the main table as the 1x1 tensor `config.fixed_context` (0 or 1); the
//! optimizer table holds `optim.rho`, `optim.epsilon`, and per parameter
//! `acc_grad/<name>` and `acc_delta/<name>`.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ContextMode, Model, ModelDims};
use crate::named::NamedTensors;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::train::optim::Adadelta;

pub const MAGIC: &[u8; 4] = b"ATNS";
pub const VERSION: u32 = 1;
const MODE_KEY: &str = "config.fixed_context";
const RHO_KEY: &str = "optim.rho";
const EPS_KEY: &str = "optim.epsilon";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub optimizer: Option<Adadelta<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        model: Model<T>,
        source_vocab: Vocabulary,
        target_vocab: Vocabulary,
        optimizer: Option<Adadelta<T>>,
    ) -> Result<Self> {
        if source_vocab.len() != model.dims.k_src || target_vocab.len() != model.dims.k_tgt {
            return Err(Error::Checkpoint(format!(
                "vocabulary sizes {}/{} do not match model dims {}/{}",
                source_vocab.len(),
                target_vocab.len(),
                model.dims.k_src,
                model.dims.k_tgt
            )));
        }
        if let Some(opt) = &optimizer {
            if !opt.acc_grad().same_layout(&model.params) {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok(Checkpoint {
            model,
            source_vocab,
            target_vocab,
            optimizer,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(T::BYTES);
        let d = self.model.dims;
        for v in [d.n, d.m, d.l, d.n_align, d.k_src, d.k_tgt] {
            put_len(&mut out, v)?;
        }
        put_vocab(&mut out, &self.source_vocab)?;
        put_vocab(&mut out, &self.target_vocab)?;

        let mode = match self.model.mode {
            ContextMode::Attention => T::zero(),
            ContextMode::Fixed => T::one(),
        };
        let mode_tensor = Tensor::scalar(mode);
        let mut table: Vec<(&str, &Tensor<T>)> = self.model.params.iter().collect();
        table.push((MODE_KEY, &mode_tensor));
        put_table(&mut out, &table)?;

        if let Some(opt) = &self.optimizer {
            let rho = Tensor::scalar(T::from_f64_lossy(opt.rho()));
            let eps = Tensor::scalar(T::from_f64_lossy(opt.epsilon()));
            let grad_names: Vec<String> = opt.acc_grad().names().iter().map(|n| format!("acc_grad/{n}")).collect();
            let delta_names: Vec<String> = opt.acc_delta().names().iter().map(|n| format!("acc_delta/{n}")).collect();
            let mut table: Vec<(&str, &Tensor<T>)> = vec![(RHO_KEY, &rho), (EPS_KEY, &eps)];
            table.extend(grad_names.iter().map(String::as_str).zip(opt.acc_grad().tensors()));
            table.extend(delta_names.iter().map(String::as_str).zip(opt.acc_delta().tensors()));
            put_table(&mut out, &table)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let flag = r.take(1)?[0];
        if flag != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {}-byte scalars, reader expects {}",
                flag,
                T::BYTES
            )));
        }
        let mut dim = || -> Result<usize> { Ok(r.u32()? as usize) };
        let dims = ModelDims {
            n: dim()?,
            m: dim()?,
            l: dim()?,
            n_align: dim()?,
            k_src: dim()?,
            k_tgt: dim()?,
        };
        dims.validate().map_err(|e| Error::Checkpoint(format!("bad dims record: {e}")))?;
        let source_vocab = r.vocab()?;
        let target_vocab = r.vocab()?;

        let mut params = r.table::<T>()?;
        let mode = match params.get(MODE_KEY).map(|t| (t.shape(), t.data()[0])) {
            Some(((1, 1), v)) if v == T::zero() => ContextMode::Attention,
            Some(((1, 1), v)) if v == T::one() => ContextMode::Fixed,
            Some(_) => return Err(Error::Checkpoint(format!("malformed {MODE_KEY}"))),
            None => return Err(Error::Checkpoint(format!("missing {MODE_KEY}"))),
        };
        params = without(params, MODE_KEY)?;
        let model = Model::from_params(dims, mode, params).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let optimizer = if r.is_done() {
            None
        } else {
            Some(r.optimizer(&model.params)?)
        };
        if !r.is_done() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.bytes.len() - r.pos)));
        }
        Self::new(model, source_vocab, target_vocab, optimizer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Reads only the scalar width recorded in a checkpoint header.
pub fn read_precision(path: impl AsRef<Path>) -> Result<Precision> {
    let bytes = fs::read(path)?;
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic or truncated header".into()));
    }
    Precision::from_bytes(bytes[8]).ok_or_else(|| Error::Checkpoint(format!("bad precision flag {}", bytes[8])))
}

/// Writes to a sibling temporary file, syncs, then renames over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn without<T: Scalar>(table: NamedTensors<T>, skip: &str) -> Result<NamedTensors<T>> {
    let mut out = NamedTensors::new();
    for (name, t) in table.iter() {
        if name != skip {
            out.insert(name, t.clone())?;
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    put_u32(out, v);
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_vocab(out: &mut Vec<u8>, vocab: &Vocabulary) -> Result<()> {
    put_len(out, vocab.words().len())?;
    for w in vocab.words() {
        put_str(out, w)?;
    }
    Ok(())
}

fn put_table<T: Scalar>(out: &mut Vec<u8>, table: &[(&str, &Tensor<T>)]) -> Result<()> {
    put_len(out, table.len())?;
    for (name, t) in table {
        put_str(out, name)?;
        put_len(out, t.rows())?;
        put_len(out, t.cols())?;
        for &v in t.data() {
            v.write_le(out);
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 at offset {}", self.pos)))
    }

    fn vocab(&mut self) -> Result<Vocabulary> {
        let count = self.u32()? as usize;
        let mut words = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            words.push(self.string()?);
        }
        Vocabulary::from_tokens(words).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn table<T: Scalar>(&mut self) -> Result<NamedTensors<T>> {
        let count = self.u32()? as usize;
        let mut table = NamedTensors::new();
        for _ in 0..count {
            let name = self.string()?;
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(T::BYTES as usize))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = self.take(n)?;
            let data = raw.chunks_exact(T::BYTES as usize).map(T::read_le).collect();
            let t = Tensor::from_vec(rows, cols, data)?;
            table
                .insert(name.clone(), t)
                .map_err(|_| Error::Checkpoint(format!("duplicate tensor {name}")))?;
        }
        Ok(table)
    }

    fn optimizer<T: Scalar>(&mut self, params: &NamedTensors<T>) -> Result<Adadelta<T>> {
        let table = self.table::<T>()?;
        let hyper = |key: &str| -> Result<f64> {
            match table.get(key) {
                Some(t) if t.shape() == (1, 1) => Ok(t.item().to_f64_lossy()),
                _ => Err(Error::Checkpoint(format!("optimizer table lacks {key}"))),
            }
        };
        let rho = hyper(RHO_KEY)?;
        let eps = hyper(EPS_KEY)?;
        if table.len() != 2 + 2 * params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer table has {} entries, expected {}",
                table.len(),
                2 + 2 * params.len()
            )));
        }
        let mut acc_grad = NamedTensors::new();
        let mut acc_delta = NamedTensors::new();
        for (name, p) in params.iter() {
            for (prefix, dest) in [("acc_grad", &mut acc_grad), ("acc_delta", &mut acc_delta)] {
                let key = format!("{prefix}/{name}");
                let t = table
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer table lacks {key}")))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key} has shape {:?}, parameter has {:?}",
                        t.shape(),
                        p.shape()
                    )));
                }
                dest.insert(name, t.clone())?;
            }
        }
        Adadelta::from_accumulators(rho, eps, acc_grad, acc_delta).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
