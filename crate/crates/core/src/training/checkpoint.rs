//! Checkpoint directory: `model.bin` (parameters and optimizer state),
//! `meta.json` and a copy of the config.
//!
//! `model.bin` layout, little endian throughout:
//! magic `CCSPCKP1`, then per store (detector, denoiser) a `u32` tag, a `u32`
//! tensor count and each tensor as name (`u32` length + UTF-8), rank (`u32`),
//! dims (`u64` each) and values (`f64` each); then per optimizer a `u64` step
//! count, a `u32` entry count and per entry a `u32` store tag, a `u32`
//! index, a `u32` moment count and the moment tensors without names.
//! Values are widened to `f64`, which is exact for `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Precision, Strategy};
use super::model::Model;
use super::train::{Checkpoint, EpochRecord};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BLOB_FILE: &str = "model.bin";
pub const META_FILE: &str = "meta.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
const MAGIC: &[u8; 8] = b"CCSPCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub config_sha256: String,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    pub strategy: Strategy,
    pub precision: Precision,
}

impl CheckpointMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::input("checkpoint blob is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::input("checkpoint tensor too large"))?)?;
        let data = bytes.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
        Tensor::from_vec(&shape, data)
    }
}

fn write_store<T: Scalar>(w: &mut Writer, s: &ParamStore<T>) {
    w.u32(s.tag());
    w.u32(s.len() as u32);
    for (_, name, t) in s.iter() {
        w.u32(name.len() as u32);
        w.0.extend_from_slice(name.as_bytes());
        w.tensor(t);
    }
}

fn read_store<T: Scalar>(r: &mut Reader<'_>, into: &mut ParamStore<T>) -> Result<()> {
    let tag = r.u32()?;
    let count = r.u32()? as usize;
    if tag != into.tag() || count != into.len() {
        return Err(Error::config(format!(
            "checkpoint store {tag} holds {count} tensors; the configured model has {} in store {}",
            into.len(),
            into.tag()
        )));
    }
    let mut loaded = ParamStore::new(tag);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::input("bad parameter name"))?;
        loaded.add(name, r.tensor()?);
    }
    into.load_from(&loaded)
}

fn write_optimizer<T: Scalar>(w: &mut Writer, o: &Optimizer<T>) {
    w.u64(o.steps);
    w.u32(o.state.len() as u32);
    for (id, moments) in &o.state {
        w.u32(id.store);
        w.u32(id.index);
        w.u32(moments.len() as u32);
        for m in moments {
            w.tensor(m);
        }
    }
}

fn read_optimizer<T: Scalar>(r: &mut Reader<'_>, into: &mut Optimizer<T>) -> Result<()> {
    into.steps = r.u64()?;
    into.state.clear();
    for _ in 0..r.u32()? {
        let id = ParamId { store: r.u32()?, index: r.u32()? };
        let n = r.u32()? as usize;
        let moments = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        into.state.insert(id, moments);
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epoch,
            config_sha256: self.config.sha256(),
            history: self.history.clone(),
            seed: self.seed,
            strategy: self.config.strategy,
            precision: self.config.precision,
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        write_store(&mut w, &self.model.detector_params);
        write_store(&mut w, &self.model.denoiser_params);
        write_optimizer(&mut w, &self.detector_optimizer);
        write_optimizer(&mut w, &self.denoiser_optimizer);
        w.0
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(BLOB_FILE, &self.to_blob())?;
        write(META_FILE, (serde_json::to_string_pretty(&self.meta())? + "\n").as_bytes())?;
        write(CONFIG_FILE, self.config.to_json()?.as_bytes())
    }

    /// Rebuilds the model described by `config` and fills it from `dir`.
    /// Fails when the stored tensors do not fit that model.
    pub fn load(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        let meta = CheckpointMeta::load(&dir.join(META_FILE))?;
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut cfg = config.clone();
        cfg.strategy = meta.strategy;
        let mut model = Model::build(&cfg, meta.seed)?;
        let mut r = Reader { buf: &blob, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::input(format!("{} is not a checkpoint blob", blob_path.display())));
        }
        read_store(&mut r, &mut model.detector_params)?;
        read_store(&mut r, &mut model.denoiser_params)?;
        let mut detector_optimizer = Optimizer::new(cfg.optimizer);
        let mut denoiser_optimizer = Optimizer::new(cfg.denoiser_optimizer());
        read_optimizer(&mut r, &mut detector_optimizer)?;
        read_optimizer(&mut r, &mut denoiser_optimizer)?;
        if r.pos != blob.len() {
            return Err(Error::input("trailing bytes in checkpoint blob"));
        }
        Ok(Checkpoint { config: cfg, seed: meta.seed, epoch: meta.epoch, history: meta.history, model, detector_optimizer, denoiser_optimizer })
    }
}
