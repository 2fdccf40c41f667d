//! Binary checkpoint files. Layout is described in `docs/file-formats.md`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StepMetrics, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::optim::AdamW;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"REJEPACK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    epoch: u64,
    n_train: usize,
    optimizer_t: u64,
    history: Vec<StepMetrics>,
}

fn tensors(state: &TrainState) -> Vec<(String, &[f64])> {
    let mut out = state.model.all_params();
    for (i, name) in state.optimizer.names.iter().enumerate() {
        out.push((format!("optim.m.{name}"), &state.optimizer.m[i][..]));
        out.push((format!("optim.v.{name}"), &state.optimizer.v[i][..]));
    }
    out
}

/// Writes `state` atomically (temporary file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = Meta {
        model: state.model.config.clone(),
        train: state.config.clone(),
        step: state.step,
        epoch: state.epoch,
        n_train: state.n_train,
        optimizer_t: state.optimizer.t,
        history: state.history.clone(),
    };
    let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let tensors = tensors(state);
    let mut buf = Vec::with_capacity(meta.len() + 8 * tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, values) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0, path };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = cur.u64()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
    let mut model = ModelState::build(meta.model, meta.train.seed)
        .map_err(|e| Error::format(path, format!("bad model config: {e}")))?;
    let mut optimizer = AdamW::new(&model.trainable_params());
    optimizer.t = meta.optimizer_t;

    let n = cur.u32()? as usize;
    let mut table = std::collections::BTreeMap::new();
    for _ in 0..n {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let count = cur.u64()? as usize;
        let raw = cur.take(count.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if table.insert(name.clone(), values).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    if cur.pos != data.len() {
        return Err(Error::format(path, "trailing bytes after tensor table"));
    }

    let mut fill = |name: &str, dst: &mut [f64]| -> Result<()> {
        let src = table
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if src.len() != dst.len() {
            return Err(Error::format(
                path,
                format!("tensor {name} has {} values, expected {}", src.len(), dst.len()),
            ));
        }
        dst.copy_from_slice(&src);
        Ok(())
    };
    let names: Vec<String> = model.all_params().into_iter().map(|(n, _)| n).collect();
    for (name, dst) in names.iter().zip(model.all_params_mut()) {
        fill(name, dst)?;
    }
    for i in 0..optimizer.names.len() {
        let name = optimizer.names[i].clone();
        fill(&format!("optim.m.{name}"), &mut optimizer.m[i])?;
        fill(&format!("optim.v.{name}"), &mut optimizer.v[i])?;
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    Ok(TrainState {
        model,
        config: meta.train,
        optimizer,
        step: meta.step,
        epoch: meta.epoch,
        n_train: meta.n_train,
        history: meta.history,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_setup;
    use super::super::{fit, FitOptions};
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let (mc, tc, data) = small_setup(1);
        let mut state = TrainState::new(mc, tc, data.len()).unwrap();
        fit(&mut state, &data, &FitOptions { stop_at_step: Some(2), ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&state, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded, state);
        let q = dir.path().join("b.ckpt");
        save_checkpoint(&loaded, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (mc, tc, data) = small_setup(1);
        let state = TrainState::new(mc, tc, data.len()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&state, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
