//! Checkpoint serialization for training runs.
//!
//! Layout: `AISM` magic, u32 version, a length-prefixed canonical `key =
//! value` configuration block, a manifest of named f32 arrays, then the
//! packed payload. The names encode what each array is: `param/...` model
//! parameters, `adam_task.m/...` / `.v/...` optimizer moments (`adam_conf`
//! for the confidence optimizer), and `store/{seq}/{frame}/{s|h}` carried
//! state. Everything needed to resume — including the cross-window state
//! store — is in the file; random streams are derived from the seed and step
//! counters, so no generator state is stored.
//!
//! Values are quantized to f32 on disk. `save` applies the same quantization
//! to the live run before writing, so a run that keeps going in memory and a
//! run resumed from its checkpoint stay bit-identical from that point on.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::config::{canonical, KvConfig};
use crate::model::{Carried, Model, ModelConfig, ModelError, ModelKind};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::train::{StateStore, TrainConfig, TrainRun};

const MAGIC: &[u8; 4] = b"AISM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn push_block(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Entry {
    name: String,
    data: Vec<f64>,
}

fn collect_entries(run: &TrainRun) -> Vec<Entry> {
    let mut out = Vec::new();
    for (name, t) in run.model.params.iter() {
        out.push(Entry { name: format!("param/{name}"), data: t.data().to_vec() });
    }
    let adam = |label: &str, opt: &AdamState, out: &mut Vec<Entry>| {
        for name in opt.owned_names() {
            let m = opt.moments(name).expect("owned name");
            out.push(Entry { name: format!("{label}.m/{name}"), data: m.m.clone() });
            out.push(Entry { name: format!("{label}.v/{name}"), data: m.v.clone() });
        }
    };
    adam("adam_task", &run.opt_task, &mut out);
    if let Some(opt) = run.opt_conf.as_ref() {
        adam("adam_conf", opt, &mut out);
    }
    for (&(seq, frame), c) in run.store.entries() {
        if !c.s.is_empty() {
            out.push(Entry { name: format!("store/{seq}/{frame}/s"), data: c.s.clone() });
        }
        if !c.h.is_empty() {
            out.push(Entry { name: format!("store/{seq}/{frame}/h"), data: c.h.clone() });
        }
    }
    out
}

fn config_block(run: &TrainRun, tcfg: &TrainConfig) -> String {
    let mut pairs = BTreeMap::new();
    run.model.cfg.to_pairs(&mut pairs);
    tcfg.to_pairs(&mut pairs);
    pairs.insert("model".into(), run.model.kind.as_str().into());
    pairs.insert("sensor_width".into(), run.model.width.to_string());
    pairs.insert("sensor_height".into(), run.model.height.to_string());
    pairs.insert("epochs_done".into(), run.epochs_done.to_string());
    pairs.insert("steps_done".into(), run.steps_done.to_string());
    pairs.insert("adam_task_steps".into(), run.opt_task.step_count().to_string());
    if let Some(opt) = run.opt_conf.as_ref() {
        pairs.insert("adam_conf_steps".into(), opt.step_count().to_string());
    }
    canonical(&pairs)
}

/// Serialize after quantizing the live run (see module docs).
pub fn save_to_bytes(run: &mut TrainRun, tcfg: &TrainConfig) -> Vec<u8> {
    run.quantize();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    push_block(&mut buf, config_block(run, tcfg).as_bytes());

    let entries = collect_entries(run);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        push_block(&mut buf, e.name.as_bytes());
        buf.extend_from_slice(&(e.data.len() as u32).to_le_bytes());
    }
    for e in &entries {
        for &v in &e.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn save(path: &Path, run: &mut TrainRun, tcfg: &TrainConfig) -> Result<(), CkptError> {
    let bytes = save_to_bytes(run, tcfg);
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.at + n > self.buf.len() {
            return Err(CkptError::Truncated);
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8], CkptError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Header fields and manifest summary, without materializing the payload.
#[derive(Debug, Clone)]
pub struct CkptInfo {
    pub version: u32,
    pub config: String,
    pub n_entries: usize,
    pub n_values: usize,
    pub n_params: usize,
    pub n_store_entries: usize,
}

pub fn inspect_bytes(bytes: &[u8]) -> Result<CkptInfo, CkptError> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CkptError::BadVersion(version));
    }
    let config = std::str::from_utf8(r.block()?)
        .map_err(|_| CkptError::Malformed("config block is not UTF-8".into()))?
        .to_string();
    let n_entries = r.u32()? as usize;
    let mut n_values = 0usize;
    let mut n_params = 0usize;
    let mut store_keys = std::collections::BTreeSet::new();
    for _ in 0..n_entries {
        let name = std::str::from_utf8(r.block()?)
            .map_err(|_| CkptError::Malformed("entry name is not UTF-8".into()))?;
        let len = r.u32()? as usize;
        n_values += len;
        if let Some(p) = name.strip_prefix("param/") {
            n_params += len;
            let _ = p;
        } else if let Some(rest) = name.strip_prefix("store/") {
            let mut it = rest.split('/');
            if let (Some(seq), Some(frame)) = (it.next(), it.next()) {
                store_keys.insert((seq.to_string(), frame.to_string()));
            }
        }
    }
    // Payload must be exactly the promised size.
    if bytes.len() - r.at != n_values * 4 {
        return Err(CkptError::Truncated);
    }
    Ok(CkptInfo {
        version,
        config,
        n_entries,
        n_values,
        n_params,
        n_store_entries: store_keys.len(),
    })
}

pub fn inspect(path: &Path) -> Result<CkptInfo, CkptError> {
    inspect_bytes(&std::fs::read(path)?)
}

pub fn load_from_bytes(bytes: &[u8]) -> Result<(TrainRun, TrainConfig), CkptError> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CkptError::BadVersion(version));
    }
    let config_text = std::str::from_utf8(r.block()?)
        .map_err(|_| CkptError::Malformed("config block is not UTF-8".into()))?
        .to_string();

    let n_entries = r.u32()? as usize;
    let mut names = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name = std::str::from_utf8(r.block()?)
            .map_err(|_| CkptError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let len = r.u32()? as usize;
        names.push((name, len));
    }
    let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, len) in names {
        let raw = r.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if arrays.insert(name.clone(), data).is_some() {
            return Err(CkptError::Malformed(format!("duplicate entry `{name}`")));
        }
    }
    if r.at != bytes.len() {
        return Err(CkptError::Malformed("trailing bytes after payload".into()));
    }

    // The canonical block parses back through the ordinary config path.
    let mut kv = KvConfig::parse(&config_text)?;
    let kind: ModelKind = kv
        .require_str("model")?
        .parse()
        .map_err(CkptError::Malformed)?;
    let width = kv.get_usize("sensor_width", 0)?;
    let height = kv.get_usize("sensor_height", 0)?;
    let epochs_done = kv.get_usize("epochs_done", 0)?;
    let steps_done = kv.get_u64("steps_done", 0)?;
    let adam_task_steps = kv.get_u64("adam_task_steps", 0)?;
    let adam_conf_steps = kv.get_u64("adam_conf_steps", 0)?;
    let mcfg = ModelConfig::from_kv(kind, &mut kv)?;
    let tcfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;

    // Rebuild the skeleton, then overwrite every tensor from the payload.
    let mut model = Model::new(kind, mcfg, width, height, tcfg.seed)?;
    let param_names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for name in &param_names {
        let stored = arrays
            .remove(&format!("param/{name}"))
            .ok_or_else(|| CkptError::Malformed(format!("missing parameter `{name}`")))?;
        let t = model
            .params
            .get_mut(name)
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        if stored.len() != t.len() {
            return Err(CkptError::Malformed(format!(
                "parameter `{name}` has {} values, expected {}",
                stored.len(),
                t.len()
            )));
        }
        t.data_mut().copy_from_slice(&stored);
    }

    let adam_cfg = AdamConfig { lr: tcfg.lr, ..AdamConfig::default() };
    let mut take_adam = |label: &str,
                         names: &[String],
                         t: u64|
     -> Result<AdamState, CkptError> {
        let mut moments = BTreeMap::new();
        for name in names {
            let m = arrays
                .remove(&format!("{label}.m/{name}"))
                .ok_or_else(|| CkptError::Malformed(format!("missing {label}.m/{name}")))?;
            let v = arrays
                .remove(&format!("{label}.v/{name}"))
                .ok_or_else(|| CkptError::Malformed(format!("missing {label}.v/{name}")))?;
            moments.insert(name.clone(), Moments { m, v });
        }
        Ok(AdamState::from_parts(adam_cfg, t, moments))
    };
    let opt_task = take_adam("adam_task", &model.task_param_names(), adam_task_steps)?;
    let opt_conf = match kind {
        ModelKind::Aissm => {
            Some(take_adam("adam_conf", &model.conf_param_names(), adam_conf_steps)?)
        }
        _ => None,
    };

    let mut store_map: BTreeMap<(usize, usize), Carried> = BTreeMap::new();
    let store_names: Vec<String> = arrays
        .keys()
        .filter(|k| k.starts_with("store/"))
        .cloned()
        .collect();
    for name in store_names {
        let data = arrays.remove(&name).unwrap();
        let parts: Vec<&str> = name.split('/').collect();
        let bad = || CkptError::Malformed(format!("bad store entry `{name}`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let seq: usize = parts[1].parse().map_err(|_| bad())?;
        let frame: usize = parts[2].parse().map_err(|_| bad())?;
        let slot = store_map
            .entry((seq, frame))
            .or_insert_with(|| Carried { s: Vec::new(), h: Vec::new() });
        match parts[3] {
            "s" => slot.s = data,
            "h" => slot.h = data,
            _ => return Err(bad()),
        }
    }
    if let Some(name) = arrays.keys().next() {
        return Err(CkptError::Malformed(format!("unexpected entry `{name}`")));
    }

    Ok((
        TrainRun {
            model,
            opt_task,
            opt_conf,
            store: StateStore::from_entries(store_map),
            epochs_done,
            steps_done,
        },
        tcfg,
    ))
}

pub fn load(path: &Path) -> Result<(TrainRun, TrainConfig), CkptError> {
    load_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_dataset, SynthConfig};
    use crate::tensor::ParameterSet;
    use crate::train::{prepare, train_epochs, LogEvent};
    use crate::event::Dataset;

    fn tiny_run(epochs: usize) -> (TrainRun, TrainConfig, crate::train::TrainData) {
        let scfg = SynthConfig {
            width: 16,
            height: 12,
            n_sequences: 3,
            duration_us: 2_000_000,
            pupil_radius_px: 2.0,
            noise_rate_hz: 200.0,
            ..Default::default()
        };
        let ds = Dataset {
            width: scfg.width,
            height: scfg.height,
            window_us: scfg.window_us,
            sequences: generate_dataset(&scfg),
        };
        let tcfg = TrainConfig {
            batch_size: 4,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let data = prepare(&ds, &tcfg).unwrap();
        let mcfg = ModelConfig {
            n_vars: 2,
            n_classes: 3,
            d_r: 4,
            conv_channels: vec![2, 3],
            mlp_widths: vec![6],
            ..ModelConfig::default_for(ModelKind::Aissm)
        };
        let model = Model::new(ModelKind::Aissm, mcfg, 16, 12, 5).unwrap();
        let mut run = TrainRun::new(model, &tcfg).unwrap();
        let mut sink = |_: &LogEvent| {};
        train_epochs(&mut run, &data, &tcfg, epochs, &mut sink).unwrap();
        (run, tcfg, data)
    }

    fn param_bits(ps: &ParameterSet) -> Vec<u64> {
        ps.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn roundtrip_restores_every_field_bitwise() {
        let (mut run, tcfg, _) = tiny_run(2);
        let bytes = save_to_bytes(&mut run, &tcfg);
        let (loaded, tcfg2) = load_from_bytes(&bytes).unwrap();

        assert_eq!(param_bits(&run.model.params), param_bits(&loaded.model.params));
        assert_eq!(run.epochs_done, loaded.epochs_done);
        assert_eq!(run.steps_done, loaded.steps_done);
        assert_eq!(run.opt_task.step_count(), loaded.opt_task.step_count());
        assert_eq!(run.store, loaded.store);
        assert_eq!(tcfg.window_len, tcfg2.window_len);
        assert_eq!(tcfg.lr, tcfg2.lr);
        for name in run.opt_task.owned_names() {
            let a = run.opt_task.moments(name).unwrap();
            let b = loaded.opt_task.moments(name).unwrap();
            assert_eq!(a.m, b.m, "first moment drifted for {name}");
            assert_eq!(a.v, b.v, "second moment drifted for {name}");
        }
        let (oa, ob) = (run.opt_conf.as_ref().unwrap(), loaded.opt_conf.as_ref().unwrap());
        assert_eq!(oa.step_count(), ob.step_count());
    }

    #[test]
    fn resuming_matches_training_straight_through() {
        // Continuous: 1 epoch, quantize sync at the checkpoint, then 1 more.
        let (mut cont, tcfg, data) = tiny_run(1);
        let bytes = save_to_bytes(&mut cont, &tcfg);
        let mut sink = |_: &LogEvent| {};
        train_epochs(&mut cont, &data, &tcfg, 2, &mut sink).unwrap();

        // Resumed: reload the epoch-1 checkpoint and train the same epoch.
        let (mut resumed, tcfg2) = load_from_bytes(&bytes).unwrap();
        train_epochs(&mut resumed, &data, &tcfg2, 2, &mut sink).unwrap();

        assert_eq!(
            param_bits(&cont.model.params),
            param_bits(&resumed.model.params),
            "resume diverged from continuous training"
        );
        assert_eq!(cont.store, resumed.store);
    }

    #[test]
    fn corrupt_files_fail_loudly() {
        let (mut run, tcfg, _) = tiny_run(1);
        let good = save_to_bytes(&mut run, &tcfg);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(load_from_bytes(&bad_magic), Err(CkptError::BadMagic)));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(load_from_bytes(&bad_version), Err(CkptError::BadVersion(9))));

        let truncated = &good[..good.len() - 5];
        assert!(matches!(load_from_bytes(truncated), Err(CkptError::Truncated)));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(load_from_bytes(&trailing), Err(CkptError::Malformed(_))));
    }

    #[test]
    fn inspect_reports_the_manifest_without_loading() {
        let (mut run, tcfg, _) = tiny_run(1);
        let bytes = save_to_bytes(&mut run, &tcfg);
        let info = inspect_bytes(&bytes).unwrap();
        assert_eq!(info.version, 1);
        assert_eq!(info.n_params, run.model.param_count());
        assert_eq!(info.n_store_entries, run.store.len());
        assert!(info.config.contains("model = aissm"));
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(inspect_bytes(truncated), Err(CkptError::Truncated)));
    }
}
