//! Training loops for the frozen-backbone prior and the bridge, plus bridge
//! checkpoints (trainable tensors and optimizer state only).

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneParams;
use crate::blob::{Blob, Dtype};
use crate::bridge::BridgeParams;
use crate::config::PriorConfig;
use crate::diffusion::{prior_step, training_step, Adam, TrainConfig, TrainSample};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::{Purpose, RngStream};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
    pub drop_count: usize,
}

/// Indexed training examples, produced on demand.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<TrainSample<f64>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [TrainSample<f64>] {
    fn len(&self) -> usize {
        <[TrainSample<f64>]>::len(self)
    }

    fn get(&self, index: usize) -> Result<TrainSample<f64>> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<TrainSample<f64>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<TrainSample<f64>> {
        Ok(self[index].clone())
    }
}

/// Batch indices for `step`, drawn with replacement.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut r = RngStream::at(seed, step as u64).substream(Purpose::Batch, 0);
    (0..batch_size).map(|_| r.random_range(0..n)).collect()
}

fn load_batch(source: &dyn SampleSource, idx: &[usize]) -> Result<Vec<TrainSample<f64>>> {
    idx.iter().map(|&i| source.get(i)).collect()
}

/// What the step callback sees after each update.
pub struct StepEvent<'a> {
    pub record: &'a StepRecord,
    pub grads: &'a BridgeParams<f64>,
    pub bridge: &'a BridgeParams<f64>,
    pub adam: &'a Adam,
}

/// Run bridge steps `start..end`. Every step's draws depend only on
/// `(cfg.seed, step)`, so a resumed run repeats the uninterrupted one.
pub fn train_bridge(
    source: &dyn SampleSource,
    backbone: &BackboneParams<f64>,
    bridge: &mut BridgeParams<f64>,
    adam: &mut Adam,
    cfg: &TrainConfig,
    range: std::ops::Range<usize>,
    mut on_step: impl FnMut(StepEvent<'_>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut log = Vec::with_capacity(range.len());
    for step in range {
        let t0 = Instant::now();
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, source.len());
        let batch = load_batch(source, &idx)?;
        let rng = RngStream::at(cfg.seed, step as u64);
        let out = training_step(&batch, backbone, bridge, cfg, &rng)?;
        adam.update(bridge, &out.grads);
        let record = StepRecord {
            step,
            loss: out.loss,
            wall_ms: t0.elapsed().as_millis() as u64,
            drop_count: out.drop_count,
        };
        on_step(StepEvent {
            record: &record,
            grads: &out.grads,
            bridge,
            adam,
        })?;
        log.push(record);
    }
    Ok(log)
}

/// Fit the backbone as a text-conditioned prior (no video). Used once,
/// before the backbone is frozen.
pub fn fit_prior(
    source: &dyn SampleSource,
    backbone: &mut BackboneParams<f64>,
    cfg: &PriorConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if source.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let tc = TrainConfig {
        token_drop_p: cfg.text_drop_p,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(cfg.lr, backbone);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let idx = batch_indices(seed, step, cfg.batch_size, source.len());
        let batch = load_batch(source, &idx)?;
        let out = prior_step(&batch, backbone, &tc, &RngStream::at(seed, step as u64))?;
        // Cosine decay keeps the final prior stable.
        adam.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        adam.update(backbone, &out.grads);
        let record = StepRecord {
            step,
            loss: out.loss,
            wall_ms: t0.elapsed().as_millis() as u64,
            drop_count: 0,
        };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}

/// Restored training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub bridge: BridgeParams<f64>,
    pub adam: Adam,
    /// Number of completed steps.
    pub step: usize,
    pub config_hash: String,
}

pub fn checkpoint_blob(bridge: &BridgeParams<f64>, adam: &Adam, step: usize, config_hash: &str) -> Blob {
    let mut b = Blob::new(Dtype::F64);
    b.push_params(bridge);
    let named = bridge.named();
    for (t, m) in named.iter().zip(&adam.m) {
        b.push(format!("adam.m.{}", t.name), t.shape.clone(), m.clone());
    }
    for (t, v) in named.iter().zip(&adam.v) {
        b.push(format!("adam.v.{}", t.name), t.shape.clone(), v.clone());
    }
    b.meta.insert("kind".into(), Value::from("bridge_checkpoint"));
    b.meta.insert("step".into(), Value::from(step));
    b.meta.insert("adam_step".into(), Value::from(adam.step));
    b.meta.insert("lr".into(), Value::from(adam.lr));
    b.meta.insert("config_hash".into(), Value::from(config_hash));
    b
}

pub fn save_checkpoint(
    stem: &Path,
    bridge: &BridgeParams<f64>,
    adam: &Adam,
    step: usize,
    config_hash: &str,
) -> Result<()> {
    checkpoint_blob(bridge, adam, step, config_hash).write(stem)
}

/// Load a checkpoint into the shape of `template`.
pub fn load_checkpoint(stem: &Path, template: &BridgeParams<f64>) -> Result<Checkpoint> {
    let blob = Blob::read(stem)?;
    if blob.meta_str("kind") != Some("bridge_checkpoint") {
        return Err(Error::Format(format!("{} is not a bridge checkpoint", stem.display())));
    }
    let mut bridge = template.clone();
    blob.load_params(&mut bridge)?;
    let lr = blob.meta.get("lr").and_then(Value::as_f64).unwrap_or(1e-3);
    let mut adam = Adam::new(lr, &bridge);
    for (i, t) in bridge.named().iter().enumerate() {
        adam.m[i] = blob.require(&format!("adam.m.{}", t.name))?.1.to_vec();
        adam.v[i] = blob.require(&format!("adam.v.{}", t.name))?.1.to_vec();
    }
    let int = |k: &str| {
        blob.meta
            .get(k)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format(format!("checkpoint missing {k}")))
    };
    adam.step = int("adam_step")?;
    Ok(Checkpoint {
        bridge,
        adam,
        step: int("step")? as usize,
        config_hash: blob.meta_str("config_hash").unwrap_or_default().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};
    use crate::bridge::init_bridge;

    #[test]
    fn batch_indices_depend_on_step_only() {
        let a = batch_indices(3, 10, 8, 100);
        assert_eq!(a, batch_indices(3, 10, 8, 100));
        assert_ne!(a, batch_indices(3, 11, 8, 100));
        assert!(a.iter().all(|&i| i < 100));
    }

    #[test]
    fn checkpoint_roundtrip_holds_only_bridge_tensors() {
        let cfg = BackboneConfig {
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_text: 4,
            ..Default::default()
        };
        let bb = init_backbone::<f64>(&cfg, 1).unwrap();
        let br = init_bridge::<f64>(&cfg, 4, 2).unwrap();
        let mut adam = Adam::new(1e-3, &br);
        adam.step = 7;
        adam.m[0][0] = 0.5;
        let b = checkpoint_blob(&br, &adam, 7, "abc");
        assert!(b.names().all(|n| !n.starts_with("backbone")));
        let (h, d) = b.encode().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        std::fs::write(dir.path().join("ck.json"), h).unwrap();
        std::fs::write(dir.path().join("ck.bin"), d).unwrap();
        let ck = load_checkpoint(&stem, &br).unwrap();
        assert_eq!(ck.bridge, br);
        assert_eq!(ck.adam, adam);
        assert_eq!((ck.step, ck.config_hash.as_str()), (7, "abc"));
        assert!(bb.named().iter().all(|t| b.get(&t.name).is_none()));
    }
}
