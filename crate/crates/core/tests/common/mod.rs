#![allow(dead_code)]

use foley_bridge::backbone::{encode_prompt, init_backbone, BackboneConfig, BackboneParams, LatentSequence, TextTokens};
use foley_bridge::bridge::{init_bridge, BridgeParams, VideoTokens};
use foley_bridge::model;
use foley_bridge::nn::ParamSet;
use foley_bridge::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const D_VIDEO: usize = 4;

pub fn small_config() -> BackboneConfig {
    BackboneConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 2,
        d_text: 4,
        ..Default::default()
    }
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

/// Backbone, bridge with every tensor perturbed away from its init, and
/// inputs for a `[n_lat × n_vid]` instance.
pub struct Instance {
    pub backbone: BackboneParams<f64>,
    pub bridge: BridgeParams<f64>,
    pub a_t: LatentSequence<f64>,
    pub text: TextTokens<f64>,
    pub video: VideoTokens<f64>,
    pub target: Matrix<f64>,
}

pub fn instance(cfg: &BackboneConfig, n_lat: usize, n_vid: usize, seed: u64) -> Instance {
    let backbone = init_backbone::<f64>(cfg, seed).unwrap();
    let mut bridge = init_bridge::<f64>(cfg, D_VIDEO, seed + 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 2);
    for s in bridge.slices_mut() {
        for v in s.iter_mut() {
            *v += 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let positions: Vec<i64> = (0..n_vid as i64).map(|i| i * n_lat as i64 / n_vid as i64).collect();
    Instance {
        backbone,
        bridge,
        a_t: LatentSequence::new(gaussian(n_lat, cfg.d_model, seed + 3)).unwrap(),
        text: encode_prompt("door slam", cfg.d_text, 0),
        video: VideoTokens::new(gaussian(n_vid, D_VIDEO, seed + 4), positions).unwrap(),
        target: gaussian(n_lat, cfg.d_model, seed + 5),
    }
}

/// Run config small enough for end-to-end command runs in seconds.
pub const TINY_CONFIG: &str = r#"
seed = 3

[backbone]
n_blocks = 1
d_model = 8
n_heads = 2
d_text = 4

[synth]
d_latent = 8
d_video = 4
n_patches = 16

[prior]
steps = 20
batch_size = 2

[train]
steps = 20
batch_size = 2
checkpoint_every = 10

[eval]
n_steps = 4

[paths]
data_dir = "data"
run_dir = "run"
"#;

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli(args: &[&str]) -> CliOutput {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_foley-bridge"))
        .args(args)
        .env("FOLEY_BRIDGE_THREADS", "1")
        .output()
        .expect("binary runs");
    CliOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Write `config` into `dir` and generate a corpus of `n` clips under
/// `dir/data`. Returns the config path.
pub fn setup_run(dir: &std::path::Path, config: &str, n: usize) -> String {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let data = dir.join("data");
    let out = cli(&["gen-data", "--n", &n.to_string(), "--seed", "1", "--out", data.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    cfg
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Training log lines without the wall-clock field.
pub fn log_without_timing(path: &std::path::Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

const FD_T: f64 = 0.4;

fn fd_loss(inst: &Instance) -> f64 {
    let (out, _) = model::forward(&inst.backbone, Some(&inst.bridge), &inst.a_t, FD_T, &inst.text, Some(&inst.video)).unwrap();
    let d = out.sub(&inst.target).unwrap();
    d.sum_sq() / d.data().len() as f64
}

fn analytic_grads(inst: &Instance) -> BridgeParams<f64> {
    let (out, trace) = model::forward(&inst.backbone, Some(&inst.bridge), &inst.a_t, FD_T, &inst.text, Some(&inst.video)).unwrap();
    let n = out.data().len() as f64;
    let d_out = out.sub(&inst.target).unwrap().scale(2.0 / n);
    let mut g = inst.bridge.zeros_like();
    model::backward(&inst.backbone, Some(&inst.bridge), &trace, &d_out, Some(&mut g), None).unwrap();
    g
}

/// Central differences over every scalar of every bridge tensor.
pub fn grad_rel_errors(inst: &mut Instance) -> Vec<(String, f64)> {
    let h = 1e-5;
    let g = analytic_grads(inst);
    let names: Vec<String> = g.named().iter().map(|t| t.name.clone()).collect();
    let grads: Vec<Vec<f64>> = g.named().iter().map(|t| t.data.to_vec()).collect();
    let mut out = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..grads[ti].len() {
            let orig = inst.bridge.slices_mut()[ti][k];
            inst.bridge.slices_mut()[ti][k] = orig + h;
            let lp = fd_loss(inst);
            inst.bridge.slices_mut()[ti][k] = orig - h;
            let lm = fd_loss(inst);
            inst.bridge.slices_mut()[ti][k] = orig;
            let num = (lp - lm) / (2.0 * h);
            let a = grads[ti][k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        out.push((name.clone(), worst));
    }
    out
}
