//! A freshly initialized bridge leaves the frozen backbone's output unchanged,
//! and only bridge tensors are marked trainable.

use foley_bridge::backbone::{backbone_forward, encode_prompt, init_backbone, LatentSequence};
use foley_bridge::bridge::{bridged_forward, init_bridge, trainable_mask, VideoTokens};
use foley_bridge::config::RunConfig;
use foley_bridge::nn::ParamSet;
use foley_bridge::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> foley_bridge::Result<()> {
    let cfg = RunConfig::default();
    let (bc, d_video) = (&cfg.backbone, cfg.synth.d_video);
    let backbone = init_backbone::<f32>(bc, 0)?;
    let bridge = init_bridge::<f32>(bc, d_video, 1)?;

    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a_t = LatentSequence::new(Matrix::from_fn(32, bc.d_model, |_, _| r.sample::<f32, _>(StandardNormal)))?;
    let video = VideoTokens::new(
        Matrix::from_fn(32, d_video, |_, _| r.sample::<f32, _>(StandardNormal)),
        (0..32).collect(),
    )?;
    let text = encode_prompt("knock", bc.d_text, 0);

    let plain = backbone_forward(&a_t, 0.5, &text, &backbone)?;
    let bridged = bridged_forward(&a_t, 0.5, &text, &video, &backbone, &bridge)?;
    println!("max |bridged - plain| = {:e}", bridged.tokens.max_abs_diff(&plain.tokens));

    let mask = trainable_mask(&backbone, &bridge);
    let count = |sizes: Vec<usize>| sizes.into_iter().sum::<usize>();
    let n_bridge = count(bridge.named().iter().map(|t| t.data.len()).collect());
    let n_backbone = count(backbone.named().iter().map(|t| t.data.len()).collect());
    println!("{} trainable modules, e.g. {:?}", mask.len(), mask.iter().take(6).collect::<Vec<_>>());
    println!("parameters: bridge {n_bridge}, frozen backbone {n_backbone}");
    Ok(())
}
