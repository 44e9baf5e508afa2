#![allow(dead_code)]

use stgp::data::{Graph, SignalTensor};
use stgp::evalbench::{generate_synthetic, SynthSpec};
use stgp::TrainConfig;

/// A model small enough for a few seconds of training per stage.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        patch_len: 4,
        num_patches: 6,
        d_hidden: 8,
        heads: 2,
        ffn_mult: 2,
        enc_layers_temporal: 1,
        enc_layers_spatial: 1,
        max_hops: 3,
        d_dec: 8,
        dec_layers: 2,
        head_hidden: 8,
        head_hidden2: 8,
        num_prompts: 4,
        forecast_hist: 5,
        forecast_pred: 1,
        batch_size: 2,
        epochs_pretrain: 2,
        epochs_domain: 2,
        epochs_task: 2,
        max_batches_per_epoch: 4,
        val_stride: 6,
        ..TrainConfig::default()
    }
}

/// Hourly data: a 24-step window spans one day.
pub fn tiny_synth() -> SynthSpec {
    SynthSpec { num_nodes: 6, num_sources: 2, source_days: 6, target_days: 9, interval: 3600, radius: 0.6, ..SynthSpec::default() }
}

pub fn tiny_data() -> (Vec<(Graph, SignalTensor)>, (Graph, SignalTensor)) {
    let mut all = generate_synthetic(&tiny_synth()).unwrap();
    let target = all.pop().unwrap();
    (all, target)
}
