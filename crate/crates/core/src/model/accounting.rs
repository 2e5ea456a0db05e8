//! Closed-form parameter and multiply-accumulate counts.
//!
//! FLOPs are reported as `2 × MACs` over convolutions, transposed
//! convolutions and matrix products (attention included). Bias additions,
//! normalization, activations, softmax and pooling are not counted, and
//! padded taps count as ordinary taps.

use serde::Serialize;

use crate::error::Result;

use super::config::{UNesTConfig, HIERARCHIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelCost {
    pub params: u64,
    /// Multiply-accumulates of one forward pass on a single input volume.
    pub macs: u64,
    pub flops: u64,
}

const K3: u64 = 27;

fn conv_block_params(c_in: u64, c_out: u64) -> u64 {
    K3 * c_in * c_out + c_out + 2 * c_out
}

fn layer_params(d: u64, ratio: u64) -> u64 {
    let norms = 2 * (2 * d);
    let attn = d * 3 * d + 3 * d + d * d + d;
    let mlp = d * ratio * d + ratio * d + ratio * d * d + d;
    norms + attn + mlp
}

/// Per-token MACs of one encoder layer with `n` tokens per block.
fn layer_macs_per_token(d: u64, n: u64, ratio: u64) -> u64 {
    3 * d * d + 2 * n * d + d * d + 2 * ratio * d * d
}

pub fn count_params_flops(cfg: &UNesTConfig) -> Result<ModelCost> {
    let plan = cfg.schedule()?;
    let vol = |e: [usize; 3]| e.iter().map(|&v| v as u64).product::<u64>();
    let d: Vec<u64> = cfg.dims.iter().map(|&v| v as u64).collect();
    let ratio = cfg.mlp_ratio as u64;
    let p3 = (cfg.patch_size() as u64).pow(3);
    let grids: Vec<u64> = plan.iter().map(|h| vol(h.layout.grid)).collect();

    let mut params = d[0] * p3 + d[0];
    let mut macs = grids[0] * d[0] * p3;

    for (l, h) in plan.iter().enumerate() {
        let (dl, depth, n) = (d[l], h.depth as u64, h.tokens_per_block() as u64);
        params += grids[l] * dl;
        params += depth * layer_params(dl, ratio);
        macs += depth * grids[l] * layer_macs_per_token(dl, n, ratio);
        if l + 1 < HIERARCHIES {
            params += conv_block_params(dl, d[l + 1]);
            // Aggregation convolves before pooling; the ablation after.
            let conv_vox = if cfg.block_aggregation {
                grids[l]
            } else {
                grids[l + 1]
            };
            macs += conv_vox * K3 * dl * d[l + 1];
        }
    }

    let c: Vec<u64> = cfg
        .resolved_decoder_channels()
        .iter()
        .map(|&v| v as u64)
        .collect();
    let mut v = grids[HIERARCHIES - 1];
    params += conv_block_params(d[2], c[0]);
    macs += v * K3 * d[2] * c[0];
    for i in 0..HIERARCHIES - 1 {
        let (ci, co) = (c[i], c[i + 1]);
        params += ci * co * 8 + co;
        macs += v * ci * co * 8;
        v *= 8;
        let skip_dim = d[HIERARCHIES - 2 - i];
        params += conv_block_params(skip_dim, co) + conv_block_params(2 * co, co);
        macs += v * K3 * (skip_dim * co + 2 * co * co);
    }
    let n_up = cfg.upsample_stages();
    for j in 0..n_up {
        let (ci, co) = (c[HIERARCHIES - 1 + j], c[HIERARCHIES + j]);
        params += ci * co * 8 + co;
        macs += v * ci * co * 8;
        v *= 8;
        if j + 1 < n_up {
            params += conv_block_params(co, co);
            macs += v * K3 * co * co;
        }
    }
    let cl = *c.last().unwrap();
    let k = cfg.num_classes as u64;
    params += conv_block_params(1, cl) + conv_block_params(cl, cl) + conv_block_params(2 * cl, cl);
    macs += v * K3 * (cl + cl * cl + 2 * cl * cl);
    params += cl * k + k;
    macs += v * cl * k;

    Ok(ModelCost {
        params,
        macs,
        flops: 2 * macs,
    })
}
