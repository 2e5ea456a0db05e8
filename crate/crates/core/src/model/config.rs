use serde::{Deserialize, Serialize};

use crate::blockops::{BlockLayout, PatchSpec};
use crate::error::{Error, Result};

/// Number of encoder hierarchies.
pub const HIERARCHIES: usize = 3;

/// Blocks per axis at the first hierarchy; each aggregation halves it,
/// giving 4³, 2³, 1³ = [64, 8, 1] blocks.
pub const FIRST_BLOCKS_PER_AXIS: usize = 4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNesTConfig {
    /// Input sub-volume extents `(D, H, W)`.
    pub input_size: [usize; 3],
    /// Patch extents `(S_d, S_h, S_w)`; must be cubic and a power of two.
    pub patch: [usize; 3],
    /// Embedding width per hierarchy.
    pub dims: [usize; 3],
    pub heads: [usize; 3],
    /// Transformer layers per hierarchy.
    pub depths: [usize; 3],
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Decoder widths from the coarsest level to full resolution. `None`
    /// means `(d3, d2, d1, d1/2, d1/4, ...)`, one extra halving per ×2
    /// upsampling stage between the token grid and full resolution.
    #[serde(default)]
    pub decoder_channels: Option<Vec<usize>>,
    /// Dropout on the MLP hidden layer and residual branch outputs.
    #[serde(default)]
    pub drop_rate: f64,
    /// Dropout on attention probabilities.
    #[serde(default)]
    pub attn_drop_rate: f64,
    /// `false` selects the ablation encoder: one global block per hierarchy
    /// and plain strided pooling between hierarchies.
    #[serde(default = "default_true")]
    pub block_aggregation: bool,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

/// Shape plan of one encoder hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierarchyPlan {
    pub layout: BlockLayout,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl HierarchyPlan {
    pub fn num_blocks(&self) -> usize {
        self.layout.num_blocks()
    }

    pub fn tokens_per_block(&self) -> usize {
        self.layout.tokens_per_block()
    }
}

impl UNesTConfig {
    /// Test-scale configuration: 32³ input, patch 4³, dims (32, 64, 128).
    pub fn reference_tiny() -> Self {
        Self {
            input_size: [32; 3],
            patch: [4; 3],
            dims: [32, 64, 128],
            heads: [2, 4, 8],
            depths: [2, 2, 2],
            mlp_ratio: 4,
            num_classes: 4,
            decoder_channels: None,
            drop_rate: 0.0,
            attn_drop_rate: 0.0,
            block_aggregation: true,
        }
    }

    /// Full-scale guess at 96³. Layer widths for the full model are unknown, so these
    /// values only reproduce the order of magnitude of the reported size.
    pub fn reference_large() -> Self {
        Self {
            input_size: [96; 3],
            patch: [4; 3],
            dims: [128, 256, 512],
            heads: [4, 8, 16],
            depths: [2, 2, 8],
            ..Self::reference_tiny()
        }
    }

    /// Smallest configuration used for end-to-end gradient checks.
    pub fn micro() -> Self {
        Self {
            input_size: [16; 3],
            patch: [2; 3],
            dims: [8, 16, 32],
            heads: [2, 2, 4],
            depths: [1, 1, 1],
            mlp_ratio: 2,
            num_classes: 3,
            decoder_channels: None,
            drop_rate: 0.0,
            attn_drop_rate: 0.0,
            block_aggregation: true,
        }
    }

    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            patch: self.patch,
            embed_dim: self.dims[0],
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch[0]
    }

    /// Number of ×2 upsampling stages between the token grid and full resolution.
    pub fn upsample_stages(&self) -> usize {
        self.patch_size().trailing_zeros() as usize
    }

    pub fn resolved_decoder_channels(&self) -> Vec<usize> {
        if let Some(c) = &self.decoder_channels {
            return c.clone();
        }
        let [d1, d2, d3] = self.dims;
        let mut c = vec![d3, d2, d1];
        let mut w = d1;
        for _ in 0..self.upsample_stages() {
            w = (w / 2).max(1);
            c.push(w);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let [p, ph, pw] = self.patch;
        if p != ph || ph != pw || !p.is_power_of_two() {
            return cfg_err(format!(
                "patch must be cubic with a power-of-two extent, got {:?}",
                self.patch
            ));
        }
        for l in 0..HIERARCHIES {
            if self.dims[l] == 0
                || self.heads[l] == 0
                || !self.dims[l].is_multiple_of(self.heads[l])
            {
                return cfg_err(format!(
                    "hierarchy {}: dim {} is not divisible by {} heads",
                    l + 1,
                    self.dims[l],
                    self.heads[l]
                ));
            }
        }
        if self.num_classes < 2 {
            return cfg_err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.mlp_ratio == 0 {
            return cfg_err("mlp_ratio must be positive".into());
        }
        for (name, r) in [
            ("drop_rate", self.drop_rate),
            ("attn_drop_rate", self.attn_drop_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return cfg_err(format!("{name} must lie in [0, 1), got {r}"));
            }
        }
        let grid = self.patch_spec().grid(self.input_size)?;
        let factor = FIRST_BLOCKS_PER_AXIS.max(1 << (HIERARCHIES - 1));
        if grid.iter().any(|&e| e % factor != 0) {
            return cfg_err(format!(
                "token grid {grid:?} must be divisible by {factor} on every axis \
                 (input divisible by patch x {factor})"
            ));
        }
        let channels = self.resolved_decoder_channels();
        let want = HIERARCHIES + self.upsample_stages();
        if channels.len() != want || channels.contains(&0) {
            return cfg_err(format!(
                "decoder_channels needs {want} positive widths, got {channels:?}"
            ));
        }
        Ok(())
    }

    /// Token grid at the first hierarchy.
    pub fn token_grid(&self) -> Result<[usize; 3]> {
        self.patch_spec().grid(self.input_size)
    }

    /// Per-hierarchy block layout, width and depth. With block aggregation
    /// the block counts are [64, 8, 1]; the ablation uses one block each.
    pub fn schedule(&self) -> Result<[HierarchyPlan; HIERARCHIES]> {
        self.validate()?;
        let grid = self.token_grid()?;
        let first = if self.block_aggregation {
            BlockLayout::new(grid, [FIRST_BLOCKS_PER_AXIS; 3])?
        } else {
            BlockLayout::new(grid, [1; 3])?
        };
        let mut layouts = [first; HIERARCHIES];
        for l in 1..HIERARCHIES {
            layouts[l] = layouts[l - 1].aggregated()?;
        }
        Ok([0, 1, 2].map(|l| HierarchyPlan {
            layout: layouts[l],
            dim: self.dims[l],
            heads: self.heads[l],
            depth: self.depths[l],
        }))
    }
}
