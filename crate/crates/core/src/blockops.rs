//! Volumetric patch embedding, blockify/deblockify and 3D block aggregation.
//!
//! Axis convention is `(D, H, W)` in C order everywhere. A token grid is laid
//! out channels-last as `[b, gD, gH, gW, d]`; a blocked sequence is
//! `[b, T, n, d]` where block `t` covers a contiguous sub-cube of the grid.
//! Blocks are numbered row-major over `(bD, bH, bW)` and tokens inside a block
//! are row-major over the sub-cube (depth, then height, then width).

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Grid extents plus how many blocks tile each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockLayout {
    pub grid: [usize; 3],
    pub blocks_per_axis: [usize; 3],
}

impl BlockLayout {
    pub fn new(grid: [usize; 3], blocks_per_axis: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if grid[a] == 0
                || blocks_per_axis[a] == 0
                || !grid[a].is_multiple_of(blocks_per_axis[a])
            {
                return Err(Error::Config(format!(
                    "grid {grid:?} is not divisible into {blocks_per_axis:?} blocks"
                )));
            }
        }
        Ok(Self {
            grid,
            blocks_per_axis,
        })
    }

    /// Number of blocks `T`.
    pub fn num_blocks(&self) -> usize {
        self.blocks_per_axis.iter().product()
    }

    /// Extent of one block along each axis.
    pub fn block_extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.grid[a] / self.blocks_per_axis[a])
    }

    /// Tokens per block `n`.
    pub fn tokens_per_block(&self) -> usize {
        self.block_extent().iter().product()
    }

    pub fn grid_volume(&self) -> usize {
        self.grid.iter().product()
    }

    /// Layout after one aggregation: every grid axis halves and adjacent
    /// 2x2x2 groups of blocks merge.
    pub fn aggregated(&self) -> Result<Self> {
        for a in 0..3 {
            if !self.grid[a].is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "aggregation needs even grid extents, got {:?}",
                    self.grid
                )));
            }
            let b = self.blocks_per_axis[a];
            if b != 1 && !b.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "aggregation needs even (or unit) blocks per axis, got {:?}",
                    self.blocks_per_axis
                )));
            }
        }
        Self::new(
            self.grid.map(|e| e / 2),
            self.blocks_per_axis.map(|b| (b / 2).max(1)),
        )
    }
}

/// Blocked sequence `[b, T, n, d]` on a graph, with the layout needed to
/// restore the token grid.
#[derive(Debug, Clone, Copy)]
pub struct BlockSet {
    pub data: Var,
    pub batch: usize,
    pub dim: usize,
    pub layout: BlockLayout,
}

impl BlockSet {
    pub fn num_blocks(&self) -> usize {
        self.layout.num_blocks()
    }

    pub fn tokens_per_block(&self) -> usize {
        self.layout.tokens_per_block()
    }
}

/// Patch size and embedding width of the volumetric tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch: [usize; 3],
    pub embed_dim: usize,
}

impl PatchSpec {
    /// Token grid for an input volume, checking divisibility.
    pub fn grid(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        for a in 0..3 {
            if self.patch[a] == 0 || !input[a].is_multiple_of(self.patch[a]) {
                return Err(Error::Config(format!(
                    "input {input:?} is not divisible by patch {:?}",
                    self.patch
                )));
            }
        }
        Ok([0, 1, 2].map(|a| input[a] / self.patch[a]))
    }

    fn cubic_patch(&self) -> Result<usize> {
        let [d, h, w] = self.patch;
        if d != h || h != w {
            return Err(Error::Config(format!(
                "only cubic patches are supported, got {:?}",
                self.patch
            )));
        }
        Ok(d)
    }
}

/// Tokenizes `x: [b, 1, D, H, W]` into `[b, gD, gH, gW, d]` with a convolution
/// whose kernel and stride equal the patch size.
///
/// `weight` is `[d, 1, p, p, p]` and `bias` is `[d]`.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &PatchSpec,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::Dimension(format!(
            "patch_embed expects [b, 1, D, H, W], got {s:?}"
        )));
    }
    spec.grid([s[2], s[3], s[4]])?;
    let p = spec.cubic_patch()?;
    let tokens = g.conv3d(x, weight, Some(bias), p, 0)?;
    g.permute(tokens, &[0, 2, 3, 4, 1])
}

/// `[b, gD, gH, gW, d]` → `[b, T, n, d]`.
pub fn blockify<T: Scalar>(
    g: &mut Graph<T>,
    grid_feats: Var,
    blocks_per_axis: [usize; 3],
) -> Result<BlockSet> {
    let s = g.shape(grid_feats).to_vec();
    if s.len() != 5 {
        return Err(Error::Dimension(format!(
            "blockify expects [b, gD, gH, gW, d], got {s:?}"
        )));
    }
    let (batch, dim) = (s[0], s[4]);
    let layout = BlockLayout::new([s[1], s[2], s[3]], blocks_per_axis)?;
    let [bd, bh, bw] = blocks_per_axis;
    let [sd, sh, sw] = layout.block_extent();
    let x = g.reshape(grid_feats, &[batch, bd, sd, bh, sh, bw, sw, dim])?;
    let x = g.permute(x, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    let data = g.reshape(
        x,
        &[batch, layout.num_blocks(), layout.tokens_per_block(), dim],
    )?;
    Ok(BlockSet {
        data,
        batch,
        dim,
        layout,
    })
}

/// Exact inverse of [`blockify`].
pub fn deblockify<T: Scalar>(g: &mut Graph<T>, bs: &BlockSet) -> Result<Var> {
    let expected = [
        bs.batch,
        bs.layout.num_blocks(),
        bs.layout.tokens_per_block(),
        bs.dim,
    ];
    if g.shape(bs.data) != expected {
        return Err(Error::Internal(format!(
            "block set data {:?} disagrees with its layout {expected:?}",
            g.shape(bs.data)
        )));
    }
    let [bd, bh, bw] = bs.layout.blocks_per_axis;
    let [sd, sh, sw] = bs.layout.block_extent();
    let x = g.reshape(bs.data, &[bs.batch, bd, bh, bw, sd, sh, sw, bs.dim])?;
    let x = g.permute(x, &[0, 1, 4, 2, 5, 3, 6, 7])?;
    let [gd, gh, gw] = bs.layout.grid;
    g.reshape(x, &[bs.batch, gd, gh, gw, bs.dim])
}

/// Parameters of one aggregation step `d_in → d_out`.
#[derive(Debug, Clone, Copy)]
pub struct AggregateParams {
    /// `[d_out, d_in, 3, 3, 3]`
    pub conv_w: Var,
    pub conv_b: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

pub const AGGREGATE_NORM_EPS: f64 = 1e-6;

/// Merges adjacent 2x2x2 block groups: deblockify, 3x3x3 convolution,
/// channel layer norm, 3x3x3 max pool with stride 2, then blockify with every
/// blocks-per-axis count halved. `T` drops by 8 and `n` is unchanged.
pub fn aggregate<T: Scalar>(
    g: &mut Graph<T>,
    bs: &BlockSet,
    params: &AggregateParams,
) -> Result<BlockSet> {
    let next = bs.layout.aggregated()?;
    let grid = deblockify(g, bs)?;
    let x = g.permute(grid, &[0, 4, 1, 2, 3])?;
    let x = g.conv3d(x, params.conv_w, Some(params.conv_b), 1, 1)?;
    let x = channel_layer_norm(
        g,
        x,
        params.norm_gamma,
        params.norm_beta,
        AGGREGATE_NORM_EPS,
    )?;
    let x = g.max_pool3d(x, 3, 2, 1)?;
    let x = g.permute(x, &[0, 2, 3, 4, 1])?;
    blockify(g, x, next.blocks_per_axis)
}

/// Layer norm over the channel axis of a channels-first `[b, c, D, H, W]` map.
pub fn channel_layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let x = g.permute(x, &[0, 2, 3, 4, 1])?;
    let x = g.layer_norm(x, gamma, beta, eps)?;
    g.permute(x, &[0, 4, 1, 2, 3])
}

/// Adds a `[T, n, d]` table to every batch item of `bs`.
pub fn add_pos_embed<T: Scalar>(g: &mut Graph<T>, bs: &BlockSet, pos: Var) -> Result<BlockSet> {
    let want = [bs.num_blocks(), bs.tokens_per_block(), bs.dim];
    if g.shape(pos) != want {
        return Err(Error::Dimension(format!(
            "positional table {:?} does not match blocks {want:?}",
            g.shape(pos)
        )));
    }
    let [t, n, d] = want;
    let table = g.reshape(pos, &[1, t, n, d])?;
    let table = if bs.batch == 1 {
        table
    } else {
        g.concat(&vec![table; bs.batch], 0)?
    };
    let data = g.add(bs.data, table)?;
    Ok(BlockSet { data, ..*bs })
}
