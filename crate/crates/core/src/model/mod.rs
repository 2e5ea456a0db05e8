//! The segmentation network: a three-level block transformer encoder over
//! patch tokens and a convolutional decoder with skip connections.

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;

pub use accounting::{count_params_flops, ModelCost};
pub use config::{HierarchyPlan, UNesTConfig, HIERARCHIES};
pub use layers::{
    conv_block, linear, msa_hrchy, msa_hrchy_traced, transformer_layer, AttentionParams,
    ConvBlockParams, Dropout, LayerOptions, MlpParams, NormParams, TransformerLayerParams,
};
pub use params::{BoundParams, Init, ModelWeights, ParamId, ParamSpec};

use crate::blockops::{
    add_pos_embed, aggregate, blockify, channel_layer_norm, deblockify, patch_embed,
    AggregateParams, BlockSet, AGGREGATE_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

use params::ParamRegistry;

#[derive(Debug, Clone)]
struct HierarchyParams {
    pos: ParamId,
    layers: Vec<TransformerLayerParams<ParamId>>,
}

/// Between two hierarchies: 3x3x3 conv `d_l → d_{l+1}` plus channel norm.
/// With block aggregation this feeds [`aggregate`]; in the ablation it runs
/// after a 2x2x2 stride-2 max pool.
#[derive(Debug, Clone, Copy)]
struct TransitionParams {
    conv_w: ParamId,
    conv_b: ParamId,
    norm: NormParams<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct UpParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct SkipStage {
    up: UpParams,
    skip: ConvBlockParams<ParamId>,
    fuse: ConvBlockParams<ParamId>,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: UpParams,
    refine: Option<ConvBlockParams<ParamId>>,
}

#[derive(Debug, Clone)]
struct DecoderParams {
    bottleneck: ConvBlockParams<ParamId>,
    skips: Vec<SkipStage>,
    ups: Vec<UpStage>,
    stem: [ConvBlockParams<ParamId>; 2],
    fuse_image: ConvBlockParams<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Encoder activations kept for inspection and for the decoder.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Token blocks entering each hierarchy, before the positional table.
    pub entries: Vec<BlockSet>,
    /// Token blocks leaving each hierarchy.
    pub outputs: Vec<BlockSet>,
    /// Channels-first feature maps `[b, d_l, g_l...]` per hierarchy.
    pub features: Vec<Var>,
}

/// Model definition: configuration, shape plan and parameter layout.
/// Weights live separately in a [`ModelWeights`].
#[derive(Debug, Clone)]
pub struct UNesT {
    cfg: UNesTConfig,
    plan: [HierarchyPlan; HIERARCHIES],
    specs: Vec<ParamSpec>,
    embed_w: ParamId,
    embed_b: ParamId,
    hierarchies: Vec<HierarchyParams>,
    transitions: Vec<TransitionParams>,
    decoder: DecoderParams,
}

impl UNesT {
    pub fn new(cfg: UNesTConfig) -> Result<Self> {
        let plan = cfg.schedule()?;
        let mut reg = ParamRegistry::default();
        let p = cfg.patch_size();
        let d = cfg.dims;

        let embed_w = reg.add("embed.weight", &[d[0], 1, p, p, p], Init::TruncNormal);
        let embed_b = reg.add("embed.bias", &[d[0]], Init::Zeros);

        let mut hierarchies = Vec::new();
        let mut transitions = Vec::new();
        for (l, h) in plan.iter().enumerate() {
            let pos = reg.add(
                format!("h{l}.pos"),
                &[h.num_blocks(), h.tokens_per_block(), h.dim],
                Init::Zeros,
            );
            let layers = (0..h.depth)
                .map(|t| {
                    TransformerLayerParams::register(
                        &mut reg,
                        &format!("h{l}.layer{t}"),
                        h.dim,
                        cfg.mlp_ratio,
                    )
                })
                .collect();
            hierarchies.push(HierarchyParams { pos, layers });
            if l + 1 < HIERARCHIES {
                let prefix = if cfg.block_aggregation { "agg" } else { "down" };
                let d_out = d[l + 1];
                transitions.push(TransitionParams {
                    conv_w: reg.add(
                        format!("{prefix}{l}.conv.weight"),
                        &[d_out, h.dim, 3, 3, 3],
                        Init::TruncNormal,
                    ),
                    conv_b: reg.add(format!("{prefix}{l}.conv.bias"), &[d_out], Init::Zeros),
                    norm: NormParams::register(&mut reg, &format!("{prefix}{l}.norm"), d_out),
                });
            }
        }

        let c = cfg.resolved_decoder_channels();
        let bottleneck = ConvBlockParams::register(&mut reg, "dec.bottleneck", d[2], c[0]);
        let up = |reg: &mut ParamRegistry, name: String, c_in: usize, c_out: usize| UpParams {
            w: reg.add(
                format!("{name}.weight"),
                &[c_in, c_out, 2, 2, 2],
                Init::TruncNormal,
            ),
            b: reg.add(format!("{name}.bias"), &[c_out], Init::Zeros),
        };
        // Skip stages join encoder levels 2 and 1, coarsest first.
        let skips = (0..HIERARCHIES - 1)
            .map(|i| {
                let (c_in, c_out) = (c[i], c[i + 1]);
                let level = HIERARCHIES - 2 - i;
                SkipStage {
                    up: up(&mut reg, format!("dec.stage{i}.up"), c_in, c_out),
                    skip: ConvBlockParams::register(
                        &mut reg,
                        &format!("dec.stage{i}.skip"),
                        d[level],
                        c_out,
                    ),
                    fuse: ConvBlockParams::register(
                        &mut reg,
                        &format!("dec.stage{i}.fuse"),
                        2 * c_out,
                        c_out,
                    ),
                }
            })
            .collect();
        let n_up = cfg.upsample_stages();
        let ups = (0..n_up)
            .map(|j| {
                let (c_in, c_out) = (c[HIERARCHIES - 1 + j], c[HIERARCHIES + j]);
                UpStage {
                    up: up(&mut reg, format!("dec.up{j}"), c_in, c_out),
                    refine: (j + 1 < n_up).then(|| {
                        ConvBlockParams::register(
                            &mut reg,
                            &format!("dec.up{j}.refine"),
                            c_out,
                            c_out,
                        )
                    }),
                }
            })
            .collect();
        let c_last = *c.last().unwrap();
        let stem = [
            ConvBlockParams::register(&mut reg, "dec.stem0", 1, c_last),
            ConvBlockParams::register(&mut reg, "dec.stem1", c_last, c_last),
        ];
        let fuse_image = ConvBlockParams::register(&mut reg, "dec.fuse_image", 2 * c_last, c_last);
        let k = cfg.num_classes;
        let head_w = reg.add("dec.head.weight", &[k, c_last, 1, 1, 1], Init::TruncNormal);
        let head_b = reg.add("dec.head.bias", &[k], Init::Zeros);

        Ok(Self {
            cfg,
            plan,
            specs: reg.specs,
            embed_w,
            embed_b,
            hierarchies,
            transitions,
            decoder: DecoderParams {
                bottleneck,
                skips,
                ups,
                stem,
                fuse_image,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &UNesTConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &[HierarchyPlan; HIERARCHIES] {
        &self.plan
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn init_weights<T: Scalar>(&self, seed: u64) -> ModelWeights<T> {
        ModelWeights::initialize(&self.specs, seed)
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let [d, h, w] = self.cfg.input_size;
        if s.len() != 5 || s[1] != 1 || s[2..] != [d, h, w] {
            return Err(Error::Dimension(format!(
                "model expects input [b, 1, {d}, {h}, {w}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Runs the encoder on `x: [b, 1, D, H, W]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        dropout: &mut Dropout,
    ) -> Result<EncoderTrace> {
        self.check_input(g, x)?;
        let tokens = patch_embed(
            g,
            x,
            &self.cfg.patch_spec(),
            p[self.embed_w],
            p[self.embed_b],
        )?;
        let mut bs = blockify(g, tokens, self.plan[0].layout.blocks_per_axis)?;
        let mut trace = EncoderTrace {
            entries: Vec::new(),
            outputs: Vec::new(),
            features: Vec::new(),
        };
        for (l, (plan, hp)) in self.plan.iter().zip(&self.hierarchies).enumerate() {
            trace.entries.push(bs);
            let mut z = add_pos_embed(g, &bs, p[hp.pos])?;
            let opts = LayerOptions {
                heads: plan.heads,
                drop_rate: self.cfg.drop_rate,
                attn_drop_rate: self.cfg.attn_drop_rate,
            };
            for layer in &hp.layers {
                z.data = transformer_layer(g, z.data, &layer.bind(p), opts, dropout)?;
            }
            trace.outputs.push(z);
            let grid = deblockify(g, &z)?;
            trace.features.push(g.permute(grid, &[0, 4, 1, 2, 3])?);
            if let Some(tp) = self.transitions.get(l) {
                bs = self.transition(g, p, &z, tp, &self.plan[l + 1])?;
            }
        }
        Ok(trace)
    }

    fn transition<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        z: &BlockSet,
        tp: &TransitionParams,
        next: &HierarchyPlan,
    ) -> Result<BlockSet> {
        if self.cfg.block_aggregation {
            let ap = AggregateParams {
                conv_w: p[tp.conv_w],
                conv_b: p[tp.conv_b],
                norm_gamma: p[tp.norm.gamma],
                norm_beta: p[tp.norm.beta],
            };
            return aggregate(g, z, &ap);
        }
        let grid = deblockify(g, z)?;
        let x = g.permute(grid, &[0, 4, 1, 2, 3])?;
        let x = g.max_pool3d(x, 2, 2, 0)?;
        let x = g.conv3d(x, p[tp.conv_w], Some(p[tp.conv_b]), 1, 1)?;
        let x = channel_layer_norm(g, x, p[tp.norm.gamma], p[tp.norm.beta], AGGREGATE_NORM_EPS)?;
        let x = g.permute(x, &[0, 2, 3, 4, 1])?;
        blockify(g, x, next.layout.blocks_per_axis)
    }

    /// Decoder from encoder features and the raw input to logits `[b, K, D, H, W]`.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        features: &[Var],
    ) -> Result<Var> {
        if features.len() != HIERARCHIES {
            return Err(Error::Internal(format!(
                "decoder needs {HIERARCHIES} feature maps, got {}",
                features.len()
            )));
        }
        let dp = &self.decoder;
        let upsample =
            |g: &mut Graph<T>, y: Var, u: &UpParams| g.conv_transpose3d(y, p[u.w], Some(p[u.b]), 2);

        let mut y = conv_block(g, features[HIERARCHIES - 1], &dp.bottleneck.bind(p))?;
        for (i, st) in dp.skips.iter().enumerate() {
            y = upsample(g, y, &st.up)?;
            let s = conv_block(g, features[HIERARCHIES - 2 - i], &st.skip.bind(p))?;
            let cat = g.concat(&[y, s], 1)?;
            y = conv_block(g, cat, &st.fuse.bind(p))?;
        }
        for st in &dp.ups {
            y = upsample(g, y, &st.up)?;
            if let Some(r) = &st.refine {
                y = conv_block(g, y, &r.bind(p))?;
            }
        }
        let s = conv_block(g, x, &dp.stem[0].bind(p))?;
        let s = conv_block(g, s, &dp.stem[1].bind(p))?;
        let cat = g.concat(&[y, s], 1)?;
        y = conv_block(g, cat, &dp.fuse_image.bind(p))?;
        g.conv3d(y, p[dp.head_w], Some(p[dp.head_b]), 1, 0)
    }

    /// Class logits `[b, K, D, H, W]`.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let trace = self.encode(g, p, x, dropout)?;
        self.decode(g, p, x, &trace.features)
    }

    /// Class probabilities `[b, K, D, H, W]` (softmax over the class axis).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let logits = self.logits(g, p, x, dropout)?;
        g.softmax(logits, 1)
    }

    /// Evaluation-mode probabilities for a batch, without gradient tracking.
    pub fn predict<T: Scalar>(
        &self,
        weights: &ModelWeights<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        weights.check_against(&self.specs)?;
        let mut g = Graph::new();
        let p = weights.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let probs = self.forward(&mut g, &p, xv, &mut Dropout::eval())?;
        Ok(g.value(probs).clone())
    }
}
