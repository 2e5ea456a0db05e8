//! Transformer and convolution building blocks, generic over how parameters
//! are referenced (`ParamId` in a model definition, `Var` once bound).

use crate::blockops::channel_layer_norm;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::params::{BoundParams, Init, ParamId, ParamRegistry};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct NormParams<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<P> {
    /// `[d, 3d]`, columns ordered (q | k | v), heads contiguous inside each.
    pub qkv_w: P,
    pub qkv_b: P,
    pub proj_w: P,
    pub proj_b: P,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpParams<P> {
    pub fc1_w: P,
    pub fc1_b: P,
    pub fc2_w: P,
    pub fc2_b: P,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerLayerParams<P> {
    pub norm1: NormParams<P>,
    pub attn: AttentionParams<P>,
    pub norm2: NormParams<P>,
    pub mlp: MlpParams<P>,
}

/// 3x3x3 convolution, channel layer norm, GELU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockParams<P> {
    pub w: P,
    pub b: P,
    pub norm: NormParams<P>,
}

impl NormParams<ParamId> {
    pub(crate) fn register(reg: &mut ParamRegistry, prefix: &str, d: usize) -> Self {
        Self {
            gamma: reg.add(format!("{prefix}.gamma"), &[d], Init::Ones),
            beta: reg.add(format!("{prefix}.beta"), &[d], Init::Zeros),
        }
    }

    pub fn bind(&self, b: &BoundParams) -> NormParams<Var> {
        NormParams {
            gamma: b[self.gamma],
            beta: b[self.beta],
        }
    }
}

impl TransformerLayerParams<ParamId> {
    pub(crate) fn register(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = d * mlp_ratio;
        Self {
            norm1: NormParams::register(reg, &format!("{prefix}.norm1"), d),
            attn: AttentionParams {
                qkv_w: reg.add(
                    format!("{prefix}.attn.qkv.weight"),
                    &[d, 3 * d],
                    Init::TruncNormal,
                ),
                qkv_b: reg.add(format!("{prefix}.attn.qkv.bias"), &[3 * d], Init::Zeros),
                proj_w: reg.add(
                    format!("{prefix}.attn.proj.weight"),
                    &[d, d],
                    Init::TruncNormal,
                ),
                proj_b: reg.add(format!("{prefix}.attn.proj.bias"), &[d], Init::Zeros),
            },
            norm2: NormParams::register(reg, &format!("{prefix}.norm2"), d),
            mlp: MlpParams {
                fc1_w: reg.add(
                    format!("{prefix}.mlp.fc1.weight"),
                    &[d, hidden],
                    Init::TruncNormal,
                ),
                fc1_b: reg.add(format!("{prefix}.mlp.fc1.bias"), &[hidden], Init::Zeros),
                fc2_w: reg.add(
                    format!("{prefix}.mlp.fc2.weight"),
                    &[hidden, d],
                    Init::TruncNormal,
                ),
                fc2_b: reg.add(format!("{prefix}.mlp.fc2.bias"), &[d], Init::Zeros),
            },
        }
    }

    pub fn bind(&self, b: &BoundParams) -> TransformerLayerParams<Var> {
        TransformerLayerParams {
            norm1: self.norm1.bind(b),
            attn: AttentionParams {
                qkv_w: b[self.attn.qkv_w],
                qkv_b: b[self.attn.qkv_b],
                proj_w: b[self.attn.proj_w],
                proj_b: b[self.attn.proj_b],
            },
            norm2: self.norm2.bind(b),
            mlp: MlpParams {
                fc1_w: b[self.mlp.fc1_w],
                fc1_b: b[self.mlp.fc1_b],
                fc2_w: b[self.mlp.fc2_w],
                fc2_b: b[self.mlp.fc2_b],
            },
        }
    }
}

impl ConvBlockParams<ParamId> {
    pub(crate) fn register(
        reg: &mut ParamRegistry,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self {
            w: reg.add(
                format!("{prefix}.conv.weight"),
                &[c_out, c_in, 3, 3, 3],
                Init::TruncNormal,
            ),
            b: reg.add(format!("{prefix}.conv.bias"), &[c_out], Init::Zeros),
            norm: NormParams::register(reg, &format!("{prefix}.norm"), c_out),
        }
    }

    pub fn bind(&self, b: &BoundParams) -> ConvBlockParams<Var> {
        ConvBlockParams {
            w: b[self.w],
            b: b[self.b],
            norm: self.norm.bind(b),
        }
    }
}

/// Inverted dropout. Inactive when built with [`Dropout::eval`] or when the
/// rate is zero.
#[derive(Debug, Clone)]
pub struct Dropout {
    rng: Option<SplitMix64>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(SplitMix64::stream(seed, 0x4452_4F50)),
        }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = T::of(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(g.shape(x), |_| {
            if rng.uniform() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let mask = g.constant(mask);
        g.mul(x, mask)
    }
}

/// Per-layer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerOptions {
    pub heads: usize,
    pub drop_rate: f64,
    pub attn_drop_rate: f64,
}

impl LayerOptions {
    pub fn heads(heads: usize) -> Self {
        Self {
            heads,
            drop_rate: 0.0,
            attn_drop_rate: 0.0,
        }
    }
}

/// `x[..., d_in] @ w[d_in, d_out] + b`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d_in = *shape.last().unwrap();
    let d_out = g.shape(w)[1];
    let rows = shape.iter().product::<usize>() / d_in;
    let flat = g.reshape(x, &[rows, d_in])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_bias(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = d_out;
    g.reshape(y, &out_shape)
}

/// Multi-head self-attention run independently inside each of the `T`
/// blocks of `z: [b, T, n, d]`, with the same weights for every block.
/// Logits are scaled by `1/sqrt(d / heads)`.
pub fn msa_hrchy<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &AttentionParams<Var>,
    opts: LayerOptions,
    dropout: &mut Dropout,
) -> Result<Var> {
    Ok(msa_hrchy_traced(g, z, p, opts, dropout)?.0)
}

/// [`msa_hrchy`] that also returns the attention probabilities
/// `[b*T*heads, n, n]`.
pub fn msa_hrchy_traced<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &AttentionParams<Var>,
    opts: LayerOptions,
    dropout: &mut Dropout,
) -> Result<(Var, Var)> {
    let shape = g.shape(z).to_vec();
    let [b, t, n, d] = shape[..] else {
        return Err(Error::Dimension(format!(
            "msa_hrchy expects [b, T, n, d], got {shape:?}"
        )));
    };
    let heads = opts.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "dim {d} is not divisible by {heads} heads"
        )));
    }
    let sigma = d / heads;
    let seqs = b * t;

    let qkv = linear(g, z, p.qkv_w, p.qkv_b)?;
    let qkv = g.reshape(qkv, &[seqs, n, 3, heads, sigma])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, seqs * heads, n, sigma])?;
    let mut split = |i: usize| -> Result<Var> {
        let s = g.slice(qkv, 0, i, i + 1)?;
        g.reshape(s, &[seqs * heads, n, sigma])
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);

    let kt = g.permute(k, &[0, 2, 1])?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (sigma as f64).sqrt());
    let probs = g.softmax(logits, 2)?;
    let attn = dropout.apply(g, probs, opts.attn_drop_rate)?;
    let ctx = g.matmul(attn, v)?;

    let ctx = g.reshape(ctx, &[seqs, heads, n, sigma])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, n, d])?;
    let out = linear(g, ctx, p.proj_w, p.proj_b)?;
    Ok((out, probs))
}

/// Pre-norm encoder layer:
/// `ẑ = MSA(LN(z)) + z`, `z' = MLP(LN(ẑ)) + ẑ`.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &TransformerLayerParams<Var>,
    opts: LayerOptions,
    dropout: &mut Dropout,
) -> Result<Var> {
    let h = g.layer_norm(z, p.norm1.gamma, p.norm1.beta, LAYER_NORM_EPS)?;
    let a = msa_hrchy(g, h, &p.attn, opts, dropout)?;
    let a = dropout.apply(g, a, opts.drop_rate)?;
    let zhat = g.add(z, a)?;

    let h = g.layer_norm(zhat, p.norm2.gamma, p.norm2.beta, LAYER_NORM_EPS)?;
    let h = linear(g, h, p.mlp.fc1_w, p.mlp.fc1_b)?;
    let h = g.gelu(h);
    let h = dropout.apply(g, h, opts.drop_rate)?;
    let m = linear(g, h, p.mlp.fc2_w, p.mlp.fc2_b)?;
    let m = dropout.apply(g, m, opts.drop_rate)?;
    g.add(zhat, m)
}

/// Same-resolution convolution block on a channels-first map.
pub fn conv_block<T: Scalar>(g: &mut Graph<T>, x: Var, p: &ConvBlockParams<Var>) -> Result<Var> {
    let y = g.conv3d(x, p.w, Some(p.b), 1, 1)?;
    let y = channel_layer_norm(g, y, p.norm.gamma, p.norm.beta, LAYER_NORM_EPS)?;
    Ok(g.gelu(y))
}
