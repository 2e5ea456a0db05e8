use super::kernels::{self, ConvGeom};
use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Gelu(Var),
    Conv3d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
///
/// Ops append nodes in execution order; [`Graph::backward`] replays adjoints
/// in reverse order, visiting each node at most once. A node requires a
/// gradient when it is a trainable leaf or any of its inputs requires one.
#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

/// Gradients of a scalar loss w.r.t. every trainable leaf on the path to it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T> std::fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("macs", &self.macs)
            .finish()
    }
}

fn dim_err(op: &str, detail: String) -> Error {
    Error::Dimension(format!("{op}: {detail}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates executed by forward matmul/convolution ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, requires_grad)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, data, op, &[a, b])
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x / y, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        self.map(x, |v| v * f, Op::Scale(x, f))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// `x[..., j] + bias[j]` over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(dim_err(
                "add_bias",
                format!(
                    "bias {:?} does not match last extent of {:?}",
                    self.shape(bias),
                    self.shape(x)
                ),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(&shape, data, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Contraction over the last axis of `a` and the second-to-last of `b`.
    /// Leading (batch) extents must be equal; both operands need rank ≥ 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(mismatch());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (k2, p) = (sb[r - 2], sb[r - 1]);
        if k != k2 || sa[..r - 2] != sb[..r - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * p];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::new(&db[i * k * p..(i + 1) * k * p], k, p),
                    &mut out[i * m * p..(i + 1) * m * p],
                    false,
                );
            }
        }
        self.macs += (batch * m * k * p) as u64;
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        Ok(self.derived(
            &shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
            },
            &[a, b],
        ))
    }

    fn check_axis(&self, op: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(dim_err(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    fn check_finite(&self, op: &str, x: Var) -> Result<()> {
        if !self.value(x).all_finite() {
            return Err(Error::Numeric(format!("{op}: non-finite input")));
        }
        Ok(())
    }

    /// Numerically stable softmax (max-subtracted) along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        self.check_finite("softmax", x)?;
        let shape = self.shape(x).to_vec();
        let data = kernels::softmax_forward(self.value(x).data(), &shape, axis, false);
        Ok(self.derived(&shape, data, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        self.check_finite("log_softmax", x)?;
        let shape = self.shape(x).to_vec();
        let data = kernels::softmax_forward(self.value(x).data(), &shape, axis, true);
        Ok(self.derived(&shape, data, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match last extent of {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let (out, means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            T::of(eps),
        );
        let shape = self.shape(x).to_vec();
        Ok(self.derived(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    fn conv_operands(
        &self,
        op: &str,
        x: Var,
        w: Var,
        bias: Option<Var>,
        transpose: bool,
    ) -> Result<(usize, usize, usize, usize, [usize; 3])> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 5 || sw.len() != 5 || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(dim_err(
                op,
                format!("expected 5-d input and cubic 5-d weight, got {sx:?} and {sw:?}"),
            ));
        }
        // Channel axis of `x` pairs with weight axis 1 for convolution and
        // axis 0 for its transpose.
        let (x_ch, out_ch) = if transpose {
            (sw[0], sw[1])
        } else {
            (sw[1], sw[0])
        };
        if sx[1] != x_ch {
            return Err(dim_err(
                op,
                format!("input channels {} do not match weight {sw:?}", sx[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(dim_err(
                    op,
                    format!("bias {:?} must be [{out_ch}]", self.shape(b)),
                ));
            }
        }
        Ok((sx[0], sw[0], sw[1], sw[2], [sx[2], sx[3], sx[4]]))
    }

    /// `x: [b, c_in, D, H, W]`, `w: [c_out, c_in, k, k, k]`, `bias: [c_out]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, c_out, c_in, k, input) = self.conv_operands("conv3d", x, w, bias, false)?;
        if stride == 0 {
            return Err(Error::Config("conv3d: stride must be at least 1".into()));
        }
        let output = ConvGeom::output_extents(input, k, stride, padding).ok_or_else(|| {
            dim_err(
                "conv3d",
                format!("kernel {k} does not fit input {input:?} with padding {padding}"),
            )
        })?;
        let geom = ConvGeom {
            c_in,
            c_out,
            kernel: k,
            stride,
            padding,
            input,
            output,
        };
        let data = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            batch,
            &geom,
        );
        self.macs += (batch * geom.out_voxels() * c_out * geom.patch_len()) as u64;
        let shape = [batch, c_out, output[0], output[1], output[2]];
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.derived(
            &shape,
            data,
            Op::Conv3d {
                x,
                w,
                bias,
                geom,
                batch,
            },
            &inputs,
        ))
    }

    /// Transposed convolution with no padding: `x: [b, c0, ...]`,
    /// `w: [c0, c1, k, k, k]`, result `[b, c1, (in-1)*stride + k, ...]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (batch, c0, c1, k, small) = self.conv_operands("conv_transpose3d", x, w, bias, true)?;
        if stride == 0 {
            return Err(Error::Config(
                "conv_transpose3d: stride must be at least 1".into(),
            ));
        }
        let large = small.map(|e| (e - 1) * stride + k);
        // Geometry of the forward convolution this op is the adjoint of.
        let geom = ConvGeom {
            c_in: c1,
            c_out: c0,
            kernel: k,
            stride,
            padding: 0,
            input: large,
            output: small,
        };
        let data = kernels::conv_transpose3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            batch,
            &geom,
        );
        self.macs += (batch * geom.out_voxels() * c0 * geom.patch_len()) as u64;
        let shape = [batch, c1, large[0], large[1], large[2]];
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.derived(
            &shape,
            data,
            Op::ConvTranspose3d {
                x,
                w,
                bias,
                geom,
                batch,
            },
            &inputs,
        ))
    }

    /// Window maximum over `[b, c, D, H, W]`; padded cells never win.
    pub fn max_pool3d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 5 {
            return Err(dim_err(
                "max_pool3d",
                format!("expected 5-d input, got {sx:?}"),
            ));
        }
        if stride == 0 || kernel == 0 || padding >= kernel {
            return Err(Error::Config(format!(
                "max_pool3d: invalid kernel {kernel} / stride {stride} / padding {padding}"
            )));
        }
        let input = [sx[2], sx[3], sx[4]];
        let output = ConvGeom::output_extents(input, kernel, stride, padding).ok_or_else(|| {
            dim_err(
                "max_pool3d",
                format!("kernel {kernel} does not fit input {input:?}"),
            )
        })?;
        let (data, argmax) = kernels::max_pool3d_forward(
            self.value(x).data(),
            sx[0] * sx[1],
            input,
            output,
            kernel,
            stride,
            padding,
        );
        let shape = [sx[0], sx[1], output[0], output[1], output[2]];
        Ok(self.derived(&shape, data, Op::MaxPool3d { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(dim_err(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.derived(shape, data, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < sx.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(dim_err(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {sx:?}"),
            ));
        }
        let data = kernels::permute(self.value(x).data(), &sx, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        Ok(self.derived(
            &shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| dim_err("concat", "no inputs".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err(
                    "concat",
                    format!("{s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
            extent += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = extent;
        Ok(self.derived(
            &shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let sx = self.shape(x).to_vec();
        if start >= end || end > sx[axis] {
            return Err(dim_err(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of {sx:?}"),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(&sx, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = sx;
        shape[axis] = end - start;
        Ok(self.derived(&shape, data, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(&[1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.value(x).sum() / n;
        self.derived(&[1], vec![s], Op::MeanAll(x), &[x])
    }

    /// Sums out `axis`; the result has one axis fewer (rank-1 inputs give `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let sx = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::axis_split(&sx, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        let mut shape = sx;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.derived(&shape, data, Op::SumAxis { x, axis }, &[x]))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut out: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(
                        grads,
                        *a,
                        g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect(),
                    );
                }
                if self.needs(*b) {
                    self.accumulate(
                        grads,
                        *b,
                        g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect(),
                    );
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    self.accumulate(
                        grads,
                        *a,
                        g.iter().zip(bv).map(|(&gv, &d)| gv / d).collect(),
                    );
                }
                if self.needs(*b) {
                    let gb = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gv, (&n, &d))| -gv * n / (d * d))
                        .collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.iter().map(|&v| v * *f).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*bias) {
                    let d = val(*bias).len();
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
            } => {
                let (m, k, p) = (*m, *k, *p);
                let (da, db) = (val(*a), val(*b));
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..*batch {
                        gemm(
                            MatRef::new(&g[i * m * p..(i + 1) * m * p], m, p),
                            MatRef::new(&db[i * k * p..(i + 1) * k * p], k, p).t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); batch * k * p];
                    for i in 0..*batch {
                        gemm(
                            MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::new(&g[i * m * p..(i + 1) * m * p], m, p),
                            &mut gb[i * k * p..(i + 1) * k * p],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax { x, axis } => {
                let dx = kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis);
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let dx =
                    kernels::log_softmax_backward(node.value.data(), g, node.value.shape(), *axis);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let d = val(*gamma).len();
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_backward(val(*x), val(*gamma), means, rstds, g, d);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * kernels::gelu_derivative(xv))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Conv3d {
                x,
                w,
                bias,
                geom,
                batch,
            } => {
                let (dx, dw, db) =
                    kernels::conv3d_backward(val(*x), val(*w), g, *batch, geom, self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose3d {
                x,
                w,
                bias,
                geom,
                batch,
            } => {
                let (dx, dw, db) = kernels::conv_transpose3d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *batch,
                    geom,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool3d { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&gv, &i) in g.iter().zip(argmax) {
                    dx[i] = dx[i] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let dx = kernels::permute(g, node.value.shape(), &inv);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis] * inner;
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * n);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..o * total + offset + n]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.nodes[x.0].value.shape();
                let (outer, n, inner) = kernels::axis_split(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let n = val(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = val(*x).len();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = kernels::axis_split(self.nodes[x.0].value.shape(), *axis);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}
