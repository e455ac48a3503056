//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation evaluates
//! eagerly and records what its adjoint needs; [`Graph::backward`] then walks
//! the tape in reverse. Parameters enter the tape by name, either trainable
//! (gradients are reported back under that name) or frozen.

use std::collections::BTreeMap;

use crate::conv::ConvGeom;
use crate::error::{shape_err, AutodiffError, Result};
use crate::scalar::{rm, tr, Scalar};
use crate::tensor::{ParameterSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and padding applied uniformly to every spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

/// Per-channel statistics of one training-mode normalization call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub label: String,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    Affine {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Sigmoid {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Log {
        x: usize,
    },
    Scale {
        x: usize,
        a: T,
    },
    Add {
        a: usize,
        b: usize,
    },
    MulConst {
        x: usize,
        c: Vec<T>,
    },
    Mean {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    FrozenNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation trace of one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    stats: Vec<BatchStats<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable parameter, if it took part in the output.
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(Vec::as_slice)
    }

    /// Gradient of any node that required one (leaves created with
    /// [`Graph::input_with_grad`], parameters, or intermediates).
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Adds every parameter gradient whose name exists in `set` into that
    /// tensor's gradient buffer. Returns the number of tensors touched.
    pub fn accumulate_into(&self, set: &mut ParameterSet<T>) -> usize {
        let mut n = 0;
        for (name, g) in &self.params {
            if let Ok(t) = set.get_mut(name) {
                t.accumulate_grad(g);
                n += 1;
            }
        }
        n
    }
}

fn spatial3(shape: &[usize]) -> Option<[usize; 3]> {
    match shape.len() {
        4 => Some([1, shape[2], shape[3]]),
        5 => Some([shape[2], shape[3], shape[4]]),
        _ => None,
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Normalization statistics recorded by training-mode [`Graph::batch_norm`] calls.
    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.stats
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input_with_grad(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Trainable parameter; its gradient is reported under `name`.
    pub fn param(&mut self, set: &ParameterSet<T>, name: &str) -> Result<Var> {
        let t = set.get(name)?;
        Ok(self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(name.to_string()),
            true,
        ))
    }

    /// Parameter used as a constant: gradients flow through the ops that use
    /// it but not into it.
    pub fn frozen_param(&mut self, set: &ParameterSet<T>, name: &str) -> Result<Var> {
        let t = set.get(name)?;
        Ok(self.input(t))
    }

    /// `y = x·Wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("affine", format!("x {xs:?}, w {ws:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err("affine", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut y = vec![T::zero(); batch * out];
        T::gemm(
            batch,
            inp,
            out,
            T::one(),
            self.data(x),
            rm(inp),
            self.data(w),
            tr(inp),
            T::zero(),
            &mut y,
            rm(out),
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v = *v + *bb);
            }
        }
        let ng = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        Ok(self.push(
            vec![batch, out],
            y,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            ng,
        ))
    }

    fn conv_geometry(
        &self,
        layer: &str,
        x: Var,
        w: Var,
        spec: ConvSpec,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != ws.len() {
            return Err(shape_err(layer, format!("x {xs:?} vs w {ws:?} rank")));
        }
        let sp = spatial3(xs).ok_or_else(|| shape_err(layer, format!("x rank {}", xs.len())))?;
        let k = spatial3(ws).ok_or_else(|| shape_err(layer, format!("w rank {}", ws.len())))?;
        let two_d = xs.len() == 4;
        let stride = if two_d {
            [1, spec.stride, spec.stride]
        } else {
            [spec.stride; 3]
        };
        let pad = if two_d {
            [0, spec.pad, spec.pad]
        } else {
            [spec.pad; 3]
        };
        let geom = if transposed {
            if xs[1] != ws[0] {
                return Err(shape_err(layer, format!("x channels {} vs w {ws:?}", xs[1])));
            }
            ConvGeom::for_transposed(ws[0], ws[1], sp, k, stride, pad)
        } else {
            if xs[1] != ws[1] {
                return Err(shape_err(layer, format!("x channels {} vs w {ws:?}", xs[1])));
            }
            ConvGeom::for_conv(ws[1], ws[0], sp, k, stride, pad)
        };
        geom.ok_or_else(|| shape_err(layer, format!("kernel {k:?} does not fit input {sp:?}")))
    }

    fn out_shape(batch: usize, ch: usize, sp: [usize; 3], rank: usize) -> Vec<usize> {
        if rank == 4 {
            vec![batch, ch, sp[1], sp[2]]
        } else {
            vec![batch, ch, sp[0], sp[1], sp[2]]
        }
    }

    /// Strided convolution. `x: [B, Ci, (D,) H, W]`, `w: [Co, Ci, (kD,) kH, kW]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = self.conv_geometry("conv", x, w, spec, false)?;
        let rank = self.shape(x).len();
        let batch = self.shape(x)[0];
        if let Some(b) = b {
            if self.shape(b) != [geom.feat_ch] {
                return Err(shape_err("conv", format!("bias {:?}", self.shape(b))));
            }
        }
        let (kr, np) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); batch * kr * np];
        let mut y = vec![T::zero(); batch * geom.feat_len()];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            for s in 0..batch {
                let cs = &mut cols[s * kr * np..(s + 1) * kr * np];
                geom.im2col(&xd[s * geom.image_len()..(s + 1) * geom.image_len()], cs);
                T::gemm(
                    geom.feat_ch,
                    kr,
                    np,
                    T::one(),
                    wd,
                    rm(kr),
                    cs,
                    rm(np),
                    T::zero(),
                    &mut y[s * geom.feat_len()..(s + 1) * geom.feat_len()],
                    rm(np),
                );
            }
            if let Some(b) = b {
                let bias = self.data(b);
                for (i, chunk) in y.chunks_mut(np).enumerate() {
                    let bb = bias[i % geom.feat_ch];
                    chunk.iter_mut().for_each(|v| *v = *v + bb);
                }
            }
        }
        let ng = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        let shape = Self::out_shape(batch, geom.feat_ch, geom.feat_sp, rank);
        Ok(self.push(
            shape,
            y,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                cols,
            },
            ng,
        ))
    }

    /// Transposed convolution (adjoint of [`Graph::conv`] in `x`).
    /// `x: [B, Cin, ...]`, `w: [Cin, Cout, k...]`.
    pub fn conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let geom = self.conv_geometry("conv_transpose", x, w, spec, true)?;
        let rank = self.shape(x).len();
        let batch = self.shape(x)[0];
        if let Some(b) = b {
            if self.shape(b) != [geom.image_ch] {
                return Err(shape_err(
                    "conv_transpose",
                    format!("bias {:?}", self.shape(b)),
                ));
            }
        }
        let (kr, np) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); kr * np];
        let mut y = vec![T::zero(); batch * geom.image_len()];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            for s in 0..batch {
                T::gemm(
                    kr,
                    geom.feat_ch,
                    np,
                    T::one(),
                    wd,
                    tr(kr),
                    &xd[s * geom.feat_len()..(s + 1) * geom.feat_len()],
                    rm(np),
                    T::zero(),
                    &mut cols,
                    rm(np),
                );
                geom.col2im(&cols, &mut y[s * geom.image_len()..(s + 1) * geom.image_len()]);
            }
            if let Some(b) = b {
                let bias = self.data(b);
                let plane: usize = geom.image_sp.iter().product();
                for (i, chunk) in y.chunks_mut(plane).enumerate() {
                    let bb = bias[i % geom.image_ch];
                    chunk.iter_mut().for_each(|v| *v = *v + bb);
                }
            }
        }
        let ng = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        let shape = Self::out_shape(batch, geom.image_ch, geom.image_sp, rank);
        Ok(self.push(
            shape,
            y,
            Op::ConvTranspose {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            ng,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let y = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x.0);
        self.push(shape, y, Op::LeakyRelu { x: x.0, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.data(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x.0);
        self.push(shape, y, Op::Sigmoid { x: x.0 }, ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let y = self.data(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x.0);
        self.push(shape, y, Op::Clamp { x: x.0, lo, hi }, ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let y = self.data(x).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x.0);
        self.push(shape, y, Op::Log { x: x.0 }, ng)
    }

    /// `a·x + b` elementwise with scalar constants.
    pub fn scale_shift(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (at, bt) = (T::from_f64(a), T::from_f64(b));
        let y = self.data(x).iter().map(|&v| at * v + bt).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x.0);
        self.push(shape, y, Op::Scale { x: x.0, a: at }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(p, q)| *p + *q)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(shape, y, Op::Add { a: a.0, b: b.0 }, ng))
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.data(x).len() {
            return Err(shape_err(
                "mul_const",
                format!("{} constants for {:?}", c.len(), self.shape(x)),
            ));
        }
        let y = self.data(x).iter().zip(c).map(|(p, q)| *p * *q).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x.0);
        Ok(self.push(
            shape,
            y,
            Op::MulConst {
                x: x.0,
                c: c.to_vec(),
            },
            ng,
        ))
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = T::from_f64(d.len().max(1) as f64);
        let s: T = d.iter().copied().sum();
        let ng = self.ng(x.0);
        self.push(vec![1], vec![s / n], Op::Mean { x: x.0 }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let y = self.data(x).to_vec();
        let ng = self.ng(x.0);
        Ok(self.push(shape.to_vec(), y, Op::Reshape { x: x.0 }, ng))
    }

    /// Collapses all non-batch axes.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let batch = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[batch, rest])
    }

    /// Concatenates two `[B, *]` matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (batch, fa, fb) = (sa[0], sa[1], sb[1]);
        let mut y = Vec::with_capacity(batch * (fa + fb));
        for r in 0..batch {
            y.extend_from_slice(&self.data(a)[r * fa..(r + 1) * fa]);
            y.extend_from_slice(&self.data(b)[r * fb..(r + 1) * fb]);
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(vec![batch, fa + fb], y, Op::Concat { a: a.0, b: b.0 }, ng))
    }

    fn channel_layout(&self, layer: &str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(layer, format!("x {s:?}")));
        }
        let (batch, ch) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err(
                layer,
                format!(
                    "scale {:?} / shift {:?} for {ch} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((batch, ch, inner))
    }

    /// Training-mode batch normalization over the batch and spatial axes.
    /// The batch statistics are recorded under `label`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        label: &str,
    ) -> Result<Var> {
        let (batch, ch, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let xd = self.data(x);
        let count = T::from_f64((batch * inner) as f64);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * inner;
                mean[c] = mean[c] + xd[off..off + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * inner;
                let m = mean[c];
                var[c] = var[c]
                    + xd[off..off + inner]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / count);
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = g[c] * h + bt[c];
                }
            }
        }
        self.stats.push(BatchStats {
            label: label.to_string(),
            mean,
            var,
        });
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            y,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inference-mode normalization with fixed (running) statistics.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (batch, ch, inner) = self.channel_layout("frozen_norm", x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(shape_err("frozen_norm", "running statistics length"));
        }
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xd, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let mut y = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * inner;
                for i in off..off + inner {
                    y[i] = g[c] * (xd[i] - mean[c]) * inv_std[c] + bt[c];
                }
            }
        }
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            y,
            Op::FrozenNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: mean.to_vec(),
                inv_std,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or(AutodiffError::NoTrace(output.0))?;
        if out.value.len() != 1 {
            return Err(AutodiffError::NotScalar(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::one()]);
        let mut params = BTreeMap::new();
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads, &mut params);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut BTreeMap<String, Vec<T>>,
    ) {
        let val = |i: usize| self.nodes[i].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => match params.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(gy).for_each(|(a, b)| *a = *a + *b),
                None => {
                    params.insert(name.clone(), gy.to_vec());
                }
            },
            Op::Affine { x, w, b } => {
                let (batch, inp) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let out = self.nodes[*w].shape[0];
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    T::gemm(batch, out, inp, T::one(), gy, rm(out), val(*w), rm(inp), T::zero(), &mut dx, rm(inp));
                    add_into(&mut grads[*x], dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    T::gemm(out, batch, inp, T::one(), gy, tr(out), val(*x), rm(inp), T::zero(), &mut dw, rm(inp));
                    add_into(&mut grads[*w], dw);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let mut db = vec![T::zero(); out];
                    for row in gy.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a = *a + *g);
                    }
                    add_into(&mut grads[b], db);
                }
            }
            Op::Conv { x, w, b, geom, cols } => {
                let batch = self.nodes[*x].shape[0];
                let (kr, np) = (geom.col_rows(), geom.col_cols());
                let fl = geom.feat_len();
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); geom.feat_ch * kr];
                    for s in 0..batch {
                        T::gemm(
                            geom.feat_ch, np, kr, T::one(),
                            &gy[s * fl..(s + 1) * fl], rm(np),
                            &cols[s * kr * np..(s + 1) * kr * np], tr(np),
                            T::one(), &mut dw, rm(kr),
                        );
                    }
                    add_into(&mut grads[*w], dw);
                }
                if self.ng(*x) {
                    let il = geom.image_len();
                    let mut dx = vec![T::zero(); batch * il];
                    let mut dcols = vec![T::zero(); kr * np];
                    for s in 0..batch {
                        T::gemm(
                            kr, geom.feat_ch, np, T::one(),
                            val(*w), tr(kr),
                            &gy[s * fl..(s + 1) * fl], rm(np),
                            T::zero(), &mut dcols, rm(np),
                        );
                        geom.col2im(&dcols, &mut dx[s * il..(s + 1) * il]);
                    }
                    add_into(&mut grads[*x], dx);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let mut db = vec![T::zero(); geom.feat_ch];
                    for (i, chunk) in gy.chunks(np).enumerate() {
                        let c = i % geom.feat_ch;
                        db[c] = db[c] + chunk.iter().copied().sum::<T>();
                    }
                    add_into(&mut grads[b], db);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let batch = self.nodes[*x].shape[0];
                let (kr, np) = (geom.col_rows(), geom.col_cols());
                let (il, fl) = (geom.image_len(), geom.feat_len());
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                if need_x || need_w {
                    let mut dcols = vec![T::zero(); kr * np];
                    let mut dx = need_x.then(|| vec![T::zero(); batch * fl]);
                    let mut dw = need_w.then(|| vec![T::zero(); geom.feat_ch * kr]);
                    let xd = val(*x);
                    for s in 0..batch {
                        geom.im2col(&gy[s * il..(s + 1) * il], &mut dcols);
                        if let Some(dx) = dx.as_mut() {
                            T::gemm(
                                geom.feat_ch, kr, np, T::one(),
                                val(*w), rm(kr),
                                &dcols, rm(np),
                                T::zero(), &mut dx[s * fl..(s + 1) * fl], rm(np),
                            );
                        }
                        if let Some(dw) = dw.as_mut() {
                            T::gemm(
                                geom.feat_ch, np, kr, T::one(),
                                &xd[s * fl..(s + 1) * fl], rm(np),
                                &dcols, tr(np),
                                T::one(), dw, rm(kr),
                            );
                        }
                    }
                    if let Some(dx) = dx {
                        add_into(&mut grads[*x], dx);
                    }
                    if let Some(dw) = dw {
                        add_into(&mut grads[*w], dw);
                    }
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let plane: usize = geom.image_sp.iter().product();
                    let mut db = vec![T::zero(); geom.image_ch];
                    for (i, chunk) in gy.chunks(plane).enumerate() {
                        let c = i % geom.image_ch;
                        db[c] = db[c] + chunk.iter().copied().sum::<T>();
                    }
                    add_into(&mut grads[b], db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = val(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                add_into(&mut grads[*x], dx);
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .iter()
                    .zip(gy)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                add_into(&mut grads[*x], dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = val(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > *lo && v < *hi { g } else { T::zero() })
                    .collect();
                add_into(&mut grads[*x], dx);
            }
            Op::Log { x } => {
                let dx = val(*x).iter().zip(gy).map(|(&v, &g)| g / v).collect();
                add_into(&mut grads[*x], dx);
            }
            Op::Scale { x, a } => {
                let dx = gy.iter().map(|&g| g * *a).collect();
                add_into(&mut grads[*x], dx);
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    add_into(&mut grads[*a], gy.to_vec());
                }
                if self.ng(*b) {
                    add_into(&mut grads[*b], gy.to_vec());
                }
            }
            Op::MulConst { x, c } => {
                let dx = gy.iter().zip(c).map(|(&g, &k)| g * k).collect();
                add_into(&mut grads[*x], dx);
            }
            Op::Mean { x } => {
                let n = val(*x).len().max(1);
                let g = gy[0] / T::from_f64(n as f64);
                add_into(&mut grads[*x], vec![g; val(*x).len()]);
            }
            Op::Reshape { x } => add_into(&mut grads[*x], gy.to_vec()),
            Op::Concat { a, b } => {
                let (batch, fa) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let fb = self.nodes[*b].shape[1];
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(batch * fa);
                    for r in 0..batch {
                        da.extend_from_slice(&gy[r * (fa + fb)..r * (fa + fb) + fa]);
                    }
                    add_into(&mut grads[*a], da);
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(batch * fb);
                    for r in 0..batch {
                        db.extend_from_slice(&gy[r * (fa + fb) + fa..(r + 1) * (fa + fb)]);
                    }
                    add_into(&mut grads[*b], db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = &self.nodes[*x].shape;
                let (batch, ch) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let g = val(*gamma);
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * inner;
                        for i in off..off + inner {
                            sum_dy[c] = sum_dy[c] + gy[i];
                            sum_dy_xhat[c] = sum_dy_xhat[c] + gy[i] * xhat[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let m = T::from_f64((batch * inner) as f64);
                    let mut dx = vec![T::zero(); gy.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * inner;
                            let k = g[c] * inv_std[c] / m;
                            for i in off..off + inner {
                                dx[i] = k * (m * gy[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                            }
                        }
                    }
                    add_into(&mut grads[*x], dx);
                }
                if self.ng(*gamma) {
                    add_into(&mut grads[*gamma], sum_dy_xhat);
                }
                if self.ng(*beta) {
                    add_into(&mut grads[*beta], sum_dy);
                }
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = &self.nodes[*x].shape;
                let (batch, ch) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let (xd, g) = (val(*x), val(*gamma));
                let mut dx = self.ng(*x).then(|| vec![T::zero(); gy.len()]);
                let mut dg = vec![T::zero(); ch];
                let mut db = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * inner;
                        for i in off..off + inner {
                            let h = (xd[i] - mean[c]) * inv_std[c];
                            dg[c] = dg[c] + gy[i] * h;
                            db[c] = db[c] + gy[i];
                            if let Some(dx) = dx.as_mut() {
                                dx[i] = gy[i] * g[c] * inv_std[c];
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[*x], dx);
                }
                if self.ng(*gamma) {
                    add_into(&mut grads[*gamma], dg);
                }
                if self.ng(*beta) {
                    add_into(&mut grads[*beta], db);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn affine_scalar_case() {
        let mut p = ParameterSet::new();
        p.insert("w", t(&[1, 1], &[2.0])).unwrap();
        p.insert("b", t(&[1], &[1.0])).unwrap();
        let mut g = Graph::new();
        let x = g.input(&t(&[1, 1], &[3.0]));
        let w = g.param(&p, "w").unwrap();
        let b = g.param(&p, "b").unwrap();
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.data(y), &[7.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("w").unwrap(), &[3.0]);
        assert_eq!(grads.param("b").unwrap(), &[1.0]);
    }

    #[test]
    fn conv_of_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = g.input(&Tensor::filled(&[1, 1, 2, 2], 1.0));
        let y = g.conv(x, w, None, ConvSpec::new(1, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.data(y), &[4.0; 4]);
    }

    #[test]
    fn leaky_negative() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t(&[1], &[-1.0]));
        let y = g.leaky_relu(x, 0.2);
        assert!((g.data(y)[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn errors_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar(_))));
        assert!(matches!(g.backward(Var(17)), Err(AutodiffError::NoTrace(17))));
        let w = g.input(&Tensor::zeros(&[3, 3]));
        let x2 = g.input(&Tensor::zeros(&[1, 2]));
        assert!(matches!(
            g.affine(x2, w, None),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn constant_output_has_zero_grads() {
        let mut p = ParameterSet::new();
        p.insert("w", t(&[1, 2], &[0.5, -0.3])).unwrap();
        let mut g = Graph::new();
        let x = g.input(&t(&[1, 2], &[1.0, 2.0]));
        let w = g.param(&p, "w").unwrap();
        let y = g.affine(x, w, None).unwrap();
        let z = g.scale_shift(y, 0.0, 4.0);
        let out = g.mean(z);
        let grads = g.backward(out).unwrap();
        assert!(grads.param("w").unwrap().iter().all(|v| *v == 0.0));
    }
}
