//! Minimal reverse-mode autodiff over `ndarray`, generic over `f32`/`f64`.
//!
//! A [`Graph`] records one forward pass; node handles ([`Value`]) are plain
//! indices. Parents are always created before children, so the reverse sweep
//! in [`Graph::backward`] visits nodes in valid topological order without an
//! explicit sort. Everything is single-threaded and bitwise deterministic for
//! a fixed binary and input.

use std::collections::HashMap;
use std::fmt::{Debug, Display};

use ndarray::{ArrayD, IxDyn};
use num_traits::{Float, FromPrimitive, NumAssignOps};

mod conv;
mod param;

pub use conv::{avg_pool2, col2im, im2col, ConvSpec, DeconvSpec};
pub use param::{Param, ParamId};

/// Scalar element type the engine is generic over.
pub trait Element:
    Float
    + FromPrimitive
    + NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// Lossy conversion from `f64`, used for constants and config values.
    fn f(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Value(usize);

type BackFn<F> = Box<dyn FnOnce(&Graph<F>, &ArrayD<F>, &mut Vec<Option<ArrayD<F>>>)>;

struct Node<F: Element> {
    value: ArrayD<F>,
    needs_grad: bool,
    backward: Option<BackFn<F>>,
}

/// Gradients produced by one [`Graph::backward`] sweep, indexed by node.
pub struct Gradients<F: Element> {
    by_node: Vec<Option<ArrayD<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if any was accumulated.
    pub fn wrt(&self, v: Value) -> Option<&ArrayD<F>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

/// One recorded forward pass.
pub struct Graph<F: Element> {
    nodes: Vec<Node<F>>,
    recording: bool,
    param_nodes: HashMap<ParamId, usize>,
    op_counts: HashMap<&'static str, usize>,
}

pub(crate) fn acc<F: Element>(grads: &mut Vec<Option<ArrayD<F>>>, idx: usize, delta: ArrayD<F>) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

impl<F: Element> Graph<F> {
    /// Graph that records backward closures; use for training and gradients.
    pub fn recording() -> Self {
        Self::with_recording(true)
    }

    /// Forward-only graph; no backward closures are kept.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            recording,
            param_nodes: HashMap::new(),
            op_counts: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, value: ArrayD<F>, needs_grad: bool, backward: Option<BackFn<F>>) -> Value {
        let needs_grad = needs_grad && self.recording;
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: if needs_grad { backward } else { None },
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a node.
    pub fn array(&self, v: Value) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d node.
    pub fn scalar(&self, v: Value) -> F {
        let a = self.array(v);
        debug_assert_eq!(a.ndim(), 0);
        *a.first().expect("scalar node")
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: ArrayD<F>) -> Value {
        self.push(value, false, None)
    }

    /// Leaf that accumulates gradient (an input under test, e.g. for checks
    /// of loss gradients w.r.t. images).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Value {
        self.push(value, true, None)
    }

    /// Leaf bound to a parameter. Repeated calls with the same parameter
    /// return the same node, so shared sub-paths reuse one gradient slot.
    pub fn param(&mut self, p: &Param<F>) -> Value {
        if let Some(&idx) = self.param_nodes.get(&p.id()) {
            return Value(idx);
        }
        let v = self.push(p.data.clone(), true, None);
        self.param_nodes.insert(p.id(), v.0);
        v
    }

    /// Node index a parameter was bound to this pass, if any.
    pub fn param_value(&self, id: ParamId) -> Option<Value> {
        self.param_nodes.get(&id).map(|&i| Value(i))
    }

    /// Bump a named counter; used by tests to assert call counts.
    pub fn bump(&mut self, tag: &'static str) {
        *self.op_counts.entry(tag).or_insert(0) += 1;
    }

    pub fn count(&self, tag: &str) -> usize {
        self.op_counts.get(tag).copied().unwrap_or(0)
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        a: Value,
        b: Value,
        fwd: impl Fn(&ArrayD<F>, &ArrayD<F>) -> ArrayD<F>,
        bwd: impl Fn(&Graph<F>, &ArrayD<F>, &mut Vec<Option<ArrayD<F>>>, usize, usize) + 'static,
    ) -> Value {
        assert_eq!(
            self.array(a).shape(),
            self.array(b).shape(),
            "elementwise op shape mismatch"
        );
        let value = fwd(self.array(a), self.array(b));
        let needs = self.needs(a) || self.needs(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g, gout, grads| bwd(g, gout, grads, ai, bi))),
        )
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            |x, y| x + y,
            |g, gout, grads, ai, bi| {
                if g.nodes[ai].needs_grad {
                    acc(grads, ai, gout.clone());
                }
                if g.nodes[bi].needs_grad {
                    acc(grads, bi, gout.clone());
                }
            },
        )
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            |x, y| x - y,
            |g, gout, grads, ai, bi| {
                if g.nodes[ai].needs_grad {
                    acc(grads, ai, gout.clone());
                }
                if g.nodes[bi].needs_grad {
                    acc(grads, bi, gout.mapv(|v| -v));
                }
            },
        )
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            |x, y| x * y,
            |g, gout, grads, ai, bi| {
                if g.nodes[ai].needs_grad {
                    acc(grads, ai, gout * &g.nodes[bi].value);
                }
                if g.nodes[bi].needs_grad {
                    acc(grads, bi, gout * &g.nodes[ai].value);
                }
            },
        )
    }

    pub fn div(&mut self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |g, gout, grads, ai, bi| {
                let bv = &g.nodes[bi].value;
                if g.nodes[ai].needs_grad {
                    acc(grads, ai, gout / bv);
                }
                if g.nodes[bi].needs_grad {
                    let av = &g.nodes[ai].value;
                    let d = ndarray::Zip::from(gout)
                        .and(av)
                        .and(bv)
                        .map_collect(|&go, &a, &b| -go * a / (b * b));
                    acc(grads, bi, d);
                }
            },
        )
    }

    // ---- elementwise unary ----

    /// Unary op given forward map and the derivative expressed from the
    /// input value `x` and output value `y`.
    fn unary(
        &mut self,
        x: Value,
        fwd: impl Fn(F) -> F,
        dydx: impl Fn(F, F) -> F + 'static,
    ) -> Value {
        let value = self.array(x).mapv(&fwd);
        let needs = self.needs(x);
        let xi = x.0;
        let yi = self.nodes.len();
        self.push(
            value,
            needs,
            Some(Box::new(move |g, gout, grads| {
                let xv = &g.nodes[xi].value;
                let yv = &g.nodes[yi].value;
                let d = ndarray::Zip::from(gout)
                    .and(xv)
                    .and(yv)
                    .map_collect(|&go, &x, &y| go * dydx(x, y));
                acc(grads, xi, d);
            })),
        )
    }

    pub fn abs(&mut self, x: Value) -> Value {
        // d|x|/dx at 0 taken as 0
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn square(&mut self, x: Value) -> Value {
        let two = F::f(2.0);
        self.unary(x, |v| v * v, move |x, _| two * x)
    }

    pub fn log(&mut self, x: Value) -> Value {
        self.unary(x, |v| v.ln(), |x, _| F::one() / x)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(&mut self, x: Value, slope: F) -> Value {
        self.unary(
            x,
            move |v| if v > F::zero() { v } else { v * slope },
            move |x, _| if x > F::zero() { F::one() } else { slope },
        )
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        self.unary(x, |v| v.tanh(), |_, y| F::one() - y * y)
    }

    /// Numerically stable softplus `ln(1 + e^x)`; derivative is the logistic.
    pub fn softplus(&mut self, x: Value) -> Value {
        self.unary(
            x,
            |v| {
                let zero = F::zero();
                v.max(zero) + (-v.abs()).exp().ln_1p()
            },
            |x, _| F::one() / (F::one() + (-x).exp()),
        )
    }

    pub fn add_scalar(&mut self, x: Value, c: F) -> Value {
        self.unary(x, move |v| v + c, |_, _| F::one())
    }

    pub fn mul_scalar(&mut self, x: Value, c: F) -> Value {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Value {
        let old_shape: Vec<usize> = self.array(x).shape().to_vec();
        let value = self
            .array(x)
            .to_shape(IxDyn(shape))
            .expect("reshape: element count must match")
            .to_owned();
        let needs = self.needs(x);
        let xi = x.0;
        self.push(
            value,
            needs,
            Some(Box::new(move |_, gout, grads| {
                let d = gout
                    .to_shape(IxDyn(&old_shape))
                    .expect("reshape backward")
                    .to_owned();
                acc(grads, xi, d);
            })),
        )
    }

    // ---- reductions ----

    /// Mean over all elements, producing a 0-d node.
    pub fn mean_all(&mut self, x: Value) -> Value {
        let n = self.array(x).len();
        let inv = F::one() / F::f(n as f64);
        let m = self.array(x).iter().fold(F::zero(), |s, &v| s + v) * inv;
        let value = ArrayD::from_elem(IxDyn(&[]), m);
        let needs = self.needs(x);
        let xi = x.0;
        let shape: Vec<usize> = self.array(x).shape().to_vec();
        self.push(
            value,
            needs,
            Some(Box::new(move |_, gout, grads| {
                let go = *gout.first().expect("scalar grad");
                acc(grads, xi, ArrayD::from_elem(IxDyn(&shape), go * inv));
            })),
        )
    }

    /// Mean over the trailing (channel) axis of an NHWC tensor:
    /// `(B, H, W, C) -> (B, H, W)`.
    pub fn mean_channels(&mut self, x: Value) -> Value {
        let nd = self.array(x).ndim();
        assert_eq!(nd, 4, "mean_channels expects a 4-d NHWC tensor");
        let c = self.array(x).shape()[3];
        let inv = F::one() / F::f(c as f64);
        let value = self
            .array(x)
            .mean_axis(ndarray::Axis(3))
            .expect("non-empty channel axis")
            .into_dyn();
        let needs = self.needs(x);
        let xi = x.0;
        self.push(
            value,
            needs,
            Some(Box::new(move |g, gout, grads| {
                let xshape = g.nodes[xi].value.shape().to_vec();
                let mut d = ArrayD::zeros(IxDyn(&xshape));
                let dsl = d.as_slice_mut().expect("standard layout");
                let gsl = gout.as_slice().expect("standard layout");
                for (pix, &go) in gsl.iter().enumerate() {
                    let base = pix * c;
                    for ch in 0..c {
                        dsl[base + ch] = go * inv;
                    }
                }
                acc(grads, xi, d);
            })),
        )
    }

    // ---- structured ops (conv / norm / pooling) ----

    pub fn conv2d(&mut self, x: Value, w: Value, b: Option<Value>, spec: ConvSpec) -> Value {
        conv::conv2d_node(self, x, w, b, spec)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Value,
        w: Value,
        b: Option<Value>,
        spec: DeconvSpec,
    ) -> Value {
        conv::deconv2d_node(self, x, w, b, spec)
    }

    pub fn avg_pool2(&mut self, x: Value) -> Value {
        conv::avg_pool2_node(self, x)
    }

    /// Per-sample, per-channel normalization over the spatial axes of an
    /// NHWC tensor (no learned affine).
    pub fn instance_norm(&mut self, x: Value, eps: F) -> Value {
        let xs = self.array(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "instance_norm expects NHWC");
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let inv_hw = F::one() / F::f(hw as f64);

        let xv = self.array(x).as_slice().expect("standard layout");
        let mut out = vec![F::zero(); xv.len()];
        // inv_std kept for the backward pass, one entry per (sample, channel)
        let mut inv_std = vec![F::zero(); n * c];
        for bi in 0..n {
            for ch in 0..c {
                let mut mean = F::zero();
                for p in 0..hw {
                    mean = mean + xv[(bi * hw + p) * c + ch];
                }
                mean = mean * inv_hw;
                let mut var = F::zero();
                for p in 0..hw {
                    let d = xv[(bi * hw + p) * c + ch] - mean;
                    var = var + d * d;
                }
                var = var * inv_hw;
                let istd = F::one() / (var + eps).sqrt();
                inv_std[bi * c + ch] = istd;
                for p in 0..hw {
                    let idx = (bi * hw + p) * c + ch;
                    out[idx] = (xv[idx] - mean) * istd;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).expect("shape");
        let needs = self.needs(x);
        let xi = x.0;
        let yi = self.nodes.len();
        self.push(
            value,
            needs,
            Some(Box::new(move |g, gout, grads| {
                // dx = istd * (dy - mean(dy) - y * mean(dy * y)), means over H*W
                let yv = g.nodes[yi].value.as_slice().expect("layout");
                let gv = gout.as_slice().expect("layout");
                let mut d = vec![F::zero(); gv.len()];
                for bi in 0..n {
                    for ch in 0..c {
                        let mut m_dy = F::zero();
                        let mut m_dyy = F::zero();
                        for p in 0..hw {
                            let idx = (bi * hw + p) * c + ch;
                            m_dy = m_dy + gv[idx];
                            m_dyy = m_dyy + gv[idx] * yv[idx];
                        }
                        m_dy = m_dy * inv_hw;
                        m_dyy = m_dyy * inv_hw;
                        let istd = inv_std[bi * c + ch];
                        for p in 0..hw {
                            let idx = (bi * hw + p) * c + ch;
                            d[idx] = istd * (gv[idx] - m_dy - yv[idx] * m_dyy);
                        }
                    }
                }
                acc(
                    grads,
                    xi,
                    ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), d).expect("shape"),
                );
            })),
        )
    }

    // ---- backward ----

    /// Reverse sweep from a 0-d loss node. Consumes the recorded closures;
    /// call once per graph.
    pub fn backward(&mut self, loss: Value) -> Gradients<F> {
        assert!(self.recording, "backward on an inference graph");
        assert_eq!(self.array(loss).ndim(), 0, "loss must be a scalar node");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(f) = self.nodes[i].backward.take() else {
                continue;
            };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            f(self, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { by_node: grads }
    }
}

pub(crate) use acc as accumulate_grad;
