//! im2col-backed convolution, transposed convolution and 2x2 average
//! pooling, NHWC layout throughout.
//!
//! Weight layouts: conv `(k, k, c_in, c_out)`, transposed conv
//! `(k, k, c_out, c_in)`. Both forward passes and all three gradient
//! products reduce to one GEMM plus an im2col/col2im shuffle.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::{accumulate_grad as acc, Element, Graph, Value};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            dilation,
        }
    }

    fn out_extent(&self, input: usize, k: usize) -> usize {
        let eff = self.dilation * (k - 1) + 1;
        (input + 2 * self.pad - eff) / self.stride + 1
    }
}

/// Square-kernel transposed-convolution geometry.
#[derive(Clone, Copy, Debug)]
pub struct DeconvSpec {
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl DeconvSpec {
    pub fn new(stride: usize, pad: usize, out_pad: usize) -> Self {
        DeconvSpec {
            stride,
            pad,
            out_pad,
        }
    }

    fn out_extent(&self, input: usize, k: usize) -> usize {
        (input - 1) * self.stride + k + self.out_pad - 2 * self.pad
    }

    fn as_conv(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.pad)
    }
}

/// Unfold `x` `(N, H, W, C)` into patch rows `(N*OH*OW, k*k*C)`.
pub fn im2col<F: Element>(x: &ArrayD<F>, k: usize, spec: ConvSpec) -> Array2<F> {
    let (n, h, w, c) = dims4(x);
    let (oh, ow) = (spec.out_extent(h, k), spec.out_extent(w, k));
    let kk = k * k * c;
    let mut cols = Array2::<F>::zeros((n * oh * ow, kk));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ohi in 0..oh {
            let ih0 = (ohi * spec.stride) as isize - spec.pad as isize;
            for owi in 0..ow {
                let iw0 = (owi * spec.stride) as isize - spec.pad as isize;
                let row = ((ni * oh + ohi) * ow + owi) * kk;
                for ki in 0..k {
                    let ih = ih0 + (ki * spec.dilation) as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = iw0 + (kj * spec.dilation) as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let src = ((ni * h + ih as usize) * w + iw as usize) * c;
                        let dst = row + (ki * k + kj) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch rows back onto an image grid, accumulating overlaps; the
/// adjoint of [`im2col`] with the same geometry.
pub fn col2im<F: Element>(
    cols: &Array2<F>,
    img_shape: (usize, usize, usize, usize),
    k: usize,
    spec: ConvSpec,
) -> ArrayD<F> {
    let (n, h, w, c) = img_shape;
    let (oh, ow) = (spec.out_extent(h, k), spec.out_extent(w, k));
    let kk = k * k * c;
    debug_assert_eq!(cols.shape(), &[n * oh * ow, kk]);
    let mut img = ArrayD::<F>::zeros(IxDyn(&[n, h, w, c]));
    let xs = img.as_slice_mut().expect("standard layout");
    // A matmul with a single contraction dim (e.g. the dX of a 1-channel
    // conv) comes back column-major from ndarray; normalize before the
    // flat-index scatter below.
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standardized layout");
    for ni in 0..n {
        for ohi in 0..oh {
            let ih0 = (ohi * spec.stride) as isize - spec.pad as isize;
            for owi in 0..ow {
                let iw0 = (owi * spec.stride) as isize - spec.pad as isize;
                let row = ((ni * oh + ohi) * ow + owi) * kk;
                for ki in 0..k {
                    let ih = ih0 + (ki * spec.dilation) as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = iw0 + (kj * spec.dilation) as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let dst = ((ni * h + ih as usize) * w + iw as usize) * c;
                        let src = row + (ki * k + kj) * c;
                        for ch in 0..c {
                            xs[dst + ch] = xs[dst + ch] + cs[src + ch];
                        }
                    }
                }
            }
        }
    }
    img
}

fn dims4<F: Element>(x: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a 4-d NHWC tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

pub(super) fn conv2d_node<F: Element>(
    g: &mut Graph<F>,
    x: Value,
    w: Value,
    b: Option<Value>,
    spec: ConvSpec,
) -> Value {
    let (n, h, wd, cin) = dims4(g.array(x));
    let ws = g.array(w).shape().to_vec();
    assert_eq!(ws.len(), 4, "conv weight must be (k, k, c_in, c_out)");
    let (k, cout) = (ws[0], ws[3]);
    assert_eq!(ws[1], k, "conv kernels are square");
    assert_eq!(
        ws[2], cin,
        "conv input channels: weight has {}, input has {}",
        ws[2], cin
    );
    let (oh, ow) = (spec.out_extent(h, k), spec.out_extent(wd, k));

    let cols = im2col(g.array(x), k, spec);
    let wmat = g
        .array(w)
        .to_shape((k * k * cin, cout))
        .expect("contiguous weight");
    let mut ymat = cols.dot(&wmat);
    if let Some(bv) = b {
        let bias = g.array(bv);
        debug_assert_eq!(bias.shape(), &[cout]);
        let brow = bias.to_shape((1, cout)).expect("bias row");
        ymat += &brow;
    }
    let value = ymat
        .into_shape_with_order(IxDyn(&[n, oh, ow, cout]))
        .expect("conv output shape");

    let needs = g.needs(x) || g.needs(w) || b.map(|bv| g.needs(bv)).unwrap_or(false);
    let (xi, wi) = (x.0, w.0);
    let bi = b.map(|v| v.0);
    g.push(
        value,
        needs,
        Some(Box::new(move |g, gout, grads| {
            let rows = n * oh * ow;
            let gmat = gout
                .to_shape((rows, cout))
                .expect("contiguous output grad");
            if g.nodes[wi].needs_grad {
                let dw = cols.t().dot(&gmat);
                acc(
                    grads,
                    wi,
                    dw.into_shape_with_order(IxDyn(&[k, k, cin, cout]))
                        .expect("weight grad shape"),
                );
            }
            if let Some(bi) = bi {
                if g.nodes[bi].needs_grad {
                    acc(grads, bi, gmat.sum_axis(Axis(0)).into_dyn());
                }
            }
            if g.nodes[xi].needs_grad {
                let wmat = g.nodes[wi]
                    .value
                    .to_shape((k * k * cin, cout))
                    .expect("contiguous weight");
                let dcols = gmat.dot(&wmat.t());
                acc(grads, xi, col2im(&dcols, (n, h, wd, cin), k, spec));
            }
        })),
    )
}

pub(super) fn deconv2d_node<F: Element>(
    g: &mut Graph<F>,
    x: Value,
    w: Value,
    b: Option<Value>,
    spec: DeconvSpec,
) -> Value {
    let (n, h, wd, cin) = dims4(g.array(x));
    let ws = g.array(w).shape().to_vec();
    assert_eq!(ws.len(), 4, "deconv weight must be (k, k, c_out, c_in)");
    let (k, cout) = (ws[0], ws[2]);
    assert_eq!(ws[1], k, "deconv kernels are square");
    assert_eq!(
        ws[3], cin,
        "deconv input channels: weight has {}, input has {}",
        ws[3], cin
    );
    assert!(spec.out_pad < spec.stride, "out_pad must be < stride");
    let (oh, ow) = (spec.out_extent(h, k), spec.out_extent(wd, k));

    // Transposed conv as the adjoint of a conv mapping the output grid back
    // onto the input grid.
    let xmat = g
        .array(x)
        .to_shape((n * h * wd, cin))
        .expect("contiguous input");
    let wmat = g
        .array(w)
        .to_shape((k * k * cout, cin))
        .expect("contiguous weight");
    let cols = xmat.dot(&wmat.t());
    let mut value = col2im(&cols, (n, oh, ow, cout), k, spec.as_conv());
    if let Some(bv) = b {
        let bias = g.array(bv);
        debug_assert_eq!(bias.shape(), &[cout]);
        let vs = value.as_slice_mut().expect("layout");
        let bs = bias.as_slice().expect("layout");
        for (i, v) in vs.iter_mut().enumerate() {
            *v = *v + bs[i % cout];
        }
    }

    let needs = g.needs(x) || g.needs(w) || b.map(|bv| g.needs(bv)).unwrap_or(false);
    let (xi, wi) = (x.0, w.0);
    let bi = b.map(|v| v.0);
    g.push(
        value,
        needs,
        Some(Box::new(move |g, gout, grads| {
            let dcols = im2col(gout, k, spec.as_conv());
            debug_assert_eq!(dcols.shape(), &[n * h * wd, k * k * cout]);
            if g.nodes[wi].needs_grad {
                let xmat = g.nodes[xi]
                    .value
                    .to_shape((n * h * wd, cin))
                    .expect("contiguous input");
                let dw = dcols.t().dot(&xmat);
                acc(
                    grads,
                    wi,
                    dw.into_shape_with_order(IxDyn(&[k, k, cout, cin]))
                        .expect("weight grad shape"),
                );
            }
            if let Some(bi) = bi {
                if g.nodes[bi].needs_grad {
                    let gmat = gout
                        .to_shape((n * oh * ow, cout))
                        .expect("contiguous output grad");
                    acc(grads, bi, gmat.sum_axis(Axis(0)).into_dyn());
                }
            }
            if g.nodes[xi].needs_grad {
                let wmat = g.nodes[wi]
                    .value
                    .to_shape((k * k * cout, cin))
                    .expect("contiguous weight");
                let dx = dcols.dot(&wmat);
                acc(
                    grads,
                    xi,
                    dx.into_shape_with_order(IxDyn(&[n, h, wd, cin]))
                        .expect("input grad shape"),
                );
            }
        })),
    )
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
pub fn avg_pool2<F: Element>(x: &ArrayD<F>) -> ArrayD<F> {
    let (n, h, w, c) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::f(0.25);
    let xs = x.as_slice().expect("layout");
    let mut out = vec![F::zero(); n * oh * ow * c];
    for ni in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                let dst = ((ni * oh + ohi) * ow + owi) * c;
                for ch in 0..c {
                    let mut s = F::zero();
                    for di in 0..2 {
                        for dj in 0..2 {
                            let src = ((ni * h + 2 * ohi + di) * w + 2 * owi + dj) * c + ch;
                            s = s + xs[src];
                        }
                    }
                    out[dst + ch] = s * quarter;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, oh, ow, c]), out).expect("shape")
}

pub(super) fn avg_pool2_node<F: Element>(g: &mut Graph<F>, x: Value) -> Value {
    let (n, h, w, c) = dims4(g.array(x));
    let value = avg_pool2(g.array(x));
    let needs = g.needs(x);
    let xi = x.0;
    g.push(
        value,
        needs,
        Some(Box::new(move |_, gout, grads| {
            let (oh, ow) = (h / 2, w / 2);
            let quarter = F::f(0.25);
            let gs = gout.as_slice().expect("layout");
            let mut d = vec![F::zero(); n * h * w * c];
            for ni in 0..n {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let src = ((ni * oh + ohi) * ow + owi) * c;
                        for ch in 0..c {
                            let go = gs[src + ch] * quarter;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let dst =
                                        ((ni * h + 2 * ohi + di) * w + 2 * owi + dj) * c + ch;
                                    d[dst] = d[dst] + go;
                                }
                            }
                        }
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
