//! Layer forward/backward passes and losses.
//!
//! Conventions: conv inputs are [channels, height, width]; conv weights
//! [out_c, in_c, kh, kw]; dense weights [out, in] acting on the flattened
//! input. Backward passes accumulate (+=) into caller-supplied gradient
//! arrays so minibatch gradients can be summed in a fixed order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{axpy, dot, shape_string, LayerParams, NdArray};
use crate::error::{Error, Result};
use crate::fmath;

/// Output extent of a valid (unpadded) convolution: floor((in-k)/stride)+1.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Validated dimensions shared by the convolution forward and backward passes.
struct ConvDims {
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    xh: usize,
    xw: usize,
    oh: usize,
    ow: usize,
}

fn conv_shapes(x: &NdArray, w: &NdArray, stride: usize) -> Result<ConvDims> {
    let mismatch = |expected: alloc::string::String| Error::ShapeMismatch {
        op: "conv2d",
        expected,
        got: format!("input {:?}, weights {:?}", x.shape(), w.shape()),
    };
    if w.shape().len() != 4 || x.shape().len() != 3 {
        return Err(mismatch("3-d input and 4-d weights".into()));
    }
    let (oc, ic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (xc, xh, xw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if xc != ic || xh < kh || xw < kw || stride == 0 {
        return Err(mismatch(format!(
            "{ic} input channels, spatial >= {kh}x{kw}, stride >= 1"
        )));
    }
    let oh = conv_out_dim(xh, kh, stride);
    let ow = conv_out_dim(xw, kw, stride);
    Ok(ConvDims {
        oc,
        ic,
        kh,
        kw,
        xh,
        xw,
        oh,
        ow,
    })
}

/// Valid cross-correlation of `x` with the layer's kernels plus bias.
pub fn conv2d(x: &NdArray, layer: &LayerParams, stride: usize) -> Result<NdArray> {
    let ConvDims {
        oc,
        ic,
        kh,
        kw,
        xh,
        xw,
        oh,
        ow,
    } = conv_shapes(x, &layer.w, stride)?;
    let mut out = NdArray::zeros(&[oc, oh, ow]);
    let xd = x.data();
    let wd = layer.w.data();
    let bd = layer.b.data();
    let od = out.data_mut();
    for o in 0..oc {
        let wbase = o * ic * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[o];
                for c in 0..ic {
                    let xbase = c * xh * xw + oy * stride * xw + ox * stride;
                    let wrow = wbase + c * kh * kw;
                    for ky in 0..kh {
                        let xoff = xbase + ky * xw;
                        let woff = wrow + ky * kw;
                        acc += dot(&xd[xoff..xoff + kw], &wd[woff..woff + kw]);
                    }
                }
                od[o * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]: accumulates parameter gradients into
/// `gw`/`gb` and returns the input gradient when `need_gx` is set.
pub fn conv2d_backward(
    x: &NdArray,
    w: &NdArray,
    stride: usize,
    gy: &NdArray,
    gw: &mut NdArray,
    gb: &mut NdArray,
    need_gx: bool,
) -> Result<Option<NdArray>> {
    let ConvDims {
        oc,
        ic,
        kh,
        kw,
        xh,
        xw,
        oh,
        ow,
    } = conv_shapes(x, w, stride)?;
    if gy.shape() != [oc, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected: shape_string(&[oc, oh, ow]),
            got: shape_string(gy.shape()),
        });
    }
    if gw.shape() != w.shape() || gb.shape() != [oc] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected: shape_string(w.shape()),
            got: shape_string(gw.shape()),
        });
    }
    let mut gx = if need_gx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();
    let gwd = gw.data_mut();
    let gbd = gb.data_mut();
    for o in 0..oc {
        let wbase = o * ic * kh * kw;
        let mut bias_acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gyd[o * oh * ow + oy * ow + ox];
                bias_acc += g;
                for c in 0..ic {
                    let xbase = c * xh * xw + oy * stride * xw + ox * stride;
                    let wrow = wbase + c * kh * kw;
                    for ky in 0..kh {
                        let xoff = xbase + ky * xw;
                        let woff = wrow + ky * kw;
                        axpy(&mut gwd[woff..woff + kw], g, &xd[xoff..xoff + kw]);
                        if need_gx {
                            axpy(&mut gx[xoff..xoff + kw], g, &wd[woff..woff + kw]);
                        }
                    }
                }
            }
        }
        gbd[o] += bias_acc;
    }
    Ok(if need_gx {
        Some(NdArray::from_vec(x.shape(), gx)?)
    } else {
        None
    })
}

/// y = W * flatten(x) + b.
pub fn dense(x: &NdArray, layer: &LayerParams) -> Result<NdArray> {
    let (out_dim, in_dim) = dense_dims(&layer.w)?;
    if x.len() != in_dim {
        return Err(Error::ShapeMismatch {
            op: "dense",
            expected: format!("input of {in_dim} values"),
            got: shape_string(x.shape()),
        });
    }
    let mut y = NdArray::zeros(&[out_dim]);
    let xd = x.data();
    let wd = layer.w.data();
    let bd = layer.b.data();
    for (o, yo) in y.data_mut().iter_mut().enumerate() {
        *yo = bd[o] + dot(&wd[o * in_dim..(o + 1) * in_dim], xd);
    }
    Ok(y)
}

/// Backward pass of [`dense`]; returns the input gradient shaped like `x`.
pub fn dense_backward(
    x: &NdArray,
    w: &NdArray,
    gy: &NdArray,
    gw: &mut NdArray,
    gb: &mut NdArray,
) -> Result<NdArray> {
    let (out_dim, in_dim) = dense_dims(w)?;
    if x.len() != in_dim || gy.len() != out_dim || gw.shape() != w.shape() || gb.len() != out_dim {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            expected: format!("x:{in_dim} gy:{out_dim}"),
            got: format!("x:{} gy:{}", x.len(), gy.len()),
        });
    }
    let mut gx = NdArray::zeros(x.shape());
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();
    let gwd = gw.data_mut();
    let gbd = gb.data_mut();
    let gxd = gx.data_mut();
    for o in 0..out_dim {
        let g = gyd[o];
        gbd[o] += g;
        axpy(&mut gwd[o * in_dim..(o + 1) * in_dim], g, xd);
        axpy(gxd, g, &wd[o * in_dim..(o + 1) * in_dim]);
    }
    Ok(gx)
}

fn dense_dims(w: &NdArray) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "dense",
            expected: "2-d weight matrix".into(),
            got: shape_string(w.shape()),
        });
    }
    Ok((w.shape()[0], w.shape()[1]))
}

/// Elementwise max(0, x).
pub fn relu(x: &NdArray) -> NdArray {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Relu backward from the pre-activation input; the subgradient at exactly
/// zero is zero.
pub fn relu_backward(x: &NdArray, gy: &NdArray) -> NdArray {
    debug_assert_eq!(x.shape(), gy.shape());
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

/// Cross-entropy of logits against one target class, max-stabilized.
/// Returns the loss and the logit gradient (softmax - one_hot).
pub fn softmax_cross_entropy(logits: &NdArray, target: usize) -> Result<(f64, NdArray)> {
    let k = logits.len();
    if target >= k {
        return Err(Error::ClassOutOfRange {
            index: target,
            classes: k,
        });
    }
    let ld = logits.data();
    let mut max = f64::NEG_INFINITY;
    for &v in ld {
        if v > max {
            max = v;
        }
    }
    let mut grad = NdArray::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut z = 0.0;
    for (g, &v) in gd.iter_mut().zip(ld) {
        let e = fmath::exp(v - max);
        *g = e;
        z += e;
    }
    let inv_z = 1.0 / z;
    for g in gd.iter_mut() {
        *g *= inv_z;
    }
    let loss = fmath::ln(z) - (ld[target] - max);
    gd[target] -= 1.0;
    Ok((loss, grad))
}

/// Mean absolute difference and its subgradient wrt `pred`
/// (sign(pred - target)/N, zero at ties).
pub fn l1_loss(pred: &NdArray, target: &NdArray) -> Result<(f64, NdArray)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            expected: shape_string(target.shape()),
            got: shape_string(pred.shape()),
        });
    }
    let n = pred.len() as f64;
    let inv_n = 1.0 / n;
    let mut grad = NdArray::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += fmath::abs(d);
        *g = if d > 0.0 {
            inv_n
        } else if d < 0.0 {
            -inv_n
        } else {
            0.0
        };
    }
    Ok((loss * inv_n, grad))
}
