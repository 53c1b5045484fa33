//! Convolutional feature extractors.
//!
//! Convolutions are lowered to im2col + GEMM over row chunks of the output so
//! the column buffer stays bounded (`CHUNK_ELEMS` entries) at any resolution.

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;

use super::params::{BasicBlock, BatchNorm, ResNetStem, SmallBackbone};
use super::{BackboneParams, ModelConfig, ModelError};

const CHUNK_ELEMS: usize = 1 << 21;

/// Channels-first feature map with its cumulative stride in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Activations kept for backpropagating into the small backbone.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    input: Array3<f64>,
    hidden: Array3<f64>,
    output: Array3<f64>,
}

/// Gradients of the small backbone's tensors.
#[derive(Clone, Debug)]
pub struct SmallGrads {
    pub conv1_w: Array4<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array4<f64>,
    pub conv2_b: Array1<f64>,
}

/// RGB bytes to a channels-first tensor standardized per channel.
pub fn normalize_image(img: &RgbImage, config: &ModelConfig) -> Result<Array3<f64>, ModelError> {
    let v = config.viewport;
    if img.width() != v || img.height() != v {
        return Err(ModelError::Shape(format!(
            "screenshot is {}x{}, expected {v}x{v}",
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (v as usize, v as usize);
    let raw = img.as_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let b = raw[(y * w + x) * 3 + c] as f64 / 255.0;
        (b - config.pixel_mean[c]) / config.pixel_std[c]
    }))
}

/// Runs the backbone. With `trace` set (small backbone only) the
/// intermediate activations are returned for [`small_backward`].
pub fn backbone_features(
    img: &RgbImage,
    params: &BackboneParams,
    config: &ModelConfig,
    trace: bool,
) -> Result<(FeatureMap, Option<BackboneTrace>), ModelError> {
    let x = normalize_image(img, config)?;
    features_from_tensor(x, params, config, trace)
}

pub fn features_from_tensor(
    x: Array3<f64>,
    params: &BackboneParams,
    config: &ModelConfig,
    trace: bool,
) -> Result<(FeatureMap, Option<BackboneTrace>), ModelError> {
    match params {
        BackboneParams::Small(p) => {
            let mut hidden = conv2d(x.view(), &p.conv1_w, Some(&p.conv1_b), 8, 0);
            hidden.mapv_inplace(|v| v.max(0.0));
            let mut out = conv2d(hidden.view(), &p.conv2_w, Some(&p.conv2_b), 4, 0);
            out.mapv_inplace(|v| v.max(0.0));
            let fmap = FeatureMap {
                data: out.clone(),
                stride: config.backbone_stride(),
            };
            let tr = trace.then(|| BackboneTrace {
                input: x,
                hidden,
                output: out,
            });
            Ok((fmap, tr))
        }
        BackboneParams::ResNetStem(r) => {
            if trace {
                return Err(ModelError::Config(
                    "the residual stem backbone cannot be fine-tuned".into(),
                ));
            }
            Ok((
                FeatureMap {
                    data: resnet_forward(x.view(), r, config.bn_eps),
                    stride: 4,
                },
                None,
            ))
        }
    }
}

/// Gradients of the small backbone given `d_out`, the gradient at its output.
pub fn small_backward(
    trace: &BackboneTrace,
    params: &SmallBackbone,
    d_out: &Array3<f64>,
) -> SmallGrads {
    let mut d2 = d_out.clone();
    d2.zip_mut_with(&trace.output, |g, &y| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
    let (conv2_w, conv2_b, d_hidden) =
        conv2d_backward(trace.hidden.view(), &params.conv2_w, &d2, 4, 0, true);
    let mut d1 = d_hidden.expect("input gradient requested");
    d1.zip_mut_with(&trace.hidden, |g, &y| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
    let (conv1_w, conv1_b, _) =
        conv2d_backward(trace.input.view(), &params.conv1_w, &d1, 8, 0, false);
    SmallGrads {
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
    }
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output rows handled per GEMM so the column buffer stays under `CHUNK_ELEMS`.
fn rows_per_chunk(out_w: usize, col_width: usize, out_h: usize) -> usize {
    (CHUNK_ELEMS / (out_w * col_width).max(1)).clamp(1, out_h.max(1))
}

/// Column matrix for output rows `rows`: one row per output position, one
/// column per `(c, ky, kx)`.
fn im2col(
    x: ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    rows: std::ops::Range<usize>,
    out_w: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((rows.len() * out_w, c_in * k * k));
    for (r, oy) in rows.enumerate() {
        for ox in 0..out_w {
            let mut row = cols.row_mut(r * out_w + ox);
            let mut idx = 0;
            for c in 0..c_in {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            row[idx] = x[[c, iy as usize, ix as usize]];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    cols: &Array2<f64>,
    dx: &mut Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    rows: std::ops::Range<usize>,
    out_w: usize,
) {
    let (c_in, h, w) = dx.dim();
    for (r, oy) in rows.enumerate() {
        for ox in 0..out_w {
            let row = cols.row(r * out_w + ox);
            let mut idx = 0;
            for c in 0..c_in {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            dx[[c, iy as usize, ix as usize]] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn chunks(out_h: usize, per: usize) -> Vec<std::ops::Range<usize>> {
    (0..out_h)
        .step_by(per)
        .map(|r0| r0..(r0 + per).min(out_h))
        .collect()
}

/// Square-kernel 2-D convolution, zero padding, `(C_in, H, W) -> (C_out, H', W')`.
pub fn conv2d(
    x: ArrayView3<'_, f64>,
    weight: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c_out, c_in, k, _) = weight.dim();
    assert_eq!(x.dim().0, c_in, "conv input channels");
    let (_, h, w) = x.dim();
    let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let wmat = weight
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("contiguous weight");
    let per = rows_per_chunk(ow, c_in * k * k, oh);
    let parts: Vec<(std::ops::Range<usize>, Array2<f64>)> = chunks(oh, per)
        .into_par_iter()
        .map(|rows| {
            let cols = im2col(x, k, stride, pad, rows.clone(), ow);
            (rows, cols.dot(&wmat.t()))
        })
        .collect();
    let mut out = Array3::zeros((c_out, oh, ow));
    for (rows, y) in parts {
        for (r, oy) in rows.enumerate() {
            for ox in 0..ow {
                let yr = y.row(r * ow + ox);
                for co in 0..c_out {
                    out[[co, oy, ox]] = yr[co];
                }
            }
        }
    }
    if let Some(b) = bias {
        for (mut plane, &bv) in out.axis_iter_mut(Axis(0)).zip(b) {
            plane += bv;
        }
    }
    out
}

/// Gradients `(dW, db, dX)` of [`conv2d`]; `dX` only when `input_grad`.
pub fn conv2d_backward(
    x: ArrayView3<'_, f64>,
    weight: &Array4<f64>,
    d_out: &Array3<f64>,
    stride: usize,
    pad: usize,
    input_grad: bool,
) -> (Array4<f64>, Array1<f64>, Option<Array3<f64>>) {
    let (c_out, c_in, k, _) = weight.dim();
    let (_, oh, ow) = d_out.dim();
    let wmat = weight
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("contiguous weight");
    let per = rows_per_chunk(ow, c_in * k * k, oh);
    let parts: Vec<(Array2<f64>, Option<Array3<f64>>)> = chunks(oh, per)
        .into_par_iter()
        .map(|rows| {
            let cols = im2col(x, k, stride, pad, rows.clone(), ow);
            let dy = Array2::from_shape_fn((rows.len() * ow, c_out), |(m, co)| {
                d_out[[co, rows.start + m / ow, m % ow]]
            });
            let dw = dy.t().dot(&cols);
            let dx = input_grad.then(|| {
                let dcols = dy.dot(&wmat);
                let mut dx = Array3::zeros(x.dim());
                col2im_add(&dcols, &mut dx, k, stride, pad, rows, ow);
                dx
            });
            (dw, dx)
        })
        .collect();
    let mut dw = Array2::<f64>::zeros((c_out, c_in * k * k));
    let mut dx = input_grad.then(|| Array3::<f64>::zeros(x.dim()));
    for (pw, px) in parts {
        dw += &pw;
        if let (Some(acc), Some(px)) = (dx.as_mut(), px) {
            *acc += &px;
        }
    }
    let db = d_out.sum_axis(Axis(2)).sum_axis(Axis(1));
    (
        dw.into_shape_with_order((c_out, c_in, k, k))
            .expect("reshape"),
        db,
        dx,
    )
}

fn bn_inference(x: &mut Array3<f64>, bn: &BatchNorm, eps: f64) {
    for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
        let scale = bn.gamma[c] / (bn.running_var[c] + eps).sqrt();
        let shift = bn.beta[c] - bn.running_mean[c] * scale;
        plane.mapv_inplace(|v| v * scale + shift);
    }
}

/// 3x3 max pooling, stride 2, padding 1 (padding never wins).
fn maxpool3s2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (out_size(h, 3, 2, 1), out_size(w, 3, 2, 1));
    Array3::from_shape_fn((c, oh, ow), |(ch, oy, ox)| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..3 {
            for dx in 0..3 {
                let iy = (oy * 2 + dy) as isize - 1;
                let ix = (ox * 2 + dx) as isize - 1;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    m = m.max(x[[ch, iy as usize, ix as usize]]);
                }
            }
        }
        m
    })
}

fn basic_block(x: Array3<f64>, b: &BasicBlock, eps: f64) -> Array3<f64> {
    let mut y = conv2d(x.view(), &b.conv1, None, 1, 1);
    bn_inference(&mut y, &b.bn1, eps);
    y.mapv_inplace(|v| v.max(0.0));
    let mut y = conv2d(y.view(), &b.conv2, None, 1, 1);
    bn_inference(&mut y, &b.bn2, eps);
    y += &x;
    y.mapv_inplace(|v| v.max(0.0));
    y
}

/// conv 7x7/2, BN, ReLU, max pool 3x3/2, two basic blocks. Stride 4.
pub fn resnet_forward(x: ArrayView3<'_, f64>, r: &ResNetStem, eps: f64) -> Array3<f64> {
    let mut y = conv2d(x, &r.conv1, None, 2, 3);
    bn_inference(&mut y, &r.bn1, eps);
    y.mapv_inplace(|v| v.max(0.0));
    let mut y = maxpool3s2(&y);
    for b in &r.blocks {
        y = basic_block(y, b, eps);
    }
    y
}

/// Feature map size for a square input of side `side`.
pub fn feature_side(side: usize, stride: usize) -> usize {
    side / stride
}
