//! Layer operations and their gradients.
//!
//! Data layout is channels-last: convolution inputs are `[D, H, W, Cin]`,
//! kernels `[kd, kh, kw, Cin, Cout]`. All convolutions are stride 1; 2D
//! layers are expressed with a singleton depth extent.

use rand::Rng;

use super::{shape_err, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// No padding; output extent is `in - k + 1`.
    Valid,
    /// Zero padding; output extent equals the input extent.
    Same,
}

fn conv_check(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(), TensorError> {
    if input.rank() != 4 {
        return Err(shape_err("conv3d", format!("input rank {} != 4", input.rank())));
    }
    if kernels.rank() != 5 {
        return Err(shape_err("conv3d", format!("kernel rank {} != 5", kernels.rank())));
    }
    for axis in 0..3 {
        if kernels.shape()[axis] > input.shape()[axis] {
            return Err(shape_err(
                "conv3d",
                format!(
                    "kernel extent {} exceeds input extent {} on axis {axis}",
                    kernels.shape()[axis],
                    input.shape()[axis]
                ),
            ));
        }
    }
    if kernels.shape()[3] != input.shape()[3] {
        return Err(shape_err(
            "conv3d",
            format!(
                "kernel input channels {} != input channels {} (axis 3)",
                kernels.shape()[3],
                input.shape()[3]
            ),
        ));
    }
    if bias.rank() != 1 || bias.shape()[0] != kernels.shape()[4] {
        return Err(shape_err(
            "conv3d",
            format!("bias shape {:?} != [{}]", bias.shape(), kernels.shape()[4]),
        ));
    }
    Ok(())
}

fn conv_out_extents(input: &Tensor, kernels: &Tensor, padding: Padding) -> [usize; 3] {
    let mut out = [0usize; 3];
    for axis in 0..3 {
        out[axis] = match padding {
            Padding::Valid => input.shape()[axis] - kernels.shape()[axis] + 1,
            Padding::Same => input.shape()[axis],
        };
    }
    out
}

fn pad_before(kernels: &Tensor, padding: Padding) -> [isize; 3] {
    match padding {
        Padding::Valid => [0, 0, 0],
        Padding::Same => {
            let mut p = [0isize; 3];
            for axis in 0..3 {
                p[axis] = ((kernels.shape()[axis] - 1) / 2) as isize;
            }
            p
        }
    }
}

/// 3D convolution, stride 1.
pub fn conv3d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: Padding,
) -> Result<Tensor, TensorError> {
    conv_check(input, kernels, bias)?;
    let [d, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let cin = input.shape()[3];
    let [kd, kh, kw] = [kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]];
    let cout = kernels.shape()[4];
    let [od, oh, ow] = conv_out_extents(input, kernels, padding);
    let pad = pad_before(kernels, padding);

    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let mut out = vec![0.0 as Scalar; od * oh * ow * cout];
    let mut acc = vec![0.0 as Scalar; cout];

    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                acc.copy_from_slice(b);
                for kz in 0..kd {
                    let zi = zo as isize + kz as isize - pad[0];
                    if zi < 0 || zi >= d as isize {
                        continue;
                    }
                    for ky in 0..kh {
                        let yi = yo as isize + ky as isize - pad[1];
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let xi = xo as isize + kx as isize - pad[2];
                            if xi < 0 || xi >= w as isize {
                                continue;
                            }
                            let in_base =
                                (((zi as usize * h) + yi as usize) * w + xi as usize) * cin;
                            let k_base = (((kz * kh) + ky) * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = x[in_base + ci];
                                let krow = &k[k_base + ci * cout..k_base + (ci + 1) * cout];
                                for (a, kv) in acc.iter_mut().zip(krow) {
                                    *a += xv * *kv;
                                }
                            }
                        }
                    }
                }
                let out_base = ((zo * oh + yo) * ow + xo) * cout;
                out[out_base..out_base + cout].copy_from_slice(&acc);
            }
        }
    }
    Ok(Tensor::from_vec(&[od, oh, ow, cout], out))
}

/// Gradients of [`conv3d`] with respect to input, kernels, and bias.
pub fn conv3d_backward(
    input: &Tensor,
    kernels: &Tensor,
    padding: Padding,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [d, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let cin = input.shape()[3];
    let [kd, kh, kw] = [kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]];
    let cout = kernels.shape()[4];
    let [od, oh, ow] = conv_out_extents(input, kernels, padding);
    assert_eq!(d_out.shape(), &[od, oh, ow, cout], "conv3d_backward d_out shape");
    let pad = pad_before(kernels, padding);

    let x = input.data();
    let k = kernels.data();
    let g = d_out.data();
    let mut dx = vec![0.0 as Scalar; x.len()];
    let mut dk = vec![0.0 as Scalar; k.len()];
    let mut db = vec![0.0 as Scalar; cout];

    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                let out_base = ((zo * oh + yo) * ow + xo) * cout;
                let grow = &g[out_base..out_base + cout];
                for (bi, gv) in db.iter_mut().zip(grow) {
                    *bi += *gv;
                }
                for kz in 0..kd {
                    let zi = zo as isize + kz as isize - pad[0];
                    if zi < 0 || zi >= d as isize {
                        continue;
                    }
                    for ky in 0..kh {
                        let yi = yo as isize + ky as isize - pad[1];
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let xi = xo as isize + kx as isize - pad[2];
                            if xi < 0 || xi >= w as isize {
                                continue;
                            }
                            let in_base =
                                (((zi as usize * h) + yi as usize) * w + xi as usize) * cin;
                            let k_base = (((kz * kh) + ky) * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = x[in_base + ci];
                                let krow = &k[k_base + ci * cout..k_base + (ci + 1) * cout];
                                let dkrow = &mut dk[k_base + ci * cout..k_base + (ci + 1) * cout];
                                let mut s = 0.0 as Scalar;
                                for ((dkv, kv), gv) in dkrow.iter_mut().zip(krow).zip(grow) {
                                    *dkv += xv * *gv;
                                    s += *kv * *gv;
                                }
                                dx[in_base + ci] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(input.shape(), dx),
        Tensor::from_vec(kernels.shape(), dk),
        Tensor::from_vec(&[cout], db),
    )
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, d_out: &Tensor) -> Tensor {
    assert_eq!(input.shape(), d_out.shape());
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Max pooling over non-overlapping windows (stride equals the window).
/// Returns the pooled tensor and the flat input index of each maximum.
pub fn maxpool3d(input: &Tensor, window: [usize; 3]) -> Result<(Tensor, Vec<usize>), TensorError> {
    if input.rank() != 4 {
        return Err(shape_err("maxpool3d", format!("input rank {} != 4", input.rank())));
    }
    let [d, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let c = input.shape()[3];
    if window[0] > d || window[1] > h || window[2] > w {
        return Err(TensorError::PoolTooLarge { window, input: [d, h, w] });
    }
    if window.iter().any(|&e| e == 0) {
        return Err(shape_err("maxpool3d", "zero pool window".to_string()));
    }
    let od = (d - window[0]) / window[0] + 1;
    let oh = (h - window[1]) / window[1] + 1;
    let ow = (w - window[2]) / window[2] + 1;
    let x = input.data();
    let mut out = vec![0.0 as Scalar; od * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                for ci in 0..c {
                    let mut best = Scalar::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kz in 0..window[0] {
                        for ky in 0..window[1] {
                            for kx in 0..window[2] {
                                let zi = zo * window[0] + kz;
                                let yi = yo * window[1] + ky;
                                let xi = xo * window[2] + kx;
                                let idx = ((zi * h + yi) * w + xi) * c + ci;
                                // Strict > keeps the first maximum on ties.
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = ((zo * oh + yo) * ow + xo) * c + ci;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[od, oh, ow, c], out), argmax))
}

pub fn maxpool3d_backward(input_shape: &[usize], argmax: &[usize], d_out: &Tensor) -> Tensor {
    assert_eq!(argmax.len(), d_out.len());
    let mut dx = Tensor::zeros(input_shape);
    let data = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        data[idx] += g;
    }
    dx
}

fn dense_check(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(), TensorError> {
    if weights.rank() != 2 {
        return Err(shape_err("dense", format!("weights rank {} != 2", weights.rank())));
    }
    if input.len() != weights.shape()[0] {
        return Err(shape_err(
            "dense",
            format!("input length {} != weight rows {}", input.len(), weights.shape()[0]),
        ));
    }
    if bias.rank() != 1 || bias.shape()[0] != weights.shape()[1] {
        return Err(shape_err(
            "dense",
            format!("bias shape {:?} != [{}]", bias.shape(), weights.shape()[1]),
        ));
    }
    Ok(())
}

/// Affine map: `out = input * weights + bias`, weights stored `[in, out]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    dense_check(input, weights, bias)?;
    let n_in = weights.shape()[0];
    let n_out = weights.shape()[1];
    let mut out = bias.data().to_vec();
    let x = input.data();
    let wdata = weights.data();
    for i in 0..n_in {
        let xv = x[i];
        if xv == 0.0 {
            continue;
        }
        let wrow = &wdata[i * n_out..(i + 1) * n_out];
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += xv * *wv;
        }
    }
    Ok(Tensor::from_vec(&[n_out], out))
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n_in = weights.shape()[0];
    let n_out = weights.shape()[1];
    assert_eq!(d_out.len(), n_out, "dense_backward d_out length");
    let x = input.data();
    let wdata = weights.data();
    let g = d_out.data();
    let mut dx = vec![0.0 as Scalar; n_in];
    let mut dw = vec![0.0 as Scalar; wdata.len()];
    for i in 0..n_in {
        let xv = x[i];
        let wrow = &wdata[i * n_out..(i + 1) * n_out];
        let dwrow = &mut dw[i * n_out..(i + 1) * n_out];
        let mut s = 0.0 as Scalar;
        for ((dwv, wv), gv) in dwrow.iter_mut().zip(wrow).zip(g) {
            *dwv += xv * *gv;
            s += *wv * *gv;
        }
        dx[i] = s;
    }
    (
        Tensor::from_vec(input.shape(), dx),
        Tensor::from_vec(weights.shape(), dw),
        Tensor::from_vec(&[n_out], g.to_vec()),
    )
}

/// Inverted dropout: each element survives with probability `keep_prob` and
/// is scaled by `1 / keep_prob`, so evaluation needs no correction. Returns
/// the output and the applied scale mask.
pub fn dropout<R: Rng>(input: &Tensor, keep_prob: f64, rng: &mut R) -> (Tensor, Vec<Scalar>) {
    assert!(keep_prob > 0.0 && keep_prob <= 1.0, "keep_prob must be in (0, 1]");
    let inv = (1.0 / keep_prob) as Scalar;
    let mask: Vec<Scalar> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < keep_prob { inv } else { 0.0 })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    (Tensor::from_vec(input.shape(), data), mask)
}

pub fn dropout_backward(mask: &[Scalar], d_out: &Tensor) -> Tensor {
    assert_eq!(mask.len(), d_out.len());
    let data = d_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(d_out.shape(), data)
}

/// Numerically stable softmax probabilities of a logit vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let m = logits.data().iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
    let exps: Vec<Scalar> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let z: Scalar = exps.iter().sum();
    Tensor::from_vec(logits.shape(), exps.iter().map(|&e| e / z).collect())
}

/// Sparse softmax cross entropy; returns the loss and its gradient with
/// respect to the logits (`softmax - onehot`).
pub fn softmax_cross_entropy(
    logits: &Tensor,
    label: usize,
) -> Result<(Scalar, Tensor), TensorError> {
    let classes = logits.len();
    if label >= classes {
        return Err(TensorError::LabelOutOfRange { label, classes });
    }
    if !logits.all_finite() {
        return Err(TensorError::NonFinite { context: "softmax_cross_entropy logits".into() });
    }
    let m = logits.data().iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
    let exps: Vec<Scalar> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let z: Scalar = exps.iter().sum();
    let loss = z.ln() - (logits.data()[label] - m);
    let mut grad: Vec<Scalar> = exps.iter().map(|&e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_vec(logits.shape(), grad)))
}
