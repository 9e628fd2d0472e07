//! Differentiable operations.
//!
//! Each op validates shapes, computes the forward value, checks the
//! result for NaN/Inf, and (when any input requires a gradient) records
//! its backward rule on the [`Graph`]. Convolution is lowered to im2col
//! plus GEMM; the backward pass rebuilds the column buffer instead of
//! caching it so activation memory stays flat.

use super::{check_finite, Graph, Tensor};
use crate::error::{Error, Result};
use rand_chacha::rand_core::RngCore;

/// C[m,n] += A·B with optional transposes; inputs are row-major slices.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one conv application, shared by forward and backward.
#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output spatial extent of a convolution axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Unfolds one image [C,H,W] into columns [C·k·k, OH·OW].
fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    cols.fill(0.0);
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let dst_row = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst_row[ow] = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients [C·k·k, OH·OW] back onto the image.
fn col2im_accumulate(dcols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &dcols[row * out_len..(row + 1) * out_len];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let plane_row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src_row = &src[oh * g.ow..(oh + 1) * g.ow];
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            plane_row[iw as usize] += src_row[ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with bias: x[B,C,H,W] * w[F,C,k,k] -> [B,F,H',W'].
pub fn conv2d(
    g: &mut Graph,
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected 4-d input and kernel, got {:?} and {:?}", xs, ws),
        ));
    }
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, cw, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if c != cw {
        return Err(Error::shape(
            "conv2d",
            format!("input channel axis is {c} but kernel channel axis is {cw}"),
        ));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
    }
    if bias.numel() != f {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} elements but kernel has {f} filters", bias.numel()),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d: stride must be >= 1".into()));
    }
    if kh > h + 2 * padding || kw > wd + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh} exceeds padded input {}x{}", h + 2 * padding, wd + 2 * padding),
        ));
    }

    let geom = ConvGeom {
        c_in: c,
        h,
        w: wd,
        k: kh,
        stride,
        padding,
        oh: conv_out_extent(h, kh, stride, padding),
        ow: conv_out_extent(wd, kw, stride, padding),
    };
    let out_len = geom.out_len();
    let patch = geom.patch_len();

    let mut out_data = vec![0.0; b * f * out_len];
    {
        let xd = x.data();
        let wd_ = w.data();
        let bd = bias.data();
        let mut cols = vec![0.0; patch * out_len];
        for bi in 0..b {
            im2col(&xd[bi * c * h * wd..(bi + 1) * c * h * wd], geom, &mut cols);
            let y_b = &mut out_data[bi * f * out_len..(bi + 1) * f * out_len];
            gemm(f, patch, out_len, &wd_, false, &cols, false, 0.0, y_b);
            for fi in 0..f {
                let bias_f = bd[fi];
                for v in &mut y_b[fi * out_len..(fi + 1) * out_len] {
                    *v += bias_f;
                }
            }
        }
    }
    let out = Tensor::from_vec(vec![b, f, geom.oh, geom.ow], out_data)?;
    check_finite("conv2d", &out)?;

    if x.requires_grad() || w.requires_grad() || bias.requires_grad() {
        let (xh, wh, bh, oh_) = (x.clone(), w.clone(), bias.clone(), out.clone());
        g.record(
            vec![x.clone(), w.clone(), bias.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh_.inner_grad();
                let go = go.as_ref().expect("conv2d backward without output grad");
                let xd = xh.data();
                let need_dx = xh.requires_grad();
                let need_dw = wh.requires_grad();
                let need_db = bh.requires_grad();

                if need_db {
                    bh.with_grad_mut(|db| {
                        for bi in 0..b {
                            for fi in 0..f {
                                let s: f64 = go[(bi * f + fi) * out_len..(bi * f + fi + 1) * out_len]
                                    .iter()
                                    .sum();
                                db[fi] += s;
                            }
                        }
                    });
                }

                let mut cols = vec![0.0; patch * out_len];
                let mut dcols = vec![0.0; patch * out_len];
                for bi in 0..b {
                    let dy_b = &go[bi * f * out_len..(bi + 1) * f * out_len];
                    if need_dw {
                        im2col(&xd[bi * c * h * wd..(bi + 1) * c * h * wd], geom, &mut cols);
                        wh.with_grad_mut(|dw| {
                            gemm(f, out_len, patch, dy_b, false, &cols, true, 1.0, dw);
                        });
                    }
                    if need_dx {
                        let wd_ = wh.data();
                        gemm(patch, f, out_len, &wd_, true, dy_b, false, 0.0, &mut dcols);
                        drop(wd_);
                        xh.with_grad_mut(|dx| {
                            col2im_accumulate(
                                &dcols,
                                geom,
                                &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd],
                            );
                        });
                    }
                }
            }),
        );
    }
    Ok(out)
}

/// Fully connected layer: x[B,D] · w[O,D]^T + bias[O] -> [B,O].
pub fn linear(g: &mut Graph, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected 2-d input and weight, got {:?} and {:?}", xs, ws),
        ));
    }
    let (b, d) = (xs[0], xs[1]);
    let (o, dw) = (ws[0], ws[1]);
    if d != dw {
        return Err(Error::shape(
            "linear",
            format!("input feature axis is {d} but weight feature axis is {dw}"),
        ));
    }
    if bias.numel() != o {
        return Err(Error::shape(
            "linear",
            format!("bias has {} elements but weight has {o} rows", bias.numel()),
        ));
    }

    let mut out_data = vec![0.0; b * o];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = bias.data();
        gemm(b, d, o, &xd, false, &wd, true, 0.0, &mut out_data);
        for bi in 0..b {
            for oi in 0..o {
                out_data[bi * o + oi] += bd[oi];
            }
        }
    }
    let out = Tensor::from_vec(vec![b, o], out_data)?;
    check_finite("linear", &out)?;

    if x.requires_grad() || w.requires_grad() || bias.requires_grad() {
        let (xh, wh, bh, oh) = (x.clone(), w.clone(), bias.clone(), out.clone());
        g.record(
            vec![x.clone(), w.clone(), bias.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("linear backward without output grad");
                if xh.requires_grad() {
                    let wd = wh.data();
                    xh.with_grad_mut(|dx| gemm(b, o, d, go, false, &wd, false, 1.0, dx));
                }
                if wh.requires_grad() {
                    let xd = xh.data();
                    wh.with_grad_mut(|dw| gemm(o, b, d, go, true, &xd, false, 1.0, dw));
                }
                if bh.requires_grad() {
                    bh.with_grad_mut(|db| {
                        for bi in 0..b {
                            for oi in 0..o {
                                db[oi] += go[bi * o + oi];
                            }
                        }
                    });
                }
            }),
        );
    }
    Ok(out)
}

/// Elementwise max(0, x).
pub fn relu(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let out_data: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let out = Tensor::from_vec(x.shape(), out_data)?;
    check_finite("relu", &out)?;
    if x.requires_grad() {
        let (xh, oh) = (x.clone(), out.clone());
        g.record(
            vec![x.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("relu backward without output grad");
                let xd = xh.data();
                xh.with_grad_mut(|dx| {
                    for i in 0..dx.len() {
                        if xd[i] > 0.0 {
                            dx[i] += go[i];
                        }
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Mean over the spatial axes: x[B,C,H,W] -> [B,C].
pub fn global_avg_pool(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected 4-d input, got {:?}", xs),
        ));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let mut out_data = vec![0.0; b * c];
    {
        let xd = x.data();
        for i in 0..b * c {
            out_data[i] = xd[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
    }
    let out = Tensor::from_vec(vec![b, c], out_data)?;
    check_finite("global_avg_pool", &out)?;
    if x.requires_grad() {
        let (xh, oh) = (x.clone(), out.clone());
        g.record(
            vec![x.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("gap backward without output grad");
                xh.with_grad_mut(|dx| {
                    for i in 0..b * c {
                        let gi = go[i] / hw as f64;
                        for v in &mut dx[i * hw..(i + 1) * hw] {
                            *v += gi;
                        }
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch; logits[B,C], one label per row.
pub fn softmax_cross_entropy(g: &mut Graph, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let ls = logits.shape();
    if ls.len() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expected 2-d logits, got {:?}", ls),
        ));
    }
    let (b, c) = (ls[0], ls[1]);
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("batch axis is {b} but got {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArg(format!(
            "softmax_cross_entropy: label {bad} out of class range 0..{c}"
        )));
    }

    let mut probs = vec![0.0; b * c];
    let mut total = 0.0;
    {
        let zd = logits.data();
        for bi in 0..b {
            let row = &zd[bi * c..(bi + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for i in 0..c {
                let e = (row[i] - m).exp();
                probs[bi * c + i] = e;
                denom += e;
            }
            for i in 0..c {
                probs[bi * c + i] /= denom;
            }
            total += denom.ln() + m - row[labels[bi]];
        }
    }
    let out = Tensor::scalar(total / b as f64);
    check_finite("softmax_cross_entropy", &out)?;

    if logits.requires_grad() {
        let (zh, oh) = (logits.clone(), out.clone());
        let labels = labels.to_vec();
        g.record(
            vec![logits.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("sce backward without output grad")[0];
                zh.with_grad_mut(|dz| {
                    let scale = go / b as f64;
                    for bi in 0..b {
                        for i in 0..c {
                            let ind = if i == labels[bi] { 1.0 } else { 0.0 };
                            dz[bi * c + i] += scale * (probs[bi * c + i] - ind);
                        }
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Inverted dropout: kept units are scaled by 1/(1-p). Identity when not
/// training or p == 0.
pub fn dropout(
    g: &mut Graph,
    x: &Tensor,
    p: f64,
    training: bool,
    rng: &mut impl RngCore,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArg(format!(
            "dropout: probability must be in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u >= p {
                scale
            } else {
                0.0
            }
        })
        .collect();
    let out_data: Vec<f64> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let out = Tensor::from_vec(x.shape(), out_data)?;
    check_finite("dropout", &out)?;
    if x.requires_grad() {
        let (xh, oh) = (x.clone(), out.clone());
        g.record(
            vec![x.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("dropout backward without output grad");
                xh.with_grad_mut(|dx| {
                    for i in 0..dx.len() {
                        dx[i] += go[i] * mask[i];
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Elementwise product of two same-shaped tensors.
pub fn mul(g: &mut Graph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mul",
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let out_data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_vec(a.shape(), out_data)?;
    check_finite("mul", &out)?;
    if a.requires_grad() || b.requires_grad() {
        let (ah, bh, oh) = (a.clone(), b.clone(), out.clone());
        g.record(
            vec![a.clone(), b.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("mul backward without output grad");
                if ah.requires_grad() {
                    let bd = bh.data().clone();
                    ah.with_grad_mut(|da| {
                        for i in 0..da.len() {
                            da[i] += go[i] * bd[i];
                        }
                    });
                }
                if bh.requires_grad() {
                    let ad = ah.data().clone();
                    bh.with_grad_mut(|db| {
                        for i in 0..db.len() {
                            db[i] += go[i] * ad[i];
                        }
                    });
                }
            }),
        );
    }
    Ok(out)
}

/// Sum of all elements, as a scalar.
pub fn sum(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let out = Tensor::scalar(x.data().iter().sum());
    check_finite("sum", &out)?;
    if x.requires_grad() {
        let (xh, oh) = (x.clone(), out.clone());
        g.record(
            vec![x.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("sum backward without output grad")[0];
                xh.with_grad_mut(|dx| {
                    for v in dx.iter_mut() {
                        *v += go;
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Weighted sum of scalar tensors: sum_i coeff_i * term_i.
pub fn affine_sum(g: &mut Graph, terms: &[(Tensor, f64)]) -> Result<Tensor> {
    let mut total = 0.0;
    for (t, coeff) in terms {
        if t.numel() != 1 {
            return Err(Error::shape(
                "affine_sum",
                format!("terms must be scalars, got shape {:?}", t.shape()),
            ));
        }
        total += coeff * t.item();
    }
    let out = Tensor::scalar(total);
    check_finite("affine_sum", &out)?;
    if terms.iter().any(|(t, _)| t.requires_grad()) {
        let oh = out.clone();
        let captured: Vec<(Tensor, f64)> = terms.to_vec();
        g.record(
            terms.iter().map(|(t, _)| t.clone()).collect(),
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("affine_sum backward without output grad")[0];
                for (t, coeff) in &captured {
                    if t.requires_grad() {
                        t.accumulate_grad(&[go * coeff]);
                    }
                }
            }),
        );
    }
    Ok(out)
}

/// Dot product of a vector tensor with a constant coefficient vector.
pub fn dot_const(g: &mut Graph, v: &Tensor, coeffs: &[f64]) -> Result<Tensor> {
    if v.numel() != coeffs.len() {
        return Err(Error::shape(
            "dot_const",
            format!("vector has {} elements but {} coefficients given", v.numel(), coeffs.len()),
        ));
    }
    let total: f64 = v.data().iter().zip(coeffs).map(|(&a, &c)| a * c).sum();
    let out = Tensor::scalar(total);
    check_finite("dot_const", &out)?;
    if v.requires_grad() {
        let (vh, oh) = (v.clone(), out.clone());
        let coeffs = coeffs.to_vec();
        g.record(
            vec![v.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("dot_const backward without output grad")[0];
                vh.with_grad_mut(|dv| {
                    for i in 0..dv.len() {
                        dv[i] += go * coeffs[i];
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Unnormalized Gaussian bumps over a fixed grid:
/// alpha_k = exp(-((f_k - mu) / sigma)^2 / 2), differentiable in mu.
pub fn gaussian_alpha(g: &mut Graph, mu: &Tensor, grid: &[f64], sigma: f64) -> Result<Tensor> {
    if mu.numel() != 1 {
        return Err(Error::shape(
            "gaussian_alpha",
            format!("mu must be a scalar, got shape {:?}", mu.shape()),
        ));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArg("gaussian_alpha: empty option grid".into()));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "gaussian_alpha: sigma must be positive, got {sigma}"
        )));
    }
    let mu_val = mu.item();
    let alphas: Vec<f64> = grid
        .iter()
        .map(|&f| (-0.5 * ((f - mu_val) / sigma).powi(2)).exp())
        .collect();
    let out = Tensor::from_vec(vec![grid.len()], alphas.clone())?;
    check_finite("gaussian_alpha", &out)?;
    if mu.requires_grad() {
        let (mh, oh) = (mu.clone(), out.clone());
        let grid = grid.to_vec();
        g.record(
            vec![mu.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("gaussian_alpha backward without output grad");
                let mut dmu = 0.0;
                for (k, &f) in grid.iter().enumerate() {
                    dmu += go[k] * alphas[k] * (f - mu_val) / (sigma * sigma);
                }
                mh.accumulate_grad(&[dmu]);
            }),
        );
    }
    Ok(out)
}

/// Divides a nonnegative vector by its sum.
pub fn normalize_sum(g: &mut Graph, v: &Tensor) -> Result<Tensor> {
    let s: f64 = v.data().iter().sum();
    if !(s > 1e-300) {
        return Err(Error::NonFinite {
            op: "normalize_sum",
            detail: Some(format!("sum of weights is {s}")),
        });
    }
    let normed: Vec<f64> = v.data().iter().map(|&x| x / s).collect();
    let out = Tensor::from_vec(v.shape(), normed.clone())?;
    check_finite("normalize_sum", &out)?;
    if v.requires_grad() {
        let (vh, oh) = (v.clone(), out.clone());
        g.record(
            vec![v.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("normalize_sum backward without output grad");
                let inner: f64 = go.iter().zip(&normed).map(|(&a, &b)| a * b).sum();
                vh.with_grad_mut(|dv| {
                    for i in 0..dv.len() {
                        dv[i] += (go[i] - inner) / s;
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Tempered softmax with optional pre-sampled Gumbel noise:
/// softmax((alpha + noise) / tau).
pub fn gumbel_softmax(
    g: &mut Graph,
    alphas: &Tensor,
    tau: f64,
    noise: Option<&[f64]>,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "gumbel_softmax: temperature must be positive, got {tau}"
        )));
    }
    let k = alphas.numel();
    if let Some(n) = noise {
        if n.len() != k {
            return Err(Error::shape(
                "gumbel_softmax",
                format!("{k} alphas but {} noise draws", n.len()),
            ));
        }
    }
    let z: Vec<f64> = alphas
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| (a + noise.map_or(0.0, |n| n[i])) / tau)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|&e| e / denom).collect();
    let out = Tensor::from_vec(vec![k], weights.clone())?;
    check_finite("gumbel_softmax", &out)?;
    if alphas.requires_grad() {
        let (ah, oh) = (alphas.clone(), out.clone());
        g.record(
            vec![alphas.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("gumbel_softmax backward without output grad");
                let inner: f64 = go.iter().zip(&weights).map(|(&a, &b)| a * b).sum();
                ah.with_grad_mut(|da| {
                    for i in 0..da.len() {
                        da[i] += weights[i] * (go[i] - inner) / tau;
                    }
                });
            }),
        );
    }
    Ok(out)
}

impl Tensor {
    /// Borrow of the gradient slot, for backward closures.
    pub(crate) fn inner_grad(&self) -> std::cell::Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    fn graph() -> Graph {
        Graph::new()
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut g = graph();
        let x = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(vec![1]);
        let y = conv2d(&mut g, &x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_center_kernel() {
        let mut g = graph();
        let data: Vec<f64> = (0..2 * 16).map(|i| i as f64 * 0.37 - 3.0).collect();
        let x = Tensor::from_vec(vec![2, 1, 4, 4], data.clone()).unwrap();
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0;
        let w = Tensor::from_vec(vec![1, 1, 3, 3], wk).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv2d(&mut g, &x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn conv_shape_mismatch_names_axes() {
        let mut g = graph();
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![3, 5, 3, 3]);
        let b = Tensor::zeros(vec![3]);
        let err = conv2d(&mut g, &x, &w, &b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('5'), "unhelpful message: {msg}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = graph();
        let z = Tensor::zeros(vec![1, 2]);
        let loss = softmax_cross_entropy(&mut g, &z, &[0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = graph();
        let z = Tensor::zeros(vec![1, 2]);
        assert!(softmax_cross_entropy(&mut g, &z, &[2]).is_err());
    }

    #[test]
    fn relu_basics() {
        let mut g = graph();
        let x = Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap();
        let y = relu(&mut g, &x).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn gap_constant_map() {
        let mut g = graph();
        let x = Tensor::filled(vec![2, 3, 4, 4], 2.5);
        let y = global_avg_pool(&mut g, &x).unwrap();
        assert_eq!(y.to_vec(), vec![2.5; 6]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = RunRng::new(0);
        let x = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = graph();
        let y = dropout(&mut g, &x, 0.0, true, &mut rng.dropout).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let y = dropout(&mut g, &x, 0.2, false, &mut rng.dropout).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(dropout(&mut g, &x, 1.0, true, &mut rng.dropout).is_err());
    }

    #[test]
    fn dropout_keep_rate_monte_carlo() {
        let mut rng = RunRng::new(7);
        let n = 50_000;
        let x = Tensor::filled(vec![n], 1.0);
        let mut g = graph();
        let y = dropout(&mut g, &x, 0.5, true, &mut rng.dropout).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "keep rate {rate}");
    }

    #[test]
    fn backward_of_square_sum() {
        let mut g = graph();
        let w = Tensor::from_vec(vec![1], vec![3.0]).unwrap().trainable();
        let sq = mul(&mut g, &w, &w).unwrap();
        let loss = sum(&mut g, &sq).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = graph();
        let w = Tensor::zeros(vec![2]).trainable();
        let y = relu(&mut g, &w).unwrap();
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn constant_loss_leaves_zero_grads() {
        let mut g = graph();
        let w = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap().trainable();
        let zero = Tensor::zeros(vec![2]);
        let dead = mul(&mut g, &w, &zero).unwrap();
        let loss = sum(&mut g, &dead).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn repeated_subgraph_scales_gradient() {
        // Loss built from k identical copies must give exactly k times the
        // single-copy gradient.
        let single = {
            let mut g = graph();
            let w = Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap().trainable();
            let sq = mul(&mut g, &w, &w).unwrap();
            let loss = sum(&mut g, &sq).unwrap();
            g.backward(&loss).unwrap();
            w.grad().unwrap()
        };
        let k = 5;
        let mut g = graph();
        let w = Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap().trainable();
        let copies: Vec<(Tensor, f64)> = (0..k)
            .map(|_| {
                let sq = mul(&mut g, &w, &w).unwrap();
                (sum(&mut g, &sq).unwrap(), 1.0)
            })
            .collect();
        let loss = affine_sum(&mut g, &copies).unwrap();
        g.backward(&loss).unwrap();
        let got = w.grad().unwrap();
        for i in 0..2 {
            assert_eq!(got[i], k as f64 * single[i]);
        }
    }

    #[test]
    fn gumbel_softmax_symmetry_and_arithmetic() {
        let mut g = graph();
        let a = Tensor::zeros(vec![2]);
        let w = gumbel_softmax(&mut g, &a, 1.0, None).unwrap();
        assert_eq!(w.to_vec(), vec![0.5, 0.5]);

        let a = Tensor::from_vec(vec![2], vec![3f64.ln(), 0.0]).unwrap();
        let w = gumbel_softmax(&mut g, &a, 1.0, None).unwrap();
        let v = w.to_vec();
        assert!((v[0] - 0.75).abs() < 1e-12 && (v[1] - 0.25).abs() < 1e-12);

        assert!(gumbel_softmax(&mut g, &a, 0.0, None).is_err());
    }

    #[test]
    fn gaussian_alpha_analytic_points() {
        let mut g = graph();
        let mu = Tensor::scalar(32.0);
        let a = gaussian_alpha(&mut g, &mu, &[32.0, 40.0, 8.0], 8.0).unwrap();
        let v = a.to_vec();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v[2] - (-4.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = graph();
        let x = Tensor::from_vec(vec![1], vec![1e308]).unwrap();
        assert!(mul(&mut g, &x, &x).is_err());
    }
}
