//! Forward kernels and their vector-Jacobian products.
//!
//! All kernels work on a single sample (no batch axis). Forward kernels feed
//! the thread-local [`counter`](super::counter); backward kernels do not.

use super::{counter, Tensor};
use crate::error::{Error, Result};

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Output spatial extent of a sliding window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * pad {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = input.dims3("conv2d")?;
        let [cout, wcin, k, k2] = *weight.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [Cout,Cin,K,K], got {:?}", weight.shape()),
            ));
        };
        if wcin != cin || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} incompatible with input {:?}", weight.shape(), input.shape()),
            ));
        }
        let (Some(ho), Some(wo)) = (conv_out_dim(h, k, stride, pad), conv_out_dim(w, k, stride, pad)) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} does not fit input {h}x{w}"),
            ));
        };
        Ok(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Patch matrix `[Cin*K*K, Ho*Wo]`; padded taps read as zero.
    fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let npos = self.positions();
        let mut cols = vec![0.0f32; self.rows() * npos];
        for ic in 0..self.cin {
            let plane = &input[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ic * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * npos..(r + 1) * npos];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                row[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto the input grid.
    fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let npos = self.positions();
        let mut out = vec![0.0f32; self.cin * self.h * self.w];
        for ic in 0..self.cin {
            let plane = &mut out[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ic * self.k + ky) * self.k + kx;
                    let row = &cols[r * npos..(r + 1) * npos];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// 2-D cross-correlation of a `[Cin,H,W]` map with `[Cout,Cin,K,K]` filters.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    if bias.len() != g.cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {} output channels", bias.len(), g.cout),
        ));
    }
    let npos = g.positions();
    let nrows = g.rows();
    let cols = g.im2col(input.data());
    let wdata = weight.data();
    let mut out = vec![0.0f32; g.cout * npos];
    for oc in 0..g.cout {
        let plane = &mut out[oc * npos..(oc + 1) * npos];
        plane.fill(bias.data()[oc]);
        let wrow = &wdata[oc * nrows..(oc + 1) * nrows];
        for (r, &wv) in wrow.iter().enumerate() {
            axpy(plane, wv, &cols[r * npos..(r + 1) * npos]);
        }
    }
    let macs = (g.cout * nrows * npos) as u64;
    counter::record(macs, 2 * macs + (g.cout * npos) as u64);
    Tensor::new(vec![g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let npos = g.positions();
    let nrows = g.rows();
    if grad_out.len() != g.cout * npos {
        return Err(Error::shape("conv2d_backward", "gradient does not match output shape"));
    }
    let gout = grad_out.data();
    let cols = g.im2col(input.data());
    // Transposed patches make the weight gradient a sequence of row updates.
    let mut cols_t = vec![0.0f32; npos * nrows];
    for r in 0..nrows {
        for p in 0..npos {
            cols_t[p * nrows + r] = cols[r * npos + p];
        }
    }
    let wdata = weight.data();
    let mut gw = vec![0.0f32; g.cout * nrows];
    let mut gb = vec![0.0f32; g.cout];
    let mut gcols = vec![0.0f32; nrows * npos];
    for oc in 0..g.cout {
        let gplane = &gout[oc * npos..(oc + 1) * npos];
        gb[oc] = gplane.iter().sum();
        let gwrow = &mut gw[oc * nrows..(oc + 1) * nrows];
        for (p, &gv) in gplane.iter().enumerate() {
            axpy(gwrow, gv, &cols_t[p * nrows..(p + 1) * nrows]);
        }
        let wrow = &wdata[oc * nrows..(oc + 1) * nrows];
        for (r, &wv) in wrow.iter().enumerate() {
            axpy(&mut gcols[r * npos..(r + 1) * npos], wv, gplane);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), g.col2im(&gcols))?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.cout], gb)?,
    })
}

/// Affine map `out[j] = sum_i weight[j,i] * input[i] + bias[j]`; the input is
/// read as a flat vector whatever its shape.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [m, n] = *weight.shape() else {
        return Err(Error::shape("dense", format!("weight must be [m,n], got {:?}", weight.shape())));
    };
    if input.len() != n || bias.len() != m {
        return Err(Error::shape(
            "dense",
            format!(
                "input of {} values, weight {:?}, bias of {}",
                input.len(),
                weight.shape(),
                bias.len()
            ),
        ));
    }
    let x = input.data();
    let out: Vec<f32> = weight
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, &b)| {
            let mut acc = b;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            acc
        })
        .collect();
    let macs = (m * n) as u64;
    counter::record(macs, 2 * macs + m as u64);
    Tensor::new(vec![m], out)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let [m, n] = *weight.shape() else {
        return Err(Error::shape("dense_backward", "weight must be rank 2"));
    };
    if grad_out.len() != m || input.len() != n {
        return Err(Error::shape("dense_backward", "gradient does not match layer"));
    }
    let x = input.data();
    let mut gw = vec![0.0f32; m * n];
    let mut gx = vec![0.0f32; n];
    for (j, &gj) in grad_out.data().iter().enumerate() {
        axpy(&mut gw[j * n..(j + 1) * n], gj, x);
        axpy(&mut gx, gj, &weight.data()[j * n..(j + 1) * n]);
    }
    Ok(DenseGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(vec![m, n], gw)?,
        bias: grad_out.clone().reshape(vec![m])?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    counter::record(0, x.len() as u64);
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Gradient through ReLU given its *output*.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: output.shape().to_vec(),
        data,
    }
}

/// Max pooling over `k x k` windows; also returns the flat input index each
/// output was taken from (first maximum in scan order).
pub fn max_pool2d_with_indices(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = input.dims3("max_pool2d")?;
    let (Some(ho), Some(wo)) = (conv_out_dim(h, k, stride, 0), conv_out_dim(w, k, stride, 0)) else {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {k} stride {stride} does not fit {h}x{w}"),
        ));
    };
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    counter::record(0, (out.len() * (k * k - 1)) as u64);
    Ok((Tensor::new(vec![c, ho, wo], out)?, idx))
}

pub fn max_pool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    Ok(max_pool2d_with_indices(input, k, stride)?.0)
}

pub fn max_pool2d_backward(input_shape: &[usize], indices: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    let mut gi = Tensor::zeros(input_shape);
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        gi.data[i as usize] += g;
    }
    Ok(gi)
}

/// Per-channel spatial mean of a `[C,H,W]` map.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3("global_avg_pool")?;
    let area = h * w;
    let out = input
        .data()
        .chunks_exact(area)
        .map(|plane| plane.iter().sum::<f32>() / area as f32)
        .collect();
    counter::record(0, (c * area) as u64);
    Tensor::new(vec![c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *input_shape else {
        return Err(Error::shape("global_avg_pool_backward", "expected [C,H,W]"));
    };
    let area = (h * w) as f32;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / area, h * w));
    }
    Tensor::new(input_shape.to_vec(), data)
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    counter::record(0, x.len() as u64);
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

/// Gradient through the logistic function given its *output*.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: output.shape().to_vec(),
        data: output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    }
}

fn softmax_values(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax(x: &Tensor) -> Tensor {
    counter::record(0, x.len() as u64);
    Tensor {
        shape: x.shape().to_vec(),
        data: softmax_values(x.data()),
    }
}

fn softmax_f64(x: &[f32]) -> Vec<f64> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = x.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient through softmax given its *input*. Recomputed in `f64`: the
/// result `s * (g - s.g)` cancels badly in single precision.
pub fn softmax_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let s = softmax_f64(input.data());
    let dot: f64 = s.iter().zip(grad_out.data()).map(|(s, &g)| s * g as f64).sum();
    Tensor {
        shape: input.shape().to_vec(),
        data: s
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| (s * (g as f64 - dot)) as f32)
            .collect(),
    }
}

/// Gradient of [`cross_entropy_logits`] with respect to the logits,
/// `softmax(z) - onehot(label)`, formed in `f64`.
pub fn cross_entropy_grad(logits: &[f32], label: usize) -> Vec<f32> {
    let mut p = softmax_f64(logits);
    p[label] -= 1.0;
    p.into_iter().map(|v| v as f32).collect()
}

/// `d bce(sigmoid(z), t) / dz = sigmoid(z) - t`, with the `t = 1` case
/// written as `-sigmoid(-z)` to keep precision when `sigmoid(z)` is near one.
pub fn bce_logit_grad(z: f32, t: f32) -> f32 {
    if t == 1.0 {
        -sigmoid_scalar(-z)
    } else {
        sigmoid_scalar(z) - t
    }
}

/// `-log softmax(logits)[label]`, evaluated through log-sum-exp.
pub fn cross_entropy_logits(logits: &[f32], label: usize) -> Result<f32> {
    if label >= logits.len() {
        return Err(Error::OutOfRange {
            index: label,
            valid: format!("0..{}", logits.len()),
        });
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
    Ok(lse - logits[label])
}

/// Natural-log entropy of a probability vector.
pub fn entropy(p: &[f32]) -> f32 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f32>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = t(&[1, 2, 3], &[1.0, -2.0, 3.0, 4.5, 0.0, -1.0]);
        let out = conv2d(&input, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernel_gives_zero_map_of_right_shape() {
        let input = Tensor::filled(&[2, 5, 5], 3.0);
        let out = conv2d(&input, &Tensor::zeros(&[4, 2, 3, 3]), &Tensor::zeros(&[4]), 2, 1).unwrap();
        assert_eq!(out.shape(), &[4, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_mismatched_channels_and_oversized_kernels() {
        let input = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(
            conv2d(&input, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Shape { .. })
        ));
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 7, 7]), &Tensor::zeros(&[1]), 1, 1).is_err());
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1]), 0, 0).is_err());
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap().data(), x.data());
        let b = Tensor::vector(vec![0.25, -4.0]);
        assert_eq!(dense(&x, &Tensor::zeros(&[2, 3]), &b).unwrap().data(), b.data());
        assert!(dense(&x, &Tensor::zeros(&[2, 4]), &b).is_err());
    }

    #[test]
    fn global_avg_pool_direct_cases() {
        assert_eq!(global_avg_pool(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap().data(), &[2.5]);
        let out = global_avg_pool(&Tensor::filled(&[3, 4, 5], 0.75)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.75).abs() < 1e-7));
    }

    #[test]
    fn sigmoid_reference_points() {
        let s = sigmoid(&Tensor::vector(vec![0.0, 100.0, -100.0, 1000.0, -1000.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] as f64 - 1.0).abs() < 1e-12);
        assert!(s.data()[2] >= 0.0 && s.data()[2] < 1e-40);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_relu_and_pool_reference_points() {
        let s = softmax(&Tensor::vector(vec![0.3; 4]));
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let r = relu(&Tensor::vector(vec![-1.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 2.0]);
        let p = max_pool2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(p.data(), &[4.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_m() {
        let ce = cross_entropy_logits(&[0.0, 0.0], 0).unwrap();
        assert!((ce - std::f32::consts::LN_2).abs() < 1e-7);
        assert!(cross_entropy_logits(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn kernels_report_their_work() {
        let input = Tensor::filled(&[3, 6, 6], 0.1);
        let (_, counts) = counter::measure(|| {
            conv2d(&input, &Tensor::zeros(&[4, 3, 3, 3]), &Tensor::zeros(&[4]), 1, 1).unwrap()
        });
        assert_eq!(counts.macs, 4 * 3 * 9 * 36);
        assert_eq!(counts.flops, 2 * 4 * 3 * 9 * 36 + 4 * 36);
    }
}
