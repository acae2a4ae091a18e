//! 2D convolution kernels (cross-correlation) via im2col + GEMM.
//!
//! Layouts: input [B, Cin, H, W], conv weight [Cout, Cin, k, k], transposed
//! conv weight [Cin, Cout, k, k]. The transposed convolution is realized as
//! the input-gradient of the matching forward convolution, which gives
//! gradient-of-conv2d semantics for free.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if input.len() != 4 {
        return Err(Error::Shape(format!("conv2d: input must be 4-D [B,C,H,W], got {:?}", input)));
    }
    if weight.len() != 4 {
        return Err(Error::Shape(format!("conv2d: weight must be 4-D, got {:?}", weight)));
    }
    let (b, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, wcin, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
    if k != k2 {
        return Err(Error::Shape(format!("conv2d: kernel must be square, got {}x{}", k, k2)));
    }
    if k % 2 == 0 && stride != 2 {
        // k=2 only appears in the stride-2 transposed-conv path.
        return Err(Error::Shape(format!("conv2d: kernel extent {} must be odd", k)));
    }
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d: input channel axis 1 has {} channels, weight expects {}",
            cin, wcin
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::Shape(format!("conv2d: stride must be 1 or 2, got {}", stride)));
    }
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < k || wp < k || (hp - k) % stride != 0 || (wp - k) % stride != 0 {
        return Err(Error::Shape(format!(
            "conv2d: spatial axes {}x{} with pad {} stride {} incompatible with kernel {}",
            h, w, pad, stride, k
        )));
    }
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;
    Ok(ConvDims { b, cin, h, w, cout, k, ho, wo })
}

/// Gather padded input patches: cols[(ci*k + dy)*k + dx][oy*wo + ox].
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, batch: usize, stride: usize, pad: usize, cols: &mut [T]) {
    let (cin, h, w, k, ho, wo) = (d.cin, d.h, d.w, d.k, d.ho, d.wo);
    let xb = &x[batch * cin * h * w..(batch + 1) * cin * h * w];
    for ci in 0..cin {
        let plane = &xb[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = ((ci * k + dy) * k + dx) * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let out = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        out[ox] = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-accumulate column gradients back onto the (padded) input.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, batch: usize, stride: usize, pad: usize, gx: &mut [T]) {
    let (cin, h, w, k, ho, wo) = (d.cin, d.h, d.w, d.k, d.ho, d.wo);
    let gb = &mut gx[batch * cin * h * w..(batch + 1) * cin * h * w];
    for ci in 0..cin {
        let plane = &mut gb[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = ((ci * k + dy) * k + dx) * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; `bias` may be `None`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias axis 0 has {:?}, expected [{}]",
                b.shape(),
                d.cout
            )));
        }
    }
    let patch = d.cin * d.k * d.k;
    let area = d.ho * d.wo;
    let mut cols = vec![T::zero(); patch * area];
    let mut out = Tensor::zeros(&[d.b, d.cout, d.ho, d.wo]);
    for b in 0..d.b {
        im2col(x.data(), &d, b, stride, pad, &mut cols);
        let dst = &mut out.data_mut()[b * d.cout * area..(b + 1) * d.cout * area];
        unsafe {
            T::gemm(d.cout, patch, area, T::one(), weight.data().as_ptr(), cols.as_ptr(), T::zero(), dst.as_mut_ptr());
        }
        if let Some(bias) = bias {
            for co in 0..d.cout {
                let bv = bias.data()[co];
                for v in &mut dst[co * area..(co + 1) * area] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of the convolution output w.r.t. its input.
pub(crate) fn conv_input_grad<T: Scalar>(
    gout: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input_shape, weight.shape(), stride, pad)?;
    if gout.shape() != [d.b, d.cout, d.ho, d.wo] {
        return Err(Error::Shape(format!(
            "conv2d backward: output grad {:?}, expected {:?}",
            gout.shape(),
            [d.b, d.cout, d.ho, d.wo]
        )));
    }
    let patch = d.cin * d.k * d.k;
    let area = d.ho * d.wo;
    // cols = W^T (cout x patch)^T * gout  -> patch x area; W stored row-major
    // [cout, patch], so use gemm with A = W^T via swapped dims on a transposed copy.
    let mut wt = vec![T::zero(); patch * d.cout];
    for co in 0..d.cout {
        for p in 0..patch {
            wt[p * d.cout + co] = weight.data()[co * patch + p];
        }
    }
    let mut cols = vec![T::zero(); patch * area];
    let mut gx = Tensor::zeros(input_shape);
    for b in 0..d.b {
        let g = &gout.data()[b * d.cout * area..(b + 1) * d.cout * area];
        unsafe {
            T::gemm(patch, d.cout, area, T::one(), wt.as_ptr(), g.as_ptr(), T::zero(), cols.as_mut_ptr());
        }
        col2im(&cols, &d, b, stride, pad, gx.data_mut());
    }
    Ok(gx)
}

/// Gradient of the convolution output w.r.t. the weight (and bias).
pub(crate) fn conv_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    gout: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = conv_dims(x.shape(), weight_shape, stride, pad)?;
    let patch = d.cin * d.k * d.k;
    let area = d.ho * d.wo;
    let mut cols = vec![T::zero(); patch * area];
    let mut colst = vec![T::zero(); area * patch];
    let mut gw = Tensor::zeros(weight_shape);
    let mut gb = Tensor::zeros(&[d.cout]);
    for b in 0..d.b {
        im2col(x.data(), &d, b, stride, pad, &mut cols);
        for p in 0..patch {
            for a in 0..area {
                colst[a * patch + p] = cols[p * area + a];
            }
        }
        let g = &gout.data()[b * d.cout * area..(b + 1) * d.cout * area];
        unsafe {
            T::gemm(d.cout, area, patch, T::one(), g.as_ptr(), colst.as_ptr(), T::one(), gw.data_mut().as_mut_ptr());
        }
        for co in 0..d.cout {
            let mut acc = T::zero();
            for &v in &g[co * area..(co + 1) * area] {
                acc += v;
            }
            gb.data_mut()[co] += acc;
        }
    }
    Ok((gw, gb))
}

/// Output spatial extent of the transposed convolution.
pub(crate) fn convt_out(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let v = (h - 1) * stride + k;
    if v < 2 * pad {
        return Err(Error::Shape(format!(
            "conv_transpose2d: pad {} too large for extent {} kernel {}",
            pad, h, k
        )));
    }
    Ok(v - 2 * pad)
}

/// Standalone forward convolution on raw tensors (no tape).
pub fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv_forward(x, weight, bias, stride, pad)
}

/// Standalone transposed convolution on raw tensors (no tape).
/// Weight layout [Cin, Cout, k, k].
pub fn conv_transpose2d_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("conv_transpose2d: input must be 4-D, got {:?}", s)));
    }
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != s[1] {
        return Err(Error::Shape(format!(
            "conv_transpose2d: input channel axis 1 has {} channels, weight expects {}",
            s[1],
            if ws.len() == 4 { ws[0] } else { 0 }
        )));
    }
    let k = ws[2];
    let ho = convt_out(s[2], k, stride, pad)?;
    let wo = convt_out(s[3], k, stride, pad)?;
    // The [Cin, Cout, k, k] layout already matches the weight of the virtual
    // forward convolution whose input-gradient realizes the transpose, so the
    // buffer is shared between conv2d(.., w) and conv_transpose2d(.., w) and
    // the two are exact adjoints.
    conv_input_grad(x, weight, &[s[0], ws[1], ho, wo], stride, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Direct sextuple-loop convolution oracle.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map(|bb| bb.data()[co]).unwrap_or(0.0);
                        for ci in 0..cin {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        let xv = x.data()
                                            [((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                        let wv = w.data()[((co * cin + ci) * k + dy) * k + dx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_passes_through() {
        let x = Tensor::<f64>::from_f64_slice(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let w = Tensor::<f64>::from_f64_slice(&[1, 1, 1, 1], &[1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv_forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_overlap_counts() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv_forward(&x, &w, None, 1, 1).unwrap();
        // center sees the full 3x3 window, corners a 2x2 one
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[8], 4.0);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let fast = conv_forward(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = conv_oracle(&x, &w, Some(&b), stride, pad);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!(crate::tensor::rel_err(*a, *b, 1e-12) < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_stride2_replicates_blocks() {
        let x = Tensor::<f64>::from_f64_slice(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let y = conv_transpose2d_raw(&x, &w, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let expect = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn transpose_identity_kernel() {
        let x = Tensor::<f64>::from_f64_slice(&[1, 1, 2, 2], &[5., 6., 7., 8.]).unwrap();
        let w = Tensor::<f64>::from_f64_slice(&[1, 1, 1, 1], &[1.0]).unwrap();
        let y = conv_transpose2d_raw(&x, &w, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        // <conv2d(u, w), v> == <u, conv_transpose2d(v, w)> with the same w
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 0, 2)] {
            let u = rand_tensor(&mut rng, &[2, 3, 8, 8]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let y = conv_forward(&u, &w, None, stride, pad).unwrap();
            let v = rand_tensor(&mut rng, y.shape());
            let back = conv_transpose2d_raw(&v, &w, stride, pad).unwrap();
            let lhs = y.dot(&v).unwrap();
            let rhs = u.dot(&back).unwrap();
            assert!(crate::tensor::rel_err(lhs, rhs, 1e-12) < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 3, 5, 5]);
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3]);
        let err = conv_forward(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }
}
