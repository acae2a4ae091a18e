//! Centered unitary Fourier transforms, Cartesian sampling masks, coil maps,
//! and the SENSE encoding operator pair A / A^H.
//!
//! Complex data is stored as paired real/imaginary planes (`CArray`). Images
//! are [H, W]; multi-coil stacks are [C, H, W]. Masks are 1-D in ky (the row
//! axis) broadcast across kx, matching Cartesian line acquisition.

use std::sync::Arc;

use num_complex::Complex;
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, SelfAdjointMap, Tensor};

/// Complex-valued dense array stored as separate re/im planes.
#[derive(Clone, Debug, PartialEq)]
pub struct CArray<T> {
    re: Vec<T>,
    im: Vec<T>,
    shape: Vec<usize>,
}

/// A complex 2-D image [H, W].
pub type ComplexImage<T> = CArray<T>;

impl<T: Scalar> CArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        CArray { re: vec![T::zero(); n], im: vec![T::zero(); n], shape: shape.to_vec() }
    }

    pub fn from_planes(shape: Vec<usize>, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::Shape(format!(
                "complex array: shape {:?} implies {} elements, planes have {}/{}",
                shape,
                n,
                re.len(),
                im.len()
            )));
        }
        Ok(CArray { re, im, shape })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        self.check_same(o, "add")?;
        let re = self.re.iter().zip(&o.re).map(|(&a, &b)| a + b).collect();
        let im = self.im.iter().zip(&o.im).map(|(&a, &b)| a + b).collect();
        Ok(CArray { re, im, shape: self.shape.clone() })
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.check_same(o, "sub")?;
        let re = self.re.iter().zip(&o.re).map(|(&a, &b)| a - b).collect();
        let im = self.im.iter().zip(&o.im).map(|(&a, &b)| a - b).collect();
        Ok(CArray { re, im, shape: self.shape.clone() })
    }

    pub fn scale(&self, s: T) -> Self {
        CArray {
            re: self.re.iter().map(|&v| v * s).collect(),
            im: self.im.iter().map(|&v| v * s).collect(),
            shape: self.shape.clone(),
        }
    }

    /// self += alpha * other, real alpha.
    pub fn axpy(&mut self, alpha: T, o: &Self) -> Result<()> {
        self.check_same(o, "axpy")?;
        for (a, &b) in self.re.iter_mut().zip(&o.re) {
            *a = *a + alpha * b;
        }
        for (a, &b) in self.im.iter_mut().zip(&o.im) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    /// Pointwise complex product; `conj_self` multiplies by conj(self) instead.
    pub fn mul(&self, o: &Self, conj_self: bool) -> Result<Self> {
        self.check_same(o, "mul")?;
        let n = self.len();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        let sgn = if conj_self { -T::one() } else { T::one() };
        for i in 0..n {
            let (ar, ai) = (self.re[i], sgn * self.im[i]);
            let (br, bi) = (o.re[i], o.im[i]);
            re.push(ar * br - ai * bi);
            im.push(ar * bi + ai * br);
        }
        Ok(CArray { re, im, shape: self.shape.clone() })
    }

    /// Real part of the Hermitian inner product <self, other>.
    pub fn dot_real(&self, o: &Self) -> Result<T> {
        self.check_same(o, "dot_real")?;
        let mut acc = T::zero();
        for i in 0..self.len() {
            acc = acc + self.re[i] * o.re[i] + self.im[i] * o.im[i];
        }
        Ok(acc)
    }

    pub fn norm2(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.len() {
            acc = acc + self.re[i] * self.re[i] + self.im[i] * self.im[i];
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().all(|v| v.is_finite()) && self.im.iter().all(|v| v.is_finite())
    }

    pub fn magnitude(&self) -> Tensor<T> {
        let data =
            self.re.iter().zip(&self.im).map(|(&r, &i)| (r * r + i * i).sqrt()).collect();
        Tensor::new(self.shape.clone(), data).expect("magnitude shape")
    }

    /// 2-channel real view [1, 2, H, W] of an [H, W] image.
    pub fn to_2ch(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("to_2ch expects [H,W], got {:?}", self.shape)));
        }
        let (h, w) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend_from_slice(&self.re);
        data.extend_from_slice(&self.im);
        Tensor::new(vec![1, 2, h, w], data)
    }

    /// Inverse of [`to_2ch`]; accepts [1,2,H,W] or [2,H,W].
    pub fn from_2ch(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s.len() {
            4 if s[0] == 1 && s[1] == 2 => (2, s[2], s[3]),
            3 if s[0] == 2 => (2, s[1], s[2]),
            _ => {
                return Err(Error::Shape(format!("from_2ch expects [1,2,H,W] or [2,H,W], got {s:?}")))
            }
        };
        let _ = c;
        let plane = h * w;
        Ok(CArray {
            re: t.data()[..plane].to_vec(),
            im: t.data()[plane..2 * plane].to_vec(),
            shape: vec![h, w],
        })
    }

    pub fn to_f64(&self) -> CArray<f64> {
        CArray {
            re: self.re.iter().map(|v| v.as_f64()).collect(),
            im: self.im.iter().map(|v| v.as_f64()).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn to_f32(&self) -> CArray<f32> {
        CArray {
            re: self.re.iter().map(|v| v.as_f64() as f32).collect(),
            im: self.im.iter().map(|v| v.as_f64() as f32).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Borrow coil `c` of a [C, H, W] stack as an [H, W] image copy.
    pub fn coil(&self, c: usize) -> Result<CArray<T>> {
        if self.shape.len() != 3 {
            return Err(Error::Shape(format!("coil() expects [C,H,W], got {:?}", self.shape)));
        }
        let plane = self.shape[1] * self.shape[2];
        Ok(CArray {
            re: self.re[c * plane..(c + 1) * plane].to_vec(),
            im: self.im[c * plane..(c + 1) * plane].to_vec(),
            shape: vec![self.shape[1], self.shape[2]],
        })
    }

    fn check_same(&self, o: &Self, what: &str) -> Result<()> {
        if self.shape != o.shape {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} vs {:?}",
                self.shape, o.shape
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Centered unitary 2-D FFT
// ---------------------------------------------------------------------------

/// Cached plans for one (H, W) extent.
pub struct Fft2<T: Scalar> {
    h: usize,
    w: usize,
    row_f: Arc<dyn Fft<T>>,
    row_i: Arc<dyn Fft<T>>,
    col_f: Arc<dyn Fft<T>>,
    col_i: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_f: planner.plan_fft_forward(w),
            row_i: planner.plan_fft_inverse(w),
            col_f: planner.plan_fft_forward(h),
            col_i: planner.plan_fft_inverse(h),
        }
    }

    fn transform(&self, x: &CArray<T>, forward: bool) -> Result<CArray<T>> {
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2] != self.h || s[s.len() - 1] != self.w {
            return Err(Error::Shape(format!(
                "fft2: trailing axes of {:?} do not match {}x{}",
                s, self.h, self.w
            )));
        }
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let slabs = x.len() / plane;
        let scale = T::one() / T::of_f64((plane as f64).sqrt());
        let (row, col) =
            if forward { (&self.row_f, &self.col_f) } else { (&self.row_i, &self.col_i) };
        // ifftshift offsets (pre-transform) and fftshift offsets (post)
        let (pre_h, pre_w) = ((h + 1) / 2, (w + 1) / 2);
        let (post_h, post_w) = (h / 2, w / 2);

        let mut out = CArray::zeros(s);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
        let mut colbuf = vec![Complex::new(T::zero(), T::zero()); h];
        for slab in 0..slabs {
            let off = slab * plane;
            for r in 0..h {
                let sr = (r + pre_h) % h;
                for c in 0..w {
                    let sc = (c + pre_w) % w;
                    let i = off + sr * w + sc;
                    buf[r * w + c] = Complex::new(x.re[i], x.im[i]);
                }
            }
            for r in 0..h {
                row.process(&mut buf[r * w..(r + 1) * w]);
            }
            for c in 0..w {
                for r in 0..h {
                    colbuf[r] = buf[r * w + c];
                }
                col.process(&mut colbuf);
                for r in 0..h {
                    buf[r * w + c] = colbuf[r];
                }
            }
            for r in 0..h {
                let dr = (r + post_h) % h;
                for c in 0..w {
                    let dc = (c + post_w) % w;
                    let v = buf[r * w + c] * scale;
                    let i = off + dr * w + dc;
                    out.re[i] = v.re;
                    out.im[i] = v.im;
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, x: &CArray<T>) -> Result<CArray<T>> {
        self.transform(x, true)
    }

    pub fn inverse(&self, x: &CArray<T>) -> Result<CArray<T>> {
        self.transform(x, false)
    }
}

/// Centered (DC at H/2, W/2) unitary 2-D DFT over the trailing two axes.
pub fn fft2c<T: Scalar>(image: &CArray<T>) -> Result<CArray<T>> {
    let s = image.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("fft2c expects at least 2-D, got {s:?}")));
    }
    Fft2::new(s[s.len() - 2], s[s.len() - 1]).forward(image)
}

/// Exact inverse of [`fft2c`]; unitary, so energy is preserved.
pub fn ifft2c<T: Scalar>(kspace: &CArray<T>) -> Result<CArray<T>> {
    let s = kspace.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("ifft2c expects at least 2-D, got {s:?}")));
    }
    Fft2::new(s[s.len() - 2], s[s.len() - 1]).inverse(kspace)
}

// ---------------------------------------------------------------------------
// Sampling mask
// ---------------------------------------------------------------------------

/// Cartesian ky-line mask with a fully sampled center block.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    lines: Vec<bool>,
    pub r: f64,
    pub center_fraction: f64,
}

/// Center block rows [lo, hi): `len` lines around ky = H/2, odd remainders
/// extending one line toward 0.
pub fn center_block(h: usize, len: usize) -> (usize, usize) {
    let lo = h / 2 - (len + 1) / 2;
    (lo, lo + len)
}

impl SamplingMask {
    pub fn h(&self) -> usize {
        self.lines.len()
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn is_sampled(&self, ky: usize) -> bool {
        self.lines[ky]
    }

    pub fn sampled_count(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    pub fn all_sampled(&self) -> bool {
        self.lines.iter().all(|&b| b)
    }

    pub fn center_block_len(&self) -> usize {
        (self.center_fraction * self.h() as f64).ceil() as usize
    }

    /// Boolean H x W matrix view (lines broadcast across kx).
    pub fn matrix(&self, w: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.h() * w);
        for &line in &self.lines {
            m.extend(std::iter::repeat(line).take(w));
        }
        m
    }

    /// Zero unsampled ky rows of an [H, W] or [C, H, W] array.
    pub fn apply<T: Scalar>(&self, x: &mut CArray<T>) -> Result<()> {
        let s = x.shape().to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h != self.h() {
            return Err(Error::Shape(format!(
                "mask: ky axis has {} lines, mask has {}",
                h,
                self.h()
            )));
        }
        let plane = h * w;
        let slabs = x.len() / plane;
        for slab in 0..slabs {
            for r in 0..h {
                if !self.lines[r] {
                    let off = slab * plane + r * w;
                    x.re_mut()[off..off + w].fill(T::zero());
                    x.im_mut()[off..off + w].fill(T::zero());
                }
            }
        }
        Ok(())
    }
}

/// Pseudo-random Cartesian mask: fully sampled center block of
/// ceil(center_fraction * H) lines, remaining round(H/R) - center lines drawn
/// uniformly without replacement from the periphery.
pub fn make_mask(h: usize, r: f64, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    if r < 1.0 {
        return Err(Error::Config(format!("acceleration R = {r} must be >= 1")));
    }
    if !(center_fraction > 0.0 && center_fraction <= 0.5) {
        return Err(Error::Config(format!("center_fraction {center_fraction} outside (0, 0.5]")));
    }
    let cb = (center_fraction * h as f64).ceil() as usize;
    let total = (h as f64 / r).round() as usize;
    if total < cb {
        return Err(Error::Config(format!(
            "round(H/R) = {total} lines is below the center block of {cb}"
        )));
    }
    let (lo, hi) = center_block(h, cb);
    let mut lines = vec![false; h];
    for line in lines.iter_mut().take(hi).skip(lo) {
        *line = true;
    }
    let periphery: Vec<usize> = (0..h).filter(|&i| i < lo || i >= hi).collect();
    let extra = total - cb;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in index_sample(&mut rng, periphery.len(), extra.min(periphery.len())).into_iter() {
        lines[periphery[idx]] = true;
    }
    Ok(SamplingMask { lines, r, center_fraction })
}

// ---------------------------------------------------------------------------
// Coil maps and the SENSE system
// ---------------------------------------------------------------------------

/// Complex coil sensitivity maps [C, H, W].
#[derive(Clone, Debug)]
pub struct CoilMaps<T> {
    pub maps: CArray<T>,
    pub normalized: bool,
}

impl<T: Scalar> CoilMaps<T> {
    pub fn c(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.maps.shape()[2]
    }

    /// Max deviation of sum_c |S_c|^2 from 1 over the grid.
    pub fn normalization_error(&self) -> T {
        let (c, h, w) = (self.c(), self.h(), self.w());
        let plane = h * w;
        let mut worst = T::zero();
        for p in 0..plane {
            let mut acc = T::zero();
            for ci in 0..c {
                let i = ci * plane + p;
                acc = acc + self.maps.re()[i] * self.maps.re()[i]
                    + self.maps.im()[i] * self.maps.im()[i];
            }
            let dev = (acc - T::one()).abs();
            if dev > worst {
                worst = dev;
            }
        }
        worst
    }

    pub fn to_f64(&self) -> CoilMaps<f64> {
        CoilMaps { maps: self.maps.to_f64(), normalized: self.normalized }
    }

    pub fn to_f32(&self) -> CoilMaps<f32> {
        CoilMaps { maps: self.maps.to_f32(), normalized: self.normalized }
    }
}

/// Multi-coil k-space measurements with the mask they were acquired under.
#[derive(Clone, Debug)]
pub struct KSpace<T> {
    pub data: CArray<T>,
    pub mask: SamplingMask,
}

impl<T: Scalar> KSpace<T> {
    pub fn c(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Mask + coil maps + extents; defines A and A^H.
pub struct SenseSystem<T: Scalar> {
    pub mask: SamplingMask,
    pub coils: CoilMaps<T>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    fft: Fft2<T>,
}

impl<T: Scalar> SenseSystem<T> {
    pub fn new(mask: SamplingMask, coils: CoilMaps<T>) -> Result<Self> {
        let (c, h, w) = (coils.c(), coils.h(), coils.w());
        if mask.h() != h {
            return Err(Error::Shape(format!(
                "sense system: mask ky axis {} != coil map H {}",
                mask.h(),
                h
            )));
        }
        Ok(SenseSystem { mask, coils, h, w, c, fft: Fft2::new(h, w) })
    }

    fn check_image(&self, x: &CArray<T>) -> Result<()> {
        if x.shape() != [self.h, self.w] {
            return Err(Error::Shape(format!(
                "sense system: image {:?}, expected [{}, {}]",
                x.shape(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }

    /// A x: per coil, mask .* fft2c(S_c .* x).
    pub fn forward(&self, x: &CArray<T>) -> Result<KSpace<T>> {
        self.check_image(x)?;
        let plane = self.h * self.w;
        let mut data = CArray::zeros(&[self.c, self.h, self.w]);
        for ci in 0..self.c {
            let sc = self.coils.maps.coil(ci)?;
            let weighted = sc.mul(x, false)?;
            let mut k = self.fft.forward(&weighted)?;
            self.mask.apply(&mut k)?;
            data.re_mut()[ci * plane..(ci + 1) * plane].copy_from_slice(k.re());
            data.im_mut()[ci * plane..(ci + 1) * plane].copy_from_slice(k.im());
        }
        Ok(KSpace { data, mask: self.mask.clone() })
    }

    /// A^H y: sum_c conj(S_c) .* ifft2c(mask .* y_c).
    pub fn adjoint(&self, y: &CArray<T>) -> Result<CArray<T>> {
        if y.shape() != [self.c, self.h, self.w] {
            return Err(Error::Shape(format!(
                "sense system: k-space {:?}, expected [{}, {}, {}]",
                y.shape(),
                self.c,
                self.h,
                self.w
            )));
        }
        let mut out = CArray::zeros(&[self.h, self.w]);
        for ci in 0..self.c {
            let mut yc = y.coil(ci)?;
            self.mask.apply(&mut yc)?;
            let img = self.fft.inverse(&yc)?;
            let sc = self.coils.maps.coil(ci)?;
            let contrib = sc.mul(&img, true)?;
            out.axpy(T::one(), &contrib)?;
        }
        Ok(out)
    }

    /// A^H A x, the (self-adjoint) normal operator.
    pub fn normal(&self, x: &CArray<T>) -> Result<CArray<T>> {
        self.check_image(x)?;
        let mut out = CArray::zeros(&[self.h, self.w]);
        for ci in 0..self.c {
            let sc = self.coils.maps.coil(ci)?;
            let weighted = sc.mul(x, false)?;
            let mut k = self.fft.forward(&weighted)?;
            self.mask.apply(&mut k)?;
            let img = self.fft.inverse(&k)?;
            let contrib = sc.mul(&img, true)?;
            out.axpy(T::one(), &contrib)?;
        }
        Ok(out)
    }
}

/// The SENSE normal operator on 2-channel real views, for tape recording.
/// A^H A is Hermitian, so its real representation is symmetric: backward
/// applies the operator itself.
pub struct NormalOp<T: Scalar> {
    pub system: Arc<SenseSystem<T>>,
}

impl<T: Scalar> SelfAdjointMap<T> for NormalOp<T> {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let img = CArray::from_2ch(x).expect("normal op input must be a 2-channel view");
        let out = self.system.normal(&img).expect("normal operator");
        out.to_2ch().expect("normal op output")
    }
}

/// Calibration-region sensitivity estimate: low-pass per-coil images from the
/// fully sampled center, normalized by root-sum-of-squares.
pub fn estimate_sensitivities<T: Scalar>(
    kspace: &KSpace<T>,
    center_lines: usize,
) -> Result<CoilMaps<T>> {
    if center_lines == 0 {
        return Err(Error::Config("empty calibration region".into()));
    }
    if center_lines > kspace.mask.center_block_len() {
        return Err(Error::Config(format!(
            "calibration region of {center_lines} lines exceeds the mask center block of {}",
            kspace.mask.center_block_len()
        )));
    }
    let (c, h, w) = (kspace.c(), kspace.h(), kspace.w());
    let (lo, hi) = center_block(h, center_lines);
    let plane = h * w;
    let mut lowres = CArray::zeros(&[c, h, w]);
    for ci in 0..c {
        let mut k = kspace.data.coil(ci)?;
        for r in 0..h {
            if r < lo || r >= hi {
                let off = r * w;
                k.re_mut()[off..off + w].fill(T::zero());
                k.im_mut()[off..off + w].fill(T::zero());
            }
        }
        let img = ifft2c(&k)?;
        lowres.re_mut()[ci * plane..(ci + 1) * plane].copy_from_slice(img.re());
        lowres.im_mut()[ci * plane..(ci + 1) * plane].copy_from_slice(img.im());
    }
    // rSoS support with a relative floor
    let mut rsos = vec![T::zero(); plane];
    let mut max_rsos = T::zero();
    for (p, r) in rsos.iter_mut().enumerate() {
        let mut acc = T::zero();
        for ci in 0..c {
            let i = ci * plane + p;
            acc = acc + lowres.re()[i] * lowres.re()[i] + lowres.im()[i] * lowres.im()[i];
        }
        *r = acc.sqrt();
        if *r > max_rsos {
            max_rsos = *r;
        }
    }
    let floor = T::of_f64(1e-8) * max_rsos;
    let mut maps = CArray::zeros(&[c, h, w]);
    for p in 0..plane {
        if rsos[p] > floor {
            for ci in 0..c {
                let i = ci * plane + p;
                maps.re_mut()[i] = lowres.re()[i] / rsos[p];
                maps.im_mut()[i] = lowres.im()[i] / rsos[p];
            }
        }
    }
    Ok(CoilMaps { maps, normalized: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_err;
    use rand::Rng;

    pub(crate) fn rand_carray(rng: &mut impl Rng, shape: &[usize]) -> CArray<f64> {
        let n: usize = shape.iter().product();
        let re = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        CArray::from_planes(shape.to_vec(), re, im).unwrap()
    }

    /// Dense centered unitary DFT-matrix oracle: X[u,v] = (1/sqrt(HW)) *
    /// sum_{y,x} img[y,x] exp(-2*pi*i*((u-H/2)(y-H/2)/H + (v-W/2)(x-W/2)/W)).
    fn dft_oracle(x: &CArray<f64>, inverse: bool) -> CArray<f64> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let mut out = CArray::zeros(&[h, w]);
        let sgn = if inverse { 1.0 } else { -1.0 };
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let fy = (u as f64 - (h / 2) as f64) * (y as f64 - (h / 2) as f64) / h as f64;
                        let fx = (v as f64 - (w / 2) as f64) * (xx as f64 - (w / 2) as f64) / w as f64;
                        let arg = sgn * 2.0 * std::f64::consts::PI * (fy + fx);
                        let ph = Complex::new(arg.cos(), arg.sin());
                        acc += Complex::new(x.re()[y * w + xx], x.im()[y * w + xx]) * ph;
                    }
                }
                out.re_mut()[u * w + v] = acc.re * scale;
                out.im_mut()[u * w + v] = acc.im * scale;
            }
        }
        out
    }

    fn max_dev(a: &CArray<f64>, b: &CArray<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..a.len() {
            worst = worst.max((a.re()[i] - b.re()[i]).abs()).max((a.im()[i] - b.im()[i]).abs());
        }
        worst
    }

    pub(crate) fn test_maps(c: usize, h: usize, w: usize, seed: u64) -> CoilMaps<f64> {
        crate::phantom::make_coil_maps(c, h, w, seed).to_f64()
    }

    #[test]
    fn impulse_at_center_gives_flat_spectrum() {
        let mut x = CArray::<f64>::zeros(&[8, 8]);
        x.re_mut()[4 * 8 + 4] = 1.0;
        let k = fft2c(&x).unwrap();
        for i in 0..64 {
            assert!((k.re()[i] - 0.125).abs() < 1e-12, "re[{i}] = {}", k.re()[i]);
            assert!(k.im()[i].abs() < 1e-12);
        }
        // and the inverse direction recovers the impulse
        let back = ifft2c(&k).unwrap();
        assert!(max_dev(&back, &x) < 1e-12);
    }

    #[test]
    fn roundtrip_and_parseval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = rand_carray(&mut rng, &[16, 16]);
        let k = fft2c(&x).unwrap();
        let back = ifft2c(&k).unwrap();
        let num = back.sub(&x).unwrap().norm2();
        assert!(num / x.norm2() < 1e-6);
        assert!(rel_err(k.norm2(), x.norm2(), 1e-12) < 1e-6, "unitarity");
    }

    #[test]
    fn matches_dense_dft_matrix_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = rand_carray(&mut rng, &[4, 4]);
        let fast = fft2c(&x).unwrap();
        let slow = dft_oracle(&x, false);
        assert!(max_dev(&fast, &slow) < 1e-6, "forward dev {}", max_dev(&fast, &slow));
        let fasti = ifft2c(&x).unwrap();
        let slowi = dft_oracle(&x, true);
        assert!(max_dev(&fasti, &slowi) < 1e-6, "inverse dev {}", max_dev(&fasti, &slowi));
    }

    #[test]
    fn mask_line_counts_match_formula() {
        // R=4: round(64/4) = 16 total, ceil(0.06*64) = 4 center lines
        let m = make_mask(64, 4.0, 0.06, 1).unwrap();
        assert_eq!(m.sampled_count(), 16);
        let (lo, hi) = center_block(64, m.center_block_len());
        assert_eq!(hi - lo, 4);
        assert!((lo..hi).all(|i| m.is_sampled(i)));

        // R=6: round(64/6) = 11 total
        let m6 = make_mask(64, 6.0, 0.06, 1).unwrap();
        assert_eq!(m6.sampled_count(), 11);

        // R=1 samples everything
        let m1 = make_mask(64, 1.0, 0.06, 1).unwrap();
        assert!(m1.all_sampled());
    }

    #[test]
    fn mask_determinism_and_seed_variation() {
        let a = make_mask(64, 4.0, 0.06, 7).unwrap();
        let b = make_mask(64, 4.0, 0.06, 7).unwrap();
        assert_eq!(a, b);
        let c = make_mask(64, 4.0, 0.06, 8).unwrap();
        assert_eq!(a.sampled_count(), c.sampled_count());
        assert_ne!(a.lines(), c.lines());
    }

    #[test]
    fn too_few_lines_is_a_config_error() {
        let err = make_mask(64, 32.0, 0.06, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn forward_reduces_to_fft_for_trivial_system() {
        // C=1, S = 1, full mask
        let h = 8;
        let mut maps = CArray::<f64>::zeros(&[1, h, h]);
        maps.re_mut().fill(1.0);
        let coils = CoilMaps { maps, normalized: true };
        let mask = make_mask(h, 1.0, 0.25, 0).unwrap();
        let sys = SenseSystem::new(mask, coils).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = rand_carray(&mut rng, &[h, h]);
        let y = sys.forward(&x).unwrap();
        let k = fft2c(&x).unwrap();
        assert!(max_dev(&y.data.coil(0).unwrap(), &k) < 1e-12);

        // linearity: zero in, zero out
        let z = sys.forward(&CArray::zeros(&[h, h])).unwrap();
        assert_eq!(z.data.norm2(), 0.0);
    }

    #[test]
    fn forward_is_linear() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let coils = test_maps(4, 16, 16, 11);
        let mask = make_mask(16, 2.0, 0.2, 5).unwrap();
        let sys = SenseSystem::new(mask, coils).unwrap();
        let x1 = rand_carray(&mut rng, &[16, 16]);
        let x2 = rand_carray(&mut rng, &[16, 16]);
        let alpha = 0.7362;
        let mut combo = x1.scale(alpha);
        combo.axpy(1.0, &x2).unwrap();
        let lhs = sys.forward(&combo).unwrap().data;
        let mut rhs = sys.forward(&x1).unwrap().data.scale(alpha);
        rhs.axpy(1.0, &sys.forward(&x2).unwrap().data).unwrap();
        let dev = lhs.sub(&rhs).unwrap().norm2() / lhs.norm2();
        assert!(dev < 1e-6, "linearity dev {dev}");
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let coils = test_maps(4, 16, 16, 100 + trial);
            let mask = make_mask(16, 2.0, 0.2, trial).unwrap();
            let sys = SenseSystem::new(mask, coils).unwrap();
            let x = rand_carray(&mut rng, &[16, 16]);
            let y = rand_carray(&mut rng, &[4, 16, 16]);
            let ax = sys.forward(&x).unwrap().data;
            let aty = sys.adjoint(&y).unwrap();
            // complex Hermitian inner products; compare real and imaginary parts
            let mut lhs = Complex::new(0.0, 0.0);
            for i in 0..ax.len() {
                let a = Complex::new(ax.re()[i], ax.im()[i]);
                let b = Complex::new(y.re()[i], y.im()[i]);
                lhs += a.conj() * b;
            }
            let mut rhs = Complex::new(0.0, 0.0);
            for i in 0..x.len() {
                let a = Complex::new(x.re()[i], x.im()[i]);
                let b = Complex::new(aty.re()[i], aty.im()[i]);
                rhs += a.conj() * b;
            }
            let denom = ax.norm2() * y.norm2();
            assert!((lhs - rhs).norm() / denom <= 1e-6, "adjoint dev {}", (lhs - rhs).norm() / denom);
        }
    }

    #[test]
    fn full_mask_normalized_coils_normal_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let coils = test_maps(4, 16, 16, 42);
        let mask = make_mask(16, 1.0, 0.2, 0).unwrap();
        let sys = SenseSystem::new(mask, coils).unwrap();
        let x = rand_carray(&mut rng, &[16, 16]);
        let xa = sys.adjoint(&sys.forward(&x).unwrap().data).unwrap();
        let dev = xa.sub(&x).unwrap().norm2() / x.norm2();
        assert!(dev < 1e-6, "A^H A deviates from identity by {dev}");
    }

    #[test]
    fn normal_operator_is_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let coils = test_maps(4, 16, 16, 3);
        let mask = make_mask(16, 4.0, 0.1, 2).unwrap();
        let sys = SenseSystem::new(mask, coils).unwrap();
        for _ in 0..10 {
            let x = rand_carray(&mut rng, &[16, 16]);
            let nx = sys.normal(&x).unwrap();
            // <x, A^H A x> = ||Ax||^2 must be real and nonnegative
            let quad = x.dot_real(&nx).unwrap();
            assert!(quad >= -1e-9, "quadratic form {quad}");
            let mut imag = 0.0;
            for i in 0..x.len() {
                imag += x.re()[i] * nx.im()[i] - x.im()[i] * nx.re()[i];
            }
            assert!(imag.abs() / (x.norm2() * nx.norm2()).max(1e-12) < 1e-6);
        }
    }

    #[test]
    fn center_only_kspace_is_lowpass() {
        // reconstruct from center lines alone, re-project, and confirm no
        // energy lands outside the center band
        let coils = test_maps(2, 16, 16, 9);
        let mask = make_mask(16, 4.0, 0.25, 1).unwrap();
        let (lo, hi) = center_block(16, mask.center_block_len());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let x = rand_carray(&mut rng, &[16, 16]);
        let sys_full = SenseSystem::new(make_mask(16, 1.0, 0.25, 0).unwrap(), coils.clone()).unwrap();
        let mut y = sys_full.forward(&x).unwrap().data;
        // keep only center lines
        let w = 16;
        for c in 0..2 {
            for r in 0..16 {
                if r < lo || r >= hi {
                    let off = (c * 16 + r) * w;
                    y.re_mut()[off..off + w].fill(0.0);
                    y.im_mut()[off..off + w].fill(0.0);
                }
            }
        }
        let low = sys_full.adjoint(&y).unwrap();
        let reproj = sys_full.forward(&low).unwrap().data;
        // energy of A(low) outside the center band, relative to total
        let mut outside = 0.0f64;
        let mut total = 0.0f64;
        for c in 0..2 {
            for r in 0..16 {
                let off = (c * 16 + r) * w;
                for i in off..off + w {
                    let e = reproj.re()[i] * reproj.re()[i] + reproj.im()[i] * reproj.im()[i];
                    total += e;
                    if r < lo || r >= hi {
                        outside += e;
                    }
                }
            }
        }
        assert!(outside / total < 1e-6, "out-of-band energy ratio {}", outside / total);
    }

    #[test]
    fn estimated_maps_recover_smooth_truth() {
        // simulate from known analytic maps, estimate back, compare magnitudes
        let truth = test_maps(4, 32, 32, 77);
        let mask = make_mask(32, 2.0, 0.25, 3).unwrap();
        let sys = SenseSystem::new(mask, truth.clone()).unwrap();
        // smooth object with support everywhere
        let mut obj = CArray::<f64>::zeros(&[32, 32]);
        for y in 0..32 {
            for x in 0..32 {
                let fy = (y as f64 - 16.0) / 16.0;
                let fx = (x as f64 - 16.0) / 16.0;
                obj.re_mut()[y * 32 + x] = 1.0 - 0.3 * (fy * fy + fx * fx);
            }
        }
        let y = sys.forward(&obj).unwrap();
        let est = estimate_sensitivities(&y, sys.mask.center_block_len()).unwrap();
        assert!(est.normalization_error() < 1e-6);
        let mut mean_mag_err = 0.0;
        for i in 0..est.maps.len() {
            let me = (est.maps.re()[i].powi(2) + est.maps.im()[i].powi(2)).sqrt();
            let mt = (truth.maps.re()[i].powi(2) + truth.maps.im()[i].powi(2)).sqrt();
            mean_mag_err += (me - mt).abs();
        }
        mean_mag_err /= est.maps.len() as f64;
        assert!(mean_mag_err <= 0.05, "mean |S| error {mean_mag_err}");
    }

    #[test]
    fn single_coil_estimate_has_unit_magnitude() {
        let truth = test_maps(1, 16, 16, 5);
        let mask = make_mask(16, 1.0, 0.25, 0).unwrap();
        let sys = SenseSystem::new(mask, truth).unwrap();
        let mut obj = CArray::<f64>::zeros(&[16, 16]);
        obj.re_mut().fill(1.0);
        let y = sys.forward(&obj).unwrap();
        let est = estimate_sensitivities(&y, 4).unwrap();
        for i in 0..est.maps.len() {
            let m = (est.maps.re()[i].powi(2) + est.maps.im()[i].powi(2)).sqrt();
            assert!((m - 1.0).abs() < 1e-9, "|S| = {m}");
        }
    }

    #[test]
    fn empty_calibration_region_is_rejected() {
        let coils = test_maps(2, 16, 16, 1);
        let mask = make_mask(16, 2.0, 0.2, 0).unwrap();
        let sys = SenseSystem::new(mask, coils).unwrap();
        let y = sys.forward(&CArray::zeros(&[16, 16])).unwrap();
        assert!(estimate_sensitivities(&y, 0).is_err());
        assert!(estimate_sensitivities(&y, 999).is_err());
    }
}
