//! Synthetic LGE-like phantoms, analytic coil maps, noise injection, and
//! dataset read/write.
//!
//! Each phantom carries a bright thin annulus standing in for the left-atrial
//! wall, so downstream Dice evaluation has a ground-truth mask for free. The
//! complex ground truth is the magnitude image under a smooth synthetic phase.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mri::{CArray, CoilMaps, KSpace, SamplingMask, SenseSystem};
use crate::tensor::{load_complex, load_real, save_complex, save_real, Tensor};

/// Ground-truth slice: magnitude, complex image, and the annulus mask.
#[derive(Clone, Debug)]
pub struct Phantom {
    /// Real magnitude image in [0, 1], shape [H, W].
    pub image: Tensor<f32>,
    /// Complex ground truth (magnitude under smooth synthetic phase).
    pub ground_truth: CArray<f32>,
    /// Bright thin-annulus mask ("left atrium" stand-in).
    pub la_mask: Vec<bool>,
    pub seed: u64,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic per-seed phantom: dark background, 2-4 smooth ellipse
/// chambers, one bright thin annulus, mild smooth bias field.
pub fn make_phantom(seed: u64, h: usize, w: usize) -> Result<Phantom> {
    if h < 32 || w < 32 {
        return Err(Error::Config(format!(
            "phantom extents {h}x{w} too small to fit the annulus (need >= 32)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let scale = (h.min(w) as f64) / 64.0;

    let mut img = vec![0.05f64; h * w];

    // chambers: smooth rotated ellipses, max-combined
    let n_chambers = rng.gen_range(2..=4usize);
    let mut chambers = Vec::new();
    for _ in 0..n_chambers {
        let cy = rng.gen_range(0.3..0.7) * h as f64;
        let cx = rng.gen_range(0.3..0.7) * w as f64;
        let a = rng.gen_range(8.0..20.0) * scale;
        let b = rng.gen_range(8.0..20.0) * scale;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let intensity = rng.gen_range(0.3..0.7);
        chambers.push((cy, cx, a, b, theta, intensity));
    }
    for (cy, cx, a, b, theta, intensity) in &chambers {
        let (st, ct) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = ct * dx + st * dy;
                let v = -st * dx + ct * dy;
                let q = (u / a).powi(2) + (v / b).powi(2);
                // soft edge roughly 1.5 px wide in normalized radius
                let rho = q.sqrt();
                let edge = 1.5 / a.min(*b);
                let val = intensity * smoothstep((1.0 - rho) / edge + 1.0);
                let p = y * w + x;
                if val > img[p] {
                    img[p] = val;
                }
            }
        }
    }

    // annulus: rotated elliptical band with a hard edge, 1-3 px wall
    let ann_cy = h as f64 / 2.0 + rng.gen_range(-8.0..8.0) * scale;
    let ann_cx = w as f64 / 2.0 + rng.gen_range(-8.0..8.0) * scale;
    let r_out = rng.gen_range(10.0..18.0) * scale;
    let ecc = rng.gen_range(0.7..1.0);
    let thickness = rng.gen_range(1.2..3.0) * scale;
    let ann_theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let ring_intensity = rng.gen_range(0.9..1.0);
    let (st, ct) = ann_theta.sin_cos();
    let mut la_mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - ann_cy;
            let dx = x as f64 - ann_cx;
            let u = ct * dx + st * dy;
            let v = -st * dx + ct * dy;
            // elliptical radius in pixels along the major axis
            let rho = ((u).powi(2) + (v / ecc).powi(2)).sqrt();
            let p = y * w + x;
            if rho <= r_out && rho >= r_out - thickness {
                img[p] = ring_intensity;
                la_mask[p] = true;
            } else if rho <= r_out + 2.0 && rho >= r_out - thickness - 2.0 {
                // moat: keep the ring disconnected from chamber plateaus
                img[p] = img[p].min(0.25);
            }
        }
    }
    if !la_mask.iter().any(|&m| m) {
        return Err(Error::Config(format!("phantom seed {seed}: annulus missed the pixel grid")));
    }

    // mild smooth additive bias field
    let bias_amp = rng.gen_range(0.01..0.05);
    let (fy, fx) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
    let (py, px) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
    for y in 0..h {
        for x in 0..w {
            let b = bias_amp
                * (fy * std::f64::consts::PI * y as f64 / h as f64 + py).sin()
                * (fx * std::f64::consts::PI * x as f64 / w as f64 + px).cos();
            let p = y * w + x;
            img[p] = (img[p] + b).clamp(0.0, 1.0);
        }
    }

    // smooth synthetic phase so the ground truth is genuinely complex
    let (a0, a1, a2) = (
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.8..0.8),
        rng.gen_range(-0.8..0.8),
    );
    let (b1, b2) = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
    let mut re = Vec::with_capacity(h * w);
    let mut im = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let ny = y as f64 / h as f64 - 0.5;
            let nx = x as f64 / w as f64 - 0.5;
            let phase = a0
                + a1 * ny
                + a2 * nx
                + b1 * (2.0 * std::f64::consts::PI * ny).sin()
                + b2 * (2.0 * std::f64::consts::PI * nx).sin();
            let m = img[y * w + x];
            re.push((m * phase.cos()) as f32);
            im.push((m * phase.sin()) as f32);
        }
    }

    let image = Tensor::new(vec![h, w], img.iter().map(|&v| v as f32).collect())?;
    let ground_truth = CArray::from_planes(vec![h, w], re, im)?;
    Ok(Phantom { image, ground_truth, la_mask, seed })
}

/// Analytic coil maps: smooth complex Gaussians centered around the border
/// with gentle linear phase, normalized so sum_c |S_c|^2 = 1 everywhere.
pub fn make_coil_maps(c: usize, h: usize, w: usize, seed: u64) -> CoilMaps<f32> {
    assert!(c >= 1, "coil count must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851f42d4c957f2d);
    let radius = 0.55 * h.min(w) as f64;
    let sigma = 0.55 * h.min(w) as f64;
    let plane = h * w;
    let mut re = vec![0.0f32; c * plane];
    let mut im = vec![0.0f32; c * plane];
    let mut mags = vec![0.0f64; c * plane];
    let mut phases = vec![0.0f64; c * plane];
    for ci in 0..c {
        let ang = 2.0 * std::f64::consts::PI * ci as f64 / c as f64 + rng.gen_range(-0.2..0.2);
        let cy = h as f64 / 2.0 + radius * ang.sin();
        let cx = w as f64 / 2.0 + radius * ang.cos();
        let (py, px) = (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
        let p0 = rng.gen_range(0.0..6.28);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                let i = ci * plane + y * w + x;
                mags[i] = g;
                phases[i] = p0 + py * y as f64 + px * x as f64;
            }
        }
    }
    for p in 0..plane {
        let mut ss = 0.0f64;
        for ci in 0..c {
            ss += mags[ci * plane + p] * mags[ci * plane + p];
        }
        let norm = ss.sqrt().max(1e-30);
        for ci in 0..c {
            let i = ci * plane + p;
            let m = mags[i] / norm;
            re[i] = (m * phases[i].cos()) as f32;
            im[i] = (m * phases[i].sin()) as f32;
        }
    }
    CoilMaps {
        maps: CArray::from_planes(vec![c, h, w], re, im).expect("coil map planes"),
        normalized: true,
    }
}

/// y = A(x) + n with complex Gaussian noise (RMS magnitude `noise_sigma`) on
/// sampled entries only; unsampled entries are exactly zero.
pub fn simulate_kspace(
    ground_truth: &CArray<f32>,
    coils: &CoilMaps<f32>,
    mask: &SamplingMask,
    noise_sigma: f32,
    noise_seed: u64,
) -> Result<KSpace<f32>> {
    if noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise_sigma {noise_sigma} must be >= 0")));
    }
    let system = SenseSystem::new(mask.clone(), coils.clone())?;
    let mut ks = system.forward(ground_truth)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0x94d049bb133111eb);
        // complex RMS sigma: each component gets sigma / sqrt(2)
        let normal = Normal::new(0.0f64, noise_sigma as f64 / std::f64::consts::SQRT_2)
            .map_err(|e| Error::Config(e.to_string()))?;
        let (c, h, w) = (ks.c(), ks.h(), ks.w());
        for ci in 0..c {
            for y in 0..h {
                if !mask.is_sampled(y) {
                    continue;
                }
                for x in 0..w {
                    let i = (ci * h + y) * w + x;
                    ks.data.re_mut()[i] += normal.sample(&mut rng) as f32;
                    ks.data.im_mut()[i] += normal.sample(&mut rng) as f32;
                }
            }
        }
    }
    Ok(ks)
}

// ---------------------------------------------------------------------------
// Dataset manifest and IO
// ---------------------------------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceEntry {
    pub index: usize,
    pub split: Split,
    pub image: String,
    pub la_mask: String,
    pub coils: String,
    /// Masks are stored as seed + parameters, never as bitmaps.
    pub mask_seed: u64,
    pub noise_seed: u64,
    pub r: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub noise_sigma: f32,
    pub center_fraction: f64,
    pub seed: u64,
    pub entries: Vec<SliceEntry>,
    /// Last TV weight picked by the CS grid search, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuned_lambda_tv: Option<f64>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&SliceEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.index) {
                return Err(Error::Data(format!(
                    "manifest: slice index {} appears in more than one split entry",
                    e.index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub slices: usize,
    pub h: usize,
    pub w: usize,
    pub coils: usize,
    pub seed: u64,
    pub noise_sigma: f32,
    pub center_fraction: f64,
    pub default_r: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        // desk-scale default: 240 slices at 64x64, C=4, split 160/30/50
        DatasetConfig {
            slices: 240,
            h: 64,
            w: 64,
            coils: 4,
            seed: 0,
            noise_sigma: 0.01,
            center_fraction: 0.06,
            default_r: 4.0,
        }
    }
}

fn mix_seed(master: u64, index: u64, salt: u64) -> u64 {
    // splitmix64 over (master, index, salt)
    let mut z = master
        .wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(salt.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Split sizes mirroring the 16/3/5 subject ratio.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 16.0 / 24.0).round() as usize;
    let val = ((n as f64) * 3.0 / 24.0).round() as usize;
    let train = train.min(n);
    let val = val.min(n - train);
    (train, val, n - train - val)
}

/// Generate phantoms + coil maps and write the dataset directory.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    if cfg.slices == 0 {
        return Err(Error::Config("dataset needs at least one slice".into()));
    }
    fs::create_dir_all(dir)?;
    let (n_train, n_val, _) = split_sizes(cfg.slices);
    let mut entries = Vec::with_capacity(cfg.slices);
    for i in 0..cfg.slices {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let phantom = make_phantom(mix_seed(cfg.seed, i as u64, 1), cfg.h, cfg.w)?;
        let coils = make_coil_maps(cfg.coils, cfg.h, cfg.w, mix_seed(cfg.seed, i as u64, 2));
        let image = format!("slice_{i}_image.urtn");
        let la_mask = format!("slice_{i}_la_mask.urtn");
        let coils_file = format!("slice_{i}_coils.urtn");
        save_complex(
            &dir.join(&image),
            phantom.ground_truth.shape(),
            phantom.ground_truth.re(),
            phantom.ground_truth.im(),
        )?;
        let mask_t = Tensor::<f32>::new(
            vec![cfg.h, cfg.w],
            phantom.la_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?;
        save_real(&dir.join(&la_mask), &mask_t)?;
        save_complex(&dir.join(&coils_file), coils.maps.shape(), coils.maps.re(), coils.maps.im())?;
        entries.push(SliceEntry {
            index: i,
            split,
            image,
            la_mask,
            coils: coils_file,
            mask_seed: mix_seed(cfg.seed, i as u64, 3),
            noise_seed: mix_seed(cfg.seed, i as u64, 4),
            r: cfg.default_r,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        h: cfg.h,
        w: cfg.w,
        c: cfg.coils,
        noise_sigma: cfg.noise_sigma,
        center_fraction: cfg.center_fraction,
        seed: cfg.seed,
        entries,
        tuned_lambda_tv: None,
    };
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    manifest.validate()?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Parse and validate a dataset directory; checks every referenced file.
pub fn read_dataset(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    for e in &manifest.entries {
        for f in [&e.image, &e.la_mask, &e.coils] {
            let p = dir.join(f);
            if !p.exists() {
                return Err(Error::Data(format!("manifest references missing file {}", p.display())));
            }
        }
    }
    Ok(manifest)
}

/// One slice loaded back into memory.
#[derive(Clone)]
pub struct LoadedSlice {
    pub index: usize,
    pub ground_truth: CArray<f32>,
    pub la_mask: Vec<bool>,
    pub coils: CoilMaps<f32>,
    pub mask_seed: u64,
    pub noise_seed: u64,
    pub r: f64,
}

impl LoadedSlice {
    /// Magnitude of the complex ground truth.
    pub fn magnitude(&self) -> Tensor<f32> {
        self.ground_truth.magnitude()
    }
}

pub fn load_slice(dir: &Path, entry: &SliceEntry) -> Result<LoadedSlice> {
    let (shape, re, im) = load_complex(&dir.join(&entry.image))?;
    let ground_truth = CArray::from_planes(shape, re, im)?;
    let mask_t: Tensor<f32> = load_real(&dir.join(&entry.la_mask))?;
    let la_mask = mask_t.data().iter().map(|&v| v > 0.5).collect();
    let (cshape, cre, cim) = load_complex(&dir.join(&entry.coils))?;
    let coils = CoilMaps { maps: CArray::from_planes(cshape, cre, cim)?, normalized: true };
    Ok(LoadedSlice {
        index: entry.index,
        ground_truth,
        la_mask,
        coils,
        mask_seed: entry.mask_seed,
        noise_seed: entry.noise_seed,
        r: entry.r,
    })
}

/// Build the measurement model for one slice at acceleration `r`.
pub fn slice_measurement(
    slice: &LoadedSlice,
    manifest: &DatasetManifest,
    r: f64,
) -> Result<(SenseSystem<f32>, KSpace<f32>)> {
    let mask = crate::mri::make_mask(manifest.h, r, manifest.center_fraction, slice.mask_seed)?;
    let y = simulate_kspace(&slice.ground_truth, &slice.coils, &mask, manifest.noise_sigma, slice.noise_seed)?;
    let system = SenseSystem::new(mask, slice.coils.clone())?;
    Ok((system, y))
}

pub fn recon_file(index: usize) -> String {
    format!("slice_{index}_recon.urtn")
}

pub fn preview_file(index: usize) -> String {
    format!("slice_{index}_recon.pgm")
}

/// 8-bit max-normalized PGM preview.
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("pgm: expected [H,W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let peak = image.data().iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| ((v / peak).clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
