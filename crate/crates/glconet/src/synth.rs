//! Synthetic camouflage dataset: smooth random textures, an object region
//! whose texture blends toward the background as the camouflage strength
//! rises, optional occlusion, and deterministic per-image RNG streams.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectFamily {
    Blob,
    Ring,
    MultiBlob,
}

impl ObjectFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(ObjectFamily::Blob),
            "ring" => Ok(ObjectFamily::Ring),
            "multi-blob" => Ok(ObjectFamily::MultiBlob),
            other => Err(Error::Config(format!("unknown object family {other:?} (blob|ring|multi-blob)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectFamily::Blob => "blob",
            ObjectFamily::Ring => "ring",
            ObjectFamily::MultiBlob => "multi-blob",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub extent: usize,
    pub family: ObjectFamily,
    /// Texture similarity between object and background in [0,1].
    pub strength: f64,
    /// Fraction of the object hidden by an occluder, in [0,1).
    pub occlusion: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("image count must be >= 1".into()));
        }
        if self.extent < 8 {
            return Err(Error::Config(format!("extent {} too small", self.extent)));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("camouflage strength {} outside [0,1]", self.strength)));
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return Err(Error::Config(format!("occlusion fraction {} outside [0,1)", self.occlusion)));
        }
        Ok(())
    }
}

pub struct SynthImage {
    /// [1,3,e,e] in [0,1].
    pub image: Tensor,
    /// [1,1,e,e] in {0,1}.
    pub mask: Tensor,
}

/// Sum of a few random plane waves, normalized to [0,1].
fn smooth_field(rng: &mut ChaCha8Rng, extent: usize, harmonics: usize, min_cycles: f64, max_cycles: f64) -> Vec<f64> {
    let mut comps = Vec::with_capacity(harmonics);
    for _ in 0..harmonics {
        let cycles = rng.gen_range(min_cycles..max_cycles);
        let angle = rng.gen_range(0.0..TAU);
        let phase = rng.gen_range(0.0..TAU);
        let amp = rng.gen_range(0.5..1.0);
        comps.push((cycles * angle.cos(), cycles * angle.sin(), phase, amp));
    }
    let e = extent as f64;
    let mut field = vec![0.0; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let mut v = 0.0;
            for &(fx, fy, phase, amp) in &comps {
                v += amp * (TAU * (fx * x as f64 + fy * y as f64) / e + phase).sin();
            }
            field[y * extent + x] = v;
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut field {
        *v = (*v - lo) / span;
    }
    field
}

/// Threshold a field at a rank so the mask holds an exact pixel count.
fn rank_threshold(field: &[f64], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| field[b].partial_cmp(&field[a]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; field.len()];
    for &i in order.iter().take(keep) {
        mask[i] = true;
    }
    mask
}

fn blob_mask(rng: &mut ChaCha8Rng, e: usize) -> Vec<bool> {
    // Very low-frequency field: large smooth regions, often border-touching.
    let field = smooth_field(rng, e, 2, 0.4, 1.1);
    let frac = rng.gen_range(0.25..0.55);
    rank_threshold(&field, ((e * e) as f64 * frac) as usize)
}

fn ring_mask(rng: &mut ChaCha8Rng, e: usize) -> Vec<bool> {
    let ef = e as f64;
    let cx = rng.gen_range(0.35..0.65) * ef;
    let cy = rng.gen_range(0.35..0.65) * ef;
    let radius = rng.gen_range(0.18..0.30) * ef;
    let width = rng.gen_range(0.10..0.16) * ef;
    let lobes = rng.gen_range(2..5) as f64;
    let phase = rng.gen_range(0.0..TAU);
    let wobble_amp = rng.gen_range(0.0..0.12);
    let mut mask = vec![false; e * e];
    for y in 0..e {
        for x in 0..e {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let r = radius * (1.0 + wobble_amp * (lobes * theta + phase).sin());
            if (dist - r).abs() < width / 2.0 {
                mask[y * e + x] = true;
            }
        }
    }
    mask
}

fn multi_blob_mask(rng: &mut ChaCha8Rng, e: usize) -> Vec<bool> {
    let ef = e as f64;
    let n = rng.gen_range(2..4);
    let mut mask = vec![false; e * e];
    for _ in 0..n {
        let cx = rng.gen_range(0.2..0.8) * ef;
        let cy = rng.gen_range(0.2..0.8) * ef;
        let radius = rng.gen_range(0.10..0.20) * ef;
        let lobes = rng.gen_range(2..6) as f64;
        let phase = rng.gen_range(0.0..TAU);
        let wobble_amp = rng.gen_range(0.05..0.25);
        for y in 0..e {
            for x in 0..e {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let dist = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let r = radius * (1.0 + wobble_amp * (lobes * theta + phase).sin());
                if dist < r {
                    mask[y * e + x] = true;
                }
            }
        }
    }
    mask
}

/// Remove `occlusion` of the object behind a slab cutting across it; the
/// cut is rank-based on the projection so the removed count is exact.
fn occlude(rng: &mut ChaCha8Rng, mask: &mut [bool], e: usize, occlusion: f64) -> Vec<bool> {
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let remove = ((fg.len() as f64) * occlusion) as usize;
    let theta = rng.gen_range(0.0..TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    if remove == 0 {
        return vec![false; e * e];
    }
    let mut proj: Vec<(f64, usize)> = fg
        .iter()
        .map(|&i| {
            let (y, x) = (i / e, i % e);
            (dx * x as f64 + dy * y as f64, i)
        })
        .collect();
    proj.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut occluder = vec![false; e * e];
    for &(_, i) in proj.iter().take(remove) {
        mask[i] = false;
        occluder[i] = true;
    }
    occluder
}

/// Deterministic generation of image `index` under `spec`.
pub fn generate_image(spec: &SynthSpec, index: usize) -> SynthImage {
    let e = spec.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let mut mask = match spec.family {
        ObjectFamily::Blob => blob_mask(&mut rng, e),
        ObjectFamily::Ring => ring_mask(&mut rng, e),
        ObjectFamily::MultiBlob => multi_blob_mask(&mut rng, e),
    };
    if !mask.iter().any(|&m| m) {
        mask[(e / 2) * e + e / 2] = true;
    }
    let occluder = if spec.occlusion > 0.0 {
        occlude(&mut rng, &mut mask, e, spec.occlusion)
    } else {
        vec![false; e * e]
    };
    if !mask.iter().any(|&m| m) {
        mask[(e / 2) * e + e / 2] = true;
    }

    let bg_field = smooth_field(&mut rng, e, 4, 1.0, 4.0);
    let obj_field = smooth_field(&mut rng, e, 4, 1.0, 4.0);
    let occ_field = smooth_field(&mut rng, e, 3, 1.0, 3.0);
    let s = spec.strength;
    let mut gray = vec![0.0f64; e * e];
    for i in 0..e * e {
        let bg = 0.15 + 0.30 * bg_field[i];
        let distinct = 0.72 + 0.26 * obj_field[i];
        let obj = (1.0 - s) * distinct + s * bg;
        gray[i] = if occluder[i] {
            0.42 + 0.18 * occ_field[i]
        } else if mask[i] {
            obj
        } else {
            bg
        };
    }

    let mut image = Tensor::zeros(&[1, 3, e, e]);
    let gains: [f64; 3] = [rng.gen_range(0.92..1.08), rng.gen_range(0.92..1.08), rng.gen_range(0.92..1.08)];
    let offsets: [f64; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    {
        let d = image.data_mut();
        for c in 0..3 {
            for i in 0..e * e {
                d[c * e * e + i] = (gray[i] * gains[c] + offsets[c]).clamp(0.0, 1.0);
            }
        }
    }
    let mask_t = Tensor::new(vec![1, 1, e, e], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).unwrap();
    SynthImage { image, mask: mask_t }
}

/// Writes `img_%04d.ppm` + `gt_%04d.pgm` pairs; returns the pair paths.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let images: Vec<SynthImage> = (0..spec.count).into_par_iter().map(|i| generate_image(spec, i)).collect();
    let e = spec.extent;
    let mut pairs = Vec::with_capacity(spec.count);
    for (i, si) in images.iter().enumerate() {
        let img_path = dir.join(format!("img_{i:04}.ppm"));
        let gt_path = dir.join(format!("gt_{i:04}.pgm"));
        let mut rgb = vec![0u8; 3 * e * e];
        for p in 0..e * e {
            for c in 0..3 {
                rgb[p * 3 + c] = (si.image.data()[c * e * e + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        image::write_ppm(&img_path, e, e, &rgb)?;
        let mask_bytes: Vec<u8> = si.mask.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
        image::write_pgm(&gt_path, e, e, &mask_bytes)?;
        pairs.push((img_path, gt_path));
    }
    Ok(pairs)
}
