//! Seeded synthetic segmentation images and their on-disk layout.
//!
//! Each image holds 1–3 foreground shapes brighter than the background, plus
//! Gaussian noise. Images whose foreground covers ≤ 2% or ≥ 60% of the
//! pixels are redrawn, as are shapes that rasterize to nothing.
//!
//! On disk a dataset is a directory with `index.txt` and, per split,
//! `<split>_images.ptn` (`count×C×H×W`) and `<split>_masks.ptn`
//! (`count×H×W`, labels stored as floats).

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::model::SegSample;
use crate::tensor::{load_ptn, save_ptn, Tensor};

pub const MIN_FG_FRACTION: f64 = 0.02;
pub const MAX_FG_FRACTION: f64 = 0.6;
/// Noise σ at `noise = 1`.
pub const NOISE_SCALE: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShapeFamily {
    #[default]
    Ellipses,
    Blobs,
    Rings,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipses" => Ok(Self::Ellipses),
            "blobs" => Ok(Self::Blobs),
            "rings" => Ok(Self::Rings),
            other => Err(invalid(format!("unknown shape family {other:?} (ellipses | blobs | rings)"))),
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ellipses => "ellipses",
            Self::Blobs => "blobs",
            Self::Rings => "rings",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub family: ShapeFamily,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 500,
            height: 64,
            width: 64,
            channels: 1,
            family: ShapeFamily::Ellipses,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid("count must be ≥ 1"));
        }
        if self.height < 8 || self.width < 8 || self.channels == 0 {
            return Err(invalid(format!("image {}×{}×{} too small", self.channels, self.height, self.width)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(invalid(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl Dataset {
    /// 70/10/20 split in generation order (val and test sizes rounded down).
    pub fn split(mut samples: Vec<SegSample>) -> Self {
        let n = samples.len();
        let (n_val, n_test) = (n / 10, n / 5);
        let test = samples.split_off(n - n_test);
        let val = samples.split_off(n - n_test - n_val);
        Self {
            train: samples,
            val,
            test,
        }
    }

    pub fn get(&self, split: &str) -> Result<&[SegSample]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(invalid(format!("unknown split {other:?} (train | val | test)"))),
        }
    }
}

fn rasterize(rng: &mut ChaCha8Rng, family: ShapeFamily, h: usize, w: usize, mask: &mut [u8]) -> usize {
    let size = h.min(w) as f64;
    let cy = rng.gen_range(0.15..0.85) * h as f64;
    let cx = rng.gen_range(0.15..0.85) * w as f64;
    let mut painted = 0;
    let mut paint = |inside: &dyn Fn(f64, f64) -> bool| {
        for y in 0..h {
            for x in 0..w {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    painted += 1;
                    mask[y * w + x] = 1;
                }
            }
        }
    };
    match family {
        ShapeFamily::Ellipses => {
            let (ry, rx) = (rng.gen_range(0.06..0.2) * size, rng.gen_range(0.06..0.2) * size);
            let (s, c) = rng.gen_range(0.0..PI).sin_cos();
            paint(&|y, x| {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            });
        }
        ShapeFamily::Blobs => {
            let k = rng.gen_range(3..=5);
            let lobes: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    let r = rng.gen_range(0.04..0.1) * size;
                    let oy = rng.gen_range(-0.1..0.1) * size;
                    let ox = rng.gen_range(-0.1..0.1) * size;
                    (cy + oy, cx + ox, r)
                })
                .collect();
            paint(&|y, x| lobes.iter().any(|&(ly, lx, r)| (y - ly).powi(2) + (x - lx).powi(2) <= r * r));
        }
        ShapeFamily::Rings => {
            let outer = rng.gen_range(0.1..0.22) * size;
            let inner = outer * rng.gen_range(0.45..0.7);
            paint(&|y, x| {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            });
        }
    }
    painted
}

/// Sample `index` of the stream defined by `spec`.
pub fn generate_one(spec: &SyntheticSpec, index: usize) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let mask = loop {
        let mut mask = vec![0u8; h * w];
        let shapes = rng.gen_range(1..=3);
        let mut ok = true;
        for _ in 0..shapes {
            ok &= rasterize(&mut rng, spec.family, h, w, &mut mask) > 0;
        }
        let frac = mask.iter().filter(|&&m| m != 0).count() as f64 / (h * w) as f64;
        if ok && frac > MIN_FG_FRACTION && frac < MAX_FG_FRACTION {
            break mask;
        }
    };
    let bg = rng.gen_range(0.1..0.35);
    let fg = rng.gen_range(0.6..0.9);
    let noise = Normal::new(0.0, spec.noise * NOISE_SCALE).expect("σ ≥ 0");
    let plane: Vec<f64> = mask
        .iter()
        .map(|&m| {
            let base = if m != 0 { fg } else { bg };
            let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base + n).clamp(0.0, 1.0)
        })
        .collect();
    let data = (0..spec.channels).flat_map(|_| plane.iter().copied()).collect();
    let image = Tensor::new([spec.channels, h, w], data).expect("sized above");
    SegSample { image, mask }
}

pub fn generate(spec: &SyntheticSpec, exec: Exec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    let idx: Vec<usize> = (0..spec.count).collect();
    Ok(exec.map(&idx, |&i| generate_one(spec, i)))
}

fn stack(samples: &[SegSample], spec: &SyntheticSpec) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let images = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    let masks = samples.iter().flat_map(|s| s.mask.iter().map(|&m| m as f64)).collect();
    Ok((Tensor::new([samples.len(), c, h, w], images)?, Tensor::new([samples.len(), h, w], masks)?))
}

fn unstack(images: &Tensor, masks: &Tensor) -> Result<Vec<SegSample>> {
    let s = images.shape();
    if s.len() != 4 || masks.shape() != [s[0], s[2], s[3]] {
        return Err(Error::Format(format!("images {:?} and masks {:?} disagree", s, masks.shape())));
    }
    let (n, per_img, per_mask) = (s[0], s[1] * s[2] * s[3], s[2] * s[3]);
    (0..n)
        .map(|i| {
            let image = Tensor::new([s[1], s[2], s[3]], images.data()[i * per_img..(i + 1) * per_img].to_vec())?;
            let mask = masks.data()[i * per_mask..(i + 1) * per_mask]
                .iter()
                .map(|&v| {
                    if (0.0..256.0).contains(&v) && v.fract() == 0.0 {
                        Ok(v as u8)
                    } else {
                        Err(Error::Format(format!("label {v} is not a small integer")))
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            Ok(SegSample { image, mask })
        })
        .collect()
}

/// Writes `dataset` under `dir` (created if missing).
pub fn save_dataset(dir: &Path, spec: &SyntheticSpec, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = format!(
        "format = segprune-dataset-1\nheight = {}\nwidth = {}\nchannels = {}\nfamily = {}\nnoise = {}\nseed = {}\ncount = {}\n",
        spec.height, spec.width, spec.channels, spec.family, spec.noise, spec.seed, spec.count
    );
    for (name, split) in [("train", &dataset.train), ("val", &dataset.val), ("test", &dataset.test)] {
        let (images, masks) = stack(split, spec)?;
        save_ptn(dir.join(format!("{name}_images.ptn")), &images)?;
        save_ptn(dir.join(format!("{name}_masks.ptn")), &masks)?;
        index.push_str(&format!("{name} = {}\n", split.len()));
    }
    fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn gen_data(spec: &SyntheticSpec, dir: &Path, exec: Exec) -> Result<Dataset> {
    let dataset = Dataset::split(generate(spec, exec)?);
    save_dataset(dir, spec, &dataset)?;
    Ok(dataset)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index = fs::read_to_string(dir.join("index.txt"))?;
    if !index.lines().any(|l| l.trim() == "format = segprune-dataset-1") {
        return Err(Error::Format(format!("{} is not a dataset index", dir.join("index.txt").display())));
    }
    let load = |name: &str| -> Result<Vec<SegSample>> {
        let images = load_ptn(dir.join(format!("{name}_images.ptn")))?;
        let masks = load_ptn(dir.join(format!("{name}_masks.ptn")))?;
        unstack(&images, &masks)
    };
    Ok(Dataset {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    })
}
