//! Synthetic crowd scenes with exact counts and dot positions.
//!
//! Every object is a Gaussian blob with unit peak. With the perspective
//! option blobs grow toward the bottom of the frame, giving the scale head
//! something to predict. Each scene draws from its own stream of the
//! dataset seed, so scene `i` does not depend on how many scenes precede it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::glc::{partition_image, PartitionGrid};

const MAGIC: &[u8; 4] = b"WCDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub image_size: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Range of the base blob width in pixels, sampled per dot.
    pub blob_sigma_range: (f64, f64),
    pub background_noise_std: f64,
    /// Blobs near the bottom row are up to 1.5× the base width, near the top 0.5×.
    pub perspective_gradient: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_scenes: 250,
            image_size: 64,
            count_min: 5,
            count_max: 50,
            blob_sigma_range: (1.0, 2.5),
            background_noise_std: 0.02,
            perspective_gradient: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_min == 0 || self.count_min > self.count_max {
            return Err(Error::config(
                "count_min",
                format!("need 0 < count_min <= count_max, got {}..{}", self.count_min, self.count_max),
            ));
        }
        if self.image_size < 16 || self.image_size > u16::MAX as usize {
            return Err(Error::config("image_size", format!("{} outside [16, 65535]", self.image_size)));
        }
        let (lo, hi) = self.blob_sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("blob_sigma", format!("invalid range {lo}..{hi}")));
        }
        if !(self.background_noise_std >= 0.0 && self.background_noise_std.is_finite()) {
            return Err(Error::config("background_noise_std", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub count: usize,
    /// `(row, col)` in continuous pixel coordinates, inside `[0, H) × [0, W)`.
    pub dots: Vec<(f64, f64)>,
    /// Render width of each dot. Not stored in dataset files; empty after loading.
    pub blob_sigma: Vec<f64>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Unclamped sum of unit-peak Gaussian blobs sampled at pixel centers.
pub fn render_blobs(dots: &[(f64, f64)], sigmas: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut img = vec![0.0; height * width];
    for (&(cy, cx), &s) in dots.iter().zip(sigmas) {
        // beyond 4σ a blob adds under 4e-4 of its peak
        let reach = 4.0 * s;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width);
        let k = -0.5 / (s * s);
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - cy;
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                img[y * width + x] += (k * (dy * dy + dx * dx)).exp();
            }
        }
    }
    img
}

/// One scene from `rng`. The spec's `num_scenes` and `seed` are not used here.
pub fn generate_scene<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<SyntheticScene> {
    spec.validate()?;
    let s = spec.image_size;
    let count = rng.random_range(spec.count_min..=spec.count_max);
    let (lo, hi) = spec.blob_sigma_range;
    let mut dots = Vec::with_capacity(count);
    let mut sigmas = Vec::with_capacity(count);
    for _ in 0..count {
        let y = rng.random::<f64>() * s as f64;
        let x = rng.random::<f64>() * s as f64;
        let base = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let sigma = if spec.perspective_gradient {
            base * (0.5 + y / s as f64)
        } else {
            base
        };
        dots.push((y, x));
        sigmas.push(sigma);
    }
    let mut pixels = render_blobs(&dots, &sigmas, s, s);
    for p in &mut pixels {
        if spec.background_noise_std > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            *p += spec.background_noise_std * z;
        }
        *p = p.clamp(0.0, 1.0);
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![1, s, s], pixels)?,
        count,
        dots,
        blob_sigma: sigmas,
    })
}

/// Generator for scene `index` of a dataset with seed `seed`.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    (0..spec.num_scenes)
        .map(|i| generate_scene(spec, &mut scene_rng(spec.seed, i)))
        .collect()
}

/// `c·(1 + ε)` for a given deviation ε, clamped at zero.
pub fn apply_label_deviation(count: f64, epsilon: f64) -> f64 {
    (count * (1.0 + epsilon)).max(0.0)
}

/// `c·(1 + ε)` with `ε ~ N(0, σ²)`, clamped at zero.
pub fn inject_label_noise<R: Rng + ?Sized>(count: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("inject_label_noise", format!("sigma {sigma} must be non-negative")));
    }
    let eps = Normal::new(0.0, sigma)
        .map_err(|e| Error::invalid("inject_label_noise", e.to_string()))?
        .sample(rng);
    Ok(apply_label_deviation(count, eps))
}

/// Dots per tile under the half-open tile rule, row-major.
pub fn subimage_count_oracle(scene: &SyntheticScene, grid: PartitionGrid) -> Result<Vec<usize>> {
    let (h, w) = (scene.height(), scene.width());
    if grid.rows > h || grid.cols > w {
        return Err(Error::invalid("subimage_count_oracle", format!("grid {grid} larger than {h}x{w}")));
    }
    let mut counts = vec![0; grid.tiles()];
    for &(y, x) in &scene.dots {
        let t = grid
            .tile_of(y, x, h, w)
            .ok_or_else(|| Error::invalid("subimage_count_oracle", format!("dot ({y}, {x}) outside image")))?;
        counts[t] += 1;
    }
    Ok(counts)
}

/// Crops every scene into `grid` tiles labeled with their exact counts.
pub fn make_patch_dataset(scenes: &[SyntheticScene], grid: PartitionGrid) -> Result<Vec<(Tensor, f64)>> {
    let mut out = Vec::with_capacity(scenes.len() * grid.tiles());
    for scene in scenes {
        let counts = subimage_count_oracle(scene, grid)?;
        for (tile, c) in partition_image(&scene.image, grid)?.into_iter().zip(counts) {
            out.push((tile, c as f64));
        }
    }
    Ok(out)
}

/// `(image, count)` pairs for training and evaluation.
pub fn labeled(scenes: &[SyntheticScene]) -> Vec<(Tensor, f64)> {
    scenes.iter().map(|s| (s.image.clone(), s.count as f64)).collect()
}

/// Serializes scenes in the little-endian WCDS layout.
pub fn write_dataset<W: Write>(mut out: W, scenes: &[SyntheticScene]) -> Result<()> {
    let (h, w) = scenes.first().map_or((0, 0), |s| (s.height(), s.width()));
    if h > u16::MAX as usize || w > u16::MAX as usize || scenes.len() > u32::MAX as usize {
        return Err(Error::invalid("write_dataset", "dimensions exceed the file format"));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(scenes.len() as u32).to_le_bytes())?;
    out.write_all(&(h as u16).to_le_bytes())?;
    out.write_all(&(w as u16).to_le_bytes())?;
    for s in scenes {
        if s.image.shape() != [1, h, w] {
            return Err(Error::shape("write_dataset", s.image.shape(), &[1, h, w]));
        }
        out.write_all(&(s.count as f64).to_le_bytes())?;
        out.write_all(&(s.dots.len() as u32).to_le_bytes())?;
        for &(y, x) in &s.dots {
            out.write_all(&y.to_le_bytes())?;
            out.write_all(&x.to_le_bytes())?;
        }
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..])? {
                0 => {
                    return Err(Error::Format {
                        offset: self.offset,
                        reason: format!("truncated: needed {N} bytes"),
                    })
                }
                n => filled += n,
            }
        }
        self.offset += N;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        self.take().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take().map(f64::from_le_bytes)
    }
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<SyntheticScene>> {
    let mut c = Cursor { inner: input, offset: 0 };
    if &c.take::<4>()? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected WCDS".into(),
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let n = c.u32()? as usize;
    let h = c.u16()? as usize;
    let w = c.u16()? as usize;
    let mut scenes = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let at = c.offset;
        let count = c.f64()?;
        let dot_count = c.u32()? as usize;
        if count != dot_count as f64 {
            return Err(Error::Format {
                offset: at,
                reason: format!("count {count} disagrees with {dot_count} dots"),
            });
        }
        let mut dots = Vec::with_capacity(dot_count.min(1 << 16));
        for _ in 0..dot_count {
            dots.push((c.f64()?, c.f64()?));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            pixels.push(c.f64()?);
        }
        scenes.push(SyntheticScene {
            image: Tensor::new(vec![1, h, w], pixels)?,
            count: dot_count,
            dots,
            blob_sigma: Vec::new(),
        });
    }
    Ok(scenes)
}

pub fn save_dataset(path: impl AsRef<Path>, scenes: &[SyntheticScene]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), scenes)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SyntheticScene>> {
    read_dataset(BufReader::new(File::open(path)?))
}
