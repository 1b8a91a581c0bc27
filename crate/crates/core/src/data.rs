//! AWGN synthesis, augmented patch sampling and batch assembly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{is_netpbm_path, read_image, ImageBuffer};
use crate::tensor::Tensor;

/// Deterministic sub-seed for item `index` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ stream) ^ index)
}

/// Gaussian noise level on the 0–255 scale; applied as `sigma / 255`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Image plus noise, not clipped. Values may leave `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl NoisyImage {
    pub fn clipped(&self) -> ImageBuffer {
        ImageBuffer::from_clipped(self.channels, self.height, self.width, self.data.clone())
            .expect("shape carried over from a valid image")
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("consistent size")
    }
}

/// Fills `out` with i.i.d. `N(0, (sigma/255)²)` samples.
pub fn gaussian_field<R: Rng>(out: &mut [f32], sigma: f64, rng: &mut R) {
    let std = sigma / 255.0;
    for v in out {
        let z: f64 = StandardNormal.sample(rng);
        *v = (z * std) as f32;
    }
}

/// `clean + n` with `n ~ N(0, (σ/255)²)` per element; deterministic in the seed.
pub fn add_awgn(clean: &ImageBuffer, spec: &NoiseSpec) -> Result<NoisyImage> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {}",
            spec.sigma
        )));
    }
    let mut noise = vec![0.0f32; clean.data().len()];
    if spec.sigma > 0.0 {
        gaussian_field(
            &mut noise,
            spec.sigma,
            &mut ChaCha8Rng::seed_from_u64(spec.seed),
        );
    }
    Ok(NoisyImage {
        channels: clean.channels(),
        height: clean.height(),
        width: clean.width(),
        data: clean
            .data()
            .iter()
            .zip(&noise)
            .map(|(&c, &n)| c + n)
            .collect(),
    })
}

/// One of the eight square symmetries: counter-clockwise quarter turns
/// followed by an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Augment {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        quarter_turns: 0,
        flip: false,
    };

    pub fn all() -> impl Iterator<Item = Augment> {
        (0..8u8).map(Augment::from_index)
    }

    pub fn from_index(i: u8) -> Augment {
        Augment {
            quarter_turns: i % 4,
            flip: i >= 4,
        }
    }

    pub fn index(self) -> u8 {
        self.quarter_turns + if self.flip { 4 } else { 0 }
    }

    /// Source coordinate inside an `s×s` square for output `(y, x)`.
    fn source(self, y: usize, x: usize, s: usize) -> (usize, usize) {
        let x = if self.flip { s - 1 - x } else { x };
        let (mut y, mut x) = (y, x);
        for _ in 0..self.quarter_turns {
            // Inverse of one counter-clockwise turn.
            (y, x) = (x, s - 1 - y);
        }
        (y, x)
    }
}

/// Where a patch comes from and how it is transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub augment: Augment,
}

impl PatchSpec {
    /// Crops and transforms planar `channels×height×width` data.
    pub fn extract(&self, data: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
        let s = self.size;
        assert!(
            self.top + s <= height && self.left + s <= width,
            "patch outside image"
        );
        let mut out = Vec::with_capacity(channels * s * s);
        for c in 0..channels {
            let plane = &data[c * height * width..(c + 1) * height * width];
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) = self.augment.source(y, x, s);
                    out.push(plane[(self.top + sy) * width + self.left + sx]);
                }
            }
        }
        out
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        let data = self.extract(img.data(), img.channels(), img.height(), img.width());
        ImageBuffer::new(img.channels(), self.size, self.size, data).expect("crop of a valid image")
    }
}

/// Uniform top-left corner and uniform augmentation for a `size×size` patch.
pub fn sample_patch_spec<R: Rng>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<PatchSpec> {
    if size == 0 || height < size || width < size {
        return Err(Error::ImageTooSmall {
            width,
            height,
            needed: size,
        });
    }
    Ok(PatchSpec {
        top: rng.random_range(0..=height - size),
        left: rng.random_range(0..=width - size),
        size,
        augment: Augment::from_index(rng.random_range(0..8)),
    })
}

pub fn sample_patch<R: Rng>(
    img: &ImageBuffer,
    size: usize,
    rng: &mut R,
) -> Result<(ImageBuffer, PatchSpec)> {
    let spec = sample_patch_spec(img.height(), img.width(), size, rng)?;
    Ok((spec.apply(img), spec))
}

/// Noise level drawn per batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSpec {
    Fixed(f64),
    /// Uniform in `[lo, hi]` per batch (blind training).
    Range(f64, f64),
}

impl SigmaSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SigmaSpec::Fixed(s) => s >= 0.0 && s.is_finite(),
            SigmaSpec::Range(lo, hi) => lo >= 0.0 && hi >= lo && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad noise level {self:?}")))
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SigmaSpec::Fixed(s) => s,
            SigmaSpec::Range(lo, hi) if hi > lo => rng.random_range(lo..=hi),
            SigmaSpec::Range(lo, _) => lo,
        }
    }
}

impl std::fmt::Display for SigmaSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaSpec::Fixed(s) => write!(f, "{s}"),
            SigmaSpec::Range(lo, hi) => write!(f, "{lo}-{hi}"),
        }
    }
}

/// Paired training patches. `noisy == clean + noise` elementwise, exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub noise: Tensor<f32>,
    pub sigma: f64,
    pub patches: Vec<(usize, PatchSpec)>,
}

/// Draws `batch` independent patches (image chosen uniformly among those
/// large enough), each with fresh noise.
pub fn make_batch<R: Rng>(
    corpus: &[ImageBuffer],
    sigma: SigmaSpec,
    batch: usize,
    patch: usize,
    rng: &mut R,
) -> Result<PatchBatch> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    sigma.validate()?;
    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].height() >= patch && corpus[i].width() >= patch)
        .collect();
    if usable.is_empty() || patch == 0 {
        let img = &corpus[0];
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            needed: patch,
        });
    }
    let channels = corpus[usable[0]].channels();
    if let Some(&i) = usable.iter().find(|&&i| corpus[i].channels() != channels) {
        return Err(Error::ChannelMismatch {
            expected: channels,
            actual: corpus[i].channels(),
        });
    }

    let level = sigma.draw(rng);
    let per = channels * patch * patch;
    let mut clean = Vec::with_capacity(batch * per);
    let mut patches = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = usable[rng.random_range(0..usable.len())];
        let img = &corpus[idx];
        let spec = sample_patch_spec(img.height(), img.width(), patch, rng)?;
        clean.extend(spec.extract(img.data(), channels, img.height(), img.width()));
        patches.push((idx, spec));
    }
    let mut noise = vec![0.0f32; clean.len()];
    if level > 0.0 {
        gaussian_field(&mut noise, level, rng);
    }
    let noisy = clean.iter().zip(&noise).map(|(&c, &n)| c + n).collect();
    let shape = [batch, channels, patch, patch];
    Ok(PatchBatch {
        noisy: Tensor::new(&shape, noisy)?,
        clean: Tensor::new(&shape, clean)?,
        noise: Tensor::new(&shape, noise)?,
        sigma: level,
        patches,
    })
}

/// Every `.pgm` / `.ppm` file directly under `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_netpbm_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads a directory-as-dataset corpus.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, ImageBuffer)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| read_image(&p).map(|img| (p, img)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> ImageBuffer {
        let n = c * h * w;
        ImageBuffer::new(c, h, w, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = ramp(3, 4, 5);
        let noisy = add_awgn(
            &img,
            &NoiseSpec {
                sigma: 0.0,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(noisy.data, img.data());
    }

    #[test]
    fn noise_is_seeded() {
        let img = ramp(1, 16, 16);
        let a = add_awgn(
            &img,
            &NoiseSpec {
                sigma: 25.0,
                seed: 1,
            },
        )
        .unwrap();
        let b = add_awgn(
            &img,
            &NoiseSpec {
                sigma: 25.0,
                seed: 1,
            },
        )
        .unwrap();
        let c = add_awgn(
            &img,
            &NoiseSpec {
                sigma: 25.0,
                seed: 2,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(add_awgn(
            &img,
            &NoiseSpec {
                sigma: -1.0,
                seed: 1
            }
        )
        .is_err());
    }

    #[test]
    fn full_size_patch_has_single_corner() {
        let img = ramp(1, 80, 80);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (_, spec) = sample_patch(&img, 80, &mut rng).unwrap();
            assert_eq!((spec.top, spec.left), (0, 0));
        }
        assert!(matches!(
            sample_patch(&img, 81, &mut rng),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = ramp(3, 6, 6);
        let turn = PatchSpec {
            top: 0,
            left: 0,
            size: 6,
            augment: Augment {
                quarter_turns: 1,
                flip: false,
            },
        };
        let mut cur = img.clone();
        for i in 0..4 {
            if i > 0 {
                assert_ne!(cur, img);
            }
            cur = turn.apply(&cur);
        }
        assert_eq!(cur, img);
    }

    #[test]
    fn augmentations_are_eight_distinct_symmetries() {
        let img = ramp(1, 5, 5);
        let mut seen = Vec::new();
        for a in Augment::all() {
            let p = PatchSpec {
                top: 0,
                left: 0,
                size: 5,
                augment: a,
            }
            .apply(&img);
            let mut sorted = p.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            let mut orig = img.data().to_vec();
            orig.sort_by(f32::total_cmp);
            assert_eq!(sorted, orig, "a permutation");
            assert!(!seen.contains(&p));
            seen.push(p);
            assert_eq!(Augment::from_index(a.index()), a);
        }
    }

    #[test]
    fn batch_pairs_and_shapes() {
        let corpus = vec![ramp(1, 100, 90), ramp(1, 120, 120)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = make_batch(&corpus, SigmaSpec::Fixed(25.0), 32, 80, &mut rng).unwrap();
        assert_eq!(b.noisy.shape(), &[32, 1, 80, 80]);
        for ((&n, &c), &z) in b
            .noisy
            .data()
            .iter()
            .zip(b.clean.data())
            .zip(b.noise.data())
        {
            assert_eq!(n, c + z);
        }
        // Each clean patch equals the spec applied to its source image.
        for (k, (idx, spec)) in b.patches.iter().enumerate() {
            let expect = spec.apply(&corpus[*idx]);
            assert_eq!(&b.clean.data()[k * 6400..(k + 1) * 6400], expect.data());
        }
    }

    #[test]
    fn batch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            make_batch(&[], SigmaSpec::Fixed(25.0), 4, 8, &mut rng),
            Err(Error::EmptyCorpus)
        ));
        let small = vec![ramp(1, 10, 10)];
        assert!(matches!(
            make_batch(&small, SigmaSpec::Fixed(25.0), 4, 80, &mut rng),
            Err(Error::ImageTooSmall { .. })
        ));
        let one = vec![ramp(1, 10, 10)];
        let b = make_batch(&one, SigmaSpec::Fixed(0.0), 4, 8, &mut rng).unwrap();
        assert_eq!(b.noisy, b.clean);
    }

    #[test]
    fn sigma_range_draws_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = SigmaSpec::Range(5.0, 50.0).draw(&mut rng);
            assert!((5.0..=50.0).contains(&s));
        }
        assert!(SigmaSpec::Range(10.0, 5.0).validate().is_err());
    }
}
