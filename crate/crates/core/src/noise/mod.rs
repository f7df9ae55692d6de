//! Grayscale images, ground-truth preparation and noise simulation.

mod io;
mod phantom;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use io::{load_image, save_image, BitDepth};
pub use phantom::{make_phantom, PhantomKind, MIN_PHANTOM_SIZE};

/// Smallest width or height accepted when loading an image from disk.
pub const MIN_IMAGE_SIZE: usize = 8;

/// Single-channel image with row-major intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawImage")]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl TryFrom<RawImage> for Image {
    type Error = Error;

    fn try_from(raw: RawImage) -> Result<Self> {
        Image::new(raw.width, raw.height, raw.data)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} needs {} values, got {}", width * height, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// As a `[1, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v)).collect();
        Tensor::new([1, self.height, self.width], data).expect("length matches")
    }

    /// From a `[1, H, W]` or `[H, W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => {
                return Err(Error::shape(
                    "image",
                    format!("expected [1, H, W] tensor, got {s:?}"),
                ))
            }
        };
        Self::new(w, h, t.data().iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    PoissonApprox,
}

/// Parameters of a simulated corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation of Gaussian noise in intensity units.
    pub sigma: f64,
    /// Photon count at intensity 1.0 for the Poisson approximation.
    pub peak: f64,
    pub seed: u64,
    pub clip: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma: 0.1,
            peak: 100.0,
            seed: 0,
            clip: true,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(Error::Config(format!(
                "noise peak must be > 0, got {}",
                self.peak
            )));
        }
        Ok(())
    }
}

fn finish(mut img: Image, clip: bool) -> Image {
    if clip {
        img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    img
}

/// `x + N(0, sigma^2)` per pixel.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    img: &Image,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<Image> {
    spec.validate()?;
    if spec.kind != NoiseKind::Gaussian {
        return Err(Error::InvalidArgument(
            "add_gaussian_noise needs a gaussian noise spec".into(),
        ));
    }
    let mut out = img.clone();
    if spec.sigma > 0.0 {
        for v in &mut out.data {
            let z: f64 = StandardNormal.sample(rng);
            *v += spec.sigma * z;
        }
    }
    Ok(finish(out, spec.clip))
}

/// `x + sqrt(x / peak) * N(0, 1)` per pixel, the normal limit of
/// `Poisson(peak * x) / peak`.
pub fn add_poisson_approx_noise<R: Rng + ?Sized>(
    img: &Image,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<Image> {
    spec.validate()?;
    if spec.kind != NoiseKind::PoissonApprox {
        return Err(Error::InvalidArgument(
            "add_poisson_approx_noise needs a poisson_approx noise spec".into(),
        ));
    }
    let mut out = img.clone();
    for v in &mut out.data {
        let z: f64 = StandardNormal.sample(rng);
        *v += (v.max(0.0) / spec.peak).sqrt() * z;
    }
    Ok(finish(out, spec.clip))
}

/// Applies whichever corruption `spec` describes.
pub fn add_noise<R: Rng + ?Sized>(img: &Image, spec: &NoiseSpec, rng: &mut R) -> Result<Image> {
    match spec.kind {
        NoiseKind::Gaussian => add_gaussian_noise(img, spec, rng),
        NoiseKind::PoissonApprox => add_poisson_approx_noise(img, spec, rng),
    }
}

/// Applies `spec` with a generator seeded from `spec.seed`.
pub fn corrupt(img: &Image, spec: &NoiseSpec) -> Result<Image> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    add_noise(img, spec, &mut rng)
}

/// Halves both dimensions by averaging each 2x2 block.
pub fn downsample2x(img: &Image) -> Result<Image> {
    let odd: Vec<String> = [("width", img.width), ("height", img.height)]
        .iter()
        .filter(|(_, n)| n % 2 != 0)
        .map(|(name, n)| format!("{name} {n}"))
        .collect();
    if !odd.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "downsampling needs even dimensions, but {} is odd",
            odd.join(" and ")
        )));
    }
    let (w, h) = (img.width / 2, img.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let s = img.get(2 * r, 2 * c)
                + img.get(2 * r, 2 * c + 1)
                + img.get(2 * r + 1, 2 * c)
                + img.get(2 * r + 1, 2 * c + 1);
            data.push((s / 4.0).clamp(0.0, 1.0));
        }
    }
    Image::new(w, h, data)
}
