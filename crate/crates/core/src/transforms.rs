//! Centered orthonormal Fourier operators, Cartesian line masks and k-space
//! noise injection. Together these make up the forward operator `E = M∘F`.

use std::cell::RefCell;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Complex image `x ∈ C^N` on an `H×W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage(Array2<Complex64>);

/// Complex k-space grid. Unacquired positions hold zeros once masked.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace(Array2<Complex64>);

macro_rules! grid_newtype {
    ($ty:ident, $what:literal) => {
        impl $ty {
            /// Wraps a grid, rejecting empty or non-finite input.
            pub fn new(data: Array2<Complex64>) -> Result<Self> {
                if data.is_empty() {
                    return Err(Error::invalid($what, "grid must be non-empty"));
                }
                if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                    return Err(Error::NonFinite($what));
                }
                Ok(Self(data))
            }

            pub fn zeros(height: usize, width: usize) -> Self {
                Self(Array2::zeros((height, width)))
            }

            #[allow(dead_code)]
            pub(crate) fn from_array_unchecked(data: Array2<Complex64>) -> Self {
                Self(data)
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.dim()
            }

            pub fn as_array(&self) -> &Array2<Complex64> {
                &self.0
            }

            pub fn into_array(self) -> Array2<Complex64> {
                self.0
            }

            pub fn magnitude(&self) -> Array2<f64> {
                self.0.mapv(|v| v.norm())
            }

            pub fn norm_sq(&self) -> f64 {
                self.0.iter().map(|v| v.norm_sqr()).sum()
            }
        }
    };
}

grid_newtype!(ComplexImage, "image");
grid_newtype!(KSpace, "k-space");

/// Binary Cartesian column mask, broadcast over rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    columns: Vec<bool>,
    accel: f64,
    center_frac: f64,
    seed: u64,
}

/// One-line JSON form of a mask: sampled column indices rather than a bitmap.
#[derive(Serialize, Deserialize)]
struct MaskRecord {
    width: usize,
    accel: f64,
    center_frac: f64,
    seed: u64,
    columns: Vec<usize>,
}

impl SamplingMask {
    /// Builds a mask from an explicit column pattern. Acceleration is derived
    /// from the sampled fraction; the center fraction is recorded as given.
    pub fn from_columns(columns: Vec<bool>, center_frac: f64, seed: u64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("mask", "width must be positive"));
        }
        let sampled = columns.iter().filter(|&&c| c).count();
        let accel = if sampled == 0 {
            f64::INFINITY
        } else {
            columns.len() as f64 / sampled as f64
        };
        Ok(Self {
            columns,
            accel,
            center_frac,
            seed,
        })
    }

    pub fn full(width: usize) -> Self {
        Self {
            columns: vec![true; width],
            accel: 1.0,
            center_frac: 0.0,
            seed: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    pub fn center_frac(&self) -> f64 {
        self.center_frac
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_sampled(&self, col: usize) -> bool {
        self.columns[col]
    }

    pub fn sampled_count(&self) -> usize {
        self.columns.iter().filter(|&&c| c).count()
    }

    pub fn sampled_indices(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    /// `M^c = 1 - M`.
    pub fn complement(&self) -> SamplingMask {
        SamplingMask {
            columns: self.columns.iter().map(|c| !c).collect(),
            ..self.clone()
        }
    }

    /// Mask expanded to a real-valued `H×W` grid of zeros and ones.
    pub fn to_grid(&self, height: usize) -> Array2<f64> {
        Array2::from_shape_fn((height, self.width()), |(_, c)| {
            if self.columns[c] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn to_json_line(&self) -> String {
        let record = MaskRecord {
            width: self.width(),
            accel: self.accel,
            center_frac: self.center_frac,
            seed: self.seed,
            columns: self.sampled_indices(),
        };
        serde_json::to_string(&record).expect("mask record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let record: MaskRecord = serde_json::from_str(line.trim())?;
        if record.width == 0 {
            return Err(Error::format("mask", "width must be positive"));
        }
        let mut columns = vec![false; record.width];
        for &c in &record.columns {
            if c >= record.width {
                return Err(Error::format(
                    "mask",
                    format!("column {c} outside width {}", record.width),
                ));
            }
            columns[c] = true;
        }
        Ok(Self {
            columns,
            accel: record.accel,
            center_frac: record.center_frac,
            seed: record.seed,
        })
    }
}

/// Additive complex Gaussian noise level and its RNG seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }
}

/// Acquired k-space (zero-filled to the full grid) together with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceSlice {
    pub kspace: KSpace,
    pub mask: SamplingMask,
}

impl KSpaceSlice {
    pub fn new(kspace: KSpace, mask: SamplingMask) -> Result<Self> {
        let (_, w) = kspace.shape();
        if w != mask.width() {
            return Err(Error::ShapeMismatch {
                expected: vec![mask.width()],
                actual: vec![w],
            });
        }
        Ok(Self { kspace, mask })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kspace.shape()
    }
}

fn shift_axis(src: &[Complex64], dst: &mut [Complex64], h: usize, w: usize, forward: bool) {
    // fftshift moves index i to (i + n/2) % n; ifftshift is its inverse.
    let (sh, sw) = if forward {
        (h / 2, w / 2)
    } else {
        (h - h / 2, w - w / 2)
    };
    for r in 0..h {
        let rr = (r + sh) % h;
        for c in 0..w {
            dst[rr * w + (c + sw) % w] = src[r * w + c];
        }
    }
}

/// In-place centered, orthonormal 2-D transform of a row-major `h×w` buffer.
pub(crate) fn centered_fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(data.len(), h * w);
    let mut tmp = vec![Complex64::default(); h * w];
    shift_axis(data, &mut tmp, h, w, false);

    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        row_fft.process(&mut tmp);
        let mut column = vec![Complex64::default(); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = tmp[r * w + c];
            }
            col_fft.process(&mut column);
            for r in 0..h {
                tmp[r * w + c] = column[r];
            }
        }
    });

    shift_axis(&tmp, data, h, w, true);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}

fn transform(data: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut buf: Vec<Complex64> = data.iter().copied().collect();
    centered_fft2(&mut buf, h, w, inverse);
    Array2::from_shape_vec((h, w), buf).expect("shape preserved")
}

/// Centered orthonormal 2-D Fourier transform (DC at the grid center).
pub fn fft2c(img: &ComplexImage) -> Result<KSpace> {
    if img.0.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("image"));
    }
    Ok(KSpace(transform(&img.0, false)))
}

/// Exact inverse of [`fft2c`].
pub fn ifft2c(ksp: &KSpace) -> Result<ComplexImage> {
    if ksp.0.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("k-space"));
    }
    Ok(ComplexImage(transform(&ksp.0, true)))
}

/// Random Cartesian column mask with a fully sampled center block.
///
/// Exactly `round(width / accel)` columns are sampled; the
/// `floor(center_frac * width)` centermost columns are always on and the rest
/// are drawn uniformly without replacement from the periphery.
pub fn make_cartesian_mask(
    height: usize,
    width: usize,
    accel: f64,
    center_frac: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask", "height and width must be positive"));
    }
    if !(center_frac > 0.0 && center_frac < 1.0) {
        return Err(Error::invalid("center_frac", format!("must lie in (0, 1), got {center_frac}")));
    }
    if !accel.is_finite() || accel < 1.0 {
        return Err(Error::invalid("accel", format!("must be >= 1, got {accel}")));
    }
    let num_low = (center_frac * width as f64).floor() as usize;
    let budget = (width as f64 / accel).floor() as usize;
    if budget < num_low {
        return Err(Error::InfeasibleMask {
            center: num_low,
            budget,
        });
    }
    let total = ((width as f64 / accel).round() as usize).min(width);

    let mut columns = vec![false; width];
    let start = (width - num_low).div_ceil(2);
    columns[start..start + num_low].iter_mut().for_each(|c| *c = true);

    let periphery: Vec<usize> = (0..width).filter(|&c| !columns[c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, periphery.len(), total - num_low) {
        columns[periphery[i]] = true;
    }

    Ok(SamplingMask {
        columns,
        accel,
        center_frac,
        seed,
    })
}

/// Multiplies k-space by the column mask; unsampled entries become exactly zero.
pub fn apply_mask(ksp: &KSpace, mask: &SamplingMask) -> Result<KSpaceSlice> {
    let (h, w) = ksp.shape();
    if w != mask.width() {
        return Err(Error::ShapeMismatch {
            expected: vec![h, mask.width()],
            actual: vec![h, w],
        });
    }
    let mut data = ksp.0.clone();
    for (c, mut col) in data.columns_mut().into_iter().enumerate() {
        if !mask.columns[c] {
            col.fill(Complex64::default());
        }
    }
    Ok(KSpaceSlice {
        kspace: KSpace(data),
        mask: mask.clone(),
    })
}

/// Adds i.i.d. `N(0, sigma²)` noise to the real and imaginary part of every
/// entry, then re-applies the mask so noise only lands on acquired lines.
pub fn add_noise(ksp: &KSpaceSlice, spec: NoiseSpec) -> Result<KSpaceSlice> {
    let spec = NoiseSpec::new(spec.sigma, spec.seed)?;
    if spec.sigma == 0.0 {
        return Ok(ksp.clone());
    }
    let normal = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = ksp.kspace.0.clone();
    for v in data.iter_mut() {
        let re = normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        *v += Complex64::new(re, im);
    }
    apply_mask(&KSpace(data), &ksp.mask)
}

/// Zero-filled reconstruction `F⁻¹(M·y)`.
pub fn zero_filled(ksp: &KSpaceSlice) -> Result<ComplexImage> {
    let masked = apply_mask(&ksp.kspace, &ksp.mask)?;
    ifft2c(&masked.kspace)
}

#[cfg(test)]
pub(crate) fn max_abs_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    let mut m = 0.0f64;
    ndarray::Zip::from(a).and(b).for_each(|x, y| m = m.max((x - y).norm()));
    m
}
