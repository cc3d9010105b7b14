//! PSNR and SSIM on magnitude images.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::transforms::ComplexImage;

/// Infinite PSNRs are clamped to this value when averaged.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn resolve_range(reference: &Array2<f64>, data_range: Option<f64>) -> Result<f64> {
    let range = data_range.unwrap_or_else(|| reference.iter().cloned().fold(0.0, f64::max));
    if !range.is_finite() || range <= 0.0 {
        return Err(Error::invalid("data_range", format!("must be positive, got {range}")));
    }
    Ok(range)
}

fn check_shapes(x: &Array2<f64>, reference: &Array2<f64>) -> Result<()> {
    if x.dim() != reference.dim() {
        let (a, b) = (x.dim(), reference.dim());
        return Err(Error::ShapeMismatch {
            expected: vec![b.0, b.1],
            actual: vec![a.0, a.1],
        });
    }
    Ok(())
}

/// `20·log10(range) − 10·log10(MSE)`; identical inputs give `+∞`.
/// `data_range` defaults to the maximum of `reference`.
pub fn psnr(x: &Array2<f64>, reference: &Array2<f64>, data_range: Option<f64>) -> Result<f64> {
    check_shapes(x, reference)?;
    let range = resolve_range(reference, data_range)?;
    let mse = x
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * range.log10() - 10.0 * mse.log10())
}

pub fn capped_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable "valid" Gaussian filtering: `h×w → (h-10)×(w-10)`.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..SSIM_WINDOW).map(|k| taps[k] * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(r + k) * wo + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for r in 0..ho {
        for c in 0..wo {
            let v = map[r * wo + c];
            for k in 0..SSIM_WINDOW {
                rows[(r + k) * wo + c] += taps[k] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..wo {
            let v = rows[r * wo + c];
            for k in 0..SSIM_WINDOW {
                out[r * w + c + k] += taps[k] * v;
            }
        }
    }
    out
}

/// Mean SSIM of `x` against `y` and, optionally, its gradient with respect to `x`.
pub(crate) fn ssim_with_grad(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    data_range: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);

    let p = mu_x.len();
    let mut total = 0.0;
    let (mut g_mu, mut g_xx, mut g_xy) = if want_grad {
        (vec![0.0; p], vec![0.0; p], vec![0.0; p])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..p {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = var_x + var_y + c2;
        let d = b1 * b2;
        let s = a1 * a2 / d;
        total += s;
        if want_grad {
            let scale = 1.0 / p as f64;
            let dn_dmu = 2.0 * my * (a2 - a1);
            let dd_dmu = 2.0 * mx * (b2 - b1);
            g_mu[i] = scale * (dn_dmu - s * dd_dmu) / d;
            g_xy[i] = scale * 2.0 * a1 / d;
            g_xx[i] = -scale * s * b1 / d;
        }
    }
    let mean = total / p as f64;
    if !want_grad {
        return Ok((mean, None));
    }
    let a = filter_valid_adjoint(&g_mu, h, w, &taps);
    let b = filter_valid_adjoint(&g_xx, h, w, &taps);
    let c = filter_valid_adjoint(&g_xy, h, w, &taps);
    let grad = (0..h * w).map(|i| a[i] + 2.0 * x[i] * b[i] + y[i] * c[i]).collect();
    Ok((mean, Some(grad)))
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03).
/// `data_range` defaults to the maximum of `reference`.
pub fn ssim(x: &Array2<f64>, reference: &Array2<f64>, data_range: Option<f64>) -> Result<f64> {
    check_shapes(x, reference)?;
    let range = resolve_range(reference, data_range)?;
    let (h, w) = x.dim();
    let xs: Vec<f64> = x.iter().copied().collect();
    let ys: Vec<f64> = reference.iter().copied().collect();
    ssim_with_grad(&xs, &ys, h, w, range, false).map(|(v, _)| v)
}

/// PSNR and SSIM of complex images compared by magnitude, with the data
/// range taken from the reference magnitude.
pub fn image_metrics(x: &ComplexImage, reference: &ComplexImage) -> Result<(f64, f64)> {
    let xm = x.magnitude();
    let rm = reference.magnitude();
    Ok((psnr(&xm, &rm, None)?, ssim(&xm, &rm, None)?))
}
