use num_complex::Complex64;

use super::{Graph, Grads, Var};
use crate::metrics;
use crate::tensor::Tensor;
use crate::transforms::{centered_fft2, SamplingMask};

fn to_complex(t: &Tensor) -> (Vec<Complex64>, usize, usize) {
    let (c, h, w) = t.dims3();
    assert_eq!(c, 2, "complex maps carry two channels, got {c}");
    let (re, im) = t.data().split_at(h * w);
    (re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect(), h, w)
}

fn from_complex(data: &[Complex64], h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; 2 * h * w];
    for (i, v) in data.iter().enumerate() {
        out[i] = v.re;
        out[h * w + i] = v.im;
    }
    Tensor::new(vec![2, h, w], out)
}

fn transform(t: &Tensor, inverse: bool) -> Tensor {
    let (mut data, h, w) = to_complex(t);
    centered_fft2(&mut data, h, w, inverse);
    from_complex(&data, h, w)
}

impl Graph {
    /// Centered orthonormal FFT of a two-channel (real, imaginary) map.
    /// The transform is unitary, so its adjoint is the inverse transform.
    pub fn fft2c(&mut self, x: Var) -> Var {
        let value = transform(self.value(x), false);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(x, transform(g, true));
            })
        })
    }

    pub fn ifft2c(&mut self, k: Var) -> Var {
        let value = transform(self.value(k), true);
        self.push_op(value, &[k], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(k, transform(g, false));
            })
        })
    }

    /// k-space blend `M^c·k + M·(λ·k + (1-λ)·y)` with measured `y` held constant
    /// and `lam` a one-element variable.
    pub fn dc_blend(&mut self, k: Var, measured: &Tensor, mask: &SamplingMask, lam: Var) -> Var {
        let kv = self.value(k).clone();
        let (c, h, w) = kv.dims3();
        assert_eq!(measured.shape(), kv.shape(), "measured k-space shape");
        assert_eq!(w, mask.width(), "mask width");
        let l = self.value(lam).item();
        let cols = mask.sampled_indices();
        let mut out = kv.clone();
        for ch in 0..c {
            for r in 0..h {
                for &col in &cols {
                    let i = (ch * h + r) * w + col;
                    out.data_mut()[i] = l * kv.data()[i] + (1.0 - l) * measured.data()[i];
                }
            }
        }
        let measured = measured.clone();
        self.push_op(out, &[k, lam], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let mut gk = g.clone();
                let mut gl = 0.0;
                for ch in 0..c {
                    for r in 0..h {
                        for &col in &cols {
                            let i = (ch * h + r) * w + col;
                            gk.data_mut()[i] *= l;
                            gl += g.data()[i] * (kv.data()[i] - measured.data()[i]);
                        }
                    }
                }
                grads.accumulate(k, gk);
                grads.accumulate(lam, Tensor::scalar(gl));
            })
        })
    }

    /// `|x|` of a two-channel complex map, giving `[H, W]`.
    pub fn magnitude(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(c, 2, "magnitude expects two channels");
        let n = h * w;
        let xv = self.value(x).data().to_vec();
        let mag: Vec<f64> = (0..n).map(|i| xv[i].hypot(xv[n + i])).collect();
        let value = Tensor::new(vec![h, w], mag.clone());
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let mut out = vec![0.0; 2 * n];
                for i in 0..n {
                    if mag[i] > 0.0 {
                        out[i] = g.data()[i] * xv[i] / mag[i];
                        out[n + i] = g.data()[i] * xv[n + i] / mag[i];
                    }
                }
                grads.accumulate(x, Tensor::new(vec![2, h, w], out));
            })
        })
    }

    /// Mean SSIM of an `[H, W]` map against a constant reference.
    pub fn ssim(&mut self, x: Var, reference: &Tensor, data_range: f64) -> Var {
        let xv = self.value(x);
        let (h, w) = match xv.shape() {
            [h, w] => (*h, *w),
            s => panic!("ssim expects [H, W], got {s:?}"),
        };
        assert_eq!(reference.shape(), xv.shape(), "ssim shape mismatch");
        let want_grad = self.is_recording() && self.requires_grad(x);
        let (value, grad) = metrics::ssim_with_grad(xv.data(), reference.data(), h, w, data_range, want_grad)
            .expect("image checked against the window size by the caller");
        self.push_op(Tensor::scalar(value), &[x], move || {
            let grad = grad.expect("gradient computed when recording");
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let s = g.item();
                grads.accumulate(x, Tensor::new(vec![h, w], grad.iter().map(|v| v * s).collect()));
            })
        })
    }
}
