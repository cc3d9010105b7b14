use super::{Graph, Grads, Var};
use crate::tensor::Tensor;

/// `C = A·B + beta·C` for row-major operands; `ta`/`tb` read the operand
/// transposed. `A` is `m×k` after the optional transpose, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C = A·B + beta·C` without transposes, `C` rows `ldc` apart.
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert!(n <= ldc && (m == 0 || c.len() >= (m - 1) * ldc + n));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Column-matrix budget per tile when no backward pass needs the full one.
const TILE_ELEMS: usize = 1 << 17;

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = Vec::with_capacity(self.cin * self.k * self.k * self.ho * self.wo);
        self.im2col_rows(x, 0, self.ho, &mut cols);
        cols
    }

    /// Appends the column matrix of output rows `oy0..oy1` to `cols`,
    /// writing every element once.
    fn im2col_rows(&self, x: &[f64], oy0: usize, oy1: usize, cols: &mut Vec<f64>) {
        let &ConvGeometry { cin, h, w, k, pad, wo, .. } = self;
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let lo = pad.saturating_sub(kx).min(wo);
                    let hi = (w + pad - kx).min(wo).max(lo);
                    for oy in oy0..oy1 {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            cols.resize(cols.len() + wo, 0.0);
                            continue;
                        }
                        let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        cols.resize(cols.len() + lo, 0.0);
                        cols.extend_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
                        cols.resize(cols.len() + wo - hi, 0.0);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let &ConvGeometry { cin, h, w, k, pad, ho, wo } = self;
        let mut x = vec![0.0; cin * h * w];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(wo);
                        for ox in lo..hi {
                            x[base + ox + kx - pad] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
        x
    }
}

impl Graph {
    /// Stride-1 2-D convolution (cross-correlation) of a `[Cin, H, W]` map
    /// with `w: [Cout, Cin, K, K]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let (cout, k) = match self.shape(w) {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
            s => panic!("conv weight {s:?} incompatible with {cin} input channels"),
        };
        let ho = h + 2 * pad + 1 - k;
        let wo = wd + 2 * pad + 1 - k;
        let geom = ConvGeometry { cin, h, w: wd, k, pad, ho, wo };
        let ckk = cin * k * k;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        if !self.needs_grad(&inputs) {
            let out = self.conv2d_tiled(&geom, x, w, bias, cout);
            return self.push_op(Tensor::new(vec![cout, ho, wo], out), &inputs, || unreachable!("no gradient needed"));
        }
        let cols = if k == 1 && pad == 0 {
            self.value(x).data().to_vec()
        } else {
            geom.im2col(self.value(x).data())
        };
        let wv = self.value(w).data().to_vec();
        let mut out = vec![0.0; cout * ho * wo];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv bias length");
            for (co, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bv[co]);
            }
        }
        gemm(cout, ckk, ho * wo, &wv, false, &cols, false, 1.0, &mut out);
        let value = Tensor::new(vec![cout, ho, wo], out);
        self.push_op(value, &inputs, || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let gd = g.data();
                if grads.wants(w) {
                    let mut gw = vec![0.0; cout * ckk];
                    gemm(cout, ho * wo, ckk, gd, false, &cols, true, 0.0, &mut gw);
                    grads.accumulate(w, Tensor::new(vec![cout, cin, k, k], gw));
                }
                if let Some(b) = bias {
                    let gb = gd.chunks(ho * wo).map(|c| c.iter().sum()).collect();
                    grads.accumulate(b, Tensor::new(vec![cout], gb));
                }
                if grads.wants(x) {
                    let mut gcols = vec![0.0; ckk * ho * wo];
                    gemm(ckk, cout, ho * wo, &wv, true, gd, false, 0.0, &mut gcols);
                    let gx = if k == 1 && pad == 0 { gcols } else { geom.col2im(&gcols) };
                    grads.accumulate(x, Tensor::new(vec![cin, geom.h, geom.w], gx));
                }
            })
        })
    }

    /// Forward-only convolution over bands of output rows, so the column
    /// matrix stays cache-sized instead of `Cin·K²` times the input.
    fn conv2d_tiled(&self, geom: &ConvGeometry, x: Var, w: Var, bias: Option<Var>, cout: usize) -> Vec<f64> {
        let (ho, wo) = (geom.ho, geom.wo);
        let ckk = geom.cin * geom.k * geom.k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; cout * ho * wo];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv bias length");
            for (co, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bv[co]);
            }
        }
        let band = (TILE_ELEMS / (ckk * wo).max(1)).clamp(1, ho.max(1));
        let mut cols = Vec::with_capacity(ckk * band * wo);
        for oy0 in (0..ho).step_by(band) {
            let oy1 = (oy0 + band).min(ho);
            cols.clear();
            geom.im2col_rows(xv, oy0, oy1, &mut cols);
            let n = (oy1 - oy0) * wo;
            gemm_strided(cout, ckk, n, wv, &cols, 1.0, &mut out[oy0 * wo..], ho * wo);
        }
        out
    }

    /// 2×2, stride-2 transposed convolution: `[Cin, H, W] → [Cout, 2H, 2W]`
    /// with `w: [Cin, Cout, 2, 2]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let cout = match self.shape(w) {
            [ci, co, 2, 2] if *ci == cin => *co,
            s => panic!("transpose weight {s:?} incompatible with {cin} input channels"),
        };
        let hw = h * wd;
        let xv = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        // patches[co*4 + a*2 + b, i*W + j] = Σ_ci w[ci, co, a, b] x[ci, i, j]
        let mut patches = vec![0.0; cout * 4 * hw];
        gemm(cout * 4, cin, hw, &wv, true, &xv, false, 0.0, &mut patches);
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            let b = bias.map(|b| self.value(b).data()[co]).unwrap_or(0.0);
            for a in 0..2 {
                for bb in 0..2 {
                    let p = &patches[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        for j in 0..wd {
                            out[(co * ho + 2 * i + a) * wo + 2 * j + bb] = p[i * wd + j] + b;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out);

        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push_op(value, &inputs, || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let gd = g.data();
                let mut gp = vec![0.0; cout * 4 * hw];
                for co in 0..cout {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let dst = &mut gp[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                            for i in 0..h {
                                for j in 0..wd {
                                    dst[i * wd + j] = gd[(co * ho + 2 * i + a) * wo + 2 * j + bb];
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let gb = gd.chunks(ho * wo).map(|c| c.iter().sum()).collect();
                    grads.accumulate(b, Tensor::new(vec![cout], gb));
                }
                if grads.wants(w) {
                    let mut gw = vec![0.0; cin * cout * 4];
                    gemm(cin, hw, cout * 4, &xv, false, &gp, true, 0.0, &mut gw);
                    grads.accumulate(w, Tensor::new(vec![cin, cout, 2, 2], gw));
                }
                if grads.wants(x) {
                    let mut gx = vec![0.0; cin * hw];
                    gemm(cin, cout * 4, hw, &wv, false, &gp, false, 0.0, &mut gx);
                    grads.accumulate(x, Tensor::new(vec![cin, h, wd], gx));
                }
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check_gradients;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn direct_conv(x: &Tensor, w: &Tensor, b: &[f64], pad: usize) -> Tensor {
        let (cin, h, wd) = x.dims3();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = rand_tensor(&[3, 5, 7], 1);
        for (k, pad) in [(3, 1), (1, 0), (3, 0)] {
            let w = rand_tensor(&[4, 3, k, k], 2);
            let b = rand_tensor(&[4], 3);
            let mut g = Graph::inference();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), pad);
            let expected = direct_conv(&x, &w, b.data(), pad);
            assert_eq!(g.shape(y), expected.shape());
            for (a, e) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn banded_inference_matches_recorded_conv() {
        // 72·200 columns per output row, so the 40 rows split into uneven bands.
        let x = rand_tensor(&[8, 40, 200], 4);
        let w = rand_tensor(&[5, 8, 3, 3], 5);
        let b = rand_tensor(&[5], 6);
        assert!(TILE_ELEMS / (72 * 200) < 40);
        let mut inf = Graph::inference();
        let (xi, wi, bi) = (inf.constant(x.clone()), inf.constant(w.clone()), inf.constant(b.clone()));
        let yi = inf.conv2d(xi, wi, Some(bi), 1);
        let mut rec = Graph::new();
        let (xr, wr, br) = (rec.param(x.clone()), rec.param(w.clone()), rec.param(b.clone()));
        let yr = rec.conv2d(xr, wr, Some(br), 1);
        let expected = direct_conv(&x, &w, b.data(), 1);
        for ((a, r), e) in inf.value(yi).data().iter().zip(rec.value(yr).data()).zip(expected.data()) {
            assert!((a - e).abs() < 1e-10 && (r - e).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_matches_scatter_definition() {
        let x = rand_tensor(&[2, 3, 4], 4);
        let w = rand_tensor(&[2, 3, 2, 2], 5);
        let mut g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv_transpose2(xv, wv, None);
        let out = g.value(y);
        assert_eq!(out.shape(), &[3, 6, 8]);
        for co in 0..3 {
            for oy in 0..6 {
                for ox in 0..8 {
                    let (i, a, j, b) = (oy / 2, oy % 2, ox / 2, ox % 2);
                    let expected: f64 = (0..2)
                        .map(|ci| w.data()[((ci * 3 + co) * 2 + a) * 2 + b] * x.data()[(ci * 3 + i) * 4 + j])
                        .sum();
                    assert!((out.data()[(co * 6 + oy) * 8 + ox] - expected).abs() < 1e-12);
                }
            }
        }
    }

    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let n = g.value(v).len();
        let p = g.constant(rand_tensor(&[1, n], seed));
        let z = g.constant(Tensor::zeros(&[1]));
        let flat = g.reshape(v, vec![n]);
        g.linear(flat, p, z)
    }

    #[test]
    fn conv_gradients() {
        let x = rand_tensor(&[2, 4, 5], 6);
        let w = rand_tensor(&[3, 2, 3, 3], 7);
        let b = rand_tensor(&[3], 8);
        let err = check_gradients(&[x, w, b], 1e-5, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1);
            project(g, y, 9)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn transpose_gradients() {
        let x = rand_tensor(&[3, 2, 3], 10);
        let w = rand_tensor(&[3, 2, 2, 2], 11);
        let b = rand_tensor(&[2], 12);
        let err = check_gradients(&[x, w, b], 1e-5, |g, v| {
            let y = g.conv_transpose2(v[0], v[1], Some(v[2]));
            project(g, y, 13)
        });
        assert!(err < 1e-6, "{err}");
    }
}
