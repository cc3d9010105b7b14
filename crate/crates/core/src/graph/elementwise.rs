use super::{Graph, Grads, Var};
use crate::tensor::Tensor;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(value, &[a, b], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(a, g.clone());
                grads.accumulate(b, g.clone());
            })
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(value, &[a, b], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(a, g.clone());
                grads.accumulate(b, g.map(|v| -v));
            })
        })
    }

    /// `scale * x + offset` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + offset);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(x, g.map(|v| v * scale));
            })
        })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let input = self.value(x).clone();
        let value = input.map(|v| if v > 0.0 { v } else { slope * v });
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(x, g.zip_map(&input, |gv, v| if v > 0.0 { gv } else { slope * gv }));
            })
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let out = value.clone();
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(x, g.zip_map(&out, |gv, y| gv * (1.0 - y * y)));
            })
        })
    }

    /// Concatenates two `[C, H, W]` maps along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).dims3();
        let (cb, hb, wb) = self.value(b).dims3();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, h, w], data);
        let split = ca * h * w;
        self.push_op(value, &[a, b], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let (ga, gb) = g.data().split_at(split);
                grads.accumulate(a, Tensor::new(vec![ca, h, w], ga.to_vec()));
                grads.accumulate(b, Tensor::new(vec![cb, h, w], gb.to_vec()));
            })
        })
    }

    /// Zero-pads a `[C, H, W]` map on the bottom and right edges.
    pub fn pad_to(&mut self, x: Var, height: usize, width: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(height >= h && width >= w);
        if (h, w) == (height, width) {
            return x;
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; c * height * width];
        for ch in 0..c {
            for r in 0..h {
                let s = (ch * h + r) * w;
                let d = (ch * height + r) * width;
                data[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        let value = Tensor::new(vec![c, height, width], data);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        let s = (ch * height + r) * width;
                        let d = (ch * h + r) * w;
                        out[d..d + w].copy_from_slice(&g.data()[s..s + w]);
                    }
                }
                grads.accumulate(x, Tensor::new(vec![c, h, w], out));
            })
        })
    }

    /// Keeps the top-left `height × width` window of a `[C, H, W]` map.
    pub fn crop(&mut self, x: Var, height: usize, width: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(height <= h && width <= w);
        if (h, w) == (height, width) {
            return x;
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; c * height * width];
        for ch in 0..c {
            for r in 0..height {
                let s = (ch * h + r) * w;
                let d = (ch * height + r) * width;
                data[d..d + width].copy_from_slice(&src[s..s + width]);
            }
        }
        let value = Tensor::new(vec![c, height, width], data);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..height {
                        let s = (ch * height + r) * width;
                        let d = (ch * h + r) * w;
                        out[d..d + width].copy_from_slice(&g.data()[s..s + width]);
                    }
                }
                grads.accumulate(x, Tensor::new(vec![c, h, w], out));
            })
        })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let original = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                grads.accumulate(x, g.clone().reshape(original.clone()));
            })
        })
    }

    /// Contiguous sub-range of a flat vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let total = self.value(x).len();
        assert!(start + len <= total);
        let value = Tensor::new(vec![len], self.value(x).data()[start..start + len].to_vec());
        let shape = self.shape(x).to_vec();
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let mut out = Tensor::zeros(&shape);
                out.data_mut()[start..start + len].copy_from_slice(g.data());
                grads.accumulate(x, out);
            })
        })
    }

    /// Dense layer `w · x + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (out_dim, in_dim) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => panic!("linear weight must be rank 2, got {s:?}"),
        };
        assert_eq!(self.value(x).len(), in_dim, "linear input width");
        assert_eq!(self.value(b).len(), out_dim, "linear bias width");
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut data = self.value(b).data().to_vec();
        for (o, d) in data.iter_mut().enumerate() {
            let row = &wv.data()[o * in_dim..(o + 1) * in_dim];
            *d += row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        let value = Tensor::new(vec![out_dim], data);
        self.push_op(value, &[x, w, b], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                if grads.wants(x) {
                    let mut gx = vec![0.0; in_dim];
                    for o in 0..out_dim {
                        let go = g.data()[o];
                        for (i, gxi) in gx.iter_mut().enumerate() {
                            *gxi += wv.data()[o * in_dim + i] * go;
                        }
                    }
                    grads.accumulate(x, Tensor::new(vec![in_dim], gx));
                }
                if grads.wants(w) {
                    let mut gw = vec![0.0; out_dim * in_dim];
                    for o in 0..out_dim {
                        for i in 0..in_dim {
                            gw[o * in_dim + i] = g.data()[o] * xv.data()[i];
                        }
                    }
                    grads.accumulate(w, Tensor::new(vec![out_dim, in_dim], gw));
                }
                grads.accumulate(b, g.clone());
            })
        })
    }

    /// Per-channel standardization `(x - μ_c) / (σ_c + eps)` using the
    /// population statistics of this instance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let n = h * w;
        let src = self.value(x).data();
        let mut data = vec![0.0; c * n];
        let mut stds = vec![0.0; c];
        let mut centered = vec![0.0; c * n];
        for ch in 0..c {
            let xs = &src[ch * n..(ch + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            stds[ch] = std;
            let denom = std + eps;
            for (i, v) in xs.iter().enumerate() {
                centered[ch * n + i] = v - mean;
                data[ch * n + i] = (v - mean) / denom;
            }
        }
        let value = Tensor::new(vec![c, h, w], data);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let mut out = vec![0.0; c * n];
                for ch in 0..c {
                    let gs = &g.data()[ch * n..(ch + 1) * n];
                    let xc = &centered[ch * n..(ch + 1) * n];
                    let std = stds[ch];
                    let denom = std + eps;
                    let g_mean = gs.iter().sum::<f64>() / n as f64;
                    let g_dot = gs.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    let coupling = if std > 0.0 {
                        g_dot / (n as f64 * std * denom * denom)
                    } else {
                        0.0
                    };
                    for i in 0..n {
                        out[ch * n + i] = (gs[i] - g_mean) / denom - xc[i] * coupling;
                    }
                }
                grads.accumulate(x, Tensor::new(vec![c, h, w], out));
            })
        })
    }

    /// `gamma_c * x + beta_c` per channel of a `[C, H, W]` map.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.value(gamma).len(), c, "gamma length");
        assert_eq!(self.value(beta).len(), c, "beta length");
        let n = h * w;
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).data().to_vec();
        let mut data = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                data[ch * n + i] = gv.data()[ch] * xv.data()[ch * n + i] + bv[ch];
            }
        }
        let value = Tensor::new(vec![c, h, w], data);
        self.push_op(value, &[x, gamma, beta], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                if grads.wants(x) {
                    let mut gx = g.clone();
                    for ch in 0..c {
                        let s = gv.data()[ch];
                        gx.data_mut()[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v *= s);
                    }
                    grads.accumulate(x, gx);
                }
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let gs = &g.data()[ch * n..(ch + 1) * n];
                    let xs = &xv.data()[ch * n..(ch + 1) * n];
                    gg[ch] = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    gb[ch] = gs.iter().sum();
                }
                grads.accumulate(gamma, Tensor::new(vec![c], gg));
                grads.accumulate(beta, Tensor::new(vec![c], gb));
            })
        })
    }

    /// 2×2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut data = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    let base = ch * h * w;
                    let s = src[base + 2 * r * w + 2 * col]
                        + src[base + 2 * r * w + 2 * col + 1]
                        + src[base + (2 * r + 1) * w + 2 * col]
                        + src[base + (2 * r + 1) * w + 2 * col + 1];
                    data[(ch * ho + r) * wo + col] = 0.25 * s;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], data);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            out[(ch * h + r) * w + col] = 0.25 * g.data()[(ch * ho + r / 2) * wo + col / 2];
                        }
                    }
                }
                grads.accumulate(x, Tensor::new(vec![c, h, w], out));
            })
        })
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_mean(&mut self, x: Var, target: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "l1 shape mismatch");
        let n = xv.len() as f64;
        let signs = xv.zip_map(target, |a, b| {
            if a > b {
                1.0 / n
            } else if a < b {
                -1.0 / n
            } else {
                0.0
            }
        });
        let value = Tensor::scalar(xv.zip_map(target, |a, b| (a - b).abs()).sum() / n);
        self.push_op(value, &[x], || {
            Box::new(move |g: &Tensor, grads: &mut Grads| {
                let s = g.item();
                grads.accumulate(x, signs.map(|v| v * s));
            })
        })
    }
}
