use super::{complex_to_channels, channels_to_complex, Binder, ModelConfig, ModelKind, ModelParams, UnrolledConfig};
use crate::dc::{dc_step_graph, LambdaValue};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::transforms::{apply_mask, zero_filled, ComplexImage, KSpaceSlice, SamplingMask};

/// A model configuration together with parameters validated against it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        params.require(&config.param_shapes()?)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    /// All parameters zero, so every backbone outputs zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let params = config.zero_params()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Builds the forward pass on `graph`. `measured` is the two-channel
    /// acquired k-space and `lam` a one-element variable shared by the DC
    /// steps and the hypernetwork. Works in whatever intensity scale the
    /// measurement is given in.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        binder: &mut Binder<'_>,
        measured: &Tensor,
        mask: &SamplingMask,
        lam: Var,
    ) -> Result<Var> {
        let (_, h, w) = measured.dims3();
        if mask.width() != w {
            return Err(Error::ShapeMismatch {
                expected: vec![2, h, mask.width()],
                actual: measured.shape().to_vec(),
            });
        }
        let lam_value = graph.value(lam).item();
        LambdaValue::new(lam_value)?;

        let mut masked = measured.clone();
        for ch in 0..2 {
            for r in 0..h {
                for c in 0..w {
                    if !mask.is_sampled(c) {
                        masked.data_mut()[(ch * h + r) * w + c] = 0.0;
                    }
                }
            }
        }
        let y = graph.constant(masked.clone());
        let x0 = graph.ifft2c(y);
        let backbone = &self.config.unrolled.backbone;

        match self.config.kind {
            ModelKind::Enhancement => {
                let f = backbone.forward(graph, binder, &self.config.backbone_prefix(0), x0, None)?;
                Ok(graph.sub(x0, f))
            }
            ModelKind::Unrolled => {
                let hypernet = self.config.hypernet()?;
                let mut x = x0;
                for t in 0..self.config.unrolled.cascades {
                    let cond = hypernet
                        .as_ref()
                        .map(|net| net.forward_graph(graph, binder, lam, t));
                    let f = backbone.forward(graph, binder, &self.config.backbone_prefix(t), x, cond)?;
                    let x_half = graph.sub(x, f);
                    x = dc_step_graph(graph, x_half, &masked, mask, lam);
                }
                Ok(x)
            }
        }
    }

    /// Reconstruction in the measurement's own scale, without intensity
    /// normalization.
    pub fn forward_raw(&self, y: &KSpaceSlice, lam: LambdaValue) -> Result<ComplexImage> {
        let measured = kspace_channels(y)?;
        let mut graph = Graph::inference();
        let mut binder = Binder::new(&self.params);
        let lam = graph.constant(Tensor::scalar(lam.get()));
        let out = self.forward_graph(&mut graph, &mut binder, &measured, &y.mask, lam)?;
        channels_to_complex(graph.value(out))
    }

    /// Reconstructs with the measurement divided by [`input_scale`] and the
    /// result scaled back; DC is scale-equivariant so this only conditions
    /// the network input range.
    pub fn reconstruct(&self, y: &KSpaceSlice, lam: LambdaValue) -> Result<ComplexImage> {
        let scale = input_scale(y)?;
        let scaled = scale_kspace(y, 1.0 / scale)?;
        let out = self.forward_raw(&scaled, lam)?;
        Ok(ComplexImage::from_array_unchecked(out.into_array().mapv(|v| v * scale)))
    }
}

/// Peak magnitude of the zero-filled image (1 when that is zero).
pub fn input_scale(y: &KSpaceSlice) -> Result<f64> {
    let peak = zero_filled(y)?.magnitude().iter().cloned().fold(0.0, f64::max);
    Ok(if peak > 0.0 { peak } else { 1.0 })
}

pub(crate) fn scale_kspace(y: &KSpaceSlice, factor: f64) -> Result<KSpaceSlice> {
    let data = y.kspace.as_array().mapv(|v| v * factor);
    apply_mask(&crate::transforms::KSpace::new(data)?, &y.mask)
}

pub(crate) fn kspace_channels(y: &KSpaceSlice) -> Result<Tensor> {
    let as_image = ComplexImage::new(y.kspace.as_array().clone())?;
    Ok(complex_to_channels(&as_image))
}

/// `x⁰ = F⁻¹(M·y)`; for each cascade `x^{t+½} = x^t − f_t(x^t)` followed by
/// data consistency with weight λ. Returns `x^T`.
pub fn unrolled_forward(
    y: &KSpaceSlice,
    lam: LambdaValue,
    cfg: &UnrolledConfig,
    params: &ModelParams,
) -> Result<ComplexImage> {
    let config = ModelConfig {
        name: "unrolled".into(),
        kind: ModelKind::Unrolled,
        unrolled: cfg.clone(),
    };
    Model::new(config, params.clone())?.forward_raw(y, lam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dc::dc_step;
    use crate::models::BackboneConfig;
    use crate::transforms::{fft2c, make_cartesian_mask, max_abs_diff, KSpace};
    use ndarray::Array2;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn measurement(n: usize, seed: u64) -> KSpaceSlice {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array2::from_shape_fn((n, n), |_| Complex64::new(rng.random_range(0.0..1.0), rng.random_range(-0.1..0.1)));
        let k = fft2c(&ComplexImage::new(img).unwrap()).unwrap();
        apply_mask(&k, &make_cartesian_mask(n, n, 4.0, 0.125, seed).unwrap()).unwrap()
    }

    fn lam(v: f64) -> LambdaValue {
        LambdaValue::new(v).unwrap()
    }

    #[test]
    fn zero_backbone_with_hard_dc_is_zero_filled() {
        let y = measurement(16, 1);
        let zf = zero_filled(&y).unwrap();
        for t in [1, 3] {
            let model = Model::zeros(ModelConfig::cond(t, 4)).unwrap();
            let out = model.forward_raw(&y, lam(0.0)).unwrap();
            assert!(max_abs_diff(out.as_array(), zf.as_array()) < 1e-12);
        }
    }

    #[test]
    fn zero_cascades_return_initialization() {
        let mut cfg = ModelConfig::didn(0, 4);
        cfg.unrolled.cascades = 0;
        let model = Model::init(cfg, 3).unwrap();
        let y = measurement(16, 2);
        let out = model.forward_raw(&y, lam(0.7)).unwrap();
        assert!(max_abs_diff(out.as_array(), zero_filled(&y).unwrap().as_array()) < 1e-12);
    }

    #[test]
    fn residual_form_is_repeated_dc() {
        let y = measurement(16, 3);
        let model = Model::zeros(ModelConfig::didn(3, 4)).unwrap();
        let out = model.forward_raw(&y, lam(0.4)).unwrap();
        let mut x = zero_filled(&y).unwrap();
        for _ in 0..3 {
            x = dc_step(&x, &y.kspace, &y.mask, lam(0.4)).unwrap();
        }
        assert!(max_abs_diff(out.as_array(), x.as_array()) < 1e-12);
    }

    #[test]
    fn hard_dc_matches_measurement_on_acquired_lines() {
        let y = measurement(16, 4);
        let model = Model::init(ModelConfig::cond(2, 4), 9).unwrap();
        let out = model.forward_raw(&y, lam(0.0)).unwrap();
        let k = fft2c(&out).unwrap();
        for ((r, c), v) in k.as_array().indexed_iter() {
            if y.mask.is_sampled(c) {
                assert!((v - y.kspace.as_array()[[r, c]]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        for n in [16, 20] {
            let y = measurement(n, 5);
            for cfg in [ModelConfig::cond(2, 4), {
                let mut u = ModelConfig::unet_baseline();
                u.unrolled.backbone = BackboneConfig::unet(4, 2);
                u
            }] {
                let model = Model::init(cfg, 1).unwrap();
                let a = model.reconstruct(&y, lam(0.5)).unwrap();
                let b = model.reconstruct(&y, lam(0.5)).unwrap();
                assert_eq!(a.shape(), (n, n));
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn reconstruct_scale_equivariance_for_zero_model() {
        let y = measurement(16, 6);
        let model = Model::zeros(ModelConfig::didn(2, 4)).unwrap();
        let a = model.reconstruct(&y, lam(0.2)).unwrap();
        let b = model.forward_raw(&y, lam(0.2)).unwrap();
        assert!(max_abs_diff(a.as_array(), b.as_array()) < 1e-12);
    }

    #[test]
    fn mismatched_params_rejected() {
        let params = ModelConfig::didn(2, 4).zero_params().unwrap();
        let err = Model::new(ModelConfig::cond(2, 4), params).unwrap_err();
        match err {
            Error::CheckpointMismatch { keys } => assert!(keys.iter().any(|k| k.contains("hyper"))),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_bad_lambda_and_small_images() {
        let model = Model::zeros(ModelConfig::cond(1, 4)).unwrap();
        let y = measurement(16, 7);
        let mut g = Graph::inference();
        let mut binder = Binder::new(model.params());
        let l = g.constant(Tensor::scalar(1.5));
        let measured = kspace_channels(&y).unwrap();
        assert!(model.forward_graph(&mut g, &mut binder, &measured, &y.mask, l).is_err());

        let tiny = KSpaceSlice::new(KSpace::zeros(2, 2), SamplingMask::full(2)).unwrap();
        assert!(model.forward_raw(&tiny, lam(0.1)).is_err());
    }
}
