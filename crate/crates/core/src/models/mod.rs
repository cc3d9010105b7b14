//! Reconstruction backbones and the unrolled cascade built from them.

mod checkpoint;
mod didn;
mod params;
mod unet;
mod unrolled;

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{HypernetConfig, Hypernet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::transforms::ComplexImage;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use params::{Binder, ModelParams};
pub use unrolled::{input_scale, unrolled_forward, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Unet,
    DidnLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub init_channels: usize,
    pub num_pools: usize,
    /// Apply AdaIN at the bottleneck with hypernetwork-supplied (γ, β).
    #[serde(default)]
    pub conditioned: bool,
}

impl BackboneConfig {
    pub fn unet(init_channels: usize, num_pools: usize) -> Self {
        Self {
            kind: BackboneKind::Unet,
            init_channels,
            num_pools,
            conditioned: false,
        }
    }

    pub fn didn_lite(init_channels: usize, num_pools: usize) -> Self {
        Self {
            kind: BackboneKind::DidnLite,
            init_channels,
            num_pools,
            conditioned: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_channels == 0 {
            return Err(Error::invalid("backbone.init_channels", "must be positive"));
        }
        if self.num_pools == 0 || self.num_pools > 8 {
            return Err(Error::invalid("backbone.num_pools", "must lie in 1..=8"));
        }
        Ok(())
    }

    /// Channel count at the conditioned (bottleneck) site.
    pub fn bottleneck_channels(&self) -> usize {
        self.init_channels << self.num_pools
    }

    /// Spatial sizes are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.num_pools
    }

    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        match self.kind {
            BackboneKind::Unet => unet::param_shapes(self, prefix),
            BackboneKind::DidnLite => didn::param_shapes(self, prefix),
        }
    }

    /// `[2, H, W] → [2, H, W]`. Inputs are zero-padded to a multiple of
    /// `2^num_pools` and the output cropped back.
    pub fn forward(
        &self,
        graph: &mut Graph,
        binder: &mut Binder<'_>,
        prefix: &str,
        x: Var,
        cond: Option<(Var, Var)>,
    ) -> Result<Var> {
        let (c, h, w) = graph.value(x).dims3();
        if c != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![2, h, w],
                actual: vec![c, h, w],
            });
        }
        if self.conditioned != cond.is_some() {
            return Err(Error::invalid(
                "conditioning",
                "conditioning params must be supplied exactly when the backbone is conditioned",
            ));
        }
        let m = self.size_multiple();
        if h < m || w < m {
            return Err(Error::invalid(
                "image",
                format!("{h}x{w} is too small for {} pooling levels", self.num_pools),
            ));
        }
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = graph.pad_to(x, hp, wp);
        let out = match self.kind {
            BackboneKind::Unet => unet::forward(self, graph, binder, prefix, padded, cond),
            BackboneKind::DidnLite => didn::forward(self, graph, binder, prefix, padded, cond),
        };
        Ok(graph.crop(out, h, w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Single backbone pass on the zero-filled image, no data consistency.
    Enhancement,
    /// `T` cascades of residual backbone update followed by data consistency.
    Unrolled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrolledConfig {
    /// Number of unroll iterations `T`.
    pub cascades: usize,
    pub share_weights: bool,
    pub backbone: BackboneConfig,
    /// λ-conditioning hypernetwork; `None` disables conditioning.
    #[serde(default)]
    pub conditioning: Option<HypernetConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub kind: ModelKind,
    #[serde(flatten)]
    pub unrolled: UnrolledConfig,
}

impl ModelConfig {
    /// Image-enhancement U-Net baseline: 32 initial channels, 4 pools.
    pub fn unet_baseline() -> Self {
        Self {
            name: "unet".into(),
            kind: ModelKind::Enhancement,
            unrolled: UnrolledConfig {
                cascades: 1,
                share_weights: false,
                backbone: BackboneConfig::unet(32, 4),
                conditioning: None,
            },
        }
    }

    /// Unrolled down-up network without conditioning.
    pub fn didn(cascades: usize, init_channels: usize) -> Self {
        Self {
            name: "didn".into(),
            kind: ModelKind::Unrolled,
            unrolled: UnrolledConfig {
                cascades,
                share_weights: false,
                backbone: BackboneConfig::didn_lite(init_channels, 2),
                conditioning: None,
            },
        }
    }

    /// Unrolled down-up network with a λ-hypernetwork per cascade.
    pub fn cond(cascades: usize, init_channels: usize) -> Self {
        let mut backbone = BackboneConfig::didn_lite(init_channels, 2);
        backbone.conditioned = true;
        Self {
            name: "cond".into(),
            kind: ModelKind::Unrolled,
            unrolled: UnrolledConfig {
                cascades,
                share_weights: false,
                backbone,
                conditioning: Some(HypernetConfig::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let u = &self.unrolled;
        u.backbone.validate()?;
        if self.kind == ModelKind::Enhancement && u.conditioning.is_some() {
            return Err(Error::invalid("conditioning", "enhancement models have no λ to condition on"));
        }
        if u.backbone.conditioned != u.conditioning.is_some() {
            return Err(Error::invalid(
                "conditioning",
                "backbone.conditioned must match the presence of a hypernet section",
            ));
        }
        if let Some(h) = &u.conditioning {
            h.validate()?;
        }
        Ok(())
    }

    pub fn is_conditioned(&self) -> bool {
        self.unrolled.conditioning.is_some()
    }

    /// Whether the inference λ influences the output at all.
    pub fn uses_lambda(&self) -> bool {
        self.kind == ModelKind::Unrolled
    }

    /// Number of distinct backbone parameter sets.
    pub fn backbone_sets(&self) -> usize {
        match self.kind {
            ModelKind::Enhancement => 1,
            ModelKind::Unrolled if self.unrolled.share_weights => 1,
            ModelKind::Unrolled => self.unrolled.cascades,
        }
    }

    pub(crate) fn backbone_prefix(&self, cascade: usize) -> String {
        let idx = if self.backbone_sets() == 1 { 0 } else { cascade };
        format!("cascade.{idx}")
    }

    pub(crate) fn hypernet(&self) -> Result<Option<Hypernet>> {
        self.unrolled
            .conditioning
            .as_ref()
            .map(|h| {
                Hypernet::new(
                    h.clone(),
                    self.unrolled.cascades,
                    self.unrolled.backbone.bottleneck_channels(),
                )
            })
            .transpose()
    }

    /// Every tensor the model owns, sorted by name.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut shapes = Vec::new();
        for set in 0..self.backbone_sets() {
            shapes.extend(self.unrolled.backbone.param_shapes(&format!("cascade.{set}")));
        }
        if let Some(h) = self.hypernet()? {
            shapes.extend(h.param_shapes());
        }
        shapes.sort();
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Fresh parameters: Kaiming-uniform convolutions, small output layers.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::default();
        for set in 0..self.backbone_sets() {
            for (name, shape) in self.unrolled.backbone.param_shapes(&format!("cascade.{set}")) {
                params.insert(name.clone(), params::init_conv_tensor(&name, &shape, &mut rng));
            }
        }
        if let Some(h) = self.hypernet()? {
            h.init(&mut rng, &mut params);
        }
        Ok(params)
    }

    pub fn zero_params(&self) -> Result<ModelParams> {
        let mut params = ModelParams::default();
        for (name, shape) in self.param_shapes()? {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(params)
    }
}

/// Complex image → `[2, H, W]` (real channel, imaginary channel).
pub fn complex_to_channels(x: &ComplexImage) -> Tensor {
    let (h, w) = x.shape();
    let mut data = vec![0.0; 2 * h * w];
    for (i, v) in x.as_array().iter().enumerate() {
        data[i] = v.re;
        data[h * w + i] = v.im;
    }
    Tensor::new(vec![2, h, w], data)
}

/// Inverse of [`complex_to_channels`].
pub fn channels_to_complex(t: &Tensor) -> Result<ComplexImage> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::ShapeMismatch {
                expected: vec![2, 0, 0],
                actual: s.to_vec(),
            })
        }
    };
    if c != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![2, h, w],
            actual: vec![c, h, w],
        });
    }
    let (re, im) = t.data().split_at(h * w);
    let data = Array2::from_shape_fn((h, w), |(r, col)| Complex64::new(re[r * w + col], im[r * w + col]));
    ComplexImage::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn channels_of_constant() {
        let x = ComplexImage::new(Array2::from_elem((3, 4), Complex64::new(3.0, 4.0))).unwrap();
        let t = complex_to_channels(&x);
        assert!(t.data()[..12].iter().all(|&v| v == 3.0));
        assert!(t.data()[12..].iter().all(|&v| v == 4.0));
        let back = channels_to_complex(&t).unwrap();
        assert!(back.magnitude().iter().all(|&m| m == 5.0));
    }

    proptest! {
        #[test]
        fn channels_round_trip(values in proptest::collection::vec(-1e3f64..1e3, 2 * 6 * 5)) {
            let t = Tensor::new(vec![2, 6, 5], values);
            let x = channels_to_complex(&t).unwrap();
            prop_assert_eq!(complex_to_channels(&x), t);
        }
    }

    /// Counting oracle for the U-Net layout: two bias-free 3×3 convs per
    /// block, bias-free 2×2 transposed convs, 1×1 output conv with bias.
    fn unet_count(c: usize, pools: usize) -> usize {
        let block = |i: usize, o: usize| 9 * (i * o + o * o);
        let mut total = 0;
        let mut ch = c;
        total += block(2, c);
        for _ in 1..pools {
            total += block(ch, ch * 2);
            ch *= 2;
        }
        total += block(ch, ch * 2);
        let mut up = ch * 2;
        for _ in 0..pools {
            total += 4 * up * (up / 2);
            total += block(up, up / 2);
            up /= 2;
        }
        total + up * 2 + 2
    }

    #[test]
    fn unet_parameter_counts() {
        assert_eq!(unet_count(8, 2), 29_218);
        let desk = ModelConfig {
            unrolled: UnrolledConfig {
                backbone: BackboneConfig::unet(8, 2),
                ..ModelConfig::unet_baseline().unrolled
            },
            ..ModelConfig::unet_baseline()
        };
        assert_eq!(desk.param_count().unwrap(), 29_218);

        let paper = ModelConfig::unet_baseline().param_count().unwrap();
        assert_eq!(paper, unet_count(32, 4));
        let rel = (paper as f64 - 7.8e6).abs() / 7.8e6;
        assert!(rel < 0.05, "{paper} parameters");
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::cond(2, 8);
        cfg.validate().unwrap();
        cfg.unrolled.backbone.conditioned = false;
        assert!(cfg.validate().is_err());
        let mut unet = ModelConfig::unet_baseline();
        unet.unrolled.backbone.init_channels = 0;
        assert!(unet.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ModelConfig::cond(5, 16);
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn shared_weights_use_one_backbone_set() {
        let mut cfg = ModelConfig::didn(3, 4);
        let separate = cfg.param_count().unwrap();
        cfg.unrolled.share_weights = true;
        assert_eq!(cfg.param_count().unwrap() * 3, separate);
    }
}
