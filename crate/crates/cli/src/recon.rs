//! One slice through a model, shared by `reconstruct` and the HTTP service.

use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

use condrecon::data::DatasetRecord;
use condrecon::eval::corrupted_measurement;
use condrecon::metrics::{capped_psnr, image_metrics};
use condrecon::transforms::zero_filled;
use condrecon::{LambdaValue, Model, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MapKind {
    Recon,
    ZeroFilled,
    Gt,
    ErrorMap,
}

impl MapKind {
    pub const ALL: [MapKind; 4] = [MapKind::Recon, MapKind::ZeroFilled, MapKind::Gt, MapKind::ErrorMap];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Recon => "recon",
            MapKind::ZeroFilled => "zero_filled",
            MapKind::Gt => "gt",
            MapKind::ErrorMap => "error_map",
        }
    }
}

impl FromStr for MapKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        MapKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown map {s:?}; expected one of recon, zero_filled, gt, error_map"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

/// Magnitude images of one reconstruction plus their metrics.
#[derive(Clone, Debug)]
pub struct SliceRecon {
    pub recon: Array2<f64>,
    pub zero_filled: Array2<f64>,
    pub gt: Array2<f64>,
    /// `|x̂ − x|`.
    pub error_map: Array2<f64>,
    /// Maximum groundtruth magnitude; every PNG uses the window `[0, data_range]`.
    pub data_range: f64,
    pub quality: Quality,
    pub zero_filled_quality: Quality,
    pub latency_ms: f64,
}

impl SliceRecon {
    pub fn map(&self, kind: MapKind) -> &Array2<f64> {
        match kind {
            MapKind::Recon => &self.recon,
            MapKind::ZeroFilled => &self.zero_filled,
            MapKind::Gt => &self.gt,
            MapKind::ErrorMap => &self.error_map,
        }
    }

    pub fn png(&self, kind: MapKind) -> Vec<u8> {
        crate::images::encode_png(self.map(kind), self.data_range)
    }
}

fn quality(x: &condrecon::ComplexImage, gt: &condrecon::ComplexImage) -> Result<Quality> {
    let (p, s) = image_metrics(x, gt)?;
    Ok(Quality { psnr: capped_psnr(p), ssim: s })
}

/// Corrupts `record` with noise seeded by (slice id, σ, seed) and reconstructs it.
pub fn reconstruct_slice(model: &Model, record: &DatasetRecord, lambda: f64, sigma: f64, seed: u64) -> Result<SliceRecon> {
    let lam = LambdaValue::new(lambda)?;
    let y = corrupted_measurement(record, sigma, seed)?;
    let start = Instant::now();
    let x = model.reconstruct(&y, lam)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let zf = zero_filled(&y)?;
    let gt = record.image_gt.magnitude();
    let error_map = (x.as_array() - record.image_gt.as_array()).mapv(|v| v.norm());
    Ok(SliceRecon {
        quality: quality(&x, &record.image_gt)?,
        zero_filled_quality: quality(&zf, &record.image_gt)?,
        recon: x.magnitude(),
        zero_filled: zf.magnitude(),
        data_range: gt.iter().cloned().fold(0.0, f64::max),
        gt,
        error_map,
        latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use condrecon::data::{make_dataset, SyntheticSpec};
    use condrecon::ModelConfig;

    #[test]
    fn zero_model_at_hard_dc_is_zero_filled() {
        let ds = make_dataset(&SyntheticSpec { n: 2, size: 32, ..SyntheticSpec::default() }).unwrap();
        let model = Model::zeros(ModelConfig::cond(2, 4)).unwrap();
        let r = reconstruct_slice(&model, &ds.records()[0], 0.0, 1e-5, 3).unwrap();
        let gap = (&r.recon - &r.zero_filled).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gap < 1e-12 * r.data_range, "{gap}");
        assert!((r.quality.psnr - r.zero_filled_quality.psnr).abs() < 1e-9);
        assert!((r.quality.ssim - r.zero_filled_quality.ssim).abs() < 1e-12);
        assert_eq!(r.png(MapKind::Recon), r.png(MapKind::ZeroFilled));
    }

    #[test]
    fn map_names_round_trip() {
        for k in MapKind::ALL {
            assert_eq!(k.name().parse::<MapKind>().unwrap(), k);
        }
        assert!("phase".parse::<MapKind>().is_err());
    }
}
