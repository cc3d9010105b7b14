//! Robustness grid over models, inference λ and measurement noise.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{derive_seed, DatasetRecord};
use crate::dc::LambdaValue;
use crate::error::{Error, Result};
use crate::metrics::{capped_psnr, image_metrics};
use crate::models::{load_checkpoint, Checkpoint, Model, ModelConfig};
use crate::transforms::{add_noise, zero_filled, ComplexImage, KSpaceSlice, NoiseSpec};

/// The benchmark grid.
pub const BENCHMARK_LAMBDAS: [f64; 3] = [0.1, 0.5, 0.9];
pub const BENCHMARK_SIGMAS: [f64; 3] = [1e-5, 5e-5, 1e-4];

/// Something that maps a measurement to an image.
#[derive(Clone, Debug)]
pub enum Reconstructor {
    Model(Box<Model>),
    /// `F⁻¹(M·y)`, ignoring λ.
    ZeroFilled,
}

impl Reconstructor {
    pub fn reconstruct(&self, y: &KSpaceSlice, lam: LambdaValue) -> Result<ComplexImage> {
        match self {
            Reconstructor::Model(m) => m.reconstruct(y, lam),
            Reconstructor::ZeroFilled => zero_filled(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedReconstructor {
    pub name: String,
    pub recon: Reconstructor,
}

impl NamedReconstructor {
    pub fn model(name: impl Into<String>, model: Model) -> Self {
        Self {
            name: name.into(),
            recon: Reconstructor::Model(Box::new(model)),
        }
    }

    pub fn zero_filled() -> Self {
        Self {
            name: "zero_filled".into(),
            recon: Reconstructor::ZeroFilled,
        }
    }
}

/// Loads a checkpoint and, when `expected` is given, checks that the
/// checkpoint was produced for that configuration.
pub fn load_for_eval(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if let Some(cfg) = expected {
        check_config(&ckpt, cfg)?;
    }
    Ok(ckpt)
}

/// Lists the config fields and parameter tensors that differ between a
/// checkpoint and `expected`.
pub fn check_config(ckpt: &Checkpoint, expected: &ModelConfig) -> Result<()> {
    let mut keys = Vec::new();
    let have = serde_json::to_value(ckpt.model.config())?;
    let want = serde_json::to_value(expected)?;
    diff_json("config", &have, &want, &mut keys);
    if let Err(Error::CheckpointMismatch { keys: params }) = ckpt.model.params().require(&expected.param_shapes()?) {
        keys.extend(params);
    }
    if keys.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch { keys })
    }
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut names: Vec<&String> = x.keys().chain(y.keys()).collect();
            names.sort();
            names.dedup();
            for k in names {
                let (va, vb) = (x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null));
                diff_json(&format!("{path}.{k}"), va, vb, out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

/// Noise seed for one slice at one level, shared by every model.
pub fn noise_seed(slice_id: &str, sigma: f64, seed: u64) -> u64 {
    derive_seed("noise", &[&seed.to_string(), slice_id, &sigma.to_bits().to_string()])
}

/// Measured k-space of `record` corrupted at level `sigma`.
pub fn corrupted_measurement(record: &DatasetRecord, sigma: f64, seed: u64) -> Result<KSpaceSlice> {
    add_noise(&record.measured()?, NoiseSpec::new(sigma, noise_seed(&record.id, sigma, seed))?)
}

fn digest_kspace(h: &mut Sha256, y: &KSpaceSlice) {
    for v in y.kspace.as_array().iter() {
        h.update(v.re.to_le_bytes());
        h.update(v.im.to_le_bytes());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_name: String,
    pub lambda: f64,
    pub sigma: f64,
    /// Mean over slices of PSNR capped at 100 dB.
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_slices: usize,
    /// SHA-256 prefix of the corrupted inputs of this cell.
    pub input_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn get(&self, model: &str, lambda: f64, sigma: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model_name == model && r.lambda == lambda && r.sigma == sigma)
    }

    /// CSV without timings, so equal inputs give equal bytes.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model_name", "lambda", "sigma", "psnr_db", "ssim", "n_slices", "input_hash"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.model_name.clone(),
                r.lambda.to_string(),
                r.sigma.to_string(),
                format!("{:.6}", r.psnr_db),
                format!("{:.6}", r.ssim),
                r.n_slices.to_string(),
                r.input_hash.clone(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// PSNR against σ, one panel per model and one line per λ.
    pub fn to_svg(&self) -> String {
        let mut models: Vec<&str> = Vec::new();
        let mut lambdas: Vec<f64> = Vec::new();
        let mut sigmas: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model_name.as_str()) {
                models.push(&r.model_name);
            }
            if !lambdas.contains(&r.lambda) {
                lambdas.push(r.lambda);
            }
            if !sigmas.contains(&r.sigma) {
                sigmas.push(r.sigma);
            }
        }
        sigmas.sort_by(f64::total_cmp);
        let finite: Vec<f64> = self.rows.iter().map(|r| r.psnr_db).filter(|v| v.is_finite()).collect();
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
        let (pw, ph, margin) = (320.0, 240.0, 50.0);
        let width = models.len().max(1) as f64 * (pw + margin) + margin;
        let height = ph + 2.0 * margin + 20.0 * lambdas.len() as f64;
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        for (mi, model) in models.iter().enumerate() {
            let x0 = margin + mi as f64 * (pw + margin);
            let y0 = margin;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{model}</text>"#, x0 + pw / 2.0, y0 - 15.0);
            let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
            let px = |i: usize| x0 + pw * (i as f64 + 0.5) / sigmas.len() as f64;
            let py = |v: f64| y0 + ph * (1.0 - (v - lo) / (hi - lo).max(1e-9));
            for (i, sg) in sigmas.iter().enumerate() {
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">σ={sg:e}</text>"#, px(i), y0 + ph + 15.0);
            }
            for v in [lo, hi] {
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.0} dB</text>"#, x0 - 4.0, py(v) + 4.0);
            }
            for (li, lam) in lambdas.iter().enumerate() {
                let color = colors[li % colors.len()];
                let pts: Vec<String> = sigmas
                    .iter()
                    .enumerate()
                    .filter_map(|(i, sg)| {
                        self.get(model, *lam, *sg)
                            .filter(|r| r.psnr_db.is_finite())
                            .map(|r| format!("{:.1},{:.1}", px(i), py(r.psnr_db)))
                    })
                    .collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
                if mi == 0 {
                    let ly = y0 + ph + 35.0 + 20.0 * li as f64;
                    let _ = writeln!(s, r#"<line x1="{x0}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x0 + 20.0);
                    let _ = writeln!(s, r#"<text x="{}" y="{}">λ={lam}</text>"#, x0 + 25.0, ly + 4.0);
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

/// Evaluates every (model, λ, σ) cell on `records`, averaging per-slice
/// PSNR and SSIM. Noise depends only on (slice id, σ, seed).
pub fn evaluate_grid(
    models: &[NamedReconstructor],
    lambda_grid: &[f64],
    sigma_grid: &[f64],
    records: &[&DatasetRecord],
    seed: u64,
) -> Result<MetricReport> {
    if models.is_empty() || lambda_grid.is_empty() || sigma_grid.is_empty() {
        return Err(Error::invalid("grid", "models, lambdas and sigmas must be nonempty"));
    }
    if records.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let lambdas = lambda_grid.iter().map(|&l| LambdaValue::new(l)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(models.len() * lambdas.len() * sigma_grid.len());
    for &sigma in sigma_grid {
        NoiseSpec::new(sigma, 0)?;
        let inputs = records
            .iter()
            .map(|r| corrupted_measurement(r, sigma, seed))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        inputs.iter().for_each(|y| digest_kspace(&mut h, y));
        let input_hash = hex::encode(&h.finalize()[..8]);
        for m in models {
            for &lam in &lambdas {
                let start = Instant::now();
                let (mut p, mut s) = (0.0, 0.0);
                for (rec, y) in records.iter().zip(&inputs) {
                    let (pi, si) = image_metrics(&m.recon.reconstruct(y, lam)?, &rec.image_gt)?;
                    p += capped_psnr(pi);
                    s += si;
                }
                let n = records.len() as f64;
                rows.push(ReportRow {
                    model_name: m.name.clone(),
                    lambda: lam.get(),
                    sigma,
                    psnr_db: p / n,
                    ssim: s / n,
                    n_slices: records.len(),
                    input_hash: input_hash.clone(),
                    runtime_s: Some(start.elapsed().as_secs_f64()),
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        let order = |name: &str| models.iter().position(|m| m.name == name);
        order(&a.model_name)
            .cmp(&order(&b.model_name))
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.sigma.total_cmp(&b.sigma))
    });
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, Dataset, Split, SplitFractions, SyntheticSpec};
    use crate::metrics::psnr;
    use crate::models::{save_checkpoint, CheckpointMeta};

    fn dataset() -> Dataset {
        make_dataset(&SyntheticSpec {
            n: 4,
            size: 32,
            seed: 9,
            split_fractions: SplitFractions { train: 0.0, val: 0.0, test: 1.0 },
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn models() -> Vec<NamedReconstructor> {
        vec![
            NamedReconstructor::zero_filled(),
            NamedReconstructor::model("cond", Model::init(ModelConfig::cond(1, 4), 2).unwrap()),
        ]
    }

    #[test]
    fn zero_filled_matches_direct_psnr() {
        let ds = dataset();
        let test = ds.split(Split::Test);
        let report = evaluate_grid(&[NamedReconstructor::zero_filled()], &[0.7], &[0.0], &test, 1).unwrap();
        let direct: f64 = test
            .iter()
            .map(|r| {
                let zf = zero_filled(&r.measured().unwrap()).unwrap();
                psnr(&zf.magnitude(), &r.image_gt.magnitude(), None).unwrap()
            })
            .sum::<f64>()
            / test.len() as f64;
        assert!((report.rows[0].psnr_db - direct).abs() < 1e-9);
    }

    #[test]
    fn grid_is_complete_and_deterministic() {
        let ds = dataset();
        let test = ds.split(Split::Test);
        let a = evaluate_grid(&models(), &BENCHMARK_LAMBDAS, &BENCHMARK_SIGMAS, &test, 3).unwrap();
        let b = evaluate_grid(&models(), &BENCHMARK_LAMBDAS, &BENCHMARK_SIGMAS, &test, 3).unwrap();
        assert_eq!(a.rows.len(), 2 * 3 * 3);
        assert!(a.rows.iter().all(|r| r.psnr_db.is_finite() && r.ssim.is_finite()));
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert!(!a.to_csv().unwrap().contains("runtime"));
        assert!(a.to_json().unwrap().contains("runtime_s"));
        let svg = a.to_svg();
        assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 6);
    }

    #[test]
    fn every_model_sees_identical_inputs() {
        let ds = dataset();
        let test = ds.split(Split::Test);
        let r = evaluate_grid(&models(), &[0.1, 0.5], &[0.0, 1e-4], &test, 3).unwrap();
        for sigma in [0.0, 1e-4] {
            let hashes: std::collections::HashSet<_> =
                r.rows.iter().filter(|row| row.sigma == sigma).map(|row| row.input_hash.clone()).collect();
            assert_eq!(hashes.len(), 1);
        }
        assert_ne!(r.get("cond", 0.1, 0.0).unwrap().input_hash, r.get("cond", 0.1, 1e-4).unwrap().input_hash);
    }

    #[test]
    fn noise_seed_depends_on_slice_and_sigma() {
        assert_ne!(noise_seed("s0", 1e-5, 0), noise_seed("s1", 1e-5, 0));
        assert_ne!(noise_seed("s0", 1e-5, 0), noise_seed("s0", 1e-4, 0));
        assert_eq!(noise_seed("s0", 1e-5, 0), noise_seed("s0", 1e-5, 0));
    }

    #[test]
    fn bad_grids_rejected() {
        let ds = dataset();
        let test = ds.split(Split::Test);
        assert!(evaluate_grid(&models(), &[], &[0.0], &test, 0).is_err());
        assert!(evaluate_grid(&models(), &[1.5], &[0.0], &test, 0).is_err());
        assert!(evaluate_grid(&models(), &[0.5], &[-1.0], &test, 0).is_err());
        assert!(evaluate_grid(&models(), &[0.5], &[0.0], &[], 0).is_err());
    }

    #[test]
    fn config_mismatch_lists_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::init(ModelConfig::cond(2, 4), 0).unwrap();
        save_checkpoint(&path, &model, &CheckpointMeta::default()).unwrap();
        assert!(load_for_eval(&path, Some(&ModelConfig::cond(2, 4))).is_ok());
        match load_for_eval(&path, Some(&ModelConfig::cond(3, 4))) {
            Err(Error::CheckpointMismatch { keys }) => {
                assert!(keys.contains(&"config.cascades".to_string()));
                assert!(keys.iter().any(|k| k.starts_with("cascade.2")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
