//! Loss, learning-rate schedule, Adam and the training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetRecord, Split};
use crate::dc::LambdaValue;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{self, image_metrics};
use crate::models::{complex_to_channels, input_scale, save_checkpoint, Binder, CheckpointMeta, Model, ModelConfig};
use crate::scheduler::{sample_lambda, SchedulerConfig};
use crate::tensor::Tensor;
use crate::transforms::{add_noise, zero_filled, ComplexImage, KSpaceSlice, NoiseSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, ssim: 1.0 }
    }
}

/// Input-noise augmentation applied to the measured k-space during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentNoise {
    #[default]
    Off,
    Uniform { sigma_lo: f64, sigma_hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub augment_noise: AugmentNoise,
    pub scheduler: SchedulerConfig,
    /// λ used for validation and best-checkpoint selection.
    pub validation_lambda: f64,
    pub seed: u64,
    /// Seed of the initial weights.
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_gamma: 0.5,
            lr_step_epochs: 15,
            epochs: 100,
            batch_size: 1,
            loss_weights: LossWeights::default(),
            augment_noise: AugmentNoise::Off,
            scheduler: SchedulerConfig::default(),
            validation_lambda: 0.1,
            seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::invalid("lr_gamma", "must lie in (0, 1]"));
        }
        if self.lr_step_epochs == 0 {
            return Err(Error::invalid("lr_step_epochs", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        let w = self.loss_weights;
        if !(w.l1 >= 0.0 && w.ssim >= 0.0) || w.l1 + w.ssim == 0.0 {
            return Err(Error::invalid("loss_weights", "must be nonnegative and not both zero"));
        }
        if let AugmentNoise::Uniform { sigma_lo, sigma_hi } = self.augment_noise {
            if !(sigma_lo >= 0.0 && sigma_hi >= sigma_lo && sigma_hi.is_finite()) {
                return Err(Error::invalid("augment_noise", "need 0 <= sigma_lo <= sigma_hi"));
            }
        }
        LambdaValue::new(self.validation_lambda)?;
        self.scheduler.validate()
    }
}

/// `lr · gamma^⌊epoch / step⌋`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_gamma.powi((epoch / cfg.lr_step_epochs) as i32)
}

fn data_range(gt_mag: &ndarray::Array2<f64>) -> f64 {
    let peak = gt_mag.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        peak
    } else {
        1.0
    }
}

/// `w_l1·mean|‖x̂‖ − ‖x‖| + w_ssim·(1 − SSIM(‖x̂‖, ‖x‖))` on magnitudes, with
/// the SSIM data range taken from the groundtruth.
pub fn recon_loss(x_hat: &ComplexImage, x_gt: &ComplexImage, weights: LossWeights) -> Result<f64> {
    if x_hat.shape() != x_gt.shape() {
        let (a, b) = (x_hat.shape(), x_gt.shape());
        return Err(Error::ShapeMismatch {
            expected: vec![b.0, b.1],
            actual: vec![a.0, a.1],
        });
    }
    let (m, r) = (x_hat.magnitude(), x_gt.magnitude());
    let l1 = (&m - &r).mapv(f64::abs).mean().unwrap_or(0.0);
    let mut loss = weights.l1 * l1;
    if weights.ssim != 0.0 {
        loss += weights.ssim * (1.0 - metrics::ssim(&m, &r, Some(data_range(&r)))?);
    }
    Ok(loss)
}

/// Graph form of [`recon_loss`] for a two-channel prediction.
pub fn recon_loss_graph(graph: &mut Graph, x_hat: Var, x_gt: &ComplexImage, weights: LossWeights) -> Var {
    let r = x_gt.magnitude();
    let range = data_range(&r);
    let (h, w) = r.dim();
    let target = Tensor::new(vec![h, w], r.into_iter().collect());
    let m = graph.magnitude(x_hat);
    let l1 = graph.l1_mean(m, &target);
    let mut loss = graph.scale(l1, weights.l1);
    if weights.ssim != 0.0 {
        let s = graph.ssim(m, &target, range);
        let dissim = graph.affine(s, -weights.ssim, weights.ssim);
        loss = graph.add(loss, dissim);
    }
    loss
}

/// Loss and parameter gradients for one measurement in its own intensity
/// scale. Also returns the derivative with respect to λ.
pub fn loss_and_grads(
    model: &Model,
    y: &KSpaceSlice,
    x_gt: &ComplexImage,
    lam: LambdaValue,
    weights: LossWeights,
) -> Result<(f64, BTreeMap<String, Tensor>, f64)> {
    let measured = complex_to_channels(&ComplexImage::new(y.kspace.as_array().clone())?);
    let mut graph = Graph::new();
    let mut binder = Binder::new(model.params());
    let lam_var = graph.param(Tensor::scalar(lam.get()));
    let out = model.forward_graph(&mut graph, &mut binder, &measured, &y.mask, lam_var)?;
    let loss = recon_loss_graph(&mut graph, out, x_gt, weights);
    let value = graph.value(loss).item();
    let mut grads = graph.backward(loss);
    let dlam = grads.get(lam_var).map(Tensor::item).unwrap_or(0.0);
    Ok((value, binder.take_grads(&mut grads), dlam))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = model.params_mut().get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m.data()[i] / c1) / ((v.data()[i] / c2).sqrt() + self.eps);
                p.data_mut()[i] -= update;
            }
        }
    }
}

/// Measurement and groundtruth divided by the measurement's input scale.
pub(crate) fn normalized_pair(y: &KSpaceSlice, gt: &ComplexImage) -> Result<(KSpaceSlice, ComplexImage)> {
    let s = input_scale(y)?;
    let y = KSpaceSlice::new(
        crate::transforms::KSpace::new(y.kspace.as_array().mapv(|v| v / s))?,
        y.mask.clone(),
    )?;
    Ok((y, ComplexImage::new(gt.as_array().mapv(|v| v / s))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        lambda: f64,
        sigma: f64,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        step: u64,
        lr: f64,
        mean_loss: f64,
        val_psnr: f64,
        val_ssim: f64,
        val_zero_filled_psnr: f64,
        checkpoint: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochSummary>,
    pub val_zero_filled_psnr: f64,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Mean PSNR and SSIM of `model` on `records` at noise-free input.
pub fn validate_model(model: &Model, records: &[&DatasetRecord], lam: LambdaValue) -> Result<(f64, f64)> {
    mean_metrics(records, |r| model.reconstruct(&r.measured()?, lam))
}

fn mean_metrics(records: &[&DatasetRecord], recon: impl Fn(&DatasetRecord) -> Result<ComplexImage>) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut sum = (0.0, 0.0);
    for r in records {
        let (p, s) = image_metrics(&recon(r)?, &r.image_gt)?;
        sum.0 += metrics::capped_psnr(p);
        sum.1 += s;
    }
    let n = records.len() as f64;
    Ok((sum.0 / n, sum.1 / n))
}

#[derive(Serialize)]
struct Snapshot<'a> {
    epoch: usize,
    step: u64,
    lambda: f64,
    lr: f64,
    sigma: f64,
    record_ids: Vec<&'a str>,
    params_finite: bool,
}

/// Trains `model_cfg` on the train split, validating on the val split after
/// every epoch. Writes a JSON-lines log, one checkpoint per epoch and the
/// best-validation checkpoint into `out_dir`.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let val_set = dataset.split(Split::Val);
    let val_lambda = LambdaValue::new(cfg.validation_lambda)?;
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let write_log = |rec: &LogRecord, log: &mut BufWriter<fs::File>| -> Result<()> {
        serde_json::to_writer(&mut *log, rec)?;
        log.write_all(b"\n")?;
        Ok(())
    };

    let mut model = Model::init(model_cfg.clone(), cfg.init_seed)?;
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zf_psnr = mean_metrics(&val_set, |r| zero_filled(&r.measured()?))?.0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step: u64 = 0;
    let mut summaries = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let best_path = out_dir.join(BEST_CHECKPOINT);

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let schedule = cfg.scheduler.at_epoch(epoch)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lam = sample_lambda(&schedule, &mut rng);
            assert!((0.0..=1.0).contains(&lam.get()), "scheduler produced λ outside [0, 1]");
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            let mut sigma_logged = 0.0;
            for &i in batch {
                let rec = train_set[i];
                let mut y = rec.measured()?;
                if let AugmentNoise::Uniform { sigma_lo, sigma_hi } = cfg.augment_noise {
                    let sigma = if sigma_hi > sigma_lo { rng.random_range(sigma_lo..=sigma_hi) } else { sigma_lo };
                    y = add_noise(&y, NoiseSpec::new(sigma, rng.random())?)?;
                    sigma_logged = sigma;
                }
                let (y_n, gt_n) = normalized_pair(&y, &rec.image_gt)?;
                let (loss, grads, _) = loss_and_grads(&model, &y_n, &gt_n, lam, cfg.loss_weights)?;
                if !loss.is_finite() {
                    let snapshot = out_dir.join("nonfinite_snapshot.json");
                    let snap = Snapshot {
                        epoch,
                        step,
                        lambda: lam.get(),
                        lr,
                        sigma: sigma_logged,
                        record_ids: batch.iter().map(|&j| train_set[j].id.as_str()).collect(),
                        params_finite: model.params().is_finite(),
                    };
                    fs::write(&snapshot, serde_json::to_vec_pretty(&snap)?)?;
                    log.flush()?;
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: step as usize,
                        lambda: lam.get(),
                        lr,
                        snapshot: Some(snapshot),
                    });
                }
                batch_loss += loss;
                for (name, g) in grads {
                    match total.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            total.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            total.values_mut().for_each(|g| g.scale_assign(scale));
            adam.step(&mut model, &total, lr);
            batch_loss *= scale;
            loss_sum += batch_loss * batch.len() as f64;
            write_log(
                &LogRecord::Step {
                    epoch,
                    step,
                    lambda: lam.get(),
                    sigma: sigma_logged,
                    lr,
                    loss: batch_loss,
                },
                &mut log,
            )?;
            step += 1;
        }

        let (val_psnr, val_ssim) = validate_model(&model, &val_set, val_lambda)?;
        let mean_loss = loss_sum / train_set.len() as f64;
        let meta = CheckpointMeta {
            epoch,
            step,
            seed: cfg.seed,
            val_psnr: Some(val_psnr).filter(|v| v.is_finite()),
            val_ssim: Some(val_ssim).filter(|v| v.is_finite()),
            train_loss: Some(mean_loss),
            lambda_strategy: Some(serde_json::to_value(cfg.scheduler.strategy)?.as_str().unwrap_or_default().to_string()),
        };
        let name = epoch_checkpoint_name(epoch);
        save_checkpoint(&out_dir.join(&name), &model, &meta)?;
        // Without a validation split the latest epoch counts as best.
        let score = if val_psnr.is_finite() { val_psnr } else { f64::INFINITY };
        if best.is_none_or(|(_, b)| score > b || !val_psnr.is_finite()) {
            best = Some((epoch, score));
            save_checkpoint(&best_path, &model, &meta)?;
        }
        write_log(
            &LogRecord::Epoch {
                epoch,
                step,
                lr,
                mean_loss,
                val_psnr,
                val_ssim,
                val_zero_filled_psnr: zf_psnr,
                checkpoint: name,
            },
            &mut log,
        )?;
        log.flush()?;
        log::info!("epoch {epoch}: loss {mean_loss:.5}, val PSNR {val_psnr:.2} dB (zero-filled {zf_psnr:.2} dB)");
        summaries.push(EpochSummary {
            epoch,
            mean_loss,
            val_psnr,
            val_ssim,
        });
    }

    Ok(TrainOutcome {
        model,
        epochs: summaries,
        val_zero_filled_psnr: zf_psnr,
        best_epoch: best.map(|(e, _)| e).unwrap_or(0),
        best_checkpoint: best_path,
        log_path,
    })
}
