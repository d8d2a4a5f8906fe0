//! Deterministic training loop with per-epoch validation and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, CaseBuilder, EvalRow, EvalTable};
use crate::nn::net::CaNet;
use crate::objectives::total_loss_grad;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive_seed, rng_from, stream};

/// Steps averaged at each end of the history when comparing first and last loss.
pub const LOSS_WINDOW: usize = 16;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step {
        step: u64,
        epoch: u64,
        snr_db: f64,
        loss_total: f64,
        loss_mse: f64,
        loss_fft: f64,
        loss_beta: f64,
        grad_norm: f64,
        elapsed_s: f64,
    },
    Epoch {
        step: u64,
        epoch: u64,
        train_loss_mean: f64,
        val: Vec<EvalRow>,
        val_mean_nmse: f64,
        elapsed_s: f64,
    },
}

impl MetricsRecord {
    /// Copy with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_wall_clock(&self) -> Self {
        let mut r = self.clone();
        match &mut r {
            MetricsRecord::Step { elapsed_s, .. } | MetricsRecord::Epoch { elapsed_s, .. } => *elapsed_s = 0.0,
        }
        r
    }

    pub fn step_loss(&self) -> Option<f64> {
        match self {
            MetricsRecord::Step { loss_total, .. } => Some(*loss_total),
            _ => None,
        }
    }
}

/// Mean training loss over the first and last [`LOSS_WINDOW`] steps.
pub fn loss_trend(history: &[MetricsRecord]) -> Option<(f64, f64)> {
    let losses: Vec<f64> = history.iter().filter_map(MetricsRecord::step_loss).collect();
    if losses.is_empty() {
        return None;
    }
    let w = LOSS_WINDOW.min(losses.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: CaNet<f32>,
    pub history: Vec<MetricsRecord>,
    pub steps: u64,
    /// How many inputs went through amplitude perturbation.
    pub perturb_calls: u64,
    pub best_val_nmse: Option<f64>,
    pub run_dir: Option<PathBuf>,
}

/// Run directory name for a config: the leading hash digits.
pub fn run_dir_name(cfg: &RunConfig) -> String {
    cfg.hash()[..12].to_string()
}

pub fn init_model(cfg: &RunConfig) -> Result<CaNet<f32>> {
    CaNet::new(cfg.arch(), derive_seed(cfg.seed, &[stream::INIT]))
}

struct Artifacts {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Artifacts {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
        let mpath = dir.join(METRICS_FILE);
        let file = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(file),
        })
    }

    fn log(&mut self, rec: &MetricsRecord) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        serde_json::to_writer(&mut self.metrics, rec).map_err(|e| Error::Data(format!("metrics: {e}")))?;
        self.metrics
            .write_all(b"\n")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, name: &str, net: &CaNet<f32>, meta: &CheckpointMeta) -> Result<()> {
        checkpoint::save(&self.dir.join(name), net, meta)
    }

    fn abort_dump(&self, err: &Error, batch: &[usize], snr: f64) {
        let dump = serde_json::json!({ "error": err.to_string(), "sample_indices": batch, "snr_db": snr });
        let _ = fs::write(self.dir.join("abort.json"), dump.to_string());
    }
}

/// Train on `data.train`, validating on a prefix of `data.val` after each epoch.
///
/// With `run_dir`, writes `config.toml`, `metrics.jsonl` and the last/best
/// checkpoints there. `observer` sees every record as it is produced.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    run_dir: Option<&Path>,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.grid != cfg.grid {
        return Err(Error::Data("dataset grid does not match the run config".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let t0 = Instant::now();
    let mut net = init_model(cfg)?;
    let mut opt = AdamW::<f32>::new(AdamWConfig {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    });
    let builder = CaseBuilder::from_config(cfg);
    let beta = cfg.effective_loss_beta();
    let perturb = cfg.effective_perturb();
    let n_s = cfg.grid.n_ports();
    let [ratio_lo, ratio_hi] = cfg.train.mask_ratio;
    let val = &data.val[..cfg.train.val_cap.min(data.val.len())];
    let config_hash = cfg.hash();

    let mut art = run_dir.map(|d| Artifacts::create(d, cfg)).transpose()?;
    let meta = |step: u64, epoch: u64, val_nmse: Option<f64>| CheckpointMeta {
        arch: cfg.arch(),
        step,
        epoch,
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        val_nmse,
    };
    if let Some(a) = &art {
        a.checkpoint(LAST_CHECKPOINT, &net, &meta(0, 0, None))?;
    }

    let mut history = Vec::new();
    let mut step: u64 = 0;
    let mut perturb_calls: u64 = 0;
    let mut best: Option<f64> = None;

    for epoch in 0..cfg.train.epochs as u64 {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[stream::SHUFFLE, epoch]));
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;

        for batch in order.chunks(cfg.train.batch_size) {
            step += 1;
            let batch_seed = derive_seed(cfg.seed, &[stream::BATCH, step]);
            let snr = cfg.train.snr_db[rng_from(batch_seed, &[stream::SNR]).random_range(0..cfg.train.snr_db.len())];
            let scale = 1.0 / batch.len() as f64;
            let (mut l_total, mut l_mse, mut l_fft) = (0.0, 0.0, 0.0);

            let result = (|| -> Result<()> {
                for (j, &idx) in batch.iter().enumerate() {
                    let sample_seed = derive_seed(batch_seed, &[j as u64]);
                    let ratio = rng_from(sample_seed, &[stream::RATIO]).random_range(ratio_lo..=ratio_hi);
                    let observed = ((n_s as f64) * (1.0 - ratio)).round().clamp(1.0, (n_s - 1) as f64) as usize;
                    let augment = perturb.enabled.then_some((&perturb, sample_seed));
                    perturb_calls += augment.is_some() as u64;
                    let case = builder.build(&data.train[idx], observed, snr, sample_seed, sample_seed, augment)?;

                    let x = case.input.mapv(|v| v as f32);
                    let mut drop_rng = rng_from(sample_seed, &[stream::DROPOUT]);
                    let (y, cache) = net.forward(&x, &case.mask.e_flag, true, &mut drop_rng)?;
                    let (loss, grad) = total_loss_grad(&y.mapv(f64::from), &case.target.data, &case.mask.omega, beta)?;
                    if !loss.total.is_finite() {
                        return Err(Error::Numerical {
                            step,
                            batch_seed,
                            message: format!("loss is {} on training sample {idx}", loss.total),
                        });
                    }
                    l_total += loss.total * scale;
                    l_mse += loss.mse * scale;
                    l_fft += loss.fft * scale;
                    net.backward(&cache, &grad.mapv(|g| (g * scale) as f32));
                }
                Ok(())
            })();
            if let Err(e) = result {
                if let Some(a) = &art {
                    a.abort_dump(&e, batch, snr);
                }
                return Err(e);
            }

            let grad_norm = match cfg.train.grad_clip {
                Some(c) => AdamW::clip_grad_norm(&mut net, c),
                None => AdamW::<f32>::grad_norm(&net),
            };
            if !grad_norm.is_finite() {
                let e = Error::Numerical {
                    step,
                    batch_seed,
                    message: "non-finite gradient".into(),
                };
                if let Some(a) = &art {
                    a.abort_dump(&e, batch, snr);
                }
                return Err(e);
            }
            opt.step(&mut net);

            epoch_loss += l_total;
            epoch_batches += 1;
            let rec = MetricsRecord::Step {
                step,
                epoch,
                snr_db: snr,
                loss_total: l_total,
                loss_mse: l_mse,
                loss_fft: l_fft,
                loss_beta: beta,
                grad_norm,
                elapsed_s: t0.elapsed().as_secs_f64(),
            };
            observer(&rec);
            if let Some(a) = &mut art {
                a.log(&rec)?;
            }
            history.push(rec);
        }

        let (val_rows, val_mean) = if val.is_empty() {
            (Vec::new(), f64::NAN)
        } else {
            let table: EvalTable = evaluate(
                &net,
                val,
                &builder,
                &cfg.eval.observed,
                &cfg.eval.snr_db,
                derive_seed(cfg.seed, &[stream::VALIDATION]),
                false,
            )?;
            let m = table.mean_nmse();
            (table.rows, m)
        };
        let rec = MetricsRecord::Epoch {
            step,
            epoch,
            train_loss_mean: epoch_loss / epoch_batches.max(1) as f64,
            val: val_rows,
            val_mean_nmse: val_mean,
            elapsed_s: t0.elapsed().as_secs_f64(),
        };
        observer(&rec);
        let improved = val_mean.is_finite() && best.is_none_or(|b| val_mean < b);
        if improved {
            best = Some(val_mean);
        }
        if let Some(a) = &mut art {
            a.log(&rec)?;
            let m = meta(step, epoch + 1, val_mean.is_finite().then_some(val_mean));
            a.checkpoint(LAST_CHECKPOINT, &net, &m)?;
            if improved {
                a.checkpoint(BEST_CHECKPOINT, &net, &m)?;
            }
        }
        history.push(rec);
    }

    Ok(TrainOutcome {
        net,
        history,
        steps: step,
        perturb_calls,
        best_val_nmse: best,
        run_dir: run_dir.map(Path::to_path_buf),
    })
}
