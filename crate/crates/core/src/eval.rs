//! Case construction and the NMSE evaluation sweep.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::augment::{amplitude_perturb, PerturbConfig};
use crate::channel::apply_awgn;
use crate::config::{GridConfig, NoisePlacement, RunConfig};
use crate::dataset::StoredSample;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, network_input, sample_mask_dims, tensorize, CsiTensor, MaskSpec, Which};
use crate::nn::net::CaNet;
use crate::objectives::{to_db, NmseAccumulator};
use crate::rng::{derive_seed, rng_from, stream};

/// One masked extrapolation problem.
#[derive(Debug, Clone)]
pub struct EvalCase {
    /// Network input: masked (and possibly perturbed) tensor plus optional flag channel.
    pub input: Array3<f64>,
    pub mask: MaskSpec,
    /// Reference tensor the prediction is scored against.
    pub target: CsiTensor,
}

/// Turns stored channels into cases under a fixed data protocol.
#[derive(Debug, Clone)]
pub struct CaseBuilder {
    pub grid: GridConfig,
    pub flag_channel: bool,
    pub sentinel: f64,
    pub noise: NoisePlacement,
}

impl CaseBuilder {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            grid: cfg.grid.clone(),
            flag_channel: cfg.model.flag_channel,
            sentinel: cfg.model.sentinel,
            noise: cfg.train.noise,
        }
    }

    /// Noise is drawn from `noise_seed`, the mask from `mask_seed`; `perturb`
    /// carries the augmentation settings and its seed when it should run.
    pub fn build(
        &self,
        sample: &StoredSample,
        observed: usize,
        snr_db: f64,
        noise_seed: u64,
        mask_seed: u64,
        perturb: Option<(&PerturbConfig, u64)>,
    ) -> Result<EvalCase> {
        let g = &self.grid;
        let ch = sample.to_channel(g.n_ports(), g.m_t, g.delta)?;
        let noisy = apply_awgn(ch, snr_db, &mut rng_from(noise_seed, &[stream::NOISE]))?;
        let pick = |noisy_side: bool| if noisy_side { Which::Noisy } else { Which::Clean };
        let source = tensorize(&noisy, pick(self.noise.noisy_input()), g.n_y, g.n_x)?;
        let target = tensorize(&noisy, pick(self.noise.noisy_target()), g.n_y, g.n_x)?;
        let mask = sample_mask_dims(g.n_y, g.n_x, observed, self.sentinel, &mut rng_from(mask_seed, &[stream::MASK]))?;
        let mut masked = apply_mask(&source, &mask)?;
        if let Some((cfg, seed)) = perturb {
            masked = amplitude_perturb(&masked, cfg, &mut rng_from(seed, &[stream::PERTURB]))?;
        }
        Ok(EvalCase {
            input: network_input(&masked, &mask, self.flag_channel),
            mask,
            target,
        })
    }
}

/// Anything that maps a masked case to a full CSI tensor.
pub trait Extrapolator {
    fn name(&self) -> &str;
    fn extrapolate(&self, case: &EvalCase) -> Result<Array3<f64>>;
}

impl Extrapolator for CaNet<f32> {
    fn name(&self) -> &str {
        "canet"
    }

    fn extrapolate(&self, case: &EvalCase) -> Result<Array3<f64>> {
        let x = case.input.mapv(|v| v as f32);
        Ok(self.predict(&x, &case.mask.e_flag)?.mapv(f64::from))
    }
}

/// Returns the reference tensor; scores zero error by construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleModel;

impl Extrapolator for OracleModel {
    fn name(&self) -> &str {
        "oracle"
    }

    fn extrapolate(&self, case: &EvalCase) -> Result<Array3<f64>> {
        Ok(case.target.data.clone())
    }
}

/// Predicts zero everywhere; scores NMSE 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroModel;

impl Extrapolator for ZeroModel {
    fn name(&self) -> &str {
        "zero"
    }

    fn extrapolate(&self, case: &EvalCase) -> Result<Array3<f64>> {
        Ok(Array3::zeros(case.target.data.dim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub observed_count: usize,
    pub snr_db: f64,
    pub nmse: f64,
    pub nmse_db: f64,
    /// Median of per-sample NMSE.
    pub median_nmse: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub model: String,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    observed_count: usize,
    snr_db: f64,
    nmse: f64,
    nmse_db: f64,
}

impl EvalTable {
    pub fn row(&self, observed_count: usize, snr_db: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.observed_count == observed_count && r.snr_db == snr_db)
    }

    pub fn mean_nmse(&self) -> f64 {
        self.rows.iter().map(|r| r.nmse).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                observed_count: r.observed_count,
                snr_db: r.snr_db,
                nmse: r.nmse,
                nmse_db: r.nmse_db,
            })
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, model: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            observed_count: usize,
            snr_db: f64,
            nmse: f64,
            nmse_db: f64,
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let rows = r
            .deserialize::<Row>()
            .map(|row| {
                row.map(|row| EvalRow {
                    observed_count: row.observed_count,
                    snr_db: row.snr_db,
                    nmse: row.nmse,
                    nmse_db: row.nmse_db,
                    median_nmse: f64::NAN,
                    samples: 0,
                })
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model.to_string(),
            rows,
        })
    }

    /// Plain-text table, one line per row.
    pub fn render(&self) -> String {
        let mut s = format!("{:>9} {:>7} {:>12} {:>9} {:>12}\n", "observed", "snr_db", "nmse", "nmse_db", "median_nmse");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>9} {:>7.1} {:>12.5e} {:>9.3} {:>12.5e}",
                r.observed_count, r.snr_db, r.nmse, r.nmse_db, r.median_nmse
            );
        }
        s
    }
}

/// Two tables over the same grid, columns side by side.
pub fn render_side_by_side(a: &EvalTable, b: &EvalTable) -> String {
    let mut s = format!(
        "{:>9} {:>7} {:>14} {:>14}\n",
        "observed",
        "snr_db",
        format!("{} dB", a.model),
        format!("{} dB", b.model)
    );
    for r in &a.rows {
        let other = b
            .row(r.observed_count, r.snr_db)
            .map(|o| format!("{:.3}", o.nmse_db))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:>9} {:>7.1} {:>14.3} {:>14}", r.observed_count, r.snr_db, r.nmse_db, other);
    }
    s
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sweep every `(observed, snr)` pair over `samples`.
///
/// Masks depend on `(seed, observed, sample)` only, so all SNR rows of one
/// observed count share the same masks.
pub fn evaluate<E: Extrapolator + ?Sized>(
    model: &E,
    samples: &[StoredSample],
    builder: &CaseBuilder,
    observed: &[usize],
    snrs: &[f64],
    seed: u64,
    overwrite_observed: bool,
) -> Result<EvalTable> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let n_s = builder.grid.n_ports();
    if let Some(&bad) = observed.iter().find(|&&k| k == 0 || k > n_s) {
        return Err(Error::InvalidArgument(format!("observed count {bad} outside [1, {n_s}]")));
    }
    let mut rows = Vec::with_capacity(observed.len() * snrs.len());
    for &k in observed {
        for &snr in snrs {
            let mut total = NmseAccumulator::default();
            let mut per_sample = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let mask_seed = derive_seed(seed, &[stream::MASK, k as u64, i as u64]);
                let noise_seed = derive_seed(seed, &[stream::NOISE, snr.to_bits(), i as u64]);
                let case = builder.build(s, k, snr, noise_seed, mask_seed, None)?;
                let mut pred = model.extrapolate(&case)?;
                if pred.dim() != case.target.data.dim() {
                    return Err(Error::Shape(format!(
                        "{} returned {:?}, expected {:?}",
                        model.name(),
                        pred.dim(),
                        case.target.data.dim()
                    )));
                }
                if overwrite_observed {
                    // the measured values sit in the input at observed ports
                    for ((c, y, x), v) in pred.indexed_iter_mut() {
                        if case.mask.e_flag[[y, x]] != 0 {
                            *v = case.input[[c, y, x]];
                        }
                    }
                }
                let mut one = NmseAccumulator::default();
                one.add(pred.iter(), case.target.data.iter());
                total.error += one.error;
                total.power += one.power;
                per_sample.push(one.finish()?.linear);
            }
            let nmse = total.finish()?;
            if !nmse.linear.is_finite() {
                return Err(Error::Numerical {
                    step: 0,
                    batch_seed: seed,
                    message: format!("non-finite NMSE at observed {k}, snr {snr}"),
                });
            }
            rows.push(EvalRow {
                observed_count: k,
                snr_db: snr,
                nmse: nmse.linear,
                nmse_db: nmse.db,
                median_nmse: median(&mut per_sample),
                samples: samples.len(),
            });
        }
    }
    Ok(EvalTable {
        model: model.name().to_string(),
        rows,
    })
}

/// Medians and dB summary as JSON, for tools that want more than the CSV.
pub fn summary_json(table: &EvalTable) -> serde_json::Value {
    serde_json::json!({
        "model": table.model,
        "rows": table.rows.iter().map(|r| serde_json::json!({
            "observed_count": r.observed_count,
            "snr_db": r.snr_db,
            "nmse": r.nmse,
            "nmse_db": r.nmse_db,
            "median_nmse": r.median_nmse,
            "median_nmse_db": to_db(r.median_nmse),
            "samples": r.samples,
        })).collect::<Vec<_>>(),
        "mean_nmse": table.mean_nmse(),
    })
}
