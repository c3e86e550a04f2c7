//! Reconstruction quality: MSE, PSNR and the SNR sweep evaluation.

use std::fmt::Write as _;

use crate::channel::snr_to_sigma2;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{Binding, DecoderId, Model, ParameterSet};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor};

pub const CSV_HEADER: &str = "regimen,seed,phase,epoch,snr_db,split,mse,psnr_db";

/// Images are evaluated in chunks of this many.
const EVAL_CHUNK: usize = 8;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("mse", format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(max²/mse)`; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// PSNR of `reconstructed` against `original`. The reconstruction is
/// expected to be clamped to `[0, max_value]` already.
pub fn psnr(original: &Tensor, reconstructed: &Tensor, max_value: f64) -> Result<f64> {
    if original.shape() != reconstructed.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", original.shape(), reconstructed.shape()),
        ));
    }
    if !(max_value > 0.0) {
        return Err(Error::Config(format!("psnr max_value {max_value} must be positive")));
    }
    Ok(psnr_from_mse(mse(original.data(), reconstructed.data())?, max_value))
}

pub fn clamp_unit(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// One row of a training or evaluation log. `snr_db == None` marks a
/// training-loss row, whose SNR is the per-batch mix.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub regimen: String,
    pub seed: u64,
    pub phase: u8,
    pub epoch: usize,
    pub snr_db: Option<f64>,
    pub split: Split,
    pub mse: f64,
    pub psnr_db: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let snr = self.snr_db.map_or_else(|| "mixed".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.regimen, self.seed, self.phase, self.epoch, snr, self.split, self.mse, self.psnr_db
        )
    }
}

/// Header plus rows, LF-terminated.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Test-set score at one SNR: per-image MSE and PSNR, averaged over images.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrScore {
    pub snr_db: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub per_image_psnr: Vec<f64>,
}

impl SnrScore {
    pub fn record(&self, regimen: &str, seed: u64, phase: u8, epoch: usize) -> MetricsRecord {
        MetricsRecord {
            regimen: regimen.to_string(),
            seed,
            phase,
            epoch,
            snr_db: Some(self.snr_db),
            split: Split::Test,
            mse: self.mse,
            psnr_db: self.psnr_db,
        }
    }
}

/// Noise stream for test image `index` at `snr_db`.
pub fn eval_stream(eval_seed: u64, snr_db: f64, index: usize) -> Stream {
    Stream::derive_indexed(eval_seed, &format!("eval/{snr_db}"), index as u64)
}

/// Reconstructions of a whole dataset at one SNR, clamped to `[0, 1]`.
pub fn reconstruct(
    model: &Model,
    params: &ParameterSet,
    which: DecoderId,
    data: &Dataset,
    snr_db: f64,
    eval_seed: u64,
) -> Result<Vec<Tensor>> {
    let (h, w) = data.extent();
    let n_sym = model.config().n_symbols(h, w)?;
    let sigma = snr_to_sigma2(snr_db).sqrt();
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let mut tape = Tape::no_grad();
        let mut binding = Binding::new();
        let images = tape.constant(data.batch_tensor(chunk)?);
        let x = model.encode(&mut tape, params, &mut binding, images)?;
        let x = tape.normalize_power(x)?;
        let mut received = tape.value(x).to_vec();
        if sigma > 0.0 {
            for (row, &i) in received.chunks_exact_mut(n_sym).zip(chunk) {
                let mut stream = eval_stream(eval_seed, snr_db, i);
                row.iter_mut().for_each(|v| *v += sigma * stream.normal());
            }
        }
        let y = tape.constant(Tensor::new(vec![chunk.len(), n_sym], received)?);
        let decoded = model.decode(&mut tape, params, &mut binding, y, which, h, w)?;
        let mut values = tape.value(decoded).to_vec();
        clamp_unit(&mut values);
        for img in values.chunks_exact(h * w * 3) {
            out.push(Tensor::new(vec![h, w, 3], img.to_vec())?);
        }
    }
    Ok(out)
}

/// Scores `which` on `data` at every SNR in `snrs` (in the given order).
/// Noise for image `i` at SNR `s` comes from [`eval_stream`], so results
/// depend only on the arguments.
pub fn evaluate(
    model: &Model,
    params: &ParameterSet,
    which: DecoderId,
    data: &Dataset,
    snrs: &[f64],
    eval_seed: u64,
) -> Result<Vec<SnrScore>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut scores = Vec::with_capacity(snrs.len());
    for &snr_db in snrs {
        let recon = reconstruct(model, params, which, data, snr_db, eval_seed)?;
        let mut mses = Vec::with_capacity(data.len());
        let mut psnrs = Vec::with_capacity(data.len());
        for (orig, rec) in data.images().iter().zip(&recon) {
            let m = mse(orig.data(), rec.data())?;
            mses.push(m);
            psnrs.push(psnr_from_mse(m, 1.0));
        }
        let n = data.len() as f64;
        scores.push(SnrScore {
            snr_db,
            mse: mses.iter().sum::<f64>() / n,
            psnr_db: psnrs.iter().sum::<f64>() / n,
            per_image_psnr: psnrs,
        });
    }
    Ok(scores)
}
