//! Unit-power normalization and real-valued AWGN.
//!
//! Symbols are real. With unit mean-square signal power, the per-component
//! noise variance for an SNR of `s` dB is `10^(−s/10)`. Pairing consecutive
//! reals into complex symbols with `σ²/2` per component gives the same SNR,
//! so nothing is lost by staying real.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub snr_set_db: Vec<f64>,
    /// Mixed into the training noise stream.
    pub noise_seed: u64,
    /// Master seed for per-(image, SNR) evaluation noise.
    pub eval_seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            snr_set_db: vec![1.0, 3.0, 5.0, 7.0],
            noise_seed: 0,
            eval_seed: 2024,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_set_db.is_empty() {
            return Err(Error::Config("snr_set_db is empty".into()));
        }
        if self.snr_set_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("training SNRs must be finite".into()));
        }
        Ok(())
    }
}

/// One sampled noise realization.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub snr_db: f64,
    pub sigma2: f64,
    pub sample: Tensor,
}

/// Per-component noise variance at `snr_db` under unit signal power.
/// `+∞` dB gives zero (the noiseless evaluation sentinel).
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Scales `x` to unit mean square.
pub fn normalize_power(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let y = tape.normalize_power(v)?;
    Ok(tape.tensor(y))
}

/// Draws `shape`-sized Gaussian noise with variance `snr_to_sigma2(snr_db)`.
pub fn draw_noise(shape: Vec<usize>, snr_db: f64, stream: &mut Stream) -> Result<NoiseDraw> {
    let sigma2 = snr_to_sigma2(snr_db);
    let std = sigma2.sqrt();
    let n: usize = shape.iter().product();
    let values = if sigma2 == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| std * stream.normal()).collect()
    };
    Ok(NoiseDraw {
        snr_db,
        sigma2,
        sample: Tensor::new(shape, values)?,
    })
}

/// `Y = X + N` on the tape. The noise is a constant, so the gradient
/// reaching `x` equals the gradient at `Y`.
pub fn transmit(tape: &mut Tape, x: Var, snr_db: f64, stream: &mut Stream) -> Result<Var> {
    let noise = draw_noise(tape.shape(x).to_vec(), snr_db, stream)?;
    if noise.sigma2 == 0.0 {
        return Ok(x);
    }
    let n = tape.constant(noise.sample);
    tape.add(x, n)
}

/// `X + N` on plain tensors.
pub fn transmit_tensor(x: &Tensor, snr_db: f64, stream: &mut Stream) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let y = transmit(&mut tape, v, snr_db, stream)?;
    Ok(tape.tensor(y))
}

/// One SNR drawn uniformly from the configured set.
pub fn sample_snr(config: &ChannelConfig, stream: &mut Stream) -> f64 {
    config.snr_set_db[stream.below(config.snr_set_db.len())]
}
