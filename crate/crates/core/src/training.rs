//! Training regimens for the shared encoder and its two decoders.
//!
//! Every regimen draws randomness from streams derived from the master seed
//! by fixed labels: `init` for parameters, `shuffle/{phase}` for batch order
//! and `noise/{phase}` (indexed by the channel's noise seed) for SNR and
//! noise draws. Regimens that share a phase label therefore see identical
//! batches and noise, and differ only in what they optimize.

use std::fmt;
use std::str::FromStr;

use crate::channel::{sample_snr, transmit, ChannelConfig};
use crate::data::{batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, psnr_from_mse, to_csv, MetricsRecord};
use crate::model::{transfer_selector, transfer_stages, Binding, DecoderId, Model, ParameterSet};
use crate::rng::Stream;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transfer {
    None,
    Copy,
    CopyFreeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regimen {
    Alone,
    Iterative,
    Proposed,
    ProposedTransfer,
    ProposedTransferFrozen,
    ProposedKd,
}

impl Regimen {
    pub const ALL: [Regimen; 6] = [
        Regimen::Alone,
        Regimen::Iterative,
        Regimen::Proposed,
        Regimen::ProposedTransfer,
        Regimen::ProposedTransferFrozen,
        Regimen::ProposedKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regimen::Alone => "alone",
            Regimen::Iterative => "iterative",
            Regimen::Proposed => "proposed",
            Regimen::ProposedTransfer => "proposed+transfer",
            Regimen::ProposedTransferFrozen => "proposed+transfer-frozen",
            Regimen::ProposedKd => "proposed+kd",
        }
    }

    /// `(kd, transfer)` for the two-stage regimens; `None` otherwise.
    pub fn phase2_options(self) -> Option<(bool, Transfer)> {
        match self {
            Regimen::Proposed => Some((false, Transfer::None)),
            Regimen::ProposedTransfer => Some((false, Transfer::Copy)),
            Regimen::ProposedTransferFrozen => Some((false, Transfer::CopyFreeze)),
            Regimen::ProposedKd => Some((true, Transfer::None)),
            Regimen::Alone | Regimen::Iterative => None,
        }
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regimen {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regimen::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regimen `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epochs each decoder trains for (`T`). The iterative regimen runs `2T`.
    pub epochs_per_decoder: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the distillation term; only read by `proposed+kd`.
    pub alpha: f64,
    pub regimen: Regimen,
    pub master_seed: u64,
    /// Evaluate on the held-out set every this many epochs of a decoder
    /// (the final epoch is always evaluated). `0` evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_decoder: 30,
            learning_rate: 5e-4,
            batch_size: 8,
            alpha: 0.5,
            regimen: Regimen::Proposed,
            master_seed: 0,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_decoder == 0 {
            return Err(Error::Config("epochs_per_decoder must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        Stream::derive(self.master_seed, "init").next_u64()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Mean training loss of one epoch of one decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub phase: u8,
    pub epoch: usize,
    /// Mean of the optimized objective.
    pub loss: f64,
    /// Mean reconstruction MSE (equal to `loss` unless distilling).
    pub reconstruction: f64,
}

/// Per-epoch training losses plus held-out evaluation rows.
///
/// Phase 1 rows describe the HCD and phase 2 rows the LCD; the iterative
/// regimen interleaves them, numbering each decoder's epochs from 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<EpochLoss>,
    pub records: Vec<MetricsRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        to_csv(&self.records)
    }

    pub fn losses_for(&self, phase: u8) -> Vec<f64> {
        self.losses
            .iter()
            .filter(|l| l.phase == phase)
            .map(|l| l.loss)
            .collect()
    }

    /// Test rows of `phase` at the last evaluated epoch.
    pub fn final_scores(&self, phase: u8) -> Vec<&MetricsRecord> {
        let test = || {
            self.records
                .iter()
                .filter(move |r| r.phase == phase && r.split == Split::Test)
        };
        let Some(last) = test().map(|r| r.epoch).max() else {
            return Vec::new();
        };
        test().filter(|r| r.epoch == last).collect()
    }

    /// Rewrites the regimen column, used when a shared phase 1 is reused.
    pub fn relabel(&mut self, regimen: Regimen) {
        for r in &mut self.records {
            r.regimen = regimen.name().to_string();
        }
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.losses.extend(other.losses);
        self.records.extend(other.records);
    }
}

/// `mse(I, Î)` on the tape.
pub fn loss_reconstruction(tape: &mut Tape, original: Var, reconstructed: Var) -> Result<Var> {
    tape.mse(original, reconstructed)
}

/// `mse(Î₁, Î₂)` against a detached teacher output.
pub fn loss_distill(tape: &mut Tape, teacher: Var, student: Var) -> Result<Var> {
    if tape.requires_grad(teacher) {
        return Err(Error::TeacherTrainable);
    }
    tape.mse(teacher, student)
}

/// `loss_reconstruction + α·loss_distill`, reconstruction evaluated first.
pub fn loss_combined(tape: &mut Tape, original: Var, student: Var, teacher: Var, alpha: f64) -> Result<Var> {
    let r = loss_reconstruction(tape, original, student)?;
    let d = loss_distill(tape, teacher, student)?;
    let d = tape.scale(d, alpha)?;
    tape.add(r, d)
}

/// Parameters and log of a finished regimen. `phase1` holds the snapshot
/// after the first stage of two-stage regimens.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: ParameterSet,
    pub phase1: Option<ParameterSet>,
    pub log: TrainLog,
}

/// One Adam state over a fixed, ordered list of parameter names.
struct Group {
    names: Vec<String>,
    state: AdamState,
}

impl Group {
    fn new(params: &ParameterSet, prefixes: &[&str]) -> Result<Self> {
        let names = params.select(prefixes)?;
        let state = AdamState::new(names.iter().map(|n| params.get(n).expect("selected")));
        Ok(Self { names, state })
    }

    fn step(&mut self, params: &mut ParameterSet, cfg: &AdamConfig) -> Result<()> {
        let mut tensors = params.tensors_mut(&self.names)?;
        adam_step(&mut tensors, &mut self.state, cfg)
    }
}

/// Randomness of one phase.
struct Streams {
    shuffle: Stream,
    noise: Stream,
}

/// Position within a run, for diagnostics and log rows.
#[derive(Clone, Copy)]
struct Step {
    phase: u8,
    epoch: usize,
    batch: usize,
}

pub struct Trainer<'a> {
    model: &'a Model,
    channel: &'a ChannelConfig,
    config: &'a TrainConfig,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        channel: &'a ChannelConfig,
        config: &'a TrainConfig,
        train: &'a Dataset,
        test: Option<&'a Dataset>,
    ) -> Result<Self> {
        config.validate()?;
        channel.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (h, w) = train.extent();
        model.config().validate_image(h, w)?;
        if let Some(t) = test {
            if t.is_empty() {
                return Err(Error::EmptyDataset);
            }
            if t.extent() != (h, w) {
                return Err(Error::Config(format!(
                    "test images are {:?}, training images {:?}",
                    t.extent(),
                    (h, w)
                )));
            }
        }
        Ok(Self {
            model,
            channel,
            config,
            train,
            test,
        })
    }

    pub fn init_params(&self) -> Result<ParameterSet> {
        ParameterSet::build(self.model.config(), self.config.init_seed())
    }

    fn streams(&self, label: &str) -> Streams {
        Streams {
            shuffle: Stream::derive(self.config.master_seed, &format!("shuffle/{label}")),
            noise: Stream::derive_indexed(
                self.config.master_seed,
                &format!("noise/{label}"),
                self.channel.noise_seed,
            ),
        }
    }

    fn abort(&self, at: Step) -> Error {
        Error::NonFiniteLoss {
            regimen: self.config.regimen.name().to_string(),
            phase: at.phase,
            epoch: at.epoch,
            batch: at.batch,
        }
    }

    /// Maps forward-pass overflow to the training abort carrying `at`.
    fn guard<T>(&self, r: Result<T>, at: Step) -> Result<T> {
        r.map_err(|e| match e {
            Error::NonFinite { .. } => self.abort(at),
            e => e,
        })
    }

    fn check_loss(&self, tape: &Tape, loss: Var, at: Step) -> Result<f64> {
        match tape.item(loss) {
            Some(v) if v.is_finite() => Ok(v),
            _ => Err(self.abort(at)),
        }
    }

    /// One end-to-end step: the encoder and `which` both receive gradients.
    /// Returns the batch loss.
    fn joint_step(
        &self,
        params: &mut ParameterSet,
        batch: &[usize],
        which: DecoderId,
        streams: &mut Streams,
        at: Step,
    ) -> Result<f64> {
        let (h, w) = self.train.extent();
        let snr = sample_snr(self.channel, &mut streams.noise);
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let images = tape.constant(self.train.batch_tensor(batch)?);
        let forward = (|| {
            let z = self.model.encode(&mut tape, params, &mut binding, images)?;
            let z = tape.normalize_power(z)?;
            let y = transmit(&mut tape, z, snr, &mut streams.noise)?;
            let out = self.model.decode(&mut tape, params, &mut binding, y, which, h, w)?;
            loss_reconstruction(&mut tape, images, out)
        })();
        let loss = self.guard(forward, at)?;
        let value = self.check_loss(&tape, loss, at)?;
        tape.backward(loss)?;
        binding.accumulate_grads(&tape, params)?;
        Ok(value)
    }

    /// One epoch of joint steps, stepping every group after each batch.
    fn epoch_of_joint(
        &self,
        params: &mut ParameterSet,
        which: DecoderId,
        groups: &mut [&mut Group],
        streams: &mut Streams,
        phase: u8,
        epoch: usize,
    ) -> Result<EpochLoss> {
        let adam = self.config.adam();
        let mut total = 0.0;
        let order = batches(self.train.len(), self.config.batch_size, &mut streams.shuffle)?;
        for (b, batch) in order.iter().enumerate() {
            let at = Step {
                phase,
                epoch,
                batch: b + 1,
            };
            total += self.joint_step(params, batch, which, streams, at)?;
            for g in groups.iter_mut() {
                g.step(params, &adam)?;
            }
            params.zero_grad();
        }
        let mean = total / order.len() as f64;
        Ok(EpochLoss {
            phase,
            epoch,
            loss: mean,
            reconstruction: mean,
        })
    }

    fn due(&self, epoch: usize) -> bool {
        epoch == self.config.epochs_per_decoder || (self.config.eval_every > 0 && epoch % self.config.eval_every == 0)
    }

    fn record_epoch(&self, log: &mut TrainLog, params: &ParameterSet, which: DecoderId, loss: EpochLoss) -> Result<()> {
        let regimen = self.config.regimen.name();
        let seed = self.config.master_seed;
        log.records.push(MetricsRecord {
            regimen: regimen.to_string(),
            seed,
            phase: loss.phase,
            epoch: loss.epoch,
            snr_db: None,
            split: Split::Train,
            mse: loss.reconstruction,
            psnr_db: psnr_from_mse(loss.reconstruction, 1.0),
        });
        if let Some(test) = self.test.filter(|_| self.due(loss.epoch)) {
            let mut snrs = self.channel.snr_set_db.clone();
            snrs.sort_by(f64::total_cmp);
            for score in evaluate(self.model, params, which, test, &snrs, self.channel.eval_seed)? {
                log.records.push(score.record(regimen, seed, loss.phase, loss.epoch));
            }
        }
        log.losses.push(loss);
        Ok(())
    }

    fn train_pair(&self, params: &mut ParameterSet, which: DecoderId, label: &str, phase: u8) -> Result<TrainLog> {
        let dec = which.prefix();
        params.set_trainable(&["enc.", dec], true)?;
        let mut group = Group::new(params, &["enc.", dec])?;
        let mut streams = self.streams(label);
        let mut log = TrainLog::default();
        for epoch in 1..=self.config.epochs_per_decoder {
            let loss = self.epoch_of_joint(params, which, &mut [&mut group], &mut streams, phase, epoch)?;
            self.record_epoch(&mut log, params, which, loss)?;
        }
        Ok(log)
    }

    /// Stage one: encoder and HCD trained together for `T` epochs. The LCD
    /// is not touched.
    pub fn run_phase1(&self, params: &mut ParameterSet) -> Result<TrainLog> {
        self.train_pair(params, DecoderId::Hcd, "phase1", 1)
    }

    /// Stage two: encoder and HCD frozen, LCD trained for `T` epochs.
    ///
    /// With a transfer, the HCD's trailing stages and head are copied into
    /// the LCD first (and kept frozen for [`Transfer::CopyFreeze`]). With
    /// `kd`, the loss adds `α·mse(Î₁, Î₂)`, where the HCD output `Î₁` is
    /// computed from the same received symbols as the student's. Trainable
    /// flags are left as this phase set them.
    pub fn run_phase2(&self, params: &mut ParameterSet, kd: bool, transfer: Transfer) -> Result<TrainLog> {
        let (h, w) = self.train.extent();
        if transfer != Transfer::None {
            self.model.config().check_transfer_compatible()?;
            transfer_stages(params)?;
        }
        params.set_trainable(&["enc.", "dec1."], false)?;
        params.set_trainable(&["dec2."], true)?;
        if transfer == Transfer::CopyFreeze {
            let selector = transfer_selector(DecoderId::Lcd);
            let selector: Vec<&str> = selector.iter().map(String::as_str).collect();
            params.set_trainable(&selector, false)?;
        }
        let mut group = Group::new(params, &["dec2."])?;
        let mut streams = self.streams("phase2");
        let adam = self.config.adam();
        let mut log = TrainLog::default();
        for epoch in 1..=self.config.epochs_per_decoder {
            let order = batches(self.train.len(), self.config.batch_size, &mut streams.shuffle)?;
            let (mut total, mut recon) = (0.0, 0.0);
            for (b, batch) in order.iter().enumerate() {
                let at = Step {
                    phase: 2,
                    epoch,
                    batch: b + 1,
                };
                let snr = sample_snr(self.channel, &mut streams.noise);
                let images = self.train.batch_tensor(batch)?;

                let mut frozen = Tape::no_grad();
                let mut fb = Binding::new();
                let received = (|| {
                    let x = frozen.constant(images.clone());
                    let z = self.model.encode(&mut frozen, params, &mut fb, x)?;
                    let z = frozen.normalize_power(z)?;
                    let y = transmit(&mut frozen, z, snr, &mut streams.noise)?;
                    let teacher = match kd {
                        true => Some(
                            self.model
                                .decode(&mut frozen, params, &mut fb, y, DecoderId::Hcd, h, w)?,
                        ),
                        false => None,
                    };
                    Ok((frozen.tensor(y), teacher.map(|t| frozen.tensor(t))))
                })();
                let (received, teacher): (Tensor, Option<Tensor>) = self.guard(received, at)?;

                let mut tape = Tape::new();
                let mut binding = Binding::new();
                let forward = (|| {
                    let original = tape.constant(images);
                    let y = tape.constant(received);
                    let out = self
                        .model
                        .decode(&mut tape, params, &mut binding, y, DecoderId::Lcd, h, w)?;
                    match teacher {
                        Some(t) => {
                            let t = tape.constant(t);
                            let r = loss_reconstruction(&mut tape, original, out)?;
                            Ok((loss_combined(&mut tape, original, out, t, self.config.alpha)?, r))
                        }
                        None => {
                            let r = loss_reconstruction(&mut tape, original, out)?;
                            Ok((r, r))
                        }
                    }
                })();
                let (loss, r) = self.guard(forward, at)?;
                total += self.check_loss(&tape, loss, at)?;
                recon += self.check_loss(&tape, r, at)?;
                tape.backward(loss)?;
                binding.accumulate_grads(&tape, params)?;
                group.step(params, &adam)?;
                params.zero_grad();
            }
            let n = order.len() as f64;
            let loss = EpochLoss {
                phase: 2,
                epoch,
                loss: total / n,
                reconstruction: recon / n,
            };
            self.record_epoch(&mut log, params, DecoderId::Lcd, loss)?;
        }
        Ok(log)
    }

    /// Baseline: `2T` epochs alternating decoders, odd epochs the HCD and
    /// even epochs the LCD, with the encoder updated in every epoch.
    pub fn run_iterative(&self, params: &mut ParameterSet) -> Result<TrainLog> {
        self.run_iterative_observed(params, |_, _| {})
    }

    /// [`Trainer::run_iterative`], calling `observe(total_epoch, params)`
    /// after each of the `2T` epochs.
    pub fn run_iterative_observed(
        &self,
        params: &mut ParameterSet,
        mut observe: impl FnMut(usize, &ParameterSet),
    ) -> Result<TrainLog> {
        params.set_trainable(&["enc.", "dec1.", "dec2."], true)?;
        let mut enc = Group::new(params, &["enc."])?;
        let mut hcd = Group::new(params, &["dec1."])?;
        let mut lcd = Group::new(params, &["dec2."])?;
        let mut streams = self.streams("iterative");
        let mut log = TrainLog::default();
        for total_epoch in 1..=2 * self.config.epochs_per_decoder {
            let epoch = total_epoch.div_ceil(2);
            let (which, phase, dec) = match total_epoch % 2 {
                1 => (DecoderId::Hcd, 1, &mut hcd),
                _ => (DecoderId::Lcd, 2, &mut lcd),
            };
            let loss = self.epoch_of_joint(params, which, &mut [&mut enc, dec], &mut streams, phase, epoch)?;
            self.record_epoch(&mut log, params, which, loss)?;
            observe(total_epoch, params);
        }
        Ok(log)
    }

    /// Baseline: the encoder paired only with the LCD for `T` epochs.
    pub fn run_train_alone(&self, params: &mut ParameterSet) -> Result<TrainLog> {
        self.train_pair(params, DecoderId::Lcd, "alone", 2)
    }

    /// Runs the configured regimen from fresh parameters.
    pub fn run(&self) -> Result<RunOutput> {
        let mut params = self.init_params()?;
        match self.config.regimen {
            Regimen::Alone => {
                let log = self.run_train_alone(&mut params)?;
                Ok(RunOutput {
                    params,
                    phase1: None,
                    log,
                })
            }
            Regimen::Iterative => {
                let log = self.run_iterative(&mut params)?;
                Ok(RunOutput {
                    params,
                    phase1: None,
                    log,
                })
            }
            _ => {
                let log = self.run_phase1(&mut params)?;
                self.continue_from_phase1(params, log)
            }
        }
    }

    /// Finishes a two-stage regimen from phase-1 parameters, such as a
    /// loaded `phase1` checkpoint. `log` holds the phase-1 rows, if any.
    pub fn continue_from_phase1(&self, phase1: ParameterSet, mut log: TrainLog) -> Result<RunOutput> {
        let (kd, transfer) = self
            .config
            .regimen
            .phase2_options()
            .ok_or_else(|| Error::Config(format!("regimen {} has no second phase", self.config.regimen)))?;
        let mut params = phase1.clone();
        log.relabel(self.config.regimen);
        log.extend(self.run_phase2(&mut params, kd, transfer)?);
        Ok(RunOutput {
            params,
            phase1: Some(phase1),
            log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::verify::tiny_model_config;

    struct Fixture {
        model: Model,
        channel: ChannelConfig,
        train: Dataset,
        test: Dataset,
    }

    fn fixture() -> Fixture {
        Fixture {
            model: Model::new(tiny_model_config()).unwrap(),
            channel: ChannelConfig::default(),
            train: synth_dataset(6, 16, 1, Split::Train).unwrap(),
            test: synth_dataset(2, 16, 2, Split::Test).unwrap(),
        }
    }

    fn cfg(regimen: Regimen, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs_per_decoder: epochs,
            batch_size: 4,
            regimen,
            eval_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn regimen_names_round_trip() {
        for r in Regimen::ALL {
            assert_eq!(r.name().parse::<Regimen>().unwrap(), r);
        }
        assert!("baseline".parse::<Regimen>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs_per_decoder: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                alpha: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::full(vec![2, 3], 0.4));
        let shifted = tape.constant(Tensor::full(vec![2, 3], 0.5));
        let r = loss_reconstruction(&mut tape, i, i).unwrap();
        assert_eq!(tape.item(r), Some(0.0));
        let r = loss_reconstruction(&mut tape, i, shifted).unwrap();
        assert!((tape.item(r).unwrap() - 0.01).abs() < 1e-15);
        let c = loss_combined(&mut tape, i, shifted, i, 1.0).unwrap();
        assert_eq!(tape.item(c).unwrap(), 2.0 * tape.item(r).unwrap());
        let c0 = loss_combined(&mut tape, i, shifted, shifted, 0.0).unwrap();
        assert_eq!(tape.item(c0).unwrap().to_bits(), tape.item(r).unwrap().to_bits());
    }

    #[test]
    fn trainable_teacher_is_rejected() {
        let mut tape = Tape::new();
        let t = tape.leaf(&Tensor::full(vec![3], 0.5).with_grad());
        let s = tape.leaf(&Tensor::full(vec![3], 0.1).with_grad());
        assert!(matches!(loss_distill(&mut tape, t, s), Err(Error::TeacherTrainable)));
    }

    #[test]
    fn phase1_leaves_lcd_alone_and_is_deterministic() {
        let f = fixture();
        let c = cfg(Regimen::Proposed, 2);
        let trainer = Trainer::new(&f.model, &f.channel, &c, &f.train, Some(&f.test)).unwrap();
        let mut a = trainer.init_params().unwrap();
        let before = a.snapshot(&["dec2."]);
        let enc_before = a.snapshot(&["enc."]);
        let log_a = trainer.run_phase1(&mut a).unwrap();
        assert_eq!(a.snapshot(&["dec2."]), before);
        assert_ne!(a.snapshot(&["enc."]), enc_before);

        let mut b = trainer.init_params().unwrap();
        let log_b = trainer.run_phase1(&mut b).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a, b);
        assert_eq!(log_a.losses_for(1).len(), 2);
        assert_eq!(log_a.final_scores(1).len(), 4);
    }

    #[test]
    fn phase2_freezes_encoder_and_hcd() {
        let f = fixture();
        let c = cfg(Regimen::ProposedKd, 1);
        let trainer = Trainer::new(&f.model, &f.channel, &c, &f.train, None).unwrap();
        let mut p = trainer.init_params().unwrap();
        let frozen = p.snapshot(&["enc.", "dec1."]);
        let lcd = p.snapshot(&["dec2."]);
        trainer.run_phase2(&mut p, true, Transfer::None).unwrap();
        assert_eq!(p.snapshot(&["enc.", "dec1."]), frozen);
        assert_ne!(p.snapshot(&["dec2."]), lcd);
        assert!(p
            .iter()
            .filter(|(n, _)| n.starts_with("dec1."))
            .all(|(_, t)| t.grad.is_none()));
    }

    #[test]
    fn kd_with_zero_alpha_matches_plain_phase2() {
        let f = fixture();
        let plain = cfg(Regimen::Proposed, 2);
        let kd = TrainConfig {
            alpha: 0.0,
            regimen: Regimen::ProposedKd,
            ..plain.clone()
        };
        let t1 = Trainer::new(&f.model, &f.channel, &plain, &f.train, None).unwrap();
        let t2 = Trainer::new(&f.model, &f.channel, &kd, &f.train, None).unwrap();
        let a = t1.run().unwrap();
        let b = t2.run().unwrap();
        assert_eq!(a.params, b.params);

        let half = TrainConfig { alpha: 0.5, ..kd };
        let c = Trainer::new(&f.model, &f.channel, &half, &f.train, None)
            .unwrap()
            .run()
            .unwrap();
        assert_ne!(a.params.snapshot(&["dec2."]), c.params.snapshot(&["dec2."]));
    }

    #[test]
    fn transfer_copies_then_diverges_and_frozen_copy_stays() {
        let f = fixture();
        let c = cfg(Regimen::ProposedTransfer, 1);
        let trainer = Trainer::new(&f.model, &f.channel, &c, &f.train, None).unwrap();
        let tail = |p: &ParameterSet, dec: &str| -> Vec<Vec<f64>> {
            p.snapshot(&[
                &format!("{dec}.sem.stage3."),
                &format!("{dec}.sem.stage4."),
                &format!("{dec}.sem.head."),
            ])
            .into_values()
            .collect()
        };

        let mut copied = trainer.init_params().unwrap();
        transfer_stages(&mut copied).unwrap();
        assert_eq!(tail(&copied, "dec1"), tail(&copied, "dec2"));

        let mut p = trainer.init_params().unwrap();
        trainer.run_phase2(&mut p, false, Transfer::Copy).unwrap();
        assert_ne!(tail(&p, "dec1"), tail(&p, "dec2"));

        let mut q = trainer.init_params().unwrap();
        let lcd_head = q.snapshot(&["dec2.sem.stage1.", "dec2.chan."]);
        trainer.run_phase2(&mut q, false, Transfer::CopyFreeze).unwrap();
        assert_eq!(tail(&q, "dec1"), tail(&q, "dec2"));
        assert_ne!(q.snapshot(&["dec2.sem.stage1.", "dec2.chan."]), lcd_head);
    }

    #[test]
    fn iterative_alternates_by_parity() {
        let f = fixture();
        let c = cfg(Regimen::Iterative, 2);
        let trainer = Trainer::new(&f.model, &f.channel, &c, &f.train, None).unwrap();
        let mut p = trainer.init_params().unwrap();
        let log = trainer.run_iterative(&mut p).unwrap();
        let phases: Vec<(u8, usize)> = log.losses.iter().map(|l| (l.phase, l.epoch)).collect();
        assert_eq!(phases, [(1, 1), (2, 1), (1, 2), (2, 2)]);

        let mut q = trainer.init_params().unwrap();
        let mut last = q.clone();
        trainer
            .run_iterative_observed(&mut q, |e, now| {
                let moved = |prefix: &str| now.snapshot(&[prefix]) != last.snapshot(&[prefix]);
                assert!(moved("enc."));
                assert_eq!(moved("dec1."), e % 2 == 1, "epoch {e}");
                assert_eq!(moved("dec2."), e % 2 == 0, "epoch {e}");
                last = now.clone();
            })
            .unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn alone_touches_only_encoder_and_lcd() {
        let f = fixture();
        let c = cfg(Regimen::Alone, 1);
        let trainer = Trainer::new(&f.model, &f.channel, &c, &f.train, Some(&f.test)).unwrap();
        let out = trainer.run().unwrap();
        let fresh = trainer.init_params().unwrap();
        assert_eq!(out.params.snapshot(&["dec1."]), fresh.snapshot(&["dec1."]));
        assert!(out.phase1.is_none());
        assert!(out.log.records.iter().all(|r| r.phase == 2 && r.regimen == "alone"));
    }

    #[test]
    fn divergence_aborts_with_location() {
        let f = fixture();
        let c = TrainConfig {
            learning_rate: 1e300,
            ..cfg(Regimen::Alone, 3)
        };
        let trainer = Trainer::new(&f.model, &f.channel, &c, &f.train, None).unwrap();
        match trainer.run() {
            Err(Error::NonFiniteLoss { regimen, phase, .. }) => {
                assert_eq!(regimen, "alone");
                assert_eq!(phase, 2);
            }
            other => panic!("expected an abort, got {other:?}"),
        }
    }
}
