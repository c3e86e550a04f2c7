use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use semcom::data::{write_ppm, Dataset, Split};
use semcom::metrics::{evaluate, reconstruct, to_csv, MetricsRecord};
use semcom::model::checkpoint::{from_bytes, to_bytes};
use semcom::model::{load_checkpoint_for, save_checkpoint, DecoderId, Model, ParameterSet};
use semcom::tensor::{set_backward_fault, OpKind};
use semcom::training::{Regimen, RunOutput, TrainConfig, TrainLog, Trainer};
use semcom::verify::{check_end_to_end, check_op, CheckResult, TOLERANCE};

use crate::config::{DataSource, ExperimentConfig};

/// Failure of a command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<semcom::Error> for CliError {
    fn from(e: semcom::Error) -> Self {
        match e {
            semcom::Error::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io(path))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io(path))
}

/// Reads `path`, or the defaults when no file is given.
pub fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a training run needs, built and checked before any output.
struct Setup {
    cfg: ExperimentConfig,
    model: Model,
    train: Dataset,
    test: Dataset,
}

impl Setup {
    fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let train = cfg.data.train.load(Split::Train)?;
        let test = cfg.data.test.load(Split::Test)?;
        // Surfaces extent and emptiness problems now rather than mid-run.
        Trainer::new(&model, &cfg.channel, &cfg.train, &train, Some(&test))?;
        Ok(Self {
            cfg,
            model,
            train,
            test,
        })
    }

    fn trainer<'a>(&'a self, train_cfg: &'a TrainConfig) -> CliResult<Trainer<'a>> {
        Ok(Trainer::new(
            &self.model,
            &self.cfg.channel,
            train_cfg,
            &self.train,
            Some(&self.test),
        )?)
    }
}

/// Runs phase 1 and returns its parameters as `phase1.ckpt` stores them
/// (32-bit). Phase 2 always starts from the stored form, so resuming from
/// the file reproduces a full run exactly.
fn phase1(trainer: &Trainer) -> CliResult<(ParameterSet, TrainLog)> {
    let mut params = trainer.init_params()?;
    let log = trainer.run_phase1(&mut params)?;
    Ok((from_bytes(&to_bytes(&params)?)?, log))
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub regimen: Option<String>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub from_phase1: Option<PathBuf>,
}

/// Trains one regimen. Writes `config.ini`, `train_log.csv`, `final.ckpt`
/// and, for two-stage regimens, `phase1.ckpt` and `phase2.ckpt`.
pub fn cmd_train(args: &TrainArgs) -> CliResult<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(name) = &args.regimen {
        cfg.train.regimen = name.parse::<Regimen>()?;
    }
    if let Some(seed) = args.seed {
        cfg.train.master_seed = seed;
    }
    let setup = Setup::new(cfg)?;
    let regimen = setup.cfg.train.regimen;
    let resume = match &args.from_phase1 {
        Some(path) => {
            if regimen.phase2_options().is_none() {
                return Err(CliError::Usage(format!(
                    "--from-phase1 needs a two-stage regimen, not {regimen}"
                )));
            }
            Some(load_checkpoint_for(path, &setup.cfg.model)?)
        }
        None => None,
    };

    let trainer = setup.trainer(&setup.cfg.train)?;
    let run = match resume {
        Some(p1) => trainer.continue_from_phase1(p1, TrainLog::default())?,
        None if regimen.phase2_options().is_some() => {
            let (p1, log) = phase1(&trainer)?;
            trainer.continue_from_phase1(p1, log)?
        }
        None => trainer.run()?,
    };
    write_run(&args.out, &setup.cfg, &run)?;

    let mut summary = format!("{regimen} seed {}:", setup.cfg.train.master_seed);
    for r in run.log.final_scores(2) {
        let _ = write!(summary, " {} dB {:.3}", r.snr_db.unwrap_or(f64::NAN), r.psnr_db);
    }
    Ok(summary)
}

fn write_run(out: &Path, cfg: &ExperimentConfig, run: &RunOutput) -> CliResult<()> {
    create_dir(out)?;
    write(&out.join("config.ini"), cfg.dump())?;
    if let Some(p1) = &run.phase1 {
        save_checkpoint(p1, &out.join("phase1.ckpt"))?;
        save_checkpoint(&run.params, &out.join("phase2.ckpt"))?;
    }
    save_checkpoint(&run.params, &out.join("final.ckpt"))?;
    write(&out.join("train_log.csv"), run.log.to_csv())
}

pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub ckpt: PathBuf,
    pub decoder: u8,
    pub snr: Vec<f64>,
    pub data: Option<String>,
    pub dump_images: Option<PathBuf>,
}

/// Sorted ascending; `+inf` (noiseless) goes last. NaN and repeats are
/// rejected.
pub fn sorted_snrs(snrs: &[f64]) -> CliResult<Vec<f64>> {
    if snrs.is_empty() {
        return Err(CliError::Usage("no SNR given".into()));
    }
    if let Some(bad) = snrs.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
        return Err(CliError::Usage(format!("invalid SNR {bad}")));
    }
    let mut out = snrs.to_vec();
    out.sort_by(f64::total_cmp);
    if out.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage("repeated SNR value".into()));
    }
    Ok(out)
}

/// Scores a checkpoint and returns the CSV text. Rows use regimen `eval`,
/// the eval seed, the decoder index as phase and epoch 0.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<String> {
    let cfg = load_config(args.config.as_deref())?;
    let which = DecoderId::from_index(args.decoder)?;
    let snrs = sorted_snrs(&args.snr)?;
    let source = match &args.data {
        Some(spec) => DataSource::parse(spec, 32).map_err(CliError::Usage)?,
        None => cfg.data.test.clone(),
    };
    let data = source.load(Split::Test)?;
    let (h, w) = data.extent();
    cfg.model.validate_image(h, w)?;
    let model = Model::new(cfg.model.clone())?;
    let params = load_checkpoint_for(&args.ckpt, &cfg.model)?;
    let eval_seed = cfg.channel.eval_seed;

    let scores = evaluate(&model, &params, which, &data, &snrs, eval_seed)?;
    let records: Vec<MetricsRecord> = scores
        .iter()
        .map(|s| s.record("eval", eval_seed, which.index(), 0))
        .collect();

    if let Some(dir) = &args.dump_images {
        create_dir(dir)?;
        for &snr in &snrs {
            let recon = reconstruct(&model, &params, which, &data, snr, eval_seed)?;
            for (i, img) in recon.iter().enumerate() {
                write_ppm(&dir.join(format!("{i}_{snr}.ppm")), img)?;
            }
        }
    }
    Ok(to_csv(&records))
}

pub struct CompareArgs {
    pub config: Option<PathBuf>,
    pub seeds: u64,
    pub out: PathBuf,
    pub plot_snr: f64,
}

/// Header of `compare.csv`.
pub const COMPARE_HEADER: &str = "regimen,snr_db,seeds,mean_psnr_db,std_psnr_db,lcd_epochs,encoder_epochs,total_epochs";

/// Header of `curves.csv`.
pub const CURVES_HEADER: &str = "regimen,snr_db,epoch,seeds,mean_psnr_db,std_psnr_db";

/// Decoder epochs behind one regimen's LCD: `(lcd, encoder, total)`, where
/// total counts every decoder epoch (each one also passes the encoder).
pub fn epoch_budget(regimen: Regimen, t: usize) -> (usize, usize, usize) {
    match regimen {
        Regimen::Alone => (t, t, t),
        Regimen::Iterative => (t, 2 * t, 2 * t),
        _ => (t, t, 2 * t),
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Output directory of one `(regimen, seed)` cell.
pub fn cell_dir(out: &Path, regimen: Regimen, seed: u64) -> PathBuf {
    out.join(regimen.name()).join(format!("seed{seed}"))
}

/// Plot-data series written by `cmd_compare`: convergence of the training
/// procedures, convergence with HCD knowledge reuse, and final PSNR by SNR.
const CONVERGENCE: [Regimen; 3] = [Regimen::Alone, Regimen::Iterative, Regimen::Proposed];
const REUSE: [Regimen; 4] = [
    Regimen::Proposed,
    Regimen::ProposedTransfer,
    Regimen::ProposedTransferFrozen,
    Regimen::ProposedKd,
];

/// Runs every regimen for seeds `0..k`. Phase 1 is trained once per seed
/// and shared by the two-stage regimens; each cell is bit-identical to the
/// matching `cmd_train` run.
pub fn cmd_compare(args: &CompareArgs) -> CliResult<String> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let cfg = load_config(args.config.as_deref())?;
    if !cfg.channel.snr_set_db.contains(&args.plot_snr) {
        return Err(CliError::Usage(format!(
            "plot SNR {} is not in the SNR set",
            args.plot_snr
        )));
    }
    let setup = Setup::new(cfg)?;
    create_dir(&args.out)?;
    write(&args.out.join("config.ini"), setup.cfg.dump())?;

    // Per-seed LCD PSNR by (regimen, snr bits, epoch), and at the final epoch.
    let mut lcd: BTreeMap<(Regimen, u64, usize), Vec<f64>> = BTreeMap::new();
    let mut finals: BTreeMap<(Regimen, u64), Vec<f64>> = BTreeMap::new();
    for seed in 0..args.seeds {
        let base = TrainConfig {
            master_seed: seed,
            regimen: Regimen::Proposed,
            ..setup.cfg.train.clone()
        };
        let (phase1, phase1_log) = phase1(&setup.trainer(&base)?)?;
        for regimen in Regimen::ALL {
            let train_cfg = TrainConfig {
                regimen,
                ..base.clone()
            };
            let trainer = setup.trainer(&train_cfg)?;
            let run = if regimen.phase2_options().is_some() {
                trainer.continue_from_phase1(phase1.clone(), phase1_log.clone())?
            } else {
                trainer.run()?
            };
            let cell_cfg = ExperimentConfig {
                train: train_cfg.clone(),
                ..setup.cfg.clone()
            };
            write_run(&cell_dir(&args.out, regimen, seed), &cell_cfg, &run)?;
            collect(&run.log, regimen, &mut lcd, &mut finals);
            eprintln!("{regimen} seed {seed} done");
        }
    }

    let t = setup.cfg.train.epochs_per_decoder;
    let snrs = {
        let mut s = setup.cfg.channel.snr_set_db.clone();
        s.sort_by(f64::total_cmp);
        s
    };
    let mut compare = format!("{COMPARE_HEADER}\n");
    let mut summary = String::new();
    for regimen in Regimen::ALL {
        let (l, e, total) = epoch_budget(regimen, t);
        for &snr in &snrs {
            let xs = finals.get(&(regimen, snr.to_bits())).map_or(&[][..], Vec::as_slice);
            let (mean, std) = mean_std(xs);
            let _ = writeln!(compare, "{regimen},{snr},{},{mean},{std},{l},{e},{total}", xs.len());
            if snr == args.plot_snr {
                let _ = writeln!(summary, "{:<26} {snr} dB  {mean:.3} ± {std:.3}", regimen.name());
            }
        }
    }
    write(&args.out.join("compare.csv"), &compare)?;

    let mut curves = format!("{CURVES_HEADER}\n");
    for ((regimen, snr_bits, epoch), xs) in &lcd {
        let (mean, std) = mean_std(xs);
        let _ = writeln!(
            curves,
            "{regimen},{},{epoch},{},{mean},{std}",
            f64::from_bits(*snr_bits),
            xs.len()
        );
    }
    write(&args.out.join("curves.csv"), &curves)?;

    let plots = args.out.join("plots");
    create_dir(&plots)?;
    let curve = |regimen: Regimen| -> String {
        lcd.iter()
            .filter(|((r, s, _), _)| *r == regimen && f64::from_bits(*s) == args.plot_snr)
            .map(|((_, _, epoch), xs)| format!("{epoch} {}\n", mean_std(xs).0))
            .collect()
    };
    for regimen in CONVERGENCE {
        write(&plots.join(format!("convergence_{regimen}.dat")), curve(regimen))?;
    }
    for regimen in REUSE {
        write(&plots.join(format!("reuse_{regimen}.dat")), curve(regimen))?;
    }
    for regimen in Regimen::ALL {
        let series: String = snrs
            .iter()
            .map(|&snr| format!("{snr} {}\n", mean_std(&finals[&(regimen, snr.to_bits())]).0))
            .collect();
        write(&plots.join(format!("snr_{regimen}.dat")), series)?;
    }
    Ok(summary)
}

/// Collects the LCD test rows (phase 2) of one run.
fn collect(
    log: &TrainLog,
    regimen: Regimen,
    lcd: &mut BTreeMap<(Regimen, u64, usize), Vec<f64>>,
    finals: &mut BTreeMap<(Regimen, u64), Vec<f64>>,
) {
    for r in &log.records {
        if let (2, Split::Test, Some(snr)) = (r.phase, r.split, r.snr_db) {
            lcd.entry((regimen, snr.to_bits(), r.epoch))
                .or_default()
                .push(r.psnr_db);
        }
    }
    for r in log.final_scores(2) {
        if let Some(snr) = r.snr_db {
            finals.entry((regimen, snr.to_bits())).or_default().push(r.psnr_db);
        }
    }
}

pub struct GradcheckArgs {
    pub seeds: u64,
    pub inject_fault: Option<String>,
}

/// Finite-difference check of every differentiable op plus the full
/// pipeline. Returns the report; fails with exit 1 if any check exceeds
/// the tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<String> {
    let fault = match &args.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown op `{name}`")))?),
        None => None,
    };
    set_backward_fault(fault);
    let results: semcom::Result<Vec<CheckResult>> = OpKind::DIFFERENTIABLE
        .into_iter()
        .map(|k| check_op(k, args.seeds))
        .chain(std::iter::once_with(|| check_end_to_end(0)))
        .collect();
    set_backward_fault(None);
    let results = results.map_err(|e| CliError::Check(format!("gradcheck could not run: {e}")))?;

    let mut report = String::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            report,
            "{:<16} {:>4} cases {:>6} coords  max rel err {:.3e}  {verdict}",
            r.name, r.cases, r.coordinates, r.max_rel_error
        );
    }
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one check");
    let _ = writeln!(
        report,
        "worst: {} {:.3e} (tolerance {TOLERANCE:e})",
        worst.name, worst.max_rel_error
    );
    if results.iter().all(CheckResult::passed) {
        Ok(report)
    } else {
        print!("{report}");
        Err(CliError::Check(format!(
            "gradcheck failed: worst op {} with error {:.3e}",
            worst.name, worst.max_rel_error
        )))
    }
}
