//! Subcommands. Each one resolves its configuration, echoes it as a single
//! `config: {json}` line on stdout, then does its work.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use qent::boundgen::{self, certify, BoundGenError, GenConfig};
use qent::linalg::{bell_phi_minus, min_pt_eigenvalue, realignment_ccnr, DensityMatrix};
use qent::pipeline::{
    self, evaluate, rotate_set, train_with_progress, ClassificationReport, Task, TrainConfig,
};
use qent::states::{derive_seed, horodecki_3x3, tiles_upb_state, Family, LabeledStateSet};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::resolve;
use crate::formats::{
    read_states, write_error_csv, write_jsonl, write_states, CertificationLine, Checkpoint,
    StateFileHeader,
};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "qent",
    version,
    about = "Autoencoder entanglement and discord classifier"
)]
pub struct Cli {
    /// TOML file with one table per command; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a family of random states into a QSD1 file.
    GenData(GenDataArgs),
    /// Write analytic states (Bell, Horodecki family, Tiles UPB).
    GenNamed(GenNamedArgs),
    /// Train an autoencoder and calibrate its threshold.
    Train(TrainArgs),
    /// Classify the states of one file.
    Classify(ClassifyArgs),
    /// Per-family accuracy over several labeled files.
    Eval(EvalArgs),
    /// Search for PPT states the classifier rejects.
    GenBound(GenBoundArgs),
    /// Print PPT and realignment values of stored states.
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    n: Option<usize>,
    /// Largest number of product terms in a mixed separable state.
    #[arg(long)]
    mmax: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedState {
    Bell,
    Horodecki,
    Tiles,
}

#[derive(Debug, Args, Serialize)]
pub struct GenNamedArgs {
    #[arg(long, value_enum)]
    state: Option<NamedState>,
    /// Horodecki parameters; comma separated.
    #[arg(long, value_delimiter = ',')]
    a: Option<Vec<f64>>,
    /// Horodecki sweep size when no `--a` is given: a_i = i/(count+1).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    task: Option<Task>,
    /// Training states; sampled from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    mmax: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Calibration set size.
    #[arg(long)]
    n_eps: Option<usize>,
    /// Largest mixture size of the calibration states; defaults to `--mmax`.
    #[arg(long)]
    cal_mmax: Option<usize>,
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    /// Local-unitary draws per state; 0 classifies the raw state.
    #[arg(long)]
    unitaries: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sets: Option<Vec<PathBuf>>,
    #[arg(long)]
    unitaries: Option<usize>,
    /// Conjugate every state by one random local unitary first.
    #[arg(long)]
    rotate: Option<bool>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenBoundArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Local-unitary draws used when certifying.
    #[arg(long)]
    unitaries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// State file; the certification report goes next to it as `.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Ppt,
    Ccnr,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    criteria: Option<Vec<Criterion>>,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => gen_data(resolve("gen-data", json!({"mmax": 2}), file, &a)?),
        Command::GenNamed(a) => gen_named(resolve("gen-named", json!({"count": 100}), file, &a)?),
        Command::Train(a) => train(resolve_train(file, &a)?),
        Command::Classify(a) => classify(resolve("classify", json!({"unitaries": 0}), file, &a)?),
        Command::Eval(a) => eval(resolve(
            "eval",
            json!({"unitaries": 0, "rotate": false}),
            file,
            &a,
        )?),
        Command::GenBound(a) => {
            gen_bound(resolve("gen-bound", json!({"unitaries": 1000}), file, &a)?)
        }
        Command::Verify(a) => verify(resolve(
            "verify",
            json!({"criteria": ["ppt", "ccnr"]}),
            file,
            &a,
        )?),
    }
}

fn echo(cfg: &impl Serialize) {
    println!(
        "config: {}",
        serde_json::to_string(cfg).expect("configs serialize")
    );
}

/// The given seed, or a fresh one from system entropy (printed).
fn seed_or_entropy(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::rng().random();
        println!("seed: {s} (drawn from system entropy)");
        s
    })
}

fn load_set(path: &Path) -> Result<LabeledStateSet, CliError> {
    let (h, states) = read_states(path)?;
    if states.is_empty() {
        return Err(CliError::Usage(format!("{}: no states", path.display())));
    }
    if h.dim_a != h.dim_b {
        return Err(CliError::Dimension(format!(
            "{}: {}x{} states, the classifier needs equal local dimensions",
            path.display(),
            h.dim_a,
            h.dim_b
        )));
    }
    Ok(LabeledStateSet {
        label: h.family,
        states,
        d: h.dim_a as usize,
        m_max: None,
        seed: h.seed,
    })
}

fn load_model(path: &Path) -> Result<(Checkpoint, pipeline::ThresholdRecord), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let thr = ckpt.threshold.ok_or_else(|| {
        CliError::Usage(format!("{}: checkpoint has no threshold", path.display()))
    })?;
    Ok((ckpt, thr))
}

fn check_dim(model_d: usize, set: &LabeledStateSet) -> Result<(), CliError> {
    if set.d != model_d {
        return Err(CliError::Dimension(format!(
            "model is for d = {model_d}, states have d = {}",
            set.d
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    d: usize,
    family: Family,
    n: usize,
    mmax: usize,
    seed: Option<u64>,
    out: PathBuf,
}

fn gen_data(mut cfg: GenDataConfig) -> Result<(), CliError> {
    if matches!(cfg.family, Family::Named | Family::BoundCandidate) {
        return Err(CliError::Usage(format!(
            "family '{}' has no sampler",
            cfg.family
        )));
    }
    if cfg.n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    cfg.seed = Some(seed_or_entropy(cfg.seed));
    echo(&cfg);
    let seed = cfg.seed.unwrap();
    let set = LabeledStateSet::generate(cfg.family, cfg.d, cfg.n, cfg.mmax, seed)?;
    write_states(
        &cfg.out,
        &StateFileHeader::new(cfg.d, cfg.d, cfg.n, cfg.family, seed),
        &set.states,
    )?;
    println!(
        "wrote {} {} states to {}",
        cfg.n,
        cfg.family,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenNamedConfig {
    state: NamedState,
    a: Option<Vec<f64>>,
    count: usize,
    out: PathBuf,
}

fn gen_named(cfg: GenNamedConfig) -> Result<(), CliError> {
    echo(&cfg);
    let (d, states) = match cfg.state {
        NamedState::Bell => (2, vec![bell_phi_minus()]),
        NamedState::Tiles => (3, vec![tiles_upb_state()]),
        NamedState::Horodecki => {
            let values = cfg.a.clone().unwrap_or_else(|| {
                (1..=cfg.count)
                    .map(|i| i as f64 / (cfg.count + 1) as f64)
                    .collect()
            });
            let states = values
                .iter()
                .map(|&a| horodecki_3x3(a))
                .collect::<Result<Vec<_>, _>>()?;
            (3, states)
        }
    };
    if states.is_empty() {
        return Err(CliError::Usage("no states requested".into()));
    }
    write_states(
        &cfg.out,
        &StateFileHeader::new(d, d, states.len(), Family::Named, 0),
        &states,
    )?;
    println!(
        "wrote {} named states to {}",
        states.len(),
        cfg.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCmdConfig {
    d: usize,
    task: Task,
    data: Option<PathBuf>,
    n: usize,
    mmax: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    n_eps: usize,
    cal_mmax: Option<usize>,
    l1: f64,
    seed: Option<u64>,
    out: PathBuf,
}

/// Train defaults depend on `--d` and `--task`, so they are resolved in two
/// passes.
fn resolve_train(file: Option<&Path>, a: &TrainArgs) -> Result<TrainCmdConfig, CliError> {
    #[derive(Deserialize)]
    struct Head {
        d: usize,
        task: Task,
    }
    let head: Head = {
        let v: serde_json::Value = resolve("train", json!({"task": "entanglement"}), file, a)?;
        serde_json::from_value(v).map_err(|e| CliError::Usage(format!("train: {e}")))?
    };
    let base = TrainConfig::new(head.d, head.task);
    let defaults = json!({
        "task": head.task,
        "n": base.n_samples,
        "mmax": base.m_max,
        "epochs": base.epochs,
        "batch": base.batch_size,
        "lr": base.learning_rate,
        "n_eps": base.threshold_set_size,
        "l1": base.l1_penalty,
    });
    resolve("train", defaults, file, a)
}

fn train(mut cfg: TrainCmdConfig) -> Result<(), CliError> {
    cfg.seed = Some(seed_or_entropy(cfg.seed));
    let data = match &cfg.data {
        Some(path) => {
            let set = load_set(path)?;
            if set.d != cfg.d {
                return Err(CliError::Dimension(format!(
                    "--d {} but {} holds d = {}",
                    cfg.d,
                    path.display(),
                    set.d
                )));
            }
            cfg.n = set.len();
            Some(set)
        }
        None => None,
    };
    echo(&cfg);
    let tc = TrainConfig {
        n_samples: cfg.n,
        m_max: cfg.mmax,
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        learning_rate: cfg.lr,
        threshold_set_size: cfg.n_eps,
        calibration_m_max: cfg.cal_mmax,
        seed: cfg.seed.unwrap(),
        l1_penalty: cfg.l1,
        ..TrainConfig::new(cfg.d, cfg.task)
    };
    tc.validate()?;
    let data = match data {
        Some(d) => d,
        None => tc.generate_training_set()?,
    };
    let outcome = train_with_progress(&tc, &data, |log| {
        eprintln!(
            "epoch {} loss {:.6} epsilon {:.6}",
            log.epoch, log.mean_loss, log.epsilon
        );
    })?;
    let ckpt = Checkpoint {
        model: outcome.model,
        config: Some(tc),
        threshold: Some(outcome.threshold),
        history: outcome.history,
    };
    ckpt.save(&cfg.out)?;
    println!("epsilon: {}", outcome.threshold.epsilon);
    println!("wrote checkpoint {}", cfg.out.display());
    Ok(())
}

fn print_report(r: &ClassificationReport) {
    println!("epsilon: {}", r.epsilon);
    for f in &r.families {
        println!(
            "accuracy {}: {:.4} ({}/{}, expected {})",
            f.family,
            f.accuracy,
            f.correct,
            f.total,
            f.expected.as_str()
        );
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyConfig {
    model: PathBuf,
    #[serde(rename = "in")]
    input: PathBuf,
    unitaries: usize,
    csv: Option<PathBuf>,
    seed: Option<u64>,
}

fn classify(mut cfg: ClassifyConfig) -> Result<(), CliError> {
    if cfg.unitaries > 0 {
        cfg.seed = Some(seed_or_entropy(cfg.seed));
    }
    echo(&cfg);
    let (ckpt, thr) = load_model(&cfg.model)?;
    let set = load_set(&cfg.input)?;
    check_dim(ckpt.model.spec().d, &set)?;
    let unitaries = (cfg.unitaries > 0).then(|| (cfg.unitaries, cfg.seed.unwrap()));
    let report = evaluate(&ckpt.model, &thr, std::slice::from_ref(&set), unitaries)?;
    for s in &report.samples {
        println!("{} {} {}", s.sample_index, s.error, s.label.as_str());
    }
    print_report(&report);
    if let Some(path) = &cfg.csv {
        write_error_csv(path, &report.samples)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    model: PathBuf,
    sets: Vec<PathBuf>,
    unitaries: usize,
    rotate: bool,
    csv: Option<PathBuf>,
    seed: Option<u64>,
}

fn eval(mut cfg: EvalConfig) -> Result<(), CliError> {
    if cfg.unitaries > 0 || cfg.rotate {
        cfg.seed = Some(seed_or_entropy(cfg.seed));
    }
    echo(&cfg);
    if cfg.sets.is_empty() {
        return Err(CliError::Usage("--sets needs at least one file".into()));
    }
    let (ckpt, thr) = load_model(&cfg.model)?;
    let mut sets = Vec::with_capacity(cfg.sets.len());
    for (i, path) in cfg.sets.iter().enumerate() {
        let set = load_set(path)?;
        check_dim(ckpt.model.spec().d, &set)?;
        sets.push(if cfg.rotate {
            rotate_set(&set, derive_seed(cfg.seed.unwrap(), i as u64))?
        } else {
            set
        });
    }
    // Rotation and unitary voting draw from separate sub-seeds.
    let unitaries =
        (cfg.unitaries > 0).then(|| (cfg.unitaries, derive_seed(cfg.seed.unwrap(), u64::MAX)));
    let report = evaluate(&ckpt.model, &thr, &sets, unitaries)?;
    print_report(&report);
    if let Some(path) = &cfg.csv {
        write_error_csv(path, &report.samples)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenBoundConfig {
    model: PathBuf,
    kappa: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
    restarts: Option<usize>,
    unitaries: usize,
    seed: Option<u64>,
    out: PathBuf,
}

fn gen_bound(mut cfg: GenBoundConfig) -> Result<(), CliError> {
    let (ckpt, thr) = load_model(&cfg.model)?;
    let base = GenConfig::for_dimension(thr.d);
    cfg.kappa.get_or_insert(base.kappa);
    cfg.steps.get_or_insert(base.steps);
    cfg.lr.get_or_insert(base.learning_rate);
    cfg.restarts.get_or_insert(base.restarts);
    cfg.seed = Some(seed_or_entropy(cfg.seed));
    echo(&cfg);
    let gc = GenConfig {
        kappa: cfg.kappa.unwrap(),
        steps: cfg.steps.unwrap(),
        learning_rate: cfg.lr.unwrap(),
        restarts: cfg.restarts.unwrap(),
        seed: cfg.seed.unwrap(),
        ..base
    };
    let attempts = boundgen::generate(&ckpt.model, &thr, &gc, |r| {
        let (res, ok) = match r {
            Ok(r) => (r, true),
            Err(BoundGenError::NoFeasibleState(r)) => (r.as_ref(), false),
            Err(_) => return,
        };
        eprintln!(
            "restart {}: feasible {} err {:.6} (epsilon {:.6}) min_pt_eig {:.3e} ccnr {:.6}",
            res.restart, ok, res.reconstruction_error, res.epsilon, res.min_pt_eigenvalue, res.ccnr
        );
    })?;
    let mut states = Vec::new();
    let mut lines = Vec::new();
    for attempt in attempts {
        let r = match attempt {
            Ok(r) => r,
            Err(BoundGenError::NoFeasibleState(r)) => *r,
            Err(e) => return Err(e.into()),
        };
        let rho = r.state().clone();
        let rep = certify(
            &rho,
            &ckpt.model,
            &thr,
            cfg.unitaries,
            derive_seed(r.seed, 1),
        )?;
        lines.push(CertificationLine {
            index: states.len(),
            restart: r.restart,
            seed: r.seed,
            projected: r.projected,
            best_step: r.best_step,
            feasible: r.feasible,
            verdict: rep.verdict.describe().to_string(),
            certification: rep,
        });
        states.push(rho);
    }
    let header = StateFileHeader::new(
        thr.d,
        thr.d,
        states.len(),
        Family::BoundCandidate,
        cfg.seed.unwrap(),
    );
    write_states(&cfg.out, &header, &states)?;
    let report = cfg.out.with_extension("jsonl");
    write_jsonl(&report, &lines)?;
    for l in &lines {
        println!(
            "state {}: feasible {} err {} min_pt_eig {} ccnr {} verdict: {}",
            l.index,
            l.feasible,
            l.certification.reconstruction_error,
            l.certification.min_pt_eigenvalue,
            l.certification.ccnr,
            l.verdict
        );
    }
    println!("wrote {} and {}", cfg.out.display(), report.display());
    if lines.iter().any(|l| l.feasible) {
        Ok(())
    } else {
        Err(CliError::NoFeasible(format!(
            "no PPT state above the threshold in {} restarts; diagnostics in {}",
            gc.restarts,
            report.display()
        )))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyConfig {
    #[serde(rename = "in")]
    input: PathBuf,
    criteria: Vec<Criterion>,
}

/// Criterion values of one state, as printed by `verify`.
pub fn verify_line(
    index: usize,
    rho: &DensityMatrix,
    criteria: &[Criterion],
) -> Result<String, CliError> {
    let fail = |e: qent::linalg::LinalgError| CliError::Failed(e.to_string());
    let mut parts = Vec::new();
    for c in criteria {
        match c {
            Criterion::Ppt => {
                let m = min_pt_eigenvalue(rho).map_err(fail)?;
                parts.push(format!(
                    "ppt: {}, min_pt_eig: {}",
                    m >= -boundgen::FEASIBILITY_TOL,
                    round12(m)
                ));
            }
            Criterion::Ccnr => {
                let v = realignment_ccnr(rho).map_err(fail)?;
                parts.push(format!("ccnr: {}, ccnr_violated: {}", round12(v), v > 1.0));
            }
        }
    }
    Ok(format!("state {index}: {}", parts.join(", ")))
}

/// Rounds to twelve decimals so that analytic values print cleanly.
fn round12(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn verify(cfg: VerifyConfig) -> Result<(), CliError> {
    echo(&cfg);
    if cfg.criteria.is_empty() {
        return Err(CliError::Usage(
            "--criteria needs at least one entry".into(),
        ));
    }
    let (_, states) = read_states(&cfg.input)?;
    for (i, rho) in states.iter().enumerate() {
        println!("{}", verify_line(i, rho, &cfg.criteria)?);
    }
    Ok(())
}
