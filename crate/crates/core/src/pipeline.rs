//! Training, threshold calibration, classification and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cae::{builtin_spec, encode_batch, CaeError, CaeModel, Mode};
use crate::linalg::{DensityMatrix, LinalgError};
use crate::nn::{adam_step, AdamState, Graph, NnError, Tensor};
use crate::states::{
    derive_seed, haar_unitary, local_unitary_conjugate, Family, LabeledStateSet, StateError,
};

/// Samples per inference chunk.
const INFER_CHUNK: usize = 256;

// Sub-seed purposes.
const SEED_INIT: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_DROPOUT: u64 = 3;
const SEED_CALIBRATION: u64 = 1000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("training loss diverged at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("state side {found} does not match the model's {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty state set")]
    EmptySet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("the {task:?} task cannot train on {family} states")]
    WrongTrainingFamily { task: Task, family: Family },
    #[error(transparent)]
    Cae(#[from] CaeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// In-class = separable.
    Entanglement,
    /// In-class = classical-classical (zero discord).
    Discord,
}

impl Task {
    /// Family the autoencoder is trained and calibrated on.
    pub fn training_family(self) -> Family {
        match self {
            Task::Entanglement => Family::MixSep,
            Task::Discord => Family::Cc,
        }
    }

    /// Ground-truth label of a family under this task. Named states are the
    /// entangled reference states, hence out of class for both tasks.
    pub fn expected_label(self, family: Family) -> Label {
        let inside = match self {
            Task::Entanglement => matches!(
                family,
                Family::MixSep | Family::Cc | Family::Cq | Family::Qc
            ),
            Task::Discord => family == Family::Cc,
        };
        if inside {
            Label::InClass
        } else {
            Label::OutOfClass
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ent" | "entanglement" => Ok(Task::Entanglement),
            "discord" => Ok(Task::Discord),
            _ => Err(format!("unknown task '{s}' (expected ent or discord)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    InClass,
    OutOfClass,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::InClass => "in_class",
            Label::OutOfClass => "out_of_class",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub task: Task,
    /// Training set size N_S.
    pub n_samples: usize,
    /// Largest mixture size of separable training states.
    pub m_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Calibration set size N_ε.
    pub threshold_set_size: usize,
    /// Mixture size used for calibration states; defaults to `m_max`.
    pub calibration_m_max: Option<usize>,
    pub seed: u64,
    /// Strength of the L1 penalty on convolution weights (sum of |w|).
    pub l1_penalty: f64,
}

impl TrainConfig {
    /// Defaults for a task: batch 128, 20 epochs (1 for discord), lr 1e-4,
    /// N_S = 50000, N_ε = 2000, M_max = 2.
    pub fn new(d: usize, task: Task) -> Self {
        Self {
            d,
            task,
            n_samples: 50_000,
            m_max: 2,
            epochs: match task {
                Task::Entanglement => 20,
                Task::Discord => 1,
            },
            batch_size: 128,
            learning_rate: 1e-4,
            threshold_set_size: 2000,
            calibration_m_max: None,
            seed: 0,
            l1_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.into()));
        if !(2..=7).contains(&self.d) {
            return bad("d must be in 2..=7");
        }
        if self.n_samples == 0
            || self.threshold_set_size == 0
            || self.epochs == 0
            || self.batch_size == 0
        {
            return bad("n_samples, threshold_set_size, epochs and batch_size must be >= 1");
        }
        if self.m_max == 0 || self.calibration_m_max == Some(0) {
            return bad("m_max must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l1_penalty >= 0.0 && self.l1_penalty.is_finite()) {
            return bad("l1_penalty must be non-negative");
        }
        Ok(())
    }

    fn calibration_m_max(&self) -> usize {
        self.calibration_m_max.unwrap_or(self.m_max)
    }

    /// Seed of the training set generated for this configuration.
    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, 0)
    }

    /// In-class training states drawn from [`TrainConfig::dataset_seed`].
    pub fn generate_training_set(&self) -> Result<LabeledStateSet, PipelineError> {
        self.validate()?;
        Ok(LabeledStateSet::generate(
            self.task.training_family(),
            self.d,
            self.n_samples,
            self.m_max,
            self.dataset_seed(),
        )?)
    }
}

/// ε_d with the provenance of its calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub d: usize,
    pub task: Task,
    pub epsilon: f64,
    pub n_eps: usize,
    pub m_max: usize,
    pub calibration_seed: u64,
    /// Zero-based epoch after which the threshold was computed.
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub epsilon: f64,
}

pub struct TrainOutcome {
    pub model: CaeModel<f32>,
    pub threshold: ThresholdRecord,
    pub history: Vec<EpochLog>,
}

/// Trains an autoencoder on in-class states only.
///
/// The threshold is recomputed at the end of every epoch; the returned one
/// belongs to the final epoch.
pub fn train(cfg: &TrainConfig, data: &LabeledStateSet) -> Result<TrainOutcome, PipelineError> {
    train_with_progress(cfg, data, |_| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    data: &LabeledStateSet,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if data.label != cfg.task.training_family() {
        return Err(PipelineError::WrongTrainingFamily {
            task: cfg.task,
            family: data.label,
        });
    }
    if data.is_empty() {
        return Err(PipelineError::EmptySet);
    }
    check_dims(cfg.d, &data.states)?;
    let mut model = CaeModel::<f32>::new(builtin_spec(cfg.d)?, derive_seed(cfg.seed, SEED_INIT))?;
    let n = cfg.d * cfg.d;
    let per = 2 * n * n;
    let encoded = encode_batch::<f32>(&data.states)?.into_data();

    let sizes: Vec<usize> = model.params().iter().map(Tensor::len).collect();
    let mut adam = AdamState::new(cfg.learning_rate, &sizes);
    let penalized: Vec<bool> = model
        .param_names()
        .iter()
        .map(|s| s.ends_with("weight"))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_DROPOUT));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut threshold = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            // A lone trailing sample cannot feed training-mode batch norm.
            if batch_idx.len() < 2 && order.len() >= 2 {
                continue;
            }
            let mut xb = Vec::with_capacity(batch_idx.len() * per);
            for &i in batch_idx {
                xb.extend_from_slice(&encoded[i * per..(i + 1) * per]);
            }
            let x = Tensor::from_vec(&[batch_idx.len(), 2, n, n], xb)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let fwd = model.build(&mut g, xv, Mode::Train, true, &mut dropout_rng)?;
            let recon = g.l1_loss(fwd.output, xv)?;
            let mut loss = recon;
            if cfg.l1_penalty > 0.0 {
                for (&p, _) in fwd.params.iter().zip(&penalized).filter(|(_, &pen)| pen) {
                    let a = g.abs_sum(p);
                    let s = g.scale(a, cfg.l1_penalty as f32);
                    loss = g.add(loss, s)?;
                }
            }
            let recon_value = g.value(recon).item() as f64;
            if !g.value(loss).item().is_finite() {
                return Err(PipelineError::DivergedLoss { epoch, batch: bi });
            }
            g.backward(loss)?;
            let grads: Vec<Vec<f32>> = fwd
                .params
                .iter()
                .zip(&sizes)
                .map(|(&v, &len)| g.grad(v).map_or_else(|| vec![0.0; len], <[f32]>::to_vec))
                .collect();
            if grads.iter().any(|gr| gr.iter().any(|v| !v.is_finite())) {
                return Err(PipelineError::DivergedLoss { epoch, batch: bi });
            }
            model.apply_batch_stats(&fwd);
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            let mut param_refs: Vec<&mut [f32]> = model
                .params_mut()
                .iter_mut()
                .map(Tensor::data_mut)
                .collect();
            adam_step(&mut param_refs, &grad_refs, &mut adam)?;
            loss_sum += recon_value * batch_idx.len() as f64;
            seen += batch_idx.len();
        }
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(PipelineError::DivergedLoss { epoch, batch: 0 });
        }
        let record = compute_threshold(&model, cfg, epoch)?;
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            epsilon: record.epsilon,
        };
        progress(&log);
        history.push(log);
        threshold = Some(record);
    }
    Ok(TrainOutcome {
        model,
        threshold: threshold.expect("at least one epoch"),
        history,
    })
}

fn check_dims(d: usize, states: &[DensityMatrix]) -> Result<(), PipelineError> {
    let expected = d * d;
    for rho in states {
        if rho.side() != expected || rho.dim_a() != d {
            return Err(PipelineError::DimensionMismatch {
                expected,
                found: rho.side(),
            });
        }
    }
    Ok(())
}

/// Draws `N_ε` fresh in-class states and takes the largest reconstruction
/// error.
pub fn compute_threshold(
    model: &CaeModel<f32>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ThresholdRecord, PipelineError> {
    let calibration_seed = derive_seed(cfg.seed, SEED_CALIBRATION + epoch as u64);
    let m_max = cfg.calibration_m_max();
    threshold_from_seed(
        model,
        cfg.task,
        cfg.threshold_set_size,
        m_max,
        calibration_seed,
        epoch,
    )
}

/// Recomputes ε_d from the provenance stored in a record.
pub fn recompute_threshold(
    model: &CaeModel<f32>,
    record: &ThresholdRecord,
) -> Result<f64, PipelineError> {
    Ok(threshold_from_seed(
        model,
        record.task,
        record.n_eps,
        record.m_max,
        record.calibration_seed,
        record.epoch,
    )?
    .epsilon)
}

fn threshold_from_seed(
    model: &CaeModel<f32>,
    task: Task,
    n_eps: usize,
    m_max: usize,
    calibration_seed: u64,
    epoch: usize,
) -> Result<ThresholdRecord, PipelineError> {
    let d = model.spec().d;
    let set = LabeledStateSet::generate(task.training_family(), d, n_eps, m_max, calibration_seed)?;
    let errors = reconstruction_errors(model, &set.states)?;
    let epsilon = errors.iter().copied().fold(0.0, f64::max);
    Ok(ThresholdRecord {
        d,
        task,
        epsilon,
        n_eps,
        m_max,
        calibration_seed,
        epoch,
    })
}

/// Eval-mode reconstruction error of every state: the mean absolute
/// difference between the raw decoder output and `ρ` over all `2n²` real
/// entries, computed in double precision against the original state.
pub fn reconstruction_errors(
    model: &CaeModel<f32>,
    states: &[DensityMatrix],
) -> Result<Vec<f64>, PipelineError> {
    check_dims(model.spec().d, states)?;
    let chunks: Vec<Result<Vec<f64>, PipelineError>> = states
        .par_chunks(INFER_CHUNK)
        .map(|chunk| {
            let x = encode_batch::<f32>(chunk)?;
            let y = model.infer(&x)?;
            let n = chunk[0].side();
            let per = 2 * n * n;
            Ok(chunk
                .iter()
                .zip(y.data().chunks(per))
                .map(|(rho, out)| {
                    let m = rho.matrix().as_slice();
                    let re: f64 = m
                        .iter()
                        .zip(&out[..n * n])
                        .map(|(z, &o)| (o as f64 - z.re).abs())
                        .sum();
                    let im: f64 = m
                        .iter()
                        .zip(&out[n * n..])
                        .map(|(z, &o)| (o as f64 - z.im).abs())
                        .sum();
                    (re + im) / per as f64
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(states.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `InClass` iff `error < ε`.
pub fn label_for(error: f64, epsilon: f64) -> Label {
    if error < epsilon {
        Label::InClass
    } else {
        Label::OutOfClass
    }
}

pub fn classify(
    model: &CaeModel<f32>,
    threshold: &ThresholdRecord,
    rho: &DensityMatrix,
) -> Result<(Label, f64), PipelineError> {
    let e = reconstruction_errors(model, std::slice::from_ref(rho))?[0];
    Ok((label_for(e, threshold.epsilon), e))
}

/// Median of a non-empty list (mean of the two central values for even
/// lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Verdict after `K` random local-unitary conjugations.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryVerdict {
    pub label: Label,
    pub median_error: f64,
    /// Error of each conjugated state, in draw order.
    pub errors: Vec<f64>,
}

/// Draws `k` Haar pairs `(U_A, U_B)` and classifies by the median error of
/// the conjugated states: `OutOfClass` iff the median exceeds ε.
pub fn classify_with_unitaries<R: Rng + ?Sized>(
    model: &CaeModel<f32>,
    threshold: &ThresholdRecord,
    rho: &DensityMatrix,
    k: usize,
    rng: &mut R,
) -> Result<UnitaryVerdict, PipelineError> {
    if k == 0 {
        return Err(PipelineError::InvalidConfig("K must be >= 1".into()));
    }
    let rotated = (0..k)
        .map(|_| {
            let ua = haar_unitary(rho.dim_a(), rng);
            let ub = haar_unitary(rho.dim_b(), rng);
            local_unitary_conjugate(rho, &ua, &ub)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(verdict_from_errors(
        reconstruction_errors(model, &rotated)?,
        threshold.epsilon,
    ))
}

fn verdict_from_errors(errors: Vec<f64>, epsilon: f64) -> UnitaryVerdict {
    let m = median(&errors);
    UnitaryVerdict {
        label: if m > epsilon {
            Label::OutOfClass
        } else {
            Label::InClass
        },
        median_error: m,
        errors,
    }
}

/// Per-sample classification outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_index: usize,
    pub family: Family,
    pub error: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAccuracy {
    pub family: Family,
    pub expected: Label,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub task: Task,
    pub epsilon: f64,
    /// Number of local-unitary draws per sample; 0 for raw classification.
    pub unitaries: usize,
    pub vote_rule: String,
    pub samples: Vec<SampleResult>,
    pub families: Vec<FamilyAccuracy>,
}

impl ClassificationReport {
    pub fn accuracy(&self, family: Family) -> Option<f64> {
        self.families
            .iter()
            .find(|f| f.family == family)
            .map(|f| f.accuracy)
    }
}

/// Per-family accuracies from labeled samples.
pub fn aggregate(task: Task, samples: &[SampleResult]) -> Vec<FamilyAccuracy> {
    let mut acc: BTreeMap<u32, (Family, usize, usize)> = BTreeMap::new();
    for s in samples {
        let e = acc.entry(s.family.tag()).or_insert((s.family, 0, 0));
        e.1 += 1;
        e.2 += usize::from(s.label == task.expected_label(s.family));
    }
    acc.into_values()
        .map(|(family, total, correct)| FamilyAccuracy {
            family,
            expected: task.expected_label(family),
            total,
            correct,
            accuracy: correct as f64 / total as f64,
        })
        .collect()
}

/// Classifies every state of every set. With `unitaries = Some((k, seed))`
/// each sample is judged by [`classify_with_unitaries`] using an RNG derived
/// from `(seed, running sample index)`.
pub fn evaluate(
    model: &CaeModel<f32>,
    threshold: &ThresholdRecord,
    sets: &[LabeledStateSet],
    unitaries: Option<(usize, u64)>,
) -> Result<ClassificationReport, PipelineError> {
    if sets.is_empty() || sets.iter().any(LabeledStateSet::is_empty) {
        return Err(PipelineError::EmptySet);
    }
    let d = model.spec().d;
    for s in sets {
        check_dims(d, &s.states)?;
    }
    let mut samples = Vec::new();
    let mut index = 0;
    for set in sets {
        let errors_labels: Vec<(f64, Label)> = match unitaries {
            None => reconstruction_errors(model, &set.states)?
                .into_iter()
                .map(|e| (e, label_for(e, threshold.epsilon)))
                .collect(),
            Some((k, seed)) => set
                .states
                .iter()
                .enumerate()
                .map(|(i, rho)| {
                    let mut rng = crate::states::item_rng(seed, (index + i) as u64);
                    classify_with_unitaries(model, threshold, rho, k, &mut rng)
                        .map(|v| (v.median_error, v.label))
                })
                .collect::<Result<_, _>>()?,
        };
        for (e, l) in errors_labels {
            samples.push(SampleResult {
                sample_index: index,
                family: set.label,
                error: e,
                label: l,
            });
            index += 1;
        }
    }
    let families = aggregate(threshold.task, &samples);
    Ok(ClassificationReport {
        task: threshold.task,
        epsilon: threshold.epsilon,
        unitaries: unitaries.map_or(0, |(k, _)| k),
        vote_rule: if unitaries.is_some() {
            "median".into()
        } else {
            "raw".into()
        },
        samples,
        families,
    })
}

/// Applies one independent random local unitary to every state of a set.
pub fn rotate_set(set: &LabeledStateSet, seed: u64) -> Result<LabeledStateSet, PipelineError> {
    let states = set
        .states
        .par_iter()
        .enumerate()
        .map(|(i, rho)| {
            let mut rng = crate::states::item_rng(seed, i as u64);
            let ua = haar_unitary(rho.dim_a(), &mut rng);
            let ub = haar_unitary(rho.dim_b(), &mut rng);
            local_unitary_conjugate(rho, &ua, &ub)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabeledStateSet {
        states,
        ..set.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::bell_phi_minus;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            n_samples: 512,
            epochs: 2,
            batch_size: 32,
            threshold_set_size: 32,
            learning_rate: 1e-3,
            seed: 11,
            ..TrainConfig::new(3, Task::Entanglement)
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        let mut c = tiny_cfg();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.d = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = tiny_cfg();
        let data = cfg.generate_training_set().unwrap();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.threshold, b.threshold);
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.threshold.epsilon > 0.0);
        assert_eq!(a.history.len(), 2);

        // The training objective on a held-out batch, same dropout masks.
        let held = LabeledStateSet::generate(Family::MixSep, 3, 64, 2, 999).unwrap();
        let batch = encode_batch::<f32>(&held.states).unwrap();
        let loss = |model: &CaeModel<f32>| {
            let mut m = model.clone();
            let out = m
                .forward(&batch, Mode::Train, &mut crate::states::item_rng(5, 0))
                .unwrap();
            out.data()
                .iter()
                .zip(batch.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
        };
        let fresh =
            CaeModel::<f32>::new(builtin_spec(3).unwrap(), derive_seed(cfg.seed, SEED_INIT))
                .unwrap();
        let (before, after) = (loss(&fresh), loss(&a.model));
        assert!(after < before, "{after} !< {before}, {:?}", a.history);
        assert_eq!(
            recompute_threshold(&a.model, &a.threshold).unwrap(),
            a.threshold.epsilon
        );
    }

    #[test]
    fn training_rejects_wrong_family() {
        let cfg = tiny_cfg();
        let data = LabeledStateSet::generate(Family::Cc, 3, 4, 2, 0).unwrap();
        assert!(matches!(
            train(&cfg, &data),
            Err(PipelineError::WrongTrainingFamily { .. })
        ));
    }

    #[test]
    fn threshold_is_max_of_calibration_errors() {
        let model = CaeModel::<f32>::new(builtin_spec(3).unwrap(), 1).unwrap();
        let mut cfg = tiny_cfg();
        cfg.threshold_set_size = 1;
        let rec = compute_threshold(&model, &cfg, 0).unwrap();
        let set = LabeledStateSet::generate(Family::MixSep, 3, 1, cfg.m_max, rec.calibration_seed)
            .unwrap();
        assert_eq!(
            rec.epsilon,
            reconstruction_errors(&model, &set.states).unwrap()[0]
        );

        cfg.threshold_set_size = 50;
        let rec = compute_threshold(&model, &cfg, 3).unwrap();
        let set = LabeledStateSet::generate(Family::MixSep, 3, 50, cfg.m_max, rec.calibration_seed)
            .unwrap();
        assert!(reconstruction_errors(&model, &set.states)
            .unwrap()
            .iter()
            .all(|&e| e <= rec.epsilon));
    }

    #[test]
    fn labels_depend_only_on_the_comparison() {
        for (e, eps) in [(0.1, 0.2), (0.3, 0.2), (0.2, 0.2)] {
            assert_eq!(label_for(e, eps), label_for(7.0 * e, 7.0 * eps));
        }
        assert_eq!(label_for(0.2, 0.2), Label::OutOfClass);
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let v = verdict_from_errors(vec![0.1, 0.5, 0.6], 0.4);
        assert_eq!(v.label, Label::OutOfClass);
    }

    #[test]
    fn unitary_classification_trace() {
        let model = CaeModel::<f32>::new(builtin_spec(2).unwrap(), 1).unwrap();
        let rec = ThresholdRecord {
            d: 2,
            task: Task::Entanglement,
            epsilon: 0.05,
            n_eps: 1,
            m_max: 2,
            calibration_seed: 0,
            epoch: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = classify_with_unitaries(&model, &rec, &bell_phi_minus(), 7, &mut rng).unwrap();
        assert_eq!(v.errors.len(), 7);
        assert!(v.errors.iter().all(|&e| e >= 0.0));
        assert!(classify_with_unitaries(&model, &rec, &bell_phi_minus(), 0, &mut rng).is_err());

        // Identity rotations reduce to raw classification.
        let id = crate::linalg::ComplexMatrix::identity(2);
        let rho = bell_phi_minus();
        let same = local_unitary_conjugate(&rho, &id, &id).unwrap();
        let raw = classify(&model, &rec, &rho).unwrap();
        let errs = reconstruction_errors(&model, &[same]).unwrap();
        assert_eq!(verdict_from_errors(errs, rec.epsilon).median_error, raw.1);
    }

    #[test]
    fn evaluate_semantics() {
        let model = CaeModel::<f32>::new(builtin_spec(2).unwrap(), 1).unwrap();
        let set = LabeledStateSet::generate(Family::MixSep, 2, 10, 2, 1).unwrap();
        let rec = ThresholdRecord {
            d: 2,
            task: Task::Entanglement,
            epsilon: f64::MAX,
            n_eps: 1,
            m_max: 2,
            calibration_seed: 0,
            epoch: 0,
        };
        let r = evaluate(&model, &rec, std::slice::from_ref(&set), None).unwrap();
        assert_eq!(r.accuracy(Family::MixSep), Some(1.0));
        assert_eq!(r.samples.len(), 10);
        let empty = LabeledStateSet {
            states: vec![],
            ..set.clone()
        };
        assert!(matches!(
            evaluate(&model, &rec, &[empty], None),
            Err(PipelineError::EmptySet)
        ));
        let wrong = LabeledStateSet::generate(Family::MixSep, 3, 2, 2, 1).unwrap();
        assert!(matches!(
            evaluate(&model, &rec, &[wrong], None),
            Err(PipelineError::DimensionMismatch { .. })
        ));
        assert_eq!(
            Task::Discord.expected_label(Family::MixSep),
            Label::OutOfClass
        );
        assert_eq!(Task::Discord.expected_label(Family::Cc), Label::InClass);
        assert_eq!(
            Task::Entanglement.expected_label(Family::Npt),
            Label::OutOfClass
        );
    }
}
