//! Gradient-ascent search for PPT states that a trained autoencoder fails to
//! reconstruct, and their certification.
//!
//! A candidate is a softmax-weighted mixture of `κ` branches
//! `ρ_j = H_j H_j† / Tr(H_j H_j†)` with `H_j = R_j + i I_j` free real
//! `n × n` matrices (`n = d²`). Complex products are carried as pairs of
//! real matrices:
//! `Re(H H†) = R Rᵀ + I Iᵀ`, `Im(H H†) = I Rᵀ − R Iᵀ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cae::{encode_state, CaeError, CaeModel, Mode};
use crate::linalg::{
    elementwise_l1, min_pt_eigenvalue, partial_transpose_matrix, realignment_ccnr, ComplexMatrix,
    DensityMatrix, LinalgError,
};
use crate::nn::{adam_step, AdamState, Graph, NnError, Tensor, Var};
use crate::pipeline::{
    classify_with_unitaries, reconstruction_errors, Label, PipelineError, ThresholdRecord,
};
use crate::states::derive_seed;

/// Minimum PT eigenvalue accepted as PPT for generated states.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Branch traces below this are treated as degenerate.
pub const DEGENERATE_TRACE: f64 = 1e-12;
/// Standard deviation of the initial noise on `R_j` and `I_j`.
pub const INIT_SIGMA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BoundGenError {
    #[error("branch {0} has a vanishing trace")]
    DegenerateBranch(usize),
    #[error("no PPT state with error above the threshold was found")]
    NoFeasibleState(Box<GenerationResult>),
    #[error("model is for local dimension {model}, threshold for {threshold}")]
    DimensionMismatch { model: usize, threshold: usize },
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Cae(#[from] CaeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Trainable generator parameters φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Local dimension; matrices are `d² × d²`.
    pub d: usize,
    pub kappa: usize,
    /// Row-major `R_j`, one per branch.
    pub r: Vec<Vec<f64>>,
    /// Row-major `I_j`, one per branch.
    pub i: Vec<Vec<f64>>,
    /// Mixture logits.
    pub z: Vec<f64>,
}

impl GeneratorParams {
    /// `R_j = 𝟙 + N(0, σ²)`, `I_j = N(0, σ²)`, `z = 0`.
    pub fn random<R: Rng + ?Sized>(
        d: usize,
        kappa: usize,
        rng: &mut R,
    ) -> Result<Self, BoundGenError> {
        if kappa == 0 || d < 2 {
            return Err(BoundGenError::InvalidConfig(format!(
                "d = {d}, kappa = {kappa}"
            )));
        }
        let n = d * d;
        let mut p = Self {
            d,
            kappa,
            r: Vec::with_capacity(kappa),
            i: Vec::with_capacity(kappa),
            z: vec![0.0; kappa],
        };
        for j in 0..kappa {
            p.r.push(vec![0.0; n * n]);
            p.i.push(vec![0.0; n * n]);
            p.randomize_branch(j, rng);
        }
        Ok(p)
    }

    /// The branch `H = 𝟙`, weight logits zero.
    pub fn identity(d: usize, kappa: usize) -> Self {
        let n = d * d;
        let eye: Vec<f64> = (0..n * n)
            .map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        Self {
            d,
            kappa,
            r: vec![eye; kappa],
            i: vec![vec![0.0; n * n]; kappa],
            z: vec![0.0; kappa],
        }
    }

    pub fn side(&self) -> usize {
        self.d * self.d
    }

    fn randomize_branch<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let n = self.side();
        for k in 0..n * n {
            let diag = if k % (n + 1) == 0 { 1.0 } else { 0.0 };
            self.r[j][k] = diag + INIT_SIGMA * rng.sample::<f64, _>(StandardNormal);
            self.i[j][k] = INIT_SIGMA * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.kappa + 1);
        for (r, i) in self.r.iter_mut().zip(self.i.iter_mut()) {
            out.push(r);
            out.push(i);
        }
        out.push(&mut self.z);
        out
    }

    fn sizes(&self) -> Vec<usize> {
        let n = self.side();
        let mut s = vec![n * n; 2 * self.kappa];
        s.push(self.kappa);
        s
    }

    pub fn validate(&self) -> Result<(), BoundGenError> {
        let n = self.side();
        let ok = self.kappa >= 1
            && self.r.len() == self.kappa
            && self.i.len() == self.kappa
            && self.z.len() == self.kappa
            && self.r.iter().chain(&self.i).all(|m| m.len() == n * n)
            && self
                .r
                .iter()
                .chain(&self.i)
                .flatten()
                .chain(&self.z)
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(BoundGenError::InvalidConfig(
                "malformed or non-finite generator parameters".into(),
            ))
        }
    }
}

fn transpose_index(n: usize) -> Vec<usize> {
    (0..n * n).map(|k| (k % n) * n + k / n).collect()
}

/// Index map of the partial transpose on A of a `(1, 2, n, n)` tensor; both
/// channels are permuted the same way.
fn partial_transpose_index(d: usize) -> Vec<usize> {
    let n = d * d;
    let mut idx = Vec::with_capacity(2 * n * n);
    for ch in 0..2 {
        for r in 0..n {
            for c in 0..n {
                let (i, k) = (r / d, r % d);
                let (j, l) = (c / d, c % d);
                idx.push(ch * n * n + (j * d + k) * n + (i * d + l));
            }
        }
    }
    idx
}

/// Graph handles of a generated state.
pub struct StateGraph {
    /// `(1, 2, n, n)` two-channel encoding of ρ_φ.
    pub x: Var,
    /// Leaves in the order `R_0, I_0, R_1, I_1, …, z`.
    pub leaves: Vec<Var>,
    /// Unnormalized branch traces.
    pub traces: Vec<f64>,
}

/// Records `ρ_φ` on `g` as a differentiable function of the parameters.
pub fn build_state(
    g: &mut Graph<f64>,
    params: &GeneratorParams,
) -> Result<StateGraph, BoundGenError> {
    params.validate()?;
    let n = params.side();
    let tidx = transpose_index(n);
    let diag: Vec<usize> = (0..n).map(|k| k * (n + 1)).collect();
    let mut leaves = Vec::with_capacity(2 * params.kappa + 1);
    let mut branches = Vec::with_capacity(params.kappa);
    let mut traces = Vec::with_capacity(params.kappa);
    for j in 0..params.kappa {
        let r = g.param(Tensor::from_vec(&[n, n], params.r[j].clone())?);
        let i = g.param(Tensor::from_vec(&[n, n], params.i[j].clone())?);
        leaves.push(r);
        leaves.push(i);
        let rt = g.gather(r, tidx.clone(), &[n, n])?;
        let it = g.gather(i, tidx.clone(), &[n, n])?;
        let rr = g.matmul(r, rt)?;
        let ii = g.matmul(i, it)?;
        let re = g.add(rr, ii)?;
        let irt = g.matmul(i, rt)?;
        let rit = g.matmul(r, it)?;
        let im = g.sub(irt, rit)?;
        let dv = g.gather(re, diag.clone(), &[n])?;
        let tr = g.sum(dv);
        let trace = g.value(tr).item();
        if trace.is_nan() || trace < DEGENERATE_TRACE {
            return Err(BoundGenError::DegenerateBranch(j));
        }
        traces.push(trace);
        let re = g.div_scalar(re, tr)?;
        let im = g.div_scalar(im, tr)?;
        branches.push((re, im));
    }
    let z = g.param(Tensor::from_vec(&[params.kappa], params.z.clone())?);
    leaves.push(z);
    let w = g.softmax(z)?;
    let mut acc: Option<(Var, Var)> = None;
    for (j, (re, im)) in branches.into_iter().enumerate() {
        let wj = g.gather(w, vec![j], &[1])?;
        let re = g.mul_scalar(re, wj)?;
        let im = g.mul_scalar(im, wj)?;
        acc = Some(match acc {
            None => (re, im),
            Some((ar, ai)) => (g.add(ar, re)?, g.add(ai, im)?),
        });
    }
    let (re, im) = acc.expect("kappa >= 1");
    let x = g.concat(&[re, im], &[1, 2, n, n])?;
    Ok(StateGraph { x, leaves, traces })
}

/// `ρ_φ` computed with dense complex arithmetic, independent of the graph.
pub fn build_state_direct(params: &GeneratorParams) -> Result<DensityMatrix, BoundGenError> {
    params.validate()?;
    let n = params.side();
    let zmax = params.z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ez: Vec<f64> = params.z.iter().map(|v| (v - zmax).exp()).collect();
    let zs: f64 = ez.iter().sum();
    let mut rho = ComplexMatrix::zeros(n, n);
    for (j, &w) in ez.iter().enumerate() {
        let h = ComplexMatrix::from_parts(n, n, &params.r[j], &params.i[j])?;
        let hh = h.matmul(&h.adjoint())?;
        let tr = hh.trace().re;
        if tr.is_nan() || tr < DEGENERATE_TRACE {
            return Err(BoundGenError::DegenerateBranch(j));
        }
        rho.add_scaled(w / zs / tr, &hh)?;
    }
    Ok(DensityMatrix::new_unchecked(params.d, params.d, rho)?)
}

fn state_from_graph(g: &Graph<f64>, x: Var, d: usize) -> Result<DensityMatrix, BoundGenError> {
    let n = d * d;
    let m = crate::cae::decode_sample(g.value(x).data(), n)?;
    Ok(DensityMatrix::new_unchecked(d, d, m.hermitian_part())?)
}

/// Scalar pieces of the generation objective at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Reconstruction error of ρ_φ.
    pub err: f64,
    /// `elementwise_l1(ρ_φ, ρ_φ^{T_A})`.
    pub pt_term: f64,
    /// `λ ∈ {0, 1}`: open while `err < ε`.
    pub gate: bool,
    /// `λ (err − ε) − pt_term`.
    pub value: f64,
}

impl ObjectiveValue {
    fn new(err: f64, pt_term: f64, epsilon: f64) -> Self {
        let gate = err < epsilon;
        let value = if gate { err - epsilon } else { 0.0 } - pt_term;
        Self {
            err,
            pt_term,
            gate,
            value,
        }
    }
}

/// Records the objective on `g`; returns the scalar to minimize (the negated
/// objective up to the constant `λ ε`) and its parts. The gate carries no
/// gradient.
pub fn objective(
    g: &mut Graph<f64>,
    state: &StateGraph,
    model: &CaeModel<f64>,
    epsilon: f64,
) -> Result<(Var, ObjectiveValue), BoundGenError> {
    let x = state.x;
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.build(g, x, Mode::Eval, false, &mut rng)?;
    let err = g.l1_loss(fwd.output, x)?;
    let xpt = g.gather(
        x,
        partial_transpose_index(model.spec().d),
        g.value(x).shape().to_vec().as_slice(),
    )?;
    let pt = g.l1_loss(x, xpt)?;
    let value = ObjectiveValue::new(g.value(err).item(), g.value(pt).item(), epsilon);
    let loss = if value.gate { g.sub(pt, err)? } else { pt };
    Ok((loss, value))
}

/// Objective evaluated without the autodiff graph.
pub fn objective_direct(
    params: &GeneratorParams,
    model: &CaeModel<f64>,
    epsilon: f64,
) -> Result<ObjectiveValue, BoundGenError> {
    let rho = build_state_direct(params)?;
    let out = model.infer(&encode_state::<f64>(&rho))?;
    let recon = crate::cae::decode_output(&out)?;
    let err = elementwise_l1(&recon, rho.matrix())?;
    let pt = elementwise_l1(
        rho.matrix(),
        &partial_transpose_matrix(rho.matrix(), params.d, params.d),
    )?;
    Ok(ObjectiveValue::new(err, pt, epsilon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub kappa: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Also try `(ρ + ρ^{T_A})/2` for the best iterate when it is not PPT.
    pub try_projection: bool,
}

impl GenConfig {
    /// κ grows with the local dimension: 3 up to d = 5, then 4 and 5.
    pub fn for_dimension(d: usize) -> Self {
        Self {
            kappa: match d {
                0..=5 => 3,
                6 => 4,
                _ => 5,
            },
            steps: 10_000,
            learning_rate: 2e-4,
            restarts: 10,
            seed: 0,
            try_projection: true,
        }
    }

    pub fn validate(&self) -> Result<(), BoundGenError> {
        if self.kappa == 0
            || self.steps == 0
            || self.restarts == 0
            || self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
        {
            return Err(BoundGenError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Outcome of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    #[serde(skip)]
    pub state: Option<DensityMatrix>,
    /// Reconstruction error by the classifier that set ε.
    pub reconstruction_error: f64,
    pub epsilon: f64,
    pub min_pt_eigenvalue: f64,
    pub ccnr: f64,
    /// Min PT eigenvalue ≥ −1e-8 and error > ε.
    pub feasible: bool,
    /// The state is the PT-symmetrized projection of an iterate.
    pub projected: bool,
    /// Step whose iterate was selected.
    pub best_step: usize,
    pub objective_trace: Vec<f64>,
    /// Gate value at each step.
    pub gate_trace: Vec<bool>,
    pub restart: usize,
    pub seed: u64,
    pub config: GenConfig,
}

impl GenerationResult {
    pub fn state(&self) -> &DensityMatrix {
        self.state.as_ref().expect("result carries its state")
    }

    /// Running maximum of the objective trace.
    pub fn running_max(&self) -> Vec<f64> {
        self.objective_trace
            .iter()
            .scan(f64::NEG_INFINITY, |m, &v| {
                *m = m.max(v);
                Some(*m)
            })
            .collect()
    }
}

/// Ranking key: feasibility of PPT first, then the reconstruction error.
fn rank(min_pt: f64, err: f64) -> (bool, f64) {
    (min_pt >= -FEASIBILITY_TOL, err)
}

/// One gradient-ascent run from `params`.
///
/// `model64` is the double-precision copy of `model` used for gradients;
/// the reported error comes from `model` itself so that it is comparable
/// with ε.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    mut params: GeneratorParams,
    model: &CaeModel<f32>,
    model64: &CaeModel<f64>,
    threshold: &ThresholdRecord,
    cfg: &GenConfig,
    restart: usize,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<GenerationResult, BoundGenError> {
    cfg.validate()?;
    if model.spec().d != threshold.d || params.d != threshold.d {
        return Err(BoundGenError::DimensionMismatch {
            model: model.spec().d,
            threshold: threshold.d,
        });
    }
    let eps = threshold.epsilon;
    let mut adam = AdamState::new(cfg.learning_rate, &params.sizes());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut gates = Vec::with_capacity(cfg.steps);
    let mut best: Option<((bool, f64), usize, DensityMatrix)> = None;
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let state = match build_state(&mut g, &params) {
            Ok(s) => s,
            Err(BoundGenError::DegenerateBranch(j)) => {
                params.randomize_branch(j, rng);
                continue;
            }
            Err(e) => return Err(e),
        };
        let (loss, value) = objective(&mut g, &state, model64, eps)?;
        trace.push(value.value);
        gates.push(value.gate);
        let rho = state_from_graph(&g, state.x, params.d)?;
        let key = rank(min_pt_eigenvalue(&rho)?, value.err);
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, step, rho));
        }
        g.backward(loss)?;
        // A leaf the loss does not reach (the logits with κ = 1) has no gradient.
        let grads: Vec<Vec<f64>> = state
            .leaves
            .iter()
            .zip(params.sizes())
            .map(|(&v, len)| g.grad(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(&mut params.buffers_mut(), &grad_refs, &mut adam)?;
    }
    let (_, best_step, rho) = best
        .ok_or_else(|| BoundGenError::InvalidConfig("every step hit a degenerate branch".into()))?;
    let mut result = certify_candidate(rho, model, threshold, false)?;
    if !result.0 && cfg.try_projection {
        if let Some(projected) = pt_symmetrize(result.1.state.as_ref().unwrap()) {
            let alt = certify_candidate(projected, model, threshold, true)?;
            if alt.0 {
                result = alt;
            }
        }
    }
    let (feasible, mut r) = result;
    r.feasible = feasible;
    r.best_step = best_step;
    r.objective_trace = trace;
    r.gate_trace = gates;
    r.restart = restart;
    r.seed = seed;
    r.config = cfg.clone();
    if feasible {
        Ok(r)
    } else {
        Err(BoundGenError::NoFeasibleState(Box::new(r)))
    }
}

/// `(ρ + ρ^{T_A}) / 2` when it is still positive semidefinite.
fn pt_symmetrize(rho: &DensityMatrix) -> Option<DensityMatrix> {
    let pt = partial_transpose_matrix(rho.matrix(), rho.dim_a(), rho.dim_b());
    let mut m = rho.matrix().clone();
    m.add_scaled(1.0, &pt).ok()?;
    let m = m.scale_real(0.5).hermitian_part();
    DensityMatrix::new(rho.dim_a(), rho.dim_b(), m).ok()
}

fn certify_candidate(
    rho: DensityMatrix,
    model: &CaeModel<f32>,
    threshold: &ThresholdRecord,
    projected: bool,
) -> Result<(bool, GenerationResult), BoundGenError> {
    let err = reconstruction_errors(model, std::slice::from_ref(&rho))?[0];
    let min_pt = min_pt_eigenvalue(&rho)?;
    let ccnr = realignment_ccnr(&rho)?;
    let feasible = min_pt >= -FEASIBILITY_TOL && err > threshold.epsilon;
    Ok((
        feasible,
        GenerationResult {
            state: Some(rho),
            reconstruction_error: err,
            epsilon: threshold.epsilon,
            min_pt_eigenvalue: min_pt,
            ccnr,
            feasible,
            projected,
            best_step: 0,
            objective_trace: Vec::new(),
            gate_trace: Vec::new(),
            restart: 0,
            seed: 0,
            config: GenConfig::for_dimension(threshold.d),
        },
    ))
}

/// Runs up to `cfg.restarts` independent optimizations and stops at the
/// first feasible one. Restart `r` uses the seed `derive_seed(cfg.seed, r)`.
///
/// Restarts run in parallel waves of the pool size; the returned attempts
/// always end at the lowest-numbered feasible restart, so the outcome does
/// not depend on the number of threads.
pub fn generate(
    model: &CaeModel<f32>,
    threshold: &ThresholdRecord,
    cfg: &GenConfig,
    mut on_attempt: impl FnMut(&Result<GenerationResult, BoundGenError>),
) -> Result<Vec<Result<GenerationResult, BoundGenError>>, BoundGenError> {
    cfg.validate()?;
    let model64 = model.cast::<f64>();
    let run = |restart: usize| {
        let seed = derive_seed(cfg.seed, restart as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GeneratorParams::random(threshold.d, cfg.kappa, &mut rng)?;
        optimize(
            params, model, &model64, threshold, cfg, restart, seed, &mut rng,
        )
    };
    let wave = rayon::current_num_threads().max(1);
    let mut attempts = Vec::new();
    let mut start = 0;
    while start < cfg.restarts {
        let end = (start + wave).min(cfg.restarts);
        let results: Vec<_> = (start..end).into_par_iter().map(run).collect();
        for res in results {
            on_attempt(&res);
            let done = res.is_ok();
            attempts.push(res);
            if done {
                return Ok(attempts);
            }
        }
        start = end;
    }
    Ok(attempts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certification {
    /// PPT and violates the realignment criterion.
    CertifiedBoundEntangled,
    /// PPT, realignment inconclusive, rejected by the classifier.
    Candidate,
    /// Negative partial transpose: entangled but not bound entangled.
    Npt,
    /// PPT, realignment inconclusive, accepted by the classifier.
    NotCertified,
}

impl Certification {
    pub fn describe(self) -> &'static str {
        match self {
            Certification::CertifiedBoundEntangled => "certified bound entangled",
            Certification::Candidate => "candidate (classifier evidence only)",
            Certification::Npt => "not bound entangled (NPT)",
            Certification::NotCertified => "not certified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub is_ppt: bool,
    pub min_pt_eigenvalue: f64,
    pub ccnr: f64,
    pub reconstruction_error: f64,
    pub epsilon: f64,
    pub unitaries: usize,
    pub median_unitary_error: f64,
    pub classifier_label: Label,
    pub verdict: Certification,
}

/// PPT (tolerance 1e-8), realignment and classifier evidence for one state.
pub fn certify(
    rho: &DensityMatrix,
    model: &CaeModel<f32>,
    threshold: &ThresholdRecord,
    unitaries: usize,
    seed: u64,
) -> Result<CertificationReport, BoundGenError> {
    let min_pt = min_pt_eigenvalue(rho)?;
    let is_ppt = min_pt >= -FEASIBILITY_TOL;
    let ccnr = realignment_ccnr(rho)?;
    let err = reconstruction_errors(model, std::slice::from_ref(rho))?[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = classify_with_unitaries(model, threshold, rho, unitaries.max(1), &mut rng)?;
    let verdict = if !is_ppt {
        Certification::Npt
    } else if ccnr > 1.0 {
        Certification::CertifiedBoundEntangled
    } else if v.label == Label::OutOfClass {
        Certification::Candidate
    } else {
        Certification::NotCertified
    };
    Ok(CertificationReport {
        is_ppt,
        min_pt_eigenvalue: min_pt,
        ccnr,
        reconstruction_error: err,
        epsilon: threshold.epsilon,
        unitaries: unitaries.max(1),
        median_unitary_error: v.median_error,
        classifier_label: v.label,
        verdict,
    })
}
