//! Random and named quantum-state generators.
//!
//! Every sampler takes an explicit RNG. Batch helpers derive one independent
//! ChaCha stream per item from `(seed, index)`, so the sample at a given index
//! does not depend on how the batch is split across workers.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    self, is_ppt, kron, qr_unitary, ComplexMatrix, DensityMatrix, LinalgError, PPT_TOL,
};

/// RNG used for every sampler in the crate.
pub type StateRng = ChaCha8Rng;

/// Attempts before [`npt_sample`] gives up.
pub const NPT_REJECTION_BUDGET: usize = 100_000;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("degenerate Ginibre draw (trace {0:e})")]
    DegenerateDraw(f64),
    #[error("no NPT state after {0} rejections")]
    RejectionBudgetExceeded(usize),
    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("matrix is not unitary (defect {0:e})")]
    NotUnitary(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// RNG for item `index` of a batch seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> StateRng {
    let mut rng = StateRng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Independent sub-seed of `seed` for a numbered purpose (splitmix64).
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparableSamplerConfig {
    pub d: usize,
    pub m_max: usize,
    pub seed: u64,
}

impl SeparableSamplerConfig {
    pub fn new(d: usize, m_max: usize, seed: u64) -> Result<Self, StateError> {
        if d < 2 {
            return Err(StateError::ParamOutOfRange(format!(
                "d = {d} (need d >= 2)"
            )));
        }
        if m_max < 1 {
            return Err(StateError::ParamOutOfRange(format!(
                "m_max = {m_max} (need >= 1)"
            )));
        }
        Ok(Self { d, m_max, seed })
    }
}

/// State family labels, shared by datasets and evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MixSep,
    Npt,
    Cc,
    Cq,
    Qc,
    BoundCandidate,
    Named,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::MixSep,
        Family::Npt,
        Family::Cc,
        Family::Cq,
        Family::Qc,
        Family::BoundCandidate,
        Family::Named,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::MixSep => "mix_sep",
            Family::Npt => "npt",
            Family::Cc => "cc",
            Family::Cq => "cq",
            Family::Qc => "qc",
            Family::BoundCandidate => "bound_candidate",
            Family::Named => "named",
        }
    }

    /// Numeric tag used in binary state files.
    pub fn tag(self) -> u32 {
        match self {
            Family::MixSep => 0,
            Family::Npt => 1,
            Family::Cc => 2,
            Family::Cq => 3,
            Family::Qc => 4,
            Family::BoundCandidate => 5,
            Family::Named => 6,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.tag() == tag)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown family '{s}'"))
    }
}

/// A homogeneous set of states with the generator provenance.
#[derive(Debug, Clone)]
pub struct LabeledStateSet {
    pub label: Family,
    pub states: Vec<DensityMatrix>,
    pub d: usize,
    pub m_max: Option<usize>,
    pub seed: u64,
}

impl LabeledStateSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Generates `n` states of `family` for local dimension `d`, item `i`
    /// drawn from [`item_rng`]`(seed, i)`. `m_max` is only used by
    /// [`Family::MixSep`].
    pub fn generate(
        family: Family,
        d: usize,
        n: usize,
        m_max: usize,
        seed: u64,
    ) -> Result<Self, StateError> {
        let cfg = SeparableSamplerConfig::new(d, m_max, seed)?;
        let states = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = item_rng(seed, i);
                sample_family(family, &cfg, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            label: family,
            states,
            d,
            m_max: (family == Family::MixSep).then_some(m_max),
            seed,
        })
    }
}

/// One draw from a random family.
pub fn sample_family<R: Rng + ?Sized>(
    family: Family,
    cfg: &SeparableSamplerConfig,
    rng: &mut R,
) -> Result<DensityMatrix, StateError> {
    match family {
        Family::MixSep => separable_sample(cfg, rng),
        Family::Npt => npt_sample(cfg.d, rng),
        Family::Cc => cc_sample(cfg.d, rng),
        Family::Cq => cq_sample(cfg.d, rng),
        Family::Qc => qc_sample(cfg.d, rng),
        Family::BoundCandidate | Family::Named => Err(StateError::ParamOutOfRange(format!(
            "family {family} has no random sampler"
        ))),
    }
}

/// Matrix of i.i.d. complex standard normals (real and imaginary parts each N(0,1)).
pub fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im)
    })
}

/// Hilbert-Schmidt random state `GG†/Tr(GG†)`, labelled with local dims `(dim, 1)`.
pub fn hs_random_state<R: Rng + ?Sized>(
    dim: usize,
    rng: &mut R,
) -> Result<DensityMatrix, StateError> {
    let g = ginibre(dim, dim, rng);
    let m = g.matmul(&g.adjoint())?;
    let tr = m.trace().re;
    if tr < 1e-300 {
        return Err(StateError::DegenerateDraw(tr));
    }
    let m = m.scale_real(1.0 / tr).hermitian_part();
    Ok(DensityMatrix::new_unchecked(dim, 1, m)?)
}

/// Haar-random unitary from the phase-corrected QR of a Ginibre matrix.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> ComplexMatrix {
    qr_unitary(&ginibre(dim, dim, rng))
}

/// Flat-Dirichlet probability vector (normalized i.i.d. exponentials).
pub fn random_prob_vector<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    assert!(m >= 1, "probability vector needs at least one entry");
    let draws: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let mut p: Vec<f64> = draws.iter().map(|x| x / total).collect();
    // Absorb the rounding residue into the largest entry.
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = (0..m).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    p[imax] += residue;
    p
}

/// Separable mixture `Σ_{i≤M} p_i ρ^A_i ⊗ ρ^B_i` with `M` uniform in `1..=m_max`
/// and every local factor Hilbert-Schmidt random.
pub fn separable_sample<R: Rng + ?Sized>(
    cfg: &SeparableSamplerConfig,
    rng: &mut R,
) -> Result<DensityMatrix, StateError> {
    let d = cfg.d;
    let m = rng.random_range(1..=cfg.m_max);
    let p = random_prob_vector(m, rng);
    let mut acc = ComplexMatrix::zeros(d * d, d * d);
    for &pi in &p {
        let a = hs_random_state(d, rng)?;
        let b = hs_random_state(d, rng)?;
        acc.add_scaled(pi, &kron(a.matrix(), b.matrix()))?;
    }
    Ok(DensityMatrix::new_unchecked(d, d, acc)?)
}

/// Hilbert-Schmidt random global state of a `d x d` system, resampled until NPT.
pub fn npt_sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DensityMatrix, StateError> {
    if d < 2 {
        return Err(StateError::ParamOutOfRange(format!(
            "d = {d} (need d >= 2)"
        )));
    }
    for _ in 0..NPT_REJECTION_BUDGET {
        let rho = hs_random_state(d * d, rng)?.with_dims(d, d)?;
        if !is_ppt(&rho, PPT_TOL)?.is_ppt {
            return Ok(rho);
        }
    }
    Err(StateError::RejectionBudgetExceeded(NPT_REJECTION_BUDGET))
}

fn basis_projectors(u: &ComplexMatrix) -> Vec<ComplexMatrix> {
    (0..u.cols())
        .map(|c| ComplexMatrix::projector(&u.column(c)))
        .collect()
}

/// Classical-classical state `Σ_ij p_ij |a_i⟩⟨a_i| ⊗ |b_j⟩⟨b_j|` in Haar-random local bases.
pub fn cc_sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DensityMatrix, StateError> {
    check_local_dim(d)?;
    let ua = haar_unitary(d, rng);
    let ub = haar_unitary(d, rng);
    let p = random_prob_vector(d * d, rng);
    let pa = basis_projectors(&ua);
    let pb = basis_projectors(&ub);
    let mut acc = ComplexMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            acc.add_scaled(p[i * d + j], &kron(&pa[i], &pb[j]))?;
        }
    }
    Ok(DensityMatrix::new_unchecked(d, d, acc.hermitian_part())?)
}

/// Classical-quantum state `Σ_i p_i |a_i⟩⟨a_i| ⊗ ρ^B_i`.
pub fn cq_sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DensityMatrix, StateError> {
    check_local_dim(d)?;
    let ua = haar_unitary(d, rng);
    let p = random_prob_vector(d, rng);
    let mut acc = ComplexMatrix::zeros(d * d, d * d);
    for (i, proj) in basis_projectors(&ua).iter().enumerate() {
        let rb = hs_random_state(d, rng)?;
        acc.add_scaled(p[i], &kron(proj, rb.matrix()))?;
    }
    Ok(DensityMatrix::new_unchecked(d, d, acc.hermitian_part())?)
}

/// Quantum-classical state `Σ_j p_j ρ^A_j ⊗ |b_j⟩⟨b_j|`.
pub fn qc_sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DensityMatrix, StateError> {
    check_local_dim(d)?;
    let ub = haar_unitary(d, rng);
    let p = random_prob_vector(d, rng);
    let mut acc = ComplexMatrix::zeros(d * d, d * d);
    for (j, proj) in basis_projectors(&ub).iter().enumerate() {
        let ra = hs_random_state(d, rng)?;
        acc.add_scaled(p[j], &kron(ra.matrix(), proj))?;
    }
    Ok(DensityMatrix::new_unchecked(d, d, acc.hermitian_part())?)
}

fn check_local_dim(d: usize) -> Result<(), StateError> {
    if d < 2 {
        return Err(StateError::ParamOutOfRange(format!(
            "d = {d} (need d >= 2)"
        )));
    }
    Ok(())
}

const UNITARY_TOL: f64 = 1e-10;

fn unitarity_defect(u: &ComplexMatrix) -> f64 {
    match u.adjoint().matmul(u) {
        Ok(p) => p
            .sub(&ComplexMatrix::identity(u.cols()))
            .map(|m| m.max_abs())
            .unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    }
}

/// `(U_A ⊗ U_B) ρ (U_A ⊗ U_B)†`.
pub fn local_unitary_conjugate(
    rho: &DensityMatrix,
    ua: &ComplexMatrix,
    ub: &ComplexMatrix,
) -> Result<DensityMatrix, StateError> {
    if ua.rows() != rho.dim_a() || ub.rows() != rho.dim_b() || !ua.is_square() || !ub.is_square() {
        return Err(LinalgError::DimensionMismatch {
            dim_a: ua.rows(),
            dim_b: ub.rows(),
            side: rho.side(),
        }
        .into());
    }
    for u in [ua, ub] {
        let defect = unitarity_defect(u);
        if defect > UNITARY_TOL {
            return Err(StateError::NotUnitary(defect));
        }
    }
    let u = kron(ua, ub);
    let out = rho.matrix().conjugate_by(&u)?.hermitian_part();
    Ok(DensityMatrix::new_unchecked(rho.dim_a(), rho.dim_b(), out)?)
}

/// Draws a Haar pair and conjugates.
pub fn random_local_unitary<R: Rng + ?Sized>(rho: &DensityMatrix, rng: &mut R) -> DensityMatrix {
    let ua = haar_unitary(rho.dim_a(), rng);
    let ub = haar_unitary(rho.dim_b(), rng);
    local_unitary_conjugate(rho, &ua, &ub).expect("Haar unitaries have matching dimensions")
}

/// Horodecki's two-qutrit PPT entangled family, `a ∈ (0, 1)`.
pub fn horodecki_3x3(a: f64) -> Result<DensityMatrix, StateError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(StateError::ParamOutOfRange(format!(
            "a = {a} (need 0 < a < 1)"
        )));
    }
    let mut m = [[0.0f64; 9]; 9];
    for &i in &[0usize, 4, 8] {
        for &j in &[0usize, 4, 8] {
            m[i][j] = a;
        }
    }
    for &i in &[1usize, 2, 3, 5, 7] {
        m[i][i] = a;
    }
    m[6][6] = (1.0 + a) / 2.0;
    m[8][8] = (1.0 + a) / 2.0;
    let c = (1.0 - a * a).sqrt() / 2.0;
    m[6][8] = c;
    m[8][6] = c;
    let norm = 1.0 / (8.0 * a + 1.0);
    let flat: Vec<f64> = m.iter().flatten().map(|x| x * norm).collect();
    Ok(DensityMatrix::new(
        3,
        3,
        ComplexMatrix::from_real(9, 9, &flat)?,
    )?)
}

/// Bound entangled state `(𝟙 − Σ_i |ψ_i⟩⟨ψ_i|)/4` built from the five
/// product vectors of the "Tiles" unextendible product basis in `C³ ⊗ C³`.
pub fn tiles_upb_state() -> DensityMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let ket = |v: [f64; 3]| -> ComplexMatrix { ComplexMatrix::from_real(3, 1, &v).unwrap() };
    let pairs = [
        (ket([1.0, 0.0, 0.0]), ket([s, -s, 0.0])),
        (ket([s, -s, 0.0]), ket([0.0, 0.0, 1.0])),
        (ket([0.0, 0.0, 1.0]), ket([0.0, s, -s])),
        (ket([0.0, s, -s]), ket([1.0, 0.0, 0.0])),
        (ket([1.0 / 3f64.sqrt(); 3]), ket([1.0 / 3f64.sqrt(); 3])),
    ];
    let mut acc = ComplexMatrix::identity(9);
    for (a, b) in &pairs {
        let psi = kron(a, b);
        acc.add_scaled(-1.0, &ComplexMatrix::projector(psi.as_slice()))
            .unwrap();
    }
    DensityMatrix::new(3, 3, acc.scale_real(0.25).hermitian_part()).expect("tiles state is valid")
}

/// Convenience re-export for callers that only need the PPT verdict.
pub fn is_ppt_default(rho: &DensityMatrix) -> Result<bool, LinalgError> {
    Ok(linalg::is_ppt(rho, PPT_TOL)?.is_ppt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{
        hermitian_eigen, hermitian_eigenvalues, partial_transpose, realignment_ccnr, STATE_TOL,
    };

    fn rng(seed: u64) -> StateRng {
        StateRng::seed_from_u64(seed)
    }

    #[test]
    fn ginibre_second_moment_and_column_means() {
        let mut r = rng(1);
        let n = 100_000;
        let mut m2 = 0.0;
        let mut mean = Complex64::new(0.0, 0.0);
        for _ in 0..n {
            let z = ginibre(1, 1, &mut r)[(0, 0)];
            m2 += z.norm_sqr();
            mean += z;
        }
        m2 /= n as f64;
        mean /= n as f64;
        assert!((m2 - 2.0).abs() / 2.0 < 0.02, "E|z|² = {m2}");
        // Each of Re, Im has std 1/√n for the mean; 4σ bound.
        let bound = 4.0 / (n as f64).sqrt();
        assert!(mean.re.abs() < bound && mean.im.abs() < bound);
    }

    #[test]
    fn ginibre_is_deterministic_per_seed() {
        assert_eq!(ginibre(3, 4, &mut rng(5)), ginibre(3, 4, &mut rng(5)));
        assert_ne!(ginibre(3, 4, &mut rng(5)), ginibre(3, 4, &mut rng(6)));
    }

    #[test]
    fn hs_state_dim_one_is_one() {
        let rho = hs_random_state(1, &mut rng(2)).unwrap();
        assert!((rho.matrix()[(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn hs_states_are_valid() {
        let mut r = rng(3);
        for dim in [2, 3, 4, 9] {
            for _ in 0..200 {
                hs_random_state(dim, &mut r)
                    .unwrap()
                    .validate(STATE_TOL)
                    .unwrap();
            }
        }
    }

    #[test]
    fn haar_unitary_is_unitary() {
        let mut r = rng(4);
        let u = haar_unitary(1, &mut r);
        assert!((u[(0, 0)].norm() - 1.0).abs() < 1e-14);
        for _ in 0..1000 {
            let u = haar_unitary(7, &mut r);
            assert!(unitarity_defect(&u) < 1e-12);
        }
        let a = haar_unitary(5, &mut r);
        let b = haar_unitary(5, &mut r);
        assert!(unitarity_defect(&a.matmul(&b).unwrap()) < 1e-11);
    }

    #[test]
    fn haar_first_entry_moment() {
        let mut r = rng(5);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| haar_unitary(4, &mut r)[(0, 0)].norm_sqr())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.25).abs() / 0.25 < 0.02, "E|U00|² = {mean}");
    }

    #[test]
    fn prob_vector_properties() {
        let mut r = rng(6);
        assert_eq!(random_prob_vector(1, &mut r), vec![1.0]);
        let n = 100_000;
        let mut first = 0.0;
        for _ in 0..n {
            let p = random_prob_vector(4, &mut r);
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            first += p[0];
        }
        first /= n as f64;
        assert!((first - 0.25).abs() / 0.25 < 0.02);
    }

    #[test]
    fn product_states_are_ppt() {
        let cfg = SeparableSamplerConfig::new(3, 1, 0).unwrap();
        let mut r = rng(7);
        for _ in 0..100 {
            let rho = separable_sample(&cfg, &mut r).unwrap();
            rho.validate(STATE_TOL).unwrap();
            assert!(is_ppt_default(&rho).unwrap());
        }
    }

    #[test]
    fn separable_samples_ppt_and_ccnr_bounded() {
        let cfg = SeparableSamplerConfig::new(3, 5, 0).unwrap();
        let mut r = rng(8);
        for _ in 0..1000 {
            let rho = separable_sample(&cfg, &mut r).unwrap();
            assert!(is_ppt_default(&rho).unwrap());
            assert!(realignment_ccnr(&rho).unwrap() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn sampler_config_validation() {
        assert!(SeparableSamplerConfig::new(1, 2, 0).is_err());
        assert!(SeparableSamplerConfig::new(3, 0, 0).is_err());
    }

    #[test]
    fn npt_samples_are_npt_and_valid() {
        let mut r = rng(9);
        for d in [2, 3] {
            for _ in 0..50 {
                let rho = npt_sample(d, &mut r).unwrap();
                rho.validate(STATE_TOL).unwrap();
                assert!(linalg::min_pt_eigenvalue(&rho).unwrap() < -1e-10);
            }
        }
        assert!(npt_sample(1, &mut r).is_err());
    }

    #[test]
    fn npt_acceptance_rate_at_d3() {
        let mut r = rng(10);
        let attempts = 10_000;
        let accepted = (0..attempts)
            .filter(|_| {
                let rho = hs_random_state(9, &mut r).unwrap().with_dims(3, 3).unwrap();
                !is_ppt_default(&rho).unwrap()
            })
            .count();
        assert!(accepted as f64 / attempts as f64 >= 0.99, "{accepted}");
    }

    #[test]
    fn cc_is_diagonal_in_its_local_bases() {
        // Replay the sampler's RNG consumption to recover its bases.
        let d = 3;
        let rho = cc_sample(d, &mut rng(11)).unwrap();
        let mut r = rng(11);
        let ua = haar_unitary(d, &mut r);
        let ub = haar_unitary(d, &mut r);
        let u = kron(&ua, &ub);
        let back = rho.matrix().conjugate_by(&u.adjoint()).unwrap();
        let mut off = 0.0f64;
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    off = off.max(back[(i, j)].norm());
                }
            }
        }
        assert!(off < 1e-12, "off-diagonal {off}");
    }

    #[test]
    fn cq_marginal_is_diagonal_in_chosen_basis() {
        let d = 3;
        let rho = cq_sample(d, &mut rng(12)).unwrap();
        let ua = haar_unitary(d, &mut rng(12));
        let marginal = rho.partial_trace_b();
        let eig = hermitian_eigen(&marginal).unwrap();
        // Every eigenvector of the marginal is (up to phase) a basis column.
        for c in 0..d {
            let v = eig.vectors.column(c);
            let best = (0..d)
                .map(|k| {
                    let col = ua.column(k);
                    col.iter()
                        .zip(&v)
                        .map(|(a, b)| a.conj() * b)
                        .sum::<Complex64>()
                        .norm()
                })
                .fold(0.0, f64::max);
            assert!((best - 1.0).abs() < 1e-10, "overlap {best}");
        }
    }

    #[test]
    fn discord_families_are_valid_and_ppt() {
        let mut r = rng(13);
        for _ in 0..300 {
            for rho in [
                cc_sample(3, &mut r).unwrap(),
                cq_sample(3, &mut r).unwrap(),
                qc_sample(3, &mut r).unwrap(),
            ] {
                rho.validate(STATE_TOL).unwrap();
                assert!(is_ppt_default(&rho).unwrap());
            }
        }
    }

    #[test]
    fn local_unitaries_identity_and_invariants() {
        let mut r = rng(14);
        let rho = hs_random_state(9, &mut r).unwrap().with_dims(3, 3).unwrap();
        let id = ComplexMatrix::identity(3);
        assert_eq!(
            local_unitary_conjugate(&rho, &id, &id).unwrap().matrix(),
            rho.matrix()
        );
        for _ in 0..100 {
            let ua = haar_unitary(3, &mut r);
            let ub = haar_unitary(3, &mut r);
            let out = local_unitary_conjugate(&rho, &ua, &ub).unwrap();
            assert!((out.matrix().trace() - rho.matrix().trace()).norm() < 1e-12);
            assert!((out.purity() - rho.purity()).abs() < 1e-12);
            let s0 = hermitian_eigenvalues(rho.matrix()).unwrap();
            let s1 = hermitian_eigenvalues(out.matrix()).unwrap();
            for (a, b) in s0.values().iter().zip(s1.values()) {
                assert!((a - b).abs() < 1e-9);
            }
            let p0 = hermitian_eigenvalues(&partial_transpose(&rho)).unwrap();
            let p1 = hermitian_eigenvalues(&partial_transpose(&out)).unwrap();
            for (a, b) in p0.values().iter().zip(p1.values()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn local_unitary_rejects_non_unitary() {
        let rho = DensityMatrix::maximally_mixed(2, 2);
        let bad = ComplexMatrix::identity(2).scale_real(2.0);
        assert!(matches!(
            local_unitary_conjugate(&rho, &bad, &ComplexMatrix::identity(2)),
            Err(StateError::NotUnitary(_))
        ));
    }

    #[test]
    fn horodecki_family_is_ppt() {
        for k in 1..=9 {
            let a = k as f64 / 10.0;
            let rho = horodecki_3x3(a).unwrap();
            let rep = linalg::is_ppt(&rho, PPT_TOL).unwrap();
            assert!(rep.is_ppt, "a = {a}: {}", rep.min_pt_eigenvalue);
            assert!(rep.min_pt_eigenvalue >= -1e-12);
        }
        assert!(horodecki_3x3(0.0).is_err());
        assert!(horodecki_3x3(1.0).is_err());
    }

    #[test]
    fn tiles_state_is_ppt_and_ccnr_entangled() {
        let rho = tiles_upb_state();
        assert!(is_ppt_default(&rho).unwrap());
        let ccnr = realignment_ccnr(&rho).unwrap();
        assert!(ccnr > 1.0, "ccnr = {ccnr}");
        // Frozen from the Jacobi SVD; the literature quotes ≈ 1.087.
        assert!(
            (ccnr - 1.087_412_464_837_522).abs() < 1e-12,
            "ccnr = {ccnr}"
        );
    }

    #[test]
    fn batch_generation_is_reproducible() {
        let a = LabeledStateSet::generate(Family::MixSep, 3, 5, 2, 42).unwrap();
        let b = LabeledStateSet::generate(Family::MixSep, 3, 5, 2, 42).unwrap();
        assert_eq!(a.states, b.states);
        let c = LabeledStateSet::generate(Family::MixSep, 3, 5, 2, 43).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn family_tags_roundtrip() {
        for f in Family::ALL {
            assert_eq!(Family::from_tag(f.tag()), Some(f));
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
    }
}
