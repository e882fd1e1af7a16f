//! Beamformer design for fixed RIS phases.
//!
//! The lifted problem minimizes `Σ Tr W_k` under the SIC-SINR trace
//! constraints. The DC variant adds `ρ Σ (‖W_k‖_* − ‖W_k‖_2)` and linearizes
//! the spectral norm at the previous iterate until every `W_k` is rank one;
//! the SDR baseline drops the rank constraint and falls back to Gaussian
//! randomization.
//!
//! Subproblems are posed in normalized units: `W = P₀ W'` with
//! `P₀ = σ² / mean_l ‖h_l‖²`, so trace constraints and objective are O(1)
//! regardless of path loss.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{check_feasible_eff, gain, BeamformerSet, ScenarioConfig};
use crate::conic::{solve, ConicProblem, Sense, SolveStatus, SolverOptions};
use crate::numerics::{
    extract_rank_one, hermitian_eig, nuclear_minus_spectral_from, CMatrix, CVector, Hermitian, C64,
};

/// Rank-one extraction tolerance once the DC penalty has certified rank one.
const EXTRACT_TOL: f64 = 1e-3;
/// Slack used when re-checking SINR constraints on extracted vectors.
pub const FEAS_SLACK: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamformingError {
    #[error("beamforming subproblem is infeasible for these phases")]
    Infeasible,
    #[error("rank-one penalty {penalty:.3e} not driven to tolerance")]
    RankNotAchieved { penalty: f64 },
    #[error("conic solver returned {0:?}")]
    Solver(SolveStatus),
    #[error("extracted beamformers violate the SINR constraints (worst ratio {ratio:.6})")]
    ExtractionInfeasible { ratio: f64 },
    #[error("no Gaussian randomization candidate was feasible")]
    RandomizationFailed,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Lifted beamformers `W_k`, indexed by user.
#[derive(Debug, Clone)]
pub struct LiftedBeamformers {
    pub w: Vec<Hermitian>,
    pub penalty: f64,
    pub total_power: f64,
}

impl LiftedBeamformers {
    pub fn new(w: Vec<Hermitian>) -> Self {
        let penalty = w.iter().map(rank_penalty).sum();
        let total_power = w.iter().map(|m| m.trace()).sum();
        LiftedBeamformers { w, penalty, total_power }
    }

    pub fn from_vectors(w: &[CVector]) -> Self {
        Self::new(w.iter().map(Hermitian::outer).collect())
    }

    /// `ΣTr W_k + ρ Σ(‖W_k‖_* − ‖W_k‖_2)`.
    pub fn dc_objective(&self, rho: f64) -> f64 {
        self.total_power + rho * self.penalty
    }
}

/// `‖W‖_* − ‖W‖_2` without the PSD validation (solver output may carry
/// round-off sized negative eigenvalues).
pub(crate) fn rank_penalty(w: &Hermitian) -> f64 {
    nuclear_minus_spectral_from(&hermitian_eig(w).values)
}

/// Per-iteration history of one DC loop. Index 0 is the starting point.
#[derive(Debug, Clone, Default)]
pub struct DcTrace {
    pub objective: Vec<f64>,
    pub penalty: Vec<f64>,
    /// `Σ_k ‖Z^{r} − Z^{r+1}‖_F²` for each iteration.
    pub step_sq: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl DcTrace {
    /// Objective never increases by more than `rel_slack · max(1, |f|)`.
    pub fn is_monotone(&self, rel_slack: f64) -> bool {
        self.objective.windows(2).all(|p| p[1] <= p[0] + rel_slack * p[0].abs().max(1.0))
    }

    /// Average-step bound `avg_{i≤r} ‖ΔZ_i‖² ≤ (f⁰ − f_last)/(η(r+1))` for every
    /// prefix, with the last iterate standing in for the global minimum.
    pub fn rate_bound_holds(&self, eta: f64, rel_slack: f64) -> bool {
        if eta <= 0.0 || self.objective.is_empty() {
            return true;
        }
        let f0 = self.objective[0];
        let f_last = *self.objective.last().expect("nonempty");
        let slack = rel_slack * f0.abs().max(1.0);
        let mut sum = 0.0;
        self.step_sq.iter().enumerate().all(|(r, s)| {
            sum += s;
            let n = (r + 1) as f64;
            sum / n <= (f0 - f_last + slack) / (eta * n)
        })
    }
}

/// Result of a successful beamformer step.
#[derive(Debug, Clone)]
pub struct DcBeamformers {
    pub beamformers: BeamformerSet,
    pub lifted: LiftedBeamformers,
    pub trace: DcTrace,
}

/// A lifted subproblem in normalized units; multiply matrix variables by
/// `power_scale` to get mW.
#[derive(Debug, Clone)]
pub struct BeamformingSubproblem {
    pub problem: ConicProblem,
    pub power_scale: f64,
}

fn power_scale(eff: &[CVector], sigma2: f64) -> Option<f64> {
    let mean = eff.iter().map(|h| h.norm_squared()).sum::<f64>() / eff.len().max(1) as f64;
    (mean > 0.0 && mean.is_finite()).then(|| sigma2 / mean)
}

/// Builds the convex subproblem
/// `min Σ_k [(1+ρ) Tr W_k − <W_k, S_k> + η/2 ‖W_k‖²]` under the SINR trace
/// constraints, where `S_k` is the supplied subgradient of `h_1`
/// (`ρ u₁u₁ᴴ + η W_k^{prev}`, physical units). Block `k` belongs to user `k`.
pub fn build_p3_subproblem(
    eff: &[CVector],
    ordering: &[usize],
    subgrads: &[Hermitian],
    config: &ScenarioConfig,
) -> Result<BeamformingSubproblem, BeamformingError> {
    let k_users = eff.len();
    if ordering.len() != k_users || subgrads.len() != k_users {
        return Err(BeamformingError::DimensionMismatch("users, ordering and subgradients disagree".into()));
    }
    let m = eff.first().map_or(0, |h| h.len());
    if eff.iter().any(|h| h.len() != m) || subgrads.iter().any(|s| s.dim() != m) {
        return Err(BeamformingError::DimensionMismatch(format!("expected dimension {m}")));
    }
    let sigma2 = config.noise_power_mw();
    let p0 = power_scale(eff, sigma2).ok_or(BeamformingError::Infeasible)?;
    let mut p = ConicProblem::new();
    for (user, s) in subgrads.iter().enumerate() {
        let b = p.add_block(m);
        debug_assert_eq!(b, user);
        let c = Hermitian::identity(m).scaled(1.0 + config.rho).sub(s);
        p.set_objective(b, c).expect("dims checked");
        if config.eta > 0.0 {
            p.set_quadratic(b, config.eta * p0).expect("block exists");
        }
    }
    let lifted: Vec<Hermitian> = eff.iter().map(|h| Hermitian::outer(h).scaled(p0 / sigma2)).collect();
    for (pos_k, &user_k) in ordering.iter().enumerate() {
        let gamma = config.gamma_min(user_k);
        if gamma <= 0.0 {
            continue;
        }
        for &user_l in &ordering[pos_k..] {
            let h = &lifted[user_l];
            let mut terms = vec![(user_k, h.clone())];
            for &user_j in &ordering[pos_k + 1..] {
                terms.push((user_j, h.scaled(-gamma)));
            }
            p.add_constraint(terms, Sense::Ge, gamma).expect("dims checked");
        }
    }
    Ok(BeamformingSubproblem { problem: p, power_scale: p0 })
}

/// `u₁ u₁ᴴ` for the leading eigenvector of `W`.
pub fn spectral_subgradient(w: &Hermitian) -> Hermitian {
    let e = hermitian_eig(w);
    if e.values.is_empty() {
        return Hermitian::zeros(0);
    }
    Hermitian::outer(&e.vector(0))
}

fn solve_lifted(sub: &BeamformingSubproblem) -> Result<Vec<Hermitian>, BeamformingError> {
    let sol = solve(&sub.problem, &SolverOptions::default());
    match sol.status {
        SolveStatus::Optimal => Ok(sol.x.into_iter().map(|x| x.scaled(sub.power_scale)).collect()),
        SolveStatus::Infeasible => Err(BeamformingError::Infeasible),
        s => Err(BeamformingError::Solver(s)),
    }
}

/// The semidefinite relaxation (rank constraints dropped, no penalty).
pub fn sdr_relaxation(
    eff: &[CVector],
    ordering: &[usize],
    config: &ScenarioConfig,
) -> Result<LiftedBeamformers, BeamformingError> {
    let m = eff.first().map_or(0, |h| h.len());
    let relaxed = ScenarioConfig { rho: 0.0, eta: 0.0, ..config.clone() };
    let zeros = vec![Hermitian::zeros(m); eff.len()];
    let sub = build_p3_subproblem(eff, ordering, &zeros, &relaxed)?;
    Ok(LiftedBeamformers::new(solve_lifted(&sub)?))
}

fn extract_all(lifted: &LiftedBeamformers, rel_tol: f64) -> Option<Vec<CVector>> {
    lifted.w.iter().map(|w| extract_rank_one(w, rel_tol).ok()).collect()
}

/// DC iterations on the beamformer subproblem.
///
/// Starts from `init` when given (its leading eigenvectors seed the first
/// subgradient), otherwise from the SDR solution of the same instance.
pub fn solve_beamformers_dc(
    eff: &[CVector],
    ordering: &[usize],
    config: &ScenarioConfig,
    init: Option<&LiftedBeamformers>,
) -> Result<DcBeamformers, BeamformingError> {
    let start = match init {
        Some(l) => l.clone(),
        None => sdr_relaxation(eff, ordering, config)?,
    };
    let mut trace = DcTrace {
        objective: vec![start.dc_objective(config.rho)],
        penalty: vec![start.penalty],
        ..Default::default()
    };
    let mut current = start;
    let tol = |l: &LiftedBeamformers| config.rank_tol * l.total_power.max(1.0);
    for _ in 0..config.max_inner_iters {
        let subgrads: Vec<Hermitian> = current
            .w
            .iter()
            .map(|w| {
                let s = spectral_subgradient(w).scaled(config.rho);
                if config.eta > 0.0 {
                    s.add(&w.scaled(config.eta))
                } else {
                    s
                }
            })
            .collect();
        let sub = build_p3_subproblem(eff, ordering, &subgrads, config)?;
        let next = LiftedBeamformers::new(solve_lifted(&sub)?);
        let step: f64 = next.w.iter().zip(&current.w).map(|(a, b)| a.sub(b).frobenius_norm().powi(2)).sum();
        trace.objective.push(next.dc_objective(config.rho));
        trace.penalty.push(next.penalty);
        trace.step_sq.push(step);
        trace.iterations += 1;
        current = next;
        if current.penalty <= tol(&current) {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        return Err(BeamformingError::RankNotAchieved { penalty: current.penalty });
    }
    let w = extract_all(&current, EXTRACT_TOL).ok_or(BeamformingError::RankNotAchieved { penalty: current.penalty })?;
    let bf = BeamformerSet { w, ordering: ordering.to_vec() };
    let f = check_feasible_eff(eff, &bf, config, FEAS_SLACK);
    if !f.feasible {
        return Err(BeamformingError::ExtractionInfeasible { ratio: f.worst.map_or(0.0, |w| w.2) });
    }
    Ok(DcBeamformers { beamformers: bf, lifted: current, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdrStatus {
    /// The relaxation was tight (all blocks rank one).
    Exact,
    /// A Gaussian randomization candidate was used.
    Randomized,
}

/// Smallest common power factor making the candidate satisfy every SINR
/// constraint, or `None` if no scaling can.
fn common_scaling(eff: &[CVector], bf: &BeamformerSet, config: &ScenarioConfig) -> Option<f64> {
    let sigma2 = config.noise_power_mw();
    let kk = bf.ordering.len();
    let mut c: f64 = 0.0;
    for k in 0..kk {
        let gamma = config.gamma_min(bf.ordering[k]);
        if gamma <= 0.0 {
            continue;
        }
        for l in k..kk {
            let h = &eff[bf.ordering[l]];
            let interf: f64 = (k + 1..kk).map(|j| gain(h, bf.at_position(j))).sum();
            let margin = gain(h, bf.at_position(k)) - gamma * interf;
            if margin <= 0.0 {
                return None;
            }
            c = c.max(gamma * sigma2 / margin);
        }
    }
    Some(c)
}

fn psd_sqrt(w: &Hermitian) -> CMatrix {
    let e = hermitian_eig(w);
    let mut l = e.vectors.clone();
    for (j, &v) in e.values.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        l.column_mut(j).iter_mut().for_each(|z| *z *= s);
    }
    l
}

/// SDR baseline with Gaussian randomization.
pub fn solve_beamformers_sdr<R: Rng + ?Sized>(
    eff: &[CVector],
    ordering: &[usize],
    config: &ScenarioConfig,
    n_randomizations: usize,
    rng: &mut R,
) -> Result<(BeamformerSet, SdrStatus), BeamformingError> {
    let relaxed = sdr_relaxation(eff, ordering, config)?;
    if let Some(w) = extract_all(&relaxed, config.rank_tol) {
        let bf = BeamformerSet { w, ordering: ordering.to_vec() };
        if check_feasible_eff(eff, &bf, config, FEAS_SLACK).feasible {
            return Ok((bf, SdrStatus::Exact));
        }
    }
    let roots: Vec<CMatrix> = relaxed.w.iter().map(psd_sqrt).collect();
    let m = roots.first().map_or(0, |r| r.nrows());
    let mut best: Option<(f64, BeamformerSet)> = None;
    for _ in 0..n_randomizations {
        let w: Vec<CVector> = roots
            .iter()
            .map(|l| {
                let g = CVector::from_fn(m, |_, _| {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
                });
                l * g
            })
            .collect();
        let cand = BeamformerSet { w, ordering: ordering.to_vec() };
        if let Some(c) = common_scaling(eff, &cand, config) {
            let power = c * cand.total_power();
            if best.as_ref().is_none_or(|b| power < b.0) {
                let s = C64::new(c.sqrt(), 0.0);
                let scaled = BeamformerSet { w: cand.w.iter().map(|x| x * s).collect(), ordering: cand.ordering };
                best = Some((power, scaled));
            }
        }
    }
    best.map(|(_, bf)| (bf, SdrStatus::Randomized)).ok_or(BeamformingError::RandomizationFailed)
}
