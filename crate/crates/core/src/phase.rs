//! Phase-shift design for fixed beamformers.
//!
//! With `ṽ = (conj v; 1)` every received amplitude is linear in `ṽ`:
//! `h_lᴴ w_k = ṽᴴ (a_{l,k}; b_{l,k})`. Lifting `V = ṽṽᴴ` turns the SINR
//! constraints into trace constraints with a unit diagonal; rank one is
//! recovered by the same nuclear-minus-spectral DC penalty as for the
//! beamformers.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::beamforming::{rank_penalty, spectral_subgradient, DcTrace, SdrStatus, FEAS_SLACK};
use crate::channel::{BeamformerSet, ChannelSet, Feasibility, PhaseShiftVector, ScenarioConfig};
use crate::conic::{solve, ConicProblem, Sense, SolveStatus, SolverOptions};
use crate::numerics::{extract_rank_one, hermitian_eig, CMatrix, CVector, Hermitian, C64};

const EXTRACT_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error("phase subproblem is infeasible for these beamformers")]
    Infeasible,
    #[error("rank-one penalty {penalty:.3e} not driven to tolerance")]
    RankNotAchieved { penalty: f64 },
    #[error("conic solver returned {0:?}")]
    Solver(SolveStatus),
    #[error("projected phases violate the SINR constraints (worst ratio {ratio:.6})")]
    ExtractionInfeasible { ratio: f64 },
    #[error("no Gaussian randomization candidate was feasible")]
    RandomizationFailed,
}

/// Linear-in-`ṽ` description of every received amplitude, indexed by user
/// `[l][k]` (receiver `l`, signal of user `k`).
#[derive(Debug, Clone)]
pub struct PhaseProblemData {
    /// `a_{l,k} = diag(h_{r,l}ᴴ) G w_k`.
    pub a: Vec<Vec<CVector>>,
    /// `b_{l,k} = h_{d,l}ᴴ w_k`.
    pub b: Vec<Vec<C64>>,
    /// `[[a aᴴ, a b̄], [b aᴴ, 0]]`, so that `ṽᴴRṽ + |b|² = |ṽᴴ(a; b)|²`.
    pub r: Vec<Vec<Hermitian>>,
    pub ordering: Vec<usize>,
}

impl PhaseProblemData {
    pub fn n_elements(&self) -> usize {
        self.a.first().and_then(|row| row.first()).map_or(0, |a| a.len())
    }

    fn stacked(&self, l: usize, k: usize) -> CVector {
        let n = self.n_elements();
        CVector::from_fn(n + 1, |i, _| if i < n { self.a[l][k][i] } else { self.b[l][k] })
    }

    /// `|h_lᴴ w_k|²` for the given phases.
    pub fn gain(&self, v: &PhaseShiftVector, l: usize, k: usize) -> f64 {
        v.lifted().dotc(&self.stacked(l, k)).norm_sqr()
    }

    /// SINR feasibility of the phases, equivalent to
    /// [`crate::channel::check_feasible`] for the beamformers the data was
    /// built from.
    pub fn check(&self, v: &PhaseShiftVector, config: &ScenarioConfig, slack_tol: f64) -> Feasibility {
        let sigma2 = config.noise_power_mw();
        let ord = &self.ordering;
        let mut worst: Option<(usize, usize, f64)> = None;
        for k in 0..ord.len() {
            let gamma = config.gamma_min(ord[k]);
            if gamma <= 0.0 {
                continue;
            }
            for l in k..ord.len() {
                let user = ord[l];
                let interf: f64 = ord[k + 1..].iter().map(|&j| self.gain(v, user, j)).sum();
                let ratio = self.gain(v, user, ord[k]) / (interf + sigma2) / gamma;
                if worst.is_none_or(|w| ratio < w.2) {
                    worst = Some((k, l, ratio));
                }
            }
        }
        Feasibility { feasible: worst.is_none_or(|w| w.2 >= 1.0 - slack_tol), worst }
    }
}

pub fn build_phase_data(ch: &ChannelSet, bf: &BeamformerSet) -> PhaseProblemData {
    let kk = ch.n_users();
    let gw: Vec<CVector> = bf.w.iter().map(|w| &ch.g * w).collect();
    let mut a = Vec::with_capacity(kk);
    let mut b = Vec::with_capacity(kk);
    let mut r = Vec::with_capacity(kk);
    for l in 0..kk {
        let hr = &ch.h_r[l];
        let row_a: Vec<CVector> = gw.iter().map(|g| CVector::from_fn(hr.len(), |n, _| hr[n].conj() * g[n])).collect();
        let row_b: Vec<C64> = bf.w.iter().map(|w| ch.h_d[l].dotc(w)).collect();
        let row_r = row_a
            .iter()
            .zip(&row_b)
            .map(|(a, &b)| {
                let n = a.len();
                let c = CVector::from_fn(n + 1, |i, _| if i < n { a[i] } else { b });
                let mut m: CMatrix = &c * c.adjoint();
                m[(n, n)] = C64::new(0.0, 0.0);
                Hermitian::symmetrized(m)
            })
            .collect();
        a.push(row_a);
        b.push(row_b);
        r.push(row_r);
    }
    PhaseProblemData { a, b, r, ordering: bf.ordering.clone() }
}

/// Lifted phase variable `V ≈ ṽṽᴴ`.
#[derive(Debug, Clone)]
pub struct LiftedPhase {
    pub v: Hermitian,
    pub penalty: f64,
}

impl LiftedPhase {
    pub fn new(v: Hermitian) -> Self {
        let penalty = rank_penalty(&v);
        LiftedPhase { v, penalty }
    }

    pub fn from_phases(v: &PhaseShiftVector) -> Self {
        Self::new(Hermitian::outer(&v.lifted()))
    }
}

/// Lifted P4: `min Tr V − <V, S> + η/2‖V‖²` subject to the SINR trace rows
/// and `V_{nn} = 1`. Amplitudes are normalized by the noise power.
pub fn build_p4_subproblem(data: &PhaseProblemData, subgrad: &Hermitian, eta: f64, config: &ScenarioConfig) -> ConicProblem {
    let n1 = data.n_elements() + 1;
    let sigma2 = config.noise_power_mw();
    let mut p = ConicProblem::new();
    let blk = p.add_block(n1);
    p.set_objective(blk, Hermitian::identity(n1).sub(subgrad)).expect("dims match");
    if eta > 0.0 {
        p.set_quadratic(blk, eta).expect("block exists");
    }
    for i in 0..n1 {
        p.pin_diagonal(blk, i, 1.0).expect("index in range");
    }
    let full = |l: usize, k: usize| {
        let c = data.stacked(l, k);
        Hermitian::outer(&c).scaled(1.0 / sigma2)
    };
    let ord = &data.ordering;
    for (pos_k, &user_k) in ord.iter().enumerate() {
        let gamma = config.gamma_min(user_k);
        if gamma <= 0.0 {
            continue;
        }
        for &user_l in &ord[pos_k..] {
            let mut m = full(user_l, user_k);
            for &user_j in &ord[pos_k + 1..] {
                m = m.sub(&full(user_l, user_j).scaled(gamma));
            }
            p.add_constraint(vec![(blk, m)], Sense::Ge, gamma).expect("dims match");
        }
    }
    p
}

fn solve_lifted(p: &ConicProblem) -> Result<Hermitian, PhaseError> {
    let sol = solve(p, &SolverOptions::default());
    match sol.status {
        SolveStatus::Optimal => Ok(sol.x.into_iter().next().expect("one block")),
        SolveStatus::Infeasible => Err(PhaseError::Infeasible),
        s => Err(PhaseError::Solver(s)),
    }
}

/// Phases from a lifted vector: `v = conj(ṽ_{1:N} / ṽ_{N+1})`, projected
/// onto the unit circle.
pub fn phases_from_lifted(vt: &CVector) -> PhaseShiftVector {
    let n = vt.len() - 1;
    let last = vt[n];
    let last = if last.norm() > 0.0 { last } else { C64::new(1.0, 0.0) };
    PhaseShiftVector::project(&CVector::from_fn(n, |i, _| (vt[i] / last).conj()))
}

/// The relaxation of P4 with zero objective.
pub fn phase_relaxation(data: &PhaseProblemData, config: &ScenarioConfig) -> Result<LiftedPhase, PhaseError> {
    let n1 = data.n_elements() + 1;
    let mut p = build_p4_subproblem(data, &Hermitian::zeros(n1), 0.0, config);
    p.set_objective(0, Hermitian::zeros(n1)).expect("dims match");
    Ok(LiftedPhase::new(solve_lifted(&p)?))
}

/// DC iterations on the phase subproblem, from `init` or from the
/// relaxation's solution.
pub fn solve_phase_dc(
    data: &PhaseProblemData,
    config: &ScenarioConfig,
    init: Option<&LiftedPhase>,
) -> Result<(PhaseShiftVector, LiftedPhase, DcTrace), PhaseError> {
    let start = match init {
        Some(l) => l.clone(),
        None => phase_relaxation(data, config)?,
    };
    let n1 = data.n_elements() + 1;
    let tol = config.rank_tol * n1 as f64;
    let mut trace = DcTrace { objective: vec![start.penalty], penalty: vec![start.penalty], ..Default::default() };
    let mut current = start;
    for _ in 0..config.max_inner_iters {
        let mut s = spectral_subgradient(&current.v);
        if config.eta > 0.0 {
            s = s.add(&current.v.scaled(config.eta));
        }
        let next = LiftedPhase::new(solve_lifted(&build_p4_subproblem(data, &s, config.eta, config))?);
        trace.step_sq.push(next.v.sub(&current.v).frobenius_norm().powi(2));
        trace.objective.push(next.penalty);
        trace.penalty.push(next.penalty);
        trace.iterations += 1;
        current = next;
        if current.penalty <= tol {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        return Err(PhaseError::RankNotAchieved { penalty: current.penalty });
    }
    let vt = extract_rank_one(&current.v, EXTRACT_TOL).map_err(|_| PhaseError::RankNotAchieved { penalty: current.penalty })?;
    let v = phases_from_lifted(&vt);
    let f = data.check(&v, config, FEAS_SLACK);
    if !f.feasible {
        return Err(PhaseError::ExtractionInfeasible { ratio: f.worst.map_or(0.0, |w| w.2) });
    }
    Ok((v, current, trace))
}

/// SDR baseline: relaxation, then Gaussian randomization with unit-modulus
/// projection; the first feasible candidate wins.
pub fn solve_phase_sdr<R: Rng + ?Sized>(
    data: &PhaseProblemData,
    config: &ScenarioConfig,
    n_randomizations: usize,
    rng: &mut R,
) -> Result<(PhaseShiftVector, SdrStatus), PhaseError> {
    let relaxed = phase_relaxation(data, config)?;
    if let Ok(vt) = extract_rank_one(&relaxed.v, config.rank_tol) {
        let v = phases_from_lifted(&vt);
        if data.check(&v, config, FEAS_SLACK).feasible {
            return Ok((v, SdrStatus::Exact));
        }
    }
    let e = hermitian_eig(&relaxed.v);
    let mut l = e.vectors.clone();
    for (j, &val) in e.values.iter().enumerate() {
        let s = val.max(0.0).sqrt();
        l.column_mut(j).iter_mut().for_each(|z| *z *= s);
    }
    let n1 = l.nrows();
    for _ in 0..n_randomizations {
        let g = CVector::from_fn(n1, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re, im)
        });
        let v = phases_from_lifted(&(&l * g));
        if data.check(&v, config, FEAS_SLACK).feasible {
            return Ok((v, SdrStatus::Randomized));
        }
    }
    Err(PhaseError::RandomizationFailed)
}

/// I.i.d. uniform phases on `[0, 2π)`.
pub fn random_phase<R: Rng + ?Sized>(n: usize, rng: &mut R) -> PhaseShiftVector {
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
    PhaseShiftVector::from_angles(&theta)
}

/// Nearest point of the `2^bits`-level lattice under circular distance;
/// exact ties go to the smaller angle.
pub fn quantize_angle(theta: f64, bits: u32) -> f64 {
    let levels = 1u64 << bits;
    let step = TAU / levels as f64;
    let x = theta.rem_euclid(TAU) / step;
    let lo = x.floor();
    let idx = if x - lo > 0.5 { lo + 1.0 } else { lo };
    (idx as u64 % levels) as f64 * step
}

pub fn quantize_phases(v: &PhaseShiftVector, bits: u32) -> PhaseShiftVector {
    assert!(bits >= 1, "quantization needs at least one bit");
    let theta: Vec<f64> = v.angles().into_iter().map(|t| quantize_angle(t, bits)).collect();
    PhaseShiftVector::from_angles(&theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamforming::solve_beamformers_dc;
    use crate::channel::{check_feasible, combined_channels, generate_channels};
    use crate::numerics::testutil::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_channels(rng: &mut ChaCha8Rng, k: usize, m: usize, n: usize) -> ChannelSet {
        ChannelSet {
            h_d: (0..k).map(|_| random_cvec(rng, m)).collect(),
            h_r: (0..k).map(|_| random_cvec(rng, n)).collect(),
            g: random_cmat(rng, n, m),
        }
    }

    #[test]
    fn zero_beamformer_gives_zero_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = random_channels(&mut rng, 2, 2, 3);
        let bf = BeamformerSet { w: vec![CVector::zeros(2), random_cvec(&mut rng, 2)], ordering: vec![0, 1] };
        let d = build_phase_data(&ch, &bf);
        for l in 0..2 {
            assert_eq!(d.a[l][0].norm(), 0.0);
            assert_eq!(d.b[l][0].norm(), 0.0);
            assert!(d.r[l][0].frobenius_norm() == 0.0);
        }
    }

    #[test]
    fn zero_bs_ris_link_reduces_to_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = random_channels(&mut rng, 2, 2, 3).without_ris();
        let bf = BeamformerSet { w: vec![random_cvec(&mut rng, 2), random_cvec(&mut rng, 2)], ordering: vec![1, 0] };
        let d = build_phase_data(&ch, &bf);
        let v = random_phase(3, &mut rng);
        for l in 0..2 {
            for k in 0..2 {
                assert_eq!(d.a[l][k].norm(), 0.0);
                assert_relative_eq!(d.gain(&v, l, k), d.b[l][k].norm_sqr(), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_form_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let ch = random_channels(&mut rng, 3, 2, 4);
            let w: Vec<CVector> = (0..3).map(|_| random_cvec(&mut rng, 2)).collect();
            let bf = BeamformerSet { w: w.clone(), ordering: vec![2, 0, 1] };
            let d = build_phase_data(&ch, &bf);
            let v = random_phase(4, &mut rng);
            let eff = combined_channels(&ch, &v);
            let vt = v.lifted();
            for l in 0..3 {
                for k in 0..3 {
                    // direct expansion of h_{r,l}ᴴ diag(v) G w_k + h_{d,l}ᴴ w_k
                    let gw = &ch.g * &w[k];
                    let mut amp = ch.h_d[l].dotc(&w[k]);
                    for n in 0..4 {
                        amp += ch.h_r[l][n].conj() * v.as_vector()[n] * gw[n];
                    }
                    let lhs = d.r[l][k].quadratic_form(&vt) + d.b[l][k].norm_sqr();
                    assert!((lhs - amp.norm_sqr()).abs() <= 1e-10 * amp.norm_sqr().max(1.0));
                    assert!((eff[l].dotc(&w[k]).norm_sqr() - amp.norm_sqr()).abs() <= 1e-10 * amp.norm_sqr().max(1.0));
                    assert_eq!(d.r[l][k].as_matrix()[(4, 4)], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn data_check_matches_channel_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = ScenarioConfig { m: 2, n: 3, k: 3, ..Default::default() };
        for _ in 0..20 {
            let ch = generate_channels(&config, &mut rng).unwrap();
            let bf = BeamformerSet {
                w: (0..3).map(|_| random_cvec(&mut rng, 2) * C64::new(30.0, 0.0)).collect(),
                ordering: vec![1, 2, 0],
            };
            let v = random_phase(3, &mut rng);
            let d = build_phase_data(&ch, &bf);
            let a = d.check(&v, &config, 0.0);
            let b = check_feasible(&ch, &v, &bf, &config, 0.0);
            assert_eq!(a.feasible, b.feasible);
            let (ra, rb) = (a.worst.unwrap(), b.worst.unwrap());
            assert_eq!((ra.0, ra.1), (rb.0, rb.1));
            assert_relative_eq!(ra.2, rb.2, max_relative = 1e-9);
        }
    }

    #[test]
    fn global_phase_does_not_change_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_phase(5, &mut rng);
        let vt = v.lifted();
        for t in [0.3, 1.7, -2.2] {
            let rotated = &vt * C64::from_polar(2.5, t);
            let back = phases_from_lifted(&rotated);
            assert!((back.as_vector() - v.as_vector()).norm() < 1e-12);
        }
    }

    struct Instance {
        config: ScenarioConfig,
        ch: ChannelSet,
        v0: PhaseShiftVector,
        bf: BeamformerSet,
    }

    fn instance(seed: u64, m: usize, n: usize, k: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ScenarioConfig { m, n, k, ..Default::default() };
        let ch = generate_channels(&config, &mut rng).unwrap();
        let v0 = random_phase(n, &mut rng);
        let ordering: Vec<usize> = (0..k).collect();
        let bf = solve_beamformers_dc(&combined_channels(&ch, &v0), &ordering, &config, None).unwrap().beamformers;
        Instance { config, ch, v0, bf }
    }

    #[test]
    fn warm_start_is_a_fixed_point() {
        let inst = instance(6, 2, 4, 2);
        let d = build_phase_data(&inst.ch, &inst.bf);
        let init = LiftedPhase::from_phases(&inst.v0);
        let (v, lifted, trace) = solve_phase_dc(&d, &inst.config, Some(&init)).unwrap();
        assert_eq!(trace.iterations, 1);
        assert!(lifted.penalty <= inst.config.rank_tol * 5.0);
        assert!(check_feasible(&inst.ch, &v, &inst.bf, &inst.config, FEAS_SLACK).feasible);
    }

    #[test]
    fn dc_from_relaxation_is_feasible_and_monotone() {
        for seed in 0..4 {
            let inst = instance(10 + seed, 3, 6, 3);
            let d = build_phase_data(&inst.ch, &inst.bf);
            let (v, lifted, trace) = solve_phase_dc(&d, &inst.config, None).unwrap();
            assert!(lifted.penalty <= inst.config.rank_tol * 7.0);
            assert!(check_feasible(&inst.ch, &v, &inst.bf, &inst.config, FEAS_SLACK).feasible);
            assert!(trace.is_monotone(1e-9), "{:?}", trace.objective);
            assert!(trace.rate_bound_holds(inst.config.eta, 1e-9));
            for i in 0..7 {
                assert!((lifted.v.as_matrix()[(i, i)].re - 1.0).abs() <= 1e-7);
            }
        }
    }

    /// Every grid point feasible per the channel-level check counts; the DC
    /// answer must be feasible under the same check whenever the grid finds
    /// one.
    #[test]
    fn two_element_grid_oracle() {
        for seed in 0..3 {
            let inst = instance(20 + seed, 2, 2, 2);
            let d = build_phase_data(&inst.ch, &inst.bf);
            let grid: Vec<f64> = (0..16).map(|i| i as f64 * PI / 8.0).collect();
            let mut grid_feasible = 0;
            for &t0 in &grid {
                for &t1 in &grid {
                    let v = PhaseShiftVector::from_angles(&[t0, t1]);
                    if check_feasible(&inst.ch, &v, &inst.bf, &inst.config, FEAS_SLACK).feasible {
                        grid_feasible += 1;
                    }
                }
            }
            match solve_phase_dc(&d, &inst.config, None) {
                Ok((v, _, _)) => assert!(check_feasible(&inst.ch, &v, &inst.bf, &inst.config, FEAS_SLACK).feasible),
                Err(e) => assert_eq!(grid_feasible, 0, "grid found feasible points but DC failed: {e}"),
            }
        }
    }

    #[test]
    fn sdr_result_is_feasible_when_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let inst = instance(31, 2, 4, 2);
        let d = build_phase_data(&inst.ch, &inst.bf);
        match solve_phase_sdr(&d, &inst.config, 200, &mut rng) {
            Ok((v, _)) => assert!(check_feasible(&inst.ch, &v, &inst.bf, &inst.config, FEAS_SLACK).feasible),
            Err(e) => assert_eq!(e, PhaseError::RandomizationFailed),
        }
    }

    #[test]
    fn random_phase_properties() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let va = random_phase(8, &mut a);
        assert_eq!(va, random_phase(8, &mut b));
        assert!(va.as_vector().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        let mut sum = C64::new(0.0, 0.0);
        let draws = 10_000;
        for _ in 0..draws {
            sum += random_phase(1, &mut a).as_vector()[0];
        }
        assert!((sum / draws as f64).norm() < 0.05);
    }

    #[test]
    fn quantizer_table() {
        assert_eq!(quantize_angle(0.3 * PI, 1), 0.0);
        assert_relative_eq!(quantize_angle(0.9 * PI, 1), PI);
        assert_eq!(quantize_angle(1.9 * PI, 2), 0.0);
        assert_relative_eq!(quantize_angle(0.5 * PI, 1), 0.0);
        assert_relative_eq!(quantize_angle(0.74 * PI, 2), 0.5 * PI);
        let q = quantize_phases(&PhaseShiftVector::from_angles(&[0.3 * PI, 0.9 * PI]), 1);
        assert!((q.as_vector()[0] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((q.as_vector()[1] - C64::new(-1.0, 0.0)).norm() < 1e-12);
    }

    fn circ(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(TAU);
        d.min(TAU - d)
    }

    proptest! {
        #[test]
        fn quantizer_idempotent_and_nearest(theta in 0.0..TAU, bits in 1u32..5) {
            let q = quantize_angle(theta, bits);
            prop_assert!((quantize_angle(q, bits) - q).abs() < 1e-12);
            let step = TAU / (1u64 << bits) as f64;
            prop_assert!(circ(theta, q) <= step / 2.0 + 1e-12);
            for i in 0..(1u64 << bits) {
                prop_assert!(circ(theta, q) <= circ(theta, i as f64 * step) + 1e-12);
            }
        }
    }
}
