//! Decode-order selection.
//!
//! Position 0 of a permutation is decoded first by every user and carries
//! the largest allocated power.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelSet, ScenarioConfig};
use crate::conic::{solve, ConicProblem, SolveStatus, SolverOptions};
use crate::numerics::{hermitian_eig, CMatrix, Hermitian};

/// Largest user count accepted by [`order_exhaustive`].
pub const MAX_EXHAUSTIVE_USERS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrderingError {
    #[error("exhaustive ordering supports at most {MAX_EXHAUSTIVE_USERS} users, got {0}")]
    TooManyUsers(usize),
    #[error("every decode order is infeasible")]
    AllInfeasible,
    #[error("ordering relaxation for user {user} failed with {status:?}")]
    Solver { user: usize, status: SolveStatus },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingScheme {
    Direct,
    Eigen,
    Sdr,
    Exhaustive,
}

impl fmt::Display for OrderingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderingScheme::Direct => "direct",
            OrderingScheme::Eigen => "eigen",
            OrderingScheme::Sdr => "sdr",
            OrderingScheme::Exhaustive => "exhaustive",
        })
    }
}

impl FromStr for OrderingScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(OrderingScheme::Direct),
            "eigen" => Ok(OrderingScheme::Eigen),
            "sdr" => Ok(OrderingScheme::Sdr),
            "exhaustive" => Ok(OrderingScheme::Exhaustive),
            other => Err(format!("unknown ordering scheme '{other}' (expected direct|eigen|sdr|exhaustive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingResult {
    /// `permutation[p]` is the user decoded at position `p`.
    pub permutation: Vec<usize>,
    /// Per-user criterion (`‖h_d‖`, estimated power in mW, or the allocated
    /// power of the best pipeline run).
    pub criterion: Vec<f64>,
    pub scheme: OrderingScheme,
}

fn argsort_desc(values: &[f64]) -> Vec<usize> {
    (0..values.len()).sorted_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b))).collect()
}

/// Weakest direct link first; ties by user index.
pub fn order_direct_link(ch: &ChannelSet) -> OrderingResult {
    let norms: Vec<f64> = ch.h_d.iter().map(|h| h.norm()).collect();
    let permutation = (0..norms.len()).sorted_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b))).collect();
    OrderingResult { permutation, criterion: norms, scheme: OrderingScheme::Direct }
}

/// `Q_k = B Bᴴ` with `B = [diag(h_{r,k}ᴴ) G; h_{d,k}ᴴ]`, so that
/// `ṽᴴ Q_k ṽ = ‖h_{r,k}ᴴ Θ G + h_{d,k}ᴴ‖²` for `ṽ = (conj v; 1)`.
pub fn build_q(ch: &ChannelSet, k: usize) -> Hermitian {
    let (n, m) = (ch.n_elements(), ch.n_antennas());
    let hr = &ch.h_r[k];
    let hd = &ch.h_d[k];
    let b = CMatrix::from_fn(n + 1, m, |i, j| if i < n { hr[i].conj() * ch.g[(i, j)] } else { hd[j].conj() });
    Hermitian::symmetrized(&b * b.adjoint())
}

/// Descending `p̂_k = γ_k σ² / (σ₁(Q_k)(N+1))`.
pub fn order_eigen(ch: &ChannelSet, config: &ScenarioConfig) -> OrderingResult {
    let sigma2 = config.noise_power_mw();
    let n1 = (ch.n_elements() + 1) as f64;
    let p_hat: Vec<f64> = (0..ch.n_users())
        .map(|k| {
            let s1 = hermitian_eig(&build_q(ch, k)).values[0];
            config.gamma_min(k) * sigma2 / (s1 * n1)
        })
        .collect();
    OrderingResult { permutation: argsort_desc(&p_hat), criterion: p_hat, scheme: OrderingScheme::Eigen }
}

/// `max Tr(Q V)` over `V ⪰ 0` with unit diagonal.
pub fn max_unit_diagonal_gain(q: &Hermitian) -> Result<f64, SolveStatus> {
    let n1 = q.dim();
    let scale = hermitian_eig(q).values[0];
    if scale <= 0.0 {
        return Ok(0.0);
    }
    let mut p = ConicProblem::new();
    let b = p.add_block(n1);
    p.set_objective(b, q.scaled(-1.0 / scale)).expect("dims match");
    for i in 0..n1 {
        p.pin_diagonal(b, i, 1.0).expect("index in range");
    }
    let sol = solve(&p, &SolverOptions::default());
    match sol.status {
        SolveStatus::Optimal => Ok(q.inner(&sol.x[0])),
        s => Err(s),
    }
}

/// Descending `p̃_k = γ_k σ² / max_V Tr(Q_k V)`.
pub fn order_sdr(ch: &ChannelSet, config: &ScenarioConfig) -> Result<OrderingResult, OrderingError> {
    let sigma2 = config.noise_power_mw();
    let p_tilde = (0..ch.n_users())
        .map(|k| {
            let opt = max_unit_diagonal_gain(&build_q(ch, k)).map_err(|status| OrderingError::Solver { user: k, status })?;
            Ok(config.gamma_min(k) * sigma2 / opt)
        })
        .collect::<Result<Vec<f64>, OrderingError>>()?;
    Ok(OrderingResult { permutation: argsort_desc(&p_tilde), criterion: p_tilde, scheme: OrderingScheme::Sdr })
}

/// Outcome of a pipeline run for one decode order: total power and
/// per-user powers, both in mW.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePower {
    pub total: f64,
    pub per_user: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExhaustiveResult {
    pub ordering: OrderingResult,
    pub total_power: f64,
    /// Every permutation with its total power (`None` when infeasible).
    pub powers: Vec<(Vec<usize>, Option<f64>)>,
}

/// Runs `pipeline` for every decode order and keeps the cheapest. The first
/// permutation in lexicographic order wins ties.
pub fn order_exhaustive<F>(k: usize, pipeline: F) -> Result<ExhaustiveResult, OrderingError>
where
    F: Fn(&[usize]) -> Option<PipelinePower> + Sync,
{
    if k > MAX_EXHAUSTIVE_USERS {
        return Err(OrderingError::TooManyUsers(k));
    }
    let perms: Vec<Vec<usize>> = (0..k).permutations(k).collect();
    #[cfg(feature = "parallel")]
    let runs: Vec<Option<PipelinePower>> = {
        use rayon::prelude::*;
        perms.par_iter().map(|p| pipeline(p)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<Option<PipelinePower>> = perms.iter().map(|p| pipeline(p)).collect();

    let best = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
        .min_by(|a, b| a.1.total.total_cmp(&b.1.total).then(a.0.cmp(&b.0)))
        .ok_or(OrderingError::AllInfeasible)?;
    let (idx, run) = best;
    let ordering = OrderingResult {
        permutation: perms[idx].clone(),
        criterion: run.per_user.clone(),
        scheme: OrderingScheme::Exhaustive,
    };
    let total_power = run.total;
    let powers = perms.into_iter().zip(runs).map(|(p, r)| (p, r.map(|r| r.total))).collect();
    Ok(ExhaustiveResult { ordering, total_power, powers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{combined_channel, generate_channels, is_permutation};
    use crate::numerics::testutil::*;
    use crate::numerics::{CVector, C64};
    use crate::phase::random_phase;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channels(rng: &mut ChaCha8Rng, k: usize, m: usize, n: usize) -> ChannelSet {
        ChannelSet {
            h_d: (0..k).map(|_| random_cvec(rng, m)).collect(),
            h_r: (0..k).map(|_| random_cvec(rng, n)).collect(),
            g: random_cmat(rng, n, m),
        }
    }

    fn real_vec(x: &[f64]) -> CVector {
        CVector::from_iterator(x.len(), x.iter().map(|&v| C64::new(v, 0.0)))
    }

    #[test]
    fn direct_link_cases() {
        let ch = ChannelSet { h_d: vec![real_vec(&[1.0]), real_vec(&[2.0])], h_r: vec![CVector::zeros(0); 2], g: CMatrix::zeros(0, 1) };
        assert_eq!(order_direct_link(&ch).permutation, vec![0, 1]);
        let ch = ChannelSet { h_d: vec![real_vec(&[3.0]), real_vec(&[2.0])], ..ch };
        assert_eq!(order_direct_link(&ch).permutation, vec![1, 0]);
        let ch = ChannelSet { h_d: vec![real_vec(&[2.0]), real_vec(&[2.0])], ..ch };
        assert_eq!(order_direct_link(&ch).permutation, vec![0, 1]);
    }

    #[test]
    fn direct_link_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = channels(&mut rng, 5, 2, 3);
        let base = order_direct_link(&ch).permutation;
        let perm = vec![3, 0, 4, 1, 2];
        let permuted = order_direct_link(&ch.permute_users(&perm)).permutation;
        let mapped: Vec<usize> = permuted.iter().map(|&u| perm[u]).collect();
        assert_eq!(mapped, base);
    }

    #[test]
    fn q_block_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = channels(&mut rng, 1, 3, 4).without_ris();
        let q = build_q(&ch, 0);
        let s1 = hermitian_eig(&q).values[0];
        assert_relative_eq!(s1, ch.h_d[0].norm_squared(), max_relative = 1e-12);
        assert_relative_eq!(q.as_matrix()[(4, 4)].re, ch.h_d[0].norm_squared(), max_relative = 1e-12);

        let ch = ChannelSet { h_d: vec![CVector::zeros(3)], h_r: vec![random_cvec(&mut rng, 1)], g: random_cmat(&mut rng, 1, 3) };
        let s1 = hermitian_eig(&build_q(&ch, 0)).values[0];
        assert_relative_eq!(s1, ch.h_r[0].norm_squared() * ch.g.norm_squared(), max_relative = 1e-12);
    }

    #[test]
    fn q_quadratic_form_matches_combined_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let ch = channels(&mut rng, 2, 3, 4);
            let v = random_phase(4, &mut rng);
            for k in 0..2 {
                // direct expansion of ‖h_rᴴ diag(v) G + h_dᴴ‖²
                let mut row = ch.h_d[k].adjoint();
                for n in 0..4 {
                    for j in 0..3 {
                        row[(0, j)] += ch.h_r[k][n].conj() * v.as_vector()[n] * ch.g[(n, j)];
                    }
                }
                let want = row.norm_squared();
                let got = build_q(&ch, k).quadratic_form(&v.lifted());
                assert!((got - want).abs() <= 1e-10 * want.max(1.0));
                assert_relative_eq!(combined_channel(&ch, &v, k).norm_squared(), want, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn eigen_rate_and_direct_cases() {
        let h = real_vec(&[1.0, 0.5]);
        let ch = ChannelSet { h_d: vec![h.clone(), h.clone()], h_r: vec![CVector::zeros(0); 2], g: CMatrix::zeros(0, 2) };
        let config = ScenarioConfig { user_rates: Some(vec![1.0, 2.0]), k: 2, ..Default::default() };
        assert_eq!(order_eigen(&ch, &config).permutation, vec![1, 0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch = channels(&mut rng, 5, 2, 3).without_ris();
        let config = ScenarioConfig { k: 5, ..Default::default() };
        assert_eq!(order_eigen(&ch, &config).permutation, order_direct_link(&ch).permutation);
    }

    #[test]
    fn sdr_ordering_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = ScenarioConfig { m: 2, n: 4, k: 3, ..Default::default() };
        let ch = generate_channels(&config, &mut rng).unwrap();
        let r = order_sdr(&ch, &config).unwrap();
        assert!(is_permutation(&r.permutation, 3));
        for k in 0..3 {
            let q = build_q(&ch, k);
            let opt = config.gamma_min(k) * config.noise_power_mw() / r.criterion[k];
            for _ in 0..20 {
                let v = random_phase(4, &mut rng);
                assert!(opt >= q.quadratic_form(&v.lifted()) * (1.0 - 1e-7));
            }
            // Tr(QV) ≤ σ₁(Q)(N+1) and V = I is feasible
            let eig = order_eigen(&ch, &config).criterion[k];
            assert!(r.criterion[k] >= eig * (1.0 - 1e-7));
            assert!(r.criterion[k] <= eig * 5.0 * (1.0 + 1e-7));
            let trace_bound = config.gamma_min(k) * config.noise_power_mw() / q.trace();
            assert!(r.criterion[k] <= trace_bound * (1.0 + 1e-7));
        }
        let one = ScenarioConfig { k: 1, ..config };
        let ch1 = generate_channels(&one, &mut rng).unwrap();
        assert_eq!(order_sdr(&ch1, &one).unwrap().permutation, vec![0]);
    }

    #[test]
    fn exhaustive_picks_minimum() {
        let costs = |p: &[usize]| -> Option<PipelinePower> {
            let total = p.iter().enumerate().map(|(i, &u)| (i as f64 + 1.0) * (u as f64 + 1.0)).sum::<f64>();
            (p[0] != 0).then(|| PipelinePower { total, per_user: vec![0.0; p.len()] })
        };
        let r = order_exhaustive(3, costs).unwrap();
        assert_eq!(r.powers.len(), 6);
        assert_eq!(r.ordering.permutation, vec![2, 1, 0]);
        assert_eq!(r.powers.iter().filter(|p| p.1.is_none()).count(), 2);
        assert_eq!(order_exhaustive(1, costs).unwrap_err(), OrderingError::AllInfeasible);
        assert_eq!(order_exhaustive(7, costs).unwrap_err(), OrderingError::TooManyUsers(7));
        let trivial = order_exhaustive(1, |_| Some(PipelinePower { total: 1.0, per_user: vec![1.0] })).unwrap();
        assert_eq!(trivial.ordering.permutation, vec![0]);
    }

    #[test]
    fn scheme_round_trip() {
        for s in [OrderingScheme::Direct, OrderingScheme::Eigen, OrderingScheme::Sdr, OrderingScheme::Exhaustive] {
            assert_eq!(s.to_string().parse::<OrderingScheme>().unwrap(), s);
        }
        assert!("bogus".parse::<OrderingScheme>().is_err());
    }

    proptest! {
        #[test]
        fn orderings_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ch = channels(&mut rng, 4, 2, 3);
            let config = ScenarioConfig { k: 4, ..Default::default() };
            let scaled = ch.scaled(scale);
            prop_assert_eq!(order_direct_link(&ch).permutation, order_direct_link(&scaled).permutation);
            prop_assert_eq!(order_eigen(&ch, &config).permutation, order_eigen(&scaled, &config).permutation);
            prop_assert!(is_permutation(&order_eigen(&ch, &config).permutation, 4));
        }
    }
}
