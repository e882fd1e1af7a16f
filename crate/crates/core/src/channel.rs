//! Scenario parameters, channel realizations and the SINR / feasibility
//! evaluation of a (beamformer, phase) pair.
//!
//! Conventions used across the crate:
//! - powers are in mW internally, dBm only at the reporting boundary;
//! - a [`PhaseShiftVector`] stores the RIS diagonal `Θ = diag(v)`, so the
//!   combined channel of user `k` is `h_{r,k}ᴴ diag(v) G + h_{d,k}ᴴ`;
//! - decode orders are 0-based user indices, position 0 being decoded first
//!   by everyone (and allocated the highest power).

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{CMatrix, CVector, Hermitian, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("decode position {l} precedes signal position {k}")]
    PositionOrder { k: usize, l: usize },
}

pub type Result<T> = std::result::Result<T, ChannelError>;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Where users are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UserPlacement {
    /// Uniform over an axis-aligned box; each range is `[lo, hi]`.
    Region { x: [f64; 2], y: [f64; 2], z: [f64; 2] },
    Positions(Vec<[f64; 3]>),
}

impl Default for UserPlacement {
    fn default() -> Self {
        UserPlacement::Region { x: [-50.0, 50.0], y: [60.0, 160.0], z: [0.0, 0.0] }
    }
}

/// All scalar parameters of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// BS antennas.
    pub m: usize,
    /// RIS elements; 0 means no surface.
    pub n: usize,
    /// Users.
    pub k: usize,
    pub bs_pos: [f64; 3],
    pub ris_pos: [f64; 3],
    pub users: UserPlacement,
    pub t0_db: f64,
    pub alpha_bu: f64,
    pub alpha_bi: f64,
    pub alpha_iu: f64,
    pub ris_element_gain_db: f64,
    pub noise_power_dbm: f64,
    /// Common rate target in bits per channel use.
    pub rate_min: f64,
    /// Per-user rate targets overriding `rate_min` when present.
    pub user_rates: Option<Vec<f64>>,
    pub rho: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub rank_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub n_randomizations: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            m: 4,
            n: 20,
            k: 5,
            bs_pos: [0.0, 0.0, 10.0],
            ris_pos: [50.0, 50.0, 15.0],
            users: UserPlacement::default(),
            t0_db: -30.0,
            alpha_bu: 3.5,
            alpha_bi: 2.0,
            alpha_iu: 2.2,
            ris_element_gain_db: 3.0,
            noise_power_dbm: -80.0,
            rate_min: 1.5,
            user_rates: None,
            rho: 10.0,
            eta: 1e-4,
            epsilon: 1e-4,
            rank_tol: 1e-6,
            max_outer_iters: 30,
            max_inner_iters: 50,
            n_randomizations: 200,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ChannelError::InvalidConfig(msg));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        for (name, a) in [("alpha_bu", self.alpha_bu), ("alpha_bi", self.alpha_bi), ("alpha_iu", self.alpha_iu)] {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.rho > 0.0) {
            return bad("rho must be positive".into());
        }
        if !(self.eta >= 0.0) {
            return bad("eta must be nonnegative".into());
        }
        if !(self.epsilon > 0.0) || !(self.rank_tol > 0.0) {
            return bad("epsilon and rank_tol must be positive".into());
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return bad("iteration caps must be at least 1".into());
        }
        if !self.noise_power_dbm.is_finite() || !self.t0_db.is_finite() {
            return bad("noise power and reference loss must be finite".into());
        }
        if let Some(r) = &self.user_rates {
            if r.len() != self.k {
                return bad(format!("user_rates has {} entries for {} users", r.len(), self.k));
            }
        }
        if (0..self.k).any(|u| !(self.rate(u) >= 0.0)) {
            return bad("rates must be nonnegative".into());
        }
        match &self.users {
            UserPlacement::Positions(p) if p.len() != self.k => {
                bad(format!("{} user positions for {} users", p.len(), self.k))
            }
            UserPlacement::Region { x, y, z } if x[0] > x[1] || y[0] > y[1] || z[0] > z[1] => {
                bad("user region bounds must satisfy lo <= hi".into())
            }
            _ => Ok(()),
        }
    }

    pub fn rate(&self, user: usize) -> f64 {
        self.user_rates.as_ref().map_or(self.rate_min, |r| r[user])
    }

    /// SINR target `2^R − 1` of a user.
    pub fn gamma_min(&self, user: usize) -> f64 {
        2f64.powf(self.rate(user)) - 1.0
    }

    pub fn noise_power_mw(&self) -> f64 {
        db_to_linear(self.noise_power_dbm)
    }
}

/// `10^{T0/10} · d^{−α}`.
pub fn path_loss(d: f64, alpha: f64, t0_db: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(ChannelError::NonPositiveDistance(d));
    }
    Ok(db_to_linear(t0_db) * d.powf(-alpha))
}

/// One channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// BS–user links, one `M`-vector per user.
    pub h_d: Vec<CVector>,
    /// RIS–user links, one `N`-vector per user.
    pub h_r: Vec<CVector>,
    /// BS–RIS link, `N × M`.
    pub g: CMatrix,
}

impl ChannelSet {
    pub fn n_users(&self) -> usize {
        self.h_d.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.g.ncols()
    }

    pub fn n_elements(&self) -> usize {
        self.g.nrows()
    }

    /// Same realization with the reflected path removed.
    pub fn without_ris(&self) -> ChannelSet {
        ChannelSet { h_d: self.h_d.clone(), h_r: self.h_r.clone(), g: CMatrix::zeros(self.g.nrows(), self.g.ncols()) }
    }

    /// Permutes users: user `i` of the result is user `perm[i]` of `self`.
    pub fn permute_users(&self, perm: &[usize]) -> ChannelSet {
        ChannelSet {
            h_d: perm.iter().map(|&u| self.h_d[u].clone()).collect(),
            h_r: perm.iter().map(|&u| self.h_r[u].clone()).collect(),
            g: self.g.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> ChannelSet {
        let s = s.sqrt();
        ChannelSet {
            h_d: self.h_d.iter().map(|h| h * C64::new(s, 0.0)).collect(),
            h_r: self.h_r.iter().map(|h| h * C64::new(s, 0.0)).collect(),
            g: self.g.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.g.nrows(), self.g.ncols());
        if self.h_r.len() != self.h_d.len() {
            return Err(ChannelError::DimensionMismatch("h_d and h_r user counts differ".into()));
        }
        if self.h_d.iter().any(|h| h.len() != m) || self.h_r.iter().any(|h| h.len() != n) {
            return Err(ChannelError::DimensionMismatch("link dimensions disagree with G".into()));
        }
        Ok(())
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cn01<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn cn_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, amp: f64) -> CVector {
    DVector::from_fn(n, |_, _| cn01(rng) * amp)
}

/// Draws user positions for a scenario.
pub fn place_users<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Vec<[f64; 3]> {
    match &config.users {
        UserPlacement::Positions(p) => p.clone(),
        UserPlacement::Region { x, y, z } => (0..config.k)
            .map(|_| {
                let mut draw = |r: &[f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
                [draw(x), draw(y), draw(z)]
            })
            .collect(),
    }
}

/// Geometric path loss with i.i.d. Rayleigh fading on every coefficient.
///
/// The RIS element gain is applied once, on the RIS–user link.
pub fn generate_channels<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<ChannelSet> {
    config.validate()?;
    let users = place_users(config, rng);
    let g_ris = db_to_linear(config.ris_element_gain_db);
    let mut h_d = Vec::with_capacity(config.k);
    let mut h_r = Vec::with_capacity(config.k);
    for pos in &users {
        let l_bu = path_loss(distance(&config.bs_pos, pos), config.alpha_bu, config.t0_db)?;
        h_d.push(cn_vector(rng, config.m, l_bu.sqrt()));
    }
    for pos in &users {
        if config.n == 0 {
            h_r.push(CVector::zeros(0));
            continue;
        }
        let l_iu = path_loss(distance(&config.ris_pos, pos), config.alpha_iu, config.t0_db)?;
        h_r.push(cn_vector(rng, config.n, (l_iu * g_ris).sqrt()));
    }
    let g = if config.n == 0 {
        CMatrix::zeros(0, config.m)
    } else {
        let l_ib = path_loss(distance(&config.bs_pos, &config.ris_pos), config.alpha_bi, config.t0_db)?;
        let amp = l_ib.sqrt();
        CMatrix::from_fn(config.n, config.m, |_, _| cn01(rng) * amp)
    };
    Ok(ChannelSet { h_d, h_r, g })
}

/// Unit-modulus RIS reflection coefficients, `Θ = diag(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseShiftVector(CVector);

impl PhaseShiftVector {
    pub const MODULUS_TOL: f64 = 1e-8;

    pub fn new(v: CVector) -> Result<Self> {
        if let Some(bad) = v.iter().find(|z| (z.norm() - 1.0).abs() > Self::MODULUS_TOL) {
            return Err(ChannelError::InvalidConfig(format!("phase entry with modulus {}", bad.norm())));
        }
        Ok(PhaseShiftVector(v))
    }

    pub fn from_angles(theta: &[f64]) -> Self {
        PhaseShiftVector(CVector::from_iterator(theta.len(), theta.iter().map(|&t| C64::from_polar(1.0, t))))
    }

    /// Projects every entry onto the unit circle; zero entries map to 1.
    pub fn project(v: &CVector) -> Self {
        PhaseShiftVector(v.map(|z| if z.norm() > 0.0 { z / z.norm() } else { C64::new(1.0, 0.0) }))
    }

    pub fn ones(n: usize) -> Self {
        PhaseShiftVector(CVector::from_element(n, C64::new(1.0, 0.0)))
    }

    /// Angles in `[0, 2π)`.
    pub fn angles(&self) -> Vec<f64> {
        self.0.iter().map(|z| z.arg().rem_euclid(std::f64::consts::TAU)).collect()
    }

    pub fn as_vector(&self) -> &CVector {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The lifted vector `(conj(v); 1)` whose outer product is the phase
    /// subproblem's matrix variable.
    pub fn lifted(&self) -> CVector {
        let n = self.0.len();
        CVector::from_fn(n + 1, |i, _| if i < n { self.0[i].conj() } else { C64::new(1.0, 0.0) })
    }
}

/// Beamformers indexed by user together with the decode order in force.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub w: Vec<CVector>,
    /// `ordering[p]` is the user decoded at position `p`.
    pub ordering: Vec<usize>,
}

impl BeamformerSet {
    pub fn new(w: Vec<CVector>, ordering: Vec<usize>) -> Result<Self> {
        if !is_permutation(&ordering, w.len()) {
            return Err(ChannelError::InvalidConfig("ordering is not a permutation of the users".into()));
        }
        if w.iter().flat_map(|v| v.iter()).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(ChannelError::InvalidConfig("non-finite beamformer".into()));
        }
        Ok(BeamformerSet { w, ordering })
    }

    pub fn zeros(m: usize, ordering: Vec<usize>) -> Self {
        let k = ordering.len();
        BeamformerSet { w: vec![CVector::zeros(m); k], ordering }
    }

    pub fn total_power(&self) -> f64 {
        self.w.iter().map(|w| w.norm_squared()).sum()
    }

    /// Beamformer of the user at decode position `p`.
    pub fn at_position(&self, p: usize) -> &CVector {
        &self.w[self.ordering[p]]
    }
}

pub fn is_permutation(perm: &[usize], k: usize) -> bool {
    if perm.len() != k {
        return false;
    }
    let mut seen = vec![false; k];
    for &u in perm {
        if u >= k || seen[u] {
            return false;
        }
        seen[u] = true;
    }
    true
}

/// The combined channel of user `k`, returned as the column vector `h_k`
/// whose conjugate transpose is `h_{r,k}ᴴ diag(v) G + h_{d,k}ᴴ`.
pub fn combined_channel(ch: &ChannelSet, v: &PhaseShiftVector, k: usize) -> CVector {
    let v = v.as_vector();
    // h_k = Gᴴ diag(v*) h_r + h_d
    let weighted = CVector::from_fn(v.len(), |n, _| v[n].conj() * ch.h_r[k][n]);
    ch.g.adjoint() * weighted + &ch.h_d[k]
}

/// Combined channels of all users.
pub fn combined_channels(ch: &ChannelSet, v: &PhaseShiftVector) -> Vec<CVector> {
    (0..ch.n_users()).map(|k| combined_channel(ch, v, k)).collect()
}

/// Received power `|h_lᴴ w|²`.
pub fn gain(h: &CVector, w: &CVector) -> f64 {
    h.dotc(w).norm_sqr()
}

/// SINR at the user in decode position `l` when decoding the signal at
/// position `k`; interference comes from positions after `k`.
pub fn sinr(eff: &[CVector], bf: &BeamformerSet, k: usize, l: usize, sigma2: f64) -> Result<f64> {
    if l < k {
        return Err(ChannelError::PositionOrder { k, l });
    }
    let h = &eff[bf.ordering[l]];
    let signal = gain(h, bf.at_position(k));
    let interference: f64 = (k + 1..bf.ordering.len()).map(|j| gain(h, bf.at_position(j))).sum();
    Ok(signal / (interference + sigma2))
}

/// Result of [`check_feasible`]: the worst constraint is the one with the
/// smallest `SINR / γ` ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// `(k, l, SINR/γ)` in decode positions.
    pub worst: Option<(usize, usize, f64)>,
}

/// SINR feasibility of beamformers on precomputed combined channels.
pub fn check_feasible_eff(
    eff: &[CVector],
    bf: &BeamformerSet,
    config: &ScenarioConfig,
    slack_tol: f64,
) -> Feasibility {
    let sigma2 = config.noise_power_mw();
    let kk = bf.ordering.len();
    let mut worst: Option<(usize, usize, f64)> = None;
    for k in 0..kk {
        let gamma = config.gamma_min(bf.ordering[k]);
        if gamma <= 0.0 {
            continue;
        }
        for l in k..kk {
            let ratio = sinr(eff, bf, k, l, sigma2).expect("l >= k") / gamma;
            if worst.is_none_or(|w| ratio < w.2) {
                worst = Some((k, l, ratio));
            }
        }
    }
    let feasible = worst.is_none_or(|w| w.2 >= 1.0 - slack_tol);
    Feasibility { feasible, worst }
}

/// SINR feasibility of a (phase, beamformer) pair.
pub fn check_feasible(
    ch: &ChannelSet,
    v: &PhaseShiftVector,
    bf: &BeamformerSet,
    config: &ScenarioConfig,
    slack_tol: f64,
) -> Feasibility {
    check_feasible_eff(&combined_channels(ch, v), bf, config, slack_tol)
}

/// Whether every user receives the decoded signals in descending power
/// order (the SIC power-ordering inequalities). Diagnostic only; never
/// enforced by the optimizers.
pub fn sic_power_order_holds(eff: &[CVector], bf: &BeamformerSet) -> bool {
    bf.ordering.iter().all(|&user| {
        let h = &eff[user];
        let powers: Vec<f64> = (0..bf.ordering.len()).map(|p| gain(h, bf.at_position(p))).collect();
        powers.windows(2).all(|p| p[0] >= p[1])
    })
}

/// Lifted constraint matrix `H_l = h_l h_lᴴ`.
pub fn lifted_channel(h: &CVector) -> Hermitian {
    Hermitian::outer(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn path_loss_values() {
        assert_relative_eq!(path_loss(1.0, 3.7, -30.0).unwrap(), 1e-3, max_relative = 1e-12);
        assert_relative_eq!(path_loss(100.0, 2.0, -30.0).unwrap(), 1e-7, max_relative = 1e-12);
        assert_relative_eq!(path_loss(10.0, 3.5, -30.0).unwrap(), 3.1623e-7, max_relative = 1e-4);
        assert!(path_loss(0.0, 2.0, -30.0).is_err());
        assert!(path_loss(-1.0, 2.0, -30.0).is_err());
    }

    #[test]
    fn path_loss_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let l = path_loss(i as f64 * 0.7, 2.2, -30.0).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    fn fixed_user_config(d: f64) -> ScenarioConfig {
        ScenarioConfig {
            m: 4,
            n: 4,
            k: 1,
            bs_pos: [0.0, 0.0, 0.0],
            ris_pos: [0.0, 0.0, 0.0],
            users: UserPlacement::Positions(vec![[d, 0.0, 0.0]]),
            ..Default::default()
        }
        .with_ris_at([1.0, 0.0, 0.0])
    }

    impl ScenarioConfig {
        fn with_ris_at(mut self, p: [f64; 3]) -> Self {
            self.ris_pos = p;
            self
        }
    }

    #[test]
    fn direct_link_mean_gain() {
        let cfg = fixed_user_config(20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000;
        let mean: f64 = (0..trials)
            .map(|_| generate_channels(&cfg, &mut rng).unwrap().h_d[0].norm_squared() / cfg.m as f64)
            .sum::<f64>()
            / trials as f64;
        let want = path_loss(20.0, cfg.alpha_bu, cfg.t0_db).unwrap();
        assert!((mean / want - 1.0).abs() < 0.03, "ratio {}", mean / want);
    }

    #[test]
    fn reflected_link_mean_gain_includes_element_gain() {
        let cfg = fixed_user_config(20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trials = 10_000;
        let mean: f64 = (0..trials)
            .map(|_| generate_channels(&cfg, &mut rng).unwrap().h_r[0].norm_squared() / cfg.n as f64)
            .sum::<f64>()
            / trials as f64;
        let want = path_loss(19.0, cfg.alpha_iu, cfg.t0_db).unwrap() * 10f64.powf(0.3);
        assert!((mean / want - 1.0).abs() < 0.03, "ratio {}", mean / want);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig { m: 3, n: 5, k: 4, ..Default::default() };
        let a = generate_channels(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_channels(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_channels(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_distance_rejected() {
        let cfg = ScenarioConfig {
            k: 1,
            users: UserPlacement::Positions(vec![[0.0, 0.0, 10.0]]),
            ..Default::default()
        };
        let err = generate_channels(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, ChannelError::NonPositiveDistance(_)));
    }

    #[test]
    fn combined_channel_direct_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = ChannelSet {
            h_d: vec![random_cvec(&mut rng, 3)],
            h_r: vec![random_cvec(&mut rng, 2)],
            g: CMatrix::zeros(2, 3),
        };
        let v = PhaseShiftVector::from_angles(&[0.3, 1.1]);
        assert_eq!(combined_channel(&ch, &v, 0), ch.h_d[0]);
    }

    #[test]
    fn combined_channel_scalar() {
        let theta = 0.7;
        let ch = ChannelSet {
            h_d: vec![CVector::zeros(1)],
            h_r: vec![CVector::from_element(1, C64::new(1.0, 0.0))],
            g: CMatrix::from_element(1, 1, C64::new(1.0, 0.0)),
        };
        let h = combined_channel(&ch, &PhaseShiftVector::from_angles(&[theta]), 0);
        // the row hᴴ is e^{jθ}
        let row = h[0].conj();
        assert_relative_eq!(row.re, theta.cos(), epsilon = 1e-15);
        assert_relative_eq!(row.im, theta.sin(), epsilon = 1e-15);
    }

    #[test]
    fn combined_channel_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n) = (3, 5);
        let ch = ChannelSet {
            h_d: vec![random_cvec(&mut rng, m)],
            h_r: vec![random_cvec(&mut rng, n)],
            g: random_cmat(&mut rng, n, m),
        };
        let theta: Vec<f64> = (0..n).map(|i| 0.4 * i as f64 + 0.1).collect();
        let v = PhaseShiftVector::from_angles(&theta);
        let h = combined_channel(&ch, &v, 0);
        for col in 0..m {
            let mut row = ch.h_d[0][col].conj();
            for i in 0..n {
                for j in 0..n {
                    let theta_ij = if i == j { C64::from_polar(1.0, theta[i]) } else { C64::new(0.0, 0.0) };
                    row += ch.h_r[0][i].conj() * theta_ij * ch.g[(j, col)];
                }
            }
            assert!((row - h[col].conj()).norm() < 1e-12);
        }
    }

    fn scalar_bf(ws: &[f64]) -> BeamformerSet {
        BeamformerSet::new(
            ws.iter().map(|&w| CVector::from_element(1, C64::new(w, 0.0))).collect(),
            (0..ws.len()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sinr_single_user() {
        let h = vec![CVector::from_vec(vec![C64::new(1.0, 1.0), C64::new(0.0, 2.0)])];
        let w = vec![CVector::from_vec(vec![C64::new(0.5, 0.0), C64::new(0.0, -1.0)])];
        let bf = BeamformerSet::new(w.clone(), vec![0]).unwrap();
        let s = sinr(&h, &bf, 0, 0, 0.1).unwrap();
        assert_relative_eq!(s, gain(&h[0], &w[0]) / 0.1, max_relative = 1e-14);
    }

    #[test]
    fn sinr_two_user_hand_value() {
        let one = CVector::from_element(1, C64::new(1.0, 0.0));
        let eff = vec![one.clone(), one];
        let bf = scalar_bf(&[2.0, 1.0]);
        assert_relative_eq!(sinr(&eff, &bf, 0, 0, 1.0).unwrap(), 2.0, max_relative = 1e-15);
        assert!(matches!(sinr(&eff, &bf, 1, 0, 1.0), Err(ChannelError::PositionOrder { .. })));
    }

    #[test]
    fn sinr_scale_invariant_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eff: Vec<CVector> = (0..3).map(|_| random_cvec(&mut rng, 2)).collect();
        let w: Vec<CVector> = (0..3).map(|_| random_cvec(&mut rng, 2)).collect();
        let bf = BeamformerSet::new(w.clone(), vec![2, 0, 1]).unwrap();
        let scaled = BeamformerSet::new(w.iter().map(|x| x * C64::new(3.7, 0.0)).collect(), vec![2, 0, 1]).unwrap();
        for k in 0..3 {
            for l in k..3 {
                assert_relative_eq!(
                    sinr(&eff, &bf, k, l, 0.0).unwrap(),
                    sinr(&eff, &scaled, k, l, 0.0).unwrap(),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn gamma_from_rate() {
        let cfg = ScenarioConfig::default();
        assert_relative_eq!(cfg.gamma_min(0), 1.828427, max_relative = 1e-6);
    }

    #[test]
    fn zero_beamformers_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ScenarioConfig { m: 2, n: 3, k: 2, ..Default::default() };
        let ch = generate_channels(&cfg, &mut rng).unwrap();
        let bf = BeamformerSet::zeros(2, vec![0, 1]);
        assert!(!check_feasible(&ch, &PhaseShiftVector::ones(3), &bf, &cfg, 1e-5).feasible);
    }

    #[test]
    fn single_user_mrt_feasible_with_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ScenarioConfig { m: 3, n: 4, k: 1, ..Default::default() };
        let ch = generate_channels(&cfg, &mut rng).unwrap();
        let v = PhaseShiftVector::from_angles(&[0.1, 0.2, 0.3, 0.4]);
        let h = combined_channel(&ch, &v, 0);
        let p = cfg.gamma_min(0) * cfg.noise_power_mw() / h.norm_squared();
        let w = &h * C64::new(p.sqrt() / h.norm(), 0.0);
        let bf = BeamformerSet::new(vec![w], vec![0]).unwrap();
        let f = check_feasible(&ch, &v, &bf, &cfg, 1e-9);
        assert!(f.feasible);
        assert_relative_eq!(f.worst.unwrap().2, 1.0, max_relative = 1e-10);
        let lower = BeamformerSet::new(vec![bf.w[0].clone() * C64::new(0.999, 0.0)], vec![0]).unwrap();
        assert!(!check_feasible(&ch, &v, &lower, &cfg, 1e-9).feasible);
    }

    #[test]
    fn feasibility_agrees_with_trace_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = ScenarioConfig { m: 2, n: 3, k: 3, ..Default::default() };
        let sigma2 = cfg.noise_power_mw();
        for trial in 0..50 {
            let ch = generate_channels(&cfg, &mut rng).unwrap();
            let v = PhaseShiftVector::from_angles(&[0.5, 1.0 + trial as f64, 2.0]);
            let eff = combined_channels(&ch, &v);
            let scale = (sigma2 / eff[0].norm_squared()).sqrt() * 3.0;
            let w: Vec<CVector> = (0..3).map(|_| random_cvec(&mut rng, 2) * C64::new(scale, 0.0)).collect();
            let bf = BeamformerSet::new(w, vec![1, 2, 0]).unwrap();
            let direct = check_feasible_eff(&eff, &bf, &cfg, 0.0);
            let mut trace_ok = true;
            for k in 0..3 {
                for l in k..3 {
                    let hl = lifted_channel(&eff[bf.ordering[l]]);
                    let interf: f64 =
                        (k + 1..3).map(|j| hl.inner(&Hermitian::outer(bf.at_position(j)))).sum();
                    let sig = hl.inner(&Hermitian::outer(bf.at_position(k)));
                    let lhs = cfg.gamma_min(bf.ordering[k]) * (interf + sigma2);
                    if lhs > sig * (1.0 + 1e-8) {
                        trace_ok = false;
                    }
                }
            }
            assert_eq!(direct.feasible, trace_ok);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ScenarioConfig::default().validate().is_ok());
        assert!(ScenarioConfig { m: 0, ..Default::default() }.validate().is_err());
        assert!(ScenarioConfig { rho: 0.0, ..Default::default() }.validate().is_err());
        assert!(ScenarioConfig { eta: -1.0, ..Default::default() }.validate().is_err());
        assert!(ScenarioConfig { k: 2, user_rates: Some(vec![1.0]), ..Default::default() }.validate().is_err());
        // overloaded is allowed
        assert!(ScenarioConfig { m: 2, k: 6, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn lifted_phase_vector_reproduces_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let ch = ChannelSet {
            h_d: vec![random_cvec(&mut rng, 2)],
            h_r: vec![random_cvec(&mut rng, 3)],
            g: random_cmat(&mut rng, 3, 2),
        };
        let w = random_cvec(&mut rng, 2);
        let v = PhaseShiftVector::from_angles(&[0.2, 2.5, 4.0]);
        let a = CVector::from_fn(3, |n, _| ch.h_r[0][n].conj() * (&ch.g * &w)[n]);
        let b = ch.h_d[0].dotc(&w);
        let x = v.lifted();
        let xa: C64 = (0..3).map(|n| x[n].conj() * a[n]).sum();
        let h = combined_channel(&ch, &v, 0);
        assert!((xa + b - h.dotc(&w)).norm() < 1e-12);
    }
}
