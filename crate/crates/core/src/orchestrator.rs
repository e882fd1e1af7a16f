//! Alternating optimization of beamformers and phases, baseline pipelines,
//! and the single-trial driver.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beamforming::{
    solve_beamformers_dc, solve_beamformers_sdr, BeamformingError, DcTrace, LiftedBeamformers,
};
use crate::channel::{combined_channels, generate_channels, mw_to_dbm, BeamformerSet, ChannelError, ChannelSet, PhaseShiftVector, ScenarioConfig};
use crate::numerics::CVector;
use crate::ordering::{order_direct_link, order_eigen, order_exhaustive, order_sdr, OrderingError, OrderingScheme, PipelinePower};
use crate::phase::{build_phase_data, quantize_phases, random_phase, solve_phase_dc, solve_phase_sdr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Dc,
    Sdr,
    #[serde(rename = "random")]
    RandomPhase,
    #[serde(rename = "noris")]
    NoRis,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Dc => "dc",
            Optimizer::Sdr => "sdr",
            Optimizer::RandomPhase => "random",
            Optimizer::NoRis => "noris",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dc" => Ok(Optimizer::Dc),
            "sdr" => Ok(Optimizer::Sdr),
            "random" => Ok(Optimizer::RandomPhase),
            "noris" => Ok(Optimizer::NoRis),
            other => Err(format!("unknown scheme '{other}' (expected dc|sdr|random|noris)")),
        }
    }
}

/// Phase resolution applied after optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Quantization {
    #[default]
    Continuous,
    Bits(u32),
}

impl fmt::Display for Quantization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantization::Continuous => f.write_str("continuous"),
            Quantization::Bits(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Quantization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("continuous") {
            return Ok(Quantization::Continuous);
        }
        match s.parse::<u32>() {
            Ok(b) if (1..=16).contains(&b) => Ok(Quantization::Bits(b)),
            _ => Err(format!("invalid phase resolution '{s}' (expected 1..16 or continuous)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    PhaseInfeasible,
    MaxIters,
    BeamformingInfeasible,
    /// The beamformer re-solve failed for the quantized phases.
    QuantizationInfeasible,
    /// The ordering stage failed (solver failure or every order infeasible).
    OrderingFailed,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::PhaseInfeasible => "phase_infeasible",
            Termination::MaxIters => "max_iters",
            Termination::BeamformingInfeasible => "beamforming_infeasible",
            Termination::QuantizationInfeasible => "quantization_infeasible",
            Termination::OrderingFailed => "ordering_failed",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Reported total power, after quantization when requested. `None` when
    /// no feasible point was found.
    pub total_power_mw: Option<f64>,
    pub total_power_dbm: Option<f64>,
    /// Power before quantization.
    pub continuous_power_mw: Option<f64>,
    /// Accepted beamformer solves.
    pub outer_iterations: usize,
    pub termination: Termination,
    /// Total power after each accepted beamformer step.
    pub power_trace: Vec<f64>,
    pub beamformers: Option<BeamformerSet>,
    pub phases: PhaseShiftVector,
    pub optimizer: Optimizer,
    pub ordering_scheme: OrderingScheme,
    pub permutation: Vec<usize>,
    pub quantization: Quantization,
    /// Inner DC histories of the beamformer and phase steps, in call order.
    pub beamformer_traces: Vec<DcTrace>,
    pub phase_traces: Vec<DcTrace>,
    /// `Σ_k (‖W_k‖_* − ‖W_k‖_2)` and `Σ_k Tr W_k` of the reported lifted
    /// beamformers (DC only).
    pub final_beamformer_penalty: Option<(f64, f64)>,
    /// Rank-one penalty of the lifted phase matrix behind the reported
    /// phases (DC only, absent when the initial phases were kept).
    pub final_phase_penalty: Option<f64>,
}

impl RunResult {
    fn empty(optimizer: Optimizer, phases: PhaseShiftVector, permutation: Vec<usize>, termination: Termination) -> Self {
        RunResult {
            total_power_mw: None,
            total_power_dbm: None,
            continuous_power_mw: None,
            outer_iterations: 0,
            termination,
            power_trace: vec![],
            beamformers: None,
            phases,
            optimizer,
            ordering_scheme: OrderingScheme::Direct,
            permutation,
            quantization: Quantization::Continuous,
            beamformer_traces: vec![],
            phase_traces: vec![],
            final_beamformer_penalty: None,
            final_phase_penalty: None,
        }
    }

    fn set_power(&mut self, p: Option<f64>) {
        self.total_power_mw = p;
        self.total_power_dbm = p.map(mw_to_dbm);
    }

    /// Power trace never increases by more than `rel_slack · max(1, |P|)`.
    pub fn trace_is_monotone(&self, rel_slack: f64) -> bool {
        self.power_trace.windows(2).all(|p| p[1] <= p[0] + rel_slack * p[0].abs().max(1.0))
    }
}

struct BfStep {
    bf: BeamformerSet,
    lifted: Option<LiftedBeamformers>,
    trace: Option<DcTrace>,
}

impl BfStep {
    fn power(&self) -> f64 {
        self.bf.total_power()
    }
}

/// One beamformer solve. The DC path starts from the SDR solution and, when
/// that lands above `prev_power`, retries warm-started from the previous
/// beamformers, which stay feasible under the new phases.
fn beamformer_step(
    eff: &[CVector],
    ordering: &[usize],
    config: &ScenarioConfig,
    optimizer: Optimizer,
    prev: Option<(&BeamformerSet, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<BfStep, BeamformingError> {
    if optimizer == Optimizer::Sdr {
        let (bf, _) = solve_beamformers_sdr(eff, ordering, config, config.n_randomizations, rng)?;
        return Ok(BfStep { bf, lifted: None, trace: None });
    }
    let cold = solve_beamformers_dc(eff, ordering, config, None)
        .map(|o| BfStep { bf: o.beamformers, lifted: Some(o.lifted), trace: Some(o.trace) });
    let Some((prev_bf, prev_power)) = prev else { return cold };
    if matches!(&cold, Ok(s) if s.power() <= prev_power) {
        return cold;
    }
    let init = LiftedBeamformers::from_vectors(&prev_bf.w);
    let warm = solve_beamformers_dc(eff, ordering, config, Some(&init))
        .map(|o| BfStep { bf: o.beamformers, lifted: Some(o.lifted), trace: Some(o.trace) });
    match (cold, warm) {
        (Ok(c), Ok(w)) => Ok(if w.power() < c.power() { w } else { c }),
        (Ok(c), Err(_)) => Ok(c),
        (Err(_), w) => w,
    }
}

/// Alternates beamformer and phase steps for a fixed decode order.
///
/// The initial phases are drawn from `rng`. `RandomPhase` and `NoRis` stop
/// after the first beamformer step.
pub fn alternate(
    config: &ScenarioConfig,
    ch: &ChannelSet,
    ordering: &[usize],
    optimizer: Optimizer,
    rng: &mut ChaCha8Rng,
) -> RunResult {
    let n = ch.n_elements();
    let theta0 = random_phase(n, rng);
    let ch_used;
    let ch = if optimizer == Optimizer::NoRis {
        ch_used = ch.without_ris();
        &ch_used
    } else {
        ch
    };
    let mut result = RunResult::empty(optimizer, theta0.clone(), ordering.to_vec(), Termination::Converged);

    let eff = combined_channels(ch, &theta0);
    let mut step = match beamformer_step(&eff, ordering, config, optimizer, None, rng) {
        Ok(s) => s,
        Err(_) => {
            result.termination = Termination::BeamformingInfeasible;
            return result;
        }
    };
    let record = |result: &mut RunResult, step: &BfStep| {
        result.power_trace.push(step.power());
        result.outer_iterations += 1;
        if let Some(t) = &step.trace {
            result.beamformer_traces.push(t.clone());
        }
        result.final_beamformer_penalty = step.lifted.as_ref().map(|l| (l.penalty, l.total_power));
    };
    record(&mut result, &step);

    let alternating = matches!(optimizer, Optimizer::Dc | Optimizer::Sdr) && n > 0;
    if alternating {
        result.termination = Termination::MaxIters;
        for _ in 1..config.max_outer_iters {
            let data = build_phase_data(ch, &step.bf);
            let phase = match optimizer {
                Optimizer::Dc => solve_phase_dc(&data, config, None).map(|(v, l, t)| (v, Some((l, t)))),
                _ => solve_phase_sdr(&data, config, config.n_randomizations, rng).map(|(v, _)| (v, None)),
            };
            let Ok((v, lifted)) = phase else {
                result.termination = Termination::PhaseInfeasible;
                break;
            };
            let prev_power = step.power();
            let eff = combined_channels(ch, &v);
            let next = match beamformer_step(&eff, ordering, config, optimizer, Some((&step.bf, prev_power)), rng) {
                Ok(s) => s,
                Err(_) => {
                    result.termination = Termination::PhaseInfeasible;
                    break;
                }
            };
            if let Some((_, t)) = &lifted {
                result.phase_traces.push(t.clone());
            }
            if next.power() > prev_power {
                // no improvement: keep the previous iterate
                result.termination = Termination::Converged;
                break;
            }
            step = next;
            result.phases = v;
            result.final_phase_penalty = lifted.map(|(l, _)| l.penalty);
            record(&mut result, &step);
            if (prev_power - step.power()) / prev_power < config.epsilon {
                result.termination = Termination::Converged;
                break;
            }
        }
    }
    let p = step.power();
    result.set_power(Some(p));
    result.continuous_power_mw = Some(p);
    result.beamformers = Some(step.bf);
    result
}

/// The channel stream and the algorithm stream of a trial. Schemes run with
/// the same seed see the same channels and the same initial phases.
pub fn trial_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let ch_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alg_rng = ChaCha8Rng::seed_from_u64(seed);
    alg_rng.set_stream(1);
    (ch_rng, alg_rng)
}

/// Decode order for a scheme other than exhaustive search.
pub fn heuristic_order(ch: &ChannelSet, config: &ScenarioConfig, scheme: OrderingScheme) -> Result<Vec<usize>, OrderingError> {
    Ok(match scheme {
        OrderingScheme::Direct => order_direct_link(ch).permutation,
        OrderingScheme::Eigen => order_eigen(ch, config).permutation,
        OrderingScheme::Sdr => order_sdr(ch, config)?.permutation,
        OrderingScheme::Exhaustive => unreachable!("exhaustive search needs the pipeline"),
    })
}

/// Orders, alternates and optionally quantizes on a given channel
/// realization.
pub fn run_on_channels(
    config: &ScenarioConfig,
    ch: &ChannelSet,
    alg_rng: &ChaCha8Rng,
    scheme: OrderingScheme,
    optimizer: Optimizer,
    quantization: Quantization,
) -> RunResult {
    let ordering_ch = if optimizer == Optimizer::NoRis { ch.without_ris() } else { ch.clone() };
    let permutation = match scheme {
        OrderingScheme::Exhaustive => {
            let pipeline = |perm: &[usize]| {
                let r = alternate(config, ch, perm, optimizer, &mut alg_rng.clone());
                let bf = r.beamformers.as_ref()?;
                Some(PipelinePower { total: r.total_power_mw?, per_user: bf.w.iter().map(|w| w.norm_squared()).collect() })
            };
            order_exhaustive(ch.n_users(), pipeline).map(|r| r.ordering.permutation)
        }
        s => heuristic_order(&ordering_ch, config, s),
    };
    let Ok(permutation) = permutation else {
        let mut r = RunResult::empty(optimizer, PhaseShiftVector::ones(ch.n_elements()), vec![], Termination::OrderingFailed);
        r.ordering_scheme = scheme;
        r.quantization = quantization;
        return r;
    };
    let mut rng = alg_rng.clone();
    let mut result = alternate(config, ch, &permutation, optimizer, &mut rng);
    result.ordering_scheme = scheme;
    result.quantization = quantization;

    if let (Quantization::Bits(b), Some(_)) = (quantization, result.total_power_mw) {
        if optimizer != Optimizer::NoRis && ch.n_elements() > 0 {
            let vq = quantize_phases(&result.phases, b);
            let eff = combined_channels(ch, &vq);
            result.phases = vq;
            match beamformer_step(&eff, &permutation, config, optimizer, None, &mut rng) {
                Ok(s) => {
                    result.set_power(Some(s.power()));
                    result.beamformers = Some(s.bf);
                }
                Err(_) => {
                    result.set_power(None);
                    result.beamformers = None;
                    result.termination = Termination::QuantizationInfeasible;
                }
            }
        }
    }
    result
}

/// One Monte Carlo trial: channels, ordering, alternation, quantization.
pub fn run_trial(
    config: &ScenarioConfig,
    seed: u64,
    scheme: OrderingScheme,
    optimizer: Optimizer,
    quantization: Quantization,
) -> Result<RunResult, ChannelError> {
    let (mut ch_rng, alg_rng) = trial_streams(seed);
    let ch = generate_channels(config, &mut ch_rng)?;
    Ok(run_on_channels(config, &ch, &alg_rng, scheme, optimizer, quantization))
}
