//! Joint transmit beamforming and RIS phase-shift design for downlink NOMA
//! power minimization.
//!
//! The beamformer and phase subproblems are lifted to matrix variables and
//! driven to rank one by a difference-of-convex penalty (nuclear minus
//! spectral norm); the two steps alternate until the total transmit power
//! stops decreasing. Semidefinite-relaxation and random-phase baselines,
//! four decode-order schemes and a seeded Monte Carlo sweep harness are
//! included.

pub mod beamforming;
pub mod channel;
pub mod conic;
pub mod experiments;
pub mod numerics;
pub mod orchestrator;
pub mod ordering;
pub mod phase;
