//! Langevin dynamics with optional Metropolis-Hastings correction, plus
//! chain bookkeeping for cold, contrastive-divergence, persistent, and
//! generator-initialized starts.
//!
//! One step moves `X` to `X - (s²/2)·∂U/∂X + s·ε` with `ε ~ N(0, I)`. The MH
//! correction accepts or rejects against the asymmetric Gaussian proposal
//! density, which makes the chain exactly stationary for the target; training
//! loops run uncorrected finite-step chains and the correction is switched on
//! for sampler-accuracy tests.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::tensor::{Tensor, TensorError};

/// A coordinate beyond this magnitude flags the chain as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("step size must be positive, got {0}")]
    BadStepSize(f64),
    #[error("step count must be at least 1")]
    BadStepCount,
    #[error("chain inits must share one shape: {0:?} vs {1:?}")]
    MixedShapes(Vec<usize>, Vec<usize>),
    #[error("{mode} initialization needs {what}")]
    MissingSource { mode: &'static str, what: &'static str },
    #[error("energy evaluation failed: {0}")]
    Energy(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub steps: usize,
    pub mh_correct: bool,
    pub rng_seed: u64,
}

impl LangevinConfig {
    pub fn new(step_size: f64, steps: usize) -> Result<Self, McmcError> {
        if !(step_size > 0.0) {
            return Err(McmcError::BadStepSize(step_size));
        }
        if steps == 0 {
            return Err(McmcError::BadStepCount);
        }
        Ok(Self {
            step_size,
            steps,
            mh_correct: false,
            rng_seed: 0,
        })
    }

    pub fn with_mh(mut self, on: bool) -> Self {
        self.mh_correct = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

/// One chain's current point, its energy under the target, and its age in
/// steps. The energy is recomputed on every update.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub point: Tensor,
    pub energy: f64,
    pub age: u64,
    pub diverged: bool,
}

impl ChainState {
    pub fn new(point: Tensor, target: &dyn EnergyTarget) -> Result<Self, McmcError> {
        let energy = target.energy(&point)?;
        Ok(Self {
            point,
            energy,
            age: 0,
            diverged: false,
        })
    }
}

/// An energy function U with its gradient ∂U/∂X; must be safe for concurrent
/// read-only evaluation.
pub trait EnergyTarget: Sync {
    fn energy_grad(&self, x: &Tensor) -> Result<(f64, Tensor), McmcError>;

    fn energy(&self, x: &Tensor) -> Result<f64, McmcError> {
        Ok(self.energy_grad(x)?.0)
    }
}

impl<F> EnergyTarget for F
where
    F: Fn(&Tensor) -> (f64, Tensor) + Sync,
{
    fn energy_grad(&self, x: &Tensor) -> Result<(f64, Tensor), McmcError> {
        Ok(self(x))
    }
}

/// One Langevin update. Non-finite gradients or runaway coordinates flag the
/// state as diverged and leave the point where it was; the caller decides the
/// reset policy.
pub fn langevin_step(
    state: &ChainState,
    target: &dyn EnergyTarget,
    cfg: &LangevinConfig,
    rng: &mut Stream,
) -> Result<ChainState, McmcError> {
    langevin_step_scaled(state, target, cfg, rng, 1.0)
}

/// Langevin update with the noise term scaled by `noise_scale`; 0 gives the
/// zero-temperature limit (plain gradient descent on U).
pub fn langevin_step_scaled(
    state: &ChainState,
    target: &dyn EnergyTarget,
    cfg: &LangevinConfig,
    rng: &mut Stream,
    noise_scale: f64,
) -> Result<ChainState, McmcError> {
    let s = cfg.step_size;
    let (energy, grad) = match target.energy_grad(&state.point) {
        Ok(pair) => pair,
        Err(McmcError::Tensor(TensorError::NonFinite { .. }))
        | Err(McmcError::Tensor(TensorError::NonFiniteNode { .. })) => {
            return Ok(flag_diverged(state));
        }
        Err(e) => return Err(e),
    };

    let noise = rng::normal_tensor(state.point.shape(), rng);
    let drifted = state.point.add_scaled(&grad, -s * s / 2.0)?;
    let proposal = match drifted.add_scaled(&noise, s * noise_scale) {
        Ok(p) => p,
        Err(_) => return Ok(flag_diverged(state)),
    };

    if proposal.max_abs() > DIVERGENCE_LIMIT {
        return Ok(flag_diverged(state));
    }

    let (accepted_point, accepted_energy) = if cfg.mh_correct {
        let (prop_energy, prop_grad) = match target.energy_grad(&proposal) {
            Ok(pair) => pair,
            Err(_) => return Ok(flag_diverged(state)),
        };
        // log q(y|x) for the drifted Gaussian proposal y ~ N(x - (s²/2)∇U(x), s²I)
        let log_q_forward = -noise.squared_norm() * noise_scale * noise_scale / 2.0;
        let back_mean = proposal.add_scaled(&prop_grad, -s * s / 2.0)?;
        let back_dev = state.point.add_scaled(&back_mean, -1.0)?;
        let log_q_backward = -back_dev.squared_norm() / (2.0 * s * s);
        let log_alpha = energy - prop_energy + log_q_backward - log_q_forward;
        if (rng.random::<f64>()).ln() < log_alpha {
            (proposal, prop_energy)
        } else {
            (state.point.clone(), energy)
        }
    } else {
        let prop_energy = match target.energy(&proposal) {
            Ok(e) => e,
            Err(_) => return Ok(flag_diverged(state)),
        };
        (proposal, prop_energy)
    };

    if !accepted_energy.is_finite() {
        return Ok(flag_diverged(state));
    }
    Ok(ChainState {
        point: accepted_point,
        energy: accepted_energy,
        age: state.age + 1,
        diverged: false,
    })
}

fn flag_diverged(state: &ChainState) -> ChainState {
    ChainState {
        point: state.point.clone(),
        energy: state.energy,
        age: state.age + 1,
        diverged: true,
    }
}

/// Evolves every chain `cfg.steps` Langevin steps. Chains advance
/// concurrently on independent substreams derived from `rng`, so results are
/// reproducible and statistically independent. Divergence flags are carried
/// per chain.
pub fn run_chains(
    inits: &[Tensor],
    target: &dyn EnergyTarget,
    cfg: &LangevinConfig,
    rng: &mut Stream,
) -> Result<Vec<ChainState>, McmcError> {
    if let Some(first) = inits.first() {
        for t in inits {
            if t.shape() != first.shape() {
                return Err(McmcError::MixedShapes(
                    first.shape().to_vec(),
                    t.shape().to_vec(),
                ));
            }
        }
    }
    let seeds: Vec<u64> = inits.iter().map(|_| rng.random()).collect();
    inits
        .par_iter()
        .zip(seeds)
        .map(|(init, seed)| {
            let mut chain_rng = rng::seeded(seed);
            let mut state = ChainState::new(init.clone(), target)?;
            for _ in 0..cfg.steps {
                if state.diverged {
                    break;
                }
                state = langevin_step(&state, target, cfg, &mut chain_rng)?;
            }
            Ok(state)
        })
        .collect()
}

/// Runs a single chain and records every state, for diagnostics.
pub fn run_chain_traced(
    init: Tensor,
    target: &dyn EnergyTarget,
    cfg: &LangevinConfig,
    rng: &mut Stream,
) -> Result<Vec<ChainState>, McmcError> {
    let mut state = ChainState::new(init, target)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(state.clone());
    for _ in 0..cfg.steps {
        if state.diverged {
            break;
        }
        state = langevin_step(&state, target, cfg, rng)?;
        trace.push(state.clone());
    }
    Ok(trace)
}

/// Dumps a chain trace as CSV: step, energy, then one column per coordinate.
pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[ChainState]) -> std::io::Result<()> {
    let dim = trace.first().map_or(0, |s| s.point.len());
    write!(w, "step,energy")?;
    for i in 0..dim {
        write!(w, ",x{i}")?;
    }
    writeln!(w)?;
    for state in trace {
        write!(w, "{},{}", state.age, state.energy)?;
        for v in state.point.values() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reference distribution p0 for signals: white noise or a uniform box.
#[derive(Debug, Clone, Copy)]
pub enum Reference {
    Gaussian { sigma2: f64 },
    UniformBox { lo: f64, hi: f64 },
}

impl Reference {
    pub fn sample(&self, shape: &[usize], rng: &mut Stream) -> Tensor {
        match self {
            Reference::Gaussian { sigma2 } => rng::normal_tensor(shape, rng)
                .scale(sigma2.sqrt())
                .expect("finite"),
            Reference::UniformBox { lo, hi } => rng::uniform_tensor(shape, *lo, *hi, rng),
        }
    }

    /// Normalized log-density at x.
    pub fn log_density(&self, x: &Tensor) -> f64 {
        let p = x.len() as f64;
        match self {
            Reference::Gaussian { sigma2 } => {
                -x.squared_norm() / (2.0 * sigma2)
                    - 0.5 * p * (2.0 * std::f64::consts::PI * sigma2).ln()
            }
            Reference::UniformBox { lo, hi } => {
                if x.values().iter().all(|v| *v >= *lo && *v <= *hi) {
                    -p * (hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// ∇ log p0(x); for the uniform box this is zero in the interior.
    pub fn log_density_grad(&self, x: &Tensor) -> Tensor {
        match self {
            Reference::Gaussian { sigma2 } => x.scale(-1.0 / sigma2).expect("finite"),
            Reference::UniformBox { .. } => Tensor::zeros(x.shape()),
        }
    }
}

/// A model that can propose chain initializations directly (a generator
/// decoding prior draws).
pub trait InitSampler: Sync {
    fn sample_init(&self, rng: &mut Stream) -> Result<Tensor, McmcError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Draws from the reference p0.
    Cold,
    /// Copies of the observed mini-batch.
    ContrastiveDivergence,
    /// Entries retrieved from the persistent pool, updated after sampling.
    Persistent,
    /// Decoded generator draws.
    GeneratorInit,
}

/// Produces chain initializations per [`InitMode`] and keeps the persistent
/// pool between sampling phases. The pool has a single writer: `draw` hands
/// out clones, `absorb` stores the post-sampling states back.
#[derive(Debug)]
pub struct ChainPool {
    mode: InitMode,
    reference: Reference,
    shape: Vec<usize>,
    pool: Vec<Tensor>,
    capacity: usize,
}

impl ChainPool {
    pub fn new(mode: InitMode, reference: Reference, shape: &[usize], capacity: usize) -> Self {
        Self {
            mode,
            reference,
            shape: shape.to_vec(),
            pool: Vec::new(),
            capacity,
        }
    }

    pub fn mode(&self) -> InitMode {
        self.mode
    }

    pub fn draw(
        &mut self,
        n: usize,
        observed: Option<&[Tensor]>,
        generator: Option<&dyn InitSampler>,
        rng: &mut Stream,
    ) -> Result<Vec<Tensor>, McmcError> {
        match self.mode {
            InitMode::Cold => Ok(self.cold(n, rng)),
            InitMode::ContrastiveDivergence => {
                let batch = observed.ok_or(McmcError::MissingSource {
                    mode: "cd",
                    what: "an observed mini-batch",
                })?;
                if batch.len() < n {
                    return Err(McmcError::MissingSource {
                        mode: "cd",
                        what: "at least as many observed examples as chains",
                    });
                }
                Ok(batch[..n].to_vec())
            }
            InitMode::Persistent => {
                // Empty pool (first use) falls back to a cold start.
                let mut inits: Vec<Tensor> = self.pool.iter().take(n).cloned().collect();
                let missing = n - inits.len();
                inits.extend(self.cold(missing, rng));
                Ok(inits)
            }
            InitMode::GeneratorInit => {
                let g = generator.ok_or(McmcError::MissingSource {
                    mode: "generator-init",
                    what: "a generator",
                })?;
                (0..n).map(|_| g.sample_init(rng)).collect()
            }
        }
    }

    /// Stores post-sampling states for the next persistent retrieval.
    pub fn absorb(&mut self, samples: &[Tensor]) {
        if self.mode != InitMode::Persistent {
            return;
        }
        for s in samples {
            if self.pool.len() < self.capacity {
                self.pool.push(s.clone());
            }
        }
        // Newest states replace the oldest once at capacity.
        if self.pool.len() == self.capacity {
            let keep = self.capacity.saturating_sub(samples.len());
            self.pool.rotate_left(self.capacity - keep.max(0));
            for (slot, s) in self.pool.iter_mut().rev().zip(samples.iter().rev()) {
                *slot = s.clone();
            }
        }
    }

    fn cold(&self, n: usize, rng: &mut Stream) -> Vec<Tensor> {
        (0..n).map(|_| self.reference.sample(&self.shape, rng)).collect()
    }
}
