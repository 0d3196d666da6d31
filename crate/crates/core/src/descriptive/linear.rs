//! The linear descriptive model p_θ(X) = exp[h(X)ᵀθ] p₀(X) / Z(θ), with
//! exact maximum likelihood on enumerable domains and Langevin-based
//! maximum likelihood on continuous spaces.

use rand::Rng as _;

use crate::mcmc::{run_chains, EnergyTarget, LangevinConfig, McmcError, Reference};
use crate::oracle::{brute_force_logz, Domain, KahanSum};
use crate::rng::Stream;
use crate::tensor::Tensor;

use super::feature::{feature_stats, FeatureMap};
use super::DescriptiveError;

#[derive(Debug, Clone)]
pub struct LinearDescriptiveModel {
    pub theta: Vec<f64>,
    pub feature_map: FeatureMap,
    pub reference: Reference,
    /// Exact log Z(θ) when it has been computed against a domain.
    pub log_z: Option<f64>,
}

impl LinearDescriptiveModel {
    pub fn new(theta: Vec<f64>, feature_map: FeatureMap, reference: Reference) -> Self {
        debug_assert_eq!(theta.len(), feature_map.dim());
        Self {
            theta,
            feature_map,
            reference,
            log_z: None,
        }
    }

    /// h(X)ᵀθ + log p₀(X), the unnormalized log-density.
    pub fn log_unnorm_density(&self, x: &Tensor) -> Result<f64, DescriptiveError> {
        let h = self.feature_map.eval(x)?;
        let dot: f64 = h.iter().zip(&self.theta).map(|(a, b)| a * b).sum();
        Ok(dot + self.reference.log_density(x))
    }

    /// Caches the exact normalizer for this model on the given domain.
    pub fn compute_log_z(&mut self, domain: &Domain) -> Result<f64, DescriptiveError> {
        let lz = brute_force_logz(|x| self.log_unnorm_density(x).unwrap_or(f64::NAN), domain)?;
        self.log_z = Some(lz);
        Ok(lz)
    }

    pub fn log_density(&self, x: &Tensor) -> Result<f64, DescriptiveError> {
        let lz = self.log_z.ok_or(DescriptiveError::MissingLogZ)?;
        Ok(self.log_unnorm_density(x)? - lz)
    }

    /// Exact E_θ[h] on an enumerable domain.
    pub fn exact_feature_expectation(
        &self,
        domain: &Domain,
    ) -> Result<Vec<f64>, DescriptiveError> {
        let table = DomainTable::build(domain, &self.feature_map, &self.reference)?;
        Ok(table.expectation(&self.theta))
    }
}

impl EnergyTarget for LinearDescriptiveModel {
    fn energy_grad(&self, x: &Tensor) -> Result<(f64, Tensor), McmcError> {
        let u = -self
            .log_unnorm_density(x)
            .map_err(|e| McmcError::Energy(e.to_string()))?;
        let feat_grad = self
            .feature_map
            .grad_dot(x, &self.theta)
            .map_err(|e| McmcError::Energy(e.to_string()))?;
        // ∂U/∂X = -∇θᵀh(X) - ∇log p₀(X)
        let ref_grad = self.reference.log_density_grad(x);
        let grad = ref_grad.add_scaled(&feat_grad, -1.0)?.scale(-1.0)?;
        Ok((u, grad))
    }
}

/// Per-state features and reference log-weights, precomputed once per fit.
struct DomainTable {
    features: Vec<Vec<f64>>,
    log_base: Vec<f64>, // log p0 + log quadrature weight
    dim: usize,
}

impl DomainTable {
    fn build(
        domain: &Domain,
        map: &FeatureMap,
        reference: &Reference,
    ) -> Result<Self, DescriptiveError> {
        let mut features = Vec::with_capacity(domain.len());
        let mut log_base = Vec::with_capacity(domain.len());
        for (x, w) in domain.points() {
            features.push(map.eval(x)?);
            log_base.push(reference.log_density(x) + w.ln());
        }
        Ok(Self {
            features,
            log_base,
            dim: map.dim(),
        })
    }

    /// Normalized state log-probabilities under θ.
    fn log_probs(&self, theta: &[f64]) -> Vec<f64> {
        let mut logs: Vec<f64> = self
            .features
            .iter()
            .zip(&self.log_base)
            .map(|(h, lb)| h.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + lb)
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = KahanSum::default();
        for l in &logs {
            z.add((l - m).exp());
        }
        let logz = m + z.value().ln();
        for l in &mut logs {
            *l -= logz;
        }
        logs
    }

    fn log_z(&self, theta: &[f64]) -> f64 {
        let logs: Vec<f64> = self
            .features
            .iter()
            .zip(&self.log_base)
            .map(|(h, lb)| h.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + lb)
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = KahanSum::default();
        for l in &logs {
            z.add((l - m).exp());
        }
        m + z.value().ln()
    }

    fn expectation(&self, theta: &[f64]) -> Vec<f64> {
        let logp = self.log_probs(theta);
        let mut acc = vec![KahanSum::default(); self.dim];
        for (h, lp) in self.features.iter().zip(&logp) {
            let p = lp.exp();
            for (a, v) in acc.iter_mut().zip(h) {
                a.add(p * v);
            }
        }
        acc.iter().map(|a| a.value()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvexAscentConfig {
    pub max_iters: usize,
    /// Convergence threshold on ‖E_θ[h] − h̄‖_∞.
    pub tol: f64,
    pub init_step: f64,
}

impl Default for ConvexAscentConfig {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol: 1e-6,
            init_step: 1.0,
        }
    }
}

/// Exact maximum likelihood of a linear descriptive model on an enumerable
/// domain: full-gradient ascent with backtracking line search on the exact
/// log-likelihood ℓ(θ) = θᵀh̄ − log Z(θ). The log-likelihood is concave, so
/// the optimum is global; at convergence the model matches the data to
/// ‖E_θ[h] − h̄‖_∞ < tol.
pub fn fit_linear_exact(
    data: &[Tensor],
    map: FeatureMap,
    reference: Reference,
    domain: &Domain,
    opt: &ConvexAscentConfig,
) -> Result<LinearDescriptiveModel, DescriptiveError> {
    let target = feature_stats(data, &map)?;
    fit_linear_exact_to_moments(&target, map, reference, domain, opt)
}

/// Same as [`fit_linear_exact`] but with the empirical moments h̄ given
/// directly, which is what the exact-mode bridges need.
pub fn fit_linear_exact_to_moments(
    target: &[f64],
    map: FeatureMap,
    reference: Reference,
    domain: &Domain,
    opt: &ConvexAscentConfig,
) -> Result<LinearDescriptiveModel, DescriptiveError> {
    let table = DomainTable::build(domain, &map, &reference)?;
    let d = map.dim();
    assert_eq!(target.len(), d);

    // Moments at the boundary of the achievable range make the MLE diverge;
    // report the offending coordinate instead of looping forever.
    for k in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for h in &table.features {
            lo = lo.min(h[k]);
            hi = hi.max(h[k]);
        }
        if hi - lo > 1e-12 && (target[k] <= lo + 1e-12 || target[k] >= hi - 1e-12) {
            return Err(DescriptiveError::BoundaryInfeasible { coord: k });
        }
        if target[k] < lo - 1e-9 || target[k] > hi + 1e-9 {
            return Err(DescriptiveError::BoundaryInfeasible { coord: k });
        }
    }

    let mut theta = vec![0.0; d];
    let loglik = |th: &[f64]| -> f64 {
        th.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() - table.log_z(th)
    };
    let mut ll = loglik(&theta);
    let mut step = opt.init_step;
    let mut converged = false;
    for _ in 0..opt.max_iters {
        let expect = table.expectation(&theta);
        let grad: Vec<f64> = target.iter().zip(&expect).map(|(a, b)| a - b).collect();
        let inf_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if inf_norm < opt.tol {
            converged = true;
            break;
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        // Backtracking Armijo ascent; concavity guarantees progress, so the
        // log-likelihood never decreases between iterations.
        loop {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            let cand_ll = loglik(&cand);
            if cand_ll >= ll + 1e-4 * step * g2 {
                theta = cand;
                ll = cand_ll;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                // Gradient too small to make progress at machine precision.
                converged = inf_norm < opt.tol * 10.0;
                break;
            }
        }
        if step < 1e-18 {
            break;
        }
        if theta.iter().any(|t| t.abs() > 1e6) {
            return Err(DescriptiveError::ThetaDiverged);
        }
    }
    if !converged {
        let expect = table.expectation(&theta);
        let inf_norm = target
            .iter()
            .zip(&expect)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if inf_norm >= opt.tol {
            return Err(DescriptiveError::NoConvergence { residual: inf_norm });
        }
    }

    let mut model = LinearDescriptiveModel::new(theta, map, reference);
    model.log_z = Some(table.log_z(&model.theta));
    Ok(model)
}

#[derive(Debug, Clone, Copy)]
pub enum DecayRule {
    Constant,
    /// η_t = η₀ · ln 2 / ln(t/period + 2): decays logarithmically, stepping
    /// once per `period` iterations.
    LogEvery { period: usize },
}

impl DecayRule {
    pub fn rate(&self, base: f64, t: usize) -> f64 {
        match self {
            DecayRule::Constant => base,
            DecayRule::LogEvery { period } => {
                base * std::f64::consts::LN_2 / ((t / period) as f64 + 2.0).ln()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LangevinFitConfig {
    pub iters: usize,
    pub n_chains: usize,
    pub learning_rate: f64,
    pub decay: DecayRule,
    /// Keep chain states across iterations (persistent chains) instead of
    /// restarting cold each time.
    pub persistent: bool,
}

impl Default for LangevinFitConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            n_chains: 64,
            learning_rate: 0.1,
            decay: DecayRule::LogEvery { period: 10 },
            persistent: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearFitStat {
    pub iter: usize,
    /// ‖h̄ − synthesized mean‖₂
    pub discrepancy: f64,
}

/// Maximum likelihood by stochastic gradient ascent with Langevin-sampled
/// synthesis: θ ← θ + η_t [h̄ − mean h(X̃)]. A diverged iteration is retried
/// once from a cold start, then the fit aborts.
pub fn fit_linear_langevin(
    data: &[Tensor],
    map: FeatureMap,
    reference: Reference,
    lang_cfg: &LangevinConfig,
    cfg: &LangevinFitConfig,
    rng: &mut Stream,
) -> Result<(LinearDescriptiveModel, Vec<LinearFitStat>), DescriptiveError> {
    let target = feature_stats(data, &map)?;
    let shape = data[0].shape().to_vec();
    let mut model = LinearDescriptiveModel::new(vec![0.0; map.dim()], map, reference);
    let mut stats = Vec::with_capacity(cfg.iters);
    let mut chains: Vec<Tensor> = (0..cfg.n_chains)
        .map(|_| reference.sample(&shape, rng))
        .collect();
    let mut retried = false;

    let mut t = 0;
    while t < cfg.iters {
        let inits: Vec<Tensor> = if cfg.persistent {
            chains.clone()
        } else {
            (0..cfg.n_chains).map(|_| reference.sample(&shape, rng)).collect()
        };
        let states = run_chains(&inits, &model, lang_cfg, rng)?;
        if states.iter().any(|s| s.diverged) {
            if retried {
                return Err(DescriptiveError::ChainDiverged);
            }
            retried = true;
            chains = (0..cfg.n_chains).map(|_| reference.sample(&shape, rng)).collect();
            continue;
        }
        let synth: Vec<Tensor> = states.into_iter().map(|s| s.point).collect();
        let synth_stats = feature_stats(&synth, &model.feature_map)?;
        let eta = cfg.decay.rate(cfg.learning_rate, t);
        let mut disc2 = 0.0;
        for ((th, tgt), syn) in model.theta.iter_mut().zip(&target).zip(&synth_stats) {
            let g = tgt - syn;
            disc2 += g * g;
            *th += eta * g;
        }
        stats.push(LinearFitStat {
            iter: t,
            discrepancy: disc2.sqrt(),
        });
        if cfg.persistent {
            chains = synth;
        }
        t += 1;
    }
    Ok((model, stats))
}

/// Convenience constructor used by the 2-D demos: unit vectors at evenly
/// spaced angles plus the coordinate axes.
pub fn unit_direction_candidates(count: usize, rng: &mut Stream) -> Vec<Tensor> {
    let mut dirs = vec![
        Tensor::vector(&[1.0, 0.0]).expect("finite"),
        Tensor::vector(&[0.0, 1.0]).expect("finite"),
    ];
    for _ in 0..count {
        let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
        dirs.push(Tensor::vector(&[a.cos(), a.sin()]).expect("finite"));
    }
    dirs
}
