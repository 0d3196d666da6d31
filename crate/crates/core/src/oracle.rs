//! Ground-truth computations on small domains: brute-force normalizers,
//! exact KL divergences, and central-difference gradient checks.
//!
//! These are the independent yardsticks the model-fitting code is tested
//! against; nothing here shares code with the implementations it validates.
//! Accumulations use compensated (Neumaier) summation to protect the
//! 1e-10-level contracts.

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAX_ENUM_STATES: usize = 1 << 20;
pub const MAX_QUADRATURE_NODES: usize = 10_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("domain size {size} exceeds bound {bound}")]
    DomainTooLarge { size: usize, bound: usize },
    #[error("enumerated states must be distinct (states {0} and {1} coincide)")]
    DuplicateState(usize, usize),
    #[error("quadrature weights must be positive")]
    NonPositiveWeight,
    #[error("domain is empty")]
    EmptyDomain,
    #[error("non-finite evaluation at state {0}")]
    NonFiniteEval(usize),
    #[error("log-density diverges to +inf at state {0}")]
    DivergentDensity(usize),
}

/// Explicit enumeration of a tiny discrete state space, or a quadrature grid
/// for 1-2D continuous spaces.
#[derive(Debug, Clone)]
pub enum Domain {
    Enumerated { states: Vec<Tensor> },
    Quadrature { nodes: Vec<Tensor>, weights: Vec<f64> },
}

impl Domain {
    pub fn enumerated(states: Vec<Tensor>) -> Result<Self, OracleError> {
        if states.is_empty() {
            return Err(OracleError::EmptyDomain);
        }
        if states.len() > MAX_ENUM_STATES {
            return Err(OracleError::DomainTooLarge {
                size: states.len(),
                bound: MAX_ENUM_STATES,
            });
        }
        // Distinctness via sorting on the raw bit patterns.
        let mut keys: Vec<(Vec<u64>, usize)> = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.values().iter().map(|v| v.to_bits()).collect(), i))
            .collect();
        keys.sort();
        for pair in keys.windows(2) {
            if pair[0].0 == pair[1].0
                && states[pair[0].1].shape() == states[pair[1].1].shape()
            {
                return Err(OracleError::DuplicateState(pair[0].1, pair[1].1));
            }
        }
        Ok(Domain::Enumerated { states })
    }

    /// All binary vectors {0,1}^p as 1-D tensors.
    pub fn binary_hypercube(p: usize) -> Result<Self, OracleError> {
        let size = 1usize
            .checked_shl(p as u32)
            .filter(|&s| s <= MAX_ENUM_STATES)
            .ok_or(OracleError::DomainTooLarge {
                size: usize::MAX,
                bound: MAX_ENUM_STATES,
            })?;
        let states = (0..size)
            .map(|code| {
                let bits: Vec<f64> = (0..p).map(|j| ((code >> j) & 1) as f64).collect();
                Tensor::vector(&bits).expect("finite")
            })
            .collect();
        Domain::enumerated(states)
    }

    /// Uniform 1-D grid on [lo, hi] with trapezoid weights.
    pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Result<Self, OracleError> {
        if n < 2 || n > MAX_QUADRATURE_NODES {
            return Err(OracleError::DomainTooLarge {
                size: n,
                bound: MAX_QUADRATURE_NODES,
            });
        }
        let h = (hi - lo) / (n - 1) as f64;
        let nodes = (0..n)
            .map(|i| Tensor::vector(&[lo + h * i as f64]).expect("finite"))
            .collect();
        let weights = (0..n)
            .map(|i| if i == 0 || i == n - 1 { h / 2.0 } else { h })
            .collect();
        Ok(Domain::Quadrature { nodes, weights })
    }

    /// Uniform 2-D grid on [lo, hi]^2, trapezoid weights via outer product.
    pub fn grid_2d(lo: f64, hi: f64, n: usize) -> Result<Self, OracleError> {
        if n < 2 || n * n > MAX_QUADRATURE_NODES {
            return Err(OracleError::DomainTooLarge {
                size: n * n,
                bound: MAX_QUADRATURE_NODES,
            });
        }
        let h = (hi - lo) / (n - 1) as f64;
        let w1 = |i: usize| if i == 0 || i == n - 1 { h / 2.0 } else { h };
        let mut nodes = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                nodes.push(
                    Tensor::vector(&[lo + h * i as f64, lo + h * j as f64]).expect("finite"),
                );
                weights.push(w1(i) * w1(j));
            }
        }
        Ok(Domain::Quadrature { nodes, weights })
    }

    pub fn len(&self) -> usize {
        match self {
            Domain::Enumerated { states } => states.len(),
            Domain::Quadrature { nodes, .. } => nodes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points with their integration weights (1 for enumerated states).
    pub fn points(&self) -> impl Iterator<Item = (&Tensor, f64)> {
        let (tensors, weights): (&[Tensor], Option<&[f64]>) = match self {
            Domain::Enumerated { states } => (states, None),
            Domain::Quadrature { nodes, weights } => (nodes, Some(weights)),
        };
        tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (t, weights.map_or(1.0, |w| w[i])))
    }
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// log of the normalizer of an unnormalized log-density over the domain:
/// a stabilized log-sum-exp over states, or weighted quadrature.
pub fn brute_force_logz(
    unnorm_logdensity: impl Fn(&Tensor) -> f64,
    domain: &Domain,
) -> Result<f64, OracleError> {
    check_bounds(domain)?;
    let logs: Vec<f64> = domain.points().map(|(x, _)| unnorm_logdensity(x)).collect();
    for (i, &l) in logs.iter().enumerate() {
        if l.is_nan() || l == f64::INFINITY {
            return Err(if l.is_nan() {
                OracleError::NonFiniteEval(i)
            } else {
                OracleError::DivergentDensity(i)
            });
        }
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let mut acc = KahanSum::default();
    for ((_, w), &l) in domain.points().zip(&logs) {
        if w <= 0.0 {
            return Err(OracleError::NonPositiveWeight);
        }
        acc.add(w * (l - m).exp());
    }
    Ok(m + acc.value().ln())
}

/// Exact KL divergence between two unnormalized log-densities on the domain.
/// Both are normalized internally; returns +inf when q has no mass somewhere
/// p does.
pub fn exact_kl(
    p_logdensity: impl Fn(&Tensor) -> f64,
    q_logdensity: impl Fn(&Tensor) -> f64,
    domain: &Domain,
) -> Result<f64, OracleError> {
    let logzp = brute_force_logz(&p_logdensity, domain)?;
    let logzq = brute_force_logz(&q_logdensity, domain)?;
    let mut acc = KahanSum::default();
    for (i, (x, w)) in domain.points().enumerate() {
        let lp = p_logdensity(x) - logzp;
        let lq = q_logdensity(x) - logzq;
        let p = lp.exp();
        if w * p == 0.0 {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        if !lp.is_finite() || !lq.is_finite() {
            return Err(OracleError::NonFiniteEval(i));
        }
        acc.add(w * p * (lp - lq));
    }
    // Gibbs' inequality up to roundoff.
    Ok(acc.value().max(0.0))
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

/// Central-difference check of an analytic gradient. The error at each
/// coordinate is `|fd - analytic| / max(1, |fd|, |analytic|)`; returns the
/// worst coordinate. Rejects non-finite evaluations near the point.
pub fn finite_diff_check(
    scalar_fn: impl Fn(&[f64]) -> f64,
    point: &[f64],
    analytic_grad: &[f64],
    eps: f64,
) -> Result<FiniteDiffReport, OracleError> {
    assert_eq!(point.len(), analytic_grad.len());
    let mut work = point.to_vec();
    let mut worst = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_coord: 0,
    };
    for i in 0..point.len() {
        work[i] = point[i] + eps;
        let fp = scalar_fn(&work);
        work[i] = point[i] - eps;
        let fm = scalar_fn(&work);
        work[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(OracleError::NonFiniteEval(i));
        }
        let fd = (fp - fm) / (2.0 * eps);
        let denom = 1.0_f64.max(fd.abs()).max(analytic_grad[i].abs());
        let rel = (fd - analytic_grad[i]).abs() / denom;
        if rel > worst.max_rel_err {
            worst = FiniteDiffReport {
                max_rel_err: rel,
                worst_coord: i,
            };
        }
    }
    Ok(worst)
}

fn check_bounds(domain: &Domain) -> Result<(), OracleError> {
    if domain.is_empty() {
        return Err(OracleError::EmptyDomain);
    }
    let bound = match domain {
        Domain::Enumerated { .. } => MAX_ENUM_STATES,
        Domain::Quadrature { .. } => MAX_QUADRATURE_NODES,
    };
    if domain.len() > bound {
        return Err(OracleError::DomainTooLarge {
            size: domain.len(),
            bound,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn uniform_logz_is_log_n() {
        let domain = Domain::binary_hypercube(6).unwrap();
        let lz = brute_force_logz(|_| 0.0, &domain).unwrap();
        assert!((lz - (64f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_logz_on_grid() {
        // ∫ exp(-x²/2) dx = √(2π)
        let domain = Domain::grid_1d(-10.0, 10.0, 4001).unwrap();
        let lz = brute_force_logz(|x| -x.values()[0].powi(2) / 2.0, &domain).unwrap();
        assert!((lz - (2.0 * std::f64::consts::PI).sqrt().ln()).abs() < 1e-6);
    }

    #[test]
    fn logz_matches_independent_summation_order() {
        let mut r = rng::seeded(3);
        let states: Vec<Tensor> = (0..10)
            .map(|i| Tensor::vector(&[i as f64]).unwrap())
            .collect();
        let domain = Domain::enumerated(states).unwrap();
        let theta: Vec<f64> = (0..10).map(|_| r.random_range(-3.0..3.0)).collect();
        let f = |x: &Tensor| theta[x.values()[0] as usize];
        let lz = brute_force_logz(f, &domain).unwrap();
        // Reverse-order Kahan summation without the max shift.
        let mut acc = KahanSum::default();
        for i in (0..10).rev() {
            acc.add(theta[i].exp());
        }
        assert!((lz - acc.value().ln()).abs() < 1e-12);
    }

    #[test]
    fn logz_shift_invariance() {
        let domain = Domain::binary_hypercube(8).unwrap();
        let f = |x: &Tensor| x.values().iter().sum::<f64>() * 0.7 - 1.3;
        let c = 5.21;
        let a = brute_force_logz(f, &domain).unwrap();
        let b = brute_force_logz(|x| f(x) + c, &domain).unwrap();
        assert!((b - a - c).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let domain = Domain::binary_hypercube(5).unwrap();
        let f = |x: &Tensor| x.values().iter().sum::<f64>();
        let kl = exact_kl(f, f, &domain).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_of_known_bernoullis() {
        // Bernoulli(0.5) vs Bernoulli(0.75):
        // 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25) = 0.14384103622589045
        let states = vec![
            Tensor::vector(&[0.0]).unwrap(),
            Tensor::vector(&[1.0]).unwrap(),
        ];
        let domain = Domain::enumerated(states).unwrap();
        let p = |_: &Tensor| 0.0; // uniform = Bernoulli(0.5)
        let q = |x: &Tensor| {
            if x.values()[0] > 0.5 {
                0.75f64.ln()
            } else {
                0.25f64.ln()
            }
        };
        let kl = exact_kl(p, q, &domain).unwrap();
        assert!((kl - 0.14384103622589045).abs() < 1e-12);
    }

    #[test]
    fn kl_reports_infinity_for_unsupported_q() {
        let states = vec![
            Tensor::vector(&[0.0]).unwrap(),
            Tensor::vector(&[1.0]).unwrap(),
        ];
        let domain = Domain::enumerated(states).unwrap();
        let p = |_: &Tensor| 0.0;
        let q = |x: &Tensor| {
            if x.values()[0] > 0.5 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        };
        assert_eq!(exact_kl(p, q, &domain).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gibbs_inequality_on_random_tables() {
        let domain = Domain::binary_hypercube(4).unwrap();
        let mut r = rng::seeded(11);
        for _ in 0..100 {
            let a: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
            let idx = |x: &Tensor| {
                x.values()
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (j, &v)| acc | ((v as usize) << j))
            };
            let kl = exact_kl(|x| a[idx(x)], |x| b[idx(x)], &domain).unwrap();
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn finite_diff_linear_is_machine_precision() {
        let g = [2.0, -3.0, 0.5];
        let f = |x: &[f64]| 2.0 * x[0] - 3.0 * x[1] + 0.5 * x[2];
        let rep = finite_diff_check(f, &[0.3, 0.4, -0.2], &g, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-9);
    }

    #[test]
    fn finite_diff_error_shrinks_quadratically() {
        // cubic term gives O(eps²) truncation error
        let f = |x: &[f64]| x[0].powi(3);
        let p = [1.0];
        let g = [3.0];
        let e1 = finite_diff_check(f, &p, &g, 1e-2).unwrap().max_rel_err;
        let e2 = finite_diff_check(f, &p, &g, 5e-3).unwrap().max_rel_err;
        let e3 = finite_diff_check(f, &p, &g, 2.5e-3).unwrap().max_rel_err;
        assert!(e1 / e2 >= 3.5);
        assert!(e2 / e3 >= 3.5);
    }

    #[test]
    fn domain_rejects_duplicates_and_oversize() {
        let dup = vec![
            Tensor::vector(&[1.0]).unwrap(),
            Tensor::vector(&[1.0]).unwrap(),
        ];
        assert!(Domain::enumerated(dup).is_err());
        assert!(Domain::grid_1d(0.0, 1.0, MAX_QUADRATURE_NODES + 1).is_err());
    }
}
