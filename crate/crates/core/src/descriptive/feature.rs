//! Feature maps h(X) for the linear descriptive (exponential-family) model.
//!
//! Histogram-style features use fixed equal-width bins with soft triangular
//! assignment so that θᵀh(X) stays differentiable for Langevin sampling; hard
//! counting bins are kept for projection pursuit, where differentiability is
//! not needed.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tensor::{
    conv2d, conv2d_backward, eval_backward_seeded, eval_forward, NodeId, Padding, Tape, Tensor,
};

use super::DescriptiveError;

#[derive(Debug, Clone)]
pub enum FeatureKind {
    /// Coordinates raised to powers 1..=order, concatenated by power:
    /// [x_1..x_p, x_1²..x_p², ...].
    RawMoments { input_len: usize, order: usize },
    /// Monomials over coordinate subsets: one feature per set S, equal to
    /// ∏_{j in S} x_j. On binary domains these are indicator features.
    CoordinateProducts {
        input_len: usize,
        sets: Vec<Vec<usize>>,
    },
    /// Binned marginals of one-dimensional projections: for each row W_k the
    /// histogram of W_k·X over `bins` equal-width bins spanning [lo, hi].
    BinnedProjections {
        rows: Vec<Tensor>,
        lo: f64,
        hi: f64,
        bins: usize,
        soft: bool,
    },
    /// Histograms of filter-bank responses: `filters` is a [k,k,C,M] bank;
    /// the responses of each filter over the image are soft-binned and
    /// averaged, giving M·bins features.
    FilterHistograms {
        filters: Tensor,
        lo: f64,
        hi: f64,
        bins: usize,
    },
    /// Feature vector computed by a recorded tape; `output` must be 1-D.
    CustomTape {
        tape: Arc<Tape>,
        input: NodeId,
        output: NodeId,
    },
}

/// A fixed-dimension feature extractor. The first coordinate can be pinned
/// to the constant 1 so an intercept can be absorbed into the weights.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    kind: FeatureKind,
    pinned_constant: bool,
}

impl FeatureMap {
    pub fn raw_moments(input_len: usize, order: usize) -> Self {
        assert!(order >= 1);
        Self {
            kind: FeatureKind::RawMoments { input_len, order },
            pinned_constant: false,
        }
    }

    pub fn coordinate_products(input_len: usize, sets: Vec<Vec<usize>>) -> Self {
        assert!(sets.iter().all(|s| s.iter().all(|&j| j < input_len)));
        Self {
            kind: FeatureKind::CoordinateProducts { input_len, sets },
            pinned_constant: false,
        }
    }

    pub fn binned_projections(rows: Vec<Tensor>, lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins >= 1 && hi > lo && !rows.is_empty());
        Self {
            kind: FeatureKind::BinnedProjections {
                rows,
                lo,
                hi,
                bins,
                soft: true,
            },
            pinned_constant: false,
        }
    }

    pub fn filter_histograms(filters: Tensor, lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins >= 1 && hi > lo);
        assert_eq!(filters.shape().len(), 4);
        Self {
            kind: FeatureKind::FilterHistograms {
                filters,
                lo,
                hi,
                bins,
            },
            pinned_constant: false,
        }
    }

    pub fn custom_tape(tape: Arc<Tape>, input: NodeId, output: NodeId) -> Self {
        assert_eq!(tape.shape_of(output).len(), 1, "tape features must be 1-D");
        Self {
            kind: FeatureKind::CustomTape {
                tape,
                input,
                output,
            },
            pinned_constant: false,
        }
    }

    /// Prepends a constant-1 feature.
    pub fn with_pinned_constant(mut self) -> Self {
        self.pinned_constant = true;
        self
    }

    pub fn pinned_constant(&self) -> bool {
        self.pinned_constant
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    /// Short label for checkpoint headers.
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            FeatureKind::RawMoments { .. } => "raw-moments",
            FeatureKind::CoordinateProducts { .. } => "coordinate-products",
            FeatureKind::BinnedProjections { .. } => "binned-projections",
            FeatureKind::FilterHistograms { .. } => "filter-histograms",
            FeatureKind::CustomTape { .. } => "custom-tape",
        }
    }

    pub fn dim(&self) -> usize {
        let base = match &self.kind {
            FeatureKind::RawMoments { input_len, order } => input_len * order,
            FeatureKind::CoordinateProducts { sets, .. } => sets.len(),
            FeatureKind::BinnedProjections { rows, bins, .. } => rows.len() * bins,
            FeatureKind::FilterHistograms { filters, bins, .. } => filters.shape()[3] * bins,
            FeatureKind::CustomTape { tape, output, .. } => tape.shape_of(*output)[0],
        };
        base + usize::from(self.pinned_constant)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Vec<f64>, DescriptiveError> {
        let mut out = Vec::with_capacity(self.dim());
        if self.pinned_constant {
            out.push(1.0);
        }
        match &self.kind {
            FeatureKind::RawMoments { input_len, order } => {
                check_len(x, *input_len)?;
                for r in 1..=*order {
                    for v in x.values() {
                        out.push(v.powi(r as i32));
                    }
                }
            }
            FeatureKind::CoordinateProducts { input_len, sets } => {
                check_len(x, *input_len)?;
                for set in sets {
                    out.push(set.iter().map(|&j| x.values()[j]).product());
                }
            }
            FeatureKind::BinnedProjections {
                rows,
                lo,
                hi,
                bins,
                soft,
            } => {
                for row in rows {
                    check_len(x, row.len())?;
                    let v = row.dot(x);
                    let mut h = vec![0.0; *bins];
                    bin_value(v, *lo, *hi, *bins, *soft, &mut h, 1.0);
                    out.extend_from_slice(&h);
                }
            }
            FeatureKind::FilterHistograms {
                filters,
                lo,
                hi,
                bins,
            } => {
                let resp = conv2d(x, filters, 1, Padding::Valid)?;
                let m = filters.shape()[3];
                let pixels = resp.len() / m;
                let mut h = vec![0.0; m * *bins];
                for (i, &v) in resp.values().iter().enumerate() {
                    let f = i % m;
                    bin_value(v, *lo, *hi, *bins, true, &mut h[f * *bins..(f + 1) * *bins], 1.0);
                }
                for v in &mut h {
                    *v /= pixels as f64;
                }
                out.extend_from_slice(&h);
            }
            FeatureKind::CustomTape {
                tape,
                input,
                output,
            } => {
                let mut leaves = BTreeMap::new();
                leaves.insert(*input, x.clone());
                let vals = eval_forward(tape, &leaves)?;
                out.extend_from_slice(vals.get(*output).values());
            }
        }
        Ok(out)
    }

    /// Gradient of θᵀh(X) with respect to X. Available for every kind except
    /// hard-binned projections.
    pub fn grad_dot(&self, x: &Tensor, theta: &[f64]) -> Result<Tensor, DescriptiveError> {
        debug_assert_eq!(theta.len(), self.dim());
        // the pinned constant contributes nothing to the gradient
        let th = &theta[usize::from(self.pinned_constant)..];
        let mut grad = vec![0.0; x.len()];
        match &self.kind {
            FeatureKind::RawMoments { input_len, order } => {
                check_len(x, *input_len)?;
                for r in 1..=*order {
                    for (j, v) in x.values().iter().enumerate() {
                        grad[j] += th[(r - 1) * input_len + j] * r as f64 * v.powi(r as i32 - 1);
                    }
                }
            }
            FeatureKind::CoordinateProducts { input_len, sets } => {
                check_len(x, *input_len)?;
                for (k, set) in sets.iter().enumerate() {
                    for (pos, &j) in set.iter().enumerate() {
                        let rest: f64 = set
                            .iter()
                            .enumerate()
                            .filter(|(q, _)| *q != pos)
                            .map(|(_, &jj)| x.values()[jj])
                            .product();
                        grad[j] += th[k] * rest;
                    }
                }
            }
            FeatureKind::BinnedProjections {
                rows,
                lo,
                hi,
                bins,
                soft,
            } => {
                if !soft {
                    return Err(DescriptiveError::NotDifferentiable(
                        "hard-binned projections".into(),
                    ));
                }
                for (k, row) in rows.iter().enumerate() {
                    check_len(x, row.len())?;
                    let v = row.dot(x);
                    let dv = bin_grad(v, *lo, *hi, *bins, &th[k * bins..(k + 1) * bins]);
                    for (g, w) in grad.iter_mut().zip(row.values()) {
                        *g += dv * w;
                    }
                }
            }
            FeatureKind::FilterHistograms {
                filters,
                lo,
                hi,
                bins,
            } => {
                let resp = conv2d(x, filters, 1, Padding::Valid)?;
                let m = filters.shape()[3];
                let pixels = resp.len() / m;
                let mut cot = vec![0.0; resp.len()];
                for (i, &v) in resp.values().iter().enumerate() {
                    let f = i % m;
                    cot[i] = bin_grad(v, *lo, *hi, *bins, &th[f * *bins..(f + 1) * *bins])
                        / pixels as f64;
                }
                let cot = Tensor::new(resp.shape().to_vec(), cot)?;
                let (dx, _) = conv2d_backward(x, filters, 1, Padding::Valid, &cot)?;
                grad.copy_from_slice(dx.values());
            }
            FeatureKind::CustomTape {
                tape,
                input,
                output,
            } => {
                let mut leaves = BTreeMap::new();
                leaves.insert(*input, x.clone());
                let vals = eval_forward(tape, &leaves)?;
                let cot = Tensor::new(tape.shape_of(*output).to_vec(), th.to_vec())?;
                let grads = eval_backward_seeded(tape, &vals, &[(*output, cot)])?;
                grad.copy_from_slice(grads[input].values());
            }
        }
        Ok(Tensor::new(x.shape().to_vec(), grad)?)
    }
}

/// Accumulates `weight` into the histogram slice for value `v`. Soft mode
/// spreads a triangular kernel over the two nearest bin centers (clamped at
/// the range ends); hard mode counts the containing bin.
pub(crate) fn bin_value(v: f64, lo: f64, hi: f64, bins: usize, soft: bool, h: &mut [f64], weight: f64) {
    let width = (hi - lo) / bins as f64;
    if soft {
        // position in units of bin centers
        let t = ((v - lo) / width - 0.5).clamp(0.0, (bins - 1) as f64);
        let b0 = t.floor() as usize;
        let frac = t - b0 as f64;
        h[b0] += weight * (1.0 - frac);
        if frac > 0.0 && b0 + 1 < bins {
            h[b0 + 1] += weight * frac;
        }
    } else {
        let b = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        h[b] += weight;
    }
}

/// d(θ_binsᵀ t(v))/dv for the soft triangular assignment.
fn bin_grad(v: f64, lo: f64, hi: f64, bins: usize, theta_bins: &[f64]) -> f64 {
    let width = (hi - lo) / bins as f64;
    let t = (v - lo) / width - 0.5;
    if t <= 0.0 || t >= (bins - 1) as f64 {
        return 0.0; // clamped region
    }
    let b0 = t.floor() as usize;
    if b0 + 1 >= bins {
        return 0.0;
    }
    (theta_bins[b0 + 1] - theta_bins[b0]) / width
}

fn check_len(x: &Tensor, expected: usize) -> Result<(), DescriptiveError> {
    if x.len() != expected {
        return Err(DescriptiveError::FeatureShape {
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Sample average of the features over the data: (1/n) Σ h(X_i).
pub fn feature_stats(data: &[Tensor], map: &FeatureMap) -> Result<Vec<f64>, DescriptiveError> {
    if data.is_empty() {
        return Err(DescriptiveError::EmptyData);
    }
    let mut acc = vec![0.0; map.dim()];
    for x in data {
        for (a, v) in acc.iter_mut().zip(map.eval(x)?) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= data.len() as f64;
        if !a.is_finite() {
            return Err(DescriptiveError::NonFiniteStats);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng;

    #[test]
    fn raw_first_moments_average() {
        let map = FeatureMap::raw_moments(2, 1);
        let data = vec![
            Tensor::vector(&[1.0, 1.0]).unwrap(),
            Tensor::vector(&[3.0, 3.0]).unwrap(),
        ];
        let stats = feature_stats(&data, &map).unwrap();
        assert_eq!(stats, vec![2.0, 2.0]);
    }

    #[test]
    fn pinned_constant_is_exactly_one() {
        let map = FeatureMap::raw_moments(2, 1).with_pinned_constant();
        let data = vec![Tensor::vector(&[5.0, -1.0]).unwrap()];
        let stats = feature_stats(&data, &map).unwrap();
        assert_eq!(stats[0], 1.0);
        assert_eq!(map.dim(), 3);
    }

    #[test]
    fn empty_data_rejected() {
        let map = FeatureMap::raw_moments(2, 1);
        assert!(feature_stats(&[], &map).is_err());
    }

    #[test]
    fn binned_projection_stats_match_direct_counting() {
        let mut r = rng::seeded(31);
        let data: Vec<Tensor> = (0..1000).map(|_| rng::normal_tensor(&[1], &mut r)).collect();
        let (lo, hi, bins) = (-4.0, 4.0, 8);
        let row = Tensor::vector(&[1.0]).unwrap();
        let map = FeatureMap::binned_projections(vec![row], lo, hi, bins);
        let stats = feature_stats(&data, &map).unwrap();

        // independent counting oracle for the triangular assignment
        let mut expect = vec![0.0; bins];
        let width = (hi - lo) / bins as f64;
        for x in &data {
            let v = x.values()[0];
            let t = ((v - lo) / width - 0.5).clamp(0.0, (bins - 1) as f64);
            let b0 = t.floor() as usize;
            let frac = t - b0 as f64;
            expect[b0] += 1.0 - frac;
            if frac > 0.0 && b0 + 1 < bins {
                expect[b0 + 1] += frac;
            }
        }
        for e in &mut expect {
            *e /= data.len() as f64;
        }
        for (a, b) in stats.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // soft masses sum to 1 per row
        assert!((stats.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grad_dot_matches_finite_differences() {
        let mut r = rng::seeded(32);
        let rows = vec![
            rng::normal_tensor(&[3], &mut r),
            rng::normal_tensor(&[3], &mut r),
        ];
        let maps = [
            FeatureMap::raw_moments(3, 3),
            FeatureMap::coordinate_products(3, vec![vec![0], vec![1, 2], vec![0, 1, 2]]),
            FeatureMap::binned_projections(rows, -5.0, 5.0, 6),
        ];
        for map in &maps {
            let theta: Vec<f64> = (0..map.dim()).map(|_| rng::standard_normal(&mut r)).collect();
            let x = rng::normal_tensor(&[3], &mut r);
            let analytic = map.grad_dot(&x, &theta).unwrap();
            let f = |p: &[f64]| {
                let xt = Tensor::vector(p).unwrap();
                map.eval(&xt)
                    .unwrap()
                    .iter()
                    .zip(&theta)
                    .map(|(h, t)| h * t)
                    .sum()
            };
            let rep =
                oracle::finite_diff_check(f, x.values(), analytic.values(), 1e-6).unwrap();
            assert!(
                rep.max_rel_err < 1e-5,
                "{} err {}",
                map.kind_name(),
                rep.max_rel_err
            );
        }
    }

    #[test]
    fn filter_histogram_grad_matches_finite_differences() {
        let mut r = rng::seeded(33);
        let filters = rng::normal_tensor(&[2, 2, 1, 2], &mut r);
        let map = FeatureMap::filter_histograms(filters, -6.0, 6.0, 5);
        let theta: Vec<f64> = (0..map.dim()).map(|_| rng::standard_normal(&mut r)).collect();
        let x = rng::normal_tensor(&[4, 4, 1], &mut r);
        let analytic = map.grad_dot(&x, &theta).unwrap();
        let shape = x.shape().to_vec();
        let f = |p: &[f64]| {
            let xt = Tensor::new(shape.clone(), p.to_vec()).unwrap();
            map.eval(&xt)
                .unwrap()
                .iter()
                .zip(&theta)
                .map(|(h, t)| h * t)
                .sum()
        };
        let rep = oracle::finite_diff_check(f, x.values(), analytic.values(), 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-5, "err {}", rep.max_rel_err);
    }
}
