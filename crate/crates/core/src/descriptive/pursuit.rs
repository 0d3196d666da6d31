//! Sequential projection pursuit: find the direction along which the
//! observed and synthesized point clouds differ the most, measured by the L1
//! distance between hard-binned marginal histograms.

use crate::tensor::Tensor;

use super::feature::bin_value;
use super::DescriptiveError;

#[derive(Debug, Clone)]
pub enum PursuitOutcome {
    Direction {
        index: usize,
        direction: Tensor,
        discrepancy: f64,
    },
    /// Every candidate ties at zero discrepancy.
    Converged,
}

/// Returns the candidate unit vector maximizing the histogram discrepancy
/// between the projections of `data` and `synth`. Bins are equal-width over
/// the combined projection range of both clouds.
pub fn pursue_projection(
    data: &[Tensor],
    synth: &[Tensor],
    candidates: &[Tensor],
    bins: usize,
) -> Result<PursuitOutcome, DescriptiveError> {
    if data.is_empty() || synth.is_empty() {
        return Err(DescriptiveError::EmptyData);
    }
    let dim = data[0].len();
    if dim < 2 {
        return Err(DescriptiveError::FeatureShape {
            expected: 2,
            actual: dim,
        });
    }
    if candidates.is_empty() {
        return Err(DescriptiveError::EmptyData);
    }
    for c in candidates {
        let norm = c.squared_norm().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(DescriptiveError::NotUnitVector(norm));
        }
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, dir) in candidates.iter().enumerate() {
        let d = histogram_discrepancy(data, synth, dir, bins);
        if best.map_or(true, |(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    let (index, discrepancy) = best.expect("nonempty candidates");
    if discrepancy == 0.0 {
        return Ok(PursuitOutcome::Converged);
    }
    Ok(PursuitOutcome::Direction {
        index,
        direction: candidates[index].clone(),
        discrepancy,
    })
}

/// L1 distance between the normalized hard histograms of the two clouds
/// projected on `dir`.
pub fn histogram_discrepancy(data: &[Tensor], synth: &[Tensor], dir: &Tensor, bins: usize) -> f64 {
    let proj = |set: &[Tensor]| -> Vec<f64> { set.iter().map(|x| dir.dot(x)).collect() };
    let pd = proj(data);
    let ps = proj(synth);
    let lo = pd
        .iter()
        .chain(&ps)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = pd
        .iter()
        .chain(&ps)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return 0.0;
    }
    let mut hd = vec![0.0; bins];
    let mut hs = vec![0.0; bins];
    for v in &pd {
        bin_value(*v, lo, hi, bins, false, &mut hd, 1.0 / pd.len() as f64);
    }
    for v in &ps {
        bin_value(*v, lo, hi, bins, false, &mut hs, 1.0 / ps.len() as f64);
    }
    hd.iter().zip(&hs).map(|(a, b)| (a - b).abs()).sum()
}
