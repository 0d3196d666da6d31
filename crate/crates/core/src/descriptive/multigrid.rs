//! Multi-grid learning and sampling: one energy model per image resolution,
//! the 1×1 grid modeled by an intensity histogram. Sampling seeds the
//! coarsest grid from the histogram and, at each finer grid, upsamples the
//! previous sample (nearest neighbor) and runs a fixed number of Langevin
//! steps under that grid's model.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::mcmc::{run_chains, LangevinConfig};
use crate::rng::Stream;
use crate::tensor::Tensor;

use super::deep::DeepEnergyModel;
use super::linear::DecayRule;
use super::DescriptiveError;

/// Block-averages a square `[H, H, C]` image down to `side`×`side`.
pub fn downscale_to(image: &Tensor, side: usize) -> Result<Tensor, DescriptiveError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(DescriptiveError::NotSquare(shape.to_vec()));
    }
    let (h, c) = (shape[0], shape[2]);
    if side == 0 || h % side != 0 {
        return Err(DescriptiveError::BadPyramidSpec);
    }
    let f = h / side;
    let mut out = vec![0.0; side * side * c];
    for y in 0..h {
        for x in 0..h {
            for ci in 0..c {
                out[((y / f) * side + x / f) * c + ci] += image.values()[(y * h + x) * c + ci];
            }
        }
    }
    let norm = (f * f) as f64;
    for v in &mut out {
        *v /= norm;
    }
    Ok(Tensor::new(vec![side, side, c], out)?)
}

/// Nearest-neighbor (block replication) upsampling by an integer factor.
pub fn upsample_nearest(image: &Tensor, factor: usize) -> Result<Tensor, DescriptiveError> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(DescriptiveError::NotSquare(shape.to_vec()));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; h * factor * w * factor * c];
    for y in 0..h * factor {
        for x in 0..w * factor {
            let src = ((y / factor) * w + x / factor) * c;
            let dst = (y * w * factor + x) * c;
            out[dst..dst + c].copy_from_slice(&image.values()[src..src + c]);
        }
    }
    Ok(Tensor::new(vec![h * factor, w * factor, c], out)?)
}

/// Down-scaled versions of a square image at each requested grid size.
/// Sizes must be strictly increasing and each must divide the next (the
/// finest must equal the image side).
pub fn build_pyramid(image: &Tensor, grids: &[usize]) -> Result<Vec<Tensor>, DescriptiveError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(DescriptiveError::NotSquare(shape.to_vec()));
    }
    if grids.is_empty() || grids[grids.len() - 1] != shape[0] {
        return Err(DescriptiveError::BadPyramidSpec);
    }
    for pair in grids.windows(2) {
        if pair[0] >= pair[1] || pair[1] % pair[0] != 0 {
            return Err(DescriptiveError::BadPyramidSpec);
        }
    }
    grids.iter().map(|&side| downscale_to(image, side)).collect()
}

/// Equal-width histogram over [lo, hi] with inverse-CDF sampling, used as
/// the model of the 1×1 grid.
#[derive(Debug, Clone)]
pub struct IntensityHistogram {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

impl IntensityHistogram {
    pub fn fit(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut mass = vec![0.0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
            mass[b] += 1.0;
        }
        let total: f64 = mass.iter().sum();
        if total > 0.0 {
            for m in &mut mass {
                *m /= total;
            }
        }
        Self { lo, hi, mass }
    }

    pub fn sample(&self, rng: &mut Stream) -> f64 {
        let u: f64 = rng.random();
        let width = (self.hi - self.lo) / self.mass.len() as f64;
        let mut acc = 0.0;
        for (b, &m) in self.mass.iter().enumerate() {
            acc += m;
            if u <= acc || b == self.mass.len() - 1 {
                let frac: f64 = rng.random();
                return self.lo + (b as f64 + frac) * width;
            }
        }
        unreachable!("histogram mass sums to 1")
    }

    /// Total variation distance to another histogram over the same bins.
    pub fn tv_distance(&self, other: &IntensityHistogram) -> f64 {
        0.5 * self
            .mass
            .iter()
            .zip(&other.mass)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// One energy model per grid (except the 1×1 grid, modeled by the seed
/// histogram). `grids` includes the 1×1 entry first.
#[derive(Debug, Clone)]
pub struct GridPyramid {
    pub grids: Vec<usize>,
    pub models: Vec<DeepEnergyModel>,
    pub seed_histogram: Vec<IntensityHistogram>,
}

#[derive(Debug, Clone)]
pub struct MultigridTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub decay: DecayRule,
    pub histogram_bins: usize,
}

impl Default for MultigridTrainConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            batch: 32,
            learning_rate: 0.1,
            decay: DecayRule::LogEvery { period: 10 },
            histogram_bins: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultigridStat {
    pub iter: usize,
    /// ‖observed-vs-synthesized score-gradient difference‖₂ per grid model.
    pub per_grid_discrepancy: Vec<f64>,
}

/// Trains one model per grid simultaneously. For each image in the batch the
/// sampler starts from the image's own 1×1 version, then at every grid
/// upsamples the current sample and runs `lang_cfg.steps` Langevin steps
/// under that grid's model; each grid's parameters move along the
/// observed-vs-synthesized difference at that grid.
pub fn fit_multigrid(
    data: &[Tensor],
    mut models: Vec<DeepEnergyModel>,
    grids: &[usize],
    lang_cfg: &LangevinConfig,
    cfg: &MultigridTrainConfig,
    rng: &mut Stream,
) -> Result<(GridPyramid, Vec<MultigridStat>), DescriptiveError> {
    if data.is_empty() {
        return Err(DescriptiveError::EmptyData);
    }
    if grids.len() < 2 || grids[0] != 1 || models.len() != grids.len() - 1 {
        return Err(DescriptiveError::BadPyramidSpec);
    }
    let channels = data[0].shape()[2];

    // Per-channel histogram of the 1×1 versions seeds generation.
    let mut channel_values: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len()); channels];
    for img in data {
        let tiny = downscale_to(img, 1)?;
        for (ci, bucket) in channel_values.iter_mut().enumerate() {
            bucket.push(tiny.values()[ci]);
        }
    }
    let seed_histogram: Vec<IntensityHistogram> = channel_values
        .iter()
        .map(|vals| IntensityHistogram::fit(vals, -1.0, 1.0, cfg.histogram_bins))
        .collect();

    let mut stats = Vec::with_capacity(cfg.iters);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();

    for iter in 0..cfg.iters {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.min(data.len()) {
            if cursor == data.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }

        // observed pyramids per image
        let pyramids: Vec<Vec<Tensor>> = batch
            .iter()
            .map(|img| build_pyramid(img, grids))
            .collect::<Result<_, _>>()?;

        // synthesized images grid by grid, starting from the observed 1×1
        let mut current: Vec<Tensor> = pyramids.iter().map(|p| p[0].clone()).collect();
        let mut synth_per_grid: Vec<Vec<Tensor>> = Vec::with_capacity(grids.len() - 1);
        for (gi, model) in models.iter().enumerate() {
            let factor = grids[gi + 1] / grids[gi];
            let ups: Vec<Tensor> = current
                .iter()
                .map(|img| upsample_nearest(img, factor))
                .collect::<Result<_, _>>()?;
            let states = run_chains(&ups, model, lang_cfg, rng)?;
            current = states
                .into_iter()
                .zip(ups)
                .map(|(s, fallback)| if s.diverged { fallback } else { s.point })
                .collect();
            synth_per_grid.push(current.clone());
        }

        // separate, simultaneous updates from the grid-wise differences
        let eta = cfg.decay.rate(cfg.learning_rate, iter);
        let mut per_grid_discrepancy = Vec::with_capacity(models.len());
        for (gi, model) in models.iter_mut().enumerate() {
            let observed: Vec<Tensor> = pyramids.iter().map(|p| p[gi + 1].clone()).collect();
            let disc = update_model(model, &observed, &synth_per_grid[gi], eta)?;
            per_grid_discrepancy.push(disc);
        }
        stats.push(MultigridStat {
            iter,
            per_grid_discrepancy,
        });
    }

    Ok((
        GridPyramid {
            grids: grids.to_vec(),
            models,
            seed_histogram,
        },
        stats,
    ))
}

fn update_model(
    model: &mut DeepEnergyModel,
    observed: &[Tensor],
    synth: &[Tensor],
    eta: f64,
) -> Result<f64, DescriptiveError> {
    let mean_grads = |model: &DeepEnergyModel,
                      batch: &[Tensor]|
     -> Result<Vec<Tensor>, DescriptiveError> {
        let mut acc: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        for x in batch {
            let g = model.grads(x)?;
            for (a, pg) in acc.iter_mut().zip(&g.score_param_grads) {
                *a = a.add_scaled(pg, 1.0 / batch.len() as f64)?;
            }
        }
        Ok(acc)
    };
    let og = mean_grads(model, observed)?;
    let sg = mean_grads(model, synth)?;
    let mut norm2 = 0.0;
    let updates: Vec<Tensor> = og
        .iter()
        .zip(&sg)
        .map(|(a, b)| a.add_scaled(b, -1.0))
        .collect::<Result<_, _>>()?;
    for u in &updates {
        norm2 += u.squared_norm();
    }
    for (slot, u) in model.param_tensors_mut().zip(&updates) {
        *slot = slot.add_scaled(u, eta)?;
    }
    Ok(norm2.sqrt())
}

/// Draws one image: the 1×1 seed comes from the stored histogram, then each
/// grid upsamples and runs `lang_cfg.steps` Langevin steps, returning the
/// finest image.
pub fn sample_multigrid(
    pyr: &GridPyramid,
    lang_cfg: &LangevinConfig,
    rng: &mut Stream,
) -> Result<Tensor, DescriptiveError> {
    let channels = pyr.seed_histogram.len();
    let seed: Vec<f64> = pyr.seed_histogram.iter().map(|h| h.sample(rng)).collect();
    let mut current = Tensor::new(vec![1, 1, channels], seed)?;
    for (gi, model) in pyr.models.iter().enumerate() {
        let factor = pyr.grids[gi + 1] / pyr.grids[gi];
        let up = upsample_nearest(&current, factor)?;
        let states = run_chains(std::slice::from_ref(&up), model, lang_cfg, rng)?;
        current = if states[0].diverged {
            up
        } else {
            states[0].point.clone()
        };
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn constant_image_pyramid_is_constant() {
        let img = Tensor::filled(&[8, 8, 1], 0.37).unwrap();
        let pyr = build_pyramid(&img, &[1, 2, 4, 8]).unwrap();
        for level in &pyr {
            for v in level.values() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_block_mean() {
        let img = Tensor::new(vec![2, 2, 1], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let pyr = build_pyramid(&img, &[1, 2]).unwrap();
        assert_eq!(pyr[0].values(), &[3.0]);
    }

    #[test]
    fn sixty_four_pyramid_levels() {
        let img = Tensor::zeros(&[64, 64, 1]);
        let pyr = build_pyramid(&img, &[4, 16, 64]).unwrap();
        assert_eq!(pyr[0].shape(), &[4, 4, 1]);
        assert_eq!(pyr[1].shape(), &[16, 16, 1]);
        assert_eq!(pyr[2].shape(), &[64, 64, 1]);
    }

    #[test]
    fn rejects_bad_specs() {
        let img = Tensor::zeros(&[6, 6, 1]);
        assert!(build_pyramid(&img, &[4, 6]).is_err()); // 4 does not divide 6
        assert!(build_pyramid(&img, &[6, 3]).is_err()); // not increasing
        let rect = Tensor::zeros(&[4, 6, 1]);
        assert!(build_pyramid(&rect, &[2, 6]).is_err()); // not square
    }

    #[test]
    fn histogram_sampling_matches_mass() {
        let values: Vec<f64> = (0..1000)
            .map(|i| if i % 4 == 0 { -0.8 } else { 0.6 })
            .collect();
        let h = IntensityHistogram::fit(&values, -1.0, 1.0, 10);
        let mut r = rng::seeded(71);
        let draws: Vec<f64> = (0..4000).map(|_| h.sample(&mut r)).collect();
        let resampled = IntensityHistogram::fit(&draws, -1.0, 1.0, 10);
        assert!(h.tv_distance(&resampled) < 0.03);
    }

    #[test]
    fn upsample_then_downscale_is_identity() {
        let mut r = rng::seeded(72);
        let img = rng::normal_tensor(&[3, 3, 2], &mut r);
        let up = upsample_nearest(&img, 3).unwrap();
        let back = downscale_to(&up, 3).unwrap();
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
