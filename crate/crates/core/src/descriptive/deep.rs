//! The deep energy-based model: a score network f_θ(X) on a tape, energy
//! U_θ(X) = ‖X‖²/2σ² − f_θ(X), trained by the observed-vs-synthesized
//! gradient difference with Langevin-sampled negatives.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::mcmc::{
    run_chains, ChainPool, EnergyTarget, InitMode, LangevinConfig, McmcError, Reference,
};
use crate::rng::{self, Stream};
use crate::tensor::{
    eval_backward_seeded, eval_forward, Activation, LeafKind, NodeId, Padding, Tape, TapeValues,
    Tensor,
};

use super::linear::DecayRule;
use super::DescriptiveError;

/// Score network plus reference variance: U_θ(X) = ‖X‖²/2σ² − f_θ(X).
#[derive(Debug, Clone)]
pub struct DeepEnergyModel {
    tape: Tape,
    input: NodeId,
    score: NodeId,
    params: Vec<(NodeId, Tensor)>,
    pub sigma2: f64,
}

/// Forward energy plus both backward passes: the input gradient drives the
/// Langevin sampler, the parameter gradients of f_θ drive learning.
#[derive(Debug, Clone)]
pub struct EbmGrads {
    pub energy: f64,
    pub score: f64,
    /// ∂U/∂X = X/σ² − ∂f_θ/∂X
    pub input_grad: Tensor,
    /// ∂f_θ/∂θ aligned with the model's parameter order.
    pub score_param_grads: Vec<Tensor>,
}

/// One hidden layer of a convolutional score network.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Architecture of a score network: convolutional layers (empty for plain
/// MLPs) followed by fully connected layers, ending in a scalar score.
#[derive(Debug, Clone)]
pub struct EbmArch {
    pub input_shape: Vec<usize>,
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
}

impl EbmArch {
    pub fn mlp(input_len: usize, hidden: Vec<usize>) -> Self {
        Self {
            input_shape: vec![input_len],
            conv: Vec::new(),
            hidden,
            activation: Activation::Relu,
            init_scale: 1.0,
        }
    }

    pub fn conv_net(side: usize, channels_in: usize, conv: Vec<ConvSpec>, hidden: Vec<usize>) -> Self {
        Self {
            input_shape: vec![side, side, channels_in],
            conv,
            hidden,
            activation: Activation::Relu,
            init_scale: 1.0,
        }
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
}

impl DeepEnergyModel {
    pub fn new(
        tape: Tape,
        input: NodeId,
        score: NodeId,
        params: Vec<(NodeId, Tensor)>,
        sigma2: f64,
    ) -> Result<Self, DescriptiveError> {
        assert!(sigma2 > 0.0);
        assert_eq!(tape.shape_of(score).iter().product::<usize>(), 1);
        Ok(Self {
            tape,
            input,
            score,
            params,
            sigma2,
        })
    }

    /// Random score network per the architecture; weights are He-style
    /// scaled Gaussians.
    pub fn random(arch: &EbmArch, sigma2: f64, rng: &mut Stream) -> Self {
        let mut tape = Tape::new();
        let input = tape.leaf(LeafKind::Input, &arch.input_shape);
        let mut params: Vec<(NodeId, Tensor)> = Vec::new();
        let mut cur = input;

        for spec in &arch.conv {
            let in_c = tape.shape_of(cur)[2];
            let kshape = [spec.kernel, spec.kernel, in_c, spec.channels];
            let fan_in = (spec.kernel * spec.kernel * in_c) as f64;
            let k = tape.leaf(LeafKind::Parameter, &kshape);
            params.push((
                k,
                rng::normal_tensor(&kshape, rng)
                    .scale(arch.init_scale * (2.0 / fan_in).sqrt())
                    .expect("finite"),
            ));
            cur = tape.conv2d(cur, k, spec.stride, Padding::Same).expect("shapes");
            let bshape = tape.shape_of(cur).to_vec();
            let b = tape.leaf(LeafKind::Parameter, &bshape);
            params.push((b, Tensor::zeros(&bshape)));
            cur = tape.add(cur, b).expect("shapes");
            cur = tape.activation(cur, arch.activation);
        }

        let mut width: usize = tape.shape_of(cur).iter().product();
        for &h in &arch.hidden {
            let w = tape.leaf(LeafKind::Parameter, &[h, width]);
            params.push((
                w,
                rng::normal_tensor(&[h, width], rng)
                    .scale(arch.init_scale * (2.0 / width as f64).sqrt())
                    .expect("finite"),
            ));
            let b = tape.leaf(LeafKind::Parameter, &[h]);
            params.push((b, Tensor::zeros(&[h])));
            let lin = tape.linear(w, cur).expect("shapes");
            let biased = tape.add(lin, b).expect("shapes");
            cur = tape.activation(biased, arch.activation);
            width = h;
        }
        let w_out = tape.leaf(LeafKind::Parameter, &[1, width]);
        params.push((
            w_out,
            rng::normal_tensor(&[1, width], rng)
                .scale(arch.init_scale / (width as f64).sqrt())
                .expect("finite"),
        ));
        let out_vec = tape.linear(w_out, cur).expect("shapes");
        let score = tape.sum(out_vec);

        Self {
            tape,
            input,
            score,
            params,
            sigma2,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        self.tape.shape_of(self.input)
    }

    pub fn params(&self) -> &[(NodeId, Tensor)] {
        &self.params
    }

    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn set_params(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.params.len());
        for ((_, slot), t) in self.params.iter_mut().zip(tensors) {
            *slot = t;
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn bindings(&self, x: &Tensor) -> BTreeMap<NodeId, Tensor> {
        let mut leaves: BTreeMap<NodeId, Tensor> =
            self.params.iter().cloned().collect();
        leaves.insert(self.input, x.clone());
        leaves
    }

    fn forward(&self, x: &Tensor) -> Result<TapeValues, DescriptiveError> {
        Ok(eval_forward(&self.tape, &self.bindings(x))?)
    }

    pub fn score(&self, x: &Tensor) -> Result<f64, DescriptiveError> {
        Ok(self.forward(x)?.get(self.score).item())
    }

    pub fn energy(&self, x: &Tensor) -> Result<f64, DescriptiveError> {
        Ok(x.squared_norm() / (2.0 * self.sigma2) - self.score(x)?)
    }

    /// Energy plus both gradients; one forward pass and one backward pass,
    /// shared between the sampler (∂U/∂X) and the learner (∂f/∂θ).
    pub fn grads(&self, x: &Tensor) -> Result<EbmGrads, DescriptiveError> {
        let values = self.forward(x)?;
        let score = values.get(self.score).item();
        let seed = Tensor::new(self.tape.shape_of(self.score).to_vec(), vec![1.0])?;
        let mut g = eval_backward_seeded(&self.tape, &values, &[(self.score, seed)])?;
        let score_input_grad = g
            .remove(&self.input)
            .expect("input is a leaf");
        let input_grad = x
            .scale(1.0 / self.sigma2)?
            .add_scaled(&score_input_grad, -1.0)?;
        let score_param_grads = self
            .params
            .iter()
            .map(|(id, _)| g.remove(id).expect("param is a leaf"))
            .collect();
        Ok(EbmGrads {
            energy: x.squared_norm() / (2.0 * self.sigma2) - score,
            score,
            input_grad,
            score_param_grads,
        })
    }
}

impl EnergyTarget for DeepEnergyModel {
    fn energy_grad(&self, x: &Tensor) -> Result<(f64, Tensor), McmcError> {
        let g = self.grads(x).map_err(|e| match e {
            DescriptiveError::Tensor(t) => McmcError::Tensor(t),
            other => McmcError::Energy(other.to_string()),
        })?;
        Ok((g.energy, g.input_grad))
    }
}

#[derive(Debug, Clone)]
pub struct EbmTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub n_chains: usize,
    pub learning_rate: f64,
    pub decay: DecayRule,
    pub pool_capacity: usize,
}

impl Default for EbmTrainConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            batch: 100,
            n_chains: 100,
            learning_rate: 0.3,
            decay: DecayRule::LogEvery { period: 10 },
            pool_capacity: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EbmStat {
    pub iter: usize,
    /// V = mean U(synthesized) − mean U(observed).
    pub value_fn: f64,
    /// ‖observed-vs-synthesized score-gradient difference‖₂.
    pub grad_norm: f64,
}

/// Batched parameter gradients of the score, summed in index order so the
/// result is deterministic regardless of the worker count.
fn batch_score_grads(
    model: &DeepEnergyModel,
    batch: &[Tensor],
) -> Result<(Vec<Tensor>, f64), DescriptiveError> {
    let per: Vec<EbmGrads> = batch
        .par_iter()
        .map(|x| model.grads(x))
        .collect::<Result<_, _>>()?;
    let mut acc: Vec<Tensor> = model
        .params
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut energy = 0.0;
    for g in &per {
        energy += g.energy;
        for (a, pg) in acc.iter_mut().zip(&g.score_param_grads) {
            *a = a.add_scaled(pg, 1.0 / batch.len() as f64)?;
        }
    }
    Ok((acc, energy / batch.len() as f64))
}

/// Maximum likelihood of the deep energy model: per iteration, draw chain
/// initializations per `init_mode`, run `lang_cfg.steps` of Langevin, and
/// move θ along the observed-vs-synthesized difference of score gradients.
pub fn fit_deep_ebm(
    data: &[Tensor],
    mut model: DeepEnergyModel,
    init_mode: InitMode,
    lang_cfg: &LangevinConfig,
    cfg: &EbmTrainConfig,
    rng: &mut Stream,
) -> Result<(DeepEnergyModel, Vec<EbmStat>), DescriptiveError> {
    if data.is_empty() {
        return Err(DescriptiveError::EmptyData);
    }
    let shape = model.input_shape().to_vec();
    let reference = Reference::Gaussian {
        sigma2: model.sigma2,
    };
    let mut pool = ChainPool::new(init_mode, reference, &shape, cfg.pool_capacity);
    let mut stats = Vec::with_capacity(cfg.iters);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();

    for iter in 0..cfg.iters {
        // deterministic mini-batch cycling with reshuffles between epochs
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.min(data.len()) {
            if cursor == data.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }

        let inits = pool.draw(cfg.n_chains, Some(&batch), None, rng)?;
        let states = run_chains(&inits, &model, lang_cfg, rng)?;
        let synth: Vec<Tensor> = states
            .iter()
            .filter(|s| !s.diverged)
            .map(|s| s.point.clone())
            .collect();
        if synth.is_empty() {
            return Err(DescriptiveError::ChainDiverged);
        }
        pool.absorb(&synth);

        let (obs_grads, obs_energy) = batch_score_grads(&model, &batch)?;
        let (syn_grads, syn_energy) = batch_score_grads(&model, &synth)?;
        let eta = cfg.decay.rate(cfg.learning_rate, iter);
        let mut norm2 = 0.0;
        for (slot, (og, sg)) in model
            .params
            .iter_mut()
            .map(|(_, t)| t)
            .zip(obs_grads.iter().zip(&syn_grads))
        {
            let diff = og.add_scaled(sg, -1.0)?;
            norm2 += diff.squared_norm();
            *slot = slot.add_scaled(&diff, eta)?;
        }
        stats.push(EbmStat {
            iter,
            value_fn: syn_energy - obs_energy,
            grad_norm: norm2.sqrt(),
        });
    }
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn flat_params(model: &DeepEnergyModel) -> Vec<f64> {
        model
            .params()
            .iter()
            .flat_map(|(_, t)| t.values().to_vec())
            .collect()
    }

    fn with_flat_params(model: &DeepEnergyModel, flat: &[f64]) -> DeepEnergyModel {
        let mut m = model.clone();
        let mut offset = 0;
        let tensors: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(_, t)| {
                let next = offset + t.len();
                let out = Tensor::new(t.shape().to_vec(), flat[offset..next].to_vec()).unwrap();
                offset = next;
                out
            })
            .collect();
        m.set_params(tensors);
        m
    }

    #[test]
    fn zero_score_energy_gradient_is_x_over_sigma2() {
        let mut r = rng::seeded(61);
        let arch = EbmArch::mlp(3, vec![4]);
        let mut model = DeepEnergyModel::random(&arch, 2.0, &mut r);
        // zero every parameter: f_θ ≡ 0
        let zeros: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        model.set_params(zeros);
        let x = Tensor::vector(&[1.0, -2.0, 0.5]).unwrap();
        let g = model.grads(&x).unwrap();
        for (gv, xv) in g.input_grad.values().iter().zip(x.values()) {
            assert!((gv - xv / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_score_shifts_gradient_by_w() {
        // f(X) = wᵀX via a 1×p linear layer: ∂U/∂X = X/σ² − w
        let mut tape = Tape::new();
        let input = tape.leaf(LeafKind::Input, &[3]);
        let w = tape.leaf(LeafKind::Parameter, &[1, 3]);
        let lin = tape.linear(w, input).unwrap();
        let score = tape.sum(lin);
        let wt = Tensor::new(vec![1, 3], vec![0.3, -0.4, 0.8]).unwrap();
        let model =
            DeepEnergyModel::new(tape, input, score, vec![(w, wt.clone())], 1.0).unwrap();
        let x = Tensor::vector(&[0.2, 0.1, -0.5]).unwrap();
        let g = model.grads(&x).unwrap();
        for i in 0..3 {
            let expect = x.values()[i] - wt.values()[i];
            assert!((g.input_grad.values()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_net_gradients_match_finite_differences() {
        let mut r = rng::seeded(62);
        let arch = EbmArch::conv_net(
            4,
            1,
            vec![ConvSpec {
                kernel: 3,
                channels: 2,
                stride: 1,
            }],
            vec![5],
        )
        .with_activation(Activation::Tanh);
        let model = DeepEnergyModel::random(&arch, 1.0, &mut r);
        let x = rng::normal_tensor(&[4, 4, 1], &mut r);

        // parameter gradients of the energy are minus the score gradients
        let g = model.grads(&x).unwrap();
        let flat_grad: Vec<f64> = g
            .score_param_grads
            .iter()
            .flat_map(|t| t.values().iter().map(|v| -v))
            .collect();
        let p0 = flat_params(&model);
        let f_params = |p: &[f64]| with_flat_params(&model, p).energy(&x).unwrap();
        let rep = oracle::finite_diff_check(f_params, &p0, &flat_grad, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-4, "param grad err {}", rep.max_rel_err);

        // input gradient
        let shape = x.shape().to_vec();
        let f_input = |p: &[f64]| {
            model
                .energy(&Tensor::new(shape.clone(), p.to_vec()).unwrap())
                .unwrap()
        };
        let rep = oracle::finite_diff_check(f_input, x.values(), g.input_grad.values(), 1e-5)
            .unwrap();
        assert!(rep.max_rel_err < 1e-4, "input grad err {}", rep.max_rel_err);
    }

    #[test]
    fn self_consistent_data_gives_shrinking_updates() {
        // when the data are samples from the model itself, the expected
        // update is zero; the empirical update norm shrinks as the number of
        // synthesized chains grows
        let mut r = rng::seeded(63);
        let arch = EbmArch::mlp(2, vec![4]).with_activation(Activation::Tanh);
        let model = DeepEnergyModel::random(&arch, 1.0, &mut r);
        let lang = LangevinConfig::new(0.3, 60).unwrap().with_mh(true);

        // long-run samples of the model serve as "data"
        let reference = Reference::Gaussian { sigma2: 1.0 };
        let inits: Vec<Tensor> = (0..256).map(|_| reference.sample(&[2], &mut r)).collect();
        let data: Vec<Tensor> = run_chains(&inits, &model, &lang, &mut r)
            .unwrap()
            .into_iter()
            .map(|s| s.point)
            .collect();

        let update_norm = |n_chains: usize, rng: &mut Stream| -> f64 {
            let inits: Vec<Tensor> = (0..n_chains).map(|_| reference.sample(&[2], rng)).collect();
            let synth: Vec<Tensor> = run_chains(&inits, &model, &lang, rng)
                .unwrap()
                .into_iter()
                .map(|s| s.point)
                .collect();
            let (og, _) = batch_score_grads(&model, &data).unwrap();
            let (sg, _) = batch_score_grads(&model, &synth).unwrap();
            og.iter()
                .zip(&sg)
                .map(|(a, b)| a.add_scaled(b, -1.0).unwrap().squared_norm())
                .sum::<f64>()
                .sqrt()
        };
        // average over a few repeats to tame Monte Carlo noise
        let mean = |n: usize, r: &mut Stream| -> f64 {
            (0..4).map(|_| update_norm(n, r)).sum::<f64>() / 4.0
        };
        let small = mean(16, &mut r);
        let large = mean(256, &mut r);
        assert!(
            large < small,
            "update norm should shrink with more chains: {small} -> {large}"
        );
    }
}
