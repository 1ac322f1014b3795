//! The assembled model: feature extractor, attention over the context memory,
//! per-modality encoders, fusion, shared decoder, Monte Carlo prediction,
//! losses and the training step.

use mnp_tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attention_weights, clamp_lengthscale, rbf_matrix_var, DistanceScaling, Similarity};
use crate::config::{ExtractorConfig, ModelConfig};
use crate::data::MultimodalBatch;
use crate::encoding::{
    aggregate_baseline, encode_context, mba_fuse, mean_context, target_specific, Aggregation, ConcatHead, EncoderSet,
    ModalityEvidence,
};
use crate::error::{MnpError, Result};
use crate::memory::{ContextMemory, Replacement, UpdateKind};
use crate::params::{Bound, Linear, ParamId, ParamSet};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Rows per graph when predicting on large inputs.
const PREDICT_CHUNK: usize = 500;

const STREAM_PARAMS: u64 = 1;
const STREAM_MEMORY: u64 = 2;
const STREAM_TRAIN: u64 = 3;

/// A ChaCha8 generator for one named purpose derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `FC(d_e -> d_e) -> LeakyReLU -> FC(d_e -> K)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    fc1: Linear,
    fc2: Linear,
    slope: f64,
}

impl Decoder {
    pub fn new(params: &mut ParamSet, d_e: usize, num_classes: usize, slope: f64, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(params, "decoder.fc1", d_e, d_e, rng),
            fc2: Linear::new(params, "decoder.fc2", d_e, num_classes, rng),
            slope,
        }
    }

    /// Logits for every row of `z`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, z)?;
        let h = g.leaky_relu(h, self.slope)?;
        self.fc2.forward(g, p, h)
    }
}

/// Input projection followed by residual blocks `h + ReLU(FC(h))`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    input: Linear,
    blocks: Vec<Linear>,
}

impl FeatureExtractor {
    pub fn new(params: &mut ParamSet, prefix: &str, d_in: usize, cfg: ExtractorConfig, rng: &mut impl Rng) -> Self {
        let input = Linear::new(params, &format!("{prefix}.extractor.input"), d_in, cfg.width, rng);
        let blocks = (0..cfg.blocks)
            .map(|b| Linear::new(params, &format!("{prefix}.extractor.block{b}"), cfg.width, cfg.width, rng))
            .collect();
        Self { input, blocks }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.input.forward(g, p, x)?;
        for b in &self.blocks {
            let f = b.forward(g, p, h)?;
            let f = g.relu(f)?;
            h = g.add(h, f)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct ModalityNet {
    extractor: Option<FeatureExtractor>,
    encoders: EncoderSet,
    lengthscale: ParamId,
}

/// Standard normal draws for the reparameterised samples of one forward pass.
/// `unified[s]` and `unimodal[m][s]` are `N_T x d_e`. Empty for the baseline
/// aggregations, which do not sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub unified: Vec<Tensor>,
    pub unimodal: Vec<Vec<Tensor>>,
}

/// Graph nodes produced by [`Mnp::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Monte Carlo averaged class probabilities, `N_T x K`.
    pub unified: Var,
    /// Per-sample class probabilities of the unified path.
    pub unified_draws: Vec<Var>,
    pub unimodal: Vec<Var>,
    /// Attention of the targets over each modality's memory, `N_T x N^m`.
    pub attention: Vec<Var>,
    /// Target inputs after the feature extractor.
    pub target_features: Vec<Var>,
    pub lengthscales: Vec<Var>,
    /// Fused posterior `(mean, variance)` when the aggregation is MBA.
    pub posterior: Option<(Var, Var)>,
}

/// Scalar loss nodes.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub nll: Var,
    pub contrastive: Vec<Var>,
    pub contrastive_mean: Var,
    pub rbf: Var,
    pub total: Var,
}

/// Loss values of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Unified plus averaged unimodal negative log-likelihood.
    pub nll: f64,
    /// Contrastive loss per modality; zero when the term is disabled.
    pub contrastive: Vec<f64>,
    pub rbf: f64,
    /// `nll + beta * rbf`.
    pub total: f64,
}

/// Predictions on plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub unified: Tensor,
    pub unified_draws: Vec<Tensor>,
    pub unimodal: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Mnp {
    config: ModelConfig,
    input_dims: Vec<usize>,
    num_classes: usize,
    params: ParamSet,
    nets: Vec<ModalityNet>,
    decoder: Decoder,
    concat: Option<ConcatHead>,
    memory: ContextMemory,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn mean_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let s = sum_vars(g, vars)?;
    Ok(g.scale(s, 1.0 / vars.len() as f64)?)
}

/// `-mean_i log max(p[i, y_i], 1e-12)`.
fn true_class_nll(g: &mut Graph, probs: Var, truth: Var, n: usize) -> Result<Var> {
    let p = g.clamp_min(probs, PROB_CLAMP)?;
    let l = g.log(p)?;
    let t = g.mul(l, truth)?;
    let s = g.sum(t)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

/// `-E[log T_Y] - (1/M) sum_m E[log T^m_Y]` with the expectation taken as the
/// batch mean of the true-class log-probability.
pub fn nll_loss(g: &mut Graph, unified: Var, unimodal: &[Var], truth: &Tensor) -> Result<Var> {
    if unimodal.is_empty() {
        return Err(MnpError::Contract("nll needs at least one unimodal prediction".into()));
    }
    let n = truth.rows().max(1);
    let t = g.constant(truth.clone());
    let main = true_class_nll(g, unified, t, n)?;
    let uni: Vec<Var> = unimodal
        .iter()
        .map(|&u| true_class_nll(g, u, t, n))
        .collect::<Result<_>>()?;
    let uni = mean_vars(g, &uni)?;
    Ok(g.add(main, uni)?)
}

/// Supervised contrastive loss of one modality under the RBF kernel:
///
/// `sum_i -(1/|P(i)|) sum_{p in P(i)} log[exp(k(i,p)/tau) / sum_{n != i} exp(k(i,n)/tau)]`.
///
/// Anchors without positives are skipped.
pub fn contrastive_term(
    g: &mut Graph,
    features: Var,
    lengthscale: Var,
    labels: &[usize],
    tau: f64,
    scaling: DistanceScaling,
) -> Result<Var> {
    let n = labels.len();
    if g.value(features).rows() != n {
        return Err(MnpError::Contract(format!(
            "{} feature rows for {n} labels",
            g.value(features).rows()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(MnpError::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut weights = Tensor::zeros(&[n, n]);
    let mut any = false;
    for i in 0..n {
        let positives = (0..n).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        any = true;
        for p in (0..n).filter(|&p| p != i && labels[p] == labels[i]) {
            weights.set(i, p, 1.0 / positives as f64);
        }
    }
    if !any {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let k = rbf_matrix_var(g, features, features, lengthscale, scaling)?;
    let z = g.scale(k, 1.0 / tau)?;
    let mask = (0..n * n).map(|ij| ij / n != ij % n).collect();
    let ls = g.log_softmax_rows_masked(z, mask)?;
    let w = g.constant(weights);
    let t = g.mul(ls, w)?;
    let s = g.sum(t)?;
    Ok(g.neg(s)?)
}

/// `sqrt(sum_j l_j^2)`.
fn l2_norm(g: &mut Graph, l: Var) -> Result<Var> {
    let sq = g.square(l)?;
    let s = g.sum(sq)?;
    Ok(g.sqrt(s)?)
}

/// `contrastive + alpha * (1/M) sum_m ||l^m||_2`.
pub fn rbf_loss(g: &mut Graph, contrastive: Var, lengthscales: &[Var], alpha: f64) -> Result<Var> {
    let norms: Vec<Var> = lengthscales.iter().map(|&l| l2_norm(g, l)).collect::<Result<_>>()?;
    let penalty = mean_vars(g, &norms)?;
    let penalty = g.scale(penalty, alpha)?;
    Ok(g.add(contrastive, penalty)?)
}

impl Mnp {
    /// Builds a freshly initialised model whose memory is filled with
    /// class-balanced random draws from `train`.
    pub fn new(config: &ModelConfig, train: &MultimodalBatch, seed: u64) -> Result<Self> {
        let k = train.num_classes();
        if k == 0 || !config.context_size.is_multiple_of(k) {
            return Err(MnpError::Config(format!(
                "model.context_size: {} is not divisible by the {k} classes",
                config.context_size
            )));
        }
        let mut rng = stream_rng(seed, STREAM_MEMORY);
        let memory = ContextMemory::init_random(train, config.context_size / k, &mut rng)?;
        Self::with_memory(config, &train.dims(), k, seed, memory)
    }

    /// Architecture with initial parameters around a given memory.
    fn with_memory(
        config: &ModelConfig,
        input_dims: &[usize],
        num_classes: usize,
        seed: u64,
        memory: ContextMemory,
    ) -> Result<Self> {
        if input_dims.is_empty() {
            return Err(MnpError::Config("at least one modality is required".into()));
        }
        let mut rng = stream_rng(seed, STREAM_PARAMS);
        let mut params = ParamSet::default();
        let d_e = config.latent_dim;
        let slope = config.leaky_slope;
        let mut nets = Vec::with_capacity(input_dims.len());
        for (m, &d) in input_dims.iter().enumerate() {
            let prefix = format!("m{m}");
            let extractor = config.extractor.map(|e| FeatureExtractor::new(&mut params, &prefix, d, e, &mut rng));
            let feat = config.extractor.map_or(d, |e| e.width);
            let encoders = EncoderSet::new(&mut params, &prefix, feat + num_classes, d_e, slope, &mut rng);
            let lengthscale = params.add(
                format!("{prefix}.lengthscale"),
                Tensor::full(&[1, feat], config.lengthscale_init),
            );
            if !config.learn_lengthscale {
                params.set_frozen(lengthscale, true);
            }
            nets.push(ModalityNet {
                extractor,
                encoders,
                lengthscale,
            });
        }
        let decoder = Decoder::new(&mut params, d_e, num_classes, slope, &mut rng);
        let concat = (config.aggregation == Aggregation::Concat)
            .then(|| ConcatHead::new(&mut params, input_dims.len(), d_e, slope, &mut rng));
        if memory.num_modalities() != input_dims.len() || memory.num_classes() != num_classes {
            return Err(MnpError::Contract("memory does not match the model".into()));
        }
        for (m, &d) in input_dims.iter().enumerate() {
            if memory.features(m).cols() != d {
                return Err(MnpError::Contract(format!("memory modality {m} has the wrong width")));
            }
        }
        Ok(Self {
            config: config.clone(),
            input_dims: input_dims.to_vec(),
            num_classes,
            params,
            nets,
            decoder,
            concat,
            memory,
        })
    }

    /// Rebuilds a model from stored parameters and memory. Parameter names
    /// and shapes must match the architecture implied by `config`.
    pub fn from_parts(
        config: &ModelConfig,
        input_dims: &[usize],
        num_classes: usize,
        named: Vec<(String, Tensor)>,
        memory: ContextMemory,
    ) -> Result<Self> {
        let mut model = Self::with_memory(config, input_dims, num_classes, 0, memory)?;
        if named.len() != model.params.len() {
            return Err(MnpError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            let expected = &model.params.names()[i];
            if &name != expected || value.shape() != model.params.values()[i].shape() {
                return Err(MnpError::Checkpoint(format!(
                    "parameter {i}: expected {expected} {:?}, found {name} {:?}",
                    model.params.values()[i].shape(),
                    value.shape()
                )));
            }
            model.params.values_mut()[i] = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn memory(&self) -> &ContextMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut ContextMemory {
        &mut self.memory
    }

    pub fn lengthscale(&self, m: usize) -> &Tensor {
        self.params.get(self.nets[m].lengthscale)
    }

    /// Draws the reparameterisation noise for `n_targets` targets.
    pub fn sample_noise(&self, n_targets: usize, rng: &mut impl Rng) -> Noise {
        if self.config.aggregation != Aggregation::Mba {
            return Noise {
                unified: Vec::new(),
                unimodal: vec![Vec::new(); self.num_modalities()],
            };
        }
        let d_e = self.config.latent_dim;
        let draw = |rng: &mut dyn rand::RngCore| {
            let data = (0..n_targets * d_e).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(n_targets, d_e, data).expect("noise shape")
        };
        let s = self.config.mc_samples;
        let unified = (0..s).map(|_| draw(rng)).collect();
        let unimodal = (0..self.num_modalities())
            .map(|_| (0..s).map(|_| draw(rng)).collect())
            .collect();
        Noise { unified, unimodal }
    }

    /// `(1/S) sum_s softmax(dec(mean + sqrt(var) * eps_s))`, plus each draw.
    fn sample_decode(&self, g: &mut Graph, p: &Bound, mean: Var, var: Var, eps: &[Tensor]) -> Result<(Var, Vec<Var>)> {
        if eps.is_empty() {
            return Err(MnpError::Contract("at least one Monte Carlo sample is required".into()));
        }
        let sd = g.sqrt(var)?;
        let mut draws = Vec::with_capacity(eps.len());
        for e in eps {
            if e.shape() != g.value(mean).shape() {
                return Err(MnpError::Contract(format!(
                    "noise {:?} does not match latent {:?}",
                    e.shape(),
                    g.value(mean).shape()
                )));
            }
            let e = g.constant(e.clone());
            let z = g.mul(sd, e)?;
            let z = g.add(mean, z)?;
            let logits = self.decoder.forward(g, p, z)?;
            draws.push(g.softmax_rows(logits)?);
        }
        let avg = mean_vars(g, &draws)?;
        Ok((avg, draws))
    }

    fn decode_probs(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let logits = self.decoder.forward(g, p, z)?;
        Ok(g.softmax_rows(logits)?)
    }

    /// Full forward pass of `targets` (one tensor per modality) against
    /// `memory`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        targets: &[Tensor],
        memory: &ContextMemory,
        noise: &Noise,
    ) -> Result<Forward> {
        let mm = self.num_modalities();
        if targets.len() != mm || memory.num_modalities() != mm {
            return Err(MnpError::Contract(format!(
                "model has {mm} modalities, got {} target and {} memory tensors",
                targets.len(),
                memory.num_modalities()
            )));
        }
        let n_t = targets[0].rows();
        for (m, t) in targets.iter().enumerate() {
            if !t.is_matrix() || t.rows() != n_t || t.cols() != self.input_dims[m] {
                return Err(MnpError::Contract(format!(
                    "modality {m}: expected {n_t} x {}, got {:?}",
                    self.input_dims[m],
                    t.shape()
                )));
            }
        }
        let mba = self.config.aggregation == Aggregation::Mba;
        let context_y = g.constant(memory.labels_one_hot());
        let mut attention = Vec::with_capacity(mm);
        let mut target_features = Vec::with_capacity(mm);
        let mut lengthscales = Vec::with_capacity(mm);
        let mut evidence = Vec::with_capacity(mm);
        let mut unimodal = Vec::with_capacity(mm);
        for (m, net) in self.nets.iter().enumerate() {
            let tx = g.constant(targets[m].clone());
            let cx = g.constant(memory.features(m).clone());
            let (tx, cx) = match &net.extractor {
                Some(e) => (e.forward(g, p, tx)?, e.forward(g, p, cx)?),
                None => (tx, cx),
            };
            let l = p.var(net.lengthscale);
            let a = attention_weights(g, &self.config.attention, tx, cx, Some(l))?;
            let context = g.concat_cols(&[cx, context_y])?;
            let (r, s) = encode_context(g, p, &net.encoders, context)?;
            let (r_star, s_star) = target_specific(g, a, r, s)?;
            if mba {
                let (u, q) = mean_context(g, p, &net.encoders, context)?;
                let ev = ModalityEvidence {
                    r: r_star,
                    s: s_star,
                    u,
                    q,
                };
                let (mean, var) = mba_fuse(g, &[ev])?;
                let eps = noise
                    .unimodal
                    .get(m)
                    .ok_or_else(|| MnpError::Contract(format!("no noise for modality {m}")))?;
                unimodal.push(self.sample_decode(g, p, mean, var, eps)?.0);
                evidence.push(ev);
            } else {
                unimodal.push(self.decode_probs(g, p, r_star)?);
                evidence.push(ModalityEvidence {
                    r: r_star,
                    s: s_star,
                    u: r_star,
                    q: s_star,
                });
            }
            attention.push(a);
            target_features.push(tx);
            lengthscales.push(l);
        }
        let (unified, unified_draws, posterior) = if mba {
            let (mean, var) = mba_fuse(g, &evidence)?;
            let (avg, draws) = self.sample_decode(g, p, mean, var, &noise.unified)?;
            (avg, draws, Some((mean, var)))
        } else {
            let r_star: Vec<Var> = evidence.iter().map(|e| e.r).collect();
            let z = aggregate_baseline(g, p, self.config.aggregation, &r_star, self.concat.as_ref())?;
            let probs = self.decode_probs(g, p, z)?;
            (probs, vec![probs], None)
        };
        Ok(Forward {
            unified,
            unified_draws,
            unimodal,
            attention,
            target_features,
            lengthscales,
            posterior,
        })
    }

    /// All loss terms for a forward pass over a labelled batch.
    pub fn losses(&self, g: &mut Graph, fwd: &Forward, batch: &MultimodalBatch) -> Result<LossNodes> {
        let nll = nll_loss(g, fwd.unified, &fwd.unimodal, &batch.one_hot())?;
        let contrastive: Vec<Var> = if self.config.rbf_loss {
            fwd.target_features
                .iter()
                .zip(&fwd.lengthscales)
                .map(|(&f, &l)| contrastive_term(g, f, l, batch.labels(), self.config.tau, self.config.attention.scaling))
                .collect::<Result<_>>()?
        } else {
            vec![g.constant(Tensor::scalar(0.0)); fwd.lengthscales.len()]
        };
        let contrastive_mean = mean_vars(g, &contrastive)?;
        let rbf = rbf_loss(g, contrastive_mean, &fwd.lengthscales, self.config.alpha)?;
        let weighted = g.scale(rbf, self.config.beta)?;
        let total = g.add(nll, weighted)?;
        Ok(LossNodes {
            nll,
            contrastive,
            contrastive_mean,
            rbf,
            total,
        })
    }

    /// Builds the total loss on `g` with parameters bound to `p`. Used by the
    /// training step and by finite-difference checks.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &MultimodalBatch,
        noise: &Noise,
    ) -> Result<(Forward, LossNodes)> {
        let fwd = self.forward(g, p, batch.features(), &self.memory, noise)?;
        let losses = self.losses(g, &fwd, batch)?;
        Ok((fwd, losses))
    }

    /// Predicts in chunks with parameters held constant.
    pub fn predict(&self, features: &[Tensor], rng: &mut impl Rng) -> Result<Prediction> {
        if features.len() != self.num_modalities() {
            return Err(MnpError::Contract(format!(
                "model has {} modalities, got {}",
                self.num_modalities(),
                features.len()
            )));
        }
        let n = features[0].rows();
        let mut parts: Vec<Prediction> = Vec::new();
        let mut start = 0;
        while start < n || (n == 0 && parts.is_empty()) {
            let end = (start + PREDICT_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk: Vec<Tensor> = features.iter().map(|f| f.select_rows(&idx)).collect();
            let mut g = Graph::new();
            let p = self.params.bind_constants(&mut g);
            let noise = self.sample_noise(end - start, rng);
            let fwd = self.forward(&mut g, &p, &chunk, &self.memory, &noise)?;
            parts.push(Prediction {
                unified: g.value(fwd.unified).clone(),
                unified_draws: fwd.unified_draws.iter().map(|&v| g.value(v).clone()).collect(),
                unimodal: fwd.unimodal.iter().map(|&v| g.value(v).clone()).collect(),
                attention: fwd.attention.iter().map(|&v| g.value(v).clone()).collect(),
            });
            if n == 0 {
                break;
            }
            start = end;
        }
        if parts.len() == 1 {
            return Ok(parts.pop().expect("one part"));
        }
        let stack = |pick: &dyn Fn(&Prediction) -> &Tensor| -> Result<Tensor> {
            let rows: Vec<&Tensor> = parts.iter().map(pick).collect();
            Ok(Tensor::vstack(&rows)?)
        };
        Ok(Prediction {
            unified: stack(&|q| &q.unified)?,
            unified_draws: (0..parts[0].unified_draws.len())
                .map(|s| stack(&|q| &q.unified_draws[s]))
                .collect::<Result<_>>()?,
            unimodal: (0..self.num_modalities())
                .map(|m| stack(&|q| &q.unimodal[m]))
                .collect::<Result<_>>()?,
            attention: (0..self.num_modalities())
                .map(|m| stack(&|q| &q.attention[m]))
                .collect::<Result<_>>()?,
        })
    }

    /// Attention rows of `probes` over modality `m`'s memory.
    pub fn attention_probe(&self, m: usize, probes: &Tensor) -> Result<Tensor> {
        if m >= self.num_modalities() || probes.cols() != self.input_dims[m] {
            return Err(MnpError::Contract(format!("probe does not match modality {m}")));
        }
        let mut g = Graph::new();
        let p = self.params.bind_constants(&mut g);
        let net = &self.nets[m];
        let tx = g.constant(probes.clone());
        let cx = g.constant(self.memory.features(m).clone());
        let (tx, cx) = match &net.extractor {
            Some(e) => (e.forward(&mut g, &p, tx)?, e.forward(&mut g, &p, cx)?),
            None => (tx, cx),
        };
        let lengthscale = (self.config.attention.similarity == Similarity::Rbf).then(|| p.var(net.lengthscale));
        let a = attention_weights(&mut g, &self.config.attention, tx, cx, lengthscale)?;
        Ok(g.value(a).clone())
    }
}

/// Optimiser and randomness for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &Mnp, learning_rate: f64, seed: u64) -> Self {
        let cfg = AdamConfig {
            lr: learning_rate,
            ..AdamConfig::default()
        };
        Self {
            adam: Adam::new(cfg, model.params.values()),
            rng: stream_rng(seed, STREAM_TRAIN),
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// One optimisation step on `batch` (the target set), followed by the
    /// memory update. `pool` is the training set, used by the random memory
    /// strategy to resample the context before the step.
    pub fn step(&mut self, model: &mut Mnp, batch: &MultimodalBatch, pool: &MultimodalBatch) -> Result<(LossReport, Vec<Replacement>)> {
        let strategy = model.config.memory;
        if strategy.kind == UpdateKind::Random {
            model.memory = ContextMemory::init_random(pool, model.memory.per_class(), &mut self.rng)?;
        }
        let noise = model.sample_noise(batch.len(), &mut self.rng);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let (fwd, loss) = model.loss_graph(&mut g, &p, batch, &noise)?;
        let report = LossReport {
            nll: g.value(loss.nll).item(),
            contrastive: loss.contrastive.iter().map(|&v| g.value(v).item()).collect(),
            rbf: g.value(loss.rbf).item(),
            total: g.value(loss.total).item(),
        };
        if !report.total.is_finite() {
            return Err(MnpError::Numeric(format!(
                "non-finite loss at step {}: nll {}, rbf {}",
                self.adam.steps_taken(),
                report.nll,
                report.rbf
            )));
        }
        let grads = g.backward(loss.total)?;
        let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.get(v)).collect();
        let mut values: Vec<&mut Tensor> = model.params.values_mut().iter_mut().collect();
        self.adam.step(&mut values, &grads).map_err(|e| match e {
            mnp_tensor::TensorError::NonFinite(msg) => MnpError::Numeric(msg),
            other => other.into(),
        })?;
        for net in &model.nets {
            clamp_lengthscale(model.params.get_mut(net.lengthscale));
        }
        let attention: Vec<Tensor> = fwd.attention.iter().map(|&a| g.value(a).clone()).collect();
        let unimodal: Vec<Tensor> = fwd.unimodal.iter().map(|&u| g.value(u).clone()).collect();
        let replaced = model.memory.update(batch, &attention, &unimodal, strategy)?;
        Ok((report, replaced))
    }

    /// One pass over `train` in a freshly shuffled order. Returns the report
    /// of every step.
    pub fn epoch(&mut self, model: &mut Mnp, train: &MultimodalBatch, batch_size: usize) -> Result<Vec<LossReport>> {
        if batch_size == 0 {
            return Err(MnpError::Config("train.batch_size: must be positive".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut reports = Vec::new();
        for chunk in order.chunks(batch_size) {
            let batch = train.select(chunk);
            reports.push(self.step(model, &batch, train)?.0);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            context_size: 4,
            latent_dim: 4,
            mc_samples: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn nll_of_uniform_predictions_is_two_ln_two() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::full(&[3, 2], 0.5));
        let truth = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let l = nll_loss(&mut g, u, &[u], &truth).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_of_perfect_predictions_is_zero() {
        let mut g = Graph::new();
        let truth = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let u = g.constant(truth.clone());
        let l = nll_loss(&mut g, u, &[u, u], &truth).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn contrastive_anchor_example() {
        // Features chosen so that k(1,2) = 1 and k(1,3) underflows to 0.
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0], vec![0.0], vec![100.0]]).unwrap());
        let l = g.constant(Tensor::row(vec![1.0]));
        let loss = contrastive_term(&mut g, x, l, &[0, 0, 1], 1.0, DistanceScaling::LengthscaleSquared).unwrap();
        // Anchors 1 and 2 each contribute -log(e / (e + 1)); anchor 3 has no positive.
        let anchor = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((anchor - 0.3133).abs() < 1e-4);
        assert!((g.value(loss).item() - 2.0 * anchor).abs() < 1e-12);
    }

    #[test]
    fn contrastive_with_equal_kernels_is_log_of_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        let l = g.constant(Tensor::row(vec![1.0, 1.0]));
        let loss = contrastive_term(&mut g, x, l, &[0, 0, 1, 1], 0.1, DistanceScaling::LengthscaleSquared).unwrap();
        assert!((g.value(loss).item() - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_single_sample_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let l = g.constant(Tensor::row(vec![1.0, 1.0]));
        let loss = contrastive_term(&mut g, x, l, &[0], 0.1, DistanceScaling::LengthscaleSquared).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn rbf_loss_penalty_example() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::scalar(0.0));
        let l = g.param(Tensor::full(&[1, 4], 10.0));
        let loss = rbf_loss(&mut g, zero, &[l], 1.0).unwrap();
        assert!((g.value(loss).item() - 20.0).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        for &d in grads.get(l).data() {
            assert!((d - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_are_distributions() {
        let train = make_moons(40, 0.1, 0).unwrap();
        let model = Mnp::new(&tiny_config(), &train, 3).unwrap();
        let mut rng = stream_rng(0, 9);
        let pred = model.predict(train.features(), &mut rng).unwrap();
        for t in std::iter::once(&pred.unified).chain(&pred.unimodal).chain(&pred.attention) {
            for i in 0..t.rows() {
                let s: f64 = t.row_slice(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(t.row_slice(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
        assert_eq!(pred.unified_draws.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let train = make_moons(40, 0.1, 0).unwrap();
        let run = || {
            let mut model = Mnp::new(&tiny_config(), &train, 3).unwrap();
            let mut trainer = Trainer::new(&model, 1e-2, 3);
            let mut out = Vec::new();
            for _ in 0..3 {
                out.extend(trainer.epoch(&mut model, &train, 16).unwrap());
            }
            (out, model.params().clone(), model.memory().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_lengthscale_does_not_move() {
        let train = make_moons(40, 0.1, 0).unwrap();
        let cfg = ModelConfig {
            learn_lengthscale: false,
            ..tiny_config()
        };
        let mut model = Mnp::new(&cfg, &train, 1).unwrap();
        let before = model.lengthscale(0).clone();
        let mut trainer = Trainer::new(&model, 1e-1, 1);
        trainer.epoch(&mut model, &train, 20).unwrap();
        assert_eq!(model.lengthscale(0), &before);
    }

    #[test]
    fn beta_zero_removes_the_rbf_loss_from_the_gradient() {
        let train = make_moons(12, 0.1, 0).unwrap();
        let cfg = ModelConfig {
            beta: 0.0,
            ..tiny_config()
        };
        let model = Mnp::new(&cfg, &train, 1).unwrap();
        let noise = model.sample_noise(train.len(), &mut stream_rng(1, 0));
        let grad_of = |use_total: bool| {
            let mut g = Graph::new();
            let p = model.params().bind(&mut g);
            let (_, loss) = model.loss_graph(&mut g, &p, &train, &noise).unwrap();
            let target = if use_total { loss.total } else { loss.nll };
            let grads = g.backward(target).unwrap();
            grads.get(p.var(model.nets[0].lengthscale))
        };
        assert_eq!(grad_of(true), grad_of(false));
    }

    #[test]
    fn checkpoint_parts_round_trip() {
        let train = make_moons(20, 0.1, 0).unwrap();
        let model = Mnp::new(&tiny_config(), &train, 5).unwrap();
        let named = model
            .params()
            .names()
            .iter()
            .cloned()
            .zip(model.params().values().iter().cloned())
            .collect();
        let back = Mnp::from_parts(model.config(), &[2], 2, named, model.memory().clone()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.memory(), model.memory());
    }
}
