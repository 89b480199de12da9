//! Ensemble error estimation and the iterative age corrector.
//!
//! An ensemble of small regressors maps (image embedding, candidate age) to
//! estimates of error metrics that normally need the true age. A softmax
//! weighting combines them, together with the members' disagreement, into one
//! estimated error. When that estimate exceeds `epsilon`, a Gaussian candidate
//! generator is nudged toward low estimated error, candidates are sampled
//! around the incumbent and the best one (incumbent included) is kept.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{param_struct, Bind, Binder, Params};

/// Explicit error metric between a predicted age `x` and the true age `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    Absolute,
    Squared,
    Huber { delta: f64 },
    LogAbsolute,
}

impl ErrorMetric {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let d = (x - y).abs();
        match *self {
            Self::Absolute => d,
            Self::Squared => d * d,
            Self::Huber { delta } => {
                if d <= delta {
                    0.5 * d * d
                } else {
                    delta * (d - 0.5 * delta)
                }
            }
            Self::LogAbsolute => d.ln_1p(),
        }
    }

    /// Typical magnitude, used as the fixed output scale of the regressors.
    pub fn unit_scale(&self) -> f64 {
        match *self {
            Self::Absolute => 10.0,
            Self::Squared => 200.0,
            Self::Huber { delta } => 10.0 * delta.max(1.0),
            Self::LogAbsolute => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorVector {
    pub values: Tensor<f64>,
    /// Leading components that are estimates rather than measurements.
    pub k: usize,
}

impl ErrorVector {
    pub fn new(values: Vec<f64>, k: usize) -> Result<Self> {
        if k > values.len() {
            return Err(Error::dim(
                "error_vector",
                format!("k = {k} exceeds h = {}", values.len()),
            ));
        }
        Ok(Self {
            values: Tensor::vector(&values),
            k,
        })
    }

    pub fn h(&self) -> usize {
        self.values.len()
    }
}

/// Every metric evaluated against the label.
pub fn compute_error_vector(x: f64, y: f64, metrics: &[ErrorMetric]) -> Result<ErrorVector> {
    if metrics.is_empty() {
        return Err(Error::contract(
            "compute_error_vector",
            "no metrics registered",
        ));
    }
    ErrorVector::new(metrics.iter().map(|m| m.eval(x, y)).collect(), 0)
}

param_struct! {
    /// Learnable logits of the metric weights.
    pub struct ErrorWeights => ErrorWeightVars { logits }
}

impl ErrorWeights {
    pub fn uniform(h: usize) -> Self {
        Self {
            logits: Tensor::zeros(&[h]),
        }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            logits: Tensor::from_f64(&[logits.len()], logits).expect("vector shape"),
        }
    }

    pub fn h(&self) -> usize {
        self.logits.len()
    }

    /// `softmax(logits)`
    pub fn weights(&self) -> Vec<f64> {
        let l = self.logits.to_f64_vec();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }
}

fn dot_weights(values: &[f64], w: &ErrorWeights, op: &'static str) -> Result<f64> {
    if values.len() != w.h() {
        return Err(Error::dim(
            op,
            format!("{} components vs {} weights", values.len(), w.h()),
        ));
    }
    Ok(values.iter().zip(w.weights()).map(|(v, w)| v * w).sum())
}

/// `sum_i softmax(logits)_i * e_i`
pub fn weighted_error(e: &ErrorVector, w: &ErrorWeights) -> Result<f64> {
    dot_weights(e.values.data(), w, "weighted_error")
}

param_struct! {
    /// Two-layer tanh regressor.
    pub struct MemberParams => MemberVars { w1, b1, w2, b2 }
}

impl MemberParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn(&[input, hidden], 1.0 / (input as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, outputs], 0.1 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(input: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, outputs]),
            b2: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.b2.len()
    }
}

/// `L` regressors of one architecture plus the input standardization they share.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub members: Vec<MemberParams>,
    /// Each output is `scale_j * raw_j`.
    pub output_scales: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub age_center: f64,
    pub age_spread: f64,
    pub steps: u64,
}

impl EnsembleState {
    pub fn new(members: Vec<MemberParams>, output_scales: Vec<f64>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::contract("ensemble", "need at least one member"))?;
        let (inp, out) = (first.inputs(), first.outputs());
        if members
            .iter()
            .any(|m| m.w1.shape() != first.w1.shape() || m.w2.shape() != first.w2.shape())
        {
            return Err(Error::dim("ensemble", "members differ in architecture"));
        }
        if output_scales.len() != out {
            return Err(Error::dim(
                "ensemble",
                format!("{} scales for {out} outputs", output_scales.len()),
            ));
        }
        let d = inp - 1;
        Ok(Self {
            members,
            output_scales,
            feature_mean: vec![0.0; d],
            feature_std: vec![1.0; d],
            age_center: 0.0,
            age_spread: 1.0,
            steps: 0,
        })
    }

    /// Fresh members for embeddings of width `dim`.
    pub fn init<R: Rng + ?Sized>(dim: usize, cfg: &CorrectionConfig, rng: &mut R) -> Result<Self> {
        let k = cfg.metrics.len();
        let members = (0..cfg.members)
            .map(|_| MemberParams::init(dim + 1, cfg.hidden, k, rng))
            .collect();
        let mut s = Self::new(
            members,
            cfg.metrics.iter().map(ErrorMetric::unit_scale).collect(),
        )?;
        s.age_center = 0.5 * (cfg.age_min + cfg.age_max);
        s.age_spread = ((cfg.age_max - cfg.age_min) / 12f64.sqrt()).max(1.0);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn k(&self) -> usize {
        self.output_scales.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// Standardizes embeddings with per-feature mean and deviation of `embeddings`.
    pub fn fit_normalization(&mut self, embeddings: &[Tensor]) -> Result<()> {
        let d = self.embedding_dim();
        if embeddings.is_empty() || embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::dim(
                "ensemble",
                format!("need non-empty embeddings of width {d}"),
            ));
        }
        let n = embeddings.len() as f64;
        for j in 0..d {
            let mean = embeddings.iter().map(|e| e.data()[j] as f64).sum::<f64>() / n;
            let var = embeddings
                .iter()
                .map(|e| (e.data()[j] as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            self.feature_mean[j] = mean;
            self.feature_std[j] = var.sqrt().max(1e-6);
        }
        Ok(())
    }

    pub fn normalize(&self, embedding: &Tensor) -> Result<Tensor> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::dim(
                "ensemble",
                format!(
                    "embedding of {} for width {}",
                    embedding.len(),
                    self.embedding_dim()
                ),
            ));
        }
        let v: Vec<f64> = embedding
            .data()
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(&x, (m, s))| (x as f64 - m) / s)
            .collect();
        Tensor::from_f64(&[v.len()], &v)
    }

    /// Member input `[normalized embedding, scaled age]`.
    pub fn features(&self, embedding: &Tensor, age: f64) -> Result<Tensor> {
        let mut v = self.normalize(embedding)?.into_data();
        v.push(((age - self.age_center) / self.age_spread) as f32);
        Tensor::new(vec![v.len()], v)
    }
}

impl Params for EnsembleState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.members.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.members.visit_mut(prefix, f);
    }
}

/// `[N, k]` output of one member on `[N, inputs]` features.
/// `max(x, 0) + ln(1 + exp(-|x|))`, written so large inputs cannot overflow.
fn softplus<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let a = tape.abs(x);
    let relu = tape.add(x, a)?;
    let relu = tape.scale(relu, 0.5);
    let na = tape.neg(a);
    let e = tape.exp(na);
    let e = tape.offset(e, 1.0);
    let l = tape.log(e);
    tape.add(relu, l)
}

/// Every metric is nonnegative, so outputs pass through softplus before scaling.
pub fn member_forward<T: Scalar>(
    tape: &mut Tape<T>,
    m: &MemberVars,
    scales: &[f64],
    x: Var,
) -> Result<Var> {
    let h = tape.linear(x, m.w1, m.b1)?;
    let h = tape.tanh(h);
    let o = tape.linear(h, m.w2, m.b2)?;
    let o = softplus(tape, o)?;
    let n = tape.shape(o)[0];
    let s = tape.constant(Tensor::from_f64(&[scales.len()], scales)?);
    let s = tape.broadcast_to(s, &[n, scales.len()])?;
    tape.mul(o, s)
}

/// Mean of the member outputs for one feature vector.
pub fn ensemble_estimate(features: &Tensor, ens: &EnsembleState) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(features.cast::<f64>().reshape(&[1, features.len()])?);
    let vars = ens
        .members
        .bind(&mut Binder::frozen(), &mut tape, "ensemble");
    let outs = vars
        .iter()
        .map(|m| member_forward(&mut tape, m, &ens.output_scales, x))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_of(&mut tape, &outs)?;
    tape.value(mean).reshape(&[ens.k()])
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64))
}

/// Member outputs for a `[K]` column of candidate ages.
fn ensemble_on_candidates<T: Scalar>(
    tape: &mut Tape<T>,
    ens: &EnsembleState,
    embedding: &Tensor,
    candidates: Var,
) -> Result<Vec<Var>> {
    let k = tape.shape(candidates)[0];
    let d = ens.embedding_dim();
    let emb = tape.constant(ens.normalize(embedding)?.cast::<T>().reshape(&[1, d])?);
    let emb = tape.broadcast_to(emb, &[k, d])?;
    let a = tape.reshape(candidates, &[k, 1])?;
    let a = tape.offset(a, -ens.age_center);
    let a = tape.scale(a, 1.0 / ens.age_spread);
    let x = tape.concat(&[emb, a], 1)?;
    let vars = ens.members.bind(&mut Binder::frozen(), tape, "ensemble");
    vars.iter()
        .map(|m| member_forward(tape, m, &ens.output_scales, x))
        .collect()
}

/// Spread of the members' first output, `[K]`.
fn disagreement_on_tape<T: Scalar>(tape: &mut Tape<T>, outs: &[Var]) -> Result<Var> {
    let k = tape.shape(outs[0])[0];
    let firsts = outs
        .iter()
        .map(|&o| tape.slice(o, 1, 0, 1))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_of(tape, &firsts)?;
    let mut sq = Vec::with_capacity(firsts.len());
    for &f in &firsts {
        let d = tape.sub(f, mean)?;
        sq.push(tape.mul(d, d)?);
    }
    let var = mean_of(tape, &sq)?;
    let var = tape.offset(var, 1e-6);
    let sd = tape.sqrt(var);
    tape.reshape(sd, &[k])
}

/// Estimated error of a batch of candidate ages for one sample.
pub trait ErrorEstimator {
    /// `[K]` estimates for the `[K]` candidates held in `candidates`.
    fn estimate_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        embedding: &Tensor,
        candidates: Var,
    ) -> Result<Var>;

    fn estimate(&self, embedding: &Tensor, candidates: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::vector(candidates));
        let e = self.estimate_on_tape(&mut tape, embedding, c)?;
        Ok(tape.value(e).to_f64_vec())
    }
}

/// Trained ensemble plus metric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrector {
    pub ensemble: EnsembleState,
    pub weights: ErrorWeights,
    /// Append the members' spread as a label-free component.
    pub disagreement: bool,
}

impl Corrector {
    pub fn new(ensemble: EnsembleState, weights: ErrorWeights, disagreement: bool) -> Result<Self> {
        let h = ensemble.k() + disagreement as usize;
        if weights.h() != h {
            return Err(Error::dim(
                "corrector",
                format!("{} weights for {h} components", weights.h()),
            ));
        }
        Ok(Self {
            ensemble,
            weights,
            disagreement,
        })
    }

    /// `[K, h]` error components for the candidates: ensemble means, then spread.
    fn components_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        embedding: &Tensor,
        candidates: Var,
    ) -> Result<Var> {
        let outs = ensemble_on_candidates(tape, &self.ensemble, embedding, candidates)?;
        let mean = mean_of(tape, &outs)?;
        if !self.disagreement {
            return Ok(mean);
        }
        let k = tape.shape(mean)[0];
        let sd = disagreement_on_tape(tape, &outs)?;
        let sd = tape.reshape(sd, &[k, 1])?;
        tape.concat(&[mean, sd], 1)
    }

    pub fn components(&self, embedding: &Tensor, candidates: &[f64]) -> Result<Tensor<f64>> {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::vector(candidates));
        let v = self.components_on_tape(&mut tape, embedding, c)?;
        Ok(tape.value(v).clone())
    }
}

fn weigh<T: Scalar>(tape: &mut Tape<T>, components: Var, weights: Var) -> Result<Var> {
    let h = tape.shape(components)[1];
    let k = tape.shape(components)[0];
    let w = tape.softmax(weights);
    let w = tape.reshape(w, &[h, 1])?;
    let e = tape.matmul(components, w)?;
    tape.reshape(e, &[k])
}

impl ErrorEstimator for Corrector {
    fn estimate_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        embedding: &Tensor,
        candidates: Var,
    ) -> Result<Var> {
        let comps = self.components_on_tape(tape, embedding, candidates)?;
        let w = tape.constant(self.weights.logits.cast());
        weigh(tape, comps, w)
    }
}

/// Weighted implicit estimates followed by weighted explicit measurements.
pub fn cumulative_error(
    features: &Tensor,
    ens: &EnsembleState,
    w: &ErrorWeights,
    explicit: &[f64],
) -> Result<f64> {
    if ens.k() + explicit.len() != w.h() {
        return Err(Error::dim(
            "cumulative_error",
            format!(
                "k = {} plus {} explicit components vs h = {}",
                ens.k(),
                explicit.len(),
                w.h()
            ),
        ));
    }
    let mut values = if ens.k() > 0 {
        ensemble_estimate(features, ens)?.into_data()
    } else {
        Vec::new()
    };
    values.extend_from_slice(explicit);
    dot_weights(&values, w, "cumulative_error")
}

/// Feature rows and `[N, k]` targets for ensemble training.
#[derive(Debug, Clone)]
pub struct EnsembleData {
    pub features: Tensor,
    pub targets: Tensor,
}

impl EnsembleData {
    pub fn len(&self) -> usize {
        self.features.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EnsembleTraining {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 128,
            lr: 3e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    /// Per member, mean squared distance over the whole set before and after.
    pub initial_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
}

/// `mean_n || phi(x_n) - e_n ||^2`
fn member_loss<T: Scalar>(
    tape: &mut Tape<T>,
    m: &MemberVars,
    scales: &[f64],
    features: Tensor<T>,
    targets: Tensor<T>,
) -> Result<Var> {
    let n = features.shape()[0];
    let x = tape.constant(features);
    // compare in unit space so each metric weighs the same
    let inv: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
    let inv = tape.constant(Tensor::from_f64(&[inv.len()], &inv)?);
    let inv = tape.broadcast_to(inv, targets.shape())?;
    let y = tape.constant(targets);
    let y = tape.mul(y, inv)?;
    let out = member_forward(tape, m, scales, x)?;
    let out = tape.mul(out, inv)?;
    let d = tape.sub(out, y)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n as f64))
}

fn full_loss(m: &MemberParams, scales: &[f64], data: &EnsembleData) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let v = m.bind(&mut Binder::frozen(), &mut tape, "m");
    let l = member_loss(
        &mut tape,
        &v,
        scales,
        data.features.cast(),
        data.targets.cast(),
    )?;
    tape.value(l).item()
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.len() / t.shape()[0];
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(vec![idx.len(), w], out).expect("row gather")
}

/// Trains every member independently on minibatches; members differ by shuffling seed.
pub fn train_ensemble(
    data: &EnsembleData,
    ens: &mut EnsembleState,
    cfg: &EnsembleTraining,
) -> Result<EnsembleReport> {
    if data.is_empty() {
        return Err(Error::contract("train_ensemble", "empty dataset"));
    }
    let inputs = ens.members[0].inputs();
    if data.features.shape() != [data.len(), inputs]
        || data.targets.shape() != [data.len(), ens.k()]
    {
        return Err(Error::dim(
            "train_ensemble",
            format!(
                "features {:?} / targets {:?}",
                data.features.shape(),
                data.targets.shape()
            ),
        ));
    }
    let mut report = EnsembleReport {
        initial_loss: Vec::new(),
        final_loss: Vec::new(),
    };
    let scales = ens.output_scales.clone();
    let n = data.len();
    let batch = cfg.batch.clamp(1, n);
    for (mi, member) in ens.members.iter_mut().enumerate() {
        report.initial_loss.push(full_loss(member, &scales, data)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(mi as u64 * 7919));
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        for _ in 0..cfg.steps {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let mut tape = Tape::<f32>::new();
            let mut binder = Binder::trainable();
            let v = member.bind(&mut binder, &mut tape, "");
            let loss = member_loss(
                &mut tape,
                &v,
                &scales,
                rows(&data.features, idx),
                rows(&data.targets, idx),
            )?;
            let grads = binder.gradients(&tape.backward(loss)?);
            opt.step(member, &grads);
        }
        report.final_loss.push(full_loss(member, &scales, data)?);
    }
    ens.steps += cfg.steps as u64;
    Ok(report)
}

/// Gaussian candidate generator over age offsets from the incumbent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent: usize,
    pub hidden: usize,
    pub candidates: usize,
    /// Years per unit of the raw mean output.
    pub offset_scale: f64,
    /// Spread of the candidates before any update.
    pub initial_sigma: f64,
    pub lr: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent: 8,
            hidden: 32,
            candidates: 16,
            offset_scale: 10.0,
            initial_sigma: 5.0,
            lr: 0.05,
        }
    }
}

param_struct! {
    pub struct GeneratorParams => GeneratorVars { w1, b1, w2, b2 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGenerator {
    pub params: GeneratorParams,
    pub config: GeneratorConfig,
}

/// Latent draws `z: [K, latent]` and standard normal offsets `xi: [K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNoise {
    pub z: Tensor,
    pub xi: Tensor,
}

impl GeneratorNoise {
    pub fn draw<R: Rng + ?Sized>(k: usize, latent: usize, rng: &mut R) -> Self {
        Self {
            z: Tensor::randn(&[k, latent], 1.0, rng),
            xi: Tensor::randn(&[k], 1.0, rng),
        }
    }
}

impl CandidateGenerator {
    /// The output layer starts at zero: mean offset 0, spread `initial_sigma`.
    pub fn init<R: Rng + ?Sized>(dim: usize, config: GeneratorConfig, rng: &mut R) -> Self {
        let inp = dim + config.latent;
        let params = GeneratorParams {
            w1: Tensor::randn(&[inp, config.hidden], 1.0 / (inp as f64).sqrt(), rng),
            b1: Tensor::zeros(&[config.hidden]),
            w2: Tensor::zeros(&[config.hidden, 2]),
            b2: Tensor::zeros(&[2]),
        };
        Self { params, config }
    }

    pub fn input_dim(&self) -> usize {
        self.params.w1.shape()[0] - self.config.latent
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> GeneratorNoise {
        GeneratorNoise::draw(self.config.candidates, self.config.latent, rng)
    }
}

/// `[K]` candidates `incumbent + mu + sigma * xi` on the tape.
pub fn generator_candidates<T: Scalar>(
    tape: &mut Tape<T>,
    v: &GeneratorVars,
    cfg: &GeneratorConfig,
    input: &Tensor,
    incumbent: f64,
    noise: &GeneratorNoise,
) -> Result<Var> {
    let k = noise.xi.len();
    if noise.z.shape() != [k, cfg.latent] {
        return Err(Error::dim(
            "candidate_generator",
            format!("latent draws {:?}", noise.z.shape()),
        ));
    }
    let d = input.len();
    let e = tape.constant(input.cast::<T>().reshape(&[1, d])?);
    let e = tape.broadcast_to(e, &[k, d])?;
    let z = tape.constant(noise.z.cast());
    let x = tape.concat(&[e, z], 1)?;
    let h = tape.linear(x, v.w1, v.b1)?;
    let h = tape.tanh(h);
    let o = tape.linear(h, v.w2, v.b2)?;
    let mu = tape.slice(o, 1, 0, 1)?;
    let mu = tape.scale(mu, cfg.offset_scale);
    let log_sigma = tape.slice(o, 1, 1, 1)?;
    let log_sigma = tape.offset(log_sigma, cfg.initial_sigma.ln());
    let sigma = tape.exp(log_sigma);
    let xi = tape.constant(noise.xi.cast::<T>().reshape(&[k, 1])?);
    let spread = tape.mul(sigma, xi)?;
    let c = tape.add(mu, spread)?;
    let c = tape.offset(c, incumbent);
    tape.reshape(c, &[k])
}

/// Mean estimated error of the candidates drawn with `noise`, and the candidates.
pub fn generator_objective<E: ErrorEstimator>(
    gen: &CandidateGenerator,
    est: &E,
    embedding: &Tensor,
    input: &Tensor,
    incumbent: f64,
    noise: &GeneratorNoise,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::<f64>::new();
    let v = gen
        .params
        .bind(&mut Binder::frozen(), &mut tape, "generator");
    let c = generator_candidates(&mut tape, &v, &gen.config, input, incumbent, noise)?;
    let e = est.estimate_on_tape(&mut tape, embedding, c)?;
    let m = tape.mean(e);
    Ok((tape.value(m).item()?, tape.value(c).to_f64_vec()))
}

/// One optimizer step on the generator; returns the objective before the step.
pub fn update_generator<E: ErrorEstimator>(
    gen: &mut CandidateGenerator,
    opt: &mut AdamW,
    est: &E,
    embedding: &Tensor,
    input: &Tensor,
    incumbent: f64,
    noise: &GeneratorNoise,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::trainable();
    let v = gen.params.bind(&mut binder, &mut tape, "");
    let c = generator_candidates(&mut tape, &v, &gen.config, input, incumbent, noise)?;
    let e = est.estimate_on_tape(&mut tape, embedding, c)?;
    let m = tape.mean(e);
    let value = tape.value(m).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "update_generator",
            node: m.index(),
        });
    }
    let grads = binder.gradients(&tape.backward(m)?);
    opt.step(&mut gen.params, &grads);
    Ok(value)
}

/// Candidates for `noise`, clamped to `[lo, hi]`.
pub fn sample_candidates(
    gen: &CandidateGenerator,
    input: &Tensor,
    incumbent: f64,
    noise: &GeneratorNoise,
    lo: f64,
    hi: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::<f32>::new();
    let v = gen
        .params
        .bind(&mut Binder::frozen(), &mut tape, "generator");
    let c = generator_candidates(&mut tape, &v, &gen.config, input, incumbent, noise)?;
    Ok(tape
        .value(c)
        .data()
        .iter()
        .map(|&a| (a as f64).clamp(lo, hi))
        .collect())
}

/// Lowest error wins; the incumbent keeps its place unless strictly beaten.
pub fn select_by_errors(
    candidates: &[f64],
    errors: &[f64],
    incumbent: usize,
) -> Result<(f64, f64)> {
    if candidates.is_empty() {
        return Err(Error::contract("select_candidate", "empty candidate list"));
    }
    if errors.len() != candidates.len() || incumbent >= candidates.len() {
        return Err(Error::dim(
            "select_candidate",
            "errors and incumbent must index the candidates",
        ));
    }
    let mut best = incumbent;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = i;
        }
    }
    Ok((candidates[best], errors[best]))
}

pub fn select_candidate<E: ErrorEstimator>(
    candidates: &[f64],
    incumbent: usize,
    est: &E,
    embedding: &Tensor,
) -> Result<(f64, f64)> {
    if candidates.is_empty() {
        return Err(Error::contract("select_candidate", "empty candidate list"));
    }
    let errors = est.estimate(embedding, candidates)?;
    select_by_errors(candidates, &errors, incumbent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    /// Feasibility threshold on the estimated error, in years.
    pub epsilon: f64,
    pub max_iters: usize,
    pub members: usize,
    pub hidden: usize,
    /// Metrics the ensemble learns to estimate (the implicit slots).
    pub metrics: Vec<ErrorMetric>,
    /// Add the members' spread as an extra label-free slot.
    pub disagreement: bool,
    pub age_min: f64,
    pub age_max: f64,
    pub generator: GeneratorConfig,
    pub training: EnsembleTraining,
    /// Candidate ages per training sample, drawn around the true age.
    pub samples_per_item: usize,
    pub sample_spread: f64,
    pub weight_steps: usize,
    pub weight_lr: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            max_iters: 10,
            members: 5,
            hidden: 32,
            metrics: vec![ErrorMetric::Absolute, ErrorMetric::Squared],
            disagreement: true,
            age_min: 1.0,
            age_max: 80.0,
            generator: GeneratorConfig::default(),
            training: EnsembleTraining::default(),
            samples_per_item: 8,
            sample_spread: 12.0,
            weight_steps: 200,
            weight_lr: 0.05,
        }
    }
}

impl CorrectionConfig {
    pub fn h(&self) -> usize {
        self.metrics.len() + self.disagreement as usize
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, message: &str| Error::Config {
            path: format!("{path}.{field}"),
            message: message.to_string(),
        };
        if !(self.epsilon > 0.0) {
            return Err(bad("epsilon", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(bad("max_iters", "must be at least 1"));
        }
        if self.generator.candidates == 0 {
            return Err(bad("generator.candidates", "must be at least 1"));
        }
        if self.members == 0 {
            return Err(bad("members", "must be at least 1"));
        }
        if self.metrics.is_empty() {
            return Err(bad("metrics", "must list at least one metric"));
        }
        if !(self.age_max > self.age_min) {
            return Err(bad("age_max", "must exceed age_min"));
        }
        if !(self.generator.initial_sigma > 0.0) {
            return Err(bad("generator.initial_sigma", "must be positive"));
        }
        Ok(())
    }
}

/// Labelled candidate ages around each sample's true age (and its base prediction, if given).
pub fn corrector_dataset<R: Rng + ?Sized>(
    ens: &EnsembleState,
    embeddings: &[Tensor],
    ages: &[f64],
    base: Option<&[f64]>,
    cfg: &CorrectionConfig,
    rng: &mut R,
) -> Result<(EnsembleData, Vec<f64>, Vec<(usize, f64)>)> {
    if embeddings.len() != ages.len() || base.is_some_and(|b| b.len() != ages.len()) {
        return Err(Error::dim(
            "corrector_dataset",
            "embeddings, ages and predictions must align",
        ));
    }
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    let mut abs = Vec::new();
    let mut index = Vec::new();
    for (i, (e, &y)) in embeddings.iter().zip(ages).enumerate() {
        let mut cands: Vec<f64> = (0..cfg.samples_per_item)
            .map(|_| y + cfg.sample_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Some(b) = base {
            cands.push(b[i]);
        }
        for a in cands {
            let a = a.clamp(cfg.age_min, cfg.age_max);
            feats.extend_from_slice(ens.features(e, a)?.data());
            targets.extend(cfg.metrics.iter().map(|m| m.eval(a, y) as f32));
            abs.push((a - y).abs());
            index.push((i, a));
        }
    }
    let n = abs.len();
    let data = EnsembleData {
        features: Tensor::new(vec![n, ens.embedding_dim() + 1], feats)?,
        targets: Tensor::new(vec![n, cfg.metrics.len()], targets)?,
    };
    Ok((data, abs, index))
}

/// Fits the weight logits so the weighted estimate tracks the true absolute error.
pub fn fit_error_weights(
    corrector: &mut Corrector,
    embeddings: &[Tensor],
    index: &[(usize, f64)],
    abs_error: &[f64],
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let h = corrector.weights.h();
    let mut comps = Vec::with_capacity(index.len() * h);
    for &(i, a) in index {
        comps.extend(corrector.components(&embeddings[i], &[a])?.into_data());
    }
    let n = index.len();
    let comps = Tensor::<f64>::new(vec![n, h], comps)?;
    let target = Tensor::vector(abs_error);
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut last = f64::NAN;
    for _ in 0..steps {
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::trainable();
        let w = corrector.weights.bind(&mut binder, &mut tape, "");
        let c = tape.constant(comps.clone());
        let e = weigh(&mut tape, c, w.logits)?;
        let t = tape.constant(target.clone());
        let d = tape.sub(e, t)?;
        let sq = tape.mul(d, d)?;
        let loss = tape.mean(sq);
        last = tape.value(loss).item()?;
        let grads = binder.gradients(&tape.backward(loss)?);
        opt.step(&mut corrector.weights, &grads);
    }
    Ok(last)
}

/// Builds, trains and calibrates a corrector on labelled embeddings.
pub fn train_corrector<R: Rng + ?Sized>(
    embeddings: &[Tensor],
    ages: &[f64],
    base: Option<&[f64]>,
    cfg: &CorrectionConfig,
    rng: &mut R,
) -> Result<(Corrector, EnsembleReport)> {
    cfg.validate("correction")?;
    let dim = embeddings
        .first()
        .ok_or_else(|| Error::contract("train_corrector", "no samples"))?
        .len();
    let mut ens = EnsembleState::init(dim, cfg, rng)?;
    ens.fit_normalization(embeddings)?;
    let (data, abs, index) = corrector_dataset(&ens, embeddings, ages, base, cfg, rng)?;
    let report = train_ensemble(&data, &mut ens, &cfg.training)?;
    let mut corrector = Corrector::new(ens, ErrorWeights::uniform(cfg.h()), cfg.disagreement)?;
    fit_error_weights(
        &mut corrector,
        embeddings,
        &index,
        &abs,
        cfg.weight_steps,
        cfg.weight_lr,
    )?;
    Ok((corrector, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub iteration: usize,
    pub candidate: f64,
    pub estimated_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub age: f64,
    pub iterations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub trace: Vec<TraceStep>,
}

/// Corrects one base prediction. The generator template is cloned, so each
/// sample starts from the same weights and keeps its own updates.
pub fn correction_loop<E: ErrorEstimator, R: Rng + ?Sized>(
    base: f64,
    embedding: &Tensor,
    generator_input: &Tensor,
    est: &E,
    template: &CandidateGenerator,
    cfg: &CorrectionConfig,
    rng: &mut R,
) -> Result<CorrectionOutcome> {
    cfg.validate("correction")?;
    let initial_error = est.estimate(embedding, &[base])?[0];
    let mut out = CorrectionOutcome {
        age: base,
        iterations: 0,
        initial_error,
        final_error: initial_error,
        trace: Vec::new(),
    };
    if initial_error <= cfg.epsilon {
        return Ok(out);
    }
    let mut gen = template.clone();
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.generator.lr,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut incumbent = base;
    for it in 1..=cfg.max_iters {
        let noise = gen.noise(rng);
        update_generator(
            &mut gen,
            &mut opt,
            est,
            embedding,
            generator_input,
            incumbent,
            &noise,
        )?;
        let noise = gen.noise(rng);
        let mut cands = sample_candidates(
            &gen,
            generator_input,
            incumbent,
            &noise,
            cfg.age_min,
            cfg.age_max,
        )?;
        cands.push(incumbent);
        let errors = est.estimate(embedding, &cands)?;
        let (age, err) = select_by_errors(&cands, &errors, cands.len() - 1)?;
        out.trace.push(TraceStep {
            iteration: it,
            candidate: age,
            estimated_error: err,
        });
        incumbent = age;
        out.iterations = it;
        out.final_error = err;
        if err <= cfg.epsilon {
            break;
        }
    }
    out.age = incumbent;
    Ok(out)
}

/// Corrects a batch of base predictions with one shared corrector.
pub fn correct_batch<R: Rng + ?Sized>(
    corrector: &Corrector,
    template: &CandidateGenerator,
    embeddings: &[Tensor],
    base: &[f64],
    cfg: &CorrectionConfig,
    rng: &mut R,
) -> Result<Vec<CorrectionOutcome>> {
    if embeddings.len() != base.len() {
        return Err(Error::dim("correct_batch", "one embedding per prediction"));
    }
    embeddings
        .iter()
        .zip(base)
        .map(|(e, &b)| {
            let input = corrector.ensemble.normalize(e)?;
            correction_loop(b, e, &input, corrector, template, cfg, rng)
        })
        .collect()
}

/// Writes `sample_id,iteration,candidate_age,estimated_error` rows.
pub fn write_trace_csv<W: Write>(writer: W, outcomes: &[CorrectionOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Data(format!("writing trace csv: {e}"));
    w.write_record(["sample_id", "iteration", "candidate_age", "estimated_error"])
        .map_err(io)?;
    for (id, o) in outcomes.iter().enumerate() {
        for s in &o.trace {
            w.write_record([
                id.to_string(),
                s.iteration.to_string(),
                format!("{:.6}", s.candidate),
                format!("{:.6}", s.estimated_error),
            ])
            .map_err(io)?;
        }
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing trace csv: {e}")))?;
    Ok(())
}

/// Synthetic embeddings that encode the true age smoothly, with biased base predictions.
#[derive(Debug, Clone)]
pub struct BiasFixture {
    pub embeddings: Vec<Tensor>,
    pub ages: Vec<f64>,
    pub base: Vec<f64>,
}

/// `n` samples with integer ages in `[1, 80]`, embeddings of width `dim`
/// (a fixed random projection of smooth age features plus noise) and base
/// predictions `age + bias`. The projection depends only on `dim`.
pub fn bias_fixture(seed: u64, n: usize, dim: usize, bias: f64) -> BiasFixture {
    let mut world = ChaCha8Rng::seed_from_u64(0x5eed_0000 + dim as u64);
    let basis = 6;
    let proj: Tensor<f64> = Tensor::randn(&[basis, dim], 1.0 / (basis as f64).sqrt(), &mut world);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fx = BiasFixture {
        embeddings: Vec::new(),
        ages: Vec::new(),
        base: Vec::new(),
    };
    for _ in 0..n {
        let y = rng.random_range(1..=80) as f64;
        let u = y / 80.0;
        let feats = [
            u,
            u * u,
            (3.0 * u).sin(),
            (3.0 * u).cos(),
            (5.0 * u).sin(),
            (5.0 * u).cos(),
        ];
        let e: Vec<f64> = (0..dim)
            .map(|j| {
                let clean: f64 = (0..basis)
                    .map(|b| feats[b] * proj.data()[b * dim + j])
                    .sum();
                clean + 0.02 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        fx.embeddings
            .push(Tensor::from_f64(&[dim], &e).expect("vector"));
        fx.ages.push(y);
        fx.base.push(y + bias);
    }
    fx
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::numeric::{finite_diff_check, Objective, DEFAULT_STEP};

    /// Member whose outputs are `outputs` for every input (before scaling).
    fn const_member(inputs: usize, outputs: &[f64]) -> MemberParams {
        let mut m = MemberParams::zeros(inputs, 4, outputs.len());
        let raw: Vec<f64> = outputs.iter().map(|v| v.exp_m1().ln()).collect();
        m.b2 = Tensor::from_f64(&[raw.len()], &raw).unwrap();
        m
    }

    #[test]
    fn error_vector_fixtures() {
        let m = [ErrorMetric::Absolute, ErrorMetric::Squared];
        assert_eq!(
            compute_error_vector(5.0, 5.0, &m).unwrap().values.data(),
            &[0.0, 0.0]
        );
        assert_eq!(
            compute_error_vector(7.0, 5.0, &m).unwrap().values.data(),
            &[2.0, 4.0]
        );
        assert!(compute_error_vector(1.0, 2.0, &[]).is_err());
    }

    #[test]
    fn error_vector_slots_follow_their_metric() {
        let metrics = [
            ErrorMetric::Huber { delta: 1.5 },
            ErrorMetric::LogAbsolute,
            ErrorMetric::Absolute,
            ErrorMetric::Huber { delta: 10.0 },
        ];
        let e = compute_error_vector(3.0, 7.5, &metrics).unwrap();
        let d: f64 = 4.5;
        let expect = [1.5 * (d - 0.75), (1.0 + d).ln(), d, 0.5 * d * d];
        for (got, want) in e.values.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_error_fixtures() {
        let e = ErrorVector::new(vec![2.0, 4.0], 0).unwrap();
        assert!((weighted_error(&e, &ErrorWeights::uniform(2)).unwrap() - 3.0).abs() < 1e-12);
        let sharp = ErrorWeights::from_logits(&[20.0, 0.0]);
        assert!((weighted_error(&e, &sharp).unwrap() - 2.0).abs() < 1e-4);
        assert!(matches!(
            weighted_error(&e, &ErrorWeights::uniform(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn weighted_error_matches_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let e: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 10.0).collect();
        let logits: Vec<f64> = (0..5)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expect: f64 = e.iter().zip(&logits).map(|(v, l)| v * l.exp() / z).sum();
        let got = weighted_error(
            &ErrorVector::new(e, 0).unwrap(),
            &ErrorWeights::from_logits(&logits),
        )
        .unwrap();
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn ensemble_mean_fixtures() {
        let x = Tensor::zeros(&[3]);
        let ens = EnsembleState::new(
            vec![const_member(3, &[1.0]), const_member(3, &[3.0])],
            vec![1.0],
        )
        .unwrap();
        assert!((ensemble_estimate(&x, &ens).unwrap().data()[0] - 2.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let m = MemberParams::init(3, 5, 2, &mut rng);
        let single = EnsembleState::new(vec![m.clone()], vec![1.0, 1.0]).unwrap();
        let triple = EnsembleState::new(vec![m.clone(), m.clone(), m], vec![1.0, 1.0]).unwrap();
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        let a = ensemble_estimate(&x, &single).unwrap();
        let b = ensemble_estimate(&x, &triple).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn ensemble_matches_loop_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let members: Vec<MemberParams> = (0..4)
            .map(|_| MemberParams::init(5, 6, 2, &mut rng))
            .collect();
        let ens = EnsembleState::new(members.clone(), vec![2.0, 3.0]).unwrap();
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let got = ensemble_estimate(&x, &ens).unwrap();
        let mut acc = [0.0f64; 2];
        for m in &members {
            let h: Vec<f64> = (0..6)
                .map(|j| {
                    let s: f64 = (0..5)
                        .map(|i| x.data()[i] as f64 * m.w1.data()[i * 6 + j] as f64)
                        .sum();
                    (s + m.b1.data()[j] as f64).tanh()
                })
                .collect();
            for (o, a) in acc.iter_mut().enumerate() {
                let s: f64 = (0..6).map(|j| h[j] * m.w2.data()[j * 2 + o] as f64).sum();
                *a += (s + m.b2.data()[o] as f64).exp().ln_1p() * [2.0, 3.0][o] / 4.0;
            }
        }
        assert!((got.data()[0] - acc[0]).abs() < 1e-6 && (got.data()[1] - acc[1]).abs() < 1e-6);
    }

    #[test]
    fn cumulative_error_cases() {
        let x = Tensor::zeros(&[2]);
        let ens = EnsembleState::new(vec![const_member(2, &[4.0])], vec![1.0]).unwrap();
        let w = ErrorWeights::from_logits(&[0.0, 1.0]);
        let ws = w.weights();
        let got = cumulative_error(&x, &ens, &w, &[10.0]).unwrap();
        assert!((got - (ws[0] * 4.0 + ws[1] * 10.0)).abs() < 1e-6);

        let all_implicit = cumulative_error(&x, &ens, &ErrorWeights::uniform(1), &[]).unwrap();
        assert!((all_implicit - 4.0).abs() < 1e-6);

        let none = EnsembleState::new(vec![MemberParams::zeros(2, 2, 0)], vec![]).unwrap();
        let e = ErrorVector::new(vec![2.0, 4.0], 0).unwrap();
        let explicit = cumulative_error(&x, &none, &ErrorWeights::uniform(2), &[2.0, 4.0]).unwrap();
        assert_eq!(
            explicit,
            weighted_error(&e, &ErrorWeights::uniform(2)).unwrap()
        );

        assert!(matches!(
            cumulative_error(&x, &ens, &w, &[]),
            Err(Error::Dimension { .. })
        ));
    }

    /// Nonnegative targets from a clipped linear map.
    fn linear_data(seed: u64, n: usize) -> EnsembleData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let a = [0.5, -1.0, 0.25, 0.8];
        let t: Vec<f64> = x
            .data()
            .chunks(4)
            .map(|r| (3.0 + r.iter().zip(a).map(|(v, c)| *v as f64 * c).sum::<f64>()).max(0.1))
            .collect();
        EnsembleData {
            features: x,
            targets: Tensor::from_f64(&[n, 1], &t).unwrap(),
        }
    }

    #[test]
    fn zero_member_starts_at_softplus_zero() {
        let data = linear_data(63, 50);
        let mut ens = EnsembleState::new(vec![MemberParams::zeros(4, 8, 1)], vec![1.0]).unwrap();
        let cfg = EnsembleTraining {
            steps: 0,
            ..Default::default()
        };
        let r = train_ensemble(&data, &mut ens, &cfg).unwrap();
        let expect = data
            .targets
            .data()
            .iter()
            .map(|&v| (v as f64 - 2f64.ln()).powi(2))
            .sum::<f64>()
            / 50.0;
        assert!((r.initial_loss[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn members_fit_a_linear_map() {
        let data = linear_data(64, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let members = (0..2)
            .map(|_| MemberParams::init(4, 16, 1, &mut rng))
            .collect();
        let mut ens = EnsembleState::new(members, vec![1.0]).unwrap();
        let cfg = EnsembleTraining {
            steps: 500,
            batch: 64,
            lr: 1e-2,
            seed: 3,
        };
        let r = train_ensemble(&data, &mut ens, &cfg).unwrap();
        for (a, b) in r.initial_loss.iter().zip(&r.final_loss) {
            assert!(*b <= 0.1 * a, "{a} -> {b}");
        }
        assert_ne!(ens.members[0], ens.members[1]);
        assert!(train_ensemble(
            &EnsembleData {
                features: Tensor::zeros(&[0, 4]),
                targets: Tensor::zeros(&[0, 1])
            },
            &mut ens,
            &cfg
        )
        .is_err());
    }

    struct MemberObjective {
        data: EnsembleData,
        rest: MemberParams,
    }

    impl Objective for MemberObjective {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
            let mut v = self.rest.bind(&mut Binder::frozen(), tape, "m");
            v.w1 = p;
            member_loss(
                tape,
                &v,
                &[3.0],
                self.data.features.cast(),
                self.data.targets.cast(),
            )
        }
    }

    #[test]
    fn member_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let data = linear_data(67, 12);
        let rest = MemberParams::init(4, 5, 1, &mut rng);
        let p = rest.w1.cast::<f64>();
        let err = finite_diff_check(&MemberObjective { data, rest }, &p, DEFAULT_STEP).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    /// `(a - target)^2 / 100`, independent of the embedding.
    struct Quadratic {
        target: f64,
    }

    impl ErrorEstimator for Quadratic {
        fn estimate_on_tape<T: Scalar>(
            &self,
            tape: &mut Tape<T>,
            _: &Tensor,
            c: Var,
        ) -> Result<Var> {
            let d = tape.offset(c, -self.target);
            let sq = tape.mul(d, d)?;
            Ok(tape.scale(sq, 0.01))
        }
    }

    #[test]
    fn zero_learning_rate_keeps_generator_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let mut gen = CandidateGenerator::init(3, GeneratorConfig::default(), &mut rng);
        let before = gen.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        for _ in 0..3 {
            let noise = gen.noise(&mut rng);
            update_generator(
                &mut gen,
                &mut opt,
                &Quadratic { target: 30.0 },
                &x,
                &x,
                50.0,
                &noise,
            )
            .unwrap();
        }
        assert_eq!(gen, before);
    }

    #[test]
    fn generator_objective_is_mean_of_candidate_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let mut gen = CandidateGenerator::init(3, GeneratorConfig::default(), &mut rng);
        gen.params.w2 = Tensor::randn(&[32, 2], 0.3, &mut rng);
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        let noise = gen.noise(&mut rng);
        let est = Quadratic { target: 25.0 };
        let (obj, cands) = generator_objective(&gen, &est, &x, &x, 40.0, &noise).unwrap();
        let mut total = 0.0;
        for &c in &cands {
            total += est.estimate(&x, &[c]).unwrap()[0];
        }
        assert!((obj - total / cands.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn generator_moves_toward_quadratic_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut gen = CandidateGenerator::init(3, GeneratorConfig::default(), &mut rng);
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        let est = Quadratic { target: 30.0 };
        let probe = GeneratorNoise {
            z: Tensor::randn(&[64, 8], 1.0, &mut rng),
            xi: Tensor::zeros(&[64]),
        };
        let mean_gap = |g: &CandidateGenerator| {
            let c = sample_candidates(g, &x, 50.0, &probe, -1e9, 1e9).unwrap();
            (c.iter().sum::<f64>() / c.len() as f64 - 30.0).abs()
        };
        let start = mean_gap(&gen);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..100 {
            let noise = gen.noise(&mut rng);
            update_generator(&mut gen, &mut opt, &est, &x, &x, 50.0, &noise).unwrap();
        }
        let end = mean_gap(&gen);
        assert!(end < start, "{start} -> {end}");
    }

    #[test]
    fn selection_fixtures() {
        assert_eq!(
            select_by_errors(&[10.0, 20.0, 30.0], &[3.0, 1.0, 2.0], 0).unwrap(),
            (20.0, 1.0)
        );
        assert_eq!(select_by_errors(&[42.0], &[7.0], 0).unwrap(), (42.0, 7.0));
        assert_eq!(
            select_by_errors(&[1.0, 2.0], &[5.0, 5.0], 1).unwrap(),
            (2.0, 5.0)
        );
        assert!(matches!(
            select_by_errors(&[], &[], 0),
            Err(Error::Contract { .. })
        ));
    }

    fn trained_fixture() -> (Corrector, CandidateGenerator, CorrectionConfig) {
        let cfg = CorrectionConfig {
            training: EnsembleTraining {
                steps: 300,
                ..Default::default()
            },
            members: 3,
            ..Default::default()
        };
        let fx = bias_fixture(71, 300, 12, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let (c, _) = train_corrector(&fx.embeddings, &fx.ages, None, &cfg, &mut rng).unwrap();
        let gen = CandidateGenerator::init(12, cfg.generator.clone(), &mut rng);
        (c, gen, cfg)
    }

    #[test]
    fn loop_fast_path_and_monotone_trace() {
        let (c, gen, cfg) = trained_fixture();
        let fx = bias_fixture(73, 20, 12, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let relaxed = CorrectionConfig {
            epsilon: 1e6,
            ..cfg.clone()
        };
        let out = correct_batch(&c, &gen, &fx.embeddings, &fx.base, &relaxed, &mut rng).unwrap();
        assert!(out
            .iter()
            .zip(&fx.base)
            .all(|(o, &b)| o.iterations == 0 && o.age == b));

        let out = correct_batch(&c, &gen, &fx.embeddings, &fx.base, &cfg, &mut rng).unwrap();
        for o in &out {
            assert!(o.iterations <= cfg.max_iters);
            let mut prev = o.initial_error;
            for s in &o.trace {
                assert!(s.estimated_error <= prev);
                prev = s.estimated_error;
            }
        }
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &out).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,iteration,candidate_age,estimated_error\n"));
        assert_eq!(
            text.lines().count(),
            1 + out.iter().map(|o| o.trace.len()).sum::<usize>()
        );
    }

    #[test]
    fn correction_reduces_biased_error() {
        let (c, gen, cfg) = trained_fixture();
        let fx = bias_fixture(75, 60, 12, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let out = correct_batch(&c, &gen, &fx.embeddings, &fx.base, &cfg, &mut rng).unwrap();
        let before: f64 = fx
            .base
            .iter()
            .zip(&fx.ages)
            .map(|(b, y)| (b - y).abs())
            .sum();
        let after: f64 = out
            .iter()
            .zip(&fx.ages)
            .map(|(o, y)| (o.age - y).abs())
            .sum();
        assert!(after < before, "{before} -> {after}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn error_weights_form_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..8)) {
            let w = ErrorWeights::from_logits(&logits).weights();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(w.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn ensemble_ignores_member_order(seed in 0u64..1000, rot in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut members: Vec<MemberParams> = (0..4).map(|_| MemberParams::init(3, 4, 2, &mut rng)).collect();
            let x = Tensor::randn(&[3], 1.0, &mut rng);
            let a = ensemble_estimate(&x, &EnsembleState::new(members.clone(), vec![1.0, 1.0]).unwrap()).unwrap();
            members.rotate_left(rot);
            let b = ensemble_estimate(&x, &EnsembleState::new(members, vec![1.0, 1.0]).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn selection_never_worse_than_incumbent(errs in prop::collection::vec(0.0f64..100.0, 1..20), pick in 0usize..20) {
            let inc = pick % errs.len();
            let cands: Vec<f64> = (0..errs.len()).map(|i| i as f64).collect();
            let (_, e) = select_by_errors(&cands, &errs, inc).unwrap();
            prop_assert!(e <= errs[inc]);
        }
    }
}
