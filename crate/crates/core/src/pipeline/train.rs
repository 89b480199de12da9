//! Run configuration, the training loop, evaluation and the module ablation.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::metrics::{cs_metric, mae_metric, EpochStats, MetricsReport, DEFAULT_CS_THRESHOLD};
use crate::clip::{
    matching_loss_on_tape, model_forward, AlignmentConfig, AlignmentModel, Predictions, PromptSet,
    Vocabulary,
};
use crate::correction::{
    correct_batch, train_corrector, CandidateGenerator, CorrectionConfig, CorrectionOutcome,
    Corrector,
};
use crate::error::{Error, Result};
use crate::fourierformer::FpeConfig;
use crate::numeric::{Tape, Tensor};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bind, Binder};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the matching loss next to the MAE loss.
    pub lambda: f64,
    pub optimizer: AdamWConfig,
    pub fpe: FpeConfig,
    pub alignment: AlignmentConfig,
    pub correction: CorrectionConfig,
    /// Ablation switch: run the correction loop on predictions.
    pub error_correction: bool,
    pub cs_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            epochs: 10,
            batch_size: 32,
            lambda: 1.0,
            optimizer: AdamWConfig::default(),
            fpe: FpeConfig::default(),
            alignment: AlignmentConfig::default(),
            correction: CorrectionConfig::default(),
            error_correction: true,
            cs_threshold: DEFAULT_CS_THRESHOLD,
        }
    }
}

impl RunConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Error::Config {
            path: path.into(),
            message: message.into(),
        };
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", "must be finite and non-negative"));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(bad("optimizer.lr", "must be finite and non-negative"));
        }
        for (path, beta) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(bad(path, "must lie in [0, 1)"));
            }
        }
        if !(o.eps > 0.0) {
            return Err(bad("optimizer.eps", "must be positive"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(bad("optimizer.weight_decay", "must be non-negative"));
        }
        if !(self.cs_threshold >= 0.0) {
            return Err(bad("cs_threshold", "must be non-negative"));
        }
        self.fpe.validate("fpe")?;
        self.alignment.validate("alignment")?;
        self.correction.validate("correction")?;
        if self.fpe.channels != self.alignment.dim {
            return Err(bad("fpe.channels", "must equal alignment.dim"));
        }
        if !self.alignment.grid_side().is_power_of_two() {
            return Err(bad(
                "alignment.patch",
                "image_size / patch must be a power of two",
            ));
        }
        Ok(())
    }
}

/// Everything needed to predict and correct.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub model: AlignmentModel,
    pub corrector: Option<Corrector>,
    pub generator: Option<CandidateGenerator>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub labels: Vec<f64>,
    pub base: Vec<f64>,
    /// Equal to `base` when correction is off.
    pub predictions: Vec<f64>,
    pub outcomes: Vec<CorrectionOutcome>,
    pub base_mae: f64,
    pub mae: f64,
    pub cs: f64,
}

impl TrainedModel {
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = Vocabulary::for_template(&config.alignment.template);
        let model = AlignmentModel::init(&vocab, &config.fpe, &config.alignment, &mut rng);
        Ok(Self {
            config,
            model,
            corrector: None,
            generator: None,
        })
    }

    pub fn prompts(&self) -> Result<PromptSet> {
        let vocab = Vocabulary::for_template(&self.config.alignment.template);
        PromptSet::from_config(&vocab, &self.config.alignment)
    }

    /// Base predictions in fixed-size chunks.
    pub fn predict(&self, images: &Tensor) -> Result<Predictions> {
        let prompts = self.prompts()?;
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        let (fpe, cfg) = (&self.config.fpe, &self.config.alignment);
        let mut ages = Vec::with_capacity(n);
        let (mut emb, mut probs) = (Vec::new(), Vec::new());
        let mut shape = images.shape().to_vec();
        for start in (0..n).step_by(EVAL_BATCH) {
            let end = (start + EVAL_BATCH).min(n);
            shape[0] = end - start;
            let chunk = Tensor::new(
                shape.clone(),
                images.data()[start * per..end * per].to_vec(),
            )?;
            let p = self.model.predict(fpe, cfg, &prompts, &chunk)?;
            ages.extend(p.ages);
            emb.extend(p.embeddings.into_data());
            probs.extend(p.probs.into_data());
        }
        Ok(Predictions {
            ages,
            embeddings: Tensor::new(vec![n, cfg.dim], emb)?,
            probs: Tensor::new(vec![n, prompts.len()], probs)?,
        })
    }

    pub fn evaluate(&self, ds: &Dataset, idx: &[usize], correct: bool) -> Result<Evaluation> {
        let labels = ds.ages_of(idx);
        let pred = self.predict(&ds.gather(idx))?;
        let base = pred.ages.clone();
        let base_mae = mae_metric(&base, &labels)?;
        let (predictions, outcomes) = match (correct, &self.corrector, &self.generator) {
            (true, Some(c), Some(g)) => {
                let embs = split_rows(&pred.embeddings)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xc0_44ec);
                let out = correct_batch(c, g, &embs, &base, &self.config.correction, &mut rng)?;
                (out.iter().map(|o| o.age).collect(), out)
            }
            (true, _, _) => {
                return Err(Error::contract(
                    "evaluate",
                    "model carries no trained corrector",
                ))
            }
            (false, _, _) => (base.clone(), Vec::new()),
        };
        Ok(Evaluation {
            mae: mae_metric(&predictions, &labels)?,
            cs: cs_metric(&predictions, &labels, self.config.cs_threshold)?,
            labels,
            base,
            predictions,
            outcomes,
            base_mae,
        })
    }
}

fn split_rows(t: &Tensor) -> Result<Vec<Tensor>> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| Tensor::new(vec![d], r.to_vec()))
        .collect()
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let [h, w, c] = ds.manifest.image_shape;
    let a = &cfg.alignment;
    if h != a.image_size || w != a.image_size || c != a.image_channels {
        return Err(Error::Data(format!(
            "dataset images are {h}x{w}x{c}, config expects {0}x{0}x{1}",
            a.image_size, a.image_channels
        )));
    }
    if ds.manifest.splits.train.is_empty() || ds.manifest.splits.val.is_empty() {
        return Err(Error::Data(
            "dataset needs non-empty train and validation splits".into(),
        ));
    }
    Ok(())
}

struct BatchLoss {
    total: f64,
    mae: f64,
    matching: f64,
}

fn train_step(
    model: &mut AlignmentModel,
    opt: &mut AdamW,
    cfg: &RunConfig,
    prompts: &PromptSet,
    images: &Tensor,
    ages: &[f64],
) -> Result<BatchLoss> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::trainable();
    let v = model.bind(&mut binder, &mut tape, "");
    let out = model_forward(&mut tape, &v, &cfg.fpe, &cfg.alignment, prompts, images)?;
    let y = tape.constant(Tensor::from_f64(&[ages.len()], ages)?);
    let diff = tape.sub(out.predicted, y)?;
    let abs = tape.abs(diff);
    let mae = tape.mean(abs);
    let classes: Vec<usize> = ages.iter().map(|&a| prompts.class_of(a)).collect();
    let texts = tape.gather(out.class_text, &classes)?;
    let matching = matching_loss_on_tape(
        &mut tape,
        texts,
        out.image_embedding,
        cfg.alignment.tau,
        cfg.alignment.loss_floor,
    )?;
    let weighted = tape.scale(matching, cfg.lambda);
    let total = tape.add(mae, weighted)?;
    let loss = BatchLoss {
        total: tape.value(total).item()? as f64,
        mae: tape.value(mae).item()? as f64,
        matching: tape.value(matching).item()? as f64,
    };
    if !loss.total.is_finite() {
        return Ok(loss);
    }
    let grads = binder.gradients(&tape.backward(total)?);
    opt.step(model, &grads);
    Ok(loss)
}

/// Trains the alignment model alone; returns it with per-epoch statistics.
pub fn train_model(cfg: &RunConfig, ds: &Dataset) -> Result<(TrainedModel, Vec<EpochStats>)> {
    check_dataset(cfg, ds)?;
    let mut tm = TrainedModel::init(cfg.clone())?;
    let prompts = tm.prompts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut order = ds.split("train")?;
    let val = ds.split("val")?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut mae, mut matching, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ages = ds.ages_of(idx);
            let l = train_step(
                &mut tm.model,
                &mut opt,
                cfg,
                &prompts,
                &ds.gather(idx),
                &ages,
            )?;
            if !l.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {b} (mae {}, matching {}); samples {:?}, ages {:?}",
                    l.mae, l.matching, idx, ages
                )));
            }
            debug!("epoch {epoch} batch {b}: loss {:.4}", l.total);
            total += l.total;
            mae += l.mae;
            matching += l.matching;
            batches += 1;
        }
        let val_mae = tm.evaluate(ds, &val, false)?.mae;
        let n = batches as f64;
        let stats = EpochStats {
            epoch,
            loss: total / n,
            mae_loss: mae / n,
            matching_loss: matching / n,
            val_mae,
        };
        info!(
            "epoch {epoch}: loss {:.4} (mae {:.3}, matching {:.4}), val mae {:.3}",
            stats.loss, stats.mae_loss, stats.matching_loss, stats.val_mae
        );
        curve.push(stats);
    }
    Ok((tm, curve))
}

/// Fits the corrector on training-split embeddings and base predictions.
pub fn fit_correction(tm: &mut TrainedModel, ds: &Dataset) -> Result<()> {
    let train = ds.split("train")?;
    let pred = tm.predict(&ds.gather(&train))?;
    let embs = split_rows(&pred.embeddings)?;
    let ages = ds.ages_of(&train);
    let mut rng = ChaCha8Rng::seed_from_u64(tm.config.seed.wrapping_add(2));
    let (corrector, report) = train_corrector(
        &embs,
        &ages,
        Some(&pred.ages),
        &tm.config.correction,
        &mut rng,
    )?;
    info!(
        "corrector: member loss {:.2} -> {:.2}, weights {:?}",
        report.initial_loss.iter().sum::<f64>() / report.initial_loss.len() as f64,
        report.final_loss.iter().sum::<f64>() / report.final_loss.len() as f64,
        corrector.weights.weights()
    );
    tm.generator = Some(CandidateGenerator::init(
        tm.config.alignment.dim,
        tm.config.correction.generator.clone(),
        &mut rng,
    ));
    tm.corrector = Some(corrector);
    Ok(())
}

/// Training, corrector fitting and validation metrics.
pub fn train_pipeline(cfg: &RunConfig, ds: &Dataset) -> Result<(TrainedModel, MetricsReport)> {
    let (mut tm, curve) = train_model(cfg, ds)?;
    fit_correction(&mut tm, ds)?;
    let val = ds.split("val")?;
    let base = tm.evaluate(ds, &val, false)?;
    let corrected = tm.evaluate(ds, &val, true)?;
    let headline = if cfg.error_correction {
        &corrected
    } else {
        &base
    };
    let report = MetricsReport {
        mae: headline.mae,
        cs: headline.cs,
        cs_threshold: cfg.cs_threshold,
        base_mae: base.mae,
        corrected_mae: Some(corrected.mae),
        mean_baseline_mae: mean_baseline_mae(ds, &val)?,
        loss_curve: curve,
        benchmark: None,
    };
    Ok((tm, report))
}

/// MAE of predicting the training-split mean age for every sample of `idx`.
pub fn mean_baseline_mae(ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let train = ds.ages_of(&ds.split("train")?);
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    let labels = ds.ages_of(idx);
    mae_metric(&vec![mean; labels.len()], &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub spatial_interaction: bool,
    pub channel_evolution: bool,
    pub error_correction: bool,
    pub mae: f64,
}

impl AblationRow {
    pub fn modules(&self) -> usize {
        self.spatial_interaction as usize
            + self.channel_evolution as usize
            + self.error_correction as usize
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [
            (self.spatial_interaction, "spatial"),
            (self.channel_evolution, "channel"),
            (self.error_correction, "correction"),
        ]
        .iter()
        .filter(|p| p.0)
        .map(|p| p.1)
        .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

/// All eight module combinations on the validation split. Each encoder
/// variant is trained once; correction is scored on and off.
pub fn run_ablation(base: &RunConfig, ds: &Dataset) -> Result<Vec<AblationRow>> {
    let val = ds.split("val")?;
    let mut rows = Vec::with_capacity(8);
    for (s, c) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut cfg = base.clone();
        cfg.fpe.spatial_interaction = s;
        cfg.fpe.channel_evolution = c;
        let (mut tm, _) = train_model(&cfg, ds)?;
        fit_correction(&mut tm, ds)?;
        for e in [false, true] {
            let mae = tm.evaluate(ds, &val, e)?.mae;
            info!("ablation spatial={s} channel={c} correction={e}: mae {mae:.3}");
            rows.push(AblationRow {
                spatial_interaction: s,
                channel_evolution: c,
                error_correction: e,
                mae,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::synthesize;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.epochs = 1;
        cfg.batch_size = 16;
        cfg.fpe.channels = 8;
        cfg.fpe.blocks = 1;
        cfg.alignment.dim = 8;
        cfg.alignment.text_hidden = 16;
        cfg.alignment.image_size = 16;
        cfg.alignment.decoder_depth = 1;
        cfg.alignment.age_step = 8.0;
        cfg.correction.members = 2;
        cfg.correction.training.steps = 20;
        cfg.correction.weight_steps = 10;
        cfg
    }

    #[test]
    fn config_errors_carry_field_paths() {
        match RunConfig::from_json(r#"{"alignment": {"tau": "hot"}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "alignment.tau"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_json(r#"{"fpe": {"chanels": 3}}"#) {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("fpe"), "{path}"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_json(r#"{"correction": {"epsilon": -1}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "correction.epsilon"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_json(r#"{"fpe": {"channels": 32}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "fpe.channels"),
            other => panic!("{other:?}"),
        }
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let ds = synthesize(3, 40, 16).unwrap();
        let mut cfg = tiny();
        cfg.optimizer.lr = 0.0;
        let (tm, curve) = train_model(&cfg, &ds).unwrap();
        assert_eq!(curve.len(), 1);
        assert!(
            tm.model == TrainedModel::init(cfg).unwrap().model,
            "parameters moved"
        );
    }

    #[test]
    fn training_is_deterministic_and_reports_metrics() {
        let ds = synthesize(4, 40, 16).unwrap();
        let cfg = tiny();
        let (a, ra) = train_pipeline(&cfg, &ds).unwrap();
        let (b, rb) = train_pipeline(&cfg, &ds).unwrap();
        assert!(a == b, "models differ between identical runs");
        assert_eq!(ra, rb);
        assert!(ra.mae >= 0.0 && (0.0..=100.0).contains(&ra.cs));
        assert_eq!(ra.corrected_mae, Some(ra.mae));
    }

    #[test]
    fn dataset_shape_must_match_config() {
        let ds = synthesize(4, 20, 8).unwrap();
        assert!(matches!(train_model(&tiny(), &ds), Err(Error::Data(_))));
    }

    #[test]
    fn mean_baseline_uses_training_mean() {
        let mut ds = synthesize(4, 10, 8).unwrap();
        ds.manifest.ages = vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 45.0, 35.0];
        assert_eq!(mean_baseline_mae(&ds, &[8, 9]).unwrap(), 5.0);
    }
}
