//! Adam with inverse-square-root warmup, the epoch loop, checkpoint
//! averaging and evaluation.
//!
//! A single ChaCha8 generator seeded from the run seed drives, in order:
//! parameter initialization, then for every epoch the data shuffle and for
//! every step the removal masks of every attention instance followed by the
//! dropout masks drawn during the forward pass.

use std::collections::VecDeque;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{similarity_by_layer, PrunePlan};
use crate::attention::{AttentionRecord, DumpRecord, Mode, Site};
use crate::autodiff::{Graph, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::layers::Ctx;
use crate::model::{ExampleInput, Model, ModelConfig, PAD};
use crate::objectives::{joint_loss, token_accuracy, JointLossConfig};
use crate::params::{average, ParamStore};
use crate::scalar::Scalar;
use crate::tasks::{batches_in_order, score, shuffled_batches, Batch, Dataset, Score};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// `scale · d_model^−½ · min(step^−½, step · warmup^−3/2)`.
pub fn warmup_lr(step: u64, d_model: usize, warmup_steps: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(invalid("warmup-lr", "steps are counted from 1"));
    }
    if warmup_steps == 0 || d_model == 0 {
        return Err(invalid("warmup-lr", "warmup_steps and d_model must be positive"));
    }
    let s = step as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup_steps as f64).powf(-1.5)))
}

/// Parameters, Adam moments, step counter, generator and recent epoch snapshots.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub adam_m: ParamStore<T>,
    pub adam_v: ParamStore<T>,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub ring: VecDeque<ParamStore<T>>,
    pub ring_capacity: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ParamStore<T>, rng: ChaCha8Rng, ring_capacity: usize) -> Self {
        Self {
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            step: 0,
            epoch: 0,
            rng,
            ring: VecDeque::new(),
            ring_capacity,
        }
    }

    /// Appends a snapshot, dropping the oldest beyond capacity.
    pub fn push_snapshot(&mut self, params: &ParamStore<T>) {
        if self.ring_capacity == 0 {
            return;
        }
        if self.ring.len() == self.ring_capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(params.clone());
    }
}

/// Bias-corrected Adam update of `params`; increments `state.step`.
///
/// The whole step is rejected, leaving everything untouched, if any gradient
/// is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    grads: &[Tensor<T>],
    lr: f64,
    hp: AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(invalid("adam", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: params.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                name: params.name(id).to_string(),
            });
        }
    }
    let t = (state.step + 1) as i32;
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let c1 = T::one() - T::of(hp.beta1.powi(t));
    let c2 = T::one() - T::of(hp.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(hp.eps));
    let ids: Vec<_> = params.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let m = state.adam_m.get_mut(id).data_mut();
        let v = state.adam_v.get_mut(id).data_mut();
        let p = params.get_mut(id).data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Elementwise mean of parameter snapshots.
pub fn average_checkpoints<T: Scalar>(snapshots: &[ParamStore<T>]) -> Result<ParamStore<T>> {
    average(snapshots)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub adam: AdamConfig,
    /// Training stops after this many updates even mid-epoch.
    pub max_steps: Option<u64>,
    /// Number of end-of-epoch snapshots averaged into the final model.
    pub average_last: usize,
    /// Stop once greedy dev token accuracy reaches this value (checked at epoch ends).
    pub target_dev_accuracy: Option<f64>,
    /// Greedy-decode the dev split at every epoch end.
    pub greedy_dev: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            warmup_steps: 400,
            lr_scale: 1.0,
            adam: AdamConfig::default(),
            max_steps: None,
            average_last: 10,
            target_dev_accuracy: None,
            greedy_dev: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("train-config", "batch_size must be at least 1"));
        }
        if self.warmup_steps == 0 {
            return Err(invalid("train-config", "warmup_steps must be positive"));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(invalid("train-config", format!("lr_scale {} must be positive", self.lr_scale)));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(invalid("train-config", "adam betas must lie in [0, 1) and eps be positive"));
        }
        if let Some(t) = self.target_dev_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid("train-config", format!("target_dev_accuracy {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    /// `train`, `dev`, or `final` for the averaged model on dev.
    pub split: String,
    pub loss: f64,
    pub loss_dec: f64,
    pub loss_ctc: f64,
    pub lr: f64,
    /// Teacher-forced token accuracy.
    pub acc: f64,
    /// Greedy-decoding token accuracy and error rate, when decoded.
    pub greedy_acc: Option<f64>,
    pub wer: Option<f64>,
}

impl fmt::Display for MetricRecord {
    /// `key=value` pairs separated by single spaces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} split={} loss={} loss_dec={} loss_ctc={} lr={} acc={}",
            self.step, self.epoch, self.split, self.loss, self.loss_dec, self.loss_ctc, self.lr, self.acc
        )?;
        if let Some(a) = self.greedy_acc {
            write!(f, " greedy_acc={a}")?;
        }
        if let Some(w) = self.wer {
            write!(f, " wer={w}")?;
        }
        Ok(())
    }
}

impl MetricRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let mut rec = MetricRecord {
            step: 0,
            epoch: 0,
            split: String::new(),
            loss: 0.0,
            loss_dec: 0.0,
            loss_ctc: 0.0,
            lr: 0.0,
            acc: 0.0,
            greedy_acc: None,
            wer: None,
        };
        let bad = |what: &str| invalid("metrics-record", format!("bad field `{what}` in `{line}`"));
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(field))?;
            let num = || v.parse::<f64>().map_err(|_| bad(field));
            match k {
                "step" => rec.step = v.parse().map_err(|_| bad(field))?,
                "epoch" => rec.epoch = v.parse().map_err(|_| bad(field))?,
                "split" => rec.split = v.to_string(),
                "loss" => rec.loss = num()?,
                "loss_dec" => rec.loss_dec = num()?,
                "loss_ctc" => rec.loss_ctc = num()?,
                "lr" => rec.lr = num()?,
                "acc" => rec.acc = num()?,
                "greedy_acc" => rec.greedy_acc = Some(num()?),
                "wer" => rec.wer = Some(num()?),
                _ => return Err(bad(field)),
            }
        }
        Ok(rec)
    }
}

pub fn metrics_log(records: &[MetricRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

/// Losses and accuracies of a model on a dataset in evaluation mode.
#[derive(Clone, Debug)]
pub struct EvalReport<T> {
    pub loss: f64,
    pub loss_dec: f64,
    pub loss_ctc: f64,
    /// Teacher-forced token accuracy over non-padded decoder positions.
    pub acc: f64,
    pub greedy: Option<Score>,
    pub hypotheses: Vec<Vec<usize>>,
    /// Captured attention per utterance, when requested.
    pub records: Vec<Vec<AttentionRecord<T>>>,
}

#[derive(Default)]
struct Totals {
    loss: f64,
    dec: f64,
    ctc: f64,
    correct: usize,
    counted: usize,
    examples: usize,
}

impl Totals {
    fn mean(&self, v: f64) -> f64 {
        v / self.examples.max(1) as f64
    }

    fn acc(&self) -> f64 {
        self.correct as f64 / self.counted.max(1) as f64
    }
}

fn loss_config(cfg: &ModelConfig) -> JointLossConfig {
    JointLossConfig {
        lambda: cfg.lambda_ctc,
        smoothing: cfg.label_smoothing,
        pad_id: PAD,
    }
}

/// Mean joint loss over a batch on `g`; adds per-example figures to `totals`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn batch_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &crate::params::Bound,
    batch: &Batch<T>,
    scales: &[Vec<Vec<T>>],
    ctx: &mut Ctx<'_>,
    totals: &mut Totals,
    records: Option<&mut Vec<Vec<AttentionRecord<T>>>>,
) -> Result<crate::autodiff::Var> {
    let lc = loss_config(model.config());
    let mut sum = None;
    let mut captured = Vec::new();
    for i in 0..batch.len() {
        let input = ExampleInput {
            src: &batch.src[i],
            src_len: batch.src_lens[i],
            dec_in: &batch.dec_in[i],
            dec_len: batch.dec_lens[i],
        };
        let out = model.forward_example(g, bound, input, &scales[i], ctx)?;
        let (loss, rep) = joint_loss(g, out.dec_logits, out.ctc_log_probs, &batch.dec_targets[i], &batch.targets[i], lc)?;
        let (c, n) = token_accuracy(g.value(out.dec_logits), &batch.dec_targets[i], PAD);
        totals.loss += rep.total;
        totals.dec += rep.decoder_loss;
        totals.ctc += rep.ctc_loss;
        totals.correct += c;
        totals.counted += n;
        totals.examples += 1;
        captured.push(out.records);
        sum = Some(match sum {
            None => loss,
            Some(s) => g.add(s, loss)?,
        });
    }
    if let Some(r) = records {
        r.extend(captured);
    }
    let sum = sum.ok_or_else(|| invalid("batch-loss", "empty batch"))?;
    Ok(g.scale(sum, T::of(1.0 / batch.len() as f64)))
}

/// Evaluation-mode losses, teacher-forced accuracy, and optionally greedy
/// decoding scores and captured attention.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>, batch_size: usize, greedy: bool, capture: bool) -> Result<EvalReport<T>> {
    let scales = model.eval_scales()?;
    let mut totals = Totals::default();
    let mut records = Vec::new();
    for batch in batches_in_order(data, batch_size)? {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let per_example = vec![scales.clone(); batch.len()];
        let mut ctx = Ctx::eval(capture);
        batch_loss(model, &mut g, &b, &batch, &per_example, &mut ctx, &mut totals, capture.then_some(&mut records))?;
    }
    let mut hypotheses = Vec::new();
    let greedy = if greedy {
        for e in &data.examples {
            hypotheses.push(model.greedy_decode(&e.src, e.src.rows(), e.target.len() + 5)?);
        }
        let refs: Vec<Vec<usize>> = data.examples.iter().map(|e| e.target.clone()).collect();
        Some(score(&hypotheses, &refs)?)
    } else {
        None
    };
    Ok(EvalReport {
        loss: totals.mean(totals.loss),
        loss_dec: totals.mean(totals.dec),
        loss_ctc: totals.mean(totals.ctc),
        acc: totals.acc(),
        greedy,
        hypotheses,
        records,
    })
}

/// Exported attention of every utterance at one site.
pub fn site_records<T: Scalar>(records: &[Vec<AttentionRecord<T>>], site: Site) -> Result<Vec<DumpRecord>> {
    records
        .iter()
        .flatten()
        .filter(|r| r.site == site)
        .map(AttentionRecord::export)
        .collect()
}

/// Mean inter-head similarity per `(site, layer)` and over all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySummary {
    pub per_layer: Vec<(Site, usize, f64)>,
    pub mean: f64,
}

pub fn similarity_summary<T: Scalar>(records: &[Vec<AttentionRecord<T>>]) -> Result<SimilaritySummary> {
    let mut per_layer = Vec::new();
    for site in Site::ALL {
        let recs = site_records(records, site)?;
        for (layer, s) in similarity_by_layer(&recs)? {
            per_layer.push((site, layer, s.mean));
        }
    }
    if per_layer.is_empty() {
        return Err(invalid("similarity-summary", "no attention captured"));
    }
    let mean = per_layer.iter().map(|p| p.2).sum::<f64>() / per_layer.len() as f64;
    Ok(SimilaritySummary { per_layer, mean })
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Model holding the last trained parameters.
    pub model: Model<T>,
    /// Mean of the retained end-of-epoch snapshots (the trained parameters when none were taken).
    pub averaged: ParamStore<T>,
    pub state: TrainState<T>,
    pub metrics: Vec<MetricRecord>,
    /// Step at which greedy dev accuracy first met the target.
    pub reached_target_at: Option<u64>,
    pub best_dev_greedy_acc: Option<f64>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// The model with its parameters replaced by the averaged ones.
    pub fn averaged_model(&self) -> Result<Model<T>> {
        let mut m = self.model.clone();
        m.load_params(&self.averaged)?;
        Ok(m)
    }
}

/// Called after every epoch with the epoch number and the current parameters.
pub type EpochHook<'a, T> = dyn FnMut(usize, &ParamStore<T>) -> Result<()> + 'a;

/// Builds a model from `seed`, installs `plans`, and trains on `train_data`
/// with per-epoch evaluation on `dev_data`.
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    plans: &[PrunePlan],
    train_data: &Dataset<T>,
    dev_data: &Dataset<T>,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(model_cfg.clone(), &mut rng)?;
    for p in plans {
        model.apply_prune_plan(p)?;
    }
    let mut state = TrainState::new(&model.params, rng, cfg.average_last);
    let metrics = train_loop(&mut model, &mut state, train_data, dev_data, cfg, on_epoch)?;
    let averaged = if state.ring.is_empty() {
        model.params.clone()
    } else {
        average_checkpoints(state.ring.make_contiguous())?
    };
    let reached_target_at = metrics.reached_target_at;
    let best = metrics.best_greedy;
    let mut records = metrics.records;
    if state.epoch > 0 {
        let mut avg_model = model.clone();
        avg_model.load_params(&averaged)?;
        let rep = evaluate(&avg_model, dev_data, cfg.batch_size, cfg.greedy_dev, false)?;
        records.push(record(state.step, state.epoch, "final", &rep, 0.0));
    }
    Ok(TrainOutcome {
        model,
        averaged,
        state,
        metrics: records,
        reached_target_at,
        best_dev_greedy_acc: best,
    })
}

fn record<T>(step: u64, epoch: usize, split: &str, rep: &EvalReport<T>, lr: f64) -> MetricRecord {
    MetricRecord {
        step,
        epoch,
        split: split.into(),
        loss: rep.loss,
        loss_dec: rep.loss_dec,
        loss_ctc: rep.loss_ctc,
        lr,
        acc: rep.acc,
        greedy_acc: rep.greedy.map(|s| s.token_accuracy),
        wer: rep.greedy.map(|s| s.wer),
    }
}

/// Records produced by [`train_loop`].
pub struct LoopMetrics {
    pub records: Vec<MetricRecord>,
    pub reached_target_at: Option<u64>,
    pub best_greedy: Option<f64>,
}

/// Runs up to `cfg.epochs` epochs from the current state.
///
/// A non-finite loss aborts with [`Error::Diverged`] before the offending
/// update, so `model` keeps the last good parameters.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    train_data: &Dataset<T>,
    dev_data: &Dataset<T>,
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<LoopMetrics> {
    cfg.validate()?;
    let mut out = LoopMetrics {
        records: Vec::new(),
        reached_target_at: None,
        best_greedy: None,
    };
    let d_model = model.config().d_model;
    let dropout = model.config().dropout_rate;
    let mut lr = 0.0;
    for _ in 0..cfg.epochs {
        if cfg.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let batches = shuffled_batches(train_data, cfg.batch_size, &mut state.rng)?;
        let mut totals = Totals::default();
        for batch in &batches {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let masks = model.sample_masks(batch.len(), Mode::Train, &mut state.rng)?;
            let scales = (0..batch.len())
                .map(|i| model.head_scales(&masks, i, Mode::Train))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let loss = {
                let mut ctx = Ctx {
                    dropout,
                    rng: Some(&mut state.rng),
                    capture: false,
                };
                batch_loss(model, &mut g, &bound, batch, &scales, &mut ctx, &mut totals, None)?
            };
            if !g.value(loss).item().is_finite() {
                return Err(Error::Diverged { step: state.step + 1 });
            }
            g.backward(loss)?;
            let grads = model.params.gradients(&g, &bound);
            lr = warmup_lr(state.step + 1, d_model, cfg.warmup_steps, cfg.lr_scale)?;
            adam_step(&mut model.params, state, &grads, lr, cfg.adam)?;
        }
        state.epoch += 1;
        state.push_snapshot(&model.params);
        on_epoch(state.epoch, &model.params)?;
        out.records.push(MetricRecord {
            step: state.step,
            epoch: state.epoch,
            split: "train".into(),
            loss: totals.mean(totals.loss),
            loss_dec: totals.mean(totals.dec),
            loss_ctc: totals.mean(totals.ctc),
            lr,
            acc: totals.acc(),
            greedy_acc: None,
            wer: None,
        });
        let rep = evaluate(model, dev_data, cfg.batch_size, cfg.greedy_dev, false)?;
        out.records.push(record(state.step, state.epoch, "dev", &rep, lr));
        if let Some(s) = rep.greedy {
            out.best_greedy = Some(out.best_greedy.map_or(s.token_accuracy, |b: f64| b.max(s.token_accuracy)));
            if cfg.target_dev_accuracy.is_some_and(|t| s.token_accuracy >= t) {
                out.reached_target_at = Some(state.step);
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_examples() {
        let lr = warmup_lr(400, 64, 400, 1.0).unwrap();
        assert!((lr - 0.00625).abs() < 1e-15);
        assert!(warmup_lr(0, 64, 400, 1.0).is_err());
        let s: f64 = 400.0;
        assert_eq!(s.powf(-0.5), s * s.powf(-1.5));
        for step in 1..399 {
            assert!(warmup_lr(step, 64, 400, 1.0).unwrap() < warmup_lr(step + 1, 64, 400, 1.0).unwrap());
        }
        for step in 400..1000 {
            assert!(warmup_lr(step, 64, 400, 1.0).unwrap() > warmup_lr(step + 1, 64, 400, 1.0).unwrap());
        }
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let mut st = TrainState::new(&p, ChaCha8Rng::seed_from_u64(0), 10);
        adam_step(&mut p, &mut st, &[Tensor::scalar(1.0)], 0.01, AdamConfig::default()).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let expect = 1.0 - 0.01 / (1.0 + 1e-9);
        assert!((p.tensors()[0].item() - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = scalar_store(0.5);
        let mut st = TrainState::new(&p, ChaCha8Rng::seed_from_u64(0), 10);
        for _ in 0..5 {
            adam_step(&mut p, &mut st, &[Tensor::scalar(0.0)], 0.1, AdamConfig::default()).unwrap();
        }
        assert_eq!(p.tensors()[0].item(), 0.5);
        assert_eq!(st.adam_m.tensors()[0].item(), 0.0);
        assert_eq!(st.adam_v.tensors()[0].item(), 0.0);
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let mut p = scalar_store(0.5);
        let mut st = TrainState::new(&p, ChaCha8Rng::seed_from_u64(0), 10);
        match adam_step(&mut p, &mut st, &[Tensor::scalar(f64::NAN)], 0.1, AdamConfig::default()) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
        assert_eq!(p.tensors()[0].item(), 0.5);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = scalar_store(0.3);
            let mut st = TrainState::new(&p, ChaCha8Rng::seed_from_u64(0), 10);
            for k in 0..4 {
                adam_step(&mut p, &mut st, &[Tensor::scalar(k as f64 - 1.5)], 0.05, AdamConfig::default()).unwrap();
            }
            (p, st.adam_m, st.adam_v)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ring_keeps_latest_snapshots() {
        let p = scalar_store(0.0);
        let mut st = TrainState::new(&p, ChaCha8Rng::seed_from_u64(0), 2);
        for v in [1.0, 2.0, 3.0] {
            st.push_snapshot(&scalar_store(v));
        }
        let vals: Vec<f64> = st.ring.iter().map(|s| s.tensors()[0].item()).collect();
        assert_eq!(vals, vec![2.0, 3.0]);
    }

    #[test]
    fn metric_record_round_trips() {
        let r = MetricRecord {
            step: 12,
            epoch: 3,
            split: "dev".into(),
            loss: 0.1 + 0.2,
            loss_dec: 1.0 / 3.0,
            loss_ctc: 2.5e-7,
            lr: 0.000625,
            acc: 0.875,
            greedy_acc: Some(0.5),
            wer: Some(0.25),
        };
        assert_eq!(MetricRecord::parse(&r.to_string()).unwrap(), r);
        assert!(r.to_string().starts_with("step=12 epoch=3 split=dev loss=0.30000000000000004 "));
    }
}
