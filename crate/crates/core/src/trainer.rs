//! Training loop: batch sampling, loss assembly, the four update groups, the
//! optimizer, and telemetry.
//!
//! One backward pass realizes all update groups at once:
//! - `g_c` descends `L_s + L_t + L_dt - alpha * L_adv`
//! - `g_es` descends `L_s - L_dt - alpha * L_adv`
//! - `g_et` descends `L_t - L_dt - alpha * L_adv`
//! - `lambda` and `h` descend `L_s + L_t + L_dt + beta * L_tr`
//! - `d` descends `L_adv`
//!
//! The signs come from gradient reversal (on the adversarial features and on
//! the swapped environmental features inside `L_dt`) and from stop-gradients
//! (`lambda` and the prediction rows inside `L_adv`, the environmental
//! features inside `L_tr`), so the consolidated total
//! `L_s + L_t + L_dt + L_adv + beta * L_tr` yields exactly those updates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Tape, TapeError};
use crate::losses::{
    self, LossBundle, PlSource, TransitionMatrix,
};
use crate::nets::{checkpoint_text, DiscMode, Env, RedModel};
use crate::synthgen::{derive_seed, fmt_float9, DomainDataset, SynthError, SynthSpec};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("numeric abort at epoch {epoch} iter {iter}: {reason}")]
    NumericAbort {
        epoch: usize,
        iter: usize,
        reason: String,
        /// Checkpoint-format diagnostic dump of the aborted state.
        dump: String,
    },
    #[error("tape error: {0}")]
    Tape(#[from] TapeError),
    #[error("data error: {0}")]
    Synth(#[from] SynthError),
    #[error("variant {variant}: {source}")]
    Variant {
        variant: &'static str,
        #[source]
        source: Box<TrainerError>,
    },
}

type Result<T> = std::result::Result<T, TrainerError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub max_epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight of the adversarial confusion loss.
    pub alpha: f64,
    /// Weight of the trace loss.
    pub beta: f64,
    /// Confidence threshold for pseudo-labels.
    pub tau: f64,
    /// Extra multiplier on the adversarial reversal (1.0 = the plain rule).
    pub grl_coeff: f64,
    pub disc_mode: DiscMode,
    pub pl_source_for_ldt: PlSource,
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub enable_selftrain: bool,
    pub enable_disentangle: bool,
    /// Gaussian noise on the self-training student view (0 = off).
    pub student_noise_std: f64,
    /// Exponential moving average for the transition estimate (0 = per batch).
    pub m_ema_decay: f64,
    /// Freeze lambda at a fixed value instead of learning theta_lambda.
    pub lambda_freeze: Option<f64>,
}

impl RunConfig {
    pub fn default_benchmark() -> Self {
        RunConfig {
            seed: 7,
            max_epochs: 20,
            iters_per_epoch: 30,
            batch_size: 32,
            learning_rate: 0.005,
            momentum: 0.9,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.99,
            grl_coeff: 1.0,
            disc_mode: DiscMode::Conditional,
            pl_source_for_ldt: PlSource::Causal,
            feat_dim: 8,
            hidden_dim: 64,
            n_classes: 4,
            input_dim: 16,
            enable_selftrain: true,
            enable_disentangle: true,
            student_noise_std: 0.0,
            m_ema_decay: 0.0,
            lambda_freeze: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(TrainerError::Argument(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(TrainerError::Argument("alpha and beta must be >= 0".into()));
        }
        let lo = 1.0 / self.n_classes as f64;
        if !(self.tau > lo && self.tau <= 1.0) {
            return Err(TrainerError::Argument(format!(
                "tau {} outside (1/C, 1] = ({lo}, 1]",
                self.tau
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainerError::Argument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::Argument("batch_size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.m_ema_decay) {
            return Err(TrainerError::Argument(format!("m_ema_decay {} outside [0, 1)", self.m_ema_decay)));
        }
        if let Some(v) = self.lambda_freeze {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainerError::Argument(format!("lambda_freeze {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> RedModel {
        RedModel::new(
            self.input_dim,
            self.hidden_dim,
            self.feat_dim,
            self.n_classes,
            self.disc_mode,
            derive_seed(self.seed, "model-init"),
        )
    }
}

/// One telemetry row. Accuracy and A-distance fields are filled on epoch
/// boundaries and empty otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iter: usize,
    pub l_s: f64,
    pub l_t: f64,
    pub l_adv: f64,
    pub l_dt: f64,
    pub l_tr: f64,
    pub lambda: f64,
    pub trace_soft: f64,
    pub trace_hard: f64,
    pub src_acc: Option<f64>,
    pub tgt_acc: Option<f64>,
    pub a_dist: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,iter,l_s,l_t,l_adv,l_dt,l_tr,lambda,trace_soft,trace_hard,src_acc,tgt_acc,a_dist";

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(fmt_float9).unwrap_or_default();
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.iter,
            fmt_float9(r.l_s),
            fmt_float9(r.l_t),
            fmt_float9(r.l_adv),
            fmt_float9(r.l_dt),
            fmt_float9(r.l_tr),
            fmt_float9(r.lambda),
            fmt_float9(r.trace_soft),
            fmt_float9(r.trace_hard),
            opt(r.src_acc),
            opt(r.tgt_acc),
            opt(r.a_dist),
        );
    }
    s
}

/// Classical momentum SGD: `v = momentum * v + g; theta -= eta * v`.
/// With zero momentum this is exactly `theta - eta * g`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], eta: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= eta * velocity[i];
    }
}

/// Epoch-shuffled sampling without replacement; reshuffles when exhausted.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batcher { order, cursor: 0, rng }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        if self.cursor + k > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + k].to_vec();
        self.cursor += k;
        out
    }
}

fn gather_rows(ds: &DomainDataset, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * ds.dim);
    for &i in idx {
        out.extend_from_slice(ds.row(i));
    }
    out
}

/// Mutable optimizer and estimator state carried across steps.
pub struct TrainState {
    pub velocity: Vec<Vec<f64>>,
    pub ema_trace: Option<f64>,
    noise_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &RedModel, cfg: &RunConfig) -> Self {
        let mut velocity = Vec::new();
        model.for_each_param(|_, t| velocity.push(vec![0.0; t.numel()]));
        TrainState {
            velocity,
            ema_trace: None,
            noise_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "student-noise")),
        }
    }
}

/// One consolidated training step over a (source, target) batch pair.
/// Updates the model in place and returns the loss telemetry.
pub fn train_step(
    model: &mut RedModel,
    state: &mut TrainState,
    x_s: &[f64],
    y_s: &[usize],
    x_t: &[f64],
    cfg: &RunConfig,
) -> Result<LossBundle> {
    let rows_s = x_s.len() / cfg.input_dim;
    let rows_t = x_t.len() / cfg.input_dim;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut fw = losses::step_forwards(&mut tape, &b, x_s, rows_s, x_t, rows_t, cfg.input_dim)?;
    if let Some(v) = cfg.lambda_freeze {
        let frozen = tape.scalar(v);
        fw.lambda = frozen;
        fw.lambda_sg = frozen;
    }

    let l_s = losses::source_loss(&mut tape, &b, &fw, y_s)?;

    let (l_t, accepted_t) = if cfg.enable_selftrain {
        let student = if cfg.student_noise_std > 0.0 {
            let noisy: Vec<f64> = x_t
                .iter()
                .map(|v| v + cfg.student_noise_std * state.noise_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let xn = tape.input(vec![rows_t, cfg.input_dim], noisy)?;
            let gc_n = b.g_c.forward(&mut tape, xn)?;
            let get_n = b.g_et.forward(&mut tape, xn)?;
            let z = b.fuse_with(&mut tape, gc_n, get_n, fw.lambda)?;
            let logits = b.h.forward(&mut tape, z)?;
            Some(tape.softmax_rows(logits)?)
        } else {
            None
        };
        losses::selftrain_loss(&mut tape, &b, &fw, cfg.tau, PlSource::Fused, student)?
    } else {
        (tape.scalar(0.0), 0)
    };

    let l_adv = losses::adversarial_loss(
        &mut tape,
        &b,
        &fw,
        cfg.disc_mode,
        Some(cfg.alpha * cfg.grl_coeff),
    )?;

    let (l_dt, accepted_dt) = if cfg.enable_disentangle {
        let l = losses::disentangle_loss(&mut tape, &b, &fw, y_s, cfg.tau, cfg.pl_source_for_ldt, Some(1.0))?;
        (l, 0)
    } else {
        (tape.scalar(0.0), 0)
    };

    let (p_es, p_et) = losses::env_prediction_nodes(&mut tape, &b, &fw)?;
    let tr_inner = losses::trace_from_predictions(&mut tape, p_es, p_et, rows_t)?;
    let ema = if cfg.m_ema_decay > 0.0 {
        state.ema_trace.map(|prev| (prev, cfg.m_ema_decay))
    } else {
        None
    };
    let l_tr = losses::trace_loss(&mut tape, fw.lambda, tr_inner, ema)?;

    let total = {
        let a = tape.add(l_s, l_t)?;
        let bsum = tape.add(a, l_dt)?;
        let csum = tape.add(bsum, l_adv)?;
        let tr_scaled = tape.scale(l_tr, cfg.beta)?;
        tape.add(csum, tr_scaled)?
    };

    let trace_soft = tape.scalar_value(tr_inner);
    let trace_hard = {
        let c = cfg.n_classes;
        let pe = tape.value(p_es);
        let pt = tape.value(p_et);
        let mut agree = 0usize;
        for r in 0..rows_t {
            if losses::argmax(&pe[r * c..(r + 1) * c]) == losses::argmax(&pt[r * c..(r + 1) * c]) {
                agree += 1;
            }
        }
        agree as f64 / rows_t as f64
    };

    let bundle = LossBundle {
        l_s: tape.scalar_value(l_s),
        l_t: tape.scalar_value(l_t),
        l_adv: tape.scalar_value(l_adv),
        l_dt: tape.scalar_value(l_dt),
        l_tr: tape.scalar_value(l_tr),
        trace_soft,
        trace_hard,
        lambda_value: tape.scalar_value(fw.lambda),
        accepted_selftrain: accepted_t,
        accepted_disentangle: accepted_dt,
    };
    if !bundle.all_finite() {
        return Err(TrainerError::NumericAbort {
            epoch: 0,
            iter: 0,
            reason: format!("non-finite loss: {bundle:?}"),
            dump: checkpoint_text(model, 0),
        });
    }

    let grads = tape.backward(total)?;
    let mut vars = Vec::new();
    for mlp in [&b.g_c, &b.g_es, &b.g_et, &b.h, &b.d] {
        for (w, bias, _) in &mlp.layers {
            vars.push(*w);
            vars.push(*bias);
        }
    }
    vars.push(b.theta_lambda);
    let grad_vecs: Vec<Vec<f64>> = vars.iter().map(|v| grads.of(*v).to_vec()).collect();

    let mut slot = 0;
    let (eta, momentum) = (cfg.learning_rate, cfg.momentum);
    let velocity = &mut state.velocity;
    model.for_each_param_mut(|_, t| {
        sgd_update(&mut t.values, &grad_vecs[slot], &mut velocity[slot], eta, momentum);
        slot += 1;
    });

    if cfg.m_ema_decay > 0.0 {
        state.ema_trace = Some(match state.ema_trace {
            Some(prev) => cfg.m_ema_decay * prev + (1.0 - cfg.m_ema_decay) * trace_soft,
            None => trace_soft,
        });
    }

    Ok(bundle)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

/// Accuracy of the causal path `argmax h(g_c(x))` against ground truth.
/// Test-time predictions never consult the environmental extractors.
pub fn evaluate(model: &RedModel, ds: &DomainDataset, labels: &[usize]) -> Result<Evaluation> {
    let n = ds.len();
    if n == 0 || labels.len() != n {
        return Err(TrainerError::Argument(format!(
            "evaluate needs labels for all {n} samples, got {}",
            labels.len()
        )));
    }
    let probs = model.predict_causal_values(&ds.x, n);
    let c = model.n_classes;
    let mut correct = 0usize;
    let mut per_class_hit = vec![0usize; c];
    let mut per_class_n = vec![0usize; c];
    for i in 0..n {
        let pred = losses::argmax(&probs[i * c..(i + 1) * c]);
        per_class_n[labels[i]] += 1;
        if pred == labels[i] {
            correct += 1;
            per_class_hit[labels[i]] += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        per_class: per_class_hit
            .iter()
            .zip(&per_class_n)
            .map(|(h, n)| if *n == 0 { 0.0 } else { *h as f64 / *n as f64 })
            .collect(),
    })
}

/// Proxy distribution discrepancy: train a logistic domain probe on half the
/// feature rows, measure its error `eps` on the held-out half, and return
/// `2 * (1 - 2 * eps)` clipped to [0, 2].
pub fn a_distance(features_s: &[f64], features_t: &[f64], dim: usize, seed: u64) -> Result<f64> {
    let n_s = features_s.len() / dim;
    let n_t = features_t.len() / dim;
    if n_s < 4 || n_t < 4 {
        return Err(TrainerError::Argument(format!(
            "a_distance needs >= 4 samples per domain, got {n_s} and {n_t}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let half = n / 2;
        (idx[..half].to_vec(), idx[half..].to_vec())
    };
    let (train_s, test_s) = split(n_s, &mut rng);
    let (train_t, test_t) = split(n_t, &mut rng);

    // Standardize with train-half statistics.
    let mut mean = vec![0.0; dim];
    let mut count = 0.0;
    for &i in train_s.iter() {
        for d in 0..dim {
            mean[d] += features_s[i * dim + d];
        }
        count += 1.0;
    }
    for &i in train_t.iter() {
        for d in 0..dim {
            mean[d] += features_t[i * dim + d];
        }
        count += 1.0;
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0; dim];
    for &i in train_s.iter() {
        for d in 0..dim {
            let v = features_s[i * dim + d] - mean[d];
            var[d] += v * v;
        }
    }
    for &i in train_t.iter() {
        for d in 0..dim {
            let v = features_t[i * dim + d] - mean[d];
            var[d] += v * v;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt().max(1e-8)).collect();
    let norm_row = |buf: &[f64], i: usize| -> Vec<f64> {
        (0..dim).map(|d| (buf[i * dim + d] - mean[d]) / std[d]).collect()
    };

    // Logistic probe, gradient descent, label 1 = source.
    let mut w = vec![0.0; dim + 1];
    let train_rows: Vec<(Vec<f64>, f64)> = train_s
        .iter()
        .map(|&i| (norm_row(features_s, i), 1.0))
        .chain(train_t.iter().map(|&i| (norm_row(features_t, i), 0.0)))
        .collect();
    let lr = 0.5;
    for _ in 0..300 {
        let mut grad = vec![0.0; dim + 1];
        for (row, y) in &train_rows {
            let mut z = w[dim];
            for d in 0..dim {
                z += w[d] * row[d];
            }
            let p = crate::autodiff::sigmoid_scalar(z);
            let err = p - y;
            for d in 0..dim {
                grad[d] += err * row[d];
            }
            grad[dim] += err;
        }
        let m = train_rows.len() as f64;
        for d in 0..=dim {
            w[d] -= lr * (grad[d] / m + 1e-4 * w[d]);
        }
    }

    let mut wrong = 0usize;
    let mut total = 0usize;
    let mut check = |row: Vec<f64>, y: f64| {
        let mut z = w[dim];
        for d in 0..dim {
            z += w[d] * row[d];
        }
        let pred = if z > 0.0 { 1.0 } else { 0.0 };
        if pred != y {
            wrong += 1;
        }
        total += 1;
    };
    for &i in &test_s {
        check(norm_row(features_s, i), 1.0);
    }
    for &i in &test_t {
        check(norm_row(features_t, i), 0.0);
    }
    let eps = wrong as f64 / total as f64;
    Ok((2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0))
}

/// Fused-feature A-distance between the two domains under the current model.
pub fn model_a_distance(
    model: &RedModel,
    source: &DomainDataset,
    target: &DomainDataset,
    seed: u64,
) -> Result<f64> {
    let fs = model.fused_features(&source.x, source.len(), Env::Source);
    let ft = model.fused_features(&target.x, target.len(), Env::Target);
    a_distance(&fs, &ft, model.feat_dim, seed)
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: RedModel,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs the full loop. `target.labels` is never consulted; pass the hidden
/// labels through `eval_target_labels` to log target accuracy per epoch.
pub fn train(
    source: &DomainDataset,
    target: &DomainDataset,
    eval_target_labels: Option<&[usize]>,
    cfg: &RunConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let y_source = source
        .labels
        .as_ref()
        .ok_or_else(|| TrainerError::Argument("source dataset must carry labels".into()))?;
    if source.dim != cfg.input_dim || target.dim != cfg.input_dim {
        return Err(TrainerError::Argument(format!(
            "input_dim {} does not match data dims {} / {}",
            cfg.input_dim, source.dim, target.dim
        )));
    }
    if cfg.batch_size > source.len() || cfg.batch_size > target.len() {
        return Err(TrainerError::Argument(format!(
            "batch_size {} exceeds dataset sizes {} / {}",
            cfg.batch_size,
            source.len(),
            target.len()
        )));
    }

    let mut model = cfg.build_model();
    let mut state = TrainState::new(&model, cfg);
    let mut batcher_s = Batcher::new(source.len(), derive_seed(cfg.seed, "batch-source"));
    let mut batcher_t = Batcher::new(target.len(), derive_seed(cfg.seed, "batch-target"));
    let mut metrics = Vec::new();

    for epoch in 0..cfg.max_epochs {
        for iter in 0..cfg.iters_per_epoch {
            let idx_s = batcher_s.next(cfg.batch_size);
            let idx_t = batcher_t.next(cfg.batch_size);
            let x_s = gather_rows(source, &idx_s);
            let y_s: Vec<usize> = idx_s.iter().map(|&i| y_source[i]).collect();
            let x_t = gather_rows(target, &idx_t);

            let bundle = match train_step(&mut model, &mut state, &x_s, &y_s, &x_t, cfg) {
                Ok(b) => b,
                Err(TrainerError::NumericAbort { reason, dump, .. }) => {
                    return Err(TrainerError::NumericAbort { epoch, iter, reason, dump })
                }
                Err(TrainerError::Tape(TapeError::NonFinite { op })) => {
                    return Err(TrainerError::NumericAbort {
                        epoch,
                        iter,
                        reason: format!("non-finite value in {op}"),
                        dump: checkpoint_text(&model, 0),
                    })
                }
                Err(e) => return Err(e),
            };

            let mut record = MetricsRecord {
                epoch,
                iter,
                l_s: bundle.l_s,
                l_t: bundle.l_t,
                l_adv: bundle.l_adv,
                l_dt: bundle.l_dt,
                l_tr: bundle.l_tr,
                lambda: bundle.lambda_value,
                trace_soft: bundle.trace_soft,
                trace_hard: bundle.trace_hard,
                src_acc: None,
                tgt_acc: None,
                a_dist: None,
            };

            if iter + 1 == cfg.iters_per_epoch {
                record.src_acc = Some(evaluate(&model, source, y_source)?.accuracy);
                if let Some(yt) = eval_target_labels {
                    record.tgt_acc = Some(evaluate(&model, target, yt)?.accuracy);
                }
                record.a_dist = Some(model_a_distance(
                    &model,
                    source,
                    target,
                    derive_seed(cfg.seed, &format!("adist-{epoch}")),
                )?);
            }
            metrics.push(record);
        }
    }
    Ok(TrainOutput { model, metrics })
}

// ---- ablation ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    WithoutLtr,
    WithoutDtAndLtr,
    SourceAdversarialOnly,
    SelftrainOnly,
}

pub const ABLATION_VARIANTS: [AblationVariant; 5] = [
    AblationVariant::Full,
    AblationVariant::WithoutLtr,
    AblationVariant::WithoutDtAndLtr,
    AblationVariant::SourceAdversarialOnly,
    AblationVariant::SelftrainOnly,
];

impl AblationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutLtr => "wo_ltr",
            AblationVariant::WithoutDtAndLtr => "wo_ldt_ltr",
            AblationVariant::SourceAdversarialOnly => "source_adv",
            AblationVariant::SelftrainOnly => "selftrain_only",
        }
    }

    /// Maps a base configuration onto the variant's switch settings.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::WithoutLtr => {
                cfg.beta = 0.0;
            }
            AblationVariant::WithoutDtAndLtr => {
                cfg.beta = 0.0;
                cfg.enable_disentangle = false;
            }
            AblationVariant::SourceAdversarialOnly => {
                cfg.beta = 0.0;
                cfg.enable_disentangle = false;
                cfg.enable_selftrain = false;
            }
            AblationVariant::SelftrainOnly => {
                cfg.beta = 0.0;
                cfg.enable_disentangle = false;
                cfg.alpha = 0.0;
            }
        }
        cfg
    }
}

/// Source-only training configuration (used for A-distance comparisons).
pub fn source_only_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.enable_disentangle = false;
    cfg.enable_selftrain = false;
    cfg
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seeds: Vec<u64>,
    pub accs: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,n_seeds,mean_tgt_acc,std_tgt_acc,per_seed_accs\n");
    for r in rows {
        let per: Vec<String> = r.accs.iter().map(|a| fmt_float9(*a)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.variant,
            r.seeds.len(),
            fmt_float9(r.mean_acc),
            fmt_float9(r.std_acc),
            per.join(";")
        );
    }
    s
}

/// One ablation run. The dataset is fixed by the spec; replicates vary the
/// training seed only, so variants are compared on identical data.
fn ablation_run(
    spec: &SynthSpec,
    base: &RunConfig,
    variant: AblationVariant,
    replicate: u64,
) -> Result<f64> {
    let (source, target, _) = crate::synthgen::generate(spec)?;
    let target_labels = target.labels.clone().expect("generated target has labels");
    let target_features = DomainDataset { labels: None, ..target };

    let mut cfg = variant.apply(base);
    cfg.seed = derive_seed(base.seed, &format!("ablate-train-{replicate}"));
    let out = train(&source, &target_features, None, &cfg)
        .map_err(|e| TrainerError::Variant { variant: variant.name(), source: Box::new(e) })?;
    Ok(evaluate(&out.model, &target_features, &target_labels)?.accuracy)
}

/// Runs the five variants over the replicate seeds, in parallel worker
/// threads. Each run owns its data, model, and RNG streams.
pub fn ablate(
    spec: &SynthSpec,
    base: &RunConfig,
    replicates: &[u64],
    max_threads: usize,
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(AblationVariant, u64)> = ABLATION_VARIANTS
        .iter()
        .flat_map(|v| replicates.iter().map(move |r| (*v, *r)))
        .collect();
    let workers = max_threads.max(1).min(jobs.len().max(1));
    let mut results: Vec<Option<Result<f64>>> = Vec::new();
    results.resize_with(jobs.len(), || None);

    let chunks: Vec<Vec<usize>> = (0..workers)
        .map(|w| (0..jobs.len()).filter(|i| i % workers == w).collect())
        .collect();
    let slots: Vec<std::sync::Mutex<Vec<(usize, Result<f64>)>>> =
        (0..workers).map(|_| std::sync::Mutex::new(Vec::new())).collect();

    std::thread::scope(|scope| {
        for (w, chunk) in chunks.iter().enumerate() {
            let slot = &slots[w];
            let jobs = &jobs;
            scope.spawn(move || {
                for &i in chunk {
                    let (variant, rep) = jobs[i];
                    let res = ablation_run(spec, base, variant, rep);
                    slot.lock().unwrap().push((i, res));
                }
            });
        }
    });
    for slot in slots {
        for (i, res) in slot.into_inner().unwrap() {
            results[i] = Some(res);
        }
    }

    let mut rows = Vec::new();
    for (vi, variant) in ABLATION_VARIANTS.iter().enumerate() {
        let mut accs = Vec::new();
        for (ri, _) in replicates.iter().enumerate() {
            let idx = vi * replicates.len() + ri;
            accs.push(results[idx].take().expect("job ran")?);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        rows.push(AblationRow {
            variant: variant.name(),
            seeds: replicates.to_vec(),
            accs,
            mean_acc: mean,
            std_acc: var.sqrt(),
        });
    }
    Ok(rows)
}

/// Hard transition-matrix estimate over a whole dataset (reporting helper).
pub fn dataset_transition(model: &RedModel, target: &DomainDataset, hard: bool) -> TransitionMatrix {
    losses::estimate_transition(model, &target.x, target.len(), hard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate;

    fn tiny_spec() -> SynthSpec {
        let mut spec = SynthSpec::default_benchmark();
        spec.n_s = 80;
        spec.n_t = 80;
        spec
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default_benchmark();
        cfg.max_epochs = 2;
        cfg.iters_per_epoch = 4;
        cfg.batch_size = 16;
        cfg.hidden_dim = 16;
        cfg.feat_dim = 8;
        cfg
    }

    #[test]
    fn sgd_plain_rule_examples() {
        let mut theta = vec![0.0, 0.0];
        let mut vel = vec![0.0, 0.0];
        sgd_update(&mut theta, &[1.0, -2.0], &mut vel, 0.1, 0.0);
        assert_eq!(theta, vec![-0.1, 0.2]);

        let mut theta2 = vec![1.5, -0.5];
        let before = theta2.clone();
        let mut vel2 = vec![0.0, 0.0];
        sgd_update(&mut theta2, &[3.0, 4.0], &mut vel2, 0.0, 0.9);
        assert_eq!(theta2, before);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let (eta, mu) = (0.1, 0.9);
        let g1 = [1.0, -2.0];
        let g2 = [0.5, 0.5];
        let mut theta = vec![0.0, 0.0];
        let mut vel = vec![0.0, 0.0];
        sgd_update(&mut theta, &g1, &mut vel, eta, mu);
        sgd_update(&mut theta, &g2, &mut vel, eta, mu);
        // v1 = g1; th1 = -eta g1; v2 = mu g1 + g2; th2 = th1 - eta v2.
        for i in 0..2 {
            let expect = -eta * g1[i] - eta * (mu * g1[i] + g2[i]);
            assert!((theta[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_epochs_returns_fresh_model_and_no_metrics() {
        let (s, t, _) = generate(&tiny_spec()).unwrap();
        let t_feat = DomainDataset { labels: None, ..t };
        let mut cfg = tiny_cfg();
        cfg.max_epochs = 0;
        let out = train(&s, &t_feat, None, &cfg).unwrap();
        assert!(out.metrics.is_empty());
        let fresh = cfg.build_model();
        let mut a = Vec::new();
        out.model.for_each_param(|_, t| a.push(t.values.clone()));
        let mut b = Vec::new();
        fresh.for_each_param(|_, t| b.push(t.values.clone()));
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_metrics() {
        let (s, t, _) = generate(&tiny_spec()).unwrap();
        let labels = t.labels.clone().unwrap();
        let t_feat = DomainDataset { labels: None, ..t };
        let cfg = tiny_cfg();
        let m1 = train(&s, &t_feat, Some(&labels), &cfg).unwrap().metrics;
        let m2 = train(&s, &t_feat, Some(&labels), &cfg).unwrap().metrics;
        assert_eq!(metrics_to_csv(&m1), metrics_to_csv(&m2));
        assert_eq!(m1, m2);
    }

    #[test]
    fn lambda_starts_at_exactly_half_in_first_record() {
        let (s, t, _) = generate(&tiny_spec()).unwrap();
        let t_feat = DomainDataset { labels: None, ..t };
        let out = train(&s, &t_feat, None, &tiny_cfg()).unwrap();
        assert_eq!(out.metrics[0].lambda, 0.5);
    }

    #[test]
    fn numeric_blowup_aborts_with_dump() {
        let (s, t, _) = generate(&tiny_spec()).unwrap();
        let t_feat = DomainDataset { labels: None, ..t };
        let mut cfg = tiny_cfg();
        cfg.learning_rate = 1e160;
        match train(&s, &t_feat, None, &cfg) {
            Err(TrainerError::NumericAbort { dump, .. }) => {
                assert!(dump.contains("redlab-checkpoint"));
            }
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn switch_off_step_reduces_to_supervised_descent() {
        // alpha = 0, beta = 0, tau = 1, identical environmental extractors:
        // the classifier-path updates equal plain descent on
        // L_s + (source term of L_dt).
        let (s, t, _) = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        cfg.tau = 1.0;
        cfg.momentum = 0.0;

        let mut model = cfg.build_model();
        model.g_et = model.g_es.clone();
        let reference = model.clone();

        let x_s = gather_rows(&s, &(0..16).collect::<Vec<_>>());
        let y_s: Vec<usize> = s.labels.as_ref().unwrap()[0..16].to_vec();
        let x_t = gather_rows(&t, &(0..16).collect::<Vec<_>>());

        let mut state = TrainState::new(&model, &cfg);
        let bundle = train_step(&mut model, &mut state, &x_s, &y_s, &x_t, &cfg).unwrap();
        assert_eq!(bundle.l_t, 0.0);
        assert_eq!(bundle.accepted_selftrain, 0);

        // Reference: gradients of L_s + L_dt(source term only; tau = 1 kills
        // the target term) via plain backward with explicit signs.
        let mut tape = Tape::new();
        let b = reference.bind(&mut tape);
        let fw = losses::step_forwards(&mut tape, &b, &x_s, 16, &x_t, 16, cfg.input_dim).unwrap();
        let l_s = losses::source_loss(&mut tape, &b, &fw, &y_s).unwrap();
        let l_dt = losses::disentangle_loss(&mut tape, &b, &fw, &y_s, 1.0, cfg.pl_source_for_ldt, None).unwrap();
        let g_s = tape.backward(l_s).unwrap();
        let g_dt = tape.backward(l_dt).unwrap();

        let mut vars = Vec::new();
        for mlp in [&b.g_c, &b.g_es, &b.g_et, &b.h, &b.d] {
            for (w, bias, _) in &mlp.layers {
                vars.push(*w);
                vars.push(*bias);
            }
        }
        vars.push(b.theta_lambda);
        let mut groups = Vec::new();
        reference.for_each_param(|g, _| groups.push(g));

        let mut expected = Vec::new();
        reference.for_each_param(|_, t| expected.push(t.values.clone()));
        for (slot, (group, var)) in groups.iter().zip(&vars).enumerate() {
            let gs = g_s.of(*var);
            let gdt = g_dt.of(*var);
            for i in 0..expected[slot].len() {
                let g = match group {
                    crate::nets::ParamGroup::Gc
                    | crate::nets::ParamGroup::H
                    | crate::nets::ParamGroup::Lambda => gs[i] + gdt[i],
                    crate::nets::ParamGroup::Ges | crate::nets::ParamGroup::Get => gs[i] - gdt[i],
                    crate::nets::ParamGroup::D => 0.0,
                };
                expected[slot][i] -= cfg.learning_rate * g;
            }
        }
        // d is excluded: its loss (L_adv) still trains it in the real step.
        let mut got = Vec::new();
        model.for_each_param(|_, t| got.push(t.values.clone()));
        for (slot, group) in groups.iter().enumerate() {
            if matches!(group, crate::nets::ParamGroup::D) {
                continue;
            }
            for (a, e) in got[slot].iter().zip(&expected[slot]) {
                assert!((a - e).abs() < 1e-12, "group {group:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn lambda_never_decreases_when_classification_losses_are_lambda_flat() {
        // Identical extractors make the fused features independent of lambda,
        // so L_s, L_t, L_dt contribute exactly zero gradient to theta_lambda.
        // The soft trace of a non-one-hot model is < 1, so the trace loss
        // strictly increases lambda.
        let (s, t, _) = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.momentum = 0.0;
        let mut model = cfg.build_model();
        model.g_es = model.g_c.clone();
        model.g_et = model.g_c.clone();

        let before = model.lambda_value();
        assert_eq!(before, 0.5);
        let x_s = gather_rows(&s, &(0..16).collect::<Vec<_>>());
        let y_s: Vec<usize> = s.labels.as_ref().unwrap()[0..16].to_vec();
        let x_t = gather_rows(&t, &(0..16).collect::<Vec<_>>());
        let mut state = TrainState::new(&model, &cfg);
        let bundle = train_step(&mut model, &mut state, &x_s, &y_s, &x_t, &cfg).unwrap();
        assert!(bundle.trace_soft < 1.0, "fixture needs soft disagreement");
        assert!(model.lambda_value() > before, "lambda must rise: {}", model.lambda_value());
    }

    #[test]
    fn evaluate_uniform_model_is_chance_level() {
        let (s, _, _) = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.seed = 3;
        let mut model = cfg.build_model();
        for l in &mut model.h.layers {
            l.w.values.iter_mut().for_each(|v| *v = 0.0);
            l.b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let labels = s.labels.clone().unwrap();
        let e = evaluate(&model, &s, &labels).unwrap();
        // Uniform rows: argmax ties resolve to class 0, so accuracy is the
        // class-0 share, which is 1/C for balanced data.
        assert!((e.accuracy - 0.25).abs() < 0.05, "{}", e.accuracy);
    }

    #[test]
    fn evaluate_oracle_predictions_hit_one() {
        let (s, _, _) = generate(&tiny_spec()).unwrap();
        let model = tiny_cfg().build_model();
        let probs = model.predict_causal_values(&s.x, s.len());
        let fake_labels: Vec<usize> =
            (0..s.len()).map(|i| losses::argmax(&probs[i * 4..(i + 1) * 4])).collect();
        let e = evaluate(&model, &s, &fake_labels).unwrap();
        assert_eq!(e.accuracy, 1.0);
        for pc in &e.per_class {
            assert!(*pc == 1.0 || pc.is_finite());
        }
    }

    #[test]
    fn evaluate_matches_per_sample_loop() {
        let (s, _, _) = generate(&tiny_spec()).unwrap();
        let model = tiny_cfg().build_model();
        let labels = s.labels.clone().unwrap();
        let e = evaluate(&model, &s, &labels).unwrap();
        let probs = model.predict_causal_values(&s.x, s.len());
        let mut correct = 0;
        for i in 0..s.len() {
            if losses::argmax(&probs[i * 4..(i + 1) * 4]) == labels[i] {
                correct += 1;
            }
        }
        assert_eq!(e.accuracy, correct as f64 / s.len() as f64);
    }

    #[test]
    fn a_distance_identical_distributions_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..300 * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..300 * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let d = a_distance(&a, &b, 4, 1).unwrap();
        assert!(d < 0.35, "a-distance {d}");
    }

    #[test]
    fn a_distance_disjoint_clusters_is_near_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..200 * 3)
            .map(|_| 5.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b: Vec<f64> = (0..200 * 3)
            .map(|_| -5.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = a_distance(&a, &b, 3, 2).unwrap();
        assert!(d > 1.8, "a-distance {d}");
    }

    #[test]
    fn a_distance_requires_four_samples_per_domain() {
        let a = vec![0.0; 3 * 2];
        let b = vec![0.0; 8 * 2];
        assert!(matches!(a_distance(&a, &b, 2, 0), Err(TrainerError::Argument(_))));
    }

    #[test]
    fn metrics_csv_has_exact_header_and_empty_optionals() {
        let r = MetricsRecord {
            epoch: 0,
            iter: 1,
            l_s: 1.0,
            l_t: 0.5,
            l_adv: 1.4,
            l_dt: 0.7,
            l_tr: 0.3,
            lambda: 0.5,
            trace_soft: 0.25,
            trace_hard: 0.25,
            src_acc: None,
            tgt_acc: None,
            a_dist: None,
        };
        let csv = metrics_to_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let row = lines.next().unwrap();
        assert!(row.ends_with(",,,"), "optional fields must be empty: {row}");
        assert_eq!(row.split(',').count(), 13);
    }

    #[test]
    fn batcher_is_exhaustive_within_epoch() {
        let mut b = Batcher::new(10, 0);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..5 {
            seen.extend(b.next(2));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation_rejects_bad_tau() {
        let mut cfg = tiny_cfg();
        cfg.tau = 0.2; // below 1/C = 0.25
        assert!(matches!(cfg.validate(), Err(TrainerError::Argument(_))));
        cfg.tau = 1.5;
        assert!(matches!(cfg.validate(), Err(TrainerError::Argument(_))));
    }
}
