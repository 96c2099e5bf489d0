//! Training objectives.
//!
//! Five losses drive the model:
//! - `L_s`: supervised cross-entropy on fused source predictions.
//! - `L_t`: confidence-thresholded self-training on fused target predictions.
//! - `L_adv`: domain confusion between fused source and target features.
//! - `L_dt`: disentanglement, classifying each domain through the *other*
//!   domain's environmental extractor (adversarial for `g_es`/`g_et`).
//! - `L_tr = (1 - lambda) * (1 - tr(M_hat))`: the disagreement reducer.
//!
//! The transition matrix `M_hat` is the batch mean of outer products of the
//! two environmental prediction rows; its trace equals the mean inner product
//! of those rows.
//!
//! Gradient routing is part of the loss semantics here: `L_adv` fuses with a
//! detached `lambda` and conditions the discriminator on detached prediction
//! rows, so only the extractors and `d` see it; `L_tr` stops gradients at the
//! environmental features, so only `h` and `theta_lambda` see it. Optional
//! reversal coefficients let one backward pass realize the min-max updates.

use thiserror::Error;

use crate::autodiff::{CeTargets, Result as TapeResult, Tape, TapeError, Var, EPS_P};
use crate::nets::{DiscMode, Env, ModelBinding, RedModel};

#[derive(Debug, Error)]
#[error("transition matrix violation: {0}")]
pub struct TransitionViolation(String);

/// C x C estimate of the joint distribution of the two environmental
/// labelings on target samples.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    /// Row-major C x C matrix; entry `(i, j)` is the probability mass for
    /// (source-environmental label i, target-environmental label j).
    pub m: Vec<f64>,
    pub c: usize,
    /// Number of target samples aggregated.
    pub count: usize,
}

impl TransitionMatrix {
    pub fn trace(&self) -> f64 {
        (0..self.c).map(|i| self.m[i * self.c + i]).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.m.iter().sum()
    }

    /// Entries non-negative, total mass 1 within 1e-9, trace in [0, 1].
    pub fn validate(&self) -> Result<(), TransitionViolation> {
        if let Some(v) = self.m.iter().find(|v| **v < 0.0) {
            return Err(TransitionViolation(format!("negative entry {v}")));
        }
        let mass = self.total_mass();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(TransitionViolation(format!("total mass {mass}")));
        }
        let tr = self.trace();
        if !(-1e-12..=1.0 + 1e-12).contains(&tr) {
            return Err(TransitionViolation(format!("trace {tr}")));
        }
        Ok(())
    }
}

/// Mean outer product of paired probability rows. `hard` snaps each row to
/// its argmax one-hot first (reporting form; not differentiable).
pub fn transition_from_prob_rows(p_es: &[f64], p_et: &[f64], c: usize, hard: bool) -> TransitionMatrix {
    assert_eq!(p_es.len(), p_et.len());
    assert_eq!(p_es.len() % c, 0);
    let rows = p_es.len() / c;
    let mut m = vec![0.0; c * c];
    for r in 0..rows {
        let pe = &p_es[r * c..(r + 1) * c];
        let pt = &p_et[r * c..(r + 1) * c];
        if hard {
            m[argmax(pe) * c + argmax(pt)] += 1.0;
        } else {
            for i in 0..c {
                for j in 0..c {
                    m[i * c + j] += pe[i] * pt[j];
                }
            }
        }
    }
    for v in m.iter_mut() {
        *v /= rows as f64;
    }
    TransitionMatrix { m, c, count: rows }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Which prediction path supplies pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlSource {
    Fused,
    Causal,
}

/// Shared forward nodes for one (source batch, target batch) pair.
/// Every loss below reuses these extractor passes.
pub struct StepForwards {
    pub x_s: Var,
    pub x_t: Var,
    pub rows_s: usize,
    pub rows_t: usize,
    pub gc_s: Var,
    pub gc_t: Var,
    pub ges_s: Var,
    pub ges_t: Var,
    pub get_s: Var,
    pub get_t: Var,
    pub lambda: Var,
    pub lambda_sg: Var,
}

pub fn step_forwards(
    tape: &mut Tape,
    b: &ModelBinding,
    x_s: &[f64],
    rows_s: usize,
    x_t: &[f64],
    rows_t: usize,
    input_dim: usize,
) -> TapeResult<StepForwards> {
    if rows_s == 0 || rows_t == 0 {
        return Err(TapeError::Argument("empty batch".into()));
    }
    let x_s = tape.input(vec![rows_s, input_dim], x_s.to_vec())?;
    let x_t = tape.input(vec![rows_t, input_dim], x_t.to_vec())?;
    Ok(StepForwards {
        x_s,
        x_t,
        rows_s,
        rows_t,
        gc_s: b.g_c.forward(tape, x_s)?,
        gc_t: b.g_c.forward(tape, x_t)?,
        ges_s: b.g_es.forward(tape, x_s)?,
        ges_t: b.g_es.forward(tape, x_t)?,
        get_s: b.g_et.forward(tape, x_s)?,
        get_t: b.g_et.forward(tape, x_t)?,
        lambda: b.lambda(tape)?,
        lambda_sg: b.lambda_detached(tape)?,
    })
}

fn fused_prediction(
    tape: &mut Tape,
    b: &ModelBinding,
    causal: Var,
    env_feat: Var,
    lambda: Var,
) -> TapeResult<Var> {
    let z = b.fuse_with(tape, causal, env_feat, lambda)?;
    let logits = b.h.forward(tape, z)?;
    tape.softmax_rows(logits)
}

fn output_classes(tape: &Tape, b: &ModelBinding) -> usize {
    let last = b.h.layers.last().expect("classifier has a layer");
    tape.shape(last.0)[1]
}

/// Supervised source loss: mean cross-entropy of the fused source prediction.
pub fn source_loss(tape: &mut Tape, b: &ModelBinding, fw: &StepForwards, y_s: &[usize]) -> TapeResult<Var> {
    let probs = fused_prediction(tape, b, fw.gc_s, fw.ges_s, fw.lambda)?;
    tape.cross_entropy(probs, CeTargets::Indices(y_s.to_vec()))
}

/// Confidence mask and argmax labels from detached probability rows.
fn pseudo_labels(probs: &[f64], c: usize, tau: f64) -> (Vec<f64>, Vec<usize>, usize) {
    let rows = probs.len() / c;
    let mut weights = vec![0.0; rows];
    let mut labels = vec![0usize; rows];
    let mut accepted = 0;
    for r in 0..rows {
        let row = &probs[r * c..(r + 1) * c];
        let k = argmax(row);
        labels[r] = k;
        if row[k] > tau {
            weights[r] = 1.0;
            accepted += 1;
        }
    }
    (weights, labels, accepted)
}

/// Self-training loss on the target batch. Pseudo-labels come from the `pl`
/// path, gradient-detached; the trained prediction is the fused target path
/// (or a caller-supplied student view). Mean over accepted samples, exact
/// zero when nothing clears the threshold.
pub fn selftrain_loss(
    tape: &mut Tape,
    b: &ModelBinding,
    fw: &StepForwards,
    tau: f64,
    pl: PlSource,
    student: Option<Var>,
) -> TapeResult<(Var, usize)> {
    let c = output_classes(tape, b);
    let teacher_vals = match pl {
        PlSource::Fused => {
            let p = fused_prediction(tape, b, fw.gc_t, fw.get_t, fw.lambda)?;
            tape.value(p).to_vec()
        }
        PlSource::Causal => {
            let logits = b.h.forward(tape, fw.gc_t)?;
            let p = tape.softmax_rows(logits)?;
            tape.value(p).to_vec()
        }
    };
    let (weights, labels, accepted) = pseudo_labels(&teacher_vals, c, tau);
    let student_probs = match student {
        Some(p) => p,
        None => fused_prediction(tape, b, fw.gc_t, fw.get_t, fw.lambda)?,
    };
    let loss = tape.cross_entropy_weighted(
        student_probs,
        CeTargets::Indices(labels),
        Some(weights),
        accepted as f64,
    )?;
    Ok((loss, accepted))
}

/// Domain-confusion loss:
/// `-mean log d(z_s) - mean log(1 - d(z_t))` on fused features.
///
/// `lambda` is detached inside the fusion and (in conditional mode) the
/// prediction rows are detached, so the only gradient paths are the
/// extractors (through `rev`, when given) and the discriminator itself.
pub fn adversarial_loss(
    tape: &mut Tape,
    b: &ModelBinding,
    fw: &StepForwards,
    mode: DiscMode,
    rev: Option<f64>,
) -> TapeResult<Var> {
    let domain_term = |tape: &mut Tape, causal, env_feat, positive: bool, rows: usize| -> TapeResult<Var> {
        let z = b.fuse_with(tape, causal, env_feat, fw.lambda_sg)?;
        let z = match rev {
            Some(coeff) => tape.grad_reverse(z, coeff)?,
            None => z,
        };
        let d_out = match mode {
            DiscMode::Plain => b.d.forward(tape, z)?,
            DiscMode::Conditional => {
                let p = fused_prediction(tape, b, causal, env_feat, fw.lambda_sg)?;
                let p_sg = tape.stop_gradient(p)?;
                let input = tape.row_outer_flatten(z, p_sg)?;
                b.d.forward(tape, input)?
            }
        };
        let d_out = tape.clamp(d_out, EPS_P, 1.0 - EPS_P)?;
        let inside = if positive {
            d_out
        } else {
            let neg = tape.scale(d_out, -1.0)?;
            tape.add_const(neg, 1.0)?
        };
        let logs = tape.log(inside)?;
        let total = tape.sum(logs)?;
        tape.scale(total, -1.0 / rows as f64)
    };
    let s_term = domain_term(tape, fw.gc_s, fw.ges_s, true, fw.rows_s)?;
    let t_term = domain_term(tape, fw.gc_t, fw.get_t, false, fw.rows_t)?;
    tape.add(s_term, t_term)
}

/// Disentanglement loss: source samples classified through `g_et`, target
/// samples through `g_es` with causal-path pseudo-labels (by default).
/// `env_rev` wraps the swapped environmental features in a gradient
/// reversal so a single descent step maximizes over `g_es`/`g_et`.
pub fn disentangle_loss(
    tape: &mut Tape,
    b: &ModelBinding,
    fw: &StepForwards,
    y_s: &[usize],
    tau: f64,
    pl: PlSource,
    env_rev: Option<f64>,
) -> TapeResult<Var> {
    let wrap = |tape: &mut Tape, feat: Var| -> TapeResult<Var> {
        match env_rev {
            Some(coeff) => tape.grad_reverse(feat, coeff),
            None => Ok(feat),
        }
    };
    // Source batch through the target-domain environmental extractor.
    let get_s = wrap(tape, fw.get_s)?;
    let probs_s = fused_prediction(tape, b, fw.gc_s, get_s, fw.lambda)?;
    let l_src = tape.cross_entropy(probs_s, CeTargets::Indices(y_s.to_vec()))?;

    // Target batch through the source-domain environmental extractor.
    let c = output_classes(tape, b);
    let teacher_vals = match pl {
        PlSource::Causal => {
            let logits = b.h.forward(tape, fw.gc_t)?;
            let p = tape.softmax_rows(logits)?;
            tape.value(p).to_vec()
        }
        PlSource::Fused => {
            let p = fused_prediction(tape, b, fw.gc_t, fw.get_t, fw.lambda)?;
            tape.value(p).to_vec()
        }
    };
    let (weights, labels, accepted) = pseudo_labels(&teacher_vals, c, tau);
    let ges_t = wrap(tape, fw.ges_t)?;
    let probs_t = fused_prediction(tape, b, fw.gc_t, ges_t, fw.lambda)?;
    let l_tgt = tape.cross_entropy_weighted(
        probs_t,
        CeTargets::Indices(labels),
        Some(weights),
        accepted as f64,
    )?;
    tape.add(l_src, l_tgt)
}

/// Mirror of [`disentangle_loss`] with the extractor roles exchanged:
/// source samples through `g_es`, target samples through `g_et`. Used by the
/// swap-symmetry check.
pub fn disentangle_loss_swapped(
    tape: &mut Tape,
    b: &ModelBinding,
    fw: &StepForwards,
    y_s: &[usize],
    tau: f64,
    pl: PlSource,
) -> TapeResult<Var> {
    let probs_s = fused_prediction(tape, b, fw.gc_s, fw.ges_s, fw.lambda)?;
    let l_src = tape.cross_entropy(probs_s, CeTargets::Indices(y_s.to_vec()))?;
    let c = output_classes(tape, b);
    let teacher_vals = match pl {
        PlSource::Causal => {
            let logits = b.h.forward(tape, fw.gc_t)?;
            let p = tape.softmax_rows(logits)?;
            tape.value(p).to_vec()
        }
        PlSource::Fused => {
            // Swapped roles: the fused target path now runs through g_es.
            let p = fused_prediction(tape, b, fw.gc_t, fw.ges_t, fw.lambda)?;
            tape.value(p).to_vec()
        }
    };
    let (weights, labels, accepted) = pseudo_labels(&teacher_vals, c, tau);
    let probs_t = fused_prediction(tape, b, fw.gc_t, fw.get_t, fw.lambda)?;
    let l_tgt = tape.cross_entropy_weighted(
        probs_t,
        CeTargets::Indices(labels),
        Some(weights),
        accepted as f64,
    )?;
    tape.add(l_src, l_tgt)
}

/// Environmental prediction rows on the target batch with stop-gradient at
/// the features: `softmax(h(sg(g_es(x_t))))` and `softmax(h(sg(g_et(x_t))))`.
/// Only `h` receives gradients through these nodes.
pub fn env_prediction_nodes(tape: &mut Tape, b: &ModelBinding, fw: &StepForwards) -> TapeResult<(Var, Var)> {
    let es_sg = tape.stop_gradient(fw.ges_t)?;
    let et_sg = tape.stop_gradient(fw.get_t)?;
    let logits_es = b.h.forward(tape, es_sg)?;
    let p_es = tape.softmax_rows(logits_es)?;
    let logits_et = b.h.forward(tape, et_sg)?;
    let p_et = tape.softmax_rows(logits_et)?;
    Ok((p_es, p_et))
}

/// Mean inner product of paired prediction rows; equals the trace of the
/// assembled soft transition matrix.
pub fn trace_from_predictions(tape: &mut Tape, p_es: Var, p_et: Var, rows: usize) -> TapeResult<Var> {
    let prod = tape.mul(p_es, p_et)?;
    let total = tape.sum(prod)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Differentiable soft trace on the target batch.
pub fn trace_soft_inner(tape: &mut Tape, b: &ModelBinding, fw: &StepForwards) -> TapeResult<Var> {
    let (p_es, p_et) = env_prediction_nodes(tape, b, fw)?;
    trace_from_predictions(tape, p_es, p_et, fw.rows_t)
}

/// `L_tr = (1 - lambda) * (1 - tr)`, optionally blending the batch trace
/// with a running estimate: `tr_eff = decay * prev + (1 - decay) * tr`.
/// `lambda` is the caller's mixing node, so a frozen lambda carries no
/// gradient while the learned one reaches theta_lambda.
pub fn trace_loss(tape: &mut Tape, lambda: Var, trace_inner: Var, ema: Option<(f64, f64)>) -> TapeResult<Var> {
    let tr_eff = match ema {
        Some((prev, decay)) if decay > 0.0 => {
            let scaled = tape.scale(trace_inner, 1.0 - decay)?;
            tape.add_const(scaled, decay * prev)?
        }
        _ => trace_inner,
    };
    let one_minus_lambda = {
        let neg = tape.scale(lambda, -1.0)?;
        tape.add_const(neg, 1.0)?
    };
    let one_minus_tr = {
        let neg = tape.scale(tr_eff, -1.0)?;
        tape.add_const(neg, 1.0)?
    };
    tape.mul(one_minus_lambda, one_minus_tr)
}

/// Detached estimate of the transition matrix on a target batch.
pub fn estimate_transition(model: &RedModel, x_t: &[f64], rows: usize, hard: bool) -> TransitionMatrix {
    let p_es = model.predict_env_values(x_t, rows, Env::Source);
    let p_et = model.predict_env_values(x_t, rows, Env::Target);
    transition_from_prob_rows(&p_es, &p_et, model.n_classes, hard)
}

/// Per-iteration loss values and telemetry extracted from one assembled step.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_s: f64,
    pub l_t: f64,
    pub l_adv: f64,
    pub l_dt: f64,
    pub l_tr: f64,
    pub trace_soft: f64,
    pub trace_hard: f64,
    pub lambda_value: f64,
    pub accepted_selftrain: usize,
    pub accepted_disentangle: usize,
}

impl LossBundle {
    pub fn all_finite(&self) -> bool {
        [
            self.l_s,
            self.l_t,
            self.l_adv,
            self.l_dt,
            self.l_tr,
            self.trace_soft,
            self.trace_hard,
            self.lambda_value,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ---- scratch-tape convenience wrappers (used heavily in tests) -------------

pub fn loss_source_value(model: &RedModel, x_s: &[f64], rows_s: usize, y_s: &[usize]) -> TapeResult<f64> {
    let dim = model.g_c.in_dim();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = step_forwards(&mut tape, &b, x_s, rows_s, x_s, rows_s, dim)?;
    let l = source_loss(&mut tape, &b, &fw, y_s)?;
    Ok(tape.scalar_value(l))
}

pub fn loss_selftrain_value(
    model: &RedModel,
    x_t: &[f64],
    rows_t: usize,
    tau: f64,
    pl: PlSource,
) -> TapeResult<(f64, usize)> {
    let dim = model.g_c.in_dim();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = step_forwards(&mut tape, &b, x_t, rows_t, x_t, rows_t, dim)?;
    let (l, n) = selftrain_loss(&mut tape, &b, &fw, tau, pl, None)?;
    Ok((tape.scalar_value(l), n))
}

pub fn loss_adversarial_value(
    model: &RedModel,
    x_s: &[f64],
    rows_s: usize,
    x_t: &[f64],
    rows_t: usize,
    mode: DiscMode,
) -> TapeResult<f64> {
    let dim = model.g_c.in_dim();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = step_forwards(&mut tape, &b, x_s, rows_s, x_t, rows_t, dim)?;
    let l = adversarial_loss(&mut tape, &b, &fw, mode, None)?;
    Ok(tape.scalar_value(l))
}

pub fn loss_disentangle_value(
    model: &RedModel,
    x_s: &[f64],
    rows_s: usize,
    y_s: &[usize],
    x_t: &[f64],
    rows_t: usize,
    tau: f64,
    pl: PlSource,
) -> TapeResult<f64> {
    let dim = model.g_c.in_dim();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = step_forwards(&mut tape, &b, x_s, rows_s, x_t, rows_t, dim)?;
    let l = disentangle_loss(&mut tape, &b, &fw, y_s, tau, pl, None)?;
    Ok(tape.scalar_value(l))
}

pub fn loss_trace_value(model: &RedModel, x_t: &[f64], rows_t: usize) -> TapeResult<f64> {
    let dim = model.g_c.in_dim();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = step_forwards(&mut tape, &b, x_t, rows_t, x_t, rows_t, dim)?;
    let tr = trace_soft_inner(&mut tape, &b, &fw)?;
    let l = trace_loss(&mut tape, fw.lambda, tr, None)?;
    Ok(tape.scalar_value(l))
}

pub fn trace_soft_inner_value(model: &RedModel, x_t: &[f64], rows_t: usize) -> TapeResult<f64> {
    let dim = model.g_c.in_dim();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = step_forwards(&mut tape, &b, x_t, rows_t, x_t, rows_t, dim)?;
    let tr = trace_soft_inner(&mut tape, &b, &fw)?;
    Ok(tape.scalar_value(tr))
}
