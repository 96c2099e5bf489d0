//! Exact enumerative verification of the deterministic error-bound chain on
//! finite instances.
//!
//! An instance is a finite input space `X` (at most 10 points) with two
//! probability weightings (source and target), binary labelings `hc`, `hes`,
//! `het` (the causal and the two environmental labelings through a shared
//! classifier), a mixing factor `lambda`, and a hypothesis `f: X -> [0,1]`.
//! The domain labeling functions are the mixtures
//! `f_S = lambda*hc + (1-lambda)*hes` and `f_T = lambda*hc + (1-lambda)*het`.
//!
//! The verifier computes every term of
//!
//! ```text
//! eps_T(f) <= eps_S(f, f_S) + d_Htilde(S, T) + (1 - lambda)(1 - tr(M))
//! ```
//!
//! exactly, together with each intermediate inequality of its derivation
//! (the triangle step, the divergence step, and the identity
//! `eps_T(f_S, f_T) = (1 - lambda)(1 - tr(M))`).
//!
//! Convention: members of the comparison class are {0,1}-valued indicators
//! and `d_Htilde` is the supremum of absolute mean differences over the
//! indicators `1[|f - f'| >= v]` generated by member pairs and their
//! effective thresholds. The bound is checked with coefficient 1 on
//! `d_Htilde`; the halved-coefficient variant is reported alongside.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::TransitionMatrix;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("size error: {0}")]
    Size(String),
    #[error("argument error: {0}")]
    Argument(String),
}

pub const IDENTITY_TOL: f64 = 1e-12;
pub const CHAIN_TOL: f64 = 1e-12;

/// Binary function on up to 16 points, one bit per point.
pub type Mask = u16;

pub fn mask_value(mask: Mask, i: usize) -> f64 {
    ((mask >> i) & 1) as f64
}

#[derive(Debug, Clone)]
pub struct FiniteInstance {
    pub n: usize,
    pub w_s: Vec<f64>,
    pub w_t: Vec<f64>,
    pub hc: Mask,
    pub hes: Mask,
    pub het: Mask,
    pub lambda: f64,
    /// Hypothesis under test, values in [0,1].
    pub f: Vec<f64>,
}

impl FiniteInstance {
    pub fn validate(&self) -> Result<(), BoundError> {
        if self.n == 0 || self.n > 10 {
            return Err(BoundError::Size(format!("|X| = {} outside 1..=10", self.n)));
        }
        for (name, w) in [("w_s", &self.w_s), ("w_t", &self.w_t)] {
            if w.len() != self.n {
                return Err(BoundError::Argument(format!("{name} length {} != n {}", w.len(), self.n)));
            }
            if w.iter().any(|v| *v < 0.0) {
                return Err(BoundError::Argument(format!("{name} has negative weight")));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(BoundError::Argument(format!("{name} sums to {total}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(BoundError::Argument(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.f.len() != self.n || self.f.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(BoundError::Argument("f must map X into [0,1]".into()));
        }
        Ok(())
    }
}

/// `eps_D(f, c) = sum_x w(x) * |f(x) - c(x)|`.
pub fn hypothesis_error(f: &[f64], c: &[f64], weights: &[f64]) -> f64 {
    f.iter().zip(c).zip(weights).map(|((a, b), w)| w * (a - b).abs()).sum()
}

/// The two domain labeling functions as dense value vectors.
pub fn labeling_functions(inst: &FiniteInstance) -> (Vec<f64>, Vec<f64>) {
    let lam = inst.lambda;
    let f_s = (0..inst.n)
        .map(|i| lam * mask_value(inst.hc, i) + (1.0 - lam) * mask_value(inst.hes, i))
        .collect();
    let f_t = (0..inst.n)
        .map(|i| lam * mask_value(inst.hc, i) + (1.0 - lam) * mask_value(inst.het, i))
        .collect();
    (f_s, f_t)
}

/// Exact 2x2 transition matrix of the binary environmental labelings under
/// the target weights: `m[i][j] = sum_x w_t(x) 1[hes(x)=i] 1[het(x)=j]`.
pub fn exact_transition(inst: &FiniteInstance) -> TransitionMatrix {
    let mut m = vec![0.0; 4];
    for i in 0..inst.n {
        let a = ((inst.hes >> i) & 1) as usize;
        let b = ((inst.het >> i) & 1) as usize;
        m[a * 2 + b] += inst.w_t[i];
    }
    TransitionMatrix { m, c: 2, count: inst.n }
}

/// Residual of the identity `eps_T(f_S, f_T) = (1 - lambda)(1 - tr(M))`.
pub fn disagreement_identity_check(inst: &FiniteInstance) -> f64 {
    let (f_s, f_t) = labeling_functions(inst);
    let eps = hypothesis_error(&f_s, &f_t, &inst.w_t);
    let tr = exact_transition(inst).trace();
    (eps - (1.0 - inst.lambda) * (1.0 - tr)).abs()
}

#[derive(Debug, Clone)]
pub enum HypothesisClass {
    /// All 2^n binary functions on X (n <= 8).
    Exhaustive(usize),
    /// An explicit subset of binary functions.
    Members(usize, Vec<Mask>),
}

impl HypothesisClass {
    pub fn n(&self) -> usize {
        match self {
            HypothesisClass::Exhaustive(n) => *n,
            HypothesisClass::Members(n, _) => *n,
        }
    }

    pub fn contains(&self, mask: Mask) -> bool {
        match self {
            HypothesisClass::Exhaustive(n) => (mask as u32) < (1u32 << n),
            HypothesisClass::Members(_, members) => members.contains(&mask),
        }
    }

    /// Is a [0,1]-valued function a member (i.e. binary and contained)?
    pub fn contains_fn(&self, values: &[f64]) -> bool {
        let mut mask: Mask = 0;
        for (i, v) in values.iter().enumerate() {
            if *v == 1.0 {
                mask |= 1 << i;
            } else if *v != 0.0 {
                return false;
            }
        }
        self.contains(mask)
    }
}

fn expectation_table(weights: &[f64], n: usize) -> Vec<f64> {
    let mut table = vec![0.0; 1 << n];
    for mask in 1usize..(1 << n) {
        let low = mask.trailing_zeros() as usize;
        table[mask] = table[mask & (mask - 1)] + weights[low];
    }
    table
}

/// Supremum over member pairs (f, f') and effective thresholds of
/// `|E_s[g] - E_t[g]|` with `g = 1[|f - f'| >= v]`. For binary members the
/// indicators are exactly the XOR masks plus the constant zero.
pub fn h_tilde_divergence(w_s: &[f64], w_t: &[f64], class: &HypothesisClass) -> Result<f64, BoundError> {
    let n = class.n();
    if w_s.len() != n || w_t.len() != n {
        return Err(BoundError::Argument(format!(
            "weights of length {}/{} for n = {n}",
            w_s.len(),
            w_t.len()
        )));
    }
    let es = expectation_table(w_s, n);
    let et = expectation_table(w_t, n);
    let mut sup: f64 = 0.0;
    match class {
        HypothesisClass::Exhaustive(n) => {
            if *n > 8 {
                return Err(BoundError::Size(format!("exhaustive class needs n <= 8, got {n}")));
            }
            let total = 1usize << n;
            for a in 0..total {
                for b in 0..total {
                    let g = a ^ b;
                    sup = sup.max((es[g] - et[g]).abs());
                }
            }
        }
        HypothesisClass::Members(_, members) => {
            for &a in members {
                for &b in members {
                    let g = (a ^ b) as usize;
                    sup = sup.max((es[g] - et[g]).abs());
                }
            }
        }
    }
    Ok(sup)
}

/// Full verification record for one instance.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub eps_t_f: f64,
    pub eps_s_f_fs: f64,
    pub d_htilde: f64,
    pub disagreement_term: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub slack: f64,
    /// Slack of the halved-divergence variant (reported, not asserted).
    pub slack_half_divergence: f64,
    pub identity_residual: f64,
    pub triangle_ok: bool,
    pub lemma_ok: bool,
    /// True when both `f` and `f_S` are members of the supplied class, as the
    /// divergence step formally requires. Violations are flagged, not fatal.
    pub contract_ok: bool,
}

pub fn verify_bound_chain(inst: &FiniteInstance, class: &HypothesisClass) -> Result<BoundReport, BoundError> {
    inst.validate()?;
    if class.n() != inst.n {
        return Err(BoundError::Argument(format!(
            "class over {} points, instance over {}",
            class.n(),
            inst.n
        )));
    }
    let (f_s, f_t) = labeling_functions(inst);
    let eps_t_f = hypothesis_error(&inst.f, &f_t, &inst.w_t);
    let eps_t_f_fs = hypothesis_error(&inst.f, &f_s, &inst.w_t);
    let eps_s_f_fs = hypothesis_error(&inst.f, &f_s, &inst.w_s);
    let eps_t_fs_ft = hypothesis_error(&f_s, &f_t, &inst.w_t);
    let d_htilde = h_tilde_divergence(&inst.w_s, &inst.w_t, class)?;
    let tr = exact_transition(inst).trace();
    let disagreement_term = (1.0 - inst.lambda) * (1.0 - tr);

    let identity_residual = (eps_t_fs_ft - disagreement_term).abs();
    let triangle_ok = eps_t_f <= eps_t_f_fs + eps_t_fs_ft + CHAIN_TOL;
    let lemma_ok = (eps_t_f_fs - eps_s_f_fs).abs() <= d_htilde + CHAIN_TOL;

    let lhs = eps_t_f;
    let rhs = eps_s_f_fs + d_htilde + disagreement_term;
    let rhs_half = eps_s_f_fs + 0.5 * d_htilde + disagreement_term;
    Ok(BoundReport {
        eps_t_f,
        eps_s_f_fs,
        d_htilde,
        disagreement_term,
        lhs,
        rhs,
        holds: lhs <= rhs + CHAIN_TOL,
        slack: rhs - lhs,
        slack_half_divergence: rhs_half - lhs,
        identity_residual,
        triangle_ok,
        lemma_ok,
        contract_ok: class.contains_fn(&inst.f) && class.contains_fn(&f_s),
    })
}

/// Random instance over `n` points. Half the draws use a binary hypothesis,
/// and boundary mixing factors appear with small probability so the
/// contract-satisfying corner is exercised.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> FiniteInstance {
    let weights = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Renormalize the last entry so the sum is exactly 1 - eps-free.
        let head: f64 = w[..n - 1].iter().sum();
        w[n - 1] = 1.0 - head;
        w
    };
    let mask = |rng: &mut ChaCha8Rng| -> Mask { (rng.random_range(0..(1u32 << n)) as Mask) & ((1 << n) - 1) };
    let lambda = match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random_range(0.0..1.0),
    };
    let f = if rng.random_bool(0.5) {
        let m = mask(rng);
        (0..n).map(|i| mask_value(m, i)).collect()
    } else {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    };
    FiniteInstance {
        n,
        w_s: weights(rng),
        w_t: weights(rng),
        hc: mask(rng),
        hes: mask(rng),
        het: mask(rng),
        lambda,
        f,
    }
}

#[derive(Debug, Clone)]
pub struct CampaignSummary {
    pub instances: usize,
    pub holds: usize,
    pub min_slack: f64,
    pub max_identity_residual: f64,
    pub contract_satisfying: usize,
}

/// Runs `count` random instances with sizes in `2..=max_n` under exhaustive
/// hypothesis classes. Returns every report plus the summary line inputs.
pub fn run_campaign(
    count: usize,
    max_n: usize,
    seed: u64,
) -> Result<(Vec<(FiniteInstance, BoundReport)>, CampaignSummary), BoundError> {
    if max_n > 8 {
        return Err(BoundError::Size(format!("max_n {max_n} > 8 (exhaustive class)")));
    }
    if max_n < 2 {
        return Err(BoundError::Argument(format!("max_n {max_n} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut summary = CampaignSummary {
        instances: count,
        holds: 0,
        min_slack: f64::INFINITY,
        max_identity_residual: 0.0,
        contract_satisfying: 0,
    };
    for _ in 0..count {
        let n = rng.random_range(2..=max_n);
        let inst = random_instance(&mut rng, n);
        let report = verify_bound_chain(&inst, &HypothesisClass::Exhaustive(n))?;
        if report.holds {
            summary.holds += 1;
        }
        if report.contract_ok {
            summary.contract_satisfying += 1;
        }
        summary.min_slack = summary.min_slack.min(report.slack);
        summary.max_identity_residual = summary.max_identity_residual.max(report.identity_residual);
        out.push((inst, report));
    }
    if count == 0 {
        summary.min_slack = 0.0;
    }
    Ok((out, summary))
}
