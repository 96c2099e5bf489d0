//! The model: a shared causal extractor `g_c`, two domain-specific
//! environmental extractors `g_es` / `g_et`, a shared linear classifier `h`,
//! a binary domain discriminator `d`, and a learnable scalar mixing factor
//! `lambda = sigmoid(theta_lambda)`.
//!
//! The fused representation is `z = lambda * g_c(x) + (1 - lambda) * g_e(x)`,
//! with `g_e` selected by the domain of `x`. Test-time predictions on the
//! target domain use the causal path `h(g_c(x))` alone.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{sigmoid_scalar, Result as TapeResult, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("checkpoint parse error at line {line}: {detail}")]
    CheckpointParse { line: usize, detail: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::None => "none",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "none" => Some(Activation::None),
            _ => None,
        }
    }
}

/// One fully connected layer: `y = act(x W + b)`, weights stored `in x out`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Kaiming-style fan-in uniform init, biases zero.
    pub fn new(dims: &[usize], acts: &[Activation], rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(dims.len(), acts.len() + 1, "layer dims must chain");
        let mut layers = Vec::new();
        for (i, &act) in acts.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(Layer {
                w: Tensor::new(vec![fan_in, fan_out], w).unwrap(),
                b: Tensor::zeros(vec![fan_out]),
                act,
            });
        }
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape[1]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.numel() + l.b.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Env {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscMode {
    Plain,
    Conditional,
}

/// Parameter groups named after the update rules they obey.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Gc,
    Ges,
    Get,
    H,
    D,
    Lambda,
}

#[derive(Debug, Clone)]
pub struct RedModel {
    pub g_c: Mlp,
    pub g_es: Mlp,
    pub g_et: Mlp,
    /// Shared classifier: a single linear layer, feat_dim -> C.
    pub h: Mlp,
    pub d: Mlp,
    /// lambda = sigmoid(theta_lambda); starts at exactly 0.5.
    pub theta_lambda: Tensor,
    pub disc_mode: DiscMode,
    pub n_classes: usize,
    pub feat_dim: usize,
}

impl RedModel {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        feat_dim: usize,
        n_classes: usize,
        disc_mode: DiscMode,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext_dims = [input_dim, hidden_dim, hidden_dim, feat_dim];
        let ext_acts = [Activation::Relu, Activation::Relu, Activation::None];
        let g_c = Mlp::new(&ext_dims, &ext_acts, &mut rng);
        let g_es = Mlp::new(&ext_dims, &ext_acts, &mut rng);
        let g_et = Mlp::new(&ext_dims, &ext_acts, &mut rng);
        let h = Mlp::new(&[feat_dim, n_classes], &[Activation::None], &mut rng);
        let disc_in = match disc_mode {
            DiscMode::Plain => feat_dim,
            DiscMode::Conditional => feat_dim * n_classes,
        };
        let d = Mlp::new(
            &[disc_in, hidden_dim, hidden_dim, 1],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        RedModel {
            g_c,
            g_es,
            g_et,
            h,
            d,
            theta_lambda: Tensor::scalar(0.0),
            disc_mode,
            n_classes,
            feat_dim,
        }
    }

    pub fn lambda_value(&self) -> f64 {
        sigmoid_scalar(self.theta_lambda.values[0])
    }

    pub fn env_extractor(&self, env: Env) -> &Mlp {
        match env {
            Env::Source => &self.g_es,
            Env::Target => &self.g_et,
        }
    }

    /// Closed-form parameter count for the configured dimensions.
    pub fn param_count(&self) -> usize {
        self.g_c.param_count()
            + self.g_es.param_count()
            + self.g_et.param_count()
            + self.h.param_count()
            + self.d.param_count()
            + 1
    }

    /// Visit every parameter tensor with its group, in a fixed order.
    pub fn for_each_param(&self, mut f: impl FnMut(ParamGroup, &Tensor)) {
        for (group, mlp) in [
            (ParamGroup::Gc, &self.g_c),
            (ParamGroup::Ges, &self.g_es),
            (ParamGroup::Get, &self.g_et),
            (ParamGroup::H, &self.h),
            (ParamGroup::D, &self.d),
        ] {
            for layer in &mlp.layers {
                f(group, &layer.w);
                f(group, &layer.b);
            }
        }
        f(ParamGroup::Lambda, &self.theta_lambda);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut Tensor)) {
        for (group, mlp) in [
            (ParamGroup::Gc, &mut self.g_c),
            (ParamGroup::Ges, &mut self.g_es),
            (ParamGroup::Get, &mut self.g_et),
            (ParamGroup::H, &mut self.h),
            (ParamGroup::D, &mut self.d),
        ] {
            for layer in &mut mlp.layers {
                f(group, &mut layer.w);
                f(group, &mut layer.b);
            }
        }
        f(ParamGroup::Lambda, &mut self.theta_lambda);
    }

    /// Register all parameters on a tape for one training step.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        let bind_mlp = |tape: &mut Tape, m: &Mlp| MlpBinding {
            layers: m.layers.iter().map(|l| (tape.leaf(&l.w), tape.leaf(&l.b), l.act)).collect(),
        };
        ModelBinding {
            g_c: bind_mlp(tape, &self.g_c),
            g_es: bind_mlp(tape, &self.g_es),
            g_et: bind_mlp(tape, &self.g_et),
            h: bind_mlp(tape, &self.h),
            d: bind_mlp(tape, &self.d),
            theta_lambda: tape.leaf(&self.theta_lambda),
            disc_mode: self.disc_mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpBinding {
    pub layers: Vec<(Var, Var, Activation)>,
}

impl MlpBinding {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> TapeResult<Var> {
        let mut cur = x;
        for (w, b, act) in &self.layers {
            let lin = tape.matmul(cur, *w)?;
            let lin = tape.add_bias(lin, *b)?;
            cur = match act {
                Activation::Relu => tape.relu(lin)?,
                Activation::Sigmoid => tape.sigmoid(lin)?,
                Activation::None => lin,
            };
        }
        Ok(cur)
    }
}

/// Tape handles for all model parameters plus the forward-path helpers.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub g_c: MlpBinding,
    pub g_es: MlpBinding,
    pub g_et: MlpBinding,
    pub h: MlpBinding,
    pub d: MlpBinding,
    pub theta_lambda: Var,
    pub disc_mode: DiscMode,
}

impl ModelBinding {
    pub fn env_binding(&self, env: Env) -> &MlpBinding {
        match env {
            Env::Source => &self.g_es,
            Env::Target => &self.g_et,
        }
    }

    /// `lambda` as a tape scalar (gradient reaches theta_lambda).
    pub fn lambda(&self, tape: &mut Tape) -> TapeResult<Var> {
        tape.sigmoid(self.theta_lambda)
    }

    /// `lambda` with the gradient path to theta_lambda severed.
    pub fn lambda_detached(&self, tape: &mut Tape) -> TapeResult<Var> {
        let sg = tape.stop_gradient(self.theta_lambda)?;
        tape.sigmoid(sg)
    }

    /// `z = lambda * g_c(x) + (1 - lambda) * g_e(x)` from precomputed branch
    /// outputs and a caller-chosen lambda node.
    pub fn fuse_with(&self, tape: &mut Tape, causal: Var, env_feat: Var, lambda: Var) -> TapeResult<Var> {
        let one_minus = {
            let neg = tape.scale(lambda, -1.0)?;
            tape.add_const(neg, 1.0)?
        };
        let a = tape.mul(lambda, causal)?;
        let b = tape.mul(one_minus, env_feat)?;
        tape.add(a, b)
    }

    pub fn fuse(&self, tape: &mut Tape, x: Var, env: Env) -> TapeResult<Var> {
        let causal = self.g_c.forward(tape, x)?;
        let env_feat = self.env_binding(env).forward(tape, x)?;
        let lambda = self.lambda(tape)?;
        self.fuse_with(tape, causal, env_feat, lambda)
    }

    pub fn logits_fused(&self, tape: &mut Tape, x: Var, env: Env) -> TapeResult<Var> {
        let z = self.fuse(tape, x, env)?;
        self.h.forward(tape, z)
    }

    /// Softmax prediction from the fused representation.
    pub fn predict_fused(&self, tape: &mut Tape, x: Var, env: Env) -> TapeResult<Var> {
        let logits = self.logits_fused(tape, x, env)?;
        tape.softmax_rows(logits)
    }

    /// Environmental-only prediction `softmax(h(g_e(x)))`.
    pub fn predict_env(&self, tape: &mut Tape, x: Var, env: Env) -> TapeResult<Var> {
        let feat = self.env_binding(env).forward(tape, x)?;
        let logits = self.h.forward(tape, feat)?;
        tape.softmax_rows(logits)
    }

    /// Causal-only prediction `softmax(h(g_c(x)))`.
    pub fn predict_causal(&self, tape: &mut Tape, x: Var) -> TapeResult<Var> {
        let feat = self.g_c.forward(tape, x)?;
        let logits = self.h.forward(tape, feat)?;
        tape.softmax_rows(logits)
    }

    /// Domain probability from features `z` and (for the conditional mode)
    /// prediction rows `p`. The caller controls gradient stops on `p`.
    pub fn discriminate(&self, tape: &mut Tape, z: Var, p: Var, mode: DiscMode) -> TapeResult<Var> {
        let input = match mode {
            DiscMode::Plain => z,
            DiscMode::Conditional => tape.row_outer_flatten(z, p)?,
        };
        self.d.forward(tape, input)
    }
}

// ---- detached inference helpers -------------------------------------------

impl RedModel {
    fn scratch_eval(
        &self,
        x: &[f64],
        rows: usize,
        f: impl FnOnce(&mut Tape, &ModelBinding, Var) -> TapeResult<Var>,
    ) -> Vec<f64> {
        let dim = self.g_c.in_dim();
        debug_assert_eq!(x.len(), rows * dim);
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let xv = tape.input(vec![rows, dim], x.to_vec()).expect("input shape");
        let out = f(&mut tape, &binding, xv).expect("forward on finite inputs");
        tape.value(out).to_vec()
    }

    /// Fused-feature rows for a batch, detached from any tape.
    pub fn fused_features(&self, x: &[f64], rows: usize, env: Env) -> Vec<f64> {
        self.scratch_eval(x, rows, |tape, b, xv| b.fuse(tape, xv, env))
    }

    pub fn predict_fused_values(&self, x: &[f64], rows: usize, env: Env) -> Vec<f64> {
        self.scratch_eval(x, rows, |tape, b, xv| b.predict_fused(tape, xv, env))
    }

    pub fn predict_env_values(&self, x: &[f64], rows: usize, env: Env) -> Vec<f64> {
        self.scratch_eval(x, rows, |tape, b, xv| b.predict_env(tape, xv, env))
    }

    pub fn predict_causal_values(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.scratch_eval(x, rows, |tape, b, xv| b.predict_causal(tape, xv))
    }
}

// ---- checkpoint io ---------------------------------------------------------
//
// Versioned textual dump. Layout:
//   redlab-checkpoint v1
//   config_hash <16 hex digits>
//   meta <disc_mode> <n_classes> <feat_dim>
//   param <name> <dims..>
//   <one f64 per line, as hex bits>
//   acts <mlp name> <tags..>
// Values round-trip bit-exactly via their IEEE-754 bit patterns.

fn param_entries(model: &RedModel) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    let mlps = [
        ("g_c", &model.g_c),
        ("g_es", &model.g_es),
        ("g_et", &model.g_et),
        ("h", &model.h),
        ("d", &model.d),
    ];
    for (name, mlp) in mlps {
        for (i, layer) in mlp.layers.iter().enumerate() {
            out.push((format!("{name}.{i}.w"), &layer.w));
            out.push((format!("{name}.{i}.b"), &layer.b));
        }
    }
    out.push(("theta_lambda".to_string(), &model.theta_lambda));
    out
}

pub fn save_checkpoint(model: &RedModel, config_hash: u64, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, checkpoint_text(model, config_hash))?;
    Ok(())
}

pub fn checkpoint_text(model: &RedModel, config_hash: u64) -> String {
    let mut s = String::new();
    s.push_str("redlab-checkpoint v1\n");
    let _ = writeln!(s, "config_hash {config_hash:016x}");
    let _ = writeln!(
        s,
        "meta {} {} {}",
        match model.disc_mode {
            DiscMode::Plain => "plain",
            DiscMode::Conditional => "conditional",
        },
        model.n_classes,
        model.feat_dim
    );
    for (name, t) in param_entries(model) {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "param {name} {}", dims.join(" "));
        for v in &t.values {
            let _ = writeln!(s, "{:016x}", v.to_bits());
        }
    }
    for (name, mlp) in [
        ("g_c", &model.g_c),
        ("g_es", &model.g_es),
        ("g_et", &model.g_et),
        ("h", &model.h),
        ("d", &model.d),
    ] {
        let tags: Vec<&str> = mlp.layers.iter().map(|l| l.act.tag()).collect();
        let _ = writeln!(s, "acts {name} {}", tags.join(" "));
    }
    s
}

pub fn load_checkpoint(path: &Path) -> Result<(RedModel, u64), NetError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, detail: &str| NetError::CheckpointParse {
        line: line + 1,
        detail: detail.to_string(),
    };

    let (ln, header) = lines.next().ok_or_else(|| parse_err(0, "empty file"))?;
    if header.trim() != "redlab-checkpoint v1" {
        return Err(parse_err(ln, "bad header"));
    }
    let (ln, hash_line) = lines.next().ok_or_else(|| parse_err(1, "missing config_hash"))?;
    let config_hash = hash_line
        .strip_prefix("config_hash ")
        .and_then(|h| u64::from_str_radix(h.trim(), 16).ok())
        .ok_or_else(|| parse_err(ln, "bad config_hash"))?;
    let (ln, meta_line) = lines.next().ok_or_else(|| parse_err(2, "missing meta"))?;
    let meta: Vec<&str> = meta_line.split_whitespace().collect();
    if meta.len() != 4 || meta[0] != "meta" {
        return Err(parse_err(ln, "bad meta line"));
    }
    let disc_mode = match meta[1] {
        "plain" => DiscMode::Plain,
        "conditional" => DiscMode::Conditional,
        other => return Err(parse_err(ln, &format!("unknown disc mode {other}"))),
    };
    let n_classes: usize = meta[2].parse().map_err(|_| parse_err(ln, "bad n_classes"))?;
    let feat_dim: usize = meta[3].parse().map_err(|_| parse_err(ln, "bad feat_dim"))?;

    let mut params: Vec<(String, Tensor)> = Vec::new();
    let mut acts: Vec<(String, Vec<Activation>)> = Vec::new();
    let mut pending: Option<(String, Vec<usize>, Vec<f64>, usize)> = None;

    let flush = |pending: &mut Option<(String, Vec<usize>, Vec<f64>, usize)>,
                     params: &mut Vec<(String, Tensor)>,
                     ln: usize|
     -> Result<(), NetError> {
        if let Some((name, shape, values, want)) = pending.take() {
            if values.len() != want {
                return Err(NetError::CheckpointParse {
                    line: ln + 1,
                    detail: format!("param {name} expected {want} values, got {}", values.len()),
                });
            }
            params.push((
                name,
                Tensor::new(shape, values).map_err(|e| NetError::CheckpointParse {
                    line: ln + 1,
                    detail: e.to_string(),
                })?,
            ));
        }
        Ok(())
    };

    let mut last_ln = 0;
    for (ln, raw) in lines {
        last_ln = ln;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            flush(&mut pending, &mut params, ln)?;
            let mut it = rest.split_whitespace();
            let name = it.next().ok_or_else(|| parse_err(ln, "param without name"))?.to_string();
            let shape: Vec<usize> = it
                .map(|d| d.parse().map_err(|_| parse_err(ln, "bad dim")))
                .collect::<Result<_, _>>()?;
            let want = shape.iter().product();
            pending = Some((name, shape, Vec::with_capacity(want), want));
        } else if let Some(rest) = line.strip_prefix("acts ") {
            flush(&mut pending, &mut params, ln)?;
            let mut it = rest.split_whitespace();
            let name = it.next().ok_or_else(|| parse_err(ln, "acts without name"))?.to_string();
            let tags: Vec<Activation> = it
                .map(|t| Activation::from_tag(t).ok_or_else(|| parse_err(ln, "bad activation tag")))
                .collect::<Result<_, _>>()?;
            acts.push((name, tags));
        } else {
            let (_, _, values, _) = pending
                .as_mut()
                .ok_or_else(|| parse_err(ln, "value outside of param block"))?;
            let bits = u64::from_str_radix(line, 16).map_err(|_| parse_err(ln, "bad value"))?;
            values.push(f64::from_bits(bits));
        }
    }
    flush(&mut pending, &mut params, last_ln)?;

    let take_mlp = |name: &str| -> Result<Mlp, NetError> {
        let tags = acts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| NetError::CheckpointMismatch(format!("missing acts for {name}")))?;
        let mut layers = Vec::new();
        for (i, act) in tags.iter().enumerate() {
            let w = params
                .iter()
                .find(|(n, _)| n == &format!("{name}.{i}.w"))
                .map(|(_, t)| t.clone())
                .ok_or_else(|| NetError::CheckpointMismatch(format!("missing {name}.{i}.w")))?;
            let b = params
                .iter()
                .find(|(n, _)| n == &format!("{name}.{i}.b"))
                .map(|(_, t)| t.clone())
                .ok_or_else(|| NetError::CheckpointMismatch(format!("missing {name}.{i}.b")))?;
            layers.push(Layer { w, b, act: *act });
        }
        Ok(Mlp { layers })
    };

    let theta = params
        .iter()
        .find(|(n, _)| n == "theta_lambda")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| NetError::CheckpointMismatch("missing theta_lambda".into()))?;

    Ok((
        RedModel {
            g_c: take_mlp("g_c")?,
            g_es: take_mlp("g_es")?,
            g_et: take_mlp("g_et")?,
            h: take_mlp("h")?,
            d: take_mlp("d")?,
            theta_lambda: theta,
            disc_mode,
            n_classes,
            feat_dim,
        },
        config_hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn small_model(seed: u64) -> RedModel {
        RedModel::new(6, 8, 4, 3, DiscMode::Conditional, seed)
    }

    fn batch(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn lambda_initializes_to_exactly_half() {
        let m = small_model(0);
        assert_eq!(m.lambda_value(), 0.5);
    }

    #[test]
    fn fuse_at_theta_zero_is_equal_mix() {
        let m = small_model(0);
        let x = batch(2, 6, 1);
        let fused = m.fused_features(&x, 2, Env::Source);

        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let xv = tape.input(vec![2, 6], x.clone()).unwrap();
        let causal = b.g_c.forward(&mut tape, xv).unwrap();
        let env = b.g_es.forward(&mut tape, xv).unwrap();
        let half_sum: Vec<f64> = tape
            .value(causal)
            .iter()
            .zip(tape.value(env))
            .map(|(a, e)| 0.5 * a + 0.5 * e)
            .collect();
        for (f, e) in fused.iter().zip(&half_sum) {
            assert!((f - e).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_saturates_to_causal_for_large_theta() {
        let mut m = small_model(0);
        m.theta_lambda.values[0] = 40.0;
        let x = batch(2, 6, 2);
        let fused = m.fused_features(&x, 2, Env::Target);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let xv = tape.input(vec![2, 6], x).unwrap();
        let causal = b.g_c.forward(&mut tape, xv).unwrap();
        for (f, c) in fused.iter().zip(tape.value(causal)) {
            assert!((f - c).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_with_identical_extractors_is_lambda_free() {
        let mut m = small_model(3);
        m.g_es = m.g_c.clone();
        for theta in [-2.0, 0.0, 1.7] {
            m.theta_lambda.values[0] = theta;
            let x = batch(3, 6, 4);
            let fused = m.fused_features(&x, 3, Env::Source);
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let xv = tape.input(vec![3, 6], x).unwrap();
            let causal = b.g_c.forward(&mut tape, xv).unwrap();
            for (f, c) in fused.iter().zip(tape.value(causal)) {
                assert!((f - c).abs() < 1e-12, "theta {theta}");
            }
        }
    }

    #[test]
    fn zero_weight_classifier_gives_uniform_rows() {
        let mut m = small_model(5);
        for l in &mut m.h.layers {
            l.w.values.iter_mut().for_each(|v| *v = 0.0);
            l.b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = batch(4, 6, 6);
        for p in m.predict_fused_values(&x, 4, Env::Source) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        for p in m.predict_env_values(&x, 4, Env::Target) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prediction_rows_are_simplex_rows() {
        let m = small_model(7);
        let x = batch(5, 6, 8);
        for probs in [
            m.predict_fused_values(&x, 5, Env::Source),
            m.predict_env_values(&x, 5, Env::Source),
            m.predict_causal_values(&x, 5),
        ] {
            for r in 0..5 {
                let row = &probs[r * 3..(r + 1) * 3];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }
    }

    #[test]
    fn fused_logits_are_linear_mix_of_path_logits_with_zero_bias() {
        let mut m = small_model(9);
        m.h.layers[0].b.values.iter_mut().for_each(|v| *v = 0.0);
        m.theta_lambda.values[0] = 0.73;
        let lam = m.lambda_value();
        let x = batch(3, 6, 10);

        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let xv = tape.input(vec![3, 6], x).unwrap();
        let fused_logits = b.logits_fused(&mut tape, xv, Env::Target).unwrap();
        let causal = b.g_c.forward(&mut tape, xv).unwrap();
        let causal_logits = b.h.forward(&mut tape, causal).unwrap();
        let envf = b.g_et.forward(&mut tape, xv).unwrap();
        let env_logits = b.h.forward(&mut tape, envf).unwrap();

        for i in 0..tape.value(fused_logits).len() {
            let mix = lam * tape.value(causal_logits)[i] + (1.0 - lam) * tape.value(env_logits)[i];
            assert!((tape.value(fused_logits)[i] - mix).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_causal_equals_predict_env_with_shared_weights() {
        let mut m = small_model(11);
        m.g_es = m.g_c.clone();
        let x = batch(4, 6, 12);
        let a = m.predict_causal_values(&x, 4);
        let b = m.predict_env_values(&x, 4, Env::Source);
        assert_eq!(a, b);
    }

    #[test]
    fn env_and_fused_predictions_differ_for_generic_weights() {
        let m = small_model(13);
        let x = batch(6, 6, 14);
        let fused = m.predict_fused_values(&x, 6, Env::Source);
        let env = m.predict_env_values(&x, 6, Env::Source);
        let causal = m.predict_causal_values(&x, 6);
        assert!(fused.iter().zip(&env).any(|(a, b)| (a - b).abs() > 1e-9));
        assert!(env.iter().zip(&causal).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn discriminator_zero_weights_give_half() {
        let mut m = small_model(15);
        for l in &mut m.d.layers {
            l.w.values.iter_mut().for_each(|v| *v = 0.0);
            l.b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = batch(3, 6, 16);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let xv = tape.input(vec![3, 6], x).unwrap();
        let z = b.fuse(&mut tape, xv, Env::Source).unwrap();
        let p = b.predict_fused(&mut tape, xv, Env::Source).unwrap();
        let out = b.discriminate(&mut tape, z, p, DiscMode::Conditional).unwrap();
        for v in tape.value(out) {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn conditional_input_dimension_is_feat_times_classes() {
        let m = small_model(17);
        assert_eq!(m.d.in_dim(), 4 * 3);
        let mp = RedModel::new(6, 8, 4, 3, DiscMode::Plain, 17);
        assert_eq!(mp.d.in_dim(), 4);
    }

    #[test]
    fn wrong_disc_input_is_dimension_error_and_conditioning_matters() {
        let m = small_model(19);
        let x = batch(4, 6, 20);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let xv = tape.input(vec![4, 6], x).unwrap();
        let z = b.fuse(&mut tape, xv, Env::Source).unwrap();
        let p = b.predict_fused(&mut tape, xv, Env::Source).unwrap();
        let cond = b.discriminate(&mut tape, z, p, DiscMode::Conditional).unwrap();
        match b.discriminate(&mut tape, z, p, DiscMode::Plain) {
            Err(crate::autodiff::TapeError::Dimension { .. }) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
        let uniform_p = tape.input(vec![4, 3], vec![1.0 / 3.0; 12]).unwrap();
        let cond_uniform = b.discriminate(&mut tape, z, uniform_p, DiscMode::Conditional).unwrap();
        assert!(tape
            .value(cond)
            .iter()
            .zip(tape.value(cond_uniform))
            .any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let (input, hidden, feat, c) = (6, 8, 4, 3);
        let m = small_model(21);
        let ext = input * hidden + hidden + hidden * hidden + hidden + hidden * feat + feat;
        let h = feat * c + c;
        let disc_in = feat * c;
        let d = disc_in * hidden + hidden + hidden * hidden + hidden + hidden + 1;
        assert_eq!(m.param_count(), 3 * ext + h + d + 1);

        let mut n = 0;
        m.for_each_param(|_, t| n += t.numel());
        assert_eq!(n, m.param_count());
    }

    #[test]
    fn predict_fused_matches_scalar_recomputation() {
        // Independent scalar-loop forward pass over the seed-0 weights.
        let m = small_model(0);
        let x = batch(2, 6, 23);
        let got = m.predict_fused_values(&x, 2, Env::Source);

        let mlp_forward = |mlp: &Mlp, input: &[f64]| -> Vec<f64> {
            let mut cur = input.to_vec();
            for layer in &mlp.layers {
                let (fi, fo) = (layer.w.shape[0], layer.w.shape[1]);
                let mut next = vec![0.0; fo];
                for o in 0..fo {
                    let mut acc = layer.b.values[o];
                    for i in 0..fi {
                        acc += cur[i] * layer.w.values[i * fo + o];
                    }
                    next[o] = match layer.act {
                        Activation::Relu => acc.max(0.0),
                        Activation::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
                        Activation::None => acc,
                    };
                }
                cur = next;
            }
            cur
        };

        let lam = m.lambda_value();
        for r in 0..2 {
            let row = &x[r * 6..(r + 1) * 6];
            let zc = mlp_forward(&m.g_c, row);
            let ze = mlp_forward(&m.g_es, row);
            let z: Vec<f64> = zc.iter().zip(&ze).map(|(c, e)| lam * c + (1.0 - lam) * e).collect();
            let logits = mlp_forward(&m.h, &z);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..3 {
                assert!((got[r * 3 + c] - exps[c] / denom).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = std::env::temp_dir().join(format!("redlab-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut m = small_model(33);
        m.theta_lambda.values[0] = 0.12345678901234567;
        save_checkpoint(&m, 0xdeadbeef, &path).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, 0xdeadbeef);
        let mut orig_params = Vec::new();
        m.for_each_param(|_, t| orig_params.push(t.values.clone()));
        let mut loaded_params = Vec::new();
        loaded.for_each_param(|_, t| loaded_params.push(t.values.clone()));
        assert_eq!(orig_params, loaded_params);
        std::fs::remove_dir_all(&dir).ok();
    }
}
