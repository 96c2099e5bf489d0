//! Two-domain synthetic classification data with a known causal/environmental
//! split.
//!
//! Each sample is `[causal | environmental | noise]`. The causal block is
//! drawn around a per-class mean shared by both domains. The environmental
//! block is drawn around a per-class mean chosen by the *domain's*
//! class-association: the source associates class `k` with mean `k`, the
//! target with mean `pi(k)`, each holding with probability `rho` (otherwise a
//! uniformly random other mean is used). The noise block carries no class
//! information. Because the generative model is explicit, the Bayes-optimal
//! environmental labelings under either association are computable, and with
//! them the ground-truth transition matrix.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::losses::TransitionMatrix;
use crate::nets::Env;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid field {field}: {detail}")]
    InvalidField { field: &'static str, detail: String },
    #[error("parse error in {file} line {line}: {detail}")]
    Parse { file: String, line: usize, detail: String },
    #[error("missing label sidecar: {0}")]
    MissingSidecar(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io { path: path.display().to_string(), source }
}

/// Stable tag-based seed derivation (FNV-1a over the tag, mixed with base).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ base.wrapping_mul(0x9e3779b97f4a7c15)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub d_c: usize,
    pub d_e: usize,
    pub d_n: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub rho_s: f64,
    pub rho_t: f64,
    /// Permutation mapping source environmental associations to target ones.
    pub pi: Vec<usize>,
    pub sigma: f64,
    pub mu_scale: f64,
    pub seed: u64,
}

pub fn cyclic_permutation(c: usize) -> Vec<usize> {
    (0..c).map(|k| (k + 1) % c).collect()
}

pub fn identity_permutation(c: usize) -> Vec<usize> {
    (0..c).collect()
}

impl SynthSpec {
    /// The default benchmark: four classes, a cyclic association shift,
    /// strong in-association rates.
    pub fn default_benchmark() -> Self {
        SynthSpec {
            n_classes: 4,
            d_c: 4,
            d_e: 4,
            d_n: 8,
            n_s: 600,
            n_t: 600,
            rho_s: 0.9,
            rho_t: 0.9,
            pi: cyclic_permutation(4),
            sigma: 0.5,
            mu_scale: 2.0,
            seed: 7,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d_c + self.d_e + self.d_n
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let field = |field: &'static str, detail: String| Err(SynthError::InvalidField { field, detail });
        if self.n_classes < 2 {
            return field("n_classes", format!("need >= 2, got {}", self.n_classes));
        }
        if self.d_c == 0 {
            return field("d_c", "causal dimension must be >= 1".into());
        }
        if self.n_s == 0 || self.n_t == 0 {
            return field("n_s", "both domains need samples".into());
        }
        for (name, rho) in [("rho_s", self.rho_s), ("rho_t", self.rho_t)] {
            if !(0.0..=1.0).contains(&rho) {
                return field(if name == "rho_s" { "rho_s" } else { "rho_t" }, format!("{rho} outside [0,1]"));
            }
        }
        if self.pi.len() != self.n_classes {
            return field("pi", format!("length {} != n_classes {}", self.pi.len(), self.n_classes));
        }
        let mut seen = vec![false; self.n_classes];
        for &p in &self.pi {
            if p >= self.n_classes || seen[p] {
                return field("pi", format!("{:?} is not a bijection on 0..{}", self.pi, self.n_classes));
            }
            seen[p] = true;
        }
        if self.sigma <= 0.0 {
            return field("sigma", format!("{} must be positive", self.sigma));
        }
        if self.mu_scale < 0.0 {
            return field("mu_scale", format!("{} must be non-negative", self.mu_scale));
        }
        Ok(())
    }
}

/// One domain's samples. Target labels are quarantined at the file level
/// (separate sidecar) and at the API level (training consumes features only).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: Env,
    pub dim: usize,
    /// Row-major n x dim features.
    pub x: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

/// Ground-truth generative quantities, for oracle computations only.
#[derive(Debug, Clone)]
pub struct OracleInfo {
    pub mu_c: Vec<Vec<f64>>,
    pub mu_e: Vec<Vec<f64>>,
    pub pi: Vec<usize>,
    pub rho_s: f64,
    pub rho_t: f64,
    pub sigma: f64,
}

/// Per-class mean table: seeded Gaussian directions, orthonormalized when the
/// dimension allows it, scaled by `mu_scale`.
fn mean_table(rng: &mut ChaCha8Rng, c: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    if dim >= c {
        // Gram-Schmidt for exactly equidistant cluster centers.
        for i in 0..c {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let rj = rows[j].clone();
                for (v, w) in rows[i].iter_mut().zip(&rj) {
                    *v -= dot * w;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
    } else {
        for row in rows.iter_mut() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    for row in rows.iter_mut() {
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    rows
}

fn oracle_tables(spec: &SynthSpec) -> OracleInfo {
    let mut rng_c = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "means-causal"));
    let mut rng_e = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "means-env"));
    OracleInfo {
        mu_c: mean_table(&mut rng_c, spec.n_classes, spec.d_c, spec.mu_scale),
        mu_e: mean_table(&mut rng_e, spec.n_classes, spec.d_e, spec.mu_scale),
        pi: spec.pi.clone(),
        rho_s: spec.rho_s,
        rho_t: spec.rho_t,
        sigma: spec.sigma,
    }
}

fn generate_domain(spec: &SynthSpec, oracle: &OracleInfo, domain: Env) -> DomainDataset {
    let (n, rho, tag) = match domain {
        Env::Source => (spec.n_s, spec.rho_s, "samples-source"),
        Env::Target => (spec.n_t, spec.rho_t, "samples-target"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, tag));
    let c = spec.n_classes;
    let dim = spec.input_dim();
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Round-robin classes: balanced within +-1.
        let k = i % c;
        labels.push(k);
        let assoc = match domain {
            Env::Source => k,
            Env::Target => spec.pi[k],
        };
        let env_mean = if rng.random_range(0.0..1.0) < rho {
            assoc
        } else {
            // Uniform over the other classes' means.
            let mut j = rng.random_range(0..c - 1);
            if j >= assoc {
                j += 1;
            }
            j
        };
        for d in 0..spec.d_c {
            let eps: f64 = rng.sample(StandardNormal);
            x.push(oracle.mu_c[k][d] + spec.sigma * eps);
        }
        for d in 0..spec.d_e {
            let eps: f64 = rng.sample(StandardNormal);
            x.push(oracle.mu_e[env_mean][d] + spec.sigma * eps);
        }
        for _ in 0..spec.d_n {
            let eps: f64 = rng.sample(StandardNormal);
            x.push(spec.sigma * eps);
        }
    }
    DomainDataset { domain, dim, x, labels: Some(labels) }
}

/// Generates both domains. A pure function of the spec (seed included).
pub fn generate(spec: &SynthSpec) -> Result<(DomainDataset, DomainDataset, OracleInfo), SynthError> {
    spec.validate()?;
    let oracle = oracle_tables(spec);
    let source = generate_domain(spec, &oracle, Env::Source);
    let target = generate_domain(spec, &oracle, Env::Target);
    Ok((source, target, oracle))
}

/// Log-density (up to a shared constant) of the environmental mixture for a
/// class whose in-association mean is `assoc`:
/// `rho * N(e; mu[assoc]) + (1 - rho)/(C-1) * sum_{j != assoc} N(e; mu[j])`.
fn env_class_log_density(e: &[f64], mu_e: &[Vec<f64>], assoc: usize, rho: f64, sigma: f64) -> f64 {
    let c = mu_e.len();
    let log_comp = |mean: &[f64]| -> f64 {
        let d2: f64 = e.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        -d2 / (2.0 * sigma * sigma)
    };
    let mut terms = Vec::with_capacity(c);
    if rho > 0.0 {
        terms.push(rho.ln() + log_comp(&mu_e[assoc]));
    }
    if rho < 1.0 && c > 1 {
        let w = ((1.0 - rho) / (c - 1) as f64).ln();
        for (j, mean) in mu_e.iter().enumerate() {
            if j != assoc {
                terms.push(w + log_comp(mean));
            }
        }
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// Bayes-optimal class under an association map, given an environmental block.
pub fn bayes_env_label(e: &[f64], oracle: &OracleInfo, assoc_of: impl Fn(usize) -> usize, rho: f64) -> usize {
    let c = oracle.mu_e.len();
    let mut best = 0;
    let mut best_ld = f64::NEG_INFINITY;
    for k in 0..c {
        let ld = env_class_log_density(e, &oracle.mu_e, assoc_of(k), rho, oracle.sigma);
        if ld > best_ld {
            best_ld = ld;
            best = k;
        }
    }
    best
}

/// Monte Carlo estimate of the ground-truth transition matrix: the joint
/// distribution of (source-association Bayes label, target-association Bayes
/// label) over target-domain environmental draws.
pub fn oracle_transition(spec: &SynthSpec, n_mc: usize) -> Result<TransitionMatrix, SynthError> {
    spec.validate()?;
    if n_mc < 10_000 {
        return Err(SynthError::Argument(format!("n_mc {n_mc} < 10000")));
    }
    let oracle = oracle_tables(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "oracle-mc"));
    let c = spec.n_classes;
    let mut m = vec![0.0; c * c];
    let mut e = vec![0.0; spec.d_e];
    for i in 0..n_mc {
        let k = i % c;
        let assoc = spec.pi[k];
        let env_mean = if rng.random_range(0.0..1.0) < spec.rho_t {
            assoc
        } else {
            let mut j = rng.random_range(0..c - 1);
            if j >= assoc {
                j += 1;
            }
            j
        };
        for (d, slot) in e.iter_mut().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            *slot = oracle.mu_e[env_mean][d] + spec.sigma * eps;
        }
        let i_label = bayes_env_label(&e, &oracle, |k| k, spec.rho_s);
        let j_label = bayes_env_label(&e, &oracle, |k| spec.pi[k], spec.rho_t);
        m[i_label * c + j_label] += 1.0;
    }
    for v in m.iter_mut() {
        *v /= n_mc as f64;
    }
    Ok(TransitionMatrix { m, c, count: n_mc })
}

// ---- file io ----------------------------------------------------------------
//
// Features: `<name>.csv` with header `domain,f0..f{D-1}`.
// Labels:   `<name>.labels.csv` sidecar with header `index,label`.
// Floats use 9 significant digits; loading re-parses exactly what was printed.

pub fn fmt_float9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn save_dataset(ds: &DomainDataset, dir: &Path, name: &str) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut s = String::new();
    s.push_str("domain");
    for d in 0..ds.dim {
        let _ = write!(s, ",f{d}");
    }
    s.push('\n');
    let tag = match ds.domain {
        Env::Source => "source",
        Env::Target => "target",
    };
    for i in 0..ds.len() {
        s.push_str(tag);
        for v in ds.row(i) {
            s.push(',');
            s.push_str(&fmt_float9(*v));
        }
        s.push('\n');
    }
    let feat_path = dir.join(format!("{name}.csv"));
    std::fs::write(&feat_path, s).map_err(|e| io_err(&feat_path, e))?;

    if let Some(labels) = &ds.labels {
        let mut ls = String::from("index,label\n");
        for (i, l) in labels.iter().enumerate() {
            let _ = writeln!(ls, "{i},{l}");
        }
        let label_path = dir.join(format!("{name}.labels.csv"));
        std::fs::write(&label_path, ls).map_err(|e| io_err(&label_path, e))?;
    }
    Ok(())
}

/// Loads features only: the label sidecar is deliberately not read here.
pub fn load_dataset(dir: &Path, name: &str) -> Result<DomainDataset, SynthError> {
    let path = dir.join(format!("{name}.csv"));
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let fname = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| SynthError::Parse {
        file: fname.clone(),
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"domain") || cols.len() < 2 {
        return Err(SynthError::Parse { file: fname, line: 1, detail: "bad header".into() });
    }
    let dim = cols.len() - 1;
    for (d, col) in cols[1..].iter().enumerate() {
        if *col != format!("f{d}") {
            return Err(SynthError::Parse {
                file: fname,
                line: 1,
                detail: format!("expected column f{d}, got {col}"),
            });
        }
    }
    let mut x = Vec::new();
    let mut domain = None;
    for (ln, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != dim + 1 {
            return Err(SynthError::Parse {
                file: fname,
                line: ln + 1,
                detail: format!("expected {} fields, got {}", dim + 1, parts.len()),
            });
        }
        let row_domain = match parts[0] {
            "source" => Env::Source,
            "target" => Env::Target,
            other => {
                return Err(SynthError::Parse {
                    file: fname,
                    line: ln + 1,
                    detail: format!("unknown domain {other}"),
                })
            }
        };
        match domain {
            None => domain = Some(row_domain),
            Some(d) if d != row_domain => {
                return Err(SynthError::Parse {
                    file: fname,
                    line: ln + 1,
                    detail: "mixed domains in one file".into(),
                })
            }
            _ => {}
        }
        for p in &parts[1..] {
            let v: f64 = p.parse().map_err(|_| SynthError::Parse {
                file: fname.clone(),
                line: ln + 1,
                detail: format!("bad float {p}"),
            })?;
            x.push(v);
        }
    }
    let domain = domain.ok_or_else(|| SynthError::Parse {
        file: fname,
        line: 2,
        detail: "no data rows".into(),
    })?;
    Ok(DomainDataset { domain, dim, x, labels: None })
}

/// Loads the hidden label sidecar. Evaluation refuses to run without it.
pub fn load_labels(dir: &Path, name: &str) -> Result<Vec<usize>, SynthError> {
    let path = dir.join(format!("{name}.labels.csv"));
    if !path.exists() {
        return Err(SynthError::MissingSidecar(path.display().to_string()));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let fname = path.display().to_string();
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        if ln == 0 {
            if raw.trim() != "index,label" {
                return Err(SynthError::Parse { file: fname, line: 1, detail: "bad header".into() });
            }
            continue;
        }
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 2 {
            return Err(SynthError::Parse {
                file: fname.clone(),
                line: ln + 1,
                detail: format!("expected 2 fields, got {}", parts.len()),
            });
        }
        let idx: usize = parts[0].parse().map_err(|_| SynthError::Parse {
            file: fname.clone(),
            line: ln + 1,
            detail: format!("bad index {}", parts[0]),
        })?;
        if idx != out.len() {
            return Err(SynthError::Parse {
                file: fname.clone(),
                line: ln + 1,
                detail: format!("index {idx} out of order"),
            });
        }
        let label: usize = parts[1].parse().map_err(|_| SynthError::Parse {
            file: fname.clone(),
            line: ln + 1,
            detail: format!("bad label {}", parts[1]),
        })?;
        out.push(label);
    }
    Ok(out)
}
