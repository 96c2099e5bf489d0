//! Flat `key=value` configuration files for runs and data specs, plus the
//! resolved-config echo every command writes before doing work.
//!
//! Lines are `key=value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected by name. Emitting a parsed config reproduces a
//! canonical, fully materialized key set in fixed order.

use std::fmt::Write as _;

use thiserror::Error;

use crate::losses::PlSource;
use crate::nets::DiscMode;
use crate::synthgen::{cyclic_permutation, identity_permutation, SynthSpec};
use crate::trainer::RunConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {detail}")]
    BadValue { line: usize, key: String, detail: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("{0}")]
    Invalid(String),
}

/// FNV-1a over the canonical text; used as the checkpoint config hash.
pub fn fnv1a64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((i + 1, k.trim().to_string(), v.trim().to_string())),
            None => return Err(ConfigError::Malformed { line: i + 1, text: line.to_string() }),
        }
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        detail: format!("`{v}`"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue { line, key: key.to_string(), detail: format!("`{v}` is not a bool") }),
    }
}

fn fmt_perm(pi: &[usize]) -> String {
    let c = pi.len();
    if *pi == identity_permutation(c) {
        return "identity".to_string();
    }
    if *pi == cyclic_permutation(c) {
        return "cyclic".to_string();
    }
    pi.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_perm(line: usize, v: &str, c: usize) -> Result<Vec<usize>, ConfigError> {
    match v {
        "identity" => Ok(identity_permutation(c)),
        "cyclic" => Ok(cyclic_permutation(c)),
        _ => v
            .split(',')
            .map(|p| parse_num::<usize>(line, "pi", p.trim()))
            .collect::<Result<Vec<_>, _>>(),
    }
}

// ---- data spec ----------------------------------------------------------------

pub fn parse_synth_spec(text: &str) -> Result<SynthSpec, ConfigError> {
    let mut spec = SynthSpec::default_benchmark();
    let mut pi_raw: Option<(usize, String)> = None;
    for (line, key, value) in parse_lines(text)? {
        match key.as_str() {
            "n_classes" => spec.n_classes = parse_num(line, &key, &value)?,
            "d_c" => spec.d_c = parse_num(line, &key, &value)?,
            "d_e" => spec.d_e = parse_num(line, &key, &value)?,
            "d_n" => spec.d_n = parse_num(line, &key, &value)?,
            "n_s" => spec.n_s = parse_num(line, &key, &value)?,
            "n_t" => spec.n_t = parse_num(line, &key, &value)?,
            "rho_s" => spec.rho_s = parse_num(line, &key, &value)?,
            "rho_t" => spec.rho_t = parse_num(line, &key, &value)?,
            "pi" => pi_raw = Some((line, value)),
            "sigma" => spec.sigma = parse_num(line, &key, &value)?,
            "mu_scale" => spec.mu_scale = parse_num(line, &key, &value)?,
            "seed" => spec.seed = parse_num(line, &key, &value)?,
            _ => return Err(ConfigError::UnknownKey { line, key }),
        }
    }
    // The permutation is resolved after n_classes so `cyclic` sizes correctly.
    if let Some((line, v)) = pi_raw {
        spec.pi = parse_perm(line, &v, spec.n_classes)?;
    } else if spec.pi.len() != spec.n_classes {
        spec.pi = cyclic_permutation(spec.n_classes);
    }
    spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(spec)
}

pub fn emit_synth_spec(spec: &SynthSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n_classes={}", spec.n_classes);
    let _ = writeln!(s, "d_c={}", spec.d_c);
    let _ = writeln!(s, "d_e={}", spec.d_e);
    let _ = writeln!(s, "d_n={}", spec.d_n);
    let _ = writeln!(s, "n_s={}", spec.n_s);
    let _ = writeln!(s, "n_t={}", spec.n_t);
    let _ = writeln!(s, "rho_s={}", spec.rho_s);
    let _ = writeln!(s, "rho_t={}", spec.rho_t);
    let _ = writeln!(s, "pi={}", fmt_perm(&spec.pi));
    let _ = writeln!(s, "sigma={}", spec.sigma);
    let _ = writeln!(s, "mu_scale={}", spec.mu_scale);
    let _ = writeln!(s, "seed={}", spec.seed);
    s
}

// ---- run config ----------------------------------------------------------------

pub fn parse_run_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default_benchmark();
    for (line, key, value) in parse_lines(text)? {
        match key.as_str() {
            "seed" => cfg.seed = parse_num(line, &key, &value)?,
            "max_epochs" => cfg.max_epochs = parse_num(line, &key, &value)?,
            "iters_per_epoch" => cfg.iters_per_epoch = parse_num(line, &key, &value)?,
            "batch_size" => cfg.batch_size = parse_num(line, &key, &value)?,
            "learning_rate" => cfg.learning_rate = parse_num(line, &key, &value)?,
            "momentum" => cfg.momentum = parse_num(line, &key, &value)?,
            "alpha" => cfg.alpha = parse_num(line, &key, &value)?,
            "beta" => cfg.beta = parse_num(line, &key, &value)?,
            "tau" => cfg.tau = parse_num(line, &key, &value)?,
            "grl_coeff" => cfg.grl_coeff = parse_num(line, &key, &value)?,
            "disc_mode" => {
                cfg.disc_mode = match value.as_str() {
                    "plain" => DiscMode::Plain,
                    "conditional" => DiscMode::Conditional,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key,
                            detail: format!("`{other}` (expected plain|conditional)"),
                        })
                    }
                }
            }
            "pl_source_for_ldt" => {
                cfg.pl_source_for_ldt = match value.as_str() {
                    "causal" => PlSource::Causal,
                    "fused" => PlSource::Fused,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key,
                            detail: format!("`{other}` (expected causal|fused)"),
                        })
                    }
                }
            }
            "feat_dim" => cfg.feat_dim = parse_num(line, &key, &value)?,
            "hidden_dim" => cfg.hidden_dim = parse_num(line, &key, &value)?,
            "n_classes" => cfg.n_classes = parse_num(line, &key, &value)?,
            "input_dim" => cfg.input_dim = parse_num(line, &key, &value)?,
            "enable_selftrain" => cfg.enable_selftrain = parse_bool(line, &key, &value)?,
            "enable_disentangle" => cfg.enable_disentangle = parse_bool(line, &key, &value)?,
            "student_noise_std" => cfg.student_noise_std = parse_num(line, &key, &value)?,
            "m_ema_decay" => cfg.m_ema_decay = parse_num(line, &key, &value)?,
            "lambda_freeze" => {
                cfg.lambda_freeze = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(parse_num(line, &key, &value)?)
                }
            }
            _ => return Err(ConfigError::UnknownKey { line, key }),
        }
    }
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn emit_run_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "max_epochs={}", cfg.max_epochs);
    let _ = writeln!(s, "iters_per_epoch={}", cfg.iters_per_epoch);
    let _ = writeln!(s, "batch_size={}", cfg.batch_size);
    let _ = writeln!(s, "learning_rate={}", cfg.learning_rate);
    let _ = writeln!(s, "momentum={}", cfg.momentum);
    let _ = writeln!(s, "alpha={}", cfg.alpha);
    let _ = writeln!(s, "beta={}", cfg.beta);
    let _ = writeln!(s, "tau={}", cfg.tau);
    let _ = writeln!(s, "grl_coeff={}", cfg.grl_coeff);
    let _ = writeln!(
        s,
        "disc_mode={}",
        match cfg.disc_mode {
            DiscMode::Plain => "plain",
            DiscMode::Conditional => "conditional",
        }
    );
    let _ = writeln!(
        s,
        "pl_source_for_ldt={}",
        match cfg.pl_source_for_ldt {
            PlSource::Causal => "causal",
            PlSource::Fused => "fused",
        }
    );
    let _ = writeln!(s, "feat_dim={}", cfg.feat_dim);
    let _ = writeln!(s, "hidden_dim={}", cfg.hidden_dim);
    let _ = writeln!(s, "n_classes={}", cfg.n_classes);
    let _ = writeln!(s, "input_dim={}", cfg.input_dim);
    let _ = writeln!(s, "enable_selftrain={}", cfg.enable_selftrain);
    let _ = writeln!(s, "enable_disentangle={}", cfg.enable_disentangle);
    let _ = writeln!(s, "student_noise_std={}", cfg.student_noise_std);
    let _ = writeln!(s, "m_ema_decay={}", cfg.m_ema_decay);
    let _ = writeln!(
        s,
        "lambda_freeze={}",
        cfg.lambda_freeze.map(|v| v.to_string()).unwrap_or_else(|| "none".to_string())
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_through_text() {
        let mut cfg = RunConfig::default_benchmark();
        cfg.alpha = 0.5;
        cfg.lambda_freeze = Some(0.0);
        cfg.disc_mode = DiscMode::Plain;
        let text = emit_run_config(&cfg);
        let parsed = parse_run_config(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn synth_spec_round_trips_and_accepts_named_permutations() {
        let spec = SynthSpec::default_benchmark();
        let text = emit_synth_spec(&spec);
        assert!(text.contains("pi=cyclic"));
        let parsed = parse_synth_spec(&text).unwrap();
        assert_eq!(parsed, spec);

        let explicit = parse_synth_spec("n_classes=3\npi=2,0,1\n").unwrap();
        assert_eq!(explicit.pi, vec![2, 0, 1]);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        match parse_run_config("learning_rte=0.1\n") {
            Err(ConfigError::UnknownKey { key, line }) => {
                assert_eq!(key, "learning_rte");
                assert_eq!(line, 1);
            }
            other => panic!("expected unknown key, got {other:?}"),
        }
    }

    #[test]
    fn invalid_permutation_is_rejected_with_field_name() {
        let err = parse_synth_spec("pi=0,0,1,2\n").unwrap_err();
        assert!(err.to_string().contains("pi"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = parse_run_config("# comment\n\nseed=5 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn bad_values_name_the_key_and_line() {
        match parse_run_config("\ntau=huge\n") {
            Err(ConfigError::BadValue { key, line, .. }) => {
                assert_eq!(key, "tau");
                assert_eq!(line, 2);
            }
            other => panic!("expected bad value, got {other:?}"),
        }
    }

    #[test]
    fn fnv_hash_is_stable() {
        assert_eq!(fnv1a64(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64("a"), fnv1a64("a"));
        assert_ne!(fnv1a64("a"), fnv1a64("b"));
    }
}
