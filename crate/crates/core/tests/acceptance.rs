//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured values. Run with `cargo test -p red-core --test acceptance`
//! (add `-- --nocapture` to see the lines for passing tests).

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use red_core::autodiff::{CeTargets, Tape};
use red_core::boundlab;
use red_core::losses::{self, PlSource};
use red_core::nets::{ParamGroup, RedModel};
use red_core::synthgen::{self, derive_seed, DomainDataset, SynthSpec};
use red_core::trainer::{
    self, metrics_to_csv, source_only_config, AblationVariant, RunConfig, TrainState,
};

// ---- shared helpers ---------------------------------------------------------

fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let dn = f(&xp);
        xp[i] = x[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn default_data() -> (DomainDataset, DomainDataset, Vec<usize>) {
    let spec = SynthSpec::default_benchmark();
    let (source, target, _) = synthgen::generate(&spec).unwrap();
    let labels = target.labels.clone().unwrap();
    let t_feat = DomainDataset { labels: None, ..target };
    (source, t_feat, labels)
}

fn replicate_cfg(rep: u64) -> RunConfig {
    let mut cfg = RunConfig::default_benchmark();
    cfg.seed = derive_seed(RunConfig::default_benchmark().seed, &format!("ablate-train-{rep}"));
    cfg
}

// ---- criterion: gradient correctness ----------------------------------------

#[test]
fn criterion_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = 0usize;
    for seed in 0..110u64 {
        let _ = seed;
        let m = rng.random_range(2..5);
        let k = rng.random_range(2..5);
        let n = rng.random_range(2..4);
        let c = rng.random_range(2..5);

        // matmul + add_bias + relu + sigmoid chain.
        let av: Vec<f64> = (0..m * k).map(|_| rng.random_range(0.2..1.2)).collect();
        let bv: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let biasv: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let chain = |a: &[f64], b: &[f64], bias: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.input(vec![m, k], a.to_vec()).unwrap();
            let b = t.input(vec![k, n], b.to_vec()).unwrap();
            let bias = t.input(vec![n], bias.to_vec()).unwrap();
            let mm = t.matmul(a, b).unwrap();
            let wb = t.add_bias(mm, bias).unwrap();
            let sg = t.sigmoid(wb).unwrap();
            let s = t.sum(sg).unwrap();
            t.scalar_value(s)
        };
        let (g_a, g_b, g_bias) = {
            let mut t = Tape::new();
            let a = t.input(vec![m, k], av.clone()).unwrap();
            let b = t.input(vec![k, n], bv.clone()).unwrap();
            let bias = t.input(vec![n], biasv.clone()).unwrap();
            let mm = t.matmul(a, b).unwrap();
            let wb = t.add_bias(mm, bias).unwrap();
            let sg = t.sigmoid(wb).unwrap();
            let s = t.sum(sg).unwrap();
            let g = t.backward(s).unwrap();
            (g.of(a).to_vec(), g.of(b).to_vec(), g.of(bias).to_vec())
        };
        for (ad, fd) in g_a.iter().zip(fd_grad(|a| chain(a, &bv, &biasv), &av, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }
        for (ad, fd) in g_b.iter().zip(fd_grad(|b| chain(&av, b, &biasv), &bv, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }
        for (ad, fd) in g_bias.iter().zip(fd_grad(|x| chain(&av, &bv, x), &biasv, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }

        // Elementwise block: add, sub, mul, scale, relu, exp, log, clamp.
        let xv: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.5)).collect();
        let yv: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.5)).collect();
        let elem = |x: &[f64], y: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.input(vec![1, c], x.to_vec()).unwrap();
            let y = t.input(vec![1, c], y.to_vec()).unwrap();
            let sum = t.add(x, y).unwrap();
            let diff = t.sub(x, y).unwrap();
            let prod = t.mul(sum, diff).unwrap();
            let scaled = t.scale(prod, 0.7).unwrap();
            let r = t.relu(scaled).unwrap();
            let e = t.exp(x).unwrap();
            let l = t.log(e).unwrap();
            let cl = t.clamp(y, 0.05, 10.0).unwrap();
            let mix = t.add(r, l).unwrap();
            let mix = t.add(mix, cl).unwrap();
            let s = t.sum(mix).unwrap();
            t.scalar_value(s)
        };
        let (g_x, g_y) = {
            let mut t = Tape::new();
            let x = t.input(vec![1, c], xv.clone()).unwrap();
            let y = t.input(vec![1, c], yv.clone()).unwrap();
            let sum = t.add(x, y).unwrap();
            let diff = t.sub(x, y).unwrap();
            let prod = t.mul(sum, diff).unwrap();
            let scaled = t.scale(prod, 0.7).unwrap();
            let r = t.relu(scaled).unwrap();
            let e = t.exp(x).unwrap();
            let l = t.log(e).unwrap();
            let cl = t.clamp(y, 0.05, 10.0).unwrap();
            let mix = t.add(r, l).unwrap();
            let mix = t.add(mix, cl).unwrap();
            let s = t.sum(mix).unwrap();
            let g = t.backward(s).unwrap();
            (g.of(x).to_vec(), g.of(y).to_vec())
        };
        for (ad, fd) in g_x.iter().zip(fd_grad(|x| elem(x, &yv), &xv, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }
        for (ad, fd) in g_y.iter().zip(fd_grad(|y| elem(&xv, y), &yv, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }

        // Softmax + cross-entropy + outer + trace composition.
        let logits: Vec<f64> = (0..2 * c).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..c)).collect();
        let pv: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
        let qv: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
        let head = |lg: &[f64], p: &[f64], q: &[f64]| -> f64 {
            let mut t = Tape::new();
            let lg = t.input(vec![2, c], lg.to_vec()).unwrap();
            let probs = t.softmax_rows(lg).unwrap();
            let ce = t.cross_entropy(probs, CeTargets::Indices(labels.clone())).unwrap();
            let p = t.input(vec![c], p.to_vec()).unwrap();
            let q = t.input(vec![c], q.to_vec()).unwrap();
            let m = t.outer(p, q).unwrap();
            let tr = t.trace(m).unwrap();
            let s = t.add(ce, tr).unwrap();
            t.scalar_value(s)
        };
        let (g_lg, g_p, g_q) = {
            let mut t = Tape::new();
            let lg = t.input(vec![2, c], logits.clone()).unwrap();
            let probs = t.softmax_rows(lg).unwrap();
            let ce = t.cross_entropy(probs, CeTargets::Indices(labels.clone())).unwrap();
            let p = t.input(vec![c], pv.clone()).unwrap();
            let q = t.input(vec![c], qv.clone()).unwrap();
            let m = t.outer(p, q).unwrap();
            let tr = t.trace(m).unwrap();
            let s = t.add(ce, tr).unwrap();
            let g = t.backward(s).unwrap();
            (g.of(lg).to_vec(), g.of(p).to_vec(), g.of(q).to_vec())
        };
        for (ad, fd) in g_lg.iter().zip(fd_grad(|x| head(x, &pv, &qv), &logits, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }
        for (ad, fd) in g_p.iter().zip(fd_grad(|x| head(&logits, x, &qv), &pv, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }
        for (ad, fd) in g_q.iter().zip(fd_grad(|x| head(&logits, &pv, x), &qv, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }

        // Row-wise outer flattening (conditional discriminator input map).
        let zv: Vec<f64> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pv2: Vec<f64> = (0..2 * c).map(|_| rng.random_range(0.1..1.0)).collect();
        let rof = |z: &[f64], p: &[f64]| -> f64 {
            let mut t = Tape::new();
            let z = t.input(vec![2, 3], z.to_vec()).unwrap();
            let p = t.input(vec![2, c], p.to_vec()).unwrap();
            let o = t.row_outer_flatten(z, p).unwrap();
            let sq = t.mul(o, o).unwrap();
            let s = t.sum(sq).unwrap();
            t.scalar_value(s)
        };
        let (g_z, g_p2) = {
            let mut t = Tape::new();
            let z = t.input(vec![2, 3], zv.clone()).unwrap();
            let p = t.input(vec![2, c], pv2.clone()).unwrap();
            let o = t.row_outer_flatten(z, p).unwrap();
            let sq = t.mul(o, o).unwrap();
            let s = t.sum(sq).unwrap();
            let g = t.backward(s).unwrap();
            (g.of(z).to_vec(), g.of(p).to_vec())
        };
        for (ad, fd) in g_z.iter().zip(fd_grad(|x| rof(x, &pv2), &zv, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }
        for (ad, fd) in g_p2.iter().zip(fd_grad(|x| rof(&zv, x), &pv2, 1e-5)) {
            assert!(rel_err(*ad, fd) < 1e-4);
            checks += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "gradient suite took {secs:.1}s");
    println!("[PASS] gradient correctness: {checks} gradient entries over 110 seeds checked in {secs:.1}s");
}

// ---- criterion: GRL and stop-gradient contracts -------------------------------

#[test]
fn criterion_grl_and_stop_gradient_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // Exact sign flip through a generic composition.
    for _ in 0..30 {
        let n = rng.random_range(2..6);
        let xv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let wv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let coeff: f64 = rng.random_range(0.0..2.5);
        let run = |reverse: bool| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.input(vec![n], xv.clone()).unwrap();
            let w = t.input(vec![n], wv.clone()).unwrap();
            let x2 = if reverse { t.grad_reverse(x, coeff).unwrap() } else { x };
            let prod = t.mul(x2, w).unwrap();
            let sg = t.sigmoid(prod).unwrap();
            let s = t.sum(sg).unwrap();
            let g = t.backward(s).unwrap();
            g.of(x).to_vec()
        };
        let with = run(true);
        let without = run(false);
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(*a, -coeff * *b, "gradient reversal must be exact");
        }
    }

    // Trace-loss gradients vanish identically on every extractor parameter.
    let (source, target, _) = default_data();
    let cfg = RunConfig::default_benchmark();
    let model = cfg.build_model();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = losses::step_forwards(
        &mut tape,
        &b,
        &source.x[..32 * cfg.input_dim],
        32,
        &target.x[..32 * cfg.input_dim],
        32,
        cfg.input_dim,
    )
    .unwrap();
    let tr = losses::trace_soft_inner(&mut tape, &b, &fw).unwrap();
    let l_tr = losses::trace_loss(&mut tape, fw.lambda, tr, None).unwrap();
    let g = tape.backward(l_tr).unwrap();
    let mut zero_entries = 0usize;
    for mlp in [&b.g_c, &b.g_es, &b.g_et] {
        for (w, bias, _) in &mlp.layers {
            assert!(g.of(*w).iter().all(|v| *v == 0.0), "extractor weight leaked into trace loss");
            assert!(g.of(*bias).iter().all(|v| *v == 0.0));
            zero_entries += g.of(*w).len() + g.of(*bias).len();
        }
    }
    assert!(g.of(b.theta_lambda)[0] != 0.0, "lambda must feel the trace loss");
    println!("[PASS] grl/stop-gradient contracts: exact sign flip over 30 cases; {zero_entries} extractor gradient entries identically zero");
}

// ---- criterion: transition-matrix invariants ----------------------------------

#[test]
fn criterion_transition_matrix_invariants() {
    let (source, target, _) = default_data();
    let mut cfg = RunConfig::default_benchmark();
    cfg.max_epochs = 2;
    let y_s = source.labels.clone().unwrap();
    let mut model = cfg.build_model();
    let mut state = TrainState::new(&model, &cfg);
    let dim = cfg.input_dim;
    let bs = cfg.batch_size;
    let mut max_identity_gap: f64 = 0.0;
    let mut batches = 0usize;
    for step in 0..60 {
        let lo = (step * bs) % (source.len() - bs);
        let lo_t = (step * bs) % (target.len() - bs);
        let x_s = &source.x[lo * dim..(lo + bs) * dim];
        let ys = &y_s[lo..lo + bs];
        let x_t = &target.x[lo_t * dim..(lo_t + bs) * dim];

        // Estimate on the batch before and after the step.
        for hard in [false, true] {
            let tm = losses::estimate_transition(&model, x_t, bs, hard);
            tm.validate().expect("transition invariants on training batch");
        }
        let soft = losses::estimate_transition(&model, x_t, bs, false);
        let inner = losses::trace_soft_inner_value(&model, x_t, bs).unwrap();
        max_identity_gap = max_identity_gap.max((soft.trace() - inner).abs());

        trainer::train_step(&mut model, &mut state, x_s, ys, x_t, &cfg).unwrap();
        batches += 1;
    }
    assert!(max_identity_gap <= 1e-12, "soft-trace identity gap {max_identity_gap}");
    println!("[PASS] transition-matrix invariants: {batches} training batches validated; max soft-trace identity gap {max_identity_gap:.2e}");
}

// ---- criterion: lambda initialization and convergence trends ------------------

#[test]
fn criterion_lambda_and_trace_trends() {
    let (source, target, labels) = default_data();
    let mut ok = 0;
    let mut details = Vec::new();
    for rep in 0..5u64 {
        let cfg = replicate_cfg(rep);
        let out = trainer::train(&source, &target, Some(&labels), &cfg).unwrap();
        let first = out.metrics.first().unwrap();
        let last = out.metrics.last().unwrap();
        assert_eq!(first.lambda, 0.5, "lambda must start at exactly 0.5");
        for r in &out.metrics {
            assert!(r.lambda > 0.0 && r.lambda < 1.0);
            assert!((0.0..=1.0).contains(&r.trace_soft) && (0.0..=1.0).contains(&r.trace_hard));
        }
        let pass = last.lambda > first.lambda && last.trace_soft > first.trace_soft;
        if pass {
            ok += 1;
        }
        details.push(format!(
            "rep{rep}: lam {:.3}->{:.3} tr {:.3}->{:.3}",
            first.lambda, last.lambda, first.trace_soft, last.trace_soft
        ));
    }
    assert_eq!(ok, 5, "trend must hold on 5/5 seeds: {details:?}");
    println!("[PASS] lambda init 0.5 and rising lambda/trace on 5/5 seeds: {}", details.join("; "));
}

// ---- criterion: update-group equivalence --------------------------------------

/// Six-group reference: plain losses (no reversal), one backward per update
/// group with the explicit signs, applied simultaneously.
fn reference_step(
    model: &mut RedModel,
    velocity: &mut [Vec<f64>],
    x_s: &[f64],
    y_s: &[usize],
    x_t: &[f64],
    cfg: &RunConfig,
) {
    let rows_s = x_s.len() / cfg.input_dim;
    let rows_t = x_t.len() / cfg.input_dim;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let fw = losses::step_forwards(&mut tape, &b, x_s, rows_s, x_t, rows_t, cfg.input_dim).unwrap();

    let l_s = losses::source_loss(&mut tape, &b, &fw, y_s).unwrap();
    let (l_t, _) = losses::selftrain_loss(&mut tape, &b, &fw, cfg.tau, PlSource::Fused, None).unwrap();
    let l_adv = losses::adversarial_loss(&mut tape, &b, &fw, cfg.disc_mode, None).unwrap();
    let l_dt =
        losses::disentangle_loss(&mut tape, &b, &fw, y_s, cfg.tau, cfg.pl_source_for_ldt, None).unwrap();
    let tr = losses::trace_soft_inner(&mut tape, &b, &fw).unwrap();
    let l_tr = losses::trace_loss(&mut tape, fw.lambda, tr, None).unwrap();

    let cls = {
        let a = tape.add(l_s, l_t).unwrap();
        tape.add(a, l_dt).unwrap()
    };
    let a_coeff = cfg.alpha * cfg.grl_coeff;
    // g_c:   L_s + L_t + L_dt - alpha L_adv
    let combo_gc = {
        let adv = tape.scale(l_adv, -a_coeff).unwrap();
        tape.add(cls, adv).unwrap()
    };
    // g_es:  L_s - L_dt - alpha L_adv
    let combo_ges = {
        let neg_dt = tape.scale(l_dt, -1.0).unwrap();
        let a = tape.add(l_s, neg_dt).unwrap();
        let adv = tape.scale(l_adv, -a_coeff).unwrap();
        tape.add(a, adv).unwrap()
    };
    // g_et:  L_t - L_dt - alpha L_adv
    let combo_get = {
        let neg_dt = tape.scale(l_dt, -1.0).unwrap();
        let a = tape.add(l_t, neg_dt).unwrap();
        let adv = tape.scale(l_adv, -a_coeff).unwrap();
        tape.add(a, adv).unwrap()
    };
    // lambda, h:  L_s + L_t + L_dt + beta L_tr
    let combo_lh = {
        let tr_scaled = tape.scale(l_tr, cfg.beta).unwrap();
        tape.add(cls, tr_scaled).unwrap()
    };
    // d: L_adv

    let g_gc = tape.backward(combo_gc).unwrap();
    let g_ges = tape.backward(combo_ges).unwrap();
    let g_get = tape.backward(combo_get).unwrap();
    let g_lh = tape.backward(combo_lh).unwrap();
    let g_d = tape.backward(l_adv).unwrap();

    let mut vars = Vec::new();
    for mlp in [&b.g_c, &b.g_es, &b.g_et, &b.h, &b.d] {
        for (w, bias, _) in &mlp.layers {
            vars.push(*w);
            vars.push(*bias);
        }
    }
    vars.push(b.theta_lambda);
    let mut groups = Vec::new();
    model.for_each_param(|g, _| groups.push(g));

    let grad_per_slot: Vec<Vec<f64>> = groups
        .iter()
        .zip(&vars)
        .map(|(group, var)| match group {
            ParamGroup::Gc => g_gc.of(*var).to_vec(),
            ParamGroup::Ges => g_ges.of(*var).to_vec(),
            ParamGroup::Get => g_get.of(*var).to_vec(),
            ParamGroup::H | ParamGroup::Lambda => g_lh.of(*var).to_vec(),
            ParamGroup::D => g_d.of(*var).to_vec(),
        })
        .collect();

    // The trace loss must not touch the extractors in the reference either.
    let g_tr_only = tape.backward(l_tr).unwrap();
    for (group, var) in groups.iter().zip(&vars) {
        if matches!(group, ParamGroup::Gc | ParamGroup::Ges | ParamGroup::Get) {
            assert!(g_tr_only.of(*var).iter().all(|v| *v == 0.0));
        }
    }

    let mut slot = 0;
    model.for_each_param_mut(|_, t| {
        trainer::sgd_update(
            &mut t.values,
            &grad_per_slot[slot],
            &mut velocity[slot],
            cfg.learning_rate,
            cfg.momentum,
        );
        slot += 1;
    });
}

#[test]
fn criterion_update_group_equivalence() {
    let (source, target, _) = default_data();
    let mut cfg = RunConfig::default_benchmark();
    cfg.batch_size = 16;
    cfg.hidden_dim = 32;
    let y_source = source.labels.clone().unwrap();

    let mut consolidated = cfg.build_model();
    let mut state = TrainState::new(&consolidated, &cfg);
    let mut reference = consolidated.clone();
    let mut ref_velocity: Vec<Vec<f64>> = Vec::new();
    reference.for_each_param(|_, t| ref_velocity.push(vec![0.0; t.numel()]));

    let dim = cfg.input_dim;
    let bs = cfg.batch_size;
    let mut max_gap: f64 = 0.0;
    for step in 0..50 {
        let lo = (step * bs) % (source.len() - bs);
        let lo_t = ((step + 3) * bs) % (target.len() - bs);
        let x_s = &source.x[lo * dim..(lo + bs) * dim];
        let y_s = &y_source[lo..lo + bs];
        let x_t = &target.x[lo_t * dim..(lo_t + bs) * dim];

        trainer::train_step(&mut consolidated, &mut state, x_s, y_s, x_t, &cfg).unwrap();
        reference_step(&mut reference, &mut ref_velocity, x_s, y_s, x_t, &cfg);

        let mut a = Vec::new();
        consolidated.for_each_param(|_, t| a.extend_from_slice(&t.values));
        let mut b = Vec::new();
        reference.for_each_param(|_, t| b.extend_from_slice(&t.values));
        let gap = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        max_gap = max_gap.max(gap);
        assert!(gap <= 1e-10, "step {step}: consolidated vs six-group gap {gap}");
    }
    println!("[PASS] update-group equivalence: 50 steps, max parameter gap {max_gap:.2e} <= 1e-10");
}

// ---- criterion: bound chain verification --------------------------------------

#[test]
fn criterion_bound_chain_campaign() {
    let start = Instant::now();
    let (reports, summary) = boundlab::run_campaign(10_000, 6, 20_240_601).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(summary.instances, 10_000);
    assert_eq!(summary.holds, 10_000, "all instances must satisfy the chain");
    assert!(summary.max_identity_residual <= 1e-12);
    assert!(secs < 60.0, "campaign took {secs:.1}s");
    for (_, r) in &reports {
        assert!(r.triangle_ok && r.lemma_ok, "intermediate chain steps must hold");
    }
    println!(
        "[PASS] bound chain: 10000/10000 hold, min slack {:.3e}, max identity residual {:.2e}, {secs:.1}s",
        summary.min_slack, summary.max_identity_residual
    );
}

// ---- criterion: ablation ordering ----------------------------------------------

#[test]
fn criterion_ablation_ordering() {
    let spec = SynthSpec::default_benchmark();
    let cfg = RunConfig::default_benchmark();

    // Single-run wall-clock check.
    let single = Instant::now();
    let (source, target, _) = default_data();
    trainer::train(&source, &target, None, &cfg).unwrap();
    let single_secs = single.elapsed().as_secs_f64();
    assert!(single_secs < 120.0, "one run took {single_secs:.1}s");

    let replicates: Vec<u64> = (0..5).collect();
    let rows = trainer::ablate(&spec, &cfg, &replicates, 2).unwrap();
    let mean = |name: &str| rows.iter().find(|r| r.variant == name).unwrap().mean_acc;
    let full = mean("full");
    let wo_ltr = mean("wo_ltr");
    let wo_both = mean("wo_ldt_ltr");
    let source_adv = mean("source_adv");
    assert!(full >= wo_ltr, "full {full:.4} < wo_ltr {wo_ltr:.4}");
    assert!(full >= wo_both + 0.05, "full {full:.4} < wo_ldt_ltr {wo_both:.4} + 0.05");
    assert!(full >= source_adv + 0.05, "full {full:.4} < source_adv {source_adv:.4} + 0.05");
    println!(
        "[PASS] ablation ordering: full {full:.4} >= wo_ltr {wo_ltr:.4}, >= wo_ldt_ltr {wo_both:.4}+0.05, >= source_adv {source_adv:.4}+0.05; single run {single_secs:.1}s"
    );
}

// ---- criterion: a-distance direction -------------------------------------------

#[test]
fn criterion_a_distance_direction() {
    let (source, target, labels) = default_data();
    let mut lower = 0;
    let mut pairs = Vec::new();
    for rep in 0..5u64 {
        let cfg = replicate_cfg(rep);
        let full = trainer::train(&source, &target, Some(&labels), &cfg).unwrap();
        let so = trainer::train(&source, &target, Some(&labels), &source_only_config(&cfg)).unwrap();
        let seed = derive_seed(cfg.seed, "adist-final");
        let a_full = trainer::model_a_distance(&full.model, &source, &target, seed).unwrap();
        let a_so = trainer::model_a_distance(&so.model, &source, &target, seed).unwrap();
        if a_full < a_so {
            lower += 1;
        }
        pairs.push(format!("rep{rep}: {a_full:.2} vs {a_so:.2}"));
    }
    assert!(lower >= 4, "a-distance lower on {lower}/5 seeds: {pairs:?}");
    println!("[PASS] a-distance direction: trained features lower on {lower}/5 seeds ({})", pairs.join("; "));
}

// ---- criterion: oracle consistency ----------------------------------------------

#[test]
fn criterion_oracle_consistency() {
    let spec = SynthSpec::default_benchmark();
    let oracle = synthgen::oracle_transition(&spec, 100_000).unwrap();
    let (source, target, _) = default_data();

    // Pure environmental model: lambda frozen at zero. The reducer and the
    // aligner are disabled so the estimate reflects the labelings themselves,
    // and the canonical 0.95 threshold keeps the self-training channel alive.
    let mut cfg = RunConfig::default_benchmark();
    cfg.lambda_freeze = Some(0.0);
    cfg.beta = 0.0;
    cfg.alpha = 0.0;
    cfg.tau = 0.95;
    let out = trainer::train(&source, &target, None, &cfg).unwrap();
    let hard = trainer::dataset_transition(&out.model, &target, true);
    let diff = (hard.trace() - oracle.trace()).abs();
    assert!(diff <= 0.15, "learned {:.4} vs oracle {:.4}", hard.trace(), oracle.trace());
    println!(
        "[PASS] oracle consistency: learned hard trace {:.4} vs generative oracle {:.4} (|diff| {diff:.4} <= 0.15)",
        hard.trace(),
        oracle.trace()
    );
}

// ---- criterion: determinism -----------------------------------------------------

#[test]
fn criterion_determinism() {
    let (source, target, labels) = default_data();
    let mut cfg = RunConfig::default_benchmark();
    cfg.max_epochs = 3;
    let a = trainer::train(&source, &target, Some(&labels), &cfg).unwrap();
    let b = trainer::train(&source, &target, Some(&labels), &cfg).unwrap();
    let csv_a = metrics_to_csv(&a.metrics);
    let csv_b = metrics_to_csv(&b.metrics);
    assert_eq!(csv_a, csv_b, "same seed must give byte-identical metrics");
    assert_eq!(csv_a.as_bytes(), csv_b.as_bytes());
    println!("[PASS] determinism: identical seeds give byte-identical metrics CSVs ({} bytes)", csv_a.len());
}

// ---- supplementary: switched-off variants keep the pipeline honest ---------------

#[test]
fn variant_switches_map_to_expected_losses() {
    let base = RunConfig::default_benchmark();
    let wo_ltr = AblationVariant::WithoutLtr.apply(&base);
    assert_eq!(wo_ltr.beta, 0.0);
    assert!(wo_ltr.enable_disentangle && wo_ltr.enable_selftrain);
    assert_eq!(wo_ltr.alpha, base.alpha);

    let wo_both = AblationVariant::WithoutDtAndLtr.apply(&base);
    assert_eq!(wo_both.beta, 0.0);
    assert!(!wo_both.enable_disentangle);
    assert!(wo_both.enable_selftrain);

    let source_adv = AblationVariant::SourceAdversarialOnly.apply(&base);
    assert!(!source_adv.enable_selftrain && !source_adv.enable_disentangle);
    assert_eq!(source_adv.alpha, base.alpha);

    let st = AblationVariant::SelftrainOnly.apply(&base);
    assert_eq!(st.alpha, 0.0);
    assert!(st.enable_selftrain && !st.enable_disentangle);
    println!("[PASS] ablation variant flags map to the expected switch settings");
}
