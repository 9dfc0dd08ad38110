//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process exits non-zero if any
//! criterion fails.

use std::time::{Duration, Instant};

use eta_core::data_synth::{Batch, DepthMap, Sample};
use eta_core::depth_net::{build_model, DepthArch, DepthModel, ForwardOpts, NormMode};
use eta_core::energy_model::{
    fgsm_perturb, map_to_energy, masked_sparse, EnergyArch, EnergyModel, PerturbConfig, SPARSE_FLOOR,
};
use eta_core::eval_metrics::{evaluate_frame, mae, rmse, Crop, EvalConfig, Phase};
use eta_core::experiment::{
    iters_method, resolve_config, run_experiment, synth_source, train_depth, ExperimentResult, RunConfig, Scenario,
    METHOD_BASELINE, METHOD_ETA, METHOD_GLOBAL, METHOD_SOURCE,
};
use eta_core::tta_engine::{
    energy_term, run_stream, smooth_term, sparse_term, AdaptConfig, Adapter, NormPolicy, OptimizerStatePolicy,
};
use eta_tensor::check::max_relative_error;
use eta_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const GRAD_REL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so exact zeros compare cleanly.
const FD_FLOOR: f64 = 1e-6;
const GRAD_SEEDS: u64 = 20;
const COORDS_PER_LOSS: usize = 12;
/// One-sided differences further apart than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-2;
const GIBBS_TOL: f64 = 1e-9;
const GIBBS_PAIRS: usize = 10_000;
const FGSM_CASES: usize = 1_000;
const FGSM_BATCHES: usize = 20;
const FGSM_MIN_RATE: f64 = 0.95;
/// Slack for f32 rounding of `x + eps` in the l-inf bound.
const FGSM_SLACK: f64 = 1e-5;
const AUROC_MIN: f64 = 0.8;
const E2E_SEEDS: u64 = 5;
const E2E_MIN_FRAMES: usize = 200;
const ETA_WINS_MIN: usize = 3;
const SWEEP: [usize; 4] = [1, 2, 3, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, started: Instant, budget: Option<Duration>, o: Outcome) -> bool {
    report_took(id, name, started.elapsed(), budget, o)
}

fn report_took(id: u32, name: &str, took: Duration, budget: Option<Duration>, o: Outcome) -> bool {
    let in_time = budget.map_or(true, |b| took <= b);
    let pass = o.pass && in_time;
    let budget_note = budget.map(|b| format!(" / budget {}s", b.as_secs())).unwrap_or_default();
    println!(
        "{} criterion {id} ({name}): {} [{:.1}s{budget_note}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    pass
}

// ---------------------------------------------------------------- fixtures

fn micro_arch(seed: u64) -> DepthArch {
    DepthArch {
        image_widths: vec![4, 8],
        sparse_widths: vec![2, 4],
        fusion_width: 8,
        decoder_widths: vec![4],
        adapt_slot: 1,
        adapt_reduction: 2,
        depth_scale: 5.0,
        seed,
    }
}

fn micro_energy_arch(seed: u64) -> EnergyArch {
    EnergyArch { widths: vec![4, 8], depth_scale: 5.0, seed, ..EnergyArch::default() }
}

fn random_sample(rng: &mut ChaCha8Rng, id: &str, h: usize, w: usize) -> Sample {
    let n = h * w;
    let image = (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let gt_vals: Vec<f32> = (0..n).map(|_| rng.gen_range(0.5..4.5)).collect();
    let gt_mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
    let mut sparse = DepthMap::empty(n);
    for p in 0..n {
        if rng.gen_bool(0.25) {
            sparse.values[p] = (gt_vals[p] + rng.gen_range(-0.2..0.2)).max(0.1);
            sparse.mask[p] = true;
        }
    }
    sparse.mask[0] = true;
    sparse.values[0] = gt_vals[0];
    Sample {
        frame_id: id.into(),
        height: h,
        width: w,
        image,
        sparse,
        gt: Some(DepthMap { values: gt_vals, mask: gt_mask }),
    }
}

fn micro_batch(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Sample>, Batch<f64>) {
    let samples: Vec<Sample> = (0..n).map(|i| random_sample(rng, &format!("m-{i:03}"), 16, 16)).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let b = Batch::from_samples(&refs).unwrap();
    (samples, b)
}

/// Micro depth model with the adaptation module inserted and its zero-init
/// up-projection replaced by random weights, so ψ gradients are generic.
fn micro_depth(seed: u64, rng: &mut ChaCha8Rng) -> DepthModel<f64> {
    let mut m: DepthModel<f64> = build_model(&micro_arch(seed)).unwrap();
    m.insert_adaptation().unwrap();
    let psi = m.psi.as_mut().unwrap();
    for i in 0..psi.len() {
        if psi.name(i).contains("up") {
            for v in psi.get_mut(i).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    // Non-trivial running statistics for the frozen-mode checks.
    for (mean, var) in m.norm.mean.iter_mut().zip(m.norm.var.iter_mut()) {
        for v in mean.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        for v in var.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
    }
    m
}

/// Central differences on randomly chosen entries of a parameter store,
/// compared against the analytic gradients of those entries. The L1 terms
/// are piecewise smooth; an entry whose one-sided differences disagree sits
/// on a kink within the step and is replaced by another draw.
fn check_store<M: Clone>(
    model: &M,
    analytic: &[Tensor<f64>],
    store: fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> f64,
    rng: &mut ChaCha8Rng,
    kinks: &mut usize,
) -> f64 {
    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut a = Vec::new();
    let mut n = Vec::new();
    while a.len() < COORDS_PER_LOSS {
        let mut k = rng.gen_range(0..total);
        let mut ti = 0;
        while k >= sizes[ti] {
            k -= sizes[ti];
            ti += 1;
        }
        let eval = |d: f64| {
            let mut m = model.clone();
            store(&mut m).get_mut(ti).data_mut()[k] += d;
            loss(&m)
        };
        let (lo, mid, hi) = (eval(-FD_STEP), loss(model), eval(FD_STEP));
        let (fwd, bwd) = ((hi - mid) / FD_STEP, (mid - lo) / FD_STEP);
        if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(FD_FLOOR) {
            *kinks += 1;
            continue;
        }
        n.push((hi - lo) / (2.0 * FD_STEP));
        a.push(analytic[ti].data()[k]);
    }
    max_relative_error(&a, &n, FD_FLOOR)
}

fn grads_of(grads: &mut eta_tensor::Gradients<f64>, vars: &[eta_tensor::Var], store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    vars.iter().zip(store.tensors()).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()
}

// ---------------------------------------------------------------- criteria

fn criterion_gradients() -> Outcome {
    let mut worst: Vec<(&str, f64)> =
        ["L_sup", "energy BCE", "l_energy", "l_sparse", "l_smooth", "L_adapt"].iter().map(|n| (*n, 0.0)).collect();
    let mut value_gap = 0.0f64;
    let mut kinks = 0usize;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let depth = micro_depth(seed, &mut rng);
        let mut energy = EnergyModel::new(&micro_energy_arch(seed), &depth).unwrap();
        energy.tau = 1.0;
        let (_, b) = micro_batch(&mut rng, 2);
        let (gt, gm) = (b.gt.clone().unwrap(), b.gt_mask.clone().unwrap());
        let zs = masked_sparse(&b.sparse, &b.sparse_mask);

        // L_sup with respect to θ, batch statistics as in training.
        let sup = |m: &DepthModel<f64>, grad: bool| {
            let mut g = Graph::new();
            let (i, z, k) = (g.constant(b.image.clone()), g.constant(b.sparse.clone()), g.constant(b.sparse_mask.clone()));
            let f = m.forward(&mut g, i, z, k, ForwardOpts { norm: NormMode::Batch, grad_theta: grad, grad_psi: false }).unwrap();
            let l = g.masked_l1(f.depth, &gt, &gm);
            (g, l, f.theta)
        };
        let (g, l, th) = sup(&depth, true);
        let mut gr = g.backward(l);
        let a = grads_of(&mut gr, &th, &depth.theta);
        worst[0].1 = worst[0].1.max(check_store(&depth, &a, |m| &mut m.theta, |m| {
            let (g, l, _) = sup(m, false);
            g.value(l).item()
        }, &mut rng, &mut kinks));

        // Energy BCE with respect to φ.
        let pred = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|_| rng.gen_range(0.5..4.5)).collect());
        let target = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|_| rng.gen_range(0.0..1.0)).collect());
        let weight = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|_| if rng.gen_bool(0.85) { 1.0 } else { 0.0 }).collect());
        let bce = |e: &EnergyModel<f64>, grad: bool| {
            let mut g = Graph::new();
            let (p, s) = (g.constant(pred.clone()), g.constant(zs.clone()));
            let f = e.forward(&mut g, p, s, grad).unwrap();
            let l = g.bce_with_logits(f.logits, &target, &weight);
            (g, l, f.phi)
        };
        let (g, l, phi) = bce(&energy, true);
        let mut gr = g.backward(l);
        let a = grads_of(&mut gr, &phi, &energy.phi);
        worst[1].1 = worst[1].1.max(check_store(&energy, &a, |e| &mut e.phi, |e| {
            let (g, l, _) = bce(e, false);
            g.value(l).item()
        }, &mut rng, &mut kinks));

        // Test-time terms with respect to ψ, frozen statistics.
        let w = [rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)];
        let clamp = eta_core::tta_engine::DEFAULT_ENERGY_CLAMP;
        for (slot, which) in [(2usize, 0usize), (3, 1), (4, 2), (5, 3)] {
            let build = |m: &DepthModel<f64>, grad: bool| {
                let mut g = Graph::new();
                let (i, z, k) = (g.constant(b.image.clone()), g.constant(b.sparse.clone()), g.constant(b.sparse_mask.clone()));
                let f = m.forward(&mut g, i, z, k, ForwardOpts { norm: NormMode::Frozen, grad_theta: false, grad_psi: grad }).unwrap();
                let le = energy_term(&mut g, &energy, f.depth, &zs, clamp).unwrap();
                let lz = sparse_term(&mut g, f.depth, &b.sparse, &b.sparse_mask, &b.frame_ids).unwrap();
                let ls = smooth_term(&mut g, f.depth, &b.image);
                let l = match which {
                    0 => le,
                    1 => lz,
                    2 => ls,
                    _ => g.weighted_sum(&[(le, w[0]), (lz, w[1]), (ls, w[2])]),
                };
                (g, l, f.psi)
            };
            let (g, l, psi_vars) = build(&depth, true);
            let mut gr = g.backward(l);
            let a = grads_of(&mut gr, &psi_vars, depth.psi.as_ref().unwrap());
            let err = check_store(&depth, &a, |m| m.psi.as_mut().unwrap(), |m| {
                let (g, l, _) = build(m, false);
                g.value(l).item()
            }, &mut rng, &mut kinks);
            worst[slot].1 = worst[slot].1.max(err);
            if which == 3 {
                // The adapter must report the same objective that was checked.
                let cfg = AdaptConfig {
                    w_energy: w[0],
                    w_sparse: w[1],
                    w_smooth: w[2],
                    norm_policy: NormPolicy::Frozen,
                    ..AdaptConfig::default()
                };
                let ad = Adapter::new(depth.clone(), Some(energy.clone()), cfg).unwrap();
                let logged = ad.evaluate(&b).unwrap().terms.l_adapt;
                value_gap = value_gap.max((logged - g.value(l).item()).abs());
            }
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome {
        pass: max <= GRAD_REL_TOL && value_gap < 1e-12,
        detail: format!(
            "max rel err {max:.2e} <= {GRAD_REL_TOL:.0e} over {GRAD_SEEDS} seeds x {COORDS_PER_LOSS} coords [{}]; {kinks} kink draws redrawn; adapter objective gap {value_gap:.1e}",
            parts.join(", ")
        ),
    }
}

fn criterion_gibbs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exact_err = 0.0f64;
    for _ in 0..100 {
        let tau = 10f64.powf(rng.gen_range(-3.0..3.0));
        let y = map_to_energy(&[tau], tau).unwrap()[0];
        exact_err = exact_err.max((y - (1.0 - (-1.0f64).exp())).abs());
    }
    let mut violations = 0;
    for _ in 0..GIBBS_PAIRS {
        let tau = 10f64.powf(rng.gen_range(-3.0..3.0));
        let a = rng.gen_range(0.0..50.0) * tau;
        let b = rng.gen_range(0.0..50.0) * tau;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let y = map_to_energy(&[lo, hi], tau).unwrap();
        let ok = y[0] <= y[1] && (0.0..=1.0).contains(&y[0]) && (0.0..=1.0).contains(&y[1]) && (hi - lo <= 1e-9 * tau || y[0] < y[1] || y[1] >= 1.0 - f64::EPSILON);
        if !ok {
            violations += 1;
        }
    }
    let zero = map_to_energy(&[0.0], 1.0).unwrap()[0];
    Outcome {
        pass: exact_err <= GIBBS_TOL && violations == 0 && zero == 0.0,
        detail: format!("|y(tau,tau) - (1 - 1/e)| = {exact_err:.1e} <= {GIBBS_TOL:.0e}; {violations} monotonicity violations in {GIBBS_PAIRS} pairs"),
    }
}

fn toy_config() -> RunConfig {
    let sets: Vec<String> =
        ["data.train_frames=64", "data.val_frames=80", "depth_train.epochs=10"].iter().map(|s| s.to_string()).collect();
    resolve_config(Some(Scenario::Fog), Some(11), None, &sets).unwrap()
}

fn l1(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: &Tensor<f32>) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for ((p, g), m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if *m > 0.0 {
            s += (p - g).abs() as f64;
            n += 1.0;
        }
    }
    s / n
}

fn criterion_fgsm(toy: &DepthModel<f32>, held_out: &[Sample]) -> Outcome {
    let cfg = PerturbConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bound_failures = 0;
    let micro: Vec<DepthModel<f32>> = (0..10).map(|s| build_model(&micro_arch(s)).unwrap()).collect();
    for case in 0..FGSM_CASES {
        let model = &micro[case % micro.len()];
        let s = random_sample(&mut rng, "c", 16, 16);
        let b: Batch<f32> = Batch::from_samples(&[&s]).unwrap();
        let eps = PerturbConfig { eps_image: rng.gen_range(0.001..0.1), eps_sparse: rng.gen_range(0.001..0.5) };
        let adv = fgsm_perturb(model, &b, &eps).unwrap();
        let img_ok = adv.image.data().iter().zip(b.image.data()).all(|(&a, &x)| {
            ((a - x).abs() as f64) <= eps.eps_image + FGSM_SLACK && (0.0..=1.0).contains(&a)
        });
        let sp_ok = adv.sparse.data().iter().zip(b.sparse.data()).zip(b.sparse_mask.data()).all(|((&a, &z), &m)| {
            if m > 0.0 {
                ((a - z).abs() as f64) <= eps.eps_sparse + FGSM_SLACK
                    && a as f64 >= SPARSE_FLOOR - FGSM_SLACK
                    && a as f64 <= model.arch.depth_scale + FGSM_SLACK
            } else {
                a == z
            }
        });
        if !(img_ok && sp_ok) {
            bound_failures += 1;
        }
    }
    let mut increased = 0;
    let mut margins = Vec::new();
    for chunk in held_out.chunks(held_out.len() / FGSM_BATCHES).take(FGSM_BATCHES) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b: Batch<f32> = Batch::from_samples(&refs).unwrap();
        let (gt, gm) = (b.gt.as_ref().unwrap(), b.gt_mask.as_ref().unwrap());
        let clean = l1(&toy.predict(&b.image, &b.sparse, &b.sparse_mask).unwrap(), gt, gm);
        let adv = fgsm_perturb(toy, &b, &cfg).unwrap();
        let pert = l1(&toy.predict(&adv.image, &adv.sparse, &b.sparse_mask).unwrap(), gt, gm);
        margins.push(pert - clean);
        if pert > clean {
            increased += 1;
        }
    }
    let rate = increased as f64 / FGSM_BATCHES as f64;
    let min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    Outcome {
        pass: bound_failures == 0 && rate >= FGSM_MIN_RATE,
        detail: format!(
            "{bound_failures} l-inf bound violations in {FGSM_CASES} cases; L_sup increased in {increased}/{FGSM_BATCHES} batches (>= {:.0}%), smallest margin {min_margin:.4} m",
            FGSM_MIN_RATE * 100.0
        ),
    }
}

fn criterion_freeze(toy: &DepthModel<f32>, frames: &[Sample]) -> Outcome {
    let mut problems = Vec::new();
    // Identity at insertion, in both normalization modes.
    for mode in [NormMode::Frozen, NormMode::Batch] {
        let mut before = toy.clone();
        before.norm.mode = mode;
        let mut after = before.clone();
        after.insert_adaptation().unwrap();
        for s in frames.iter().take(4) {
            let b: Batch<f32> = Batch::from_samples(&[s]).unwrap();
            let p0 = before.predict(&b.image, &b.sparse, &b.sparse_mask).unwrap();
            let p1 = after.predict(&b.image, &b.sparse, &b.sparse_mask).unwrap();
            if p0.data().iter().zip(p1.data()).any(|(a, c)| a.to_bits() != c.to_bits()) {
                problems.push(format!("insertion changed the {mode:?} prediction of {}", s.frame_id));
            }
        }
    }
    // θ and φ through adaptation under every policy combination.
    let energy = EnergyModel::new(&EnergyArch { widths: vec![4, 8, 16, 32], depth_scale: toy.arch.depth_scale, ..EnergyArch::default() }, toy).unwrap();
    let mut runs = 0;
    for norm in [NormPolicy::Frozen, NormPolicy::Batch, NormPolicy::Ema] {
        for opt in [OptimizerStatePolicy::Persistent, OptimizerStatePolicy::ResetPerBatch] {
            for w_e in [0.0, 0.2] {
                let mut m = toy.clone();
                m.insert_adaptation().unwrap();
                let psi0 = m.psi.clone().unwrap();
                let cfg = AdaptConfig {
                    w_energy: w_e,
                    norm_policy: norm,
                    optimizer_state_policy: opt,
                    inner_iters: 2,
                    learning_rate: 1e-2,
                    ..AdaptConfig::default()
                };
                let mut ad = if w_e > 0.0 { Adapter::new(m, Some(energy.clone()), cfg).unwrap() } else { Adapter::baseline(m, cfg).unwrap() };
                let stream: Vec<_> = frames.iter().take(6).cloned().map(Ok).collect();
                run_stream(&mut ad, stream, None).unwrap();
                if !ad.model().theta.bitwise_eq(&toy.theta) {
                    problems.push(format!("theta changed under {norm:?}/{opt:?}/w_e={w_e}"));
                }
                if !ad.energy().map_or(true, |e| e.phi.bitwise_eq(&energy.phi)) {
                    problems.push(format!("phi changed under {norm:?}/{opt:?}"));
                }
                if ad.model().psi.as_ref().unwrap().bitwise_eq(&psi0) {
                    problems.push(format!("psi did not move under {norm:?}/{opt:?}/w_e={w_e}"));
                }
                runs += 1;
            }
        }
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("insertion is a bitwise identity; theta and phi bitwise unchanged across {runs} adaptation runs while psi moved")
        } else {
            problems.join("; ")
        },
    }
}

fn per_seed(exps: &[ExperimentResult], method: &str, phase: Phase) -> Vec<f64> {
    exps.iter().map(|e| e.run(method).and_then(|r| r.median_mae(phase)).unwrap_or(f64::NAN)).collect()
}

fn med(v: &[f64]) -> f64 {
    eta_core::eval_metrics::median(v)
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn criterion_auroc(exps: &[ExperimentResult]) -> Outcome {
    let a: Vec<f64> =
        exps.iter().map(|e| e.energy.iter().find(|s| s.label == "local").map_or(f64::NAN, |s| s.auroc)).collect();
    let g: Vec<f64> =
        exps.iter().map(|e| e.energy.iter().find(|s| s.label == "global").map_or(f64::NAN, |s| s.auroc)).collect();
    Outcome {
        pass: a.iter().all(|&x| x >= AUROC_MIN),
        detail: format!("local energy AUROC per seed [{}] (each >= {AUROC_MIN}); global [{}]", fmt(&a), fmt(&g)),
    }
}

fn criterion_e2e(exps: &[ExperimentResult]) -> Outcome {
    let frames_ok = exps.iter().all(|e| e.config.data.stream_frames >= E2E_MIN_FRAMES && e.config.adapt.w_energy > 0.0);
    let pre = per_seed(exps, METHOD_ETA, Phase::Pre);
    let post = per_seed(exps, METHOD_ETA, Phase::Post);
    let base = per_seed(exps, METHOD_BASELINE, Phase::Post);
    let src = per_seed(exps, METHOD_SOURCE, Phase::Post);
    let wins = post.iter().zip(&base).filter(|(e, b)| e <= b).count();
    Outcome {
        pass: frames_ok && med(&post) < med(&pre) && wins >= ETA_WINS_MIN,
        detail: format!(
            "median over seeds: ETA post {:.4} < pre {:.4} (unadapted source {:.4}); ETA <= baseline in {wins}/{E2E_SEEDS} seeds (need {ETA_WINS_MIN}); per-seed ETA [{}] baseline [{}]",
            med(&post),
            med(&pre),
            med(&src),
            fmt(&post),
            fmt(&base)
        ),
    }
}

fn criterion_region(exps: &[ExperimentResult]) -> Outcome {
    let local = per_seed(exps, METHOD_ETA, Phase::Post);
    let global = per_seed(exps, METHOD_GLOBAL, Phase::Post);
    let cells: Vec<usize> = exps.iter().filter_map(|e| e.run(METHOD_ETA).and_then(|r| r.info.grid_cells)).collect();
    let ok_cells = cells.len() == exps.len() && cells.iter().all(|&c| c >= 4);
    Outcome {
        pass: ok_cells && med(&local) <= med(&global),
        detail: format!(
            "median post MAE local ({} cells) {:.4} <= global (1 cell) {:.4}; per-seed local [{}] global [{}]",
            cells.first().copied().unwrap_or(0),
            med(&local),
            med(&global),
            fmt(&local),
            fmt(&global)
        ),
    }
}

fn method_for(n: usize, cfg: &RunConfig) -> String {
    if n == cfg.adapt.inner_iters {
        METHOD_ETA.to_string()
    } else {
        iters_method(n)
    }
}

fn criterion_iterations(exps: &[ExperimentResult]) -> Outcome {
    let mut curve = Vec::new();
    let mut logged = true;
    for n in SWEEP {
        let mut posts = Vec::new();
        for e in exps {
            let Some(r) = e.run(&method_for(n, &e.config)) else {
                logged = false;
                continue;
            };
            let rep = r.report.as_ref();
            logged &= r.info.inner_iters == Some(n)
                && rep.is_some_and(|rep| rep.inner_iters == n && rep.iteration_count() == n * e.config.data.stream_frames);
            posts.extend(r.median_mae(Phase::Post));
        }
        curve.push((n, med(&posts)));
    }
    let one: Vec<&ExperimentResult> = exps.iter().filter(|e| e.config.adapt.inner_iters == 1).collect();
    let pre = med(&one.iter().filter_map(|e| e.run(METHOD_ETA)?.median_mae(Phase::Pre)).collect::<Vec<_>>());
    let post1 = curve[0].1;
    let pts: Vec<String> = curve.iter().map(|(n, v)| format!("{n}:{v:.4}")).collect();
    Outcome {
        pass: logged && one.len() == exps.len() && post1 < pre,
        detail: format!("median post MAE by inner_iters [{}]; inner_iters=1 post {post1:.4} < pre {pre:.4}; logs complete: {logged}", pts.join(" ")),
    }
}

fn criterion_metrics(exps: &[ExperimentResult]) -> Outcome {
    let mut problems = Vec::new();
    let n_records: usize = exps.iter().map(|e| e.records().len()).sum();
    for e in exps {
        for r in e.records() {
            if !(r.rmse_m >= r.mae_m && r.mae_m >= 0.0) {
                problems.push(format!("{} {} {}: rmse {} < mae {}", r.run_id, r.frame_id, r.phase, r.rmse_m, r.mae_m));
            }
        }
    }
    // Hand-computed examples on a 2x2 frame.
    let gt = DepthMap { values: vec![1.0, 2.0, 3.0, 4.0], mask: vec![true; 4] };
    let cfg = EvalConfig::outdoor();
    let cases: [(&[f32], f64, f64); 3] =
        [(&[1.0, 2.0, 3.0, 4.0], 0.0, 0.0), (&[2.0, 3.0, 4.0, 5.0], 1.0, 1.0), (&[1.0, 2.0, 3.0, 8.0], 1.0, 2.0)];
    for (pred, want_mae, want_rmse) in cases {
        let (a, b) = (mae(pred, &gt, 2, 2, &cfg).unwrap(), rmse(pred, &gt, 2, 2, &cfg).unwrap());
        if a != want_mae || b != want_rmse {
            problems.push(format!("pred {pred:?}: mae {a} rmse {b}, want {want_mae} {want_rmse}"));
        }
    }
    // Excluded pixels do not matter: mask, range and crop.
    let masked = DepthMap { values: vec![1.0, 2.0, 3.0, 4.0], mask: vec![true, true, true, false] };
    let r = evaluate_frame("r", "f", Phase::Post, &[1.0, 2.0, 3.0, 100.0], &masked, 2, 2, &cfg).unwrap();
    if r.mae_m != 0.0 || r.n_pixels != 3 {
        problems.push(format!("masked pixel counted: {r:?}"));
    }
    let ranged = EvalConfig { depth_range: (0.0, 3.0), ..cfg.clone() };
    let r = evaluate_frame("r", "f", Phase::Post, &[1.0, 2.0, 4.0, 0.0], &gt, 2, 2, &ranged).unwrap();
    if (r.mae_m - 1.0 / 3.0).abs() > 1e-12 || r.n_pixels != 3 {
        problems.push(format!("range filter: {r:?}"));
    }
    let cropped = EvalConfig { crop: Some(Crop { top: 0, left: 0, height: 1, width: 2 }), ..cfg.clone() };
    let r = evaluate_frame("r", "f", Phase::Post, &[1.0, 4.0, 9.0, 9.0], &gt, 2, 2, &cropped).unwrap();
    if r.mae_m != 1.0 || r.rmse_m != 2f64.sqrt() || r.n_pixels != 2 {
        problems.push(format!("crop: {r:?}"));
    }
    Outcome {
        pass: problems.is_empty() && n_records > 0,
        detail: if problems.is_empty() {
            format!("rmse >= mae on all {n_records} experiment records; hand-computed mae/rmse, mask, range and crop examples exact")
        } else {
            problems.join("; ")
        },
    }
}

/// Seconds spent in the named stages, summed over all experiments. A
/// trailing `*` matches by prefix.
fn stage_time(exps: &[ExperimentResult], stages: &[&str]) -> Duration {
    let secs: f64 = exps
        .iter()
        .flat_map(|e| &e.timings)
        .filter(|(name, _)| stages.iter().any(|p| p.strip_suffix('*').map_or(name == p, |pre| name.starts_with(pre))))
        .map(|(_, s)| s)
        .sum();
    Duration::from_secs_f64(secs)
}

/// The slowest single seed's fixture (data, depth model, energy model).
fn fixture_time(exps: &[ExperimentResult], stages: &[&str]) -> Duration {
    exps.iter().map(|e| stage_time(std::slice::from_ref(e), stages)).max().unwrap_or_default()
}

fn main() {
    let mut all_pass = true;

    let t = Instant::now();
    all_pass &= report(1, "analytic vs numeric gradients", t, Some(Duration::from_secs(120)), criterion_gradients());

    let t = Instant::now();
    all_pass &= report(2, "Gibbs mapping", t, Some(Duration::from_secs(10)), criterion_gibbs());

    let t = Instant::now();
    let toy_cfg = toy_config();
    let toy_src = synth_source(&toy_cfg).unwrap();
    let (toy, _) = train_depth(&toy_cfg, &toy_src.train).unwrap();
    all_pass &= report(3, "FGSM contract", t, Some(Duration::from_secs(180)), criterion_fgsm(&toy, &toy_src.val));

    let t = Instant::now();
    all_pass &= report(5, "freeze and identity", t, Some(Duration::from_secs(30)), criterion_freeze(&toy, &toy_src.val));

    let t = Instant::now();
    let exps: Vec<ExperimentResult> = (0..E2E_SEEDS)
        .map(|seed| run_experiment(&RunConfig::preset(Scenario::Fog, seed)).expect("fog experiment"))
        .collect();
    println!("fog experiments: {E2E_SEEDS} seeds in {:.1}s (shared by criteria 4, 6, 7, 8, 9)", t.elapsed().as_secs_f64());

    // Each criterion is charged for the pipeline stages it depends on.
    const SOURCE: [&str; 4] = ["synth", "train_depth", "perturb", "train_energy_local"];
    let e2e = [&SOURCE[..], &["adapt:eta", "adapt:baseline"]].concat();
    let region = [&SOURCE[..], &["train_energy_global", "adapt:eta", "adapt:eta-global"]].concat();
    let iters = [&SOURCE[..], &["adapt:eta", "adapt:eta-iters*"]].concat();
    all_pass &= report_took(4, "energy discrimination", fixture_time(&exps, &SOURCE), Some(Duration::from_secs(600)), criterion_auroc(&exps));
    all_pass &= report_took(6, "end-to-end improvement", stage_time(&exps, &e2e), Some(Duration::from_secs(1800)), criterion_e2e(&exps));
    all_pass &= report_took(7, "region-size ablation", stage_time(&exps, &region), Some(Duration::from_secs(1800)), criterion_region(&exps));
    all_pass &= report_took(8, "iteration sensitivity", stage_time(&exps, &iters), Some(Duration::from_secs(2700)), criterion_iterations(&exps));
    let t = Instant::now();
    all_pass &= report(9, "metric identities", t, None, criterion_metrics(&exps));

    if !all_pass {
        std::process::exit(1);
    }
}
