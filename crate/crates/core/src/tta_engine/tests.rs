use eta_tensor::{Graph, Tensor};

use super::*;
use crate::data_synth::{apply_shift, generate_scene, sample_sparse, Batch, Sample, ShiftKind, ShiftSpec, SparseStrategy};
use crate::depth_net::{build_model, DepthArch, DepthModel};
use crate::energy_model::{EnergyArch, EnergyModel};
use crate::Error;

fn micro_arch(seed: u64) -> DepthArch {
    DepthArch {
        image_widths: vec![4, 8],
        sparse_widths: vec![2, 4],
        fusion_width: 8,
        decoder_widths: vec![4],
        adapt_slot: 1,
        adapt_reduction: 2,
        depth_scale: 10.0,
        seed,
    }
}

fn models(seed: u64) -> (DepthModel<f32>, EnergyModel<f32>) {
    let mut d: DepthModel<f32> = build_model(&micro_arch(seed)).unwrap();
    d.insert_adaptation().unwrap();
    let e = EnergyModel::new(&EnergyArch { widths: vec![4, 8, 8, 8], seed, ..EnergyArch::default() }, &d).unwrap();
    (d, e)
}

fn frame(seed: u64, id: &str) -> Sample {
    let mut s = generate_scene(seed, (64, 64), (1.0, 10.0)).unwrap();
    let gt = s.gt.clone().unwrap();
    s.sparse = sample_sparse(&gt, 64, 64, 120, SparseStrategy::Uniform, seed).unwrap();
    let mut s = apply_shift(&s, &ShiftSpec::new(ShiftKind::Fog, 0.25, seed)).unwrap();
    s.frame_id = id.to_string();
    s
}

fn stream(n: usize, seed: u64) -> Vec<Sample> {
    (0..n).map(|i| frame(seed * 1000 + i as u64, &format!("t-{i:04}"))).collect()
}

fn cfg() -> AdaptConfig {
    AdaptConfig { w_energy: 0.5, w_sparse: 1.0, w_smooth: 1.0, learning_rate: 1e-2, ..AdaptConfig::default() }
}

fn t64(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, v)
}

#[test]
fn energy_loss_examples() {
    for (e, want) in [(0.0, 0.0), (0.5, std::f64::consts::LN_2), (DEFAULT_ENERGY_CLAMP, 13.8155)] {
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[1, 1, 2, 3], e));
        let l = g.energy_loss(v, DEFAULT_ENERGY_CLAMP);
        let got = g.value(l).item();
        assert!((got - want).abs() < 1e-4, "e={e}: {got}");
        assert!(got >= 0.0);
    }
    // Saturated energies stay finite under the clamp.
    let mut g = Graph::new();
    let v = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0f64));
    let l = g.energy_loss(v, DEFAULT_ENERGY_CLAMP);
    assert!(g.value(l).item().is_finite());
    assert!((std::f64::consts::LN_2 - 0.693147).abs() < 1e-6);
}

#[test]
fn energy_loss_requires_binding() {
    let (d, e) = models(1);
    let (d, e) = (d.cast::<f64>(), e.cast::<f64>());
    let other = build_model::<f64>(&micro_arch(2)).unwrap();
    let s = frame(3, "a");
    let b: Batch<f64> = Batch::from_samples(&[&s]).unwrap();
    let pred = d.predict(&b.image, &b.sparse, &b.sparse_mask).unwrap();
    let l = loss_energy(&e, &d, &pred, &b.sparse, &b.sparse_mask, DEFAULT_ENERGY_CLAMP).unwrap();
    assert!(l > 0.0 && l.is_finite());
    let err = loss_energy(&e, &other, &pred, &b.sparse, &b.sparse_mask, DEFAULT_ENERGY_CLAMP).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }));
}

#[test]
fn sparse_loss_examples() {
    let mask = t64(&[1, 1, 1, 4], vec![1.0, 0.0, 1.0, 0.0]);
    let z = t64(&[1, 1, 1, 4], vec![2.0, 0.0, 4.0, 0.0]);
    let pred = t64(&[1, 1, 1, 4], vec![2.5, 7.0, 3.0, 1.0]);
    assert!((loss_sparse(&pred, &z, &mask).unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(loss_sparse(&z, &z, &mask).unwrap(), 0.0);
    let shifted = z.map(|v| v - 0.3);
    assert!((loss_sparse(&shifted, &z, &mask).unwrap() - 0.3).abs() < 1e-12);
    let none = t64(&[1, 1, 1, 4], vec![0.0; 4]);
    assert!(matches!(loss_sparse(&pred, &z, &none), Err(Error::NoAnchors(_))));
}

#[test]
fn smoothness_examples() {
    let img = t64(&[1, 3, 1, 3], vec![0.5; 9]);
    let pred = t64(&[1, 1, 1, 3], vec![0.0, 1.0, 2.0]);
    assert!((loss_smooth(&pred, &img).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(loss_smooth(&t64(&[1, 1, 1, 3], vec![4.0; 3]), &img).unwrap(), 0.0);

    let mut edge = vec![0.0; 9];
    for c in 0..3 {
        edge[c * 3 + 1] = 1e6;
    }
    let (wx, _) = edge_weights(&t64(&[1, 3, 1, 3], edge));
    assert!(wx.data()[0] < 1e-300 && wx.data()[1] < 1e-300);
    assert!(loss_smooth(&pred, &t64(&[1, 3, 2, 3], vec![0.0; 18])).is_err());
}

#[test]
fn config_validation() {
    assert!(AdaptConfig::default().validate().is_ok());
    let bad = [
        AdaptConfig { w_energy: 0.0, w_sparse: 0.0, w_smooth: 0.0, ..cfg() },
        AdaptConfig { w_sparse: -1.0, ..cfg() },
        AdaptConfig { learning_rate: 0.0, ..cfg() },
        AdaptConfig { inner_iters: 0, ..cfg() },
        AdaptConfig { energy_clamp: 1.0, ..cfg() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config { .. })), "{c:?}");
    }
    let (d, _) = models(1);
    assert!(Adapter::new(d.clone(), None, cfg()).is_err());
    let bare: DepthModel<f32> = build_model(&micro_arch(1)).unwrap();
    assert!(Adapter::baseline(bare, cfg()).is_err());
    assert!(Adapter::baseline(d, cfg()).is_ok());
}

#[test]
fn freeze_invariant_over_stream() {
    let (d, e) = models(4);
    let (theta, phi) = (d.theta.clone(), e.phi.clone());
    let psi0 = d.psi.clone().unwrap();
    for policy in [NormPolicy::Batch, NormPolicy::Ema, NormPolicy::Frozen] {
        let mut a = Adapter::new(d.clone(), Some(e.clone()), AdaptConfig { norm_policy: policy, inner_iters: 2, ..cfg() }).unwrap();
        let out = run_stream(&mut a, stream(4, 1).into_iter().map(Ok), None).unwrap();
        assert_eq!(out.frames.len(), 4);
        assert!(a.model().theta.bitwise_eq(&theta));
        assert!(a.energy().unwrap().phi.bitwise_eq(&phi));
        assert!(!a.model().psi.as_ref().unwrap().bitwise_eq(&psi0));
        let stats_moved = a.model().norm.mean != d.norm.mean;
        assert_eq!(stats_moved, policy == NormPolicy::Ema, "{policy:?}");
    }
}

#[test]
fn vanishing_learning_rate() {
    let (d, e) = models(5);
    let psi0 = d.psi.clone().unwrap();
    let mut a = Adapter::new(d, Some(e), AdaptConfig { learning_rate: 1e-12, inner_iters: 3, ..cfg() }).unwrap();
    let s = frame(1, "x");
    a.step(&Batch::from_samples(&[&s]).unwrap()).unwrap();
    let psi = a.model().psi.as_ref().unwrap();
    for (x, y) in psi.tensors().iter().zip(psi0.tensors()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!(((p - q).abs() as f64) < 1e-9);
        }
    }
}

#[test]
fn three_iterations_reduce_adapt_loss() {
    let mut wins = 0;
    for seed in 0..20u64 {
        let (d, e) = models(100 + seed);
        let mut a = Adapter::new(d, Some(e), AdaptConfig { inner_iters: 3, learning_rate: 5e-3, ..cfg() }).unwrap();
        let s = frame(200 + seed, "x");
        let out = a.step(&Batch::from_samples(&[&s]).unwrap()).unwrap();
        if out.iters[2].terms.l_adapt < out.iters[0].terms.l_adapt {
            wins += 1;
        }
    }
    assert!(wins >= 18, "loss decreased in {wins}/20 trials");
}

#[test]
fn baseline_matches_zero_energy_weight() {
    let (d, e) = models(6);
    let c = AdaptConfig { w_energy: 0.0, inner_iters: 2, ..cfg() };
    let mut with_e = Adapter::new(d.clone(), Some(e), c.clone()).unwrap();
    let mut base = Adapter::baseline(d, c).unwrap();
    for s in stream(3, 2) {
        let b: Batch<f32> = Batch::from_samples(&[&s]).unwrap();
        let x = adapt_step(&mut with_e, &b).unwrap();
        let y = baseline_step(&mut base, &b).unwrap();
        assert_eq!(x.pre.data(), y.pre.data());
        for (p, q) in x.iters.iter().zip(&y.iters) {
            assert_eq!(p.terms.l_adapt.to_bits(), q.terms.l_adapt.to_bits());
        }
    }
    assert!(with_e.model().psi.as_ref().unwrap().bitwise_eq(base.model().psi.as_ref().unwrap()));

    let (d, e) = models(6);
    let mut eta = Adapter::new(d, Some(e), cfg()).unwrap();
    let s = frame(1, "x");
    assert!(baseline_step(&mut eta, &Batch::from_samples(&[&s]).unwrap()).is_err());
}

#[test]
fn stream_accounting_and_order() {
    let (d, e) = models(7);
    let psi0 = d.psi.clone().unwrap();
    let mut a = Adapter::new(d.clone(), Some(e.clone()), AdaptConfig { inner_iters: 3, ..cfg() }).unwrap();
    let empty = run_stream(&mut a, Vec::<crate::Result<Sample>>::new(), None).unwrap();
    assert!(empty.frames.is_empty() && empty.report.records.is_empty());
    assert!(a.model().psi.as_ref().unwrap().bitwise_eq(&psi0));

    let frames = stream(10, 3);
    let out = run_stream(&mut a, frames.iter().cloned().map(Ok), None).unwrap();
    assert_eq!(out.report.iteration_count(), 30);
    assert_eq!(out.report.records.len(), 10 * (3 + 1));
    assert!(out.frames.iter().all(|f| f.pre_energy.is_some() && f.post_energy.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapt.csv");
    out.report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("frame_id,iter,l_e,l_z,l_s,l_adapt,wall_ms\n"));
    assert_eq!(text.lines().count(), 41);

    let mut swapped = frames.clone();
    swapped.swap(2, 3);
    let mut a = Adapter::new(d.clone(), Some(e.clone()), cfg()).unwrap();
    assert!(matches!(run_stream(&mut a, swapped.iter().cloned().map(Ok), None), Err(Error::StreamOrder(_))));
    let mut dup = frames[..3].to_vec();
    dup.push(frames[1].clone());
    let ids: Vec<String> = frames.iter().map(|f| f.frame_id.clone()).collect();
    let mut a = Adapter::new(d.clone(), Some(e.clone()), cfg()).unwrap();
    assert!(matches!(run_stream(&mut a, dup.into_iter().map(Ok), Some(&ids)), Err(Error::StreamOrder(_))));
    let mut a = Adapter::new(d, Some(e), cfg()).unwrap();
    assert!(run_stream(&mut a, frames[..4].iter().cloned().map(Ok), Some(&ids)).is_err());
}

#[test]
fn streams_are_deterministic_and_ignore_ground_truth() {
    let (d, e) = models(8);
    let frames = stream(4, 4);
    let run = |fr: Vec<Sample>| {
        let mut a = Adapter::new(d.clone(), Some(e.clone()), AdaptConfig { batch_size: 2, ..cfg() }).unwrap();
        run_stream(&mut a, fr.into_iter().map(Ok), None).unwrap()
    };
    let a = run(frames.clone());
    let b = run(frames.iter().cloned().map(|mut s| {
        s.gt = None;
        s
    }).collect());
    assert!(a.report.same_losses(&b.report));
    assert_eq!(a.report.records[0].frame_id, "t-0000+t-0001");
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x.post, y.post);
    }
}

#[test]
fn scaling_weights_scales_loss() {
    let (d, e) = models(9);
    let s = frame(9, "x");
    let b: Batch<f32> = Batch::from_samples(&[&s]).unwrap();
    let one = Adapter::new(d.clone(), Some(e.clone()), cfg()).unwrap().evaluate(&b).unwrap();
    let c = cfg();
    let scaled = AdaptConfig { w_energy: 3.0 * c.w_energy, w_sparse: 3.0 * c.w_sparse, w_smooth: 3.0 * c.w_smooth, ..c };
    let three = Adapter::new(d, Some(e), scaled).unwrap().evaluate(&b).unwrap();
    assert!((three.terms.l_adapt - 3.0 * one.terms.l_adapt).abs() < 1e-5 * three.terms.l_adapt.abs());
}

#[test]
fn no_anchor_frame_is_reported() {
    let (d, e) = models(10);
    let mut s = frame(10, "empty-frame");
    s.sparse.mask.iter_mut().for_each(|m| *m = false);
    s.sparse.values.iter_mut().for_each(|v| *v = 0.0);
    let mut a = Adapter::new(d.clone(), Some(e), cfg()).unwrap();
    match a.step(&Batch::from_samples(&[&s]).unwrap()) {
        Err(Error::NoAnchors(id)) => assert_eq!(id, "empty-frame"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    let mut smooth_only = Adapter::baseline(d, AdaptConfig { w_sparse: 0.0, ..cfg() }).unwrap();
    let out = smooth_only.step(&Batch::from_samples(&[&s]).unwrap()).unwrap();
    assert_eq!(out.iters[0].terms.l_sparse, None);
}
