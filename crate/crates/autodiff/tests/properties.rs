use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scanmask_autodiff::{
    Adam, AdamConfig, Graph, Optimizer, ParamSet, RmsProp, RmsPropConfig, Tensor,
};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// <L x, u> against <x, L^T u>, where L^T u is read off the tape as the
/// gradient of <L x, u> with respect to x.
fn adjoint_gap(
    shape: &[usize],
    seed: u64,
    build: impl Fn(&mut Graph<f64>, scanmask_autodiff::Var) -> scanmask_autodiff::Var,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let x = rand_vec(&mut rng, n);
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(shape.to_vec(), x.clone()).unwrap());
    let y = build(&mut g, xv);
    let u = rand_vec(&mut rng, g.value(y).numel());
    let lx_u = inner(g.value(y).data(), &u);
    let uv = g.constant(Tensor::new(g.value(y).shape().to_vec(), u).unwrap());
    let l = g.dot(y, uv).unwrap();
    let grads = g.backward(l).unwrap();
    let x_ltu = inner(&x, grads.get(xv).unwrap());
    (lx_u - x_ltu).abs() / lx_u.abs().max(1.0)
}

#[test]
fn linear_layers_are_adjoint_consistent() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let w = Tensor::new(vec![5, 3], rand_vec(&mut rng, 15)).unwrap();
        let zero_b = Tensor::zeros(&[3]);
        let gap = adjoint_gap(&[4, 5], seed, |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(zero_b.clone());
            g.dense(x, w, b).unwrap()
        });
        assert!(gap < 1e-10, "dense {gap}");

        // dense as a linear map of its weights
        let xin = Tensor::new(vec![4, 5], rand_vec(&mut rng, 20)).unwrap();
        let gap = adjoint_gap(&[5, 3], seed, |g, w| {
            let x = g.constant(xin.clone());
            let b = g.constant(zero_b.clone());
            g.dense(x, w, b).unwrap()
        });
        assert!(gap < 1e-10, "dense weights {gap}");

        let k = Tensor::new(vec![4, 3, 3, 3], rand_vec(&mut rng, 108)).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let gap = adjoint_gap(&[3, 9, 7], seed, |g, x| {
                let k = g.constant(k.clone());
                g.conv2d(x, k, stride, pad).unwrap()
            });
            assert!(gap < 1e-10, "conv {stride}/{pad}: {gap}");
        }
        let xin = Tensor::new(vec![3, 6, 6], rand_vec(&mut rng, 108)).unwrap();
        let gap = adjoint_gap(&[4, 3, 3, 3], seed, |g, k| {
            let x = g.constant(xin.clone());
            g.conv2d(x, k, 1, 1).unwrap()
        });
        assert!(gap < 1e-10, "conv kernels {gap}");

        let gap = adjoint_gap(&[2, 6, 4], seed, |g, x| {
            let p = g.avg_pool2(x).unwrap();
            g.upsample2(p).unwrap()
        });
        assert!(gap < 1e-10, "pool/upsample {gap}");
    }
}

#[test]
fn bce_is_finite_for_extreme_logits() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::from_vec(vec![1e4, -1e4, 1e4, -1e4]));
    let l = g.bce_with_logits(a, &[0.0, 1.0, 1.0, 0.0]).unwrap();
    let v = g.value(l).item();
    assert!(v.is_finite());
    assert!((v - 5e3).abs() < 1e-9, "{v}");
    let grads = g.backward(l).unwrap();
    assert!(grads.get(a).unwrap().iter().all(|v| v.is_finite()));

    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::from_vec(vec![1e4f32, -1e4]));
    let l = g.bce_with_logits(a, &[0.0, 1.0]).unwrap();
    assert!(g.value(l).item().is_finite());
}

proptest! {
    #[test]
    fn st_binarize_budget_and_forced(
        scores in proptest::collection::vec(0.0f64..1.0, 1..40),
        budget_frac in 0.0f64..=1.0,
        forced_seed in any::<u64>(),
    ) {
        let n = scores.len();
        let budget = ((n as f64) * budget_frac).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(forced_seed);
        let n_forced = if budget == 0 { 0 } else { rng.random_range(0..=budget) };
        let mut forced: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let j = rng.random_range(i..n);
            forced.swap(i, j);
        }
        forced.truncate(n_forced);

        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_vec(scores.clone()));
        let m = g.st_binarize(p, budget, &forced).unwrap();
        let mv = g.value(m).data();
        prop_assert_eq!(mv.iter().filter(|&&v| v == 1.0).count(), budget);
        prop_assert!(mv.iter().all(|&v| v == 0.0 || v == 1.0));
        for &f in &forced {
            prop_assert_eq!(mv[f], 1.0);
        }
        // every unselected free score is <= every selected free score
        let min_sel = (0..n).filter(|&i| mv[i] == 1.0 && !forced.contains(&i))
            .map(|i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_unsel = (0..n).filter(|&i| mv[i] == 0.0)
            .map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(max_unsel <= min_sel);
    }
}

fn trajectory(seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::<f64>::new();
    ps.add("w", Tensor::new(vec![3, 2], rand_vec(&mut rng, 6)).unwrap());
    ps.add("b", Tensor::new(vec![2], rand_vec(&mut rng, 2)).unwrap());
    let mut adam = Adam::new(&ps, AdamConfig::with_lr(1e-2));
    let mut rms = RmsProp::new(&ps, RmsPropConfig::with_lr(1e-3));
    let x = Tensor::new(vec![4, 3], rand_vec(&mut rng, 12)).unwrap();
    let mut out = Vec::new();
    for step in 0..25 {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let y = g.dense(xv, bound[0], bound[1]).unwrap();
        let s = g.sigmoid(y);
        let l = g
            .bce_with_logits(s, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0])
            .unwrap();
        let grads = g.backward(l).unwrap();
        ps.accumulate(&ps.collect_grads(&grads, &bound)).unwrap();
        if step % 2 == 0 {
            adam.step(&mut ps).unwrap();
        } else {
            rms.step(&mut ps).unwrap();
        }
        out.push(ps.checksum());
    }
    out
}

#[test]
fn optimizer_trajectories_are_bit_identical() {
    assert_eq!(trajectory(42), trajectory(42));
    assert_ne!(trajectory(42), trajectory(43));
}
