use foodwaste_tensor::ops::{conv2d, conv2d_backward, delta_layer, resize_bilinear};
use foodwaste_tensor::params::seeded_rng;
use foodwaste_tensor::{Graph, OptimConfig, Optimizer, ParamSet, Tensor};
use proptest::prelude::*;

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn conv_results_independent_of_worker_count() {
    let mut rng = seeded_rng(21);
    let x = Tensor::<f32>::uniform(&[6, 4, 12, 12], -1.0, 1.0, &mut rng);
    let k = Tensor::<f32>::uniform(&[5, 4, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::<f32>::uniform(&[5], -1.0, 1.0, &mut rng);
    let run = || {
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        let dy = y.map(|v| v.sin());
        let g = conv2d_backward(&x, &k, &dy, 1, 1, true).unwrap();
        (bits(&y), bits(&g.kernel), bits(&g.bias), bits(&g.input.unwrap()))
    };
    let serial = in_pool(1, run);
    for threads in [2, 3, 8] {
        assert_eq!(in_pool(threads, run), serial, "{threads} threads");
    }
}

fn toy_params(seed: u64) -> ParamSet<f32> {
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    p.insert("frozen/w", Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng), false).unwrap();
    p.insert("frozen/b", Tensor::uniform(&[4], -1.0, 1.0, &mut rng), false).unwrap();
    p.insert("head/w", Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng), true).unwrap();
    p.insert("head/b", Tensor::uniform(&[3], -1.0, 1.0, &mut rng), true).unwrap();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frozen_tensors_never_change(seed in 0u64..1000, steps in 1usize..20, adam in any::<bool>()) {
        let mut params = toy_params(seed);
        let initial = params.clone();
        let cfg = if adam { OptimConfig::adam(0.05) } else { OptimConfig::sgd(0.1) };
        let mut opt = Optimizer::new(cfg);
        let x = Tensor::<f32>::uniform(&[5, 3], -1.0, 1.0, &mut seeded_rng(seed + 1));
        for _ in 0..steps {
            let grads = {
                let mut g = Graph::new();
                let xv = g.input(x.clone());
                let (w, b) = (g.param(&params, "frozen/w").unwrap(), g.param(&params, "frozen/b").unwrap());
                let h = g.dense(xv, w, b).unwrap();
                let h = g.relu(h);
                let (w, b) = (g.param(&params, "head/w").unwrap(), g.param(&params, "head/b").unwrap());
                let y = g.dense(h, w, b).unwrap();
                let loss = g.softmax_cross_entropy(y, &[0, 1, 2, 0, 1]).unwrap();
                g.backward(loss).unwrap()
            };
            prop_assert!(grads.get("frozen/w").unwrap().data().iter().all(|&v| v == 0.0));
            opt.step(&mut params, &grads).unwrap();
        }
        for name in ["frozen/w", "frozen/b"] {
            prop_assert_eq!(bits(params.value(name).unwrap()), bits(initial.value(name).unwrap()));
        }
        prop_assert!(params.iter().all(|(_, p)| p.value.all_finite()));
    }

    #[test]
    fn resize_preserves_bounds(h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20, seed in 0u64..1000) {
        let x = Tensor::<f32>::uniform(&[2, h, w], -3.0, 3.0, &mut seeded_rng(seed));
        let y = resize_bilinear(&x, oh, ow).unwrap();
        prop_assert!(y.min_value() >= x.min_value());
        prop_assert!(y.max_value() <= x.max_value());
    }

    #[test]
    fn delta_layer_non_negative(seed in 0u64..10_000) {
        let mut rng = seeded_rng(seed);
        let a = Tensor::<f32>::uniform(&[2, 3, 4, 4], -5.0, 5.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[2, 3, 4, 4], -5.0, 5.0, &mut rng);
        let l = Tensor::<f32>::uniform(&[3], -2.0, 2.0, &mut rng);
        prop_assert!(delta_layer(&a, &b, &l).unwrap().data().iter().all(|&v| v >= 0.0));
    }
}
