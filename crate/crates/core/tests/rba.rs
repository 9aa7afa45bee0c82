use candle_core::{DType, Device, Tensor, Var};
use dts_core::nn::{upsample_nearest, ParamStore, Scope};
use dts_core::rba::{attention_maps, boundary_map, RbaCascade, RbaStage};
use dts_core::util::{randn, seeded};
use proptest::prelude::*;

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn brute_force_gradient(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |i: isize, j: isize| {
        v[i.clamp(0, h as isize - 1) as usize * w + j.clamp(0, w as isize - 1) as usize]
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for di in -1..=1 {
                for dj in -1..=1 {
                    hi = hi.max(at(i + di, j + dj));
                    lo = lo.min(at(i + di, j + dj));
                }
            }
            out[i as usize * w + j as usize] = hi - lo;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn boundary_matches_brute_force(v in prop::collection::vec(0.0f64..1.0, 64)) {
        let t = Tensor::from_vec(v.clone(), (1, 8, 8, 1), &Device::Cpu).unwrap();
        prop_assert_eq!(flat(&boundary_map(&t).unwrap()), brute_force_gradient(&v, 8, 8));
    }

    #[test]
    fn maps_stay_in_the_unit_interval(
        classes in 2usize..6,
        scale in 0.1f64..50.0,
        weight in 0.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let logits = (randn(&mut rng, &[2, 8, 8, classes], DType::F64, &Device::Cpu).unwrap() * scale).unwrap();
        let maps = attention_maps(&logits, weight).unwrap();
        for m in [&maps.reverse, &maps.boundary, &maps.modulation] {
            prop_assert_eq!(m.dims(), &[2, 8, 8, 1]);
            prop_assert!(flat(m).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

fn zero(v: &Var) {
    v.set(&v.zeros_like().unwrap()).unwrap();
}

fn silence(stage: &RbaStage) {
    zero(stage.out_proj().weight());
    zero(stage.out_proj().bias().expect("output bias"));
}

#[test]
fn zeroed_heads_reduce_to_nearest_upsampling() {
    let dev = Device::Cpu;
    let mut store = ParamStore::new(1, DType::F64, dev.clone());
    let cascade = RbaCascade::new(&mut store, &Scope::root("rba"), &[16, 8, 4], 3, 1.0).unwrap();
    let mut rng = seeded(2);
    let deepest = randn(&mut rng, &[2, 2, 2, 3], DType::F64, &dev).unwrap();
    let features: Vec<Tensor> = [(4, 16), (8, 8), (16, 4)]
        .iter()
        .map(|&(s, d)| randn(&mut rng, &[2, s, s, d], DType::F64, &dev).unwrap())
        .collect();
    let refined = cascade.forward(&deepest, &features, 32).unwrap();
    let plain = upsample_nearest(&deepest, 16).unwrap();
    assert_ne!(flat(&refined), flat(&plain));

    silence(&cascade.stages()[1]);
    let coarse = randn(&mut rng, &[2, 4, 4, 3], DType::F64, &dev).unwrap();
    let single = cascade.stages()[1].forward(&features[1], &coarse).unwrap();
    assert_eq!(flat(&single), flat(&upsample_nearest(&coarse, 2).unwrap()));

    for stage in cascade.stages() {
        silence(stage);
    }
    assert_eq!(
        flat(&cascade.forward(&deepest, &features, 32).unwrap()),
        flat(&plain)
    );
}

#[test]
fn residual_only_sees_modulated_features() {
    let dev = Device::Cpu;
    let mut store = ParamStore::new(3, DType::F64, dev.clone());
    let stage = RbaStage::new(&mut store, &Scope::root("s"), 4, 2, 0.0).unwrap();
    let mut rng = seeded(4);
    let features = randn(&mut rng, &[1, 4, 4, 4], DType::F64, &dev).unwrap();
    // confident foreground everywhere: reverse map is ~0, so features are gated off
    let confident = Tensor::from_vec([-40.0, 40.0].repeat(4), (1, 2, 2, 2), &dev).unwrap();
    let a = stage.forward(&features, &confident).unwrap();
    let b = stage
        .forward(&(&features * 7.0).unwrap(), &confident)
        .unwrap();
    let err = flat(&a)
        .iter()
        .zip(flat(&b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
    // uncertain everywhere: the gate is open and features matter
    let unsure = Tensor::zeros((1, 2, 2, 2), DType::F64, &dev).unwrap();
    let c = stage.forward(&features, &unsure).unwrap();
    let d = stage.forward(&(&features * 7.0).unwrap(), &unsure).unwrap();
    assert_ne!(flat(&c), flat(&d));
}
