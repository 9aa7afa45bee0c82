use candle_core::{DType, Device, Tensor};
use dts_core::diffusion::{
    argmax_labels, encode_label, one_hot, p_sample_step, predict_x0, q_sample, sample_segmentation,
    sample_segmentation_with_seeds, NoiseSchedule, OracleDenoiser, SamplingConfig,
};
use dts_core::util::{randn, seeded};
use proptest::prelude::*;
use rand::Rng;

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

proptest! {
    #[test]
    fn schedule_invariants(steps in 1usize..2000, start in 1e-5f64..0.1, extra in 0.0f64..0.5) {
        let end = (start + extra).min(0.9);
        // schedules whose alpha_bar underflows are rejected instead of built
        let Ok(s) = NoiseSchedule::linear(steps, start, end) else {
            let logs: f64 = (0..steps)
                .map(|t| (1.0 - (start + (end - start) * t as f64 / (steps.max(2) - 1) as f64)).ln())
                .sum();
            prop_assert!(logs < f64::MIN_POSITIVE.ln() + 1.0);
            return Ok(());
        };
        let mut prod = 1.0;
        for t in 0..steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prod *= 1.0 - s.beta(t);
            prop_assert!(((s.alpha_bar(t) - prod) / prod).abs() < 1e-12);
            prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0 - s.beta(0));
            if t > 0 {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn q_sample_predict_x0_round_trip(seed in any::<u64>(), t in 0usize..1000) {
        let s = default_schedule();
        let mut rng = seeded(seed);
        let v: Vec<f64> = (0..96).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let x0 = Tensor::from_vec(v, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let eps = randn(&mut rng, &[2, 3, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let x_t = q_sample(&x0, t, &eps, &s).unwrap();
        let back = predict_x0(&x_t, t, &eps, &s, false).unwrap();
        let err = flat(&x0).iter().zip(flat(&back)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-5, "t={} err={}", t, err);
    }
}

#[test]
fn zero_noise_scales_x0() {
    let s = default_schedule();
    let x0 = Tensor::new(&[0.3f64, -1.0, 1.0], &Device::Cpu).unwrap();
    let x_t = q_sample(&x0, 400, &x0.zeros_like().unwrap(), &s).unwrap();
    let a = s.alpha_bar(400).sqrt();
    assert_eq!(flat(&x_t), vec![0.3 * a, -a, a]);
}

#[test]
fn q_sample_moments_match_closed_form() {
    let s = default_schedule();
    let n = 10_000;
    let mut rng = seeded(31);
    for (t, x0v) in [(0, 0.0), (250, 0.0), (999, 0.0), (500, 0.7)] {
        let x0 = Tensor::full(x0v, n, &Device::Cpu).unwrap();
        let eps = randn(&mut rng, &[n], DType::F64, &Device::Cpu).unwrap();
        let x = flat(&q_sample(&x0, t, &eps, &s).unwrap());
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let (mu, sigma2) = (ab.sqrt() * x0v, 1.0 - ab);
        let se_mean = (sigma2 / n as f64).sqrt();
        let se_var = sigma2 * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - mu).abs() < 3.0 * se_mean,
            "t={t}: mean {mean} vs {mu}"
        );
        assert!(
            (var - sigma2).abs() < 3.0 * se_var,
            "t={t}: var {var} vs {sigma2}"
        );
    }
}

fn random_labels(seed: u64, b: usize, h: usize, w: usize, classes: u8) -> Tensor {
    let mut rng = seeded(seed);
    let v: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..classes)).collect();
    Tensor::from_vec(v, (b, h, w), &Device::Cpu).unwrap()
}

#[test]
fn oracle_reverse_loop_recovers_x0() {
    let s = default_schedule();
    let labels = random_labels(3, 2, 8, 8, 3);
    let x0 = encode_label(&one_hot(&labels, 3, DType::F64).unwrap()).unwrap();
    let mut rng = seeded(4);
    let shape = x0.dims().to_vec();
    let mut x = randn(&mut rng, &shape, DType::F64, &Device::Cpu).unwrap();
    for t in (0..s.len()).rev() {
        let ab = s.alpha_bar(t);
        let eps = ((&x - (&x0 * ab.sqrt()).unwrap()).unwrap() / (1.0 - ab).sqrt()).unwrap();
        let noise = randn(&mut rng, &shape, DType::F64, &Device::Cpu).unwrap();
        x = p_sample_step(&x, t, &eps, &s, Some(&noise)).unwrap();
    }
    let err = flat(&x)
        .iter()
        .zip(flat(&x0))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn oracle_sampling_returns_the_known_labels() {
    let s = default_schedule();
    let labels = random_labels(5, 2, 8, 8, 4);
    let x0 = encode_label(&one_hot(&labels, 4, DType::F64).unwrap()).unwrap();
    let oracle = OracleDenoiser::new(x0, s.clone());
    let img = Tensor::zeros((2, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
    let cfg = SamplingConfig {
        steps: 50,
        ensemble: 1,
        seed: 9,
    };
    let p = sample_segmentation(&oracle, &img, &s, &cfg).unwrap();
    let got = argmax_labels(&p).unwrap().to_dtype(DType::U8).unwrap();
    assert_eq!(flat(&got), flat(&labels));
    let sums = flat(&p.sum(1).unwrap());
    assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-6));
    assert_eq!(
        flat(&p),
        flat(&sample_segmentation(&oracle, &img, &s, &cfg).unwrap())
    );

    let one = sample_segmentation_with_seeds(&oracle, &img, &s, 20, &[7]).unwrap();
    let two = sample_segmentation_with_seeds(&oracle, &img, &s, 20, &[7, 7]).unwrap();
    let err = flat(&one)
        .iter()
        .zip(flat(&two))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12);
}
