use proptest::prelude::*;

use wavesf_core::fft::{half_width, irfft2, rfft2};
use wavesf_core::metrics::{pixel_errors, rapsd, ssim, MetricReport};
use wavesf_core::wavelet::{haar_dwt2, haar_idwt2};
use wavesf_core::Tensor;

fn tensor_strategy() -> impl Strategy<Value = (Vec<usize>, u64)> {
    (1usize..=2, 1usize..=8, 1usize..=32, 1usize..=32, any::<u64>())
        .prop_map(|(n, c, h, w, seed)| (vec![n, c, 2 * h, 2 * w], seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn haar_reconstructs_f64((shape, seed) in tensor_strategy()) {
        let x = Tensor::<f64>::normal(&shape, 0.0, 1.0, seed).unwrap();
        let back = haar_idwt2(&haar_dwt2(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn haar_reconstructs_f32((shape, seed) in tensor_strategy()) {
        let x = Tensor::<f32>::normal(&shape, 0.0, 1.0, seed).unwrap();
        let back = haar_idwt2(&haar_dwt2(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-5);
    }

    #[test]
    fn haar_preserves_energy((shape, seed) in tensor_strategy()) {
        let x = Tensor::<f64>::normal(&shape, 0.0, 1.0, seed).unwrap();
        let e = haar_dwt2(&x).unwrap().energy();
        prop_assert!((e - x.sum_sq()).abs() <= 1e-4 * x.sum_sq());
    }

    #[test]
    fn fft_round_trip_f32(h in 1usize..=24, w in 1usize..=24, seed in any::<u64>()) {
        let x = Tensor::<f32>::normal(&[2, h, w], 0.0, 1.0, seed).unwrap();
        let back = irfft2(&rfft2(x.data(), 2, h, w), 2, h, w);
        let err = back.iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err <= 1e-5, "max error {err}");
    }

    #[test]
    fn fft_parseval(h in 1usize..=24, w in 1usize..=24, seed in any::<u64>()) {
        let x = Tensor::<f64>::normal(&[h, w], 0.0, 1.0, seed).unwrap();
        let spec = rfft2(x.data(), 1, h, w);
        let wf = half_width(w);
        // columns without a Hermitian partner appear once in the full spectrum
        let mut full = 0.0;
        for r in 0..h {
            for k in 0..wf {
                let (re, im) = (spec[2 * (r * wf + k)], spec[2 * (r * wf + k) + 1]);
                let mult = if k == 0 || (w % 2 == 0 && k == w / 2) { 1.0 } else { 2.0 };
                full += mult * (re * re + im * im);
            }
        }
        let energy = x.sum_sq();
        prop_assert!((full / (h * w) as f64 - energy).abs() <= 1e-4 * energy);
    }

    #[test]
    fn ssim_of_identical_frames_is_one(seed in any::<u64>()) {
        let x = Tensor::<f64>::normal(&[1, 2, 1, 16, 16], 0.5, 0.2, seed).unwrap();
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rmse_squared_is_mse(seed in any::<u64>()) {
        let a = Tensor::<f64>::normal(&[2, 3, 1, 12, 12], 0.0, 1.0, seed).unwrap();
        let b = Tensor::<f64>::normal(&[2, 3, 1, 12, 12], 0.0, 1.0, seed ^ 1).unwrap();
        let e = pixel_errors(&a, &b).unwrap();
        prop_assert!((e.rmse * e.rmse - e.mse).abs() <= 4.0 * f64::EPSILON * e.mse);
    }

    #[test]
    fn constant_offset_errors(c in -3.0f64..3.0, seed in any::<u64>()) {
        let a = Tensor::<f64>::normal(&[1, 2, 1, 12, 12], 0.0, 1.0, seed).unwrap();
        let b = a.map(|v| v + c);
        let e = pixel_errors(&b, &a).unwrap();
        prop_assert!((e.mse - c * c).abs() <= 1e-12 * (1.0 + c * c));
        prop_assert!((e.mae - c.abs()).abs() <= 1e-12 * (1.0 + c.abs()));
    }
}

#[test]
fn constant_image_dc_bin() {
    let (h, w, c) = (6, 10, 0.75);
    let spec = rfft2(&vec![c; h * w], 1, h, w);
    assert_eq!(spec[0], c * (h * w) as f64);
    assert_eq!(spec[1], 0.0);
    assert!(spec[2..].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn rapsd_concentrates_integer_cosine() {
    let (h, w) = (32, 32);
    for k in 1..=8usize {
        let plane: Vec<f64> = (0..h * w)
            .map(|i| (2.0 * std::f64::consts::PI * k as f64 * (i % w) as f64 / w as f64).cos())
            .collect();
        let r = rapsd(&plane, h, w).unwrap();
        // recover annulus totals from the per-bin means via bin occupancy
        let mut counts = vec![0usize; r.len()];
        for i in 0..h {
            for j in 0..w {
                let di = ((i + h / 2) % h) as f64 - (h / 2) as f64;
                let dj = ((j + w / 2) % w) as f64 - (w / 2) as f64;
                let b = (di * di + dj * dj).sqrt().round() as usize;
                if (1..=r.len()).contains(&b) {
                    counts[b - 1] += 1;
                }
            }
        }
        let totals: Vec<f64> = r.iter().zip(&counts).map(|(m, &c)| m * c as f64).collect();
        let all: f64 = totals.iter().sum();
        assert!(totals[k - 1] >= 0.999 * all, "k={k}: {} of {all}", totals[k - 1]);
    }
}

#[test]
fn perfect_prediction_report() {
    let x = Tensor::<f32>::normal(&[2, 3, 1, 16, 16], 0.5, 0.1, 9).unwrap();
    let r = MetricReport::compute(&x, &x).unwrap();
    assert_eq!((r.mse, r.mae, r.rmse), (0.0, 0.0, 0.0));
    assert!((r.ssim - 1.0).abs() <= 1e-6);
    assert_eq!(r.per_frame_mse.len(), 3);
}
