mod common;

use bpinn::analytic_bayes::{posterior_variance_diag, NoisePrior, VarianceMethod};
use bpinn::checkpoint::{decode_checkpoint, encode_checkpoint};
use bpinn::datagen::{decode_dataset, encode_dataset, Dataset, Sample, Task};
use bpinn::forward_ops::{compose, Convolution, Downsample, LinearOperator, PsfKernel};
use bpinn::image_io::{decode_rawf64, encode_rawf64};
use bpinn::metrics::compute_metrics;
use bpinn::neural_net::{init_params_with, Architecture, HeadInit, NetworkSpec};
use bpinn::trainer::split_dataset;
use bpinn::ImageGrid;
use common::{random_image, random_psf, rng};
use proptest::prelude::*;

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..4, 0usize..10, 0usize..10, any::<u64>()).prop_map(|(half, dh, dw, seed)| {
        let k = 2 * half + 1;
        (k, k + dh, k + dw, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_adjoint_identity((k, h, w, seed) in conv_case()) {
        let mut r = rng(seed);
        let op = Convolution::new((h, w), random_psf(k, &mut r)).unwrap();
        let x = random_image(h, w, &mut r);
        let y = random_image(h, w, &mut r);
        let lhs = op.apply(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.adjoint(&y).unwrap());
        prop_assert!(relative_gap(lhs, rhs) <= 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn superres_adjoint_identity(factor in 1usize..4, lh in 3usize..8, lw in 3usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (lh * factor, lw * factor);
        let op = compose(
            Convolution::shared((lh, lw), random_psf(3, &mut r)).unwrap(),
            Downsample::shared((h, w), factor).unwrap(),
        ).unwrap();
        let x = random_image(h, w, &mut r);
        let y = random_image(lh, lw, &mut r);
        let lhs = op.apply(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.adjoint(&y).unwrap());
        prop_assert!(relative_gap(lhs, rhs) <= 1e-10);
    }

    #[test]
    fn convolution_is_linear((k, h, w, seed) in conv_case(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let op = Convolution::new((h, w), random_psf(k, &mut r)).unwrap();
        let x = random_image(h, w, &mut r);
        let y = random_image(h, w, &mut r);
        let combined = op.apply(&x.scale(a).add(&y.scale(b))).unwrap();
        let separate = op.apply(&x).unwrap().scale(a).add(&op.apply(&y).unwrap().scale(b));
        for (p, q) in combined.values().iter().zip(separate.values()) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..60, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = Dataset {
            samples: (0..n).map(|i| Sample { g: ImageGrid::filled(1, 1, i as f64), f: None }).collect(),
            task: Task::Deblur,
            source_shape: (1, 1),
            noise_variance: 0.0,
            psf: PsfKernel::delta(),
            downsample_factor: 1,
            generator_seed: 0,
        };
        let Ok((a, b)) = split_dataset(&ds, fraction, seed) else {
            // only degenerate cuts (an empty side) may be refused
            let cut = (fraction * n as f64).round() as usize;
            prop_assert!(cut == 0 || cut == n);
            return Ok(());
        };
        prop_assert_eq!(a.len(), (fraction * n as f64).round() as usize);
        let mut ids: Vec<usize> = a.samples.iter().chain(&b.samples).map(|s| s.g.values()[0] as usize).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn rawf64_round_trip_is_bit_exact(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut img = random_image(h, w, &mut rng(seed));
        img.set(0, 0, -0.0);
        let back = decode_rawf64(&encode_rawf64(&img)).unwrap();
        let bits = |g: &ImageGrid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(back.shape(), img.shape());
        prop_assert_eq!(bits(&back), bits(&img));
    }

    #[test]
    fn rawf64_corruption_is_detected(h in 1usize..8, w in 1usize..8, seed in any::<u64>(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let img = random_image(h, w, &mut rng(seed));
        let mut bytes = encode_rawf64(&img);
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(decode_rawf64(&bytes).is_err(), "flip at byte {i} went unnoticed");
    }

    #[test]
    fn metrics_delta_is_mse_times_pixels(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_image(h, w, &mut r), random_image(h, w, &mut r));
        let m = compute_metrics(&a, &b, 1.0).unwrap();
        prop_assert!(relative_gap(m.delta, m.mse * (h * w) as f64) <= 1e-12);
        prop_assert!(relative_gap(m.psnr, -10.0 * m.mse.log10()) <= 1e-12);
    }

    #[test]
    fn dataset_round_trip(count in 1usize..5, supervised in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = Dataset {
            samples: (0..count)
                .map(|_| Sample { g: random_image(4, 5, &mut r), f: supervised.then(|| random_image(4, 5, &mut r)) })
                .collect(),
            task: Task::Deblur,
            source_shape: (4, 5),
            noise_variance: 1e-3,
            psf: random_psf(3, &mut r),
            downsample_factor: 1,
            generator_seed: seed,
        };
        prop_assert_eq!(decode_dataset(&encode_dataset(&ds).unwrap()).unwrap(), ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn posterior_variance_within_prior_bounds(k in 1usize..3, v_eps in 1e-4f64..1.0, v_f in 1e-3f64..10.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let op = Convolution::new((6, 6), random_psf(2 * k + 1, &mut r)).unwrap();
        let prior = NoisePrior::centered(v_eps, v_f, (6, 6)).unwrap();
        for method in [VarianceMethod::Dense, VarianceMethod::Hutchinson { probes: 8, seed }] {
            let (var, _) = posterior_variance_diag(&op, &prior, method).unwrap();
            for &v in var.values() {
                prop_assert!(v >= 0.0 && v <= v_f * (1.0 + 1e-12), "{v} outside [0, {v_f}]");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), channels in 1usize..5) {
        let arch = Architecture { hidden_channels: vec![channels, channels + 1], dropout_after: vec![1], ..Default::default() };
        let spec = NetworkSpec::encoder_decoder((6, 6), &arch).unwrap();
        let params = init_params_with(&spec, seed, HeadInit::He).unwrap();
        let (spec2, params2) = decode_checkpoint(&encode_checkpoint(&spec, &params).unwrap()).unwrap();
        prop_assert_eq!(spec2, spec);
        prop_assert_eq!(params2, params);
    }
}
