use proptest::prelude::*;

use qlocal::data::{partition_dirichlet, partition_labels, Concentration, Dataset};
use qlocal::fed::{aggregate_clients, aggregation_weights};
use qlocal::ndcore::{DenseTensor, RngStream};
use qlocal::optim::{init_state, AdamHyper, OptimizerMode, Storage};
use qlocal::Error;
use qlocal::quant::{quantize_linear, quantize_log, QuantizedTensor, DEFAULT_EPSILON};

fn block_size() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 32, 64, 128])
}

/// Magnitudes over many decades, with some exact zeros.
fn magnitudes(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(
        prop_oneof![1 => Just(0.0f32), 9 => (-13.0f64..1.0).prop_map(|e| 10f64.powf(e) as f32)],
        1..max_len,
    )
}

fn signed_values(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e3f32..1e3, 1..max_len)
}

/// Bound on the relative log-space error including the offset term:
/// `x̃ + ε` is within a factor `exp(a)` of `x + ε` (plus the FP32 rounding of
/// the stored log range), which costs a factor `1 + ε/x` in `x`.
fn log_bound(lo: f32, hi: f32, x: f64) -> f64 {
    let a = (f64::from(hi) - f64::from(lo)) / 255.0;
    let eps = f64::from(DEFAULT_EPSILON);
    let metadata = 4.0 * f64::from(f32::EPSILON) * f64::from(lo.abs().max(hi.abs()).max(1.0));
    a.exp_m1() + eps / x * (1.0 - (-a).exp()) + (1.0 + eps / x) * metadata + 1e-6
}

fn check_log_bound(qt: &QuantizedTensor, x: &[f32]) -> Result<(), TestCaseError> {
    let b = qt.block_size();
    for (i, (&a, &e)) in qt.dequantize().iter().zip(x).enumerate() {
        if e == 0.0 {
            prop_assert_eq!(a, 0.0);
            continue;
        }
        let blk = i / b;
        let rel = (f64::from(a) - f64::from(e)).abs() / f64::from(e);
        prop_assert!(rel <= log_bound(qt.lo()[blk], qt.hi()[blk], f64::from(e)), "x={e:e} got {a:e} rel {rel:e}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn linear_error_within_one_step(x in signed_values(400), b in block_size()) {
        let qt = quantize_linear(&x, b).unwrap();
        for (i, (&a, &e)) in qt.dequantize().iter().zip(&x).enumerate() {
            let range = f64::from(qt.hi()[i / b]) - f64::from(qt.lo()[i / b]);
            prop_assert!((f64::from(a) - f64::from(e)).abs() <= range / 255.0);
        }
    }

    #[test]
    fn log_error_is_multiplicative(x in magnitudes(400), b in block_size()) {
        let qt = quantize_log(&x, b, DEFAULT_EPSILON).unwrap();
        check_log_bound(&qt, &x)?;
    }

    #[test]
    fn requantizing_is_idempotent(x in signed_values(300), v in magnitudes(300), b in block_size()) {
        let q = quantize_linear(&x, b).unwrap();
        prop_assert_eq!(quantize_linear(&q.dequantize(), b).unwrap(), q);
        let q = quantize_log(&v, b, DEFAULT_EPSILON).unwrap();
        prop_assert_eq!(quantize_log(&q.dequantize(), b, DEFAULT_EPSILON).unwrap(), q);
    }

    #[test]
    fn codes_preserve_order_within_blocks(x in signed_values(300), v in magnitudes(300), b in block_size()) {
        for (values, qt) in [
            (&x, quantize_linear(&x, b).unwrap()),
            (&v, quantize_log(&v, b, DEFAULT_EPSILON).unwrap()),
        ] {
            for (blk, chunk) in values.chunks(b).enumerate() {
                let codes = &qt.payload()[blk * b..blk * b + chunk.len()];
                for i in 0..chunk.len() {
                    for j in 0..chunk.len() {
                        if chunk[i] < chunk[j] {
                            prop_assert!(codes[i] <= codes[j]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constant_blocks_are_exact(c in -1e6f32..1e6, len in 1usize..200, b in block_size()) {
        let x = vec![c; len];
        prop_assert_eq!(quantize_linear(&x, b).unwrap().dequantize(), x);
        let v = vec![c.abs(); len];
        let qt = quantize_log(&v, b, DEFAULT_EPSILON).unwrap();
        for &y in &qt.dequantize() {
            prop_assert_eq!(y, qt.dequantize()[0]);
            if c != 0.0 {
                let rel = (f64::from(y) - f64::from(c.abs())).abs() / f64::from(c.abs());
                prop_assert!(rel <= log_bound(qt.lo()[0], qt.hi()[0], f64::from(c.abs())));
            }
        }
    }

    #[test]
    fn serialization_round_trips(x in signed_values(300), v in magnitudes(300), b in block_size()) {
        for qt in [quantize_linear(&x, b).unwrap(), quantize_log(&v, b, DEFAULT_EPSILON).unwrap()] {
            let bytes = qt.to_bytes().unwrap();
            prop_assert_eq!(bytes.len(), qt.serialized_len());
            prop_assert_eq!(QuantizedTensor::from_bytes(&bytes).unwrap(), qt);
        }
    }
}

fn concentration() -> impl Strategy<Value = Concentration> {
    prop_oneof![
        1 => Just(Concentration::Iid),
        4 => (0.05f64..5.0).prop_map(Concentration::Dirichlet),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn partitions_cover_the_dataset_disjointly(
        seed in any::<u64>(),
        n in 1usize..400,
        classes in 1usize..12,
        clients in 1usize..12,
        conc in concentration(),
    ) {
        prop_assume!(clients <= n);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
        let parts = match partition_labels(&mut RngStream::new(seed, 0), &labels, classes, clients, conc) {
            Ok(p) => p,
            // strongly skewed draws over few samples can exhaust the redraw budget
            Err(Error::Data(msg)) if msg.contains("empty clients") => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(parts.len(), clients);
        let mut seen = vec![false; n];
        for p in &parts {
            prop_assert!(!p.sample_indices.is_empty());
            prop_assert_eq!(p.class_histogram.iter().sum::<usize>(), p.sample_indices.len());
            for &i in &p.sample_indices {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_depends_on_labels_only(seed in any::<u64>(), n in 10usize..200, conc in concentration()) {
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let mut frng = RngStream::new(seed, 9);
        let a = DenseTensor::new(frng.gaussian_vec(0.0, 1.0, n * 3), vec![n, 3]).unwrap();
        let b = DenseTensor::new(frng.gaussian_vec(5.0, 2.0, n * 3), vec![n, 3]).unwrap();
        let da = Dataset::new(a, labels.clone(), 4).unwrap();
        let db = Dataset::new(b, labels, 4).unwrap();
        let pa = partition_dirichlet(&mut RngStream::new(seed, 0), &da, 5, conc).unwrap();
        let pb = partition_dirichlet(&mut RngStream::new(seed, 0), &db, 5, conc).unwrap();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn aggregation_weights_sum_to_one(sizes in prop::collection::vec(1usize..100_000, 1..20)) {
        let w = aggregation_weights(&sizes);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn aggregation_ignores_arrival_order(
        clients in prop::collection::vec((prop::collection::vec(-10f32..10.0, 6), 1usize..1000), 1..8),
        rotate in 0usize..8,
    ) {
        let entries: Vec<(usize, Vec<DenseTensor>, usize)> = clients
            .iter()
            .enumerate()
            .map(|(k, (p, n))| (k, vec![DenseTensor::from_vec(p.clone()).unwrap()], *n))
            .collect();
        let mut shuffled = entries.clone();
        let r = rotate % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let a = aggregate_clients(entries).unwrap();
        let b = aggregate_clients(shuffled).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn grads(rng: &mut RngStream, len: usize) -> Vec<DenseTensor> {
    let sigma = 10f64.powf(rng.uniform_range(-4.0, 0.0)) as f32;
    vec![DenseTensor::from_vec(rng.gaussian_vec(0.0, sigma, len)).unwrap()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stored_moments_track_the_fp32_path(seed in any::<u64>(), len in 1usize..300, b in block_size()) {
        let mut rng = RngStream::new(seed, 0);
        let g = grads(&mut rng, len);
        let params = vec![DenseTensor::from_vec(rng.gaussian_vec(0.0, 1.0, len)).unwrap()];
        let hyper = AdamHyper::default();
        let shapes = vec![vec![len]];

        let mut exact = init_state(&shapes, OptimizerMode::Fp32, hyper, b).unwrap();
        exact.step(&mut params.clone(), &g).unwrap();
        let mut quant = init_state(&shapes, OptimizerMode::QLocalAdam, hyper, b).unwrap();
        quant.step(&mut params.clone(), &g).unwrap();

        let qm = quant.quantized_momentum(0).unwrap();
        for (i, (&a, &e)) in quant.momentum()[0].iter().zip(&exact.momentum()[0]).enumerate() {
            let range = f64::from(qm.hi()[i / b]) - f64::from(qm.lo()[i / b]);
            prop_assert!((f64::from(a) - f64::from(e)).abs() <= range / 255.0);
        }
        check_log_bound(quant.quantized_variance(0).unwrap(), &exact.variance()[0])?;
    }

    #[test]
    fn updates_stay_bounded(seed in any::<u64>(), len in 1usize..200, steps in 1usize..6, mode_ix in 0usize..5) {
        let mode = OptimizerMode::ALL[mode_ix];
        let mut rng = RngStream::new(seed, 1);
        let hyper = AdamHyper::default();
        let mut params = vec![DenseTensor::from_vec(rng.gaussian_vec(0.0, 1.0, len)).unwrap()];
        let mut st = init_state(&[vec![len]], mode, hyper, 64).unwrap();
        for t in 1..=steps {
            let before = params[0].data().to_vec();
            let m_prev = st.momentum()[0].clone();
            let g = grads(&mut rng, len);
            st.step(&mut params, &g).unwrap();
            prop_assert!(st.variance()[0].iter().all(|&v| v >= 0.0));
            // m is rebuilt here from the stored previous value, as the step does
            let bc1 = (1.0 - f64::from(hyper.beta1).powi(t as i32)) as f32;
            for j in 0..len {
                let m = hyper.beta1 * m_prev[j] + (1.0 - hyper.beta1) * g[0].data()[j];
                let limit = f64::from(hyper.lr) * f64::from(m / bc1).abs() / f64::from(hyper.eps);
                let delta = (f64::from(params[0].data()[j]) - f64::from(before[j])).abs();
                prop_assert!(delta <= limit * (1.0 + 1e-5) + 1e-12, "mode {mode} step {t}: {delta} > {limit}");
            }
            if mode.storage().0 != Storage::Fp32 {
                break;
            }
        }
    }
}
