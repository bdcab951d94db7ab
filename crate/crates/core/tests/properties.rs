use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rawspoof::container::{Container, Record};
use rawspoof::data::FrameSequence;
use rawspoof::gmm::{em_fit, llr_score, DiagonalGmm};
use rawspoof::layers::{log_softmax, softmax, BatchNorm, Mode, ParamSet};
use rawspoof::metrics::{evaluate, far, frr, select_threshold, ScoreRecord, Truth};
use rawspoof::model::{build_seeded, tiny_config};
use rawspoof::tensor::{Tape, Tensor};
use rawspoof::train::{adadelta_update, batch_ranges};
use rawspoof::wav::{encode_wav, parse_wav};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn score_set() -> impl Strategy<Value = Vec<ScoreRecord>> {
    prop::collection::vec((0u8..8, any::<bool>()), 2..30).prop_map(|v| {
        let mut out: Vec<ScoreRecord> = v
            .into_iter()
            .enumerate()
            .map(|(i, (s, g))| {
                let truth = if g { Truth::Genuine } else { Truth::Attack };
                ScoreRecord::new(format!("u{i}"), f64::from(s) * 0.25, truth, "C")
            })
            .collect();
        out[0].truth = Truth::Genuine;
        out[1].truth = Truth::Attack;
        out
    })
}

proptest! {
    #[test]
    fn accumulation_is_additive(a in values(6), b in values(6)) {
        let run = |both: bool, first: bool| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(a.clone()), true);
            let w = t.constant(Tensor::vector(b.clone()));
            let sq = t.mul(x, x).unwrap();
            let l1 = t.sum(sq);
            let xw = t.mul(x, w).unwrap();
            let l2 = t.sum(xw);
            let loss = match (both, first) {
                (true, _) => t.add(l1, l2).unwrap(),
                (false, true) => l1,
                (false, false) => l2,
            };
            t.backward(loss).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let joint = run(true, true);
        let (g1, g2) = (run(false, true), run(false, false));
        for i in 0..6 {
            prop_assert!((joint[i] - (g1[i] + g2[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn reshape_slice_concat_are_bit_exact(data in values(24), cut in 1usize..4) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![4, 6], data.clone()).unwrap());
        let r = t.reshape(x, &[2, 12]).unwrap();
        let back = t.reshape(r, &[4, 6]).unwrap();
        prop_assert_eq!(t.value(back).data(), &data[..]);
        let head = t.slice(x, 0, 0, cut).unwrap();
        let tail = t.slice(x, 0, cut, 4).unwrap();
        let joined = t.concat(&[head, tail], 0).unwrap();
        prop_assert_eq!(t.value(joined).data(), &data[..]);
    }

    #[test]
    fn conv_output_length(len in 1usize..60, k in 1usize..20, stride in 1usize..8) {
        prop_assume!(k <= len);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, len]));
        let w = t.constant(Tensor::zeros(&[2, 1, k]));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.conv1d(x, w, b, stride).unwrap();
        prop_assert_eq!(t.shape(y), &[1, 2, (len - k) / stride + 1][..]);
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-500.0f64..500.0, 1..8)) {
        let p: f64 = softmax(&logits).iter().sum();
        prop_assert!((p - 1.0).abs() <= 1e-12);
        prop_assert!(log_softmax(&logits).iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn bn_eval_is_batch_independent_affine(x in values(8), y in values(8), a in -2.0f64..2.0) {
        let mut params = ParamSet::new();
        let mut bn = BatchNorm::new(&mut params, "bn", 2);
        bn.running_mean = vec![0.3, -0.7];
        bn.running_var = vec![1.5, 0.2];
        let apply = |batch: &[&[f64]]| {
            let mut t = Tape::new();
            let bound = params.bind(&mut t, false);
            let flat: Vec<f64> = batch.iter().flat_map(|r| r.iter().copied()).collect();
            let v = t.constant(Tensor::new(vec![batch.len(), 2, 4], flat).unwrap());
            let (out, stats) = bn.forward(&mut t, &bound, v, Mode::Eval).unwrap();
            assert!(stats.is_none());
            t.value(out).data().to_vec()
        };
        let alone = apply(&[&x]);
        let paired = apply(&[&x, &y]);
        prop_assert_eq!(&alone[..], &paired[..8]);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + (1.0 - a) * q).collect();
        let (fx, fy, fm) = (apply(&[&x]), apply(&[&y]), apply(&[&mixed]));
        for i in 0..8 {
            prop_assert!((fm[i] - (a * fx[i] + (1.0 - a) * fy[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn threshold_matches_exhaustive_sweep(dev in score_set()) {
        let choice = select_threshold(&dev).unwrap();
        let attack: Vec<f64> = dev.iter().filter(|r| r.truth == Truth::Attack).map(|r| r.score).collect();
        let real: Vec<f64> = dev.iter().filter(|r| r.truth == Truth::Genuine).map(|r| r.score).collect();
        let mut best = (f64::INFINITY, f64::INFINITY);
        for theta in dev.iter().map(|r| r.score) {
            let m = (far(&attack, theta).unwrap() + frr(&real, theta).unwrap()) / 2.0;
            if m < best.1 || (m == best.1 && theta < best.0) {
                best = (theta, m);
            }
        }
        prop_assert_eq!((choice.theta, choice.metric), best);
    }

    #[test]
    fn report_rates_are_bounded(dev in score_set(), eval in score_set()) {
        let r = evaluate(&dev, &eval, &[]).unwrap();
        for v in [r.far_eval, r.frr_eval, r.hter_eval] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert_eq!(r.hter_eval, (r.far_eval + r.frr_eval) / 2.0);
    }

    #[test]
    fn adadelta_accumulators_stay_finite_and_nonnegative(
        grads in prop::collection::vec(-1e3f64..1e3, 1..60),
    ) {
        let (mut eg2, mut edx2) = (0.0, 0.0);
        for g in grads {
            let d = adadelta_update(g, &mut eg2, &mut edx2, 0.95, 1e-6);
            prop_assert!(eg2 >= 0.0 && edx2 >= 0.0 && eg2.is_finite() && edx2.is_finite());
            prop_assert!(d == 0.0 || d.signum() == -g.signum());
        }
    }

    #[test]
    fn batches_cover_every_index_once(n in 1usize..200, size in 2usize..40) {
        let ranges = batch_ranges(n, size);
        let covered: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        prop_assert_eq!(covered, (0..n).collect::<Vec<_>>());
        if n >= 2 {
            prop_assert!(ranges.iter().all(|r| r.len() >= 2));
        }
    }

    #[test]
    fn container_round_trip(data in values(12), header in "[a-z =\n]{0,40}") {
        let mut c = Container::new(header);
        c.push(Record::from_f64("w", &[3, 4], &data));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back.header, &c.header);
        let r = back.get("w").unwrap();
        prop_assert_eq!(&r.dims, &vec![3, 4]);
        for (a, b) in r.to_f64().iter().zip(&data) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn wav_round_trip(samples in prop::collection::vec(any::<i16>(), 1..400)) {
        let audio = parse_wav(&encode_wav(&samples)).unwrap();
        prop_assert_eq!(audio.sample_rate, 16000);
        for (a, s) in audio.samples.iter().zip(&samples) {
            prop_assert_eq!(*a, f64::from(*s) / 32768.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_are_log_probabilities(seed in any::<u64>(), len in 1usize..6) {
        let config = tiny_config();
        let model = build_seeded(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..config.frame_len).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect())
            .collect();
        let seq = FrameSequence::from_frames(&frames, "p").unwrap();
        let s = model.score(&seq).unwrap();
        prop_assert!(s <= 0.0 && s.is_finite());
        prop_assert_eq!(s, model.score(&seq).unwrap());
        let p: f64 = softmax(&model.logits(&seq).unwrap()).iter().sum();
        prop_assert!((p - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn em_is_monotone_and_weights_stay_a_simplex(
        seed in any::<u64>(),
        k in 1usize..5,
        d in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f64>> = (0..120)
            .map(|i| (0..d).map(|_| (i % 3) as f64 * 2.0 + rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let fit = em_fit(&frames, k, 8, 1e-3, &mut rng).unwrap();
        prop_assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-8), "{:?}", fit.trace);
        prop_assert!((fit.gmm.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(fit.gmm.weights.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn llr_is_antisymmetric(seed in any::<u64>(), average in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |lo: f64, hi: f64| rand::Rng::random_range(&mut rng, lo..hi);
        let a = DiagonalGmm::new(vec![0.4, 0.6], vec![vec![r(-2.0, 2.0)], vec![r(-2.0, 2.0)]], vec![vec![r(0.2, 2.0)], vec![r(0.2, 2.0)]]).unwrap();
        let b = DiagonalGmm::new(vec![1.0], vec![vec![r(-2.0, 2.0)]], vec![vec![r(0.2, 2.0)]]).unwrap();
        let x: Vec<Vec<f64>> = (0..7).map(|_| vec![r(-3.0, 3.0)]).collect();
        prop_assert_eq!(llr_score(&x, &a, &b, average).unwrap(), -llr_score(&x, &b, &a, average).unwrap());
        prop_assert_eq!(llr_score(&x, &a, &a, average).unwrap(), 0.0);
    }
}
