use std::path::Path;

use proptest::collection::vec;
use proptest::prelude::*;
use tcna::branch::{fit_dilations, required_input_length, BranchConfig};
use tcna::data::fseq::{decode_fseq, encode_fseq};
use tcna::data::{class_mean_recall, top_k_accuracy, FeatureSequence, Modality};
use tcna::fusion::late_fusion;
use tcna::nn::{cross_entropy, Mode, SpatialDropout};
use tcna::tensor::softmax_rows;
use tcna::train::{lr_at_epoch, Checkpoint};
use tcna::{Rng, Tensor};

fn dilations() -> impl Strategy<Value = Vec<usize>> {
    vec(1usize..=5, 1..=5)
}

fn scores(b: usize, k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (vec(-3.0f64..3.0, b * k), vec(0..k, b))
}

proptest! {
    #[test]
    fn block_lengths_shrink_by_each_receptive_step(kernel in 2usize..=5, d in dilations(), extra in 0usize..6) {
        let r = required_input_length(kernel, &d);
        let config = BranchConfig { kernel, dilations: d.clone(), ..BranchConfig::new(4, 2, 2, 2) };
        let lengths = config.block_lengths(r + extra).unwrap();
        prop_assert_eq!(lengths.len(), d.len());
        let mut prev = r + extra;
        for (l, di) in lengths.iter().zip(&d) {
            prop_assert_eq!(*l, prev - (kernel - 1) * di);
            prev = *l;
        }
        prop_assert_eq!(*lengths.last().unwrap(), 1 + extra);
        prop_assert!(config.block_lengths(r - 1).is_err());
    }

    #[test]
    fn fitted_dilations_are_the_longest_fitting_prefix(kernel in 2usize..=4, d in dilations(), n in 1usize..40) {
        match fit_dilations(kernel, &d, n) {
            Some(fit) => {
                prop_assert!(d.starts_with(&fit));
                prop_assert!(required_input_length(kernel, &fit) <= n);
                if fit.len() < d.len() {
                    prop_assert!(required_input_length(kernel, &d[..fit.len() + 1]) > n);
                }
            }
            None => prop_assert!(required_input_length(kernel, &d[..1]) > n),
        }
    }

    #[test]
    fn fseq_round_trips_any_bits(n in 1usize..12, d in 1usize..12, seed in any::<u64>(), code in 0usize..3) {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..n * d).map(|_| f32::from_bits(rand::RngCore::next_u32(&mut rng))).collect();
        let seq = FeatureSequence::new(n, d, data).unwrap();
        let m = Modality::ALL[code];
        let bytes = encode_fseq(m, &seq);
        let (m2, back) = decode_fseq(&bytes, Path::new("p.fseq")).unwrap();
        prop_assert_eq!(m2, m);
        prop_assert_eq!(encode_fseq(m2, &back), bytes);
    }

    #[test]
    fn checkpoint_bytes_round_trip(shapes in vec(vec(1usize..5, 1..4), 1..5), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut ck = Checkpoint::new();
        for (i, s) in shapes.iter().enumerate() {
            ck.insert(&format!("t{i}"), &Tensor::<f64>::normal(&mut rng, 0.0, 1.0, s.clone()).unwrap());
        }
        ck.set_meta("lr", &[rng.next_f64()]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("p.ckpt")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for (i, s) in shapes.iter().enumerate() {
            prop_assert_eq!(back.shape(&format!("t{i}")).unwrap(), s.as_slice());
        }
    }

    #[test]
    fn accuracy_grows_with_k((data, labels) in (1usize..10, 2usize..7).prop_flat_map(|(b, k)| scores(b, k))) {
        let k = data.len() / labels.len();
        let s = Tensor::new(vec![labels.len(), k], data).unwrap();
        let mut prev = 0.0;
        for top in 1..=k {
            let acc = top_k_accuracy(&s, &labels, top).unwrap();
            let rec = class_mean_recall(&s, &labels, top).unwrap();
            prop_assert!(acc >= prev);
            prop_assert!((0.0..=1.0).contains(&rec));
            prev = acc;
        }
        prop_assert_eq!(prev, 1.0);
        prop_assert_eq!(class_mean_recall(&s, &labels, k).unwrap(), 1.0);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero((data, labels) in (1usize..8, 2usize..6).prop_flat_map(|(b, k)| scores(b, k))) {
        let k = data.len() / labels.len();
        let logits = Tensor::new(vec![labels.len(), k], data).unwrap();
        let (loss, grad) = cross_entropy(&logits, &labels, "test").unwrap();
        prop_assert!(loss >= 0.0);
        for row in grad.data().chunks(k) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn late_fusion_stays_a_distribution(b in 1usize..6, k in 2usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut dist = || {
            let logits = Tensor::<f64>::normal(&mut rng, 0.0, 2.0, [b, k]).unwrap();
            Tensor::new(vec![b, k], softmax_rows(logits.data(), k)).unwrap()
        };
        let (p, q, r) = (dist(), dist(), dist());
        let fused = late_fusion(&p, &q, &r).unwrap();
        for row in fused.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn spatial_dropout_drops_whole_channels(b in 1usize..4, c in 1usize..8, n in 1usize..8, p in 0.1f64..0.9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::normal(&mut rng, 3.0, 0.1, [b, c, n]).unwrap();
        let mut drop = SpatialDropout::new(p).unwrap();
        let y = drop.forward(&x, Mode::Train, Some(&mut rng)).unwrap();
        for (row_y, row_x) in y.data().chunks(n).zip(x.data().chunks(n)) {
            let zeroed = row_y.iter().all(|&v| v == 0.0);
            let scaled = row_y.iter().zip(row_x).all(|(a, b)| (a - b / (1.0 - p)).abs() < 1e-12);
            prop_assert!(zeroed || scaled);
        }
        prop_assert_eq!(drop.forward(&x, Mode::Eval, None).unwrap(), x);
    }

    #[test]
    fn lr_schedule_decays(lr0 in 1e-5f64..1.0, epochs in 1usize..100, power in 0.5f64..2.0) {
        prop_assert_eq!(lr_at_epoch(lr0, 0, epochs, power).unwrap(), lr0);
        let mut prev = lr0;
        for e in 1..epochs {
            let lr = lr_at_epoch(lr0, e, epochs, power).unwrap();
            prop_assert!(lr < prev && lr > 0.0);
            prev = lr;
        }
        prop_assert!(lr_at_epoch(lr0, epochs, epochs, power).is_err());
    }
}
