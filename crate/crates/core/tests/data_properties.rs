use irrcast::autodiff::Tensor;
use irrcast::data::*;
use proptest::prelude::*;

fn base_series(len: usize, seed: u64) -> IrregularSeries {
    let p = SynthParams { n_vars: 2, ..Default::default() };
    synth_generate(SynthKind::SineMixture, &p, len, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drop_keeps_order_ends_and_values(len in 3usize..300, rate in 0.0f64..0.95, seed in any::<u64>()) {
        let s = base_series(len, 1);
        let d = drop_random(&s, rate, seed).unwrap();
        let secs = d.epoch_seconds();
        prop_assert!(secs.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(d.timestamps()[0], s.timestamps()[0]);
        prop_assert_eq!(d.timestamps().last(), s.timestamps().last());
        let expected = ((rate * len as f64).floor() as usize).min(len - 2);
        prop_assert_eq!(d.len(), len - expected);
        for (t, row) in d.timestamps().iter().zip(d.values()) {
            let i = s.timestamps().binary_search(t).unwrap();
            prop_assert_eq!(row, &s.values()[i]);
        }
    }

    #[test]
    fn windows_count_observations(len in 40usize..200, n in 1usize..16, m in 1usize..8,
                                  stride in 1usize..5, rate in 0.0f64..0.7, seed in any::<u64>()) {
        let d = drop_random(&base_series(len, 2), rate, seed).unwrap();
        prop_assume!(n + m <= d.len());
        let ws = make_windows(&d, n, m, stride).unwrap();
        prop_assert_eq!(ws.len(), (d.len() - n - m) / stride + 1);
        for w in &ws {
            prop_assert_eq!(w.past.len(), n);
            prop_assert_eq!(w.future.len(), m);
            prop_assert!(w.past[n - 1].timestamp < w.future[0].timestamp);
            for f in w.features() {
                prop_assert!((0.0..=1.0).contains(&f.relative_time));
                for (_, v) in f.calendar_fields() {
                    prop_assert!((-0.5..=0.5).contains(&v));
                }
            }
        }
    }

    #[test]
    fn split_partitions_in_order(len in 0usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = base_series(len.max(2), 3);
        let f0 = a;
        let f1 = (1.0 - a) * b;
        let f2 = 1.0 - f0 - f1;
        let (tr, va, te) = split_chronological(&s, [f0, f1, f2]).unwrap();
        prop_assert_eq!(tr.len() + va.len() + te.len(), s.len());
        let mut joined = tr.timestamps().to_vec();
        joined.extend_from_slice(va.timestamps());
        joined.extend_from_slice(te.timestamps());
        prop_assert_eq!(joined.as_slice(), s.timestamps());
    }

    #[test]
    fn revin_round_trip(vals in prop::collection::vec(-1e3f64..1e3, 2..60), gain in 0.1f64..5.0,
                        bias in -3.0f64..3.0) {
        let n = vals.len() / 2;
        prop_assume!(n >= 1);
        let x = Tensor::from_vec(&[n, 2], vals[..2 * n].to_vec()).unwrap();
        let mask = vec![true; 2 * n];
        let stats = RevinStats::fit(&x, &mask).unwrap();
        let (z, _) = revin_normalize(&x, &mask).unwrap();
        for v in 0..2 {
            let mean = (0..n).map(|i| z.data()[i * 2 + v]).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-7);
        }
        let stats = stats.with_affine(vec![gain, 1.0 / gain], vec![bias, -bias]).unwrap();
        let z = revin_apply(&x, &mask, &stats).unwrap();
        let back = revin_denormalize(&z, &stats).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-6);
    }
}
