use modiff::modulated::forward_full;
use modiff::quant::{bits_for_contraction, contraction, error_bound, fake_quant};
use modiff::{
    Granularity, Identity, LayerMode, LinearLayer, ModulatedLayerState, QuantConfig, Rounding,
    Tensor, Warmup,
};
use proptest::prelude::*;

fn vector(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..max_len)
}

fn rounding() -> impl Strategy<Value = Rounding> {
    prop_oneof![Just(Rounding::Floor), Just(Rounding::Nearest)]
}

fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn squared_error_within_bound(data in vector(200), bits in 1u32..9, r in rounding()) {
        let x = Tensor::vector(data).unwrap();
        let q = fake_quant(&x, &QuantConfig::new(bits).with_rounding(r)).unwrap();
        let err = x.sub(&q).unwrap().sum_sq();
        let bound = error_bound(&x, bits, r);
        prop_assert!(err <= bound * (1.0 + 1e-9) + 1e-18, "err {err} bound {bound}");
    }

    #[test]
    fn per_element_error_within_step(data in vector(100), bits in 1u32..9, r in rounding()) {
        let x = Tensor::vector(data).unwrap();
        let q = fake_quant(&x, &QuantConfig::new(bits).with_rounding(r)).unwrap();
        let s = x.range() / f64::from((1u32 << bits) - 1);
        let limit = match r {
            Rounding::Floor => s,
            Rounding::Nearest => s / 2.0,
        };
        prop_assert!(x.max_abs_diff(&q).unwrap() <= limit * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn chosen_bits_contract(d in 1usize..300, seed in any::<u64>(), c in 0.05f64..0.9) {
        let mut rng = modiff::RngState::new(seed);
        let x = Tensor::randn(&[d], &mut rng).map(|v| v + 0.7);
        let b = bits_for_contraction(d, c);
        let q = fake_quant(&x, &QuantConfig::floor(b)).unwrap();
        prop_assert!(contraction(&x, &q).unwrap() <= c * (1.0 + 1e-9));
    }

    #[test]
    fn channel_wise_quantization_is_idempotent(x in batch(4, 5), bits in 2u32..8) {
        let cfg = QuantConfig::new(bits).with_granularity(Granularity::ChannelWise { axis: 1 });
        let once = fake_quant(&x, &cfg).unwrap();
        let twice = fake_quant(&once, &cfg).unwrap();
        prop_assert!(once.max_abs_diff(&twice).unwrap() <= 1e-9 * (1.0 + once.max_abs()));
    }

    #[test]
    fn mdtn_round_trip(x in batch(3, 7)) {
        let bytes = x.to_mdtn_bytes();
        prop_assert_eq!(Tensor::read_mdtn(bytes.as_slice()).unwrap(), x);
    }

    #[test]
    fn lossless_modulation_matches_full_precision(
        w in batch(5, 3),
        b in batch(1, 3),
        acts in prop::collection::vec(batch(2, 5), 2..6),
    ) {
        let layer = LinearLayer::new(w, Some(b.reshape(vec![3]).unwrap())).unwrap();
        for mode in [LayerMode::Modulated, LayerMode::ErrorCompensated] {
            let mut st = ModulatedLayerState::new(mode, Identity);
            for (k, a) in acts.iter().enumerate() {
                let (o, _) = if k == 0 {
                    st.warmup(&layer, a, Warmup::FullPrecision).unwrap()
                } else {
                    st.forward(&layer, a).unwrap()
                };
                let (fp, _) = forward_full(&layer, a).unwrap();
                prop_assert!(o.max_abs_diff(&fp).unwrap() <= 1e-9 * (1.0 + fp.max_abs()));
            }
        }
    }

    #[test]
    fn compensated_output_tracks_realized_activation(
        w in batch(5, 3),
        acts in prop::collection::vec(batch(2, 5), 2..8),
        bits in 2u32..6,
    ) {
        let layer = LinearLayer::new(w, None).unwrap();
        let cfg = QuantConfig::new(bits).with_granularity(Granularity::ChannelWise { axis: 1 });
        let mut st = ModulatedLayerState::new(LayerMode::ErrorCompensated, cfg);
        for (k, a) in acts.iter().enumerate() {
            let (o, _) = if k == 0 {
                st.warmup(&layer, a, Warmup::FullPrecision).unwrap()
            } else {
                st.forward(&layer, a).unwrap()
            };
            let realized = layer.forward(st.a_hat().unwrap()).unwrap();
            prop_assert!(o.max_abs_diff(&realized).unwrap() <= 1e-9 * (1.0 + realized.max_abs()));
        }
    }
}
