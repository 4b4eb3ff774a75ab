use gwnet_tensor::*;
use proptest::prelude::*;

fn tensors(k: usize) -> impl Strategy<Value = Vec<Tensor>> {
    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 12), k)
        .prop_map(|vs| vs.into_iter().map(|v| Tensor::new(Shape::new(1, 3, 2, 2), v).unwrap()).collect())
}

fn reduce(ts: &[Tensor], mode: ReduceMode) -> Tensor {
    let vars: Vec<Var> = ts.iter().cloned().map(Var::constant).collect();
    set_reduce(&vars, mode).unwrap().value().clone()
}

proptest! {
    #[test]
    fn set_reduce_ignores_order_and_duplication(ts in (1usize..8).prop_flat_map(tensors), rot in 0usize..8) {
        let mut permuted = ts.clone();
        permuted.reverse();
        let r = rot % permuted.len();
        permuted.rotate_left(r);
        let doubled: Vec<Tensor> = ts.iter().flat_map(|t| [t.clone(), t.clone()]).collect();
        for mode in [ReduceMode::Avg, ReduceMode::Max, ReduceMode::Min] {
            let base = reduce(&ts, mode);
            prop_assert_eq!(&reduce(&permuted, mode), &base);
            prop_assert_eq!(&reduce(&doubled, mode), &base);
        }
    }

    #[test]
    fn adain_output_takes_style_moments(
        c in prop::collection::vec(-5f64..5.0, 18),
        s in prop::collection::vec(-5f64..5.0, 18),
    ) {
        let content = Tensor::new(Shape::new(1, 2, 3, 3), c).unwrap();
        let style = Tensor::new(Shape::new(1, 2, 3, 3), s).unwrap();
        // non-degenerate content only
        for ch in 0..2 {
            let v: Vec<f64> = content.data()[ch * 9..(ch + 1) * 9].to_vec();
            let m = v.iter().sum::<f64>() / 9.0;
            prop_assume!(v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 9.0 > 1e-2);
        }
        let y = adain(&Var::constant(content), &Var::constant(style.clone()), DEFAULT_EPS).unwrap();
        for ch in 0..2 {
            let out: Vec<f64> = y.value().data()[ch * 9..(ch + 1) * 9].to_vec();
            let st: Vec<f64> = style.data()[ch * 9..(ch + 1) * 9].to_vec();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / 9.0;
            let std = |v: &[f64]| { let m = mean(v); (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 9.0).sqrt() };
            prop_assert!((mean(&out) - mean(&st)).abs() < 1e-5);
            let sigma_style = (std(&st).powi(2) + DEFAULT_EPS).sqrt();
            let sigma_content_ratio = std(&out) / sigma_style;
            // content σ includes ε, so the output std sits just below σ(style)
            prop_assert!((std(&out) - sigma_style).abs() < 1e-4, "{}", sigma_content_ratio);
        }
    }
}
