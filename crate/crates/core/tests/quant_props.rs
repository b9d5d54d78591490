use proptest::prelude::*;
use quantlab::numerics::{Rng, Tensor};
use quantlab::quant::{dequantize, quantize_group, quantize_weight, GroupQuantSpec};

const GRID_BITS: [u8; 4] = [2, 3, 4, 8];

fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            8 => -10.0f64..10.0,
            1 => Just(0.0),
            1 => -1e-3f64..1e-3,
        ],
        1..max_len,
    )
}

fn weight() -> impl Strategy<Value = (Tensor, usize)> {
    (1usize..6, 1usize..70, 1usize..40).prop_flat_map(|(rows, cols, group)| {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |data| (Tensor::new(vec![rows, cols], data).unwrap(), group))
    })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn rounding_error_is_at_most_half_a_step(v in values(40), bits in prop::sample::select(GRID_BITS.to_vec())) {
        let (scale, codes) = quantize_group(&v, bits).unwrap();
        prop_assert!(scale > 0.0);
        for (x, c) in v.iter().zip(&codes) {
            prop_assert!((x - *c as f64 * scale).abs() <= scale / 2.0 + 1e-7);
        }
    }

    #[test]
    fn requantizing_is_a_fixed_point((w, group) in weight(), bits in prop::sample::select(GRID_BITS.to_vec())) {
        let spec = GroupQuantSpec::new(bits, group).unwrap();
        let q = quantize_weight(&w, spec).unwrap();
        let again = quantize_weight(&dequantize(&q), spec).unwrap();
        prop_assert_eq!(q, again);
    }

    #[test]
    fn negation_negates_codes((w, group) in weight(), bits in prop::sample::select(GRID_BITS.to_vec())) {
        let spec = GroupQuantSpec::new(bits, group).unwrap();
        let mut neg = w.clone();
        neg.scale(-1.0);
        let (a, b) = (quantize_weight(&w, spec).unwrap(), quantize_weight(&neg, spec).unwrap());
        prop_assert_eq!(a.scales(), b.scales());
        for (x, y) in a.codes().unwrap().iter().zip(b.codes().unwrap()) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn passthrough_is_exact((w, group) in weight()) {
        let spec = GroupQuantSpec::new(16, group).unwrap();
        prop_assert_eq!(dequantize(&quantize_weight(&w, spec).unwrap()), w);
    }

    #[test]
    fn groups_partition_the_input_dimension((w, group) in weight()) {
        let spec = GroupQuantSpec::new(4, group).unwrap();
        let q = quantize_weight(&w, spec).unwrap();
        let (rows, cols) = w.dims2().unwrap();
        prop_assert_eq!(q.scales().unwrap().len(), rows * cols.div_ceil(group));
        prop_assert_eq!(q.codes().unwrap().len(), rows * cols);
    }
}

/// Tensor-level reconstruction error falls as the width grows.
#[test]
fn more_bits_never_hurt_on_random_tensors() {
    let mut rng = Rng::new(17);
    let mut groups = 0usize;
    for _ in 0..400 {
        let rows = 1 + rng.below(8);
        let cols = 16 + rng.below(200);
        let group = 16 + rng.below(128);
        let w = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap();
        groups += rows * cols.div_ceil(group);
        let errs: Vec<f64> = [2u8, 3, 4, 8, 16]
            .iter()
            .map(|&b| {
                mse(
                    &w,
                    &dequantize(&quantize_weight(&w, GroupQuantSpec::new(b, group).unwrap()).unwrap()),
                )
            })
            .collect();
        for pair in errs.windows(2) {
            assert!(pair[1] <= pair[0], "{rows}x{cols}/{group}: {errs:?}");
        }
    }
    assert!(groups >= 1000);
}

/// A single group can get worse with one more bit: 1/3 sits on the 3-bit
/// grid of this group but not on the 4-bit one.
#[test]
fn per_group_fidelity_is_not_monotone() {
    let v = [1.0, 1.0 / 3.0];
    let err = |bits| {
        let (s, c) = quantize_group(&v, bits).unwrap();
        v.iter().zip(c).map(|(x, c)| (x - c as f64 * s).powi(2)).sum::<f64>()
    };
    assert!(err(4) > err(3));
}
