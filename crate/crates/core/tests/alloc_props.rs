use proptest::prelude::*;
use quantlab::alloc::{assign_bits, assign_precision, cutoffs, ratios_for_budget, SplitRatios, Tiers};
use quantlab::hawq::{rank_sensitivities, RankMode, SensitivityRecord};

fn ratio_grid() -> Vec<SplitRatios> {
    let mut out = Vec::new();
    for a in 0..=20 {
        for b in 0..=(20 - a) {
            let (p16, p8) = (a as f64 / 20.0, b as f64 / 20.0);
            out.push(SplitRatios {
                p16,
                p8,
                p4: (20 - a - b) as f64 / 20.0,
            });
        }
    }
    out
}

#[test]
fn cutoffs_follow_the_floor_formula_everywhere() {
    for r in ratio_grid() {
        for m in 1..=100usize {
            let k16 = (r.p16 * m as f64).floor() as usize;
            let k8 = ((r.p16 + r.p8) * m as f64).floor() as usize;
            assert_eq!(cutoffs(&r, m), (k16, k8));
            let bits = assign_bits(m, &r, Tiers::default()).unwrap();
            for (i, &b) in bits.iter().enumerate() {
                let pos = i + 1;
                let expected = if pos <= k16 {
                    16
                } else if pos <= k8 {
                    8
                } else {
                    4
                };
                assert_eq!(b, expected, "m={m} {r:?} pos={pos}");
            }
            assert!(bits.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}

#[test]
fn paper_configurations() {
    let r = SplitRatios::new(0.2, 0.3, 0.5).unwrap();
    assert_eq!(
        assign_bits(10, &r, Tiers::default()).unwrap(),
        [16, 16, 8, 8, 8, 4, 4, 4, 4, 4]
    );
    let half = SplitRatios::new(0.5, 0.5, 0.0).unwrap();
    assert_eq!(assign_bits(4, &half, Tiers::default()).unwrap(), [16, 16, 8, 8]);
    assert_eq!(assign_bits(4, &half, Tiers::EIGHT_FOUR).unwrap(), [8, 8, 4, 4]);
}

fn all_assignments(m: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|p: Vec<u8>| [4u8, 8, 16].map(|b| [p.as_slice(), &[b]].concat()))
            .collect();
    }
    out
}

#[test]
fn budget_example_against_exhaustive_enumeration() {
    let got = ratios_for_budget(&[1, 1, 1, 1], 10.0).unwrap();
    assert_eq!(got.bits, [16, 8, 8, 8]);
    assert_eq!(got.achieved_avg_bits, 10.0);
    let feasible: Vec<Vec<u8>> = all_assignments(4)
        .into_iter()
        .filter(|a| a.iter().map(|&b| b as f64).sum::<f64>() / 4.0 <= 10.0)
        .filter(|a| a.windows(2).all(|w| w[0] >= w[1]))
        .collect();
    assert_eq!(feasible.len(), 10);
    assert!(feasible.contains(&got.bits));
    let best = feasible
        .iter()
        .map(|a| a.iter().map(|&b| b as u32).sum::<u32>())
        .max()
        .unwrap();
    assert_eq!(best, 40);
}

proptest! {
    #[test]
    fn budget_is_never_exceeded(sizes in prop::collection::vec(1usize..5000, 1..30), target in 4.0f64..=16.0) {
        let a = ratios_for_budget(&sizes, target).unwrap();
        prop_assert!(a.achieved_avg_bits <= target + 1e-9);
        prop_assert!(a.bits.windows(2).all(|w| w[0] >= w[1]));
        let total: usize = sizes.iter().sum();
        let raw: f64 = sizes.iter().zip(&a.bits).map(|(&n, &b)| n as f64 * b as f64).sum::<f64>() / total as f64;
        prop_assert!((raw - a.achieved_avg_bits).abs() <= 1e-9);
        prop_assert!((a.ratios.p16 + a.ratios.p8 + a.ratios.p4 - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn equal_sizes_land_close_to_the_target(m in 1usize..60, target in 4.0f64..=16.0) {
        let a = ratios_for_budget(&vec![7; m], target).unwrap();
        prop_assert!(a.achieved_avg_bits >= target - 12.0 / m as f64 - 1e-9);
    }

    #[test]
    fn plans_depend_only_on_the_ranking(lambdas in prop::collection::vec(0.0f64..100.0, 1..40), p16 in 0.0f64..0.5, p8 in 0.0f64..0.5, stretch in 0.1f64..10.0) {
        let ratios = SplitRatios { p16, p8, p4: 1.0 - p16 - p8 };
        let recs = |scale: f64| -> Vec<SensitivityRecord> {
            lambdas.iter().enumerate().map(|(i, &l)| SensitivityRecord {
                path: format!("m{i:03}"),
                lambda: l * scale,
                n_params: 10,
                sensitivity_raw: l * scale,
                sensitivity_normalized: l * scale / 10.0,
                iters_used: 1,
                converged: true,
                eps: 1e-3,
                trajectory: vec![l * scale],
            }).collect()
        };
        let a = rank_sensitivities(&recs(1.0), RankMode::Raw).unwrap();
        let b = rank_sensitivities(&recs(stretch), RankMode::Raw).unwrap();
        let pa = assign_precision(&a, ratios, Tiers::default(), 128, false).unwrap();
        let pb = assign_precision(&b, ratios, Tiers::default(), 128, false).unwrap();
        if a == b {
            prop_assert_eq!(&pa, &pb);
        }
        // More sensitive modules never get fewer bits.
        let bits: Vec<u8> = a.iter().map(|p| pa.modules[p]).collect();
        prop_assert!(bits.windows(2).all(|w| w[0] >= w[1]));
    }
}
