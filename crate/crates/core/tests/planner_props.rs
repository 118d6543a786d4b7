use nvrecompute::planner::{average_ranks, interpolate_c, solve_mckp, spearman, Item};
use proptest::prelude::*;

fn paired(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3..max).prop_flat_map(|n| {
        (
            prop::collection::vec(0i32..6, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    })
}

fn brute_force(groups: &[Vec<Item>], cap: u32) -> Option<f64> {
    fn go(groups: &[Vec<Item>], cap: i64, acc: f64, best: &mut Option<f64>) {
        match groups.split_first() {
            None => {
                if best.is_none_or(|b| acc > b) {
                    *best = Some(acc);
                }
            }
            Some((g, rest)) => {
                for it in g {
                    if i64::from(it.weight) <= cap {
                        go(rest, cap - i64::from(it.weight), acc + it.value, best);
                    }
                }
            }
        }
    }
    let mut best = None;
    go(groups, i64::from(cap), 0.0, &mut best);
    best
}

proptest! {
    #[test]
    fn rho_is_symmetric_and_bounded((x, y) in paired(25)) {
        let (a, pa) = spearman(&x, &y).unwrap();
        let (b, pb) = spearman(&y, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((pa - pb).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&pa));
    }

    #[test]
    fn rho_ignores_monotone_transforms((x, y) in paired(25)) {
        let (a, _) = spearman(&x, &y).unwrap();
        let ex: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() * 3.0 + 1.0).collect();
        let cy: Vec<f64> = y.iter().map(|v| v * v * v).collect();
        let (b, _) = spearman(&ex, &cy).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let (c, _) = spearman(&x, &neg).unwrap();
        prop_assert!((a + c).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_to_triangular_number(v in prop::collection::vec(0i32..5, 1..30)) {
        let x: Vec<f64> = v.into_iter().map(f64::from).collect();
        let n = x.len() as f64;
        let sum: f64 = average_ranks(&x).iter().sum();
        prop_assert!((sum - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn knapsack_matches_enumeration(
        groups in prop::collection::vec(
            prop::collection::vec((0u32..40, 0u32..100), 1..4), 1..5),
        cap in 0u32..100,
    ) {
        let groups: Vec<Vec<Item>> = groups
            .into_iter()
            .map(|g| g.into_iter().map(|(w, v)| Item { weight: w, value: f64::from(v) }).collect())
            .collect();
        let dp = solve_mckp(&groups, cap);
        let bf = brute_force(&groups, cap);
        prop_assert_eq!(dp.as_ref().map(|s| s.value), bf);
        if let Some(s) = dp {
            let w: u32 = s.choice.iter().zip(&groups).map(|(&i, g)| g[i].weight).sum();
            let v: f64 = s.choice.iter().zip(&groups).map(|(&i, g)| g[i].value).sum();
            prop_assert_eq!(w, s.weight);
            prop_assert!(w <= cap);
            prop_assert_eq!(v, s.value);
        }
    }

    #[test]
    fn interpolation_is_monotone_and_bounded(c in 0.0f64..1.0, d in 0.0f64..1.0, x in 1u32..64) {
        let (lo, hi) = if c <= d { (c, d) } else { (d, c) };
        let here = interpolate_c(lo, hi, f64::from(x));
        let next = interpolate_c(lo, hi, f64::from(x + 1));
        prop_assert!(lo <= here && here <= hi);
        prop_assert!(next <= here);
    }
}
