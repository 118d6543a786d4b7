//! Exact multiple-choice knapsack on an integer weight grid.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Item {
    pub weight: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Chosen option index per group.
    pub choice: Vec<usize>,
    pub value: f64,
    pub weight: u32,
}

/// Picks exactly one item per group so that the total weight is at most
/// `capacity` and the total value is maximal.
///
/// Among optimal selections the one with the lowest total weight wins, then
/// the lexicographically smallest choice vector. Returns `None` when some
/// group has no item that fits.
pub fn solve_mckp(groups: &[Vec<Item>], capacity: u32) -> Option<Selection> {
    let cap = capacity as usize;
    let g = groups.len();
    // best[i][c]: (value, weight) of the best completion of groups i.. using at most c.
    let mut best: Vec<Vec<Option<(f64, u32)>>> = vec![vec![None; cap + 1]; g + 1];
    let mut pick = vec![vec![usize::MAX; cap + 1]; g];
    best[g] = vec![Some((0.0, 0)); cap + 1];
    for i in (0..g).rev() {
        for c in 0..=cap {
            let mut cur: Option<(f64, u32)> = None;
            for (o, item) in groups[i].iter().enumerate() {
                let w = item.weight as usize;
                if w > c {
                    continue;
                }
                let Some((v, wt)) = best[i + 1][c - w] else {
                    continue;
                };
                let cand = (item.value + v, item.weight + wt);
                let better = match cur {
                    None => true,
                    Some((bv, bw)) => cand.0 > bv || (cand.0 == bv && cand.1 < bw),
                };
                if better {
                    cur = Some(cand);
                    pick[i][c] = o;
                }
            }
            best[i][c] = cur;
        }
    }
    let (value, weight) = best[0][cap]?;
    let mut choice = Vec::with_capacity(g);
    let mut c = cap;
    for row in &pick {
        let o = row[c];
        choice.push(o);
        c -= groups[choice.len() - 1][o].weight as usize;
    }
    Some(Selection {
        choice,
        value,
        weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: u32, v: f64) -> Vec<Item> {
        vec![
            Item {
                weight: 0,
                value: 0.0,
            },
            Item {
                weight: w,
                value: v,
            },
        ]
    }

    #[test]
    fn three_regions_budget_three() {
        let groups = vec![single(1, 10.0), single(2, 15.0), single(3, 40.0)];
        let s = solve_mckp(&groups, 3).unwrap();
        assert_eq!(s.choice, vec![0, 0, 1]);
        assert_eq!(s.value, 40.0);
        assert_eq!(s.weight, 3);
    }

    #[test]
    fn budget_below_every_option() {
        let groups = vec![single(5, 1.0), single(7, 2.0)];
        let s = solve_mckp(&groups, 4).unwrap();
        assert_eq!(s.choice, vec![0, 0]);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn zero_values_prefer_lightest() {
        let groups = vec![single(1, 0.0), single(2, 0.0)];
        let s = solve_mckp(&groups, 10).unwrap();
        assert_eq!(s.choice, vec![0, 0]);
        assert_eq!(s.weight, 0);
    }

    #[test]
    fn equal_value_and_weight_prefers_lower_index() {
        let groups = vec![
            vec![
                Item {
                    weight: 0,
                    value: 0.0,
                },
                Item {
                    weight: 1,
                    value: 5.0,
                },
            ],
            vec![
                Item {
                    weight: 0,
                    value: 0.0,
                },
                Item {
                    weight: 1,
                    value: 5.0,
                },
            ],
        ];
        let s = solve_mckp(&groups, 1).unwrap();
        assert_eq!(s.choice, vec![0, 1]);
    }

    #[test]
    fn no_fitting_item() {
        assert!(solve_mckp(
            &[vec![Item {
                weight: 2,
                value: 1.0
            }]],
            1
        )
        .is_none());
        assert_eq!(solve_mckp(&[], 5).unwrap().choice, Vec::<usize>::new());
    }
}
