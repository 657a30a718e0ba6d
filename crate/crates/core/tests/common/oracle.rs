//! Independent push-rule engine over plain coordinates.
//!
//! Walks the line of consecutive occupied cells in front of the pusher and
//! decides from its length and the weights involved.

pub type Cell = (i32, i32);

/// New positions after pushing object `target` by `(dc, dr)`, plus the
/// realized `(pusher, pushed)` pair if any.
pub fn push(
    w: i32,
    h: i32,
    pos: &[Cell],
    weight: &[u32],
    target: usize,
    (dc, dr): (i32, i32),
) -> (Vec<Cell>, Option<(usize, usize)>) {
    let inside = |(c, r): Cell| (0..w).contains(&c) && (0..h).contains(&r);
    let at = |p: Cell| pos.iter().position(|&q| q == p);
    let mut line = Vec::new();
    let mut cur = pos[target];
    loop {
        cur = (cur.0 + dc, cur.1 + dr);
        match at(cur) {
            Some(i) => line.push(i),
            None => break,
        }
    }
    // `cur` is now the first free cell (possibly off-grid) past the line.
    let unchanged = (pos.to_vec(), None);
    if !inside(cur) {
        return unchanged;
    }
    match line.as_slice() {
        [] => {
            let mut out = pos.to_vec();
            out[target] = cur;
            (out, None)
        }
        [j] if weight[*j] < weight[target] => {
            let mut out = pos.to_vec();
            out[*j] = cur;
            out[target] = pos[*j];
            (out, Some((target, *j)))
        }
        _ => unchanged,
    }
}

/// Compares `GridWorld::step` and its reported interaction with [`push`]
/// on every placement of 2 and 3 objects with distinct weights on a 5x5
/// grid, for every action. Returns `(checked, disagreements)`.
pub fn exhaustive_agreement() -> (usize, usize) {
    use cpm::env::{Direction, EnvAction, GridWorld, Mode};

    let cells: Vec<Cell> = (0..5).flat_map(|r| (0..5).map(move |c| (c, r))).collect();
    let (mut checked, mut bad) = (0, 0);
    for n in 2..=3usize {
        let weight_orders: Vec<Vec<u32>> = if n == 2 {
            vec![vec![1, 2], vec![2, 1]]
        } else {
            vec![vec![1, 2, 3], vec![1, 3, 2], vec![2, 1, 3], vec![2, 3, 1], vec![3, 1, 2], vec![3, 2, 1]]
        };
        let mut idx = vec![0usize; n];
        loop {
            let distinct = (0..n).all(|i| (0..i).all(|j| idx[i] != idx[j]));
            if distinct {
                let pos: Vec<Cell> = idx.iter().map(|&i| cells[i]).collect();
                for weights in &weight_orders {
                    let w = GridWorld::with_weights(5, 5, &pos, weights, Mode::Observed, 0).unwrap();
                    for target in 0..n {
                        for dir in Direction::ALL {
                            let a = EnvAction::new(target, dir);
                            let (expect, pair) = push(5, 5, &pos, weights, target, dir.delta());
                            let got: Vec<Cell> = w.step(a).unwrap().objects.iter().map(|o| o.pos).collect();
                            let inter = w.ground_truth_interactions(a).unwrap();
                            if got != expect || inter != pair.into_iter().collect::<Vec<_>>() {
                                bad += 1;
                            }
                            checked += 1;
                        }
                    }
                }
            }
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < cells.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }
    (checked, bad)
}
