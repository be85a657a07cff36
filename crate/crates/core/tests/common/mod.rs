#![allow(dead_code)]

use cbtm::corpus::{generate_synthetic, Corpus, Document, SyntheticCorpus, SyntheticSpec};

/// Cheapest assignment of `cost.len()` points to `k` clusters whose sizes
/// differ by at most one, by exhaustive search.
pub fn brute_force_balanced(cost: &[Vec<f64>], k: usize) -> f64 {
    let d = cost.len();
    let base = d / k;
    let rem = d % k;
    let mut best = f64::INFINITY;
    let mut sizes = vec![0usize; k];
    fn go(
        i: usize,
        acc: f64,
        cost: &[Vec<f64>],
        sizes: &mut Vec<usize>,
        base: usize,
        rem: usize,
        best: &mut f64,
    ) {
        if acc >= *best {
            return;
        }
        if i == cost.len() {
            let big = sizes.iter().filter(|&&s| s == base + 1).count();
            if big == rem && sizes.iter().all(|&s| s == base || s == base + 1) {
                *best = acc;
            }
            return;
        }
        for c in 0..sizes.len() {
            let big = sizes.iter().filter(|&&s| s == base + 1).count();
            if !(sizes[c] < base || (sizes[c] == base && big < rem)) {
                continue;
            }
            sizes[c] += 1;
            go(i + 1, acc + cost[i][c], cost, sizes, base, rem, best);
            sizes[c] -= 1;
        }
    }
    go(0, 0.0, cost, &mut sizes, base, rem, &mut best);
    best
}

/// Minimum-cost perfect matching on a square matrix (O(n³) potentials method).
pub fn hungarian(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| a[p[j] - 1][j - 1]).sum()
}

/// Optimal balanced cost when `k` divides the point count, via the
/// slot-expanded square matching.
pub fn hungarian_balanced(cost: &[Vec<f64>], k: usize) -> f64 {
    let d = cost.len();
    assert_eq!(d % k, 0);
    let per = d / k;
    let square: Vec<Vec<f64>> = cost
        .iter()
        .map(|row| (0..d).map(|slot| row[slot / per]).collect())
        .collect();
    hungarian(&square)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Synthetic corpus with its last `n_eval` documents held out.
pub struct Split {
    pub synthetic: SyntheticCorpus,
    pub train: Corpus,
    pub eval: Vec<Document>,
    pub train_tokens: u64,
}

pub fn synthetic_split(spec: &SyntheticSpec, n_eval: usize) -> Split {
    let synthetic = generate_synthetic(spec).expect("valid synthetic spec");
    let n = synthetic.corpus.len();
    let train_idx: Vec<usize> = (0..n - n_eval).collect();
    let train = synthetic.corpus.subset(&train_idx, "train").unwrap();
    let eval = synthetic.corpus.documents()[n - n_eval..].to_vec();
    let train_tokens = train.documents().iter().map(|d| d.tokens().count() as u64).sum();
    Split {
        synthetic,
        train,
        eval,
        train_tokens,
    }
}
