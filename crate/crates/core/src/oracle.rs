//! Independent brute-force reference computations used by tests and the
//! verification suites.

/// Least-squares residual `min_a || h - sum_i a_i r_i ||` solved through the
/// normal equations, with no orthogonality assumption on the rows.
pub fn lstsq_residual(rows: &[&[f64]], h: &[f64]) -> f64 {
    let k = rows.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    // augmented system [G^T G | G^T h]
    let mut m: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut row: Vec<f64> = (0..k).map(|j| dot(rows[i], rows[j])).collect();
            row.push(dot(rows[i], h));
            row
        })
        .collect();
    for c in 0..k {
        let p = (c..k)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .expect("non-empty pivot range");
        m.swap(c, p);
        let piv = m[c][c];
        if piv.abs() < 1e-14 {
            continue;
        }
        for r in 0..k {
            if r != c {
                let f = m[r][c] / piv;
                for j in c..=k {
                    m[r][j] -= f * m[c][j];
                }
            }
        }
    }
    let a: Vec<f64> = (0..k)
        .map(|i| {
            if m[i][i].abs() < 1e-14 {
                0.0
            } else {
                m[i][k] / m[i][i]
            }
        })
        .collect();
    let mut r = h.to_vec();
    for (ai, row) in a.iter().zip(rows) {
        r.iter_mut().zip(row.iter()).for_each(|(x, y)| *x -= ai * y);
    }
    dot(&r, &r).sqrt()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Subset of basis rows with the smallest least-squares residual to `h`, and
/// that residual. Ties keep the lexicographically first subset.
pub fn best_subset(basis: &[Vec<f64>], h: &[f64], k: usize) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::INFINITY);
    for s in subsets(basis.len(), k) {
        let rows: Vec<&[f64]> = s.iter().map(|&i| basis[i].as_slice()).collect();
        let r = lstsq_residual(&rows, h);
        if r < best.1 {
            best = (s, r);
        }
    }
    best
}

/// Plain triple-loop product of `[n x k]` and `[k x m]` row-major matrices.
pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    out
}

/// 1-based rank of item `i`: items with a higher score, or an equal score
/// and a lower index, come first.
fn rank_of(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

/// Average precision as the mean over relevant items of precision at their rank.
pub fn brute_ap(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| relevant[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &pos {
        let r = rank_of(scores, i);
        let above = (0..scores.len())
            .filter(|&j| relevant[j] && rank_of(scores, j) <= r)
            .count();
        total += above as f64 / r as f64;
    }
    Some(total / pos.len() as f64)
}

/// nDCG by explicit rank lookup; the ideal DCG pairs sorted gains with the
/// discounts directly.
pub fn brute_ndcg(scores: &[f64], gains: &[f64]) -> Option<f64> {
    let n = scores.len();
    let dcg: f64 = (0..n)
        .map(|i| gains[i] / ((rank_of(scores, i) + 1) as f64).log2())
        .sum();
    let mut sorted = gains.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let ideal: f64 = sorted
        .iter()
        .enumerate()
        .map(|(p, g)| g / ((p + 2) as f64).log2())
        .sum();
    (ideal > 0.0).then(|| dcg / ideal)
}

/// Class-wise mAP with the item ranking of each class column.
pub fn brute_map(scores: &[Vec<f64>], rel: &[Vec<f64>]) -> f64 {
    let classes = scores.first().map_or(0, Vec::len);
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let b: Vec<bool> = rel.iter().map(|r| r[c] > 0.0).collect();
            brute_ap(&s, &b)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Top-1 and mean-class accuracy with explicit loops.
pub fn brute_accuracy(scores: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let classes = scores.first().map_or(0, Vec::len);
    let pred = |row: &[f64]| {
        let mut b = 0;
        for j in 1..row.len() {
            if row[j] > row[b] {
                b = j;
            }
        }
        b
    };
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(r, &l)| pred(r) == l)
        .count();
    let mut recalls = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !members.is_empty() {
            let ok = members.iter().filter(|&&i| pred(&scores[i]) == c).count();
            recalls.push(ok as f64 / members.len() as f64);
        }
    }
    let mc = if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    };
    (correct as f64 / labels.len().max(1) as f64, mc)
}

/// Symmetric InfoNCE as a per-element double loop.
pub fn brute_info_nce(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let n = v.len();
    let s = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let mut z_v = 0.0;
        let mut z_t = 0.0;
        for j in 0..n {
            z_v += s(&v[i], &t[j]).exp();
            z_t += s(&t[i], &v[j]).exp();
        }
        total += s(&v[i], &t[i]) - z_v.ln() + s(&t[i], &v[i]) - z_t.ln();
    }
    -total / n as f64
}
