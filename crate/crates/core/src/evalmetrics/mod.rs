//! Ranking and classification metrics over dense score matrices.
//!
//! Rankings sort by descending score and break ties by ascending index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item order by descending score, ties to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Average precision of one ranking; `None` without relevant items.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (pos, &i) in ranking(scores).iter().enumerate() {
        if relevant[i] {
            hits += 1;
            acc += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(acc / total as f64)
}

/// nDCG with gain equal to relevance and discount `1 / log2(rank + 1)`.
pub fn ndcg(scores: &[f64], gains: &[f64]) -> Option<f64> {
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .enumerate()
            .map(|(pos, &i)| gains[i] / ((pos + 2) as f64).log2())
            .sum()
    };
    let mut ideal: Vec<usize> = (0..gains.len()).collect();
    ideal.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
    let best = dcg(&ideal);
    (best > 0.0).then(|| dcg(&ranking(scores)) / best)
}

fn check(scores: &[Vec<f64>], rel: &[Vec<f64>], op: &str) -> Result<usize> {
    let cols = scores.first().map_or(0, Vec::len);
    if scores.len() != rel.len() || scores.iter().chain(rel).any(|r| r.len() != cols) {
        return Err(Error::Contract(format!("{op}: score and relevance shapes differ")));
    }
    if scores.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{op}: non-finite score")));
    }
    if rel.iter().flatten().any(|&x| !(x >= 0.0)) {
        return Err(Error::Contract(format!("{op}: negative relevance")));
    }
    Ok(cols)
}

fn column(m: &[Vec<f64>], c: usize) -> Vec<f64> {
    m.iter().map(|r| r[c]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub value: f64,
    /// Per-class AP; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Class-wise AP over the item ranking (`scores` is items x classes), averaged
/// over classes that have at least one positive.
pub fn multilabel_map(scores: &[Vec<f64>], relevance: &[Vec<f64>]) -> Result<MapReport> {
    let classes = check(scores, relevance, "multilabel_map")?;
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let rel: Vec<bool> = column(relevance, c).iter().map(|&r| r > 0.0).collect();
            average_precision(&column(scores, c), &rel)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(MapReport {
        value: mean(&valid),
        skipped: classes - valid.len(),
        per_class,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub mean_class: f64,
    /// Classes with no test item, left out of `mean_class`.
    pub absent: Vec<usize>,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and the unweighted mean of per-class recalls.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<Accuracy> {
    let classes = scores.first().map_or(0, Vec::len);
    if scores.len() != labels.len() || scores.iter().any(|r| r.len() != classes) {
        return Err(Error::Contract("accuracy: scores and labels disagree".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("accuracy: label {l} out of {classes} classes")));
    }
    let mut seen = vec![0usize; classes];
    let mut right = vec![0usize; classes];
    for (row, &l) in scores.iter().zip(labels) {
        seen[l] += 1;
        if argmax(row) == l {
            right[l] += 1;
        }
    }
    let recalls: Vec<f64> = (0..classes)
        .filter(|&c| seen[c] > 0)
        .map(|c| right[c] as f64 / seen[c] as f64)
        .collect();
    Ok(Accuracy {
        top1: if labels.is_empty() {
            0.0
        } else {
            right.iter().sum::<usize>() as f64 / labels.len() as f64
        },
        mean_class: mean(&recalls),
        absent: (0..classes).filter(|&c| seen[c] == 0).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub map: f64,
    pub ndcg: f64,
    /// Queries without any relevant gallery item.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Video queries against the caption gallery (rows of the matrix).
    pub v2t: DirectionMetrics,
    /// Caption queries against the video gallery (columns).
    pub t2v: DirectionMetrics,
}

fn direction(sim: &[Vec<f64>], rel: &[Vec<f64>]) -> DirectionMetrics {
    let mut aps = Vec::new();
    let mut ndcgs = Vec::new();
    let mut skipped = 0;
    for (s, r) in sim.iter().zip(rel) {
        let binary: Vec<bool> = r.iter().map(|&x| x > 0.0).collect();
        match (average_precision(s, &binary), ndcg(s, r)) {
            (Some(ap), Some(nd)) => {
                aps.push(ap);
                ndcgs.push(nd);
            }
            _ => skipped += 1,
        }
    }
    DirectionMetrics {
        map: mean(&aps),
        ndcg: mean(&ndcgs),
        skipped,
    }
}

fn transpose(m: &[Vec<f64>], cols: usize) -> Vec<Vec<f64>> {
    (0..cols).map(|c| column(m, c)).collect()
}

/// Per-query AP and nDCG in both directions of a video x caption similarity
/// matrix with graded relevance in `[0, 1]`.
pub fn retrieval_metrics(sim: &[Vec<f64>], relevance: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    let cols = check(sim, relevance, "retrieval_metrics")?;
    Ok(RetrievalMetrics {
        v2t: direction(sim, relevance),
        t2v: direction(&transpose(sim, cols), &transpose(relevance, cols)),
    })
}

/// Dot products of every row of `a` with every row of `b`.
pub fn similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

/// Binary item x class relevance from label sets.
pub fn multi_hot(labels: &[Vec<usize>], classes: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|ls| {
            let mut row = vec![0.0; classes];
            for &l in ls {
                row[l] = 1.0;
            }
            row
        })
        .collect()
}

/// Graded pair relevance: Jaccard overlap of the two items' label sets.
pub fn label_overlap(labels: &[Vec<usize>]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|a| {
            labels
                .iter()
                .map(|b| {
                    let inter = a.iter().filter(|x| b.contains(x)).count();
                    let union = a.len() + b.len() - inter;
                    if union == 0 {
                        0.0
                    } else {
                        inter as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect()
}
