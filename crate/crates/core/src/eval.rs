//! Zero-shot retrieval metrics: mAP over the full ranking and Prec@K, for
//! real-valued embeddings (Euclidean) and sign codes (Hamming).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffcore::Tensor;
use crate::error::{OanError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Real,
    Binary,
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::Real => "real",
            RetrievalMode::Binary => "binary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Hamming,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map_all: f64,
    pub prec_at: BTreeMap<usize, f64>,
    pub per_query_ap: Vec<f64>,
    pub mode: RetrievalMode,
}

impl RetrievalReport {
    pub fn num_queries(&self) -> usize {
        self.per_query_ap.len()
    }

    /// `{"map_all", "prec": {"K": value}, "mode", "num_queries"}`.
    pub fn to_json(&self) -> serde_json::Value {
        let prec: serde_json::Map<String, serde_json::Value> =
            self.prec_at.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        json!({
            "map_all": self.map_all,
            "prec": prec,
            "mode": self.mode.as_str(),
            "num_queries": self.num_queries(),
        })
    }
}

/// `(1/R) Σ_{k: rel_k} hits(≤k)/k`; 0 when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

/// Relevant items among the first `k`, divided by `k`. Positions past the end
/// of the list count as irrelevant.
pub fn precision_at_k(relevance: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(OanError::config("precision@k needs k >= 1"));
    }
    let hits = relevance.iter().take(k).filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}

/// Elementwise sign codes in {−1, +1}; `sign(0) = +1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignCodes {
    rows: usize,
    cols: usize,
    bits: Vec<i8>,
}

impl SignCodes {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn binarize<T: Scalar>(x: &Tensor<T>) -> SignCodes {
    SignCodes {
        rows: x.rows(),
        cols: x.cols(),
        bits: x.data().iter().map(|&v| if v >= T::zero() { 1 } else { -1 }).collect(),
    }
}

pub fn hamming(a: &[i8], b: &[i8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn sq_euclid<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Orders indices by ascending distance, ties by ascending index.
fn argsort_by_distance<D: PartialOrd + Copy>(dists: &[D]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(|&a, &b| {
        dists[a]
            .partial_cmp(&dists[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Gallery permutation by ascending distance to `query`, ties broken by index.
/// With [`Metric::Hamming`] both sides are sign-binarized first.
pub fn rank_gallery<T: Scalar>(query: &[T], gallery: &Tensor<T>, metric: Metric) -> Result<Vec<usize>> {
    if query.len() != gallery.cols() {
        return Err(OanError::Shape {
            op: "rank_gallery",
            left: (1, query.len()),
            right: gallery.shape(),
        });
    }
    Ok(match metric {
        Metric::Euclidean => {
            let d: Vec<T> = (0..gallery.rows()).map(|g| sq_euclid(query, gallery.row(g))).collect();
            argsort_by_distance(&d)
        }
        Metric::Hamming => {
            let q: Vec<i8> = query.iter().map(|&v| if v >= T::zero() { 1 } else { -1 }).collect();
            let codes = binarize(gallery);
            let d: Vec<usize> = (0..codes.rows()).map(|g| hamming(&q, codes.row(g))).collect();
            argsort_by_distance(&d)
        }
    })
}

/// Sketch-to-image retrieval: every query ranks the full gallery; relevance is
/// label equality.
pub fn evaluate_retrieval<T: Scalar>(
    queries: &Tensor<T>,
    query_labels: &[usize],
    gallery: &Tensor<T>,
    gallery_labels: &[usize],
    ks: &[usize],
    mode: RetrievalMode,
) -> Result<RetrievalReport> {
    if gallery.rows() == 0 {
        return Err(OanError::config("retrieval gallery is empty"));
    }
    if queries.cols() != gallery.cols() {
        return Err(OanError::Shape {
            op: "evaluate_retrieval",
            left: queries.shape(),
            right: gallery.shape(),
        });
    }
    if query_labels.len() != queries.rows() || gallery_labels.len() != gallery.rows() {
        return Err(OanError::config("label count does not match embedding rows"));
    }
    if ks.contains(&0) {
        return Err(OanError::config("precision@k needs k >= 1"));
    }
    let metric = match mode {
        RetrievalMode::Real => Metric::Euclidean,
        RetrievalMode::Binary => Metric::Hamming,
    };

    let mut per_query_ap = Vec::with_capacity(queries.rows());
    let mut prec_sums = vec![0.0; ks.len()];
    for (q, &label) in query_labels.iter().enumerate() {
        let order = rank_gallery(queries.row(q), gallery, metric)?;
        let rel: Vec<bool> = order.iter().map(|&g| gallery_labels[g] == label).collect();
        per_query_ap.push(average_precision(&rel));
        for (s, &k) in prec_sums.iter_mut().zip(ks) {
            *s += precision_at_k(&rel, k)?;
        }
    }
    let nq = per_query_ap.len().max(1) as f64;
    let map_all = per_query_ap.iter().sum::<f64>() / nq;
    let prec_at = ks.iter().zip(prec_sums).map(|(&k, s)| (k, s / nq)).collect();
    Ok(RetrievalReport {
        map_all,
        prec_at,
        per_query_ap,
        mode,
    })
}
