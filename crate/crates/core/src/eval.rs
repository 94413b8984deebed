//! Cross-modal retrieval metrics: distance matrix, protocol filtering,
//! Market-style AP, CMC, and a brute-force certification oracle.

use std::fmt;

use rayon::prelude::*;

use crate::data::DISTRACTOR;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];
/// Largest query or gallery size `oracle_evaluate` accepts.
pub const ORACLE_MAX: usize = 200;

#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    /// `[N, D]`.
    pub features: Tensor<f64>,
    pub ids: Vec<i64>,
    pub modalities: Vec<String>,
    /// Sample keys; a query never retrieves a gallery item with its own key.
    pub keys: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(features: Tensor<f64>, ids: Vec<i64>, modalities: Vec<String>, keys: Vec<String>) -> Result<Self> {
        let n = match *features.shape() {
            [n, _] => n,
            ref s => return Err(Error::Dimension(format!("embeddings must be [N, D], got {s:?}"))),
        };
        if ids.len() != n || modalities.len() != n || keys.len() != n {
            return Err(Error::Dimension(format!(
                "{n} embeddings but {} ids, {} modalities, {} keys",
                ids.len(),
                modalities.len(),
                keys.len()
            )));
        }
        Ok(EmbeddingSet {
            features,
            ids,
            modalities,
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    fn select(&self, modality: Option<&str>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| modality.is_none_or(|m| self.modalities[i] == m))
            .collect()
    }

    fn rows(&self, idx: &[usize]) -> Tensor<f64> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(vec![idx.len(), d], data).expect("row gather")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalProtocol {
    pub name: String,
    pub query_modality: Option<String>,
    pub gallery_modality: Option<String>,
    pub exclude_self: bool,
}

impl RetrievalProtocol {
    pub fn all() -> Self {
        RetrievalProtocol {
            name: "all".into(),
            query_modality: None,
            gallery_modality: None,
            exclude_self: true,
        }
    }

    pub fn cross(query: &str, gallery: &str) -> Self {
        RetrievalProtocol {
            name: format!("{query}->{gallery}"),
            query_modality: Some(query.into()),
            gallery_modality: Some(gallery.into()),
            exclude_self: true,
        }
    }

    /// `all`, or `A->B` / `A→B` for queries of modality A against a gallery of B.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(Self::all());
        }
        let (q, g) = s
            .split_once("->")
            .or_else(|| s.split_once('→'))
            .ok_or_else(|| Error::Config(format!("protocol {s:?} is neither \"all\" nor \"A->B\"")))?;
        let (q, g) = (q.trim(), g.trim());
        if q.is_empty() || g.is_empty() {
            return Err(Error::Config(format!("protocol {s:?} names an empty modality")));
        }
        Ok(Self::cross(q, g))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub protocol: String,
    /// Percent.
    pub map: f64,
    /// `(rank, percent)` for each of `CMC_RANKS`.
    pub cmc: Vec<(usize, f64)>,
    /// AP in `[0, 1]` per retained query, in query order.
    pub ap: Vec<f64>,
    /// Query-set positions of the retained queries.
    pub retained: Vec<usize>,
    /// Query-set positions dropped for lacking any relevant gallery item.
    pub dropped: Vec<usize>,
    /// Ranked gallery length per retained query, after self-exclusion.
    pub gallery_sizes: Vec<usize>,
}

impl MetricsReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == k).map(|(_, v)| *v)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10} mAP {:6.2}", self.protocol, self.map)?;
        for (k, v) in &self.cmc {
            write!(f, "  R{k} {v:6.2}")?;
        }
        write!(f, "  queries {}", self.retained.len())?;
        if !self.dropped.is_empty() {
            write!(f, " (dropped {})", self.dropped.len())?;
        }
        Ok(())
    }
}

/// `[q, g]` matrix of Euclidean distances.
pub fn pairwise_euclidean(q: &Tensor<f64>, g: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (nq, dq, ng, dg) = match (q.shape(), g.shape()) {
        (&[a, b], &[c, d]) => (a, b, c, d),
        (a, b) => return Err(Error::Dimension(format!("pairwise_euclidean wants two matrices, got {a:?} and {b:?}"))),
    };
    if dq != dg {
        return Err(Error::Dimension(format!("feature width {dq} vs {dg}")));
    }
    let mut out = vec![0.0; nq * ng];
    out.par_chunks_mut(ng.max(1)).enumerate().for_each(|(i, row)| {
        let a = q.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = a
                .iter()
                .zip(g.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    });
    Tensor::new(vec![nq, ng], out)
}

struct Filtered {
    qi: Vec<usize>,
    gi: Vec<usize>,
}

fn filter(query: &EmbeddingSet, gallery: &EmbeddingSet, p: &RetrievalProtocol) -> Result<Filtered> {
    if query.dim() != gallery.dim() {
        return Err(Error::Dimension(format!(
            "query width {} vs gallery width {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let qi = query.select(p.query_modality.as_deref());
    let gi = gallery.select(p.gallery_modality.as_deref());
    if qi.is_empty() || gi.is_empty() {
        return Err(Error::Protocol(format!(
            "protocol {} leaves {} queries and {} gallery items",
            p.name,
            qi.len(),
            gi.len()
        )));
    }
    Ok(Filtered { qi, gi })
}

fn relevant(qid: i64, gid: i64) -> bool {
    gid == qid && gid != DISTRACTOR
}

/// Per-query outcome: `None` when the query has no relevant item.
struct QueryResult {
    ap: f64,
    first_hit: usize,
    gallery: usize,
}

fn finish(p: &RetrievalProtocol, results: Vec<Option<QueryResult>>) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        protocol: p.name.clone(),
        map: 0.0,
        cmc: Vec::new(),
        ap: Vec::new(),
        retained: Vec::new(),
        dropped: Vec::new(),
        gallery_sizes: Vec::new(),
    };
    let mut first_hits = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some(r) => {
                report.retained.push(i);
                report.ap.push(r.ap);
                report.gallery_sizes.push(r.gallery);
                first_hits.push(r.first_hit);
            }
            None => report.dropped.push(i),
        }
    }
    let n = report.ap.len();
    if n == 0 {
        return Err(Error::Protocol(format!(
            "protocol {}: no query has a relevant gallery item",
            p.name
        )));
    }
    report.map = 100.0 * report.ap.iter().sum::<f64>() / n as f64;
    report.cmc = CMC_RANKS
        .iter()
        .map(|&k| (k, 100.0 * first_hits.iter().filter(|&&h| h <= k).count() as f64 / n as f64))
        .collect();
    Ok(report)
}

/// Ranks each filtered gallery by ascending distance, ties by gallery index.
pub fn evaluate(query: &EmbeddingSet, gallery: &EmbeddingSet, p: &RetrievalProtocol) -> Result<MetricsReport> {
    let Filtered { qi, gi } = filter(query, gallery, p)?;
    let dist = pairwise_euclidean(&query.rows(&qi), &gallery.rows(&gi))?;
    let ng = gi.len();
    let results: Vec<Option<QueryResult>> = qi
        .par_iter()
        .enumerate()
        .map(|(a, &q)| {
            let d = &dist.data()[a * ng..(a + 1) * ng];
            let mut order: Vec<usize> = (0..ng)
                .filter(|&b| !(p.exclude_self && gallery.keys[gi[b]] == query.keys[q]))
                .collect();
            order.sort_by(|&x, &y| d[x].total_cmp(&d[y]));
            let qid = query.ids[q];
            let (mut hits, mut sum, mut first) = (0usize, 0.0, 0usize);
            for (r, &b) in order.iter().enumerate() {
                if relevant(qid, gallery.ids[gi[b]]) {
                    hits += 1;
                    sum += hits as f64 / (r + 1) as f64;
                    if first == 0 {
                        first = r + 1;
                    }
                }
            }
            (hits > 0).then(|| QueryResult {
                ap: sum / hits as f64,
                first_hit: first,
                gallery: order.len(),
            })
        })
        .collect();
    let mut report = finish(p, results)?;
    report.retained = report.retained.iter().map(|&i| qi[i]).collect();
    report.dropped = report.dropped.iter().map(|&i| qi[i]).collect();
    Ok(report)
}

/// Quadratic re-derivation of every metric from first principles: the rank
/// of each gallery item is counted directly, and AP averages precision at
/// each relevant item's own rank.
pub fn oracle_evaluate(query: &EmbeddingSet, gallery: &EmbeddingSet, p: &RetrievalProtocol) -> Result<MetricsReport> {
    if query.len() > ORACLE_MAX || gallery.len() > ORACLE_MAX {
        return Err(Error::Contract(format!(
            "oracle_evaluate handles at most {ORACLE_MAX} items per side, got {} and {}",
            query.len(),
            gallery.len()
        )));
    }
    let Filtered { qi, gi } = filter(query, gallery, p)?;
    let mut results = Vec::with_capacity(qi.len());
    for &q in &qi {
        let a = query.features.row(q);
        let mut dist = Vec::with_capacity(gi.len());
        for &g in &gi {
            let b = gallery.features.row(g);
            let mut s = 0.0;
            for k in 0..a.len() {
                s += (a[k] - b[k]) * (a[k] - b[k]);
            }
            dist.push(s.sqrt());
        }
        let kept: Vec<usize> = (0..gi.len())
            .filter(|&b| !(p.exclude_self && gallery.keys[gi[b]] == query.keys[q]))
            .collect();
        let before = |x: usize, y: usize| dist[x] < dist[y] || (dist[x] == dist[y] && x < y);
        let rank_of = |b: usize| 1 + kept.iter().filter(|&&o| before(o, b)).count();
        let rel: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&b| relevant(query.ids[q], gallery.ids[gi[b]]))
            .collect();
        if rel.is_empty() {
            results.push(None);
            continue;
        }
        let mut ap = 0.0;
        let mut first = usize::MAX;
        for &b in &rel {
            let r = rank_of(b);
            let hits_to_r = rel.iter().filter(|&&o| rank_of(o) <= r).count();
            ap += hits_to_r as f64 / r as f64;
            first = first.min(r);
        }
        results.push(Some(QueryResult {
            ap: ap / rel.len() as f64,
            first_hit: first,
            gallery: kept.len(),
        }));
    }
    let mut report = finish(p, results)?;
    report.retained = report.retained.iter().map(|&i| qi[i]).collect();
    report.dropped = report.dropped.iter().map(|&i| qi[i]).collect();
    Ok(report)
}
