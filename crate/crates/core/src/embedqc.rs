//! Neighborhood preservation of co-expression structure in embedding space.
//!
//! For each gene in the network, its `k` nearest neighbors are taken once in
//! the adjacency space (rows of `M`) and once in the embedding space (rows of
//! `G`); NP(k) is the mean fraction of shared neighbors.
//!
//! Rankings are deterministic: candidate scores are compared at a resolution
//! of [`RANK_RESOLUTION`] times the largest score magnitude seen for the
//! query, and equal scores go to the lower gene index. Without the resolution
//! step, genes whose embeddings agree up to round-off (clique members after
//! NMF, say) would be ordered by floating-point noise.

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::nmf::{AdjacencyMatrix, GeneEmbeddings};

/// Relative resolution at which neighbor scores are considered equal.
pub const RANK_RESOLUTION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NpOptions {
    /// Similarity between adjacency rows.
    pub high_dim: Metric,
    /// Similarity between embedding rows.
    pub low_dim: Metric,
}

impl Default for NpOptions {
    fn default() -> Self {
        Self {
            high_dim: Metric::Cosine,
            low_dim: Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodReport {
    pub k: usize,
    /// `(gene_id, |HDN ∩ LDN| / k)` for every evaluated gene, in gene order.
    pub per_gene_overlap: Vec<(String, f64)>,
    pub np_score: f64,
    pub genes_evaluated: usize,
}

/// Cosine from a dot product and the two squared norms. Both spaces go
/// through this so identical inputs give bit-identical scores.
#[inline]
fn cosine(dot: f64, na: f64, nb: f64) -> f64 {
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Top `k` of `candidates` by descending score, ties by ascending index.
fn rank_top_k(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    let scale = scored.iter().fold(0.0_f64, |m, (s, _)| m.max(s.abs()));
    let res = RANK_RESOLUTION * scale;
    let mut keyed: Vec<(i64, usize)> = scored
        .drain(..)
        .map(|(s, j)| {
            let q = if res > 0.0 { (s / res).round() as i64 } else { 0 };
            (q, j)
        })
        .collect();
    let by_rank = |a: &(i64, usize), b: &(i64, usize)| b.0.cmp(&a.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k, by_rank);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(by_rank);
    keyed.into_iter().map(|(_, j)| j).collect()
}

/// Scores of every pool member against gene `i` in adjacency space.
fn adjacency_scores(adj: &AdjacencyMatrix, i: usize, pool: &[usize], metric: Metric) -> Vec<(f64, usize)> {
    let m = adj.matrix();
    let mut shared = vec![0u32; adj.n_genes()];
    for u in adj.neighbors(i) {
        for j in adj.neighbors(u) {
            shared[j] += 1;
        }
    }
    let deg_i = m.row_nnz(i) as f64;
    pool.iter()
        .filter(|&&j| j != i)
        .map(|&j| {
            let deg_j = m.row_nnz(j) as f64;
            let inter = shared[j] as f64;
            let s = match metric {
                Metric::Cosine => cosine(inter, deg_i, deg_j),
                Metric::Euclidean => -(deg_i + deg_j - 2.0 * inter).max(0.0).sqrt(),
            };
            (s, j)
        })
        .collect()
}

/// Scores of every pool member against gene `i` in embedding space.
fn embedding_scores(emb: &GeneEmbeddings, i: usize, pool: &[usize], metric: Metric) -> Vec<(f64, usize)> {
    let gi = emb.g.row(i);
    let ni = gi.dot(&gi);
    pool.iter()
        .filter(|&&j| j != i)
        .map(|&j| {
            let gj = emb.g.row(j);
            let s = match metric {
                Metric::Cosine => cosine(gi.dot(&gj), ni, gj.dot(&gj)),
                Metric::Euclidean => {
                    -gi.iter()
                        .zip(gj.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                }
            };
            (s, j)
        })
        .collect()
}

fn check_k(k: usize, pool: usize) -> Result<()> {
    ensure!(k >= 1, InvalidArgument, "k must be at least 1");
    ensure!(
        k < pool,
        InvalidArgument,
        "k = {k} needs more than {pool} evaluable genes"
    );
    Ok(())
}

/// `k` nearest genes to `i` by cosine similarity of adjacency rows, among
/// genes with a nonzero row.
pub fn hd_neighbors(adj: &AdjacencyMatrix, i: usize, k: usize) -> Result<Vec<usize>> {
    hd_neighbors_with(adj, i, k, Metric::Cosine)
}

pub fn hd_neighbors_with(adj: &AdjacencyMatrix, i: usize, k: usize, metric: Metric) -> Result<Vec<usize>> {
    ensure!(i < adj.n_genes(), InvalidArgument, "gene index {i} out of range");
    let pool: Vec<usize> = (0..adj.n_genes()).filter(|&j| adj.matrix().row_nnz(j) > 0).collect();
    if adj.matrix().row_nnz(i) == 0 {
        return Err(Error::InvalidArgument(format!(
            "gene {:?} has no edges and cannot be ranked",
            adj.gene_ids()[i]
        )));
    }
    check_k(k, pool.len())?;
    Ok(rank_top_k(adjacency_scores(adj, i, &pool, metric), k))
}

/// `k` nearest genes to `i` by Euclidean distance of embedding rows, among
/// genes with a nonzero embedding.
pub fn ld_neighbors(emb: &GeneEmbeddings, i: usize, k: usize) -> Result<Vec<usize>> {
    ld_neighbors_with(emb, i, k, Metric::Euclidean)
}

pub fn ld_neighbors_with(emb: &GeneEmbeddings, i: usize, k: usize, metric: Metric) -> Result<Vec<usize>> {
    let n = emb.g.nrows();
    ensure!(i < n, InvalidArgument, "gene index {i} out of range");
    if emb.row_is_zero(i) {
        return Err(Error::InvalidArgument(format!(
            "gene {:?} has a zero embedding and cannot be ranked",
            emb.gene_ids[i]
        )));
    }
    let pool: Vec<usize> = (0..n).filter(|&j| !emb.row_is_zero(j)).collect();
    check_k(k, pool.len())?;
    Ok(rank_top_k(embedding_scores(emb, i, &pool, metric), k))
}

pub fn np_score(adj: &AdjacencyMatrix, emb: &GeneEmbeddings, k: usize) -> Result<NeighborhoodReport> {
    np_score_with(adj, emb, k, &NpOptions::default())
}

/// Neighborhood preservation over the genes with a nonzero adjacency row.
/// Both rankings draw candidates from that same gene set.
pub fn np_score_with(
    adj: &AdjacencyMatrix,
    emb: &GeneEmbeddings,
    k: usize,
    opts: &NpOptions,
) -> Result<NeighborhoodReport> {
    ensure!(
        adj.gene_ids() == emb.gene_ids.as_slice(),
        Shape,
        "adjacency and embeddings are indexed by different gene lists"
    );
    let pool: Vec<usize> = (0..adj.n_genes()).filter(|&j| adj.matrix().row_nnz(j) > 0).collect();
    check_k(k, pool.len())?;
    let overlaps: Vec<f64> = pool
        .par_iter()
        .map(|&i| {
            let hd = rank_top_k(adjacency_scores(adj, i, &pool, opts.high_dim), k);
            let mut ld = rank_top_k(embedding_scores(emb, i, &pool, opts.low_dim), k);
            ld.sort_unstable();
            let shared = hd.iter().filter(|j| ld.binary_search(j).is_ok()).count();
            shared as f64 / k as f64
        })
        .collect();
    let np = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
    Ok(NeighborhoodReport {
        k,
        per_gene_overlap: pool
            .iter()
            .zip(overlaps)
            .map(|(&i, o)| (adj.gene_ids()[i].clone(), o))
            .collect(),
        np_score: np,
        genes_evaluated: pool.len(),
    })
}
