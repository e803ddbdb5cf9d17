//! Thresholded Pearson co-expression graphs.
//!
//! [`build_graph`] standardizes every gene profile once and then scans the
//! upper triangle of the gene-gene correlation matrix one column panel at a
//! time, so memory stays at O(panel · samples) on top of the standardized
//! data no matter how many genes there are.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::dataio::ExpressionMatrix;
use crate::error::{ensure, Result};
#[cfg(test)]
use crate::error::Error;

/// Undirected gene-gene graph over a sorted gene list. Each edge is stored
/// once as `(i, j)` with `i < j`, edges sorted lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct CoexpressionGraph {
    genes: Vec<String>,
    edges: Vec<(u32, u32)>,
    weights: Option<Vec<f64>>,
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Genes with at least one edge.
    pub genes_in_network: usize,
    pub pairs: usize,
}

impl CoexpressionGraph {
    pub fn empty(genes: impl IntoIterator<Item = String>) -> Self {
        let genes: BTreeSet<String> = genes.into_iter().collect();
        Self {
            genes: genes.into_iter().collect(),
            edges: Vec::new(),
            weights: None,
            threshold: None,
        }
    }

    /// Builds a graph from named edges. Orientation and repeats are
    /// collapsed; repeated weighted edges keep the larger-magnitude weight.
    /// Endpoints are added to the node set if missing.
    pub fn from_named_edges(
        genes: impl IntoIterator<Item = String>,
        pairs: Vec<(String, String, Option<f64>)>,
    ) -> Result<Self> {
        let mut all: BTreeSet<String> = genes.into_iter().collect();
        for (a, b, _) in &pairs {
            all.insert(a.clone());
            all.insert(b.clone());
        }
        let genes: Vec<String> = all.into_iter().collect();
        let index: BTreeMap<&str, u32> = genes
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i as u32))
            .collect();
        let weighted = pairs.first().is_some_and(|p| p.2.is_some());
        ensure!(
            pairs.iter().all(|p| p.2.is_some() == weighted),
            Validation,
            "either all edges carry a weight or none does"
        );
        let mut merged: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for (a, b, w) in &pairs {
            let (i, j) = (index[a.as_str()], index[b.as_str()]);
            ensure!(i != j, Validation, "self-loop on {a:?}");
            let key = (i.min(j), i.max(j));
            let w = w.unwrap_or(f64::NAN);
            merged
                .entry(key)
                .and_modify(|cur| *cur = stronger(*cur, w))
                .or_insert(w);
        }
        let (edges, ws): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
        Ok(Self {
            genes,
            edges,
            weights: weighted.then_some(ws),
            threshold: None,
        })
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.genes
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Correlation threshold the graph was built with, if known.
    /// Records the correlation threshold the graph was built with.
    pub fn with_threshold(mut self, threshold: Option<f64>) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn gene_index(&self, gene: &str) -> Option<usize> {
        self.genes.binary_search_by(|g| g.as_str().cmp(gene)).ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.genes.len()];
        for &(i, j) in &self.edges {
            deg[i as usize] += 1;
            deg[j as usize] += 1;
        }
        deg
    }

    /// Edge endpoints as gene names, in canonical order.
    pub fn named_edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges
            .iter()
            .map(|&(i, j)| (self.genes[i as usize].as_str(), self.genes[j as usize].as_str()))
    }

    pub fn stats(&self) -> GraphStats {
        graph_stats(self)
    }

    /// Subgraph induced on the genes accepted by `keep`.
    pub fn induced(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let mut remap = vec![u32::MAX; self.genes.len()];
        let mut genes = Vec::new();
        for (i, g) in self.genes.iter().enumerate() {
            if keep(g) {
                remap[i] = genes.len() as u32;
                genes.push(g.clone());
            }
        }
        let mut edges = Vec::new();
        let mut weights = self.weights.as_ref().map(|_| Vec::new());
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            let (a, b) = (remap[i as usize], remap[j as usize]);
            if a != u32::MAX && b != u32::MAX {
                edges.push((a, b));
                if let (Some(out), Some(src)) = (weights.as_mut(), self.weights.as_ref()) {
                    out.push(src[k]);
                }
            }
        }
        Self {
            genes,
            edges,
            weights,
            threshold: self.threshold,
        }
    }
}

fn stronger(a: f64, b: f64) -> f64 {
    if b.abs() > a.abs() {
        b
    } else {
        a
    }
}

pub fn graph_stats(g: &CoexpressionGraph) -> GraphStats {
    GraphStats {
        genes_in_network: g.degrees().iter().filter(|&&d| d > 0).count(),
        pairs: g.edges.len(),
    }
}

// ---------------------------------------------------------------------------
// Correlation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pearson {
    pub r: f64,
    /// One of the inputs had zero variance; `r` is reported as 0.
    pub degenerate: bool,
}

/// Sample Pearson correlation of two equally long vectors.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<Pearson> {
    ensure!(
        x.len() == y.len(),
        Shape,
        "vectors of length {} and {}",
        x.len(),
        y.len()
    );
    ensure!(x.len() >= 2, InvalidArgument, "need at least 2 observations");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if is_constant(x) || is_constant(y) || sxx == 0.0 || syy == 0.0 {
        return Ok(Pearson {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Pearson {
        r: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub(crate) fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Keep pairs with `r > tau`.
    #[default]
    Signed,
    /// Keep pairs with `|r| > tau`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphOptions {
    pub tau: f64,
    /// Column panel width of the pair scan.
    pub block: usize,
    pub mode: ThresholdMode,
    /// Store the correlation of every kept pair.
    pub keep_weights: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            tau: 0.85,
            block: 256,
            mode: ThresholdMode::Signed,
            keep_weights: true,
        }
    }
}

impl GraphOptions {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    fn keeps(&self, r: f64) -> bool {
        match self.mode {
            ThresholdMode::Signed => r > self.tau,
            ThresholdMode::Absolute => r.abs() > self.tau,
        }
    }
}

/// Gene profiles centered and scaled to unit norm, stored gene-major in
/// sorted gene order. Degenerate genes are all-zero rows.
struct Standardized {
    n_samples: usize,
    z: Vec<f64>,
    degenerate: Vec<bool>,
}

impl Standardized {
    fn new(expr: &ExpressionMatrix, order: &[usize]) -> Self {
        let n = expr.n_samples();
        let mut z = vec![0.0; order.len() * n];
        let mut degenerate = vec![false; order.len()];
        z.par_chunks_mut(n.max(1))
            .zip(degenerate.par_iter_mut())
            .zip(order.par_iter())
            .for_each(|((row, flag), &col)| {
                let profile = expr.profile(col);
                for (dst, v) in row.iter_mut().zip(profile.iter()) {
                    *dst = *v;
                }
                let mean = row.iter().sum::<f64>() / n as f64;
                let constant = is_constant(row);
                let mut ss = 0.0;
                for v in row.iter_mut() {
                    *v -= mean;
                    ss += *v * *v;
                }
                if constant || ss == 0.0 {
                    *flag = true;
                    row.fill(0.0);
                } else {
                    let inv = 1.0 / ss.sqrt();
                    row.iter_mut().for_each(|v| *v *= inv);
                }
            });
        Self {
            n_samples: n,
            z,
            degenerate,
        }
    }

    fn row(&self, g: usize) -> &[f64] {
        &self.z[g * self.n_samples..(g + 1) * self.n_samples]
    }
}

const ROW_GROUP: usize = 8;

/// Thresholded co-expression graph over all genes of `expr`.
///
/// Correlations are inner products of standardized profiles. Each pair is
/// accumulated sequentially over samples in a single accumulator, so the
/// value of a pair does not depend on the panel width, the row grouping or
/// the number of worker threads.
pub fn build_graph(expr: &ExpressionMatrix, opts: &GraphOptions) -> Result<CoexpressionGraph> {
    ensure!(
        opts.tau > 0.0 && opts.tau < 1.0,
        InvalidArgument,
        "tau must lie in (0, 1), got {}",
        opts.tau
    );
    ensure!(opts.block >= 1, InvalidArgument, "block size must be positive");
    ensure!(
        expr.n_samples() >= 2,
        InvalidArgument,
        "need at least 2 samples, got {}",
        expr.n_samples()
    );
    let mut order: Vec<usize> = (0..expr.n_genes()).collect();
    order.sort_by(|&a, &b| expr.gene_ids()[a].cmp(&expr.gene_ids()[b]));
    let genes: Vec<String> = order.iter().map(|&c| expr.gene_ids()[c].clone()).collect();

    let std = Standardized::new(expr, &order);
    let n_genes = genes.len();
    let panels: Vec<(usize, usize)> = (0..n_genes)
        .step_by(opts.block)
        .map(|s| (s, (s + opts.block).min(n_genes)))
        .collect();

    let per_panel: Vec<Vec<(u32, u32, f64)>> = panels
        .par_iter()
        .map(|&(j0, j1)| scan_panel(&std, j0, j1, opts))
        .collect();

    let mut hits: Vec<(u32, u32, f64)> = per_panel.into_iter().flatten().collect();
    hits.sort_unstable_by_key(|&(i, j, _)| (i, j));
    let edges = hits.iter().map(|&(i, j, _)| (i, j)).collect();
    let weights = opts
        .keep_weights
        .then(|| hits.iter().map(|&(_, _, r)| r).collect());
    Ok(CoexpressionGraph {
        genes,
        edges,
        weights,
        threshold: Some(opts.tau),
    })
}

/// All pairs `(i, j)` with `i < j` and `j` in `[j0, j1)` that pass the
/// threshold.
fn scan_panel(std: &Standardized, j0: usize, j1: usize, opts: &GraphOptions) -> Vec<(u32, u32, f64)> {
    let n = std.n_samples;
    let width = j1 - j0;
    // sample-major copy of the panel so the inner loop runs over contiguous genes
    let mut panel = vec![0.0; n * width];
    for (c, g) in (j0..j1).enumerate() {
        for (k, v) in std.row(g).iter().enumerate() {
            panel[k * width + c] = *v;
        }
    }
    let mut acc = vec![0.0; ROW_GROUP * width];
    let mut out = Vec::new();
    let mut i0 = 0;
    while i0 < j1 - 1 {
        let i1 = (i0 + ROW_GROUP).min(j1 - 1);
        let rows: Vec<&[f64]> = (i0..i1).map(|i| std.row(i)).collect();
        acc.fill(0.0);
        for k in 0..n {
            let p = &panel[k * width..(k + 1) * width];
            for (r, row) in rows.iter().enumerate() {
                let a = row[k];
                for (dst, b) in acc[r * width..(r + 1) * width].iter_mut().zip(p) {
                    *dst += a * b;
                }
            }
        }
        for (r, i) in (i0..i1).enumerate() {
            if std.degenerate[i] {
                continue;
            }
            for j in (i + 1).max(j0)..j1 {
                if std.degenerate[j] {
                    continue;
                }
                let corr = acc[r * width + (j - j0)].clamp(-1.0, 1.0);
                if opts.keeps(corr) {
                    out.push((i as u32, j as u32, corr));
                }
            }
        }
        i0 = i1;
    }
    out
}

/// Node and edge union. Shared weighted edges keep the larger-magnitude
/// weight; weights are dropped unless both inputs carry them.
pub fn union_graphs(a: &CoexpressionGraph, b: &CoexpressionGraph) -> CoexpressionGraph {
    let genes: BTreeSet<String> = a.genes.iter().chain(&b.genes).cloned().collect();
    let genes: Vec<String> = genes.into_iter().collect();
    let lookup = |g: &str| genes.binary_search_by(|x| x.as_str().cmp(g)).unwrap() as u32;
    let weighted = a.weights.is_some() && b.weights.is_some();
    let mut merged: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for g in [a, b] {
        for (k, (x, y)) in g.named_edges().enumerate() {
            let (i, j) = (lookup(x), lookup(y));
            let w = g.weights.as_ref().map_or(f64::NAN, |ws| ws[k]);
            merged
                .entry((i.min(j), i.max(j)))
                .and_modify(|cur| *cur = stronger(*cur, w))
                .or_insert(w);
        }
    }
    let (edges, ws): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
    let threshold = match (a.threshold, b.threshold) {
        (Some(x), Some(y)) if x == y => Some(x),
        _ => None,
    };
    CoexpressionGraph {
        genes,
        edges,
        weights: weighted.then_some(ws),
        threshold,
    }
}
