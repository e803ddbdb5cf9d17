//! Nonnegative factorization `M ≈ G Yᵀ` of sparse co-expression adjacency
//! matrices with the Lee–Seung multiplicative updates for the squared
//! Frobenius objective.
//!
//! `M` is kept in compressed-row form. Neither `G Yᵀ` nor the dense residual
//! is ever formed; the loss uses
//! `‖M − GYᵀ‖² = ‖M‖² − 2 Σ_{(i,j) ∈ nz(M)} M_ij (GYᵀ)_ij + tr(GᵀG · YᵀY)`.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coexpr::CoexpressionGraph;
use crate::error::{ensure, Error, Result};

/// Denominator guard of the multiplicative updates.
pub const UPDATE_EPS: f64 = 1e-12;

/// Square sparse matrix with nonnegative entries in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// explicit zeros dropped.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, v) in &triplets {
            ensure!(i < n && j < n, Shape, "entry ({i}, {j}) outside {n}x{n}");
            ensure!(
                v.is_finite() && v >= 0.0,
                InvalidArgument,
                "entry ({i}, {j}) = {v} is not a finite nonnegative value"
            );
        }
        triplets.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((i, j));
            row_ptr[i + 1] += 1;
            cols.push(j as u32);
            vals.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut m = Self {
            n,
            row_ptr,
            cols,
            vals,
        };
        m.drop_zeros();
        Ok(m)
    }

    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Result<Self> {
        ensure!(dense.is_square(), Shape, "matrix is {:?}, expected square", dense.dim());
        let triplets = dense
            .indexed_iter()
            .filter(|(_, v)| **v != 0.0)
            .map(|((i, j), v)| (i, j, *v))
            .collect();
        Self::from_triplets(dense.nrows(), triplets)
    }

    fn drop_zeros(&mut self) {
        if self.vals.iter().all(|v| *v != 0.0) {
            return;
        }
        let mut row_ptr = vec![0; self.n + 1];
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if v != 0.0 {
                    cols.push(j as u32);
                    vals.push(v);
                }
            }
            row_ptr[i + 1] = cols.len();
        }
        *self = Self {
            n: self.n,
            row_ptr,
            cols,
            vals,
        };
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.vals[span])
            .map(|(&j, &v)| (j as usize, v))
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (j, i, v)))
            .collect();
        Self::from_triplets(self.n, triplets).expect("transpose of a valid matrix")
    }

    pub fn is_symmetric(&self) -> bool {
        *self == self.transpose()
    }

    pub fn squared_norm(&self) -> f64 {
        self.vals.iter().map(|v| v * v).sum()
    }

    pub fn sum(&self) -> f64 {
        self.vals.iter().sum()
    }

    /// `self · x` for a dense `n × d` matrix `x`.
    pub fn mul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, x.ncols()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut dst)| {
                for (j, v) in self.row(i) {
                    dst.scaled_add(v, &x.row(j));
                }
            });
        out
    }
}

/// Binary symmetric adjacency matrix over an ordered gene universe.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    gene_ids: Vec<String>,
    matrix: SparseMatrix,
}

impl AdjacencyMatrix {
    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    /// Genes whose adjacency row is nonzero.
    pub fn in_network(&self) -> Vec<bool> {
        (0..self.n_genes()).map(|i| self.matrix.row_nnz(i) > 0).collect()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.matrix.row(i).map(|(j, _)| j)
    }
}

/// `M[i][j] = M[j][i] = 1` for every edge of `g` whose genes are both in
/// `universe`; rows follow `universe` order. Universe ids must be unique.
pub fn adjacency_from_graph(g: &CoexpressionGraph, universe: &[String]) -> AdjacencyMatrix {
    let index: HashMap<&str, usize> = universe
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    debug_assert_eq!(index.len(), universe.len(), "duplicate ids in gene universe");
    let mut triplets = Vec::with_capacity(2 * g.n_edges());
    for (a, b) in g.named_edges() {
        if let (Some(&i), Some(&j)) = (index.get(a), index.get(b)) {
            triplets.push((i, j, 1.0));
            triplets.push((j, i, 1.0));
        }
    }
    let matrix = SparseMatrix::from_triplets(universe.len(), triplets)
        .expect("edge endpoints are in range");
    AdjacencyMatrix {
        gene_ids: universe.to_vec(),
        matrix,
    }
}

fn check_factors(m: &SparseMatrix, g: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    ensure!(
        g.nrows() == m.dim() && y.nrows() == m.dim() && g.ncols() == y.ncols(),
        Shape,
        "M is {n}x{n} but G is {:?} and Y is {:?}",
        g.dim(),
        y.dim(),
        n = m.dim()
    );
    Ok(())
}

/// Squared Frobenius reconstruction error `‖M − GYᵀ‖²`.
pub fn frobenius_loss(m: &SparseMatrix, g: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    check_factors(m, g, y)?;
    let cross: f64 = (0..m.dim())
        .into_par_iter()
        .map(|i| {
            let gi = g.row(i);
            m.row(i).map(|(j, v)| v * gi.dot(&y.row(j))).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let gram = g.t().dot(g) * &y.t().dot(y);
    let loss = m.squared_norm() - 2.0 * cross + gram.sum();
    Ok(loss.max(0.0))
}

/// One multiplicative update of `G` followed by one of `Y`.
pub fn update_step(
    m: &SparseMatrix,
    g: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mt = m.transpose();
    update_step_with(m, &mt, g, y)
}

fn update_step_with(
    m: &SparseMatrix,
    mt: &SparseMatrix,
    g: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_factors(m, g, y)?;
    ensure!(
        g.iter().chain(y.iter()).all(|v| *v >= 0.0),
        InvalidArgument,
        "factors must be elementwise nonnegative"
    );
    let g_new = multiplicative(g, &m.mul_dense(y), &g.dot(&y.t().dot(y)));
    let y_new = multiplicative(y, &mt.mul_dense(&g_new), &y.dot(&g_new.t().dot(&g_new)));
    Ok((g_new, y_new))
}

fn multiplicative(base: &Array2<f64>, numer: &Array2<f64>, denom: &Array2<f64>) -> Array2<f64> {
    let mut out = base.clone();
    Zip::from(&mut out)
        .and(numer)
        .and(denom)
        .for_each(|x, &n, &d| *x *= n / (d + UPDATE_EPS));
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfOptions {
    pub max_iter: usize,
    /// Stop once the relative loss improvement of a step drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-5,
            seed: 0,
        }
    }
}

/// Result of [`factorize`]: rows of `g` are the gene embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneEmbeddings {
    pub gene_ids: Vec<String>,
    pub g: Array2<f64>,
    pub y: Array2<f64>,
    pub final_loss: f64,
    pub iterations_run: usize,
    /// Loss at initialization followed by the loss after every step.
    pub loss_trace: Vec<f64>,
}

impl GeneEmbeddings {
    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    /// Wraps externally computed embeddings (no basis, no trace).
    pub fn from_matrix(gene_ids: Vec<String>, g: Array2<f64>) -> Result<Self> {
        ensure!(
            gene_ids.len() == g.nrows(),
            Shape,
            "{} gene ids for {} embedding rows",
            gene_ids.len(),
            g.nrows()
        );
        ensure!(
            g.iter().all(|v| v.is_finite() && *v >= 0.0),
            Validation,
            "gene embeddings must be finite and nonnegative"
        );
        let y = Array2::zeros(g.raw_dim());
        Ok(Self {
            gene_ids,
            g,
            y,
            final_loss: f64::NAN,
            iterations_run: 0,
            loss_trace: Vec::new(),
        })
    }

    pub fn row_is_zero(&self, i: usize) -> bool {
        self.g.row(i).iter().all(|v| *v == 0.0)
    }
}

/// Seeded nonnegative initialization, uniform in (0, 1) scaled by
/// `sqrt(mean(M) / d)`.
pub fn init_factors(m: &SparseMatrix, d: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let n = m.dim();
    let mean = if n == 0 { 0.0 } else { m.sum() / (n as f64 * n as f64) };
    let scale = (mean / d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |_| scale * rng.random_range(f64::MIN_POSITIVE..1.0);
    let g = Array2::from_shape_fn((n, d), &mut draw);
    let y = Array2::from_shape_fn((n, d), &mut draw);
    (g, y)
}

pub fn factorize(adj: &AdjacencyMatrix, d: usize, opts: &NmfOptions) -> Result<GeneEmbeddings> {
    let (g, y, trace) = factorize_matrix(adj.matrix(), d, opts)?;
    let mut g = g;
    for (i, keep) in adj.in_network().into_iter().enumerate() {
        if !keep {
            g.row_mut(i).fill(0.0);
        }
    }
    let final_loss = frobenius_loss(adj.matrix(), &g, &y)?;
    Ok(GeneEmbeddings {
        gene_ids: adj.gene_ids.clone(),
        iterations_run: trace.len() - 1,
        g,
        y,
        final_loss,
        loss_trace: trace,
    })
}

/// Runs the multiplicative updates on a general nonnegative square matrix.
/// Returns `(G, Y, loss_trace)`.
pub fn factorize_matrix(
    m: &SparseMatrix,
    d: usize,
    opts: &NmfOptions,
) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    ensure!(d >= 1, InvalidArgument, "rank must be at least 1");
    ensure!(opts.max_iter >= 1, InvalidArgument, "max_iter must be at least 1");
    if d > m.dim() {
        return Err(Error::InvalidArgument(format!(
            "rank {d} exceeds matrix size {}",
            m.dim()
        )));
    }
    let mt = m.transpose();
    let (mut g, mut y) = init_factors(m, d, opts.seed);
    let mut loss = frobenius_loss(m, &g, &y)?;
    let mut trace = vec![loss];
    for _ in 0..opts.max_iter {
        if loss == 0.0 {
            break;
        }
        let (g2, y2) = update_step_with(m, &mt, &g, &y)?;
        let next = frobenius_loss(m, &g2, &y2)?;
        ensure!(next.is_finite(), Diverged, "NMF loss became {next}");
        g = g2;
        y = y2;
        trace.push(next);
        let improvement = (loss - next) / loss;
        loss = next;
        if improvement < opts.tol {
            break;
        }
    }
    Ok((g, y, trace))
}
