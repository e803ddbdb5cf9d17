//! Per-gene correlation statistics, multiple-testing correction and the
//! significance rule.

use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::coexpr::pearson_corr;
use crate::dataio::write_with;
use crate::error::{ensure, Result};

/// Default false-discovery level.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneCorrelation {
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Two-sided p-value of a Pearson `r` on `n` samples from the t-statistic
/// with `n − 2` degrees of freedom.
///
/// With `t² = r²(n−2)/(1−r²)` the tail probability reduces to
/// `I_{1−r²}((n−2)/2, 1/2)`, which stays accurate near `|r| = 1`.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let x = (1.0 - r * r).clamp(0.0, 1.0);
    if x == 0.0 {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Column-wise Pearson correlation between predictions and truth. A constant
/// column on either side gives `r = 0`, `p = 1` and a degenerate flag.
pub fn per_gene_pearson(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<GeneCorrelation> {
    ensure!(
        pred.dim() == truth.dim(),
        Shape,
        "predictions are {:?}, truth is {:?}",
        pred.dim(),
        truth.dim()
    );
    let n = pred.nrows();
    ensure!(n >= 3, InvalidArgument, "need at least 3 samples, got {n}");
    let mut out = GeneCorrelation {
        r: Vec::with_capacity(pred.ncols()),
        p: Vec::with_capacity(pred.ncols()),
        degenerate: Vec::with_capacity(pred.ncols()),
    };
    for (pc, tc) in pred.columns().into_iter().zip(truth.columns()) {
        let x: Vec<f64> = pc.to_vec();
        let y: Vec<f64> = tc.to_vec();
        let c = pearson_corr(&x, &y)?;
        out.r.push(c.r);
        out.p.push(if c.degenerate { 1.0 } else { pearson_p_value(c.r, n) });
        out.degenerate.push(c.degenerate);
    }
    Ok(out)
}

/// Benjamini–Hochberg step-up adjustment. Ties in `p` keep input order.
pub fn bh_adjust(p: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        p.iter().all(|v| (0.0..=1.0).contains(v)),
        InvalidArgument,
        "p-values must lie in [0, 1]"
    );
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = f64::INFINITY;
    for (pos, &i) in order.iter().enumerate().rev() {
        let rank = (pos + 1) as f64;
        running = running.min(m as f64 * p[i] / rank);
        // rounding can put m·p/m one ulp under p
        q[i] = running.max(p[i]).min(1.0);
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gene_ids: Vec<String>,
    pub per_gene_r: Vec<f64>,
    pub per_gene_p: Vec<f64>,
    pub per_gene_q: Vec<f64>,
    pub baseline_r: Vec<f64>,
    pub significant: Vec<bool>,
    pub degenerate_flags: Vec<bool>,
    pub n_significant: usize,
    pub lambda_used: f64,
    pub alpha: f64,
}

impl EvalReport {
    /// Mean `r` over non-degenerate genes, 0 when there are none.
    pub fn mean_r(&self) -> f64 {
        let vals: Vec<f64> = self
            .per_gene_r
            .iter()
            .zip(&self.degenerate_flags)
            .filter(|(_, d)| !**d)
            .map(|(r, _)| *r)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// A gene is significant iff `q < alpha`, `r > 0` and `r` beats the
/// random-weight baseline for that gene.
pub fn significant_genes(
    gene_ids: &[String],
    corr: &GeneCorrelation,
    baseline_r: &[f64],
    alpha: f64,
    lambda_used: f64,
) -> Result<EvalReport> {
    let m = corr.r.len();
    ensure!(
        gene_ids.len() == m && baseline_r.len() == m && corr.p.len() == m && corr.degenerate.len() == m,
        Shape,
        "{} genes, {} correlations, {} baseline values",
        gene_ids.len(),
        m,
        baseline_r.len()
    );
    ensure!(alpha > 0.0 && alpha <= 1.0, InvalidArgument, "alpha must lie in (0, 1]");
    let q = bh_adjust(&corr.p)?;
    let significant: Vec<bool> = (0..m)
        .map(|i| q[i] < alpha && corr.r[i] > 0.0 && corr.r[i] > baseline_r[i])
        .collect();
    Ok(EvalReport {
        gene_ids: gene_ids.to_vec(),
        per_gene_r: corr.r.clone(),
        per_gene_p: corr.p.clone(),
        per_gene_q: q,
        baseline_r: baseline_r.to_vec(),
        n_significant: significant.iter().filter(|s| **s).count(),
        significant,
        degenerate_flags: corr.degenerate.clone(),
        lambda_used,
        alpha,
    })
}

/// Correlates predictions and baseline predictions against the truth and
/// applies [`significant_genes`].
pub fn evaluate_predictions(
    gene_ids: &[String],
    pred: ArrayView2<'_, f64>,
    baseline_pred: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, f64>,
    alpha: f64,
    lambda_used: f64,
) -> Result<EvalReport> {
    let corr = per_gene_pearson(pred, truth)?;
    let base = per_gene_pearson(baseline_pred, truth)?;
    significant_genes(gene_ids, &corr, &base.r, alpha, lambda_used)
}

/// Writes `gene_id r p q significant baseline_r degenerate` rows followed by
/// a `# summary` line.
pub fn save_eval_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    write_with(path.as_ref(), |w| {
        writeln!(w, "gene_id\tr\tp\tq\tsignificant\tbaseline_r\tdegenerate")?;
        for i in 0..report.gene_ids.len() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                report.gene_ids[i],
                report.per_gene_r[i],
                report.per_gene_p[i],
                report.per_gene_q[i],
                u8::from(report.significant[i]),
                report.baseline_r[i],
                u8::from(report.degenerate_flags[i]),
            )?;
        }
        writeln!(
            w,
            "# summary\tn_significant={}\tn_genes={}\tlambda={}\talpha={}",
            report.n_significant,
            report.gene_ids.len(),
            report.lambda_used,
            report.alpha
        )
    })
}
