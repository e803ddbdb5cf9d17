//! Cross-validated experiment runner.
//!
//! For every fold and PK source the runner builds or ingests a graph, embeds
//! it with NMF, sweeps λ for every configured model and evaluates test
//! predictions. Test predictions of all folds are stacked (each patient is
//! in exactly one test split) and evaluated once per model, source and λ;
//! per-fold counts are reported alongside.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.toml            resolved configuration
//! manifest.toml          content hashes of inputs and config
//! folds.toml             patient-level fold assignment
//! fold<f>/internal_graph.tsv
//! fold<f>/<source>/gene_embeddings.pkmx
//! fold<f>/<model>_<source>_lambda<λ>.history.tsv
//! reports/<model>_<source>_lambda<λ>.tsv
//! summary.tsv            one row per model, three columns per source
//! summary_long.tsv       one row per model, source and λ
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coexpr::{build_graph, union_graphs, CoexpressionGraph, GraphOptions};
use crate::dataio::{
    align_gene_universe, load_embedding_table, load_expression_matrix, load_graph_edgelist, load_patch_sets,
    make_folds, save_fold_spec, save_graph_edgelist, save_labeled_matrix, write_with, ExpressionMatrix, FoldSpec,
    Split, SplitRatios,
};
use crate::error::{ensure, Error, Result};
use crate::nmf::{adjacency_from_graph, factorize, NmfOptions};
use crate::train_eval::{
    evaluate_predictions, lambda_sweep, save_eval_report, save_history, select_lambda, EvalReport, FoldData,
    SampleInputs, SelectOn, SplitData, SweepConfig, SweepResult, TrainConfig, DEFAULT_ALPHA,
};

/// Where the prior-knowledge graph of a fold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PkSource {
    /// Thresholded co-expression of the fold's train and validation rows.
    Internal,
    /// A graph file, restricted to the expression genes.
    External,
    /// Union of both.
    Combined,
}

impl PkSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Internal => "internal",
            Self::External => "external",
            Self::Combined => "combined",
        }
    }

    fn needs_internal(self) -> bool {
        matches!(self, Self::Internal | Self::Combined)
    }

    fn needs_external(self) -> bool {
        matches!(self, Self::External | Self::Combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// PK head on precomputed sample embeddings.
    Linear,
    /// Mean-pool MLP encoder on patch sets followed by the PK head.
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub expression: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub external_graph: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfSettings {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for NmfSettings {
    fn default() -> Self {
        let d = NmfOptions::default();
        Self {
            max_iter: d.max_iter,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSettings {
    pub n_folds: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for FoldSettings {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            n_folds: 5,
            train: r.train,
            val: r.val,
            test: r.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub clamp_output: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            clamp_output: true,
        }
    }
}

/// Experiment configuration, read from TOML. All stage seeds derive from
/// `seed`; a `seed` key under `[train]` is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub tau: f64,
    pub lambda_grid: Vec<f64>,
    pub sources: Vec<PkSource>,
    pub models: Vec<ModelKind>,
    pub alpha: f64,
    pub select_on: SelectOn,
    pub data: DataPaths,
    pub nmf: NmfSettings,
    pub folds: FoldSettings,
    pub train: TrainConfig,
    pub model: ModelSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("experiment"),
            seed: 0,
            tau: 0.85,
            lambda_grid: vec![0.1, 0.2, 0.5, 0.8, 0.9],
            sources: vec![PkSource::Internal],
            models: vec![ModelKind::Linear],
            alpha: DEFAULT_ALPHA,
            select_on: SelectOn::Test,
            data: DataPaths::default(),
            nmf: NmfSettings::default(),
            folds: FoldSettings::default(),
            train: TrainConfig::default(),
            model: ModelSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML. Relative data paths and `output_dir` are resolved
    /// against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| Error::Validation(format!("experiment config: {}", e.message())))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        fix(&mut cfg.data.expression);
        for p in [&mut cfg.data.embeddings, &mut cfg.data.patches, &mut cfg.data.external_graph]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Checks the configuration and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0 && self.tau < 1.0, InvalidArgument, "tau must lie in (0, 1)");
        ensure!(!self.lambda_grid.is_empty(), InvalidArgument, "lambda_grid is empty");
        ensure!(
            self.lambda_grid.iter().all(|l| (0.0..=1.0).contains(l)),
            InvalidArgument,
            "lambda values must lie in [0, 1]"
        );
        ensure!(!self.sources.is_empty(), InvalidArgument, "no PK sources configured");
        ensure!(!self.models.is_empty(), InvalidArgument, "no models configured");
        ensure!(self.alpha > 0.0 && self.alpha <= 1.0, InvalidArgument, "alpha must lie in (0, 1]");
        ensure!(self.model.hidden_dim >= 1, InvalidArgument, "hidden_dim must be positive");
        ensure!(self.nmf.max_iter >= 1, InvalidArgument, "nmf.max_iter must be positive");
        self.train.validate()?;
        self.ratios().validate(self.folds.n_folds)?;
        let must_exist = |p: &Path, what: &str| -> Result<()> {
            ensure!(p.is_file(), Validation, "{what} file {} does not exist", p.display());
            Ok(())
        };
        must_exist(&self.data.expression, "expression")?;
        if self.models.contains(&ModelKind::Linear) {
            let p = self.data.embeddings.as_deref().ok_or_else(|| {
                Error::Validation("model `linear` needs data.embeddings".into())
            })?;
            must_exist(p, "embeddings")?;
        }
        if self.models.contains(&ModelKind::Mlp) {
            let p = self
                .data
                .patches
                .as_deref()
                .ok_or_else(|| Error::Validation("model `mlp` needs data.patches".into()))?;
            must_exist(p, "patches")?;
        }
        if self.sources.iter().any(|s| s.needs_external()) {
            let p = self.data.external_graph.as_deref().ok_or_else(|| {
                Error::Validation("external and combined sources need data.external_graph".into())
            })?;
            must_exist(p, "external graph")?;
        }
        Ok(())
    }

    fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.folds.train,
            val: self.folds.val,
            test: self.folds.test,
        }
    }

    fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let d = &self.data;
        let mut out = vec![("expression", d.expression.as_path())];
        let optional = [
            ("embeddings", &d.embeddings),
            ("patches", &d.patches),
            ("external_graph", &d.external_graph),
        ];
        out.extend(optional.into_iter().filter_map(|(k, p)| p.as_deref().map(|p| (k, p))));
        out
    }
}

/// Aggregated result for one model, source and λ.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSummary {
    pub lambda: f64,
    /// Count on the stacked test predictions of all folds.
    pub n_significant: usize,
    pub per_fold: Vec<usize>,
    pub val_per_fold: Vec<usize>,
    pub mean_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub source: PkSource,
    /// The λ = 0 reference.
    pub no_pk: LambdaSummary,
    /// Grid values in grid order.
    pub grid: Vec<LambdaSummary>,
    pub selected_lambda: f64,
}

impl SummaryRow {
    pub fn best(&self) -> &LambdaSummary {
        self.grid
            .iter()
            .find(|s| s.lambda == self.selected_lambda)
            .expect("selected lambda is in the grid")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<SummaryRow>,
    pub folds: FoldSpec,
    /// Internal graph of every fold, when an internal or combined source ran.
    pub internal_graphs: Vec<Option<CoexpressionGraph>>,
    pub output_dir: PathBuf,
}

struct Inputs {
    expr: ExpressionMatrix,
    linear: Option<SplitData>,
    mlp: Option<SplitData>,
    external: Option<CoexpressionGraph>,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let expr = load_expression_matrix(&cfg.data.expression)?;
    let targets = expr.values().clone();
    let linear = match (&cfg.data.embeddings, cfg.models.contains(&ModelKind::Linear)) {
        (Some(p), true) => {
            let w = load_embedding_table(p)?.aligned_to(expr.sample_ids())?;
            Some(SplitData::new(SampleInputs::Embeddings(w), targets.clone())?)
        }
        _ => None,
    };
    let mlp = match (&cfg.data.patches, cfg.models.contains(&ModelKind::Mlp)) {
        (Some(p), true) => {
            let mut sets = load_patch_sets(p)?;
            sets.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            let patches = expr
                .sample_ids()
                .iter()
                .map(|s| {
                    sets.binary_search_by(|x| x.sample_id.as_str().cmp(s))
                        .map(|i| sets[i].patches.clone())
                        .map_err(|_| Error::Validation(format!("no patch set for sample {s}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(SplitData::new(SampleInputs::Patches(patches), targets)?)
        }
        _ => None,
    };
    let external = match &cfg.data.external_graph {
        Some(p) if cfg.sources.iter().any(|s| s.needs_external()) => {
            Some(align_gene_universe(&load_graph_edgelist(p)?, expr.gene_ids()))
        }
        _ => None,
    };
    Ok(Inputs {
        expr,
        linear,
        mlp,
        external,
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Manifest {
    config_sha256: String,
    inputs: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    role: String,
    path: String,
    sha256: String,
}

/// Builds the internal co-expression graph of a fold from its train and
/// validation rows only.
pub fn fold_internal_graph(expr: &ExpressionMatrix, folds: &FoldSpec, fold: usize, tau: f64) -> Result<CoexpressionGraph> {
    let rows = folds.fold(fold).sample_rows(expr.patient_ids(), &[Split::Train, Split::Val]);
    build_graph(&expr.select_samples(&rows)?, &GraphOptions::with_tau(tau))
}

fn lambda_tag(l: f64) -> String {
    format!("lambda{l}")
}

struct FoldRun {
    internal: Option<CoexpressionGraph>,
    test_rows: Vec<usize>,
    /// Indexed as `[source][model]`.
    sweeps: Vec<Vec<SweepResult>>,
}

/// Runs the whole protocol. Inputs are validated and loaded before anything
/// is written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let inputs = load_inputs(cfg).map_err(|e| e.in_stage("load"))?;
    let out = &cfg.output_dir;

    let config_text = cfg.to_toml().map_err(|e| e.in_stage("config"))?;
    let manifest = Manifest {
        config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
        inputs: cfg
            .input_files()
            .into_iter()
            .map(|(role, p)| {
                Ok(ManifestEntry {
                    role: role.into(),
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("load"))?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("output"))?;
    let write_text = |name: &str, text: &str| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e).in_stage("output"))
    };
    write_text("config.toml", &config_text)?;
    write_text(
        "manifest.toml",
        &toml::to_string(&manifest).map_err(|e| Error::Validation(e.to_string()).in_stage("output"))?,
    )?;

    let expr = &inputs.expr;
    let folds = make_folds(expr.patient_ids(), cfg.folds.n_folds, cfg.ratios(), cfg.seed)
        .map_err(|e| e.in_stage("folds"))?;
    save_fold_spec(&folds, out.join("folds.toml")).map_err(|e| e.in_stage("folds"))?;

    let fold_runs: Vec<FoldRun> = (0..folds.n_folds)
        .into_par_iter()
        .map(|f| run_fold(cfg, &inputs, &folds, f))
        .collect::<Result<_>>()?;

    let rows = summarize(cfg, &inputs, &fold_runs).map_err(|e| e.in_stage("report"))?;
    write_summaries(cfg, &rows).map_err(|e| e.in_stage("report"))?;
    Ok(ExperimentResult {
        rows,
        folds,
        internal_graphs: fold_runs.into_iter().map(|r| r.internal).collect(),
        output_dir: out.clone(),
    })
}

fn run_fold(cfg: &ExperimentConfig, inputs: &Inputs, folds: &FoldSpec, f: usize) -> Result<FoldRun> {
    let expr = &inputs.expr;
    let dir = cfg.output_dir.join(format!("fold{f}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e).in_stage("output"))?;
    let internal = if cfg.sources.iter().any(|s| s.needs_internal()) {
        let g = fold_internal_graph(expr, folds, f, cfg.tau).map_err(|e| e.in_stage("graph"))?;
        save_graph_edgelist(&g, dir.join("internal_graph.tsv")).map_err(|e| e.in_stage("graph"))?;
        Some(g)
    } else {
        None
    };
    let assignment = folds.fold(f);
    let test_rows = assignment.sample_rows(expr.patient_ids(), &[Split::Test]);
    let mut sweeps = Vec::with_capacity(cfg.sources.len());
    for &source in &cfg.sources {
        let graph = match source {
            PkSource::Internal => internal.clone().expect("built above"),
            PkSource::External => inputs.external.clone().expect("loaded"),
            PkSource::Combined => union_graphs(
                internal.as_ref().expect("built above"),
                inputs.external.as_ref().expect("loaded"),
            ),
        };
        let adj = adjacency_from_graph(&graph, expr.gene_ids());
        let mut per_model = Vec::with_capacity(cfg.models.len());
        for &model in &cfg.models {
            let (data, d) = match model {
                ModelKind::Linear => {
                    let data = inputs.linear.as_ref().expect("loaded");
                    (data, data.inputs.input_dim())
                }
                ModelKind::Mlp => {
                    let data = inputs.mlp.as_ref().expect("loaded");
                    (data, data.inputs.input_dim())
                }
            };
            let opts = NmfOptions {
                max_iter: cfg.nmf.max_iter,
                tol: cfg.nmf.tol,
                seed: cfg.seed.wrapping_add(f as u64),
            };
            let emb = factorize(&adj, d, &opts).map_err(|e| e.in_stage("nmf"))?;
            let sub = dir.join(source.name());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e).in_stage("output"))?;
            save_labeled_matrix(&emb.gene_ids, &emb.g, sub.join(format!("gene_embeddings_d{d}.pkmx")))
                .map_err(|e| e.in_stage("nmf"))?;

            let fold_data =
                FoldData::from_assignment(data, expr.patient_ids(), assignment).map_err(|e| e.in_stage("train"))?;
            let sweep_cfg = SweepConfig {
                train: TrainConfig {
                    seed: cfg.seed.wrapping_add(1000 + f as u64),
                    ..cfg.train.clone()
                },
                alpha: cfg.alpha,
                select_on: cfg.select_on,
                encoder_hidden: (model == ModelKind::Mlp).then_some(cfg.model.hidden_dim),
                clamp_output: cfg.model.clamp_output,
                baseline_seed: cfg.seed.wrapping_add(1_000_003),
            };
            let res = lambda_sweep(expr.gene_ids(), &emb.g, &fold_data, &cfg.lambda_grid, &sweep_cfg)
                .map_err(|e| e.in_stage("train"))?;
            for e in std::iter::once(&res.no_pk).chain(&res.entries) {
                let name = format!("{}_{}_{}.history.tsv", model.name(), source.name(), lambda_tag(e.lambda));
                save_history(&e.outcome.history, dir.join(name)).map_err(|e| e.in_stage("train"))?;
            }
            per_model.push(res);
        }
        sweeps.push(per_model);
    }
    Ok(FoldRun {
        internal,
        test_rows,
        sweeps,
    })
}

fn summarize(cfg: &ExperimentConfig, inputs: &Inputs, runs: &[FoldRun]) -> Result<Vec<SummaryRow>> {
    let expr = &inputs.expr;
    let genes = expr.gene_ids();
    let (n, m) = expr.values().dim();
    let reports_dir = cfg.output_dir.join("reports");
    std::fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let mut rows = Vec::new();
    for (si, &source) in cfg.sources.iter().enumerate() {
        for (mi, &model) in cfg.models.iter().enumerate() {
            let stacked = |pick: &dyn Fn(&SweepResult) -> usize| -> Result<LambdaSummary> {
                let mut pred = Array2::zeros((n, m));
                let mut base = Array2::zeros((n, m));
                let mut per_fold = Vec::new();
                let mut val_per_fold = Vec::new();
                let mut lambda = 0.0;
                for run in runs {
                    let sweep = &run.sweeps[si][mi];
                    let idx = pick(sweep);
                    let e = if idx == 0 { &sweep.no_pk } else { &sweep.entries[idx - 1] };
                    lambda = e.lambda;
                    for (i, &r) in run.test_rows.iter().enumerate() {
                        pred.row_mut(r).assign(&e.test_pred.row(i));
                        base.row_mut(r).assign(&e.baseline_pred.row(i));
                    }
                    per_fold.push(e.test_report.n_significant);
                    val_per_fold.push(e.val_report.n_significant);
                }
                let report: EvalReport =
                    evaluate_predictions(genes, pred.view(), base.view(), expr.values().view(), cfg.alpha, lambda)?;
                let name = format!("{}_{}_{}.tsv", model.name(), source.name(), lambda_tag(lambda));
                save_eval_report(&report, reports_dir.join(name))?;
                Ok(LambdaSummary {
                    lambda,
                    n_significant: report.n_significant,
                    per_fold,
                    val_per_fold,
                    mean_r: report.mean_r(),
                })
            };
            let no_pk = stacked(&|_| 0)?;
            let grid = (0..cfg.lambda_grid.len())
                .map(|k| stacked(&|_| k + 1))
                .collect::<Result<Vec<_>>>()?;
            let counts: Vec<(f64, usize)> = grid
                .iter()
                .map(|s| {
                    let c = match cfg.select_on {
                        SelectOn::Test => s.n_significant,
                        SelectOn::Validation => s.val_per_fold.iter().sum(),
                    };
                    (s.lambda, c)
                })
                .collect();
            rows.push(SummaryRow {
                model,
                source,
                no_pk,
                selected_lambda: select_lambda(&counts).expect("nonempty grid"),
                grid,
            });
        }
    }
    Ok(rows)
}

fn write_summaries(cfg: &ExperimentConfig, rows: &[SummaryRow]) -> Result<()> {
    write_with(&cfg.output_dir.join("summary.tsv"), |w| {
        write!(w, "model")?;
        for s in &cfg.sources {
            write!(w, "\t{0}_no_pk\t{0}_best\t{0}_lambda", s.name())?;
        }
        writeln!(w)?;
        for &model in &cfg.models {
            write!(w, "{}", model.name())?;
            for &source in &cfg.sources {
                let row = rows
                    .iter()
                    .find(|r| r.model == model && r.source == source)
                    .expect("every combination ran");
                write!(
                    w,
                    "\t{}\t{}\t{}",
                    row.no_pk.n_significant,
                    row.best().n_significant,
                    row.selected_lambda
                )?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    write_with(&cfg.output_dir.join("summary_long.tsv"), |w| {
        writeln!(w, "model\tsource\trole\tlambda\tn_significant\tper_fold\tval_per_fold\tmean_r\tselected")?;
        for row in rows {
            let entries = std::iter::once(("no_pk", &row.no_pk)).chain(row.grid.iter().map(|g| ("grid", g)));
            for (role, s) in entries {
                let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                let selected = role == "grid" && s.lambda == row.selected_lambda;
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    row.model.name(),
                    row.source.name(),
                    role,
                    s.lambda,
                    s.n_significant,
                    join(&s.per_fold),
                    join(&s.val_per_fold),
                    s.mean_r,
                    u8::from(selected)
                )?;
            }
        }
        Ok(())
    })
}
