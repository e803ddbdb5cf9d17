use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use pkexpr::coexpr::{build_graph, union_graphs, GraphOptions, ThresholdMode};
use pkexpr::dataio::{
    align_gene_universe, load_embedding_table, load_expression_matrix, load_fold_spec, load_graph_edgelist,
    load_labeled_matrix, load_patch_sets, make_folds, save_fold_spec, save_graph_edgelist, save_labeled_matrix,
    ExpressionMatrix, Split, SplitRatios,
};
use pkexpr::embedqc::{np_score_with, Metric, NpOptions};
use pkexpr::experiment::{run_experiment, ExperimentConfig};
use pkexpr::nmf::{adjacency_from_graph, factorize, GeneEmbeddings, NmfOptions};
use pkexpr::predictor::{load_model, save_model};
use pkexpr::synth::{generate_dataset, save_dataset, SynthConfig};
use pkexpr::train_eval::{
    evaluate_predictions, init_model, lambda_sweep, random_baseline, save_eval_report, save_history, train_model,
    EncoderSpec, FoldData, Model, Optimizer, SampleInputs, SelectOn, SplitData, SweepConfig, TrainConfig,
    DEFAULT_ALPHA,
};

#[derive(Parser)]
#[command(name = "pkexpr", version, about = "Co-expression prior knowledge for gene expression prediction")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known module structure.
    Synth(SynthArgs),
    /// Build a thresholded co-expression graph from an expression matrix.
    BuildGraph(BuildGraphArgs),
    /// Print genes-in-network and edge counts of a graph.
    GraphStats(GraphStatsArgs),
    /// Union of two graphs.
    Union(UnionArgs),
    /// Factorize a graph into nonnegative gene embeddings.
    Embed(EmbedArgs),
    /// Neighborhood preservation of gene embeddings.
    NpEval(NpEvalArgs),
    /// Assign patients to cross-validation folds.
    Folds(FoldsArgs),
    /// Train one model on one fold.
    Train(TrainArgs),
    /// Train over a λ grid on one fold and report significant genes.
    Sweep(SweepArgs),
    /// Evaluate a saved model on the test split of a fold.
    Evaluate(EvaluateArgs),
    /// Run a full experiment from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    samples_per_patient: Option<usize>,
    #[arg(long)]
    n_genes: Option<usize>,
    #[arg(long)]
    n_modules: Option<usize>,
    #[arg(long)]
    genes_per_module: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    expression_noise: Option<f64>,
    #[arg(long)]
    embedding_noise: Option<f64>,
    #[arg(long)]
    patches_per_sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.85)]
    tau: f64,
    /// Genes per column panel of the pair scan.
    #[arg(long, default_value_t = 256)]
    block: usize,
    /// Threshold |r| instead of r.
    #[arg(long)]
    absolute: bool,
    /// Omit the correlation column.
    #[arg(long)]
    no_weights: bool,
    /// Restrict to the train and validation samples of `--fold`.
    #[arg(long, requires = "fold")]
    folds: Option<PathBuf>,
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
}

#[derive(Args)]
struct GraphStatsArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Expression matrix whose genes restrict the graph first.
    #[arg(long)]
    universe: Option<PathBuf>,
}

#[derive(Args)]
struct UnionArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Expression matrix that fixes the gene order.
    #[arg(long)]
    universe: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Args)]
struct NpEvalArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Gene embeddings written by `embed`.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    hd_metric: MetricArg,
    #[arg(long, value_enum, default_value = "euclidean")]
    ld_metric: MetricArg,
    /// Write per-gene overlaps to this TSV.
    #[arg(long)]
    per_gene: Option<PathBuf>,
}

#[derive(Args)]
struct FoldsArgs {
    #[arg(long)]
    expression: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_folds: usize,
    #[arg(long, default_value_t = 0.08)]
    val: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    expression: PathBuf,
    /// Sample embeddings (PKMX with sidecar ids).
    #[arg(long, conflicts_with = "patches", required_unless_present = "patches")]
    embeddings: Option<PathBuf>,
    /// Patch sets; trains a mean-pool MLP encoder.
    #[arg(long)]
    patches: Option<PathBuf>,
    #[arg(long)]
    folds: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of the patch encoder.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Keep negative predictions.
    #[arg(long)]
    no_clamp: bool,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::Adam,
                OptimizerArg::Sgd => Optimizer::Sgd,
            },
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Gene embeddings from `embed`; omit for a plain linear head.
    #[arg(long)]
    gene_embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[command(flatten)]
    train: TrainOpts,
    /// Model directory.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    gene_embeddings: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.5,0.8,0.9")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Pick λ on the validation split instead of the test split.
    #[arg(long)]
    select_on_validation: bool,
    #[command(flatten)]
    train: TrainOpts,
    /// Output directory for per-λ reports.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 1_000_003)]
    baseline_seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a).context("synth"),
        Command::BuildGraph(a) => build(a).context("build-graph"),
        Command::GraphStats(a) => graph_stats(a).context("graph-stats"),
        Command::Union(a) => union(a).context("union"),
        Command::Embed(a) => embed(a).context("embed"),
        Command::NpEval(a) => np_eval(a).context("np-eval"),
        Command::Folds(a) => folds(a).context("folds"),
        Command::Train(a) => train(a).context("train"),
        Command::Sweep(a) => sweep(a).context("sweep"),
        Command::Evaluate(a) => evaluate(a).context("evaluate"),
        Command::Run(a) => run(a).context("run"),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    set!(
        n_patients,
        samples_per_patient,
        n_genes,
        n_modules,
        genes_per_module,
        latent_dim,
        embed_dim,
        expression_noise,
        embedding_noise,
        patches_per_sample,
        seed
    );
    let ds = generate_dataset(&cfg)?;
    let paths = save_dataset(&ds, &cfg, &a.output)?;
    println!(
        "wrote {} samples x {} genes to {}",
        ds.expression.n_samples(),
        ds.expression.n_genes(),
        paths.expression.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

fn build(a: BuildGraphArgs) -> Result<()> {
    let mut expr = load_expression_matrix(&a.input)?;
    if let (Some(path), Some(f)) = (&a.folds, a.fold) {
        let spec = load_fold_spec(path)?;
        if f >= spec.n_folds {
            bail!("fold {f} out of range for {} folds", spec.n_folds);
        }
        let rows = spec.fold(f).sample_rows(expr.patient_ids(), &[Split::Train, Split::Val]);
        expr = expr.select_samples(&rows)?;
    }
    let opts = GraphOptions {
        tau: a.tau,
        block: a.block,
        mode: if a.absolute { ThresholdMode::Absolute } else { ThresholdMode::Signed },
        keep_weights: !a.no_weights,
    };
    let g = build_graph(&expr, &opts)?;
    save_graph_edgelist(&g, &a.output)?;
    let s = g.stats();
    println!("genes_in_network\t{}\npairs\t{}", s.genes_in_network, s.pairs);
    Ok(())
}

fn graph_stats(a: GraphStatsArgs) -> Result<()> {
    let mut g = load_graph_edgelist(&a.graph)?;
    if let Some(u) = &a.universe {
        g = align_gene_universe(&g, load_expression_matrix(u)?.gene_ids());
    }
    let s = g.stats();
    println!("genes_in_network\t{}\npairs\t{}", s.genes_in_network, s.pairs);
    Ok(())
}

fn union(a: UnionArgs) -> Result<()> {
    let g = union_graphs(&load_graph_edgelist(&a.a)?, &load_graph_edgelist(&a.b)?);
    save_graph_edgelist(&g, &a.output)?;
    let s = g.stats();
    println!("genes_in_network\t{}\npairs\t{}", s.genes_in_network, s.pairs);
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let expr = load_expression_matrix(&a.universe)?;
    let adj = adjacency_from_graph(&load_graph_edgelist(&a.graph)?, expr.gene_ids());
    let opts = NmfOptions {
        max_iter: a.max_iter,
        tol: a.tol,
        seed: a.seed,
    };
    let emb = factorize(&adj, a.dim, &opts)?;
    save_labeled_matrix(&emb.gene_ids, &emb.g, &a.output)?;
    println!(
        "final_loss\t{}\niterations\t{}",
        emb.final_loss, emb.iterations_run
    );
    Ok(())
}

fn np_eval(a: NpEvalArgs) -> Result<()> {
    let (ids, g) = load_labeled_matrix(&a.embeddings)?;
    let adj = adjacency_from_graph(&load_graph_edgelist(&a.graph)?, &ids);
    let emb = GeneEmbeddings::from_matrix(ids, g)?;
    let opts = NpOptions {
        high_dim: a.hd_metric.into(),
        low_dim: a.ld_metric.into(),
    };
    let rep = np_score_with(&adj, &emb, a.k, &opts)?;
    if let Some(p) = &a.per_gene {
        let mut text = String::from("gene_id\toverlap\n");
        for (g, v) in &rep.per_gene_overlap {
            text.push_str(&format!("{g}\t{v}\n"));
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("k\t{}\ngenes_evaluated\t{}\nnp\t{}", rep.k, rep.genes_evaluated, rep.np_score);
    Ok(())
}

fn folds(a: FoldsArgs) -> Result<()> {
    let expr = load_expression_matrix(&a.expression)?;
    let test = 1.0 / a.n_folds as f64;
    let ratios = SplitRatios {
        train: 1.0 - test - a.val,
        val: a.val,
        test,
    };
    let spec = make_folds(expr.patient_ids(), a.n_folds, ratios, a.seed)?;
    save_fold_spec(&spec, &a.output)?;
    Ok(())
}

/// Expression targets and model inputs, aligned by sample id.
fn load_data(d: &DataArgs) -> Result<(ExpressionMatrix, FoldData)> {
    let expr = load_expression_matrix(&d.expression)?;
    let inputs = if let Some(p) = &d.embeddings {
        SampleInputs::Embeddings(load_embedding_table(p)?.aligned_to(expr.sample_ids())?)
    } else {
        let p = d.patches.as_ref().expect("clap requires one input");
        let sets = load_patch_sets(p)?;
        let by_id: std::collections::HashMap<&str, &Array2<f64>> =
            sets.iter().map(|s| (s.sample_id.as_str(), &s.patches)).collect();
        let aligned = expr
            .sample_ids()
            .iter()
            .map(|s| by_id.get(s.as_str()).map(|m| (*m).clone()).with_context(|| format!("no patches for {s}")))
            .collect::<Result<Vec<_>>>()?;
        SampleInputs::Patches(aligned)
    };
    let all = SplitData::new(inputs, expr.values().clone())?;
    let spec = load_fold_spec(&d.folds)?;
    if d.fold >= spec.n_folds {
        bail!("fold {} out of range for {} folds", d.fold, spec.n_folds);
    }
    let fold = FoldData::from_assignment(&all, expr.patient_ids(), spec.fold(d.fold))?;
    Ok((expr, fold))
}

/// Gene embeddings reordered to the expression genes; missing genes get
/// zero rows.
fn aligned_gene_embeddings(path: Option<&Path>, genes: &[String], d: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((genes.len(), d));
    let Some(path) = path else { return Ok(out) };
    let (ids, g) = load_labeled_matrix(path)?;
    if g.ncols() != d {
        bail!("gene embeddings have dimension {}, model needs {d}", g.ncols());
    }
    let index: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    for (r, gene) in genes.iter().enumerate() {
        if let Some(&i) = index.get(gene.as_str()) {
            out.row_mut(r).assign(&g.row(i));
        }
    }
    Ok(out)
}

fn head_dim(fold: &FoldData, path: Option<&Path>) -> Result<usize> {
    Ok(match (&fold.train.inputs, path) {
        (SampleInputs::Embeddings(w), _) => w.ncols(),
        (SampleInputs::Patches(_), Some(p)) => load_labeled_matrix(p)?.1.ncols(),
        (SampleInputs::Patches(_), None) => fold.train.inputs.input_dim(),
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let (expr, fold) = load_data(&a.data)?;
    let gpath = a.gene_embeddings.as_deref();
    let d = head_dim(&fold, gpath)?;
    let g = aligned_gene_embeddings(gpath, expr.gene_ids(), d)?;
    let encoder = matches!(fold.train.inputs, SampleInputs::Patches(_)).then(|| EncoderSpec {
        input_dim: fold.train.inputs.input_dim(),
        hidden_dim: a.train.hidden,
    });
    let cfg = a.train.config();
    let mut model = init_model(expr.gene_ids(), &g, a.lambda, encoder, fold.train.targets.view(), cfg.seed)?;
    model.head.clamp_output = !a.train.no_clamp;
    let out = train_model(model, &fold.train, &fold.val, &cfg)?;
    save_model(&out.model.head, out.model.encoder.as_ref(), &a.output)?;
    save_history(&out.history, a.output.join("history.tsv"))?;
    let best = &out.history[out.best_epoch];
    println!(
        "best_epoch\t{}\nval_pearson\t{}\ntrain_mse\t{}",
        out.best_epoch, best.val_pearson, best.train_mse
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (expr, fold) = load_data(&a.data)?;
    let d = head_dim(&fold, Some(&a.gene_embeddings))?;
    let g = aligned_gene_embeddings(Some(&a.gene_embeddings), expr.gene_ids(), d)?;
    let cfg = SweepConfig {
        train: a.train.config(),
        alpha: a.alpha,
        select_on: if a.select_on_validation { SelectOn::Validation } else { SelectOn::Test },
        encoder_hidden: matches!(fold.train.inputs, SampleInputs::Patches(_)).then_some(a.train.hidden),
        clamp_output: !a.train.no_clamp,
        ..SweepConfig::default()
    };
    let res = lambda_sweep(expr.gene_ids(), &g, &fold, &a.grid, &cfg)?;
    std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut summary = String::from("lambda\tn_significant\tval_n_significant\tselected\n");
    for (role, e) in std::iter::once(("no_pk", &res.no_pk)).chain(res.entries.iter().map(|e| ("grid", e))) {
        let tag = if role == "no_pk" { "no_pk".to_string() } else { format!("lambda{}", e.lambda) };
        save_eval_report(&e.test_report, a.output.join(format!("report_{tag}.tsv")))?;
        save_history(&e.outcome.history, a.output.join(format!("history_{tag}.tsv")))?;
        if role == "grid" {
            summary.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.lambda,
                e.test_report.n_significant,
                e.val_report.n_significant,
                u8::from(e.lambda == res.selected_lambda)
            ));
        }
    }
    let no_pk = format!(
        "# no_pk\t{}\t{}\n",
        res.no_pk.test_report.n_significant, res.no_pk.val_report.n_significant
    );
    summary.push_str(&no_pk);
    std::fs::write(a.output.join("sweep.tsv"), &summary).context("writing sweep.tsv")?;
    print!("{summary}");
    println!("selected_lambda\t{}", res.selected_lambda);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (expr, fold) = load_data(&a.data)?;
    let (head, encoder) = load_model(&a.model)?;
    if head.gene_ids != expr.gene_ids() {
        bail!("model genes do not match the expression matrix");
    }
    let model = Model { head, encoder };
    let pred = model.predict(&fold.test.inputs)?;
    let base = random_baseline(&model, &fold.test.inputs, a.baseline_seed)?;
    let rep = evaluate_predictions(
        expr.gene_ids(),
        pred.view(),
        base.view(),
        fold.test.targets.view(),
        a.alpha,
        model.head.lambda,
    )?;
    save_eval_report(&rep, &a.output)?;
    println!("n_significant\t{}\nmean_r\t{}", rep.n_significant, rep.mean_r());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let res = run_experiment(&cfg)?;
    let summary = std::fs::read_to_string(res.output_dir.join("summary.tsv"))?;
    print!("{summary}");
    Ok(())
}
