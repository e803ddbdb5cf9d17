//! Minibatch training with validation-Pearson early stopping, the random
//! baseline and the λ sweep.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{evaluate_predictions, per_gene_pearson, EvalReport, DEFAULT_ALPHA};
use crate::dataio::{write_with, FoldAssignment, Split};
use crate::error::{ensure, Error, Result};
use crate::predictor::{EncoderTrace, MlpEncoder, PkLinearHead};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            InvalidArgument,
            "learning rate must be finite and nonnegative"
        );
        ensure!(self.batch_size >= 1, InvalidArgument, "batch size must be positive");
        ensure!(
            self.patience < self.max_epochs,
            InvalidArgument,
            "patience ({}) must be below max_epochs ({})",
            self.patience,
            self.max_epochs
        );
        Ok(())
    }
}

/// Per-sample model inputs: fixed embeddings, or patch sets for an encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInputs {
    Embeddings(Array2<f64>),
    Patches(Vec<Array2<f64>>),
}

impl SampleInputs {
    pub fn len(&self) -> usize {
        match self {
            Self::Embeddings(w) => w.nrows(),
            Self::Patches(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        match self {
            Self::Embeddings(w) => Self::Embeddings(w.select(Axis(0), rows)),
            Self::Patches(p) => Self::Patches(rows.iter().map(|&r| p[r].clone()).collect()),
        }
    }

    /// Width of one embedding or one patch.
    pub fn input_dim(&self) -> usize {
        match self {
            Self::Embeddings(w) => w.ncols(),
            Self::Patches(p) => p.first().map_or(0, |x| x.ncols()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub inputs: SampleInputs,
    pub targets: Array2<f64>,
}

impl SplitData {
    pub fn new(inputs: SampleInputs, targets: Array2<f64>) -> Result<Self> {
        ensure!(
            inputs.len() == targets.nrows(),
            Shape,
            "{} inputs but {} target rows",
            inputs.len(),
            targets.nrows()
        );
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(rows),
            targets: self.targets.select(Axis(0), rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    /// Row indices of the test samples in the full dataset.
    pub test_rows: Vec<usize>,
}

impl FoldData {
    /// Splits the full dataset by the patient of every sample.
    pub fn from_assignment(all: &SplitData, sample_patients: &[String], fold: &FoldAssignment) -> Result<Self> {
        ensure!(
            sample_patients.len() == all.len(),
            Shape,
            "{} patient labels for {} samples",
            sample_patients.len(),
            all.len()
        );
        let rows = |s| fold.sample_rows(sample_patients, &[s]);
        let test_rows = rows(Split::Test);
        Ok(Self {
            train: all.select(&rows(Split::Train)),
            val: all.select(&rows(Split::Val)),
            test: all.select(&test_rows),
            test_rows,
        })
    }
}

/// Head plus optional patch encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub head: PkLinearHead,
    pub encoder: Option<MlpEncoder>,
}

impl Model {
    fn embed(&self, inputs: &SampleInputs) -> Result<(Array2<f64>, Vec<EncoderTrace>)> {
        match (inputs, &self.encoder) {
            (SampleInputs::Embeddings(w), None) => Ok((w.clone(), Vec::new())),
            (SampleInputs::Patches(sets), Some(enc)) => {
                let traces = sets.iter().map(|s| enc.trace(s.view())).collect::<Result<Vec<_>>>()?;
                let mut w = Array2::zeros((sets.len(), enc.output_dim()));
                for (mut row, t) in w.rows_mut().into_iter().zip(&traces) {
                    row.assign(&t.out);
                }
                Ok((w, traces))
            }
            (SampleInputs::Embeddings(_), Some(_)) => Err(Error::InvalidArgument(
                "model has an encoder but received precomputed embeddings".into(),
            )),
            (SampleInputs::Patches(_), None) => Err(Error::InvalidArgument(
                "patch inputs need an encoder".into(),
            )),
        }
    }

    pub fn predict(&self, inputs: &SampleInputs) -> Result<Array2<f64>> {
        let (w, _) = self.embed(inputs)?;
        self.head.predict_batch(w.view())
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let h = &mut self.head;
        let mut out: Vec<&mut [f64]> = vec![slice_mut(&mut h.a), slice1_mut(&mut h.b)];
        if h.train_g {
            out.push(slice_mut(&mut h.g));
        }
        if let Some(e) = &mut self.encoder {
            out.extend([
                slice_mut(&mut e.w1),
                slice1_mut(&mut e.b1),
                slice_mut(&mut e.w2),
                slice1_mut(&mut e.b2),
            ]);
        }
        out
    }

    /// Batch loss and gradients in the order of `params_mut`.
    fn loss_and_grads(&self, batch: &SplitData) -> Result<(f64, Vec<Vec<f64>>)> {
        let (w, traces) = self.embed(&batch.inputs)?;
        let hg = self.head.grad(w.view(), batch.targets.view())?;
        let mut grads = vec![hg.da.into_raw_vec_and_offset().0, hg.db.to_vec()];
        if let Some(dg) = hg.dg {
            grads.push(dg.into_raw_vec_and_offset().0);
        }
        if let Some(enc) = &self.encoder {
            let eg = enc.backward(&traces, hg.dw.view());
            grads.extend([
                eg.dw1.into_raw_vec_and_offset().0,
                eg.db1.to_vec(),
                eg.dw2.into_raw_vec_and_offset().0,
                eg.db2.to_vec(),
            ]);
        }
        Ok((hg.loss, grads))
    }
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

/// Encoder sizing when training on patch sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Fresh model: random `A`, `b` set to the training-target column means,
/// and a random encoder when `encoder` is given.
pub fn init_model(
    gene_ids: &[String],
    g: &Array2<f64>,
    lambda: f64,
    encoder: Option<EncoderSpec>,
    train_targets: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<Model> {
    let mut head = PkLinearHead::init_random(gene_ids.to_vec(), g.clone(), lambda, seed)?;
    if train_targets.nrows() > 0 {
        ensure!(
            train_targets.ncols() == head.n_genes(),
            Shape,
            "targets have {} genes, head has {}",
            train_targets.ncols(),
            head.n_genes()
        );
        head.b = train_targets.mean_axis(Axis(0)).expect("nonempty");
    }
    let encoder = encoder
        .map(|s| MlpEncoder::init_random(s.input_dim, s.hidden_dim, head.dim(), seed.wrapping_add(0x9e37_79b9)))
        .transpose()?;
    Ok(Model { head, encoder })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_pearson: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean squared error of clamped predictions over all entries.
pub fn mse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

/// Unweighted mean of per-gene Pearson r over non-degenerate genes.
pub fn mean_pearson(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    let c = per_gene_pearson(pred, truth)?;
    let (sum, count) = c
        .r
        .iter()
        .zip(&c.degenerate)
        .filter(|(_, d)| !**d)
        .fold((0.0, 0usize), |(s, k), (r, _)| (s + r, k + 1));
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[&mut [f64]]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Trains `model` in place of a copy and returns the snapshot with the best
/// validation mean Pearson. Epoch 0 in the history is the untrained model.
pub fn train_model(mut model: Model, train: &SplitData, val: &SplitData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train.is_empty(), InvalidArgument, "training split is empty");
    ensure!(!val.is_empty(), InvalidArgument, "validation split is empty");
    model.head.validate()?;

    let evaluate = |m: &Model, epoch: usize| -> Result<EpochRecord> {
        let train_mse = mse(m.predict(&train.inputs)?.view(), train.targets.view());
        ensure!(
            train_mse.is_finite(),
            Diverged,
            "training loss became {train_mse} at epoch {epoch}; lower the learning rate"
        );
        let val_pearson = mean_pearson(m.predict(&val.inputs)?.view(), val.targets.view())?;
        Ok(EpochRecord {
            epoch,
            train_mse,
            val_pearson,
        })
    };

    let mut history = vec![evaluate(&model, 0)?];
    let mut best = (model.clone(), 0usize, history[0].val_pearson);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(&model.params_mut());
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let (loss, grads) = model.loss_and_grads(&batch)?;
            ensure!(
                loss.is_finite(),
                Diverged,
                "batch loss became {loss} at epoch {epoch}; lower the learning rate"
            );
            let lr = cfg.learning_rate;
            match cfg.optimizer {
                Optimizer::Adam => adam.step(model.params_mut(), &grads, lr),
                Optimizer::Sgd => {
                    for (p, g) in model.params_mut().into_iter().zip(&grads) {
                        p.iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
                    }
                }
            }
        }
        let rec = evaluate(&model, epoch)?;
        history.push(rec);
        if rec.val_pearson > best.2 {
            best = (model.clone(), epoch, rec.val_pearson);
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        history,
        best_epoch: best.1,
        stopped_early,
    })
}

/// Predictions of an untrained model with seeded random weights and the
/// same shape, `λ` and `G` as `template`.
pub fn random_baseline(template: &Model, inputs: &SampleInputs, seed: u64) -> Result<Array2<f64>> {
    let h = &template.head;
    let mut head = PkLinearHead::init_random(h.gene_ids.clone(), h.g.clone(), h.lambda, seed)?;
    head.clamp_output = h.clamp_output;
    let encoder = template
        .encoder
        .as_ref()
        .map(|e| MlpEncoder::init_random(e.input_dim(), e.hidden_dim(), e.output_dim(), seed.wrapping_add(1)))
        .transpose()?;
    Model { head, encoder }.predict(inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectOn {
    #[default]
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub alpha: f64,
    pub select_on: SelectOn,
    /// Hidden width of the patch encoder; `None` trains on fixed embeddings.
    pub encoder_hidden: Option<usize>,
    pub clamp_output: bool,
    pub baseline_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            alpha: DEFAULT_ALPHA,
            select_on: SelectOn::Test,
            encoder_hidden: None,
            clamp_output: true,
            baseline_seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub lambda: f64,
    pub outcome: TrainOutcome,
    pub test_pred: Array2<f64>,
    pub baseline_pred: Array2<f64>,
    pub test_report: EvalReport,
    pub val_report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// The λ = 0 model.
    pub no_pk: SweepEntry,
    /// One entry per grid value, in grid order.
    pub entries: Vec<SweepEntry>,
    pub selected_lambda: f64,
}

impl SweepResult {
    pub fn selected(&self) -> &SweepEntry {
        self.entries
            .iter()
            .find(|e| e.lambda == self.selected_lambda)
            .unwrap_or(&self.no_pk)
    }
}

/// λ with the largest count; ties go to the smaller λ.
pub fn select_lambda(counts: &[(f64, usize)]) -> Option<f64> {
    counts
        .iter()
        .copied()
        .reduce(|best, c| {
            if c.1 > best.1 || (c.1 == best.1 && c.0 < best.0) {
                c
            } else {
                best
            }
        })
        .map(|(l, _)| l)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    ensure!(!grid.is_empty(), InvalidArgument, "lambda grid is empty");
    ensure!(
        grid.iter().all(|l| (0.0..=1.0).contains(l)),
        InvalidArgument,
        "lambda values must lie in [0, 1]"
    );
    Ok(())
}

/// Trains and evaluates one model at a fixed λ.
pub fn train_and_evaluate(
    gene_ids: &[String],
    g: &Array2<f64>,
    fold: &FoldData,
    lambda: f64,
    cfg: &SweepConfig,
) -> Result<SweepEntry> {
    let encoder = cfg.encoder_hidden.map(|hidden_dim| EncoderSpec {
        input_dim: fold.train.inputs.input_dim(),
        hidden_dim,
    });
    let mut model = init_model(gene_ids, g, lambda, encoder, fold.train.targets.view(), cfg.train.seed)?;
    model.head.clamp_output = cfg.clamp_output;
    let outcome = train_model(model, &fold.train, &fold.val, &cfg.train)?;
    let m = &outcome.model;
    let test_pred = m.predict(&fold.test.inputs)?;
    let baseline_pred = random_baseline(m, &fold.test.inputs, cfg.baseline_seed)?;
    let test_report = evaluate_predictions(
        gene_ids,
        test_pred.view(),
        baseline_pred.view(),
        fold.test.targets.view(),
        cfg.alpha,
        lambda,
    )?;
    let val_pred = m.predict(&fold.val.inputs)?;
    let val_base = random_baseline(m, &fold.val.inputs, cfg.baseline_seed)?;
    let val_report = evaluate_predictions(
        gene_ids,
        val_pred.view(),
        val_base.view(),
        fold.val.targets.view(),
        cfg.alpha,
        lambda,
    )?;
    Ok(SweepEntry {
        lambda,
        outcome,
        test_pred,
        baseline_pred,
        test_report,
        val_report,
    })
}

/// Trains one model per grid value plus the λ = 0 reference and selects
/// the grid value with the most significant genes.
pub fn lambda_sweep(
    gene_ids: &[String],
    g: &Array2<f64>,
    fold: &FoldData,
    grid: &[f64],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    validate_grid(grid)?;
    let mut lambdas = vec![0.0];
    lambdas.extend(grid.iter().copied().filter(|l| *l != 0.0));
    let trained: Vec<SweepEntry> = lambdas
        .par_iter()
        .map(|&l| train_and_evaluate(gene_ids, g, fold, l, cfg))
        .collect::<Result<_>>()?;
    let no_pk = trained[0].clone();
    let entries: Vec<SweepEntry> = grid
        .iter()
        .map(|l| trained.iter().find(|e| e.lambda == *l).cloned().expect("trained"))
        .collect();
    let counts: Vec<(f64, usize)> = entries
        .iter()
        .map(|e| {
            let rep = match cfg.select_on {
                SelectOn::Test => &e.test_report,
                SelectOn::Validation => &e.val_report,
            };
            (e.lambda, rep.n_significant)
        })
        .collect();
    Ok(SweepResult {
        no_pk,
        selected_lambda: select_lambda(&counts).expect("nonempty grid"),
        entries,
    })
}

pub fn save_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    write_with(path.as_ref(), |w| {
        writeln!(w, "epoch\ttrain_mse\tval_pearson")?;
        for r in history {
            writeln!(w, "{}\t{}\t{}", r.epoch, r.train_mse, r.val_pearson)?;
        }
        Ok(())
    })
}
