//! Prior-knowledge-injected linear head and a mean-pool MLP encoder.
//!
//! The head maps a slide embedding `w` (length `d`) to one prediction per
//! gene:
//!
//! ```text
//! raw = (1 − λ)·wAᵀ + λ·wGᵀ + b,    out = max(raw, 0) if clamped
//! ```
//!
//! `A` and `b` are trained, `G` holds the NMF gene embeddings and stays
//! frozen unless [`PkLinearHead::train_g`] is set. A gene outside the
//! network has a zero `G` row, so its prediction is `(1 − λ)·wA_iᵀ + b_i`.
//! All gradients are written out by hand.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{read_ids, read_pkmx, write_ids, write_pkmx, PatchSet};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PkLinearHead {
    pub gene_ids: Vec<String>,
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub g: Array2<f64>,
    pub lambda: f64,
    pub clamp_output: bool,
    /// Let the optimizer update `G` as well (ablation switch, off by default).
    pub train_g: bool,
}

/// Gradients of the batch MSE with respect to the head parameters and the
/// input embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub loss: f64,
    pub da: Array2<f64>,
    pub db: Array1<f64>,
    /// Only filled when `train_g` is set.
    pub dg: Option<Array2<f64>>,
    /// `∂loss/∂w` for every sample of the batch, for backpropagation into
    /// an encoder.
    pub dw: Array2<f64>,
}

impl PkLinearHead {
    pub fn new(
        gene_ids: Vec<String>,
        a: Array2<f64>,
        b: Array1<f64>,
        g: Array2<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let head = Self {
            gene_ids,
            a,
            b,
            g,
            lambda,
            clamp_output: true,
            train_g: false,
        };
        head.validate()?;
        Ok(head)
    }

    /// Plain `wAᵀ + b` head: `G = 0`, `λ = 0`.
    pub fn linear(gene_ids: Vec<String>, a: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        let g = Array2::zeros(a.raw_dim());
        Self::new(gene_ids, a, b, g, 0.0)
    }

    /// Head with `A`, `b` drawn uniformly from `±1/sqrt(d)`.
    pub fn init_random(gene_ids: Vec<String>, g: Array2<f64>, lambda: f64, seed: u64) -> Result<Self> {
        let (n, d) = g.dim();
        ensure!(d >= 1, InvalidArgument, "embedding dimension must be positive");
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, d), |_| rng.random_range(-bound..bound));
        let b = Array1::from_shape_fn(n, |_| rng.random_range(-bound..bound));
        Self::new(gene_ids, a, b, g, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.a.dim() == self.g.dim(),
            Shape,
            "A is {:?} but G is {:?}",
            self.a.dim(),
            self.g.dim()
        );
        ensure!(
            self.b.len() == self.a.nrows() && self.gene_ids.len() == self.a.nrows(),
            Shape,
            "{} genes, {} biases, {} rows in A",
            self.gene_ids.len(),
            self.b.len(),
            self.a.nrows()
        );
        ensure!(
            (0.0..=1.0).contains(&self.lambda),
            InvalidArgument,
            "lambda must lie in [0, 1], got {}",
            self.lambda
        );
        ensure!(
            self.g.iter().all(|v| v.is_finite() && *v >= 0.0),
            Validation,
            "gene embeddings must be finite and nonnegative"
        );
        Ok(())
    }

    pub fn n_genes(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        ensure!(
            d == self.dim(),
            Shape,
            "embedding has dimension {d}, head expects {}",
            self.dim()
        );
        Ok(())
    }

    /// Affine value before clamping for one embedding.
    pub fn raw(&self, w: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(w.len())?;
        let learned = self.a.dot(&w);
        let prior = self.g.dot(&w);
        let l = self.lambda;
        Ok(Array1::from_shape_fn(self.n_genes(), |i| {
            (1.0 - l) * learned[i] + l * prior[i] + self.b[i]
        }))
    }

    /// The injected term `λ·wGᵀ` alone.
    pub fn pk_term(&self, w: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(w.len())?;
        Ok(self.g.dot(&w) * self.lambda)
    }

    /// `raw` for a batch of embeddings (`n × d` → `n × N_genes`).
    pub fn raw_batch(&self, w: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(w.ncols())?;
        let learned = w.dot(&self.a.t());
        let prior = w.dot(&self.g.t());
        let l = self.lambda;
        let mut out = learned * (1.0 - l);
        out.zip_mut_with(&prior, |o, p| *o += l * p);
        out += &self.b;
        Ok(out)
    }

    pub fn predict_batch(&self, w: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = self.raw_batch(w)?;
        if self.clamp_output {
            out.mapv_inplace(|v| v.max(0.0));
        }
        Ok(out)
    }

    /// Weight matrix the head effectively applies: `(1 − λ)A + λG`.
    pub fn effective_weights(&self) -> Array2<f64> {
        &self.a * (1.0 - self.lambda) + &self.g * self.lambda
    }

    /// Mean squared error over all `n × N_genes` entries and its gradients.
    /// Clamped outputs (raw < 0) pass no gradient.
    pub fn grad(&self, w: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<HeadGrads> {
        let n = w.nrows();
        ensure!(n >= 1, InvalidArgument, "empty batch");
        ensure!(
            targets.dim() == (n, self.n_genes()),
            Shape,
            "targets are {:?}, expected ({n}, {})",
            targets.dim(),
            self.n_genes()
        );
        let raw = self.raw_batch(w)?;
        let scale = 1.0 / (n * self.n_genes()) as f64;
        let mut loss = 0.0;
        let mut dout = Array2::zeros(raw.raw_dim());
        ndarray::Zip::from(&mut dout)
            .and(&raw)
            .and(&targets)
            .for_each(|d, &r, &t| {
                let clamped = self.clamp_output && r < 0.0;
                let out = if clamped { 0.0 } else { r };
                let resid = out - t;
                loss += resid * resid;
                *d = if clamped { 0.0 } else { 2.0 * scale * resid };
            });
        let dout_t_w = dout.t().dot(&w);
        Ok(HeadGrads {
            loss: loss * scale,
            da: &dout_t_w * (1.0 - self.lambda),
            db: dout.sum_axis(Axis(0)),
            dg: self.train_g.then(|| &dout_t_w * self.lambda),
            dw: dout.dot(&self.effective_weights()),
        })
    }

    /// SHA-256 of the newline-joined gene id list.
    pub fn gene_hash(&self) -> String {
        gene_list_hash(&self.gene_ids)
    }
}

pub fn gene_list_hash(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn pk_forward(head: &PkLinearHead, w: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let mut out = head.raw(w)?;
    if head.clamp_output {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}

pub fn pk_grad(
    head: &PkLinearHead,
    batch_w: ArrayView2<'_, f64>,
    batch_targets: ArrayView2<'_, f64>,
) -> Result<HeadGrads> {
    head.grad(batch_w, batch_targets)
}

// ---------------------------------------------------------------------------
// Encoder stub

/// Mean pooling over patches followed by `relu(W1·x + b1)` and `W2·h + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub dw1: Array2<f64>,
    pub db1: Array1<f64>,
    pub dw2: Array2<f64>,
    pub db2: Array1<f64>,
}

/// Intermediate values of one encoder pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub pooled: Array1<f64>,
    pub pre: Array1<f64>,
    pub hidden: Array1<f64>,
    pub out: Array1<f64>,
}

/// Column means that do not depend on row order: each column is summed in
/// sorted order.
pub fn mean_pool(patches: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let n = patches.nrows();
    ensure!(n >= 1, InvalidArgument, "cannot pool an empty patch set");
    let mut col = Vec::with_capacity(n);
    Ok(Array1::from_shape_fn(patches.ncols(), |c| {
        col.clear();
        col.extend(patches.column(c).iter().copied());
        col.sort_unstable_by(f64::total_cmp);
        col.iter().sum::<f64>() / n as f64
    }))
}

impl MlpEncoder {
    pub fn init_random(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        ensure!(
            input_dim >= 1 && hidden_dim >= 1 && output_dim >= 1,
            InvalidArgument,
            "encoder dimensions must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = |fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            move |rng: &mut ChaCha8Rng| rng.random_range(-bound..bound)
        };
        let u1 = uniform(input_dim);
        let u2 = uniform(hidden_dim);
        let w1 = Array2::from_shape_fn((hidden_dim, input_dim), |_| u1(&mut rng));
        let b1 = Array1::from_shape_fn(hidden_dim, |_| u1(&mut rng));
        let w2 = Array2::from_shape_fn((output_dim, hidden_dim), |_| u2(&mut rng));
        let b2 = Array1::from_shape_fn(output_dim, |_| u2(&mut rng));
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn trace(&self, patches: ArrayView2<'_, f64>) -> Result<EncoderTrace> {
        ensure!(
            patches.ncols() == self.input_dim(),
            Shape,
            "patches have dimension {}, encoder expects {}",
            patches.ncols(),
            self.input_dim()
        );
        let pooled = mean_pool(patches)?;
        let pre = self.w1.dot(&pooled) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = self.w2.dot(&hidden) + &self.b2;
        Ok(EncoderTrace {
            pooled,
            pre,
            hidden,
            out,
        })
    }

    pub fn encode(&self, patches: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.trace(patches)?.out)
    }

    /// Accumulates the gradient for a batch given `∂loss/∂out` per sample.
    pub fn backward(&self, traces: &[EncoderTrace], dout: ArrayView2<'_, f64>) -> EncoderGrads {
        let mut g = EncoderGrads {
            dw1: Array2::zeros(self.w1.raw_dim()),
            db1: Array1::zeros(self.b1.len()),
            dw2: Array2::zeros(self.w2.raw_dim()),
            db2: Array1::zeros(self.b2.len()),
        };
        for (t, d) in traces.iter().zip(dout.rows()) {
            outer_add(&mut g.dw2, d, t.hidden.view());
            g.db2 += &d;
            let mut dh = self.w2.t().dot(&d);
            dh.zip_mut_with(&t.pre, |x, &p| {
                if p <= 0.0 {
                    *x = 0.0
                }
            });
            outer_add(&mut g.dw1, dh.view(), t.pooled.view());
            g.db1 += &dh;
        }
        g
    }
}

fn outer_add(dst: &mut Array2<f64>, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) {
    for (mut row, &ui) in dst.rows_mut().into_iter().zip(u.iter()) {
        row.scaled_add(ui, &v);
    }
}

pub fn mlp_encode(enc: &MlpEncoder, patches: &PatchSet) -> Result<Array1<f64>> {
    enc.encode(patches.patches.view())
}

// ---------------------------------------------------------------------------
// Model artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadMeta {
    lambda: f64,
    d: usize,
    n_genes: usize,
    clamp_output: bool,
    train_g: bool,
    gene_ids_sha256: String,
    encoder_hidden: Option<usize>,
    encoder_input: Option<usize>,
}

/// Writes `A.pkmx`, `G.pkmx`, `b.pkmx` (1 × N), `genes.ids`, `meta.toml`
/// and, with an encoder, `enc_w1.pkmx` … `enc_b2.pkmx` into `dir`.
pub fn save_model(head: &PkLinearHead, encoder: Option<&MlpEncoder>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pkmx(&head.a, dir.join("A.pkmx"))?;
    write_pkmx(&head.g, dir.join("G.pkmx"))?;
    write_pkmx(&row_matrix(&head.b), dir.join("b.pkmx"))?;
    write_ids(&head.gene_ids, dir.join("genes.ids"))?;
    if let Some(enc) = encoder {
        write_pkmx(&enc.w1, dir.join("enc_w1.pkmx"))?;
        write_pkmx(&row_matrix(&enc.b1), dir.join("enc_b1.pkmx"))?;
        write_pkmx(&enc.w2, dir.join("enc_w2.pkmx"))?;
        write_pkmx(&row_matrix(&enc.b2), dir.join("enc_b2.pkmx"))?;
    }
    let meta = HeadMeta {
        lambda: head.lambda,
        d: head.dim(),
        n_genes: head.n_genes(),
        clamp_output: head.clamp_output,
        train_g: head.train_g,
        gene_ids_sha256: head.gene_hash(),
        encoder_hidden: encoder.map(MlpEncoder::hidden_dim),
        encoder_input: encoder.map(MlpEncoder::input_dim),
    };
    let path = dir.join("meta.toml");
    let text = toml::to_string(&meta).map_err(|e| Error::Validation(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(PkLinearHead, Option<MlpEncoder>)> {
    let dir = dir.as_ref();
    let path = dir.join("meta.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: HeadMeta = toml::from_str(&text).map_err(|e| Error::parse(&path, 0, e.message().to_string()))?;
    let gene_ids = read_ids(dir.join("genes.ids"))?;
    ensure!(
        gene_list_hash(&gene_ids) == meta.gene_ids_sha256,
        Validation,
        "{}: gene list does not match the recorded hash",
        dir.display()
    );
    let mut head = PkLinearHead::new(
        gene_ids,
        read_pkmx(dir.join("A.pkmx"))?,
        read_pkmx(dir.join("b.pkmx"))?.row(0).to_owned(),
        read_pkmx(dir.join("G.pkmx"))?,
        meta.lambda,
    )?;
    head.clamp_output = meta.clamp_output;
    head.train_g = meta.train_g;
    ensure!(
        head.dim() == meta.d && head.n_genes() == meta.n_genes,
        Validation,
        "{}: matrices disagree with meta.toml",
        dir.display()
    );
    let encoder = match meta.encoder_hidden {
        Some(_) => Some(MlpEncoder {
            w1: read_pkmx(dir.join("enc_w1.pkmx"))?,
            b1: read_pkmx(dir.join("enc_b1.pkmx"))?.row(0).to_owned(),
            w2: read_pkmx(dir.join("enc_w2.pkmx"))?,
            b2: read_pkmx(dir.join("enc_b2.pkmx"))?.row(0).to_owned(),
        }),
        None => None,
    };
    Ok((head, encoder))
}

fn row_matrix(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(Axis(0)).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("G{i}")).collect()
    }

    fn example_head() -> PkLinearHead {
        PkLinearHead::new(
            ids(3),
            array![[1., 0.], [0., 1.], [1., 1.]],
            array![0., 0.1, -0.1],
            array![[0.5, 0.5], [0., 0.], [1., 0.]],
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn hand_evaluated_forward() {
        // wAᵀ = (1, 2, 3), wGᵀ = (1.5, 0, 1)
        let out = pk_forward(&example_head(), array![1., 2.].view()).unwrap();
        let expected = [1.25, 1.1, 1.9];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15, "{out}");
        }
    }

    #[test]
    fn lambda_zero_is_the_linear_layer() {
        let mut head = example_head();
        head.lambda = 0.0;
        head.clamp_output = false;
        let w = array![0.3, -2.0];
        let expected = head.a.dot(&w) + &head.b;
        assert_eq!(pk_forward(&head, w.view()).unwrap(), expected);
    }

    #[test]
    fn zero_embedding_row_keeps_scaled_linear_term() {
        let head = example_head();
        let w = array![1., 2.];
        let out = head.raw(w.view()).unwrap();
        let expected = (1.0 - head.lambda) * head.a.row(1).dot(&w) + head.b[1];
        assert_eq!(out[1], expected);
    }

    #[test]
    fn clamp_keeps_outputs_nonnegative() {
        let head = example_head();
        let out = pk_forward(&head, array![-5., -5.].view()).unwrap();
        assert!(out.iter().all(|v| *v >= 0.0));
        let mut raw_head = head.clone();
        raw_head.clamp_output = false;
        assert!(pk_forward(&raw_head, array![-5., -5.].view()).unwrap().iter().any(|v| *v < 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let head = example_head();
        assert!(matches!(pk_forward(&head, array![1., 2., 3.].view()), Err(Error::Shape(_))));
        let w = Array2::zeros((2, 2));
        assert!(pk_grad(&head, w.view(), Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let head = example_head();
        let w = array![[1., 2.], [0.5, 0.25]];
        let targets = head.predict_batch(w.view()).unwrap();
        let grads = pk_grad(&head, w.view(), targets.view()).unwrap();
        assert!(grads.da.iter().chain(grads.db.iter()).all(|v| *v == 0.0));
        assert_eq!(grads.loss, 0.0);
    }

    #[test]
    fn lambda_one_blocks_the_learned_path() {
        let mut head = example_head();
        head.lambda = 1.0;
        let w = array![[1., 2.], [-0.5, 0.25]];
        let grads = pk_grad(&head, w.view(), Array2::ones((2, 3)).view()).unwrap();
        assert!(grads.da.iter().all(|v| *v == 0.0));
        assert!(grads.db.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn frozen_g_gets_no_gradient_unless_enabled() {
        let mut head = example_head();
        let w = array![[1., 2.]];
        assert!(pk_grad(&head, w.view(), Array2::zeros((1, 3)).view()).unwrap().dg.is_none());
        head.train_g = true;
        assert!(pk_grad(&head, w.view(), Array2::zeros((1, 3)).view()).unwrap().dg.is_some());
    }

    #[test]
    fn encoder_pooling_is_permutation_invariant() {
        let enc = MlpEncoder::init_random(3, 5, 2, 11).unwrap();
        let patches = array![[0.1, 0.2, 0.3], [1e-17, 5.0, -2.0], [0.7, 1e16, 3.3], [0.1, 0.1, 0.1]];
        let permuted = patches.select(Axis(0), &[2, 0, 3, 1]);
        assert_eq!(
            enc.encode(patches.view()).unwrap(),
            enc.encode(permuted.view()).unwrap()
        );
        let single = array![[0.4, -1.0, 2.0]];
        let repeated = array![[0.4, -1.0, 2.0], [0.4, -1.0, 2.0], [0.4, -1.0, 2.0]];
        assert_eq!(enc.encode(single.view()).unwrap(), enc.encode(repeated.view()).unwrap());
        assert!(enc.encode(Array2::zeros((0, 3)).view()).is_err());
    }

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn head_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n_genes, d, n) = (20, 5, 8);
        let g = random_matrix(&mut rng, n_genes, d).mapv(f64::abs);
        let mut head = PkLinearHead::init_random(ids(n_genes), g, 0.3, 1).unwrap();
        head.clamp_output = false;
        let w = random_matrix(&mut rng, n, d);
        let y = random_matrix(&mut rng, n, n_genes);
        let grads = pk_grad(&head, w.view(), y.view()).unwrap();
        let h = 1e-5;
        let loss = |hd: &PkLinearHead| pk_grad(hd, w.view(), y.view()).unwrap().loss;
        for idx in [(0, 0), (7, 3), (19, 4)] {
            let mut p = head.clone();
            p.a[idx] += h;
            let mut m = head.clone();
            m.a[idx] -= h;
            assert!(rel_err(grads.da[idx], (loss(&p) - loss(&m)) / (2.0 * h)) < 1e-4);
        }
        for i in [0, 11, 19] {
            let mut p = head.clone();
            p.b[i] += h;
            let mut m = head.clone();
            m.b[i] -= h;
            assert!(rel_err(grads.db[i], (loss(&p) - loss(&m)) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn encoder_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p_dim, hidden, d, n_genes) = (6, 7, 4, 10);
        let enc = MlpEncoder::init_random(p_dim, hidden, d, 2).unwrap();
        let g = random_matrix(&mut rng, n_genes, d).mapv(f64::abs);
        let mut head = PkLinearHead::init_random(ids(n_genes), g, 0.5, 4).unwrap();
        head.clamp_output = false;
        let sets: Vec<Array2<f64>> = (0..5).map(|_| random_matrix(&mut rng, 3, p_dim)).collect();
        let y = random_matrix(&mut rng, sets.len(), n_genes);
        let loss_and_grads = |e: &MlpEncoder| {
            let traces: Vec<_> = sets.iter().map(|s| e.trace(s.view()).unwrap()).collect();
            let mut w = Array2::zeros((sets.len(), d));
            for (mut row, t) in w.rows_mut().into_iter().zip(&traces) {
                row.assign(&t.out);
            }
            let hg = head.grad(w.view(), y.view()).unwrap();
            let eg = e.backward(&traces, hg.dw.view());
            (hg.loss, eg)
        };
        let (_, grads) = loss_and_grads(&enc);
        let h = 1e-5;
        let fd = |f: &dyn Fn(&mut MlpEncoder, f64)| {
            let mut p = enc.clone();
            f(&mut p, h);
            let mut m = enc.clone();
            f(&mut m, -h);
            (loss_and_grads(&p).0 - loss_and_grads(&m).0) / (2.0 * h)
        };
        for idx in [(0, 0), (3, 5), (6, 2)] {
            assert!(rel_err(grads.dw1[idx], fd(&|e, s| e.w1[idx] += s)) < 1e-4);
        }
        for idx in [(0, 0), (3, 6)] {
            assert!(rel_err(grads.dw2[idx], fd(&|e, s| e.w2[idx] += s)) < 1e-4);
        }
        for i in [0, 4] {
            assert!(rel_err(grads.db1[i], fd(&|e, s| e.b1[i] += s)) < 1e-4);
        }
        assert!(rel_err(grads.db2[1], fd(&|e, s| e.b2[1] += s)) < 1e-4);
    }

    #[test]
    fn model_artifact_round_trip() {
        let mut head = example_head();
        head.clamp_output = false;
        let enc = MlpEncoder::init_random(4, 3, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&head, Some(&enc), dir.path()).unwrap();
        let (h2, e2) = load_model(dir.path()).unwrap();
        assert_eq!(h2, head);
        assert_eq!(e2, Some(enc));

        std::fs::write(dir.path().join("genes.ids"), "X\nY\nZ\n").unwrap();
        assert!(load_model(dir.path()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn head(seed: u64, n_genes: usize, d: usize, lambda: f64) -> PkLinearHead {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n_genes, d);
            let b = random_matrix(&mut rng, 1, n_genes).row(0).to_owned();
            let mut g = random_matrix(&mut rng, n_genes, d).mapv(f64::abs);
            // gene 1 copies gene 0's prior-knowledge embedding
            let first = g.row(0).to_owned();
            g.row_mut(1).assign(&first);
            PkLinearHead::new(ids(n_genes), a, b, g, lambda).unwrap()
        }

        proptest! {
            #[test]
            fn raw_output_is_affine_in_lambda(seed in any::<u64>(), n_genes in 2usize..40, d in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
                let w = random_matrix(&mut rng, 1, d).row(0).to_owned();
                let at = |l: f64| head(seed, n_genes, d, l).raw(w.view()).unwrap();
                let (r0, r5, r1) = (at(0.0), at(0.5), at(1.0));
                for i in 0..n_genes {
                    prop_assert!((r5[i] - 0.5 * (r0[i] + r1[i])).abs() < 1e-12);
                }
            }

            #[test]
            fn equal_prior_rows_get_equal_guidance(seed in any::<u64>(), lambda in 0.0f64..=1.0, d in 1usize..10) {
                let h = head(seed, 6, d, lambda);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
                let w = random_matrix(&mut rng, 1, d).row(0).to_owned();
                let pk = h.pk_term(w.view()).unwrap();
                prop_assert_eq!(pk[0], pk[1]);
            }

            #[test]
            fn clamped_predictions_are_nonnegative(seed in any::<u64>(), lambda in 0.0f64..=1.0, n in 1usize..10) {
                let h = head(seed, 12, 4, lambda);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
                let w = random_matrix(&mut rng, n, 4).mapv(|v| 5.0 * v);
                prop_assert!(h.predict_batch(w.view()).unwrap().iter().all(|v| *v >= 0.0));
            }
        }
    }
}
