//! Synthetic datasets with a known module structure.
//!
//! Every patient draws a latent vector `z`. Module genes load on one shared
//! direction per module, background genes are independent noise, and the
//! sample embedding is a noisy linear image of `z`:
//!
//! ```text
//! expression = max(0, base + L·z + σ_e·ε)     (module genes)
//! expression = max(0, base + s_bg·ε)          (background genes)
//! w          = Q·z + σ_w·ε
//! patch      = w + σ_p·ε
//! ```
//!
//! Shared parameters come from stream 0 of the seeded generator and patient
//! `p` from stream `p + 1`, so output does not depend on scheduling.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coexpr::CoexpressionGraph;
use crate::dataio::{
    save_embedding_table, save_expression_matrix, save_graph_edgelist, save_patch_sets, EmbeddingTable,
    ExpressionMatrix, PatchSet,
};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub samples_per_patient: usize,
    pub n_genes: usize,
    pub n_modules: usize,
    pub genes_per_module: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub expression_noise: f64,
    pub embedding_noise: f64,
    pub patches_per_sample: usize,
    pub patch_noise: f64,
    /// Per-gene deviation from the module loading.
    pub loading_jitter: f64,
    /// Mean expression level, keeps clamping rare.
    pub base_level: f64,
    pub background_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            samples_per_patient: 1,
            n_genes: 500,
            n_modules: 10,
            genes_per_module: 20,
            latent_dim: 16,
            embed_dim: 32,
            expression_noise: 0.3,
            embedding_noise: 1.0,
            patches_per_sample: 8,
            patch_noise: 0.5,
            loading_jitter: 0.05,
            base_level: 4.0,
            background_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_patients >= 1, InvalidArgument, "need at least one patient");
        ensure!(self.samples_per_patient >= 1, InvalidArgument, "need at least one sample per patient");
        ensure!(self.n_genes >= 1, InvalidArgument, "need at least one gene");
        ensure!(
            self.n_modules * self.genes_per_module <= self.n_genes,
            InvalidArgument,
            "{} modules of {} genes exceed {} genes",
            self.n_modules,
            self.genes_per_module,
            self.n_genes
        );
        ensure!(self.latent_dim >= 1, InvalidArgument, "latent dimension must be positive");
        ensure!(self.embed_dim >= 1, InvalidArgument, "embedding dimension must be positive");
        ensure!(
            self.latent_dim <= self.embed_dim,
            InvalidArgument,
            "latent dimension {} exceeds embedding dimension {}",
            self.latent_dim,
            self.embed_dim
        );
        ensure!(self.patches_per_sample >= 1, InvalidArgument, "need at least one patch per sample");
        for (name, v) in [
            ("expression_noise", self.expression_noise),
            ("embedding_noise", self.embedding_noise),
            ("patch_noise", self.patch_noise),
            ("loading_jitter", self.loading_jitter),
            ("background_scale", self.background_scale),
        ] {
            ensure!(v.is_finite() && v >= 0.0, InvalidArgument, "{name} must be finite and nonnegative");
        }
        ensure!(self.base_level.is_finite(), InvalidArgument, "base_level must be finite");
        Ok(())
    }

    /// Reads a TOML file; missing keys take their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, 0, e.message().to_string()))
    }

    pub fn n_module_genes(&self) -> usize {
        self.n_modules * self.genes_per_module
    }

    /// Module of gene `i`, `None` for background genes.
    pub fn module_of(&self, i: usize) -> Option<usize> {
        (i < self.n_module_genes()).then(|| i / self.genes_per_module)
    }

    pub fn gene_ids(&self) -> Vec<String> {
        (0..self.n_genes).map(|i| format!("GENE{i:05}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub expression: ExpressionMatrix,
    pub embeddings: EmbeddingTable,
    pub patches: Vec<PatchSet>,
    /// Latent vector of every sample's patient, `n_samples × latent_dim`.
    pub latent: Array2<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit module directions; orthonormal while `n_modules ≤ latent_dim`.
fn module_directions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let m = cfg.latent_dim;
    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(cfg.n_modules);
    for k in 0..cfg.n_modules {
        let mut v = Array1::from_shape_fn(m, |_| normal(rng));
        if k < m {
            for u in &dirs {
                let proj = u.dot(&v);
                v.scaled_add(-proj, u);
            }
        }
        let norm = v.dot(&v).sqrt();
        dirs.push(v / norm);
    }
    dirs
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (m, d) = (cfg.latent_dim, cfg.embed_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = module_directions(cfg, &mut rng);
    let loadings = Array2::from_shape_fn((cfg.n_module_genes(), m), |(i, j)| {
        dirs[i / cfg.genes_per_module][j] + cfg.loading_jitter * normal(&mut rng)
    });
    let q_scale = 1.0 / (m as f64).sqrt();
    let q = Array2::from_shape_fn((d, m), |_| normal(&mut rng) * q_scale);

    struct Sample {
        z: Array1<f64>,
        expr: Vec<f64>,
        w: Array1<f64>,
        patches: Array2<f64>,
    }
    let per_patient: Vec<Vec<Sample>> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(p as u64 + 1);
            let z = Array1::from_shape_fn(m, |_| normal(&mut rng));
            let signal = loadings.dot(&z);
            let projected = q.dot(&z);
            (0..cfg.samples_per_patient)
                .map(|_| {
                    let expr = (0..cfg.n_genes)
                        .map(|i| {
                            let v = if i < signal.len() {
                                cfg.base_level + signal[i] + cfg.expression_noise * normal(&mut rng)
                            } else {
                                cfg.base_level + cfg.background_scale * normal(&mut rng)
                            };
                            v.max(0.0)
                        })
                        .collect();
                    let w = projected.mapv(|x| x + cfg.embedding_noise * normal(&mut rng));
                    let patches = Array2::from_shape_fn((cfg.patches_per_sample, d), |(_, j)| {
                        w[j] + cfg.patch_noise * normal(&mut rng)
                    });
                    Sample {
                        z: z.clone(),
                        expr,
                        w,
                        patches,
                    }
                })
                .collect()
        })
        .collect();

    let n = cfg.n_patients * cfg.samples_per_patient;
    let mut sample_ids = Vec::with_capacity(n);
    let mut patient_ids = Vec::with_capacity(n);
    let mut values = Array2::zeros((n, cfg.n_genes));
    let mut vectors = Array2::zeros((n, d));
    let mut latent = Array2::zeros((n, m));
    let mut patches = Vec::with_capacity(n);
    let mut row = 0;
    for (p, samples) in per_patient.into_iter().enumerate() {
        for (s, sample) in samples.into_iter().enumerate() {
            let pid = format!("P{p:05}");
            let sid = format!("{pid}-S{s}");
            values.row_mut(row).assign(&Array1::from(sample.expr));
            vectors.row_mut(row).assign(&sample.w);
            latent.row_mut(row).assign(&sample.z);
            patches.push(PatchSet::new(sid.clone(), sample.patches)?);
            sample_ids.push(sid);
            patient_ids.push(pid);
            row += 1;
        }
    }
    Ok(SynthDataset {
        expression: ExpressionMatrix::new(sample_ids.clone(), patient_ids, cfg.gene_ids(), values)?,
        embeddings: EmbeddingTable::new(sample_ids, vectors)?,
        patches,
        latent,
    })
}

/// Complete graph inside every module; background genes are isolated nodes.
pub fn true_graph(cfg: &SynthConfig) -> Result<CoexpressionGraph> {
    cfg.validate()?;
    let ids = cfg.gene_ids();
    let mut edges = Vec::new();
    for k in 0..cfg.n_modules {
        let start = k * cfg.genes_per_module;
        for i in start..start + cfg.genes_per_module {
            for j in i + 1..start + cfg.genes_per_module {
                edges.push((ids[i].clone(), ids[j].clone(), None));
            }
        }
    }
    CoexpressionGraph::from_named_edges(ids, edges)
}

/// Files written by [`save_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub expression: PathBuf,
    pub embeddings: PathBuf,
    pub patches: PathBuf,
    pub true_graph: PathBuf,
    pub config: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            expression: dir.join("expression.tsv"),
            embeddings: dir.join("embeddings.pkmx"),
            patches: dir.join("patches.pkmx"),
            true_graph: dir.join("true_graph.tsv"),
            config: dir.join("synth.toml"),
        }
    }
}

/// Writes the dataset, its true graph and the generating config into `dir`.
pub fn save_dataset(ds: &SynthDataset, cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SynthPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths::in_dir(dir);
    save_expression_matrix(&ds.expression, &paths.expression)?;
    save_embedding_table(&ds.embeddings, &paths.embeddings)?;
    save_patch_sets(&ds.patches, &paths.patches)?;
    save_graph_edgelist(&true_graph(cfg)?, &paths.true_graph)?;
    let text = toml::to_string(cfg).map_err(|e| Error::Validation(e.to_string()))?;
    std::fs::write(&paths.config, text).map_err(|e| Error::io(&paths.config, e))?;
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Edge-set precision, recall and F1. Empty sets score 0.
pub fn graph_recovery_metrics(predicted: &CoexpressionGraph, truth: &CoexpressionGraph) -> RecoveryMetrics {
    let truth_edges: HashSet<(&str, &str)> = truth.named_edges().collect();
    let hits = predicted.named_edges().filter(|e| truth_edges.contains(e)).count() as f64;
    let ratio = |den: usize| if den == 0 { 0.0 } else { hits / den as f64 };
    let precision = ratio(predicted.n_edges());
    let recall = ratio(truth.n_edges());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RecoveryMetrics { precision, recall, f1 }
}
