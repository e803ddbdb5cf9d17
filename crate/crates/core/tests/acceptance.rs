//! Acceptance suite. Every criterion is its own test and prints one
//! `PASS`/`FAIL` line; run with `--nocapture` to see them. Tests share a lock
//! so the allocation counter and the timings see one workload at a time.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkexpr::coexpr::{build_graph, CoexpressionGraph, GraphOptions};
use pkexpr::dataio::{
    load_graph_edgelist, save_embedding_table, ExpressionMatrix, FoldSpec, Split,
};
use pkexpr::embedqc::{np_score, np_score_with, Metric, NpOptions, RANK_RESOLUTION};
use pkexpr::experiment::{
    fold_internal_graph, run_experiment, ExperimentConfig, ExperimentResult, ModelKind, PkSource,
};
use pkexpr::nmf::{adjacency_from_graph, factorize, factorize_matrix, GeneEmbeddings, NmfOptions, SparseMatrix};
use pkexpr::predictor::{pk_forward, MlpEncoder, PkLinearHead};
use pkexpr::synth::{generate_dataset, save_dataset, SynthConfig};
use pkexpr::train_eval::{bh_adjust, TrainConfig};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("G{i:05}")).collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

fn random_head(rng: &mut ChaCha8Rng, n_genes: usize, d: usize, lambda: f64) -> PkLinearHead {
    let a = uniform(rng, n_genes, d, -1.0, 1.0);
    let b = Array1::from_shape_fn(n_genes, |_| rng.random_range(-1.0..1.0));
    let g = uniform(rng, n_genes, d, 0.0, 1.0);
    let mut head = PkLinearHead::new(ids(n_genes), a, b, g, lambda).unwrap();
    head.clamp_output = false;
    head
}

/// `w·A_iᵀ` by an explicit loop.
fn row_dot(w: &Array1<f64>, m: &Array2<f64>, i: usize) -> f64 {
    (0..w.len()).map(|k| w[k] * m[[i, k]]).sum()
}

#[test]
fn c01_zero_lambda_is_the_linear_layer() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n_genes = rng.random_range(1..=1000);
        let d = rng.random_range(1..=64);
        let head = random_head(&mut rng, n_genes, d, 0.0);
        let w = Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0));
        let out = pk_forward(&head, w.view()).unwrap();
        for i in 0..n_genes {
            worst = worst.max((out[i] - (row_dot(&w, &head.a, i) + head.b[i])).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "lambda=0 reduces to wA^T+b",
        worst <= 1e-12 && secs < 10.0,
        format!("max abs err {worst:.2e} (tol 1e-12), {secs:.2}s (limit 10s)"),
    );
}

#[test]
fn c02_zero_prior_rows_keep_the_scaled_linear_term() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0_f64;
    let mut checked = 0usize;
    for _ in 0..20 {
        let n_genes = rng.random_range(5..300);
        let d = rng.random_range(1..=32);
        let mut head = random_head(&mut rng, n_genes, d, 0.0);
        let zero_rows: Vec<usize> = (0..n_genes).filter(|_| rng.random_bool(0.3)).collect();
        for &i in &zero_rows {
            head.g.row_mut(i).fill(0.0);
        }
        let w = Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0));
        for step in 1..=9 {
            let lambda = step as f64 / 10.0;
            head.lambda = lambda;
            let out = pk_forward(&head, w.view()).unwrap();
            for &i in &zero_rows {
                let want = (1.0 - lambda) * row_dot(&w, &head.a, i) + head.b[i];
                worst = worst.max((out[i] - want).abs());
                checked += 1;
            }
        }
    }
    verdict(
        2,
        "zero prior row gives (1-lambda)wA_i^T+b_i",
        worst <= 1e-12 && checked > 0,
        format!("{checked} outputs, max abs err {worst:.2e} (tol 1e-12)"),
    );
}

#[test]
fn c03_raw_output_is_affine_in_lambda() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n_genes = rng.random_range(1..=500);
        let d = rng.random_range(1..=64);
        let mut head = random_head(&mut rng, n_genes, d, 0.0);
        let w = Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0));
        let mut at = |lambda: f64| {
            head.lambda = lambda;
            head.raw(w.view()).unwrap()
        };
        let (r0, r5, r1) = (at(0.0), at(0.5), at(1.0));
        for i in 0..n_genes {
            worst = worst.max((r5[i] - 0.5 * (r0[i] + r1[i])).abs());
        }
    }
    verdict(
        3,
        "raw(0.5) = (raw(0)+raw(1))/2",
        worst <= 1e-12,
        format!("100 instances, max abs err {worst:.2e} (tol 1e-12)"),
    );
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[test]
fn c04_gradients_match_central_differences() {
    let _g = serial();
    let start = Instant::now();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0_f64;
    let mut n_checked = 0usize;
    for inst in 0..20 {
        let n_genes = rng.random_range(2..12);
        let d = rng.random_range(1..6);
        let p_dim = rng.random_range(1..6);
        let hidden = rng.random_range(1..8);
        let n = rng.random_range(1..6);
        let lambda = rng.random_range(0.0..1.0);
        let head = random_head(&mut rng, n_genes, d, lambda);
        let enc = MlpEncoder::init_random(p_dim, hidden, d, inst).unwrap();
        let sets: Vec<Array2<f64>> = (0..n)
            .map(|_| {
                let n_patches = rng.random_range(1..4);
                uniform(&mut rng, n_patches, p_dim, -1.0, 1.0)
            })
            .collect();
        let y = uniform(&mut rng, n, n_genes, -1.0, 1.0);

        let forward = |head: &PkLinearHead, enc: &MlpEncoder| {
            let traces: Vec<_> = sets.iter().map(|s| enc.trace(s.view()).unwrap()).collect();
            let mut w = Array2::zeros((n, d));
            for (mut row, t) in w.rows_mut().into_iter().zip(&traces) {
                row.assign(&t.out);
            }
            let hg = head.grad(w.view(), y.view()).unwrap();
            let eg = enc.backward(&traces, hg.dw.view());
            (hg, eg)
        };
        let loss = |head: &PkLinearHead, enc: &MlpEncoder| forward(head, enc).0.loss;
        let (hg, eg) = forward(&head, &enc);
        let mut check = |analytic: f64, nudge: &dyn Fn(&mut PkLinearHead, &mut MlpEncoder, f64)| {
            let (mut hp, mut ep) = (head.clone(), enc.clone());
            nudge(&mut hp, &mut ep, h);
            let (mut hm, mut em) = (head.clone(), enc.clone());
            nudge(&mut hm, &mut em, -h);
            let numeric = (loss(&hp, &ep) - loss(&hm, &em)) / (2.0 * h);
            worst = worst.max(rel_err(analytic, numeric));
            n_checked += 1;
        };
        for idx in ndarray::indices(head.a.raw_dim()) {
            check(hg.da[idx], &|hd, _, s| hd.a[idx] += s);
        }
        for i in 0..n_genes {
            check(hg.db[i], &|hd, _, s| hd.b[i] += s);
        }
        for idx in ndarray::indices(enc.w1.raw_dim()) {
            check(eg.dw1[idx], &|_, e, s| e.w1[idx] += s);
        }
        for i in 0..hidden {
            check(eg.db1[i], &|_, e, s| e.b1[i] += s);
        }
        for idx in ndarray::indices(enc.w2.raw_dim()) {
            check(eg.dw2[idx], &|_, e, s| e.w2[idx] += s);
        }
        for i in 0..d {
            check(eg.db2[i], &|_, e, s| e.b2[i] += s);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "analytic gradients vs central differences",
        worst < 1e-4 && secs < 30.0,
        format!("20 instances, {n_checked} partials, max rel err {worst:.2e} (tol 1e-4), {secs:.2}s (limit 30s)"),
    );
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SparseMatrix {
    let mut t = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                t.push((i, j, 1.0));
                t.push((j, i, 1.0));
            }
        }
    }
    SparseMatrix::from_triplets(n, t).unwrap()
}

/// `d` disjoint all-ones blocks: exactly rank `d` with a nonnegative factorization.
fn block_construction(d: usize, block: usize) -> SparseMatrix {
    let mut t = Vec::new();
    for b in 0..d {
        for i in 0..block {
            for j in 0..block {
                t.push((b * block + i, b * block + j, 1.0));
            }
        }
    }
    SparseMatrix::from_triplets(d * block, t).unwrap()
}

#[test]
fn c05_nmf_is_monotone_and_exact_on_rank_d() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut violations = 0usize;
    let mut steps = 0usize;
    for seed in 0..50 {
        let m = random_symmetric(&mut rng, 200, 0.05);
        let opts = NmfOptions { max_iter: 500, tol: 0.0, seed };
        let (g, y, trace) = factorize_matrix(&m, 16, &opts).unwrap();
        assert!(g.iter().chain(y.iter()).all(|v| *v >= 0.0));
        for pair in trace.windows(2) {
            steps += 1;
            if pair[1] > pair[0] + 1e-9 * (1.0 + pair[0]) {
                violations += 1;
            }
        }
    }
    let mut exact = 0usize;
    let mut finals = Vec::new();
    for seed in 0..10 {
        let m = block_construction(16, 10);
        let opts = NmfOptions { max_iter: 500, tol: 0.0, seed };
        let (_, _, trace) = factorize_matrix(&m, 16, &opts).unwrap();
        let last = *trace.last().unwrap();
        exact += usize::from(last < 1e-6);
        finals.push(format!("{last:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "NMF monotone on 50 random 200x200 (d=16), exact on rank-16 blocks",
        violations == 0 && exact == 10 && secs < 120.0,
        format!(
            "{violations}/{steps} increasing steps; {exact}/10 rank-16 constructions below 1e-6 \
             (final losses {finals:?}); {secs:.1}s (limit 120s)"
        ),
    );
}

/// Expression with grouped latent factors so pairs spread across the threshold.
fn grouped_expression(seed: u64, n_genes: usize, n_samples: usize, groups: usize) -> ExpressionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = uniform(&mut rng, n_samples, groups, -1.0, 1.0);
    let noise: Vec<f64> = (0..n_genes).map(|_| rng.random_range(0.05..0.6)).collect();
    let values = Array2::from_shape_fn((n_samples, n_genes), |(s, g)| {
        10.0 + factors[[s, g % groups]] + noise[g] * rng.random_range(-1.0..1.0)
    });
    ExpressionMatrix::new(
        (0..n_samples).map(|s| format!("S{s}")).collect(),
        (0..n_samples).map(|s| format!("P{s}")).collect(),
        ids(n_genes),
        values,
    )
    .unwrap()
}

/// Textbook two-pass Pearson correlation.
fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn c06_blocked_graph_matches_all_pairs_oracle() {
    let _g = serial();
    let tau = 0.85;
    let mut edges_total = 0usize;
    let mut mismatched = 0usize;
    let mut worst_w = 0.0_f64;
    let mut variants_differ = 0usize;
    for seed in 0..10 {
        let expr = grouped_expression(seed, 300, 50, 12);
        let profiles: Vec<Vec<f64>> = (0..300).map(|g| expr.profile(g).to_vec()).collect();
        let mut oracle = std::collections::BTreeMap::new();
        for a in 0..300 {
            for b in a + 1..300 {
                let r = naive_pearson(&profiles[a], &profiles[b]);
                if r > tau {
                    oracle.insert((expr.gene_ids()[a].clone(), expr.gene_ids()[b].clone()), r);
                }
            }
        }
        let g = build_graph(&expr, &GraphOptions::with_tau(tau)).unwrap();
        let got: std::collections::BTreeMap<(String, String), f64> = g
            .named_edges()
            .zip(g.weights().unwrap())
            .map(|((a, b), w)| ((a.to_string(), b.to_string()), *w))
            .collect();
        edges_total += oracle.len();
        if got.keys().ne(oracle.keys()) {
            mismatched += 1;
        }
        for (k, w) in &got {
            if let Some(r) = oracle.get(k) {
                worst_w = worst_w.max((w - r).abs());
            }
        }
        for block in [1, 7, 64, 300, 1000] {
            for threads in [1, 2, 4] {
                let opts = GraphOptions { block, ..GraphOptions::with_tau(tau) };
                if in_pool(threads, || build_graph(&expr, &opts).unwrap()) != g {
                    variants_differ += 1;
                }
            }
        }
    }
    verdict(
        6,
        "blocked graph equals naive all-pairs oracle",
        mismatched == 0 && worst_w <= 1e-10 && variants_differ == 0 && edges_total > 0,
        format!(
            "10 seeds x 300 genes x 50 samples, {edges_total} oracle edges, {mismatched} edge-set mismatches, \
             max weight diff {worst_w:.2e} (tol 1e-10), {variants_differ} block/thread variants differing"
        ),
    );
}

#[test]
fn c07_graph_construction_scales() {
    let _g = serial();
    let expr = grouped_expression(7, 5000, 1000, 500);
    let start = Instant::now();
    let g = in_pool(1, || build_graph(&expr, &GraphOptions::with_tau(0.85)).unwrap());
    let secs = start.elapsed().as_secs_f64();
    drop(expr);

    let big = grouped_expression(8, 25_761, 100, 2000);
    let before = CURRENT.load(Ordering::Relaxed);
    PEAK.store(before, Ordering::Relaxed);
    let big_graph = build_graph(&big, &GraphOptions::with_tau(0.85)).unwrap();
    let peak = PEAK.load(Ordering::Relaxed);
    let gib = peak as f64 / (1u64 << 30) as f64;
    verdict(
        7,
        "graph construction time and memory",
        secs < 60.0 && gib < 4.0,
        format!(
            "5000x1000 on 1 thread: {secs:.1}s (limit 60s, {} edges); 25,761 genes x 100 samples: \
             peak heap {gib:.3} GiB (limit 4 GiB, {:.3} GiB over the input, {} edges)",
            g.n_edges(),
            (peak - before) as f64 / (1u64 << 30) as f64,
            big_graph.n_edges()
        ),
    );
}

fn cliques(n_cliques: usize, size: usize) -> (CoexpressionGraph, Vec<String>) {
    let genes = ids(n_cliques * size);
    let mut edges = Vec::new();
    for c in 0..n_cliques {
        for i in 0..size {
            for j in i + 1..size {
                edges.push((genes[c * size + i].clone(), genes[c * size + j].clone(), None));
            }
        }
    }
    (CoexpressionGraph::from_named_edges(genes.clone(), edges).unwrap(), genes)
}

/// Dense full-sort neighborhood preservation, cosine on adjacency rows and
/// Euclidean on embeddings, ties by index after quantization.
fn naive_np(adj: &Array2<f64>, emb: &Array2<f64>, k: usize) -> Vec<f64> {
    let pool: Vec<usize> = (0..adj.nrows()).filter(|&i| adj.row(i).sum() > 0.0).collect();
    let top = |scores: Vec<(f64, usize)>| {
        let scale = scores.iter().fold(0.0_f64, |m, (s, _)| m.max(s.abs()));
        let res = RANK_RESOLUTION * scale;
        let mut keyed: Vec<(i64, usize)> = scores
            .into_iter()
            .map(|(s, j)| (if res > 0.0 { (s / res).round() as i64 } else { 0 }, j))
            .collect();
        keyed.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().take(k).map(|e| e.1).collect::<Vec<_>>()
    };
    pool.iter()
        .map(|&i| {
            let others: Vec<usize> = pool.iter().copied().filter(|&j| j != i).collect();
            let hd = top(others
                .iter()
                .map(|&j| {
                    let dot = adj.row(i).dot(&adj.row(j));
                    (dot / (adj.row(i).dot(&adj.row(i)) * adj.row(j).dot(&adj.row(j))).sqrt(), j)
                })
                .collect());
            let ld = top(others
                .iter()
                .map(|&j| {
                    let d2: f64 = emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-d2.sqrt(), j)
                })
                .collect());
            hd.iter().filter(|j| ld.contains(j)).count() as f64 / k as f64
        })
        .collect()
}

#[test]
fn c08_neighborhood_preservation() {
    let _g = serial();
    let (graph, genes) = cliques(10, 20);
    let adj = adjacency_from_graph(&graph, &genes);
    let mut scores: Vec<f64> = (0..5)
        .map(|seed| {
            let emb = factorize(&adj, 10, &NmfOptions { seed, ..NmfOptions::default() }).unwrap();
            np_score(&adj, &emb, 10).unwrap().np_score
        })
        .collect();
    let shown = scores.clone();
    scores.sort_by(f64::total_cmp);
    let median = scores[2];

    let identity = GeneEmbeddings::from_matrix(genes.clone(), adj.matrix().to_dense()).unwrap();
    let np_clique_identity = np_score(&adj, &identity, 10).unwrap().np_score;
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let random_names = ids(60);
    let random_edges = (0..60)
        .flat_map(|i| (i + 1..60).map(move |j| (i, j)))
        .filter(|_| rng.random_bool(0.1))
        .map(|(i, j)| (random_names[i].clone(), random_names[j].clone(), None))
        .collect();
    let random_graph = CoexpressionGraph::from_named_edges(random_names.clone(), random_edges).unwrap();
    let random_adj = adjacency_from_graph(&random_graph, &random_names);
    let random_identity =
        GeneEmbeddings::from_matrix(random_names.clone(), random_adj.matrix().to_dense()).unwrap();
    let cosine = NpOptions { high_dim: Metric::Cosine, low_dim: Metric::Cosine };
    let np_random_identity = np_score_with(&random_adj, &random_identity, 5, &cosine).unwrap().np_score;

    let mut oracle_mismatch = 0usize;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(20..=100);
        let names = ids(n);
        let edges = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|_| rng.random_bool(0.08))
            .map(|(i, j)| (names[i].clone(), names[j].clone(), None))
            .collect();
        let graph = CoexpressionGraph::from_named_edges(names.clone(), edges).unwrap();
        let adj = adjacency_from_graph(&graph, &names);
        let emb = factorize(&adj, 4, &NmfOptions { seed, ..NmfOptions::default() }).unwrap();
        let report = np_score(&adj, &emb, 5).unwrap();
        let oracle = naive_np(&adj.matrix().to_dense(), &emb.g, 5);
        let got: Vec<f64> = report.per_gene_overlap.iter().map(|(_, o)| *o).collect();
        oracle_mismatch += usize::from(got != oracle);
    }
    verdict(
        8,
        "neighborhood preservation",
        median >= 0.8 && np_clique_identity == 1.0 && np_random_identity == 1.0 && oracle_mismatch == 0,
        format!(
            "10x20 cliques d=10 NP(10) per seed {shown:.3?}, median {median:.3} (min 0.8); \
             adjacency as embedding: NP {np_clique_identity} on cliques, {np_random_identity} on a random graph; \
             {oracle_mismatch}/10 naive-oracle mismatches"
        ),
    );
}

/// O(m²) step-up definition: q_i = min over ranks ≥ rank(i) of m·p/rank, capped at 1.
fn brute_force_bh(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let rank = |i: usize| (0..m).filter(|&j| p[j] < p[i] || (p[j] == p[i] && j <= i)).count();
    (0..m)
        .map(|i| {
            let ri = rank(i);
            (0..m)
                .filter(|&j| rank(j) >= ri)
                .map(|j| m as f64 * p[j] / rank(j) as f64)
                .fold(1.0_f64, f64::min)
        })
        .collect()
}

#[test]
fn c09_bh_matches_brute_force() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst = 0.0_f64;
    for v in 0..1000 {
        let m = rng.random_range(1..=if v % 50 == 0 { 500 } else { 60 });
        let coarse = rng.random_bool(0.3);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..=1.0);
                if coarse { (x * 20.0).round() / 20.0 } else { x.powi(3) }
            })
            .collect();
        let q = bh_adjust(&p).unwrap();
        for (a, b) in q.iter().zip(brute_force_bh(&p)) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        9,
        "BH equals brute-force definition",
        worst <= 1e-15,
        format!("1000 vectors (m up to 500, with ties), max abs diff {worst:.2e} (tol 1e-15)"),
    );
}

fn experiment_config(paths: &pkexpr::synth::SynthPaths, out: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        output_dir: out.to_path_buf(),
        seed,
        ..ExperimentConfig::default()
    };
    cfg.data.expression = paths.expression.clone();
    cfg.data.embeddings = Some(paths.embeddings.clone());
    cfg.data.patches = Some(paths.patches.clone());
    cfg.data.external_graph = Some(paths.true_graph.clone());
    cfg
}

fn median(mut xs: Vec<usize>) -> usize {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

#[test]
fn c10_noise_targets_are_rarely_significant() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let mut no_pk = Vec::new();
    let mut best = Vec::new();
    let mut n_genes = 0;
    for seed in 0..5u64 {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        n_genes = cfg.n_genes;
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tmp.path().join(format!("noise{seed}"));
        let paths = save_dataset(&ds, &cfg, &dir).unwrap();
        // embeddings from an unrelated draw carry no information about expression
        let unrelated = generate_dataset(&SynthConfig { seed: seed + 1000, ..cfg.clone() }).unwrap();
        save_embedding_table(&unrelated.embeddings, &paths.embeddings).unwrap();
        let mut exp = experiment_config(&paths, &dir.join("run"), seed);
        exp.data.patches = None;
        exp.data.external_graph = None;
        let res = run_experiment(&exp).unwrap();
        no_pk.push(res.rows[0].no_pk.n_significant);
        best.push(res.rows[0].best().n_significant);
    }
    let limit = n_genes / 20;
    let (m0, mb) = (median(no_pk.clone()), median(best.clone()));
    verdict(
        10,
        "significance calibration on pure noise",
        m0 <= limit && mb <= limit,
        format!(
            "n_significant per seed: lambda=0 {no_pk:?}, best lambda {best:?}; medians {m0} / {mb} \
             (limit {limit} = 5% of {n_genes})"
        ),
    );
}

fn claim_run(tmp: &Path, seed: u64, embedding_noise: f64) -> (usize, usize, Vec<usize>) {
    let cfg = SynthConfig {
        seed,
        expression_noise: 1.0,
        embedding_noise,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let dir = tmp.join(format!("claim_w{embedding_noise}_s{seed}"));
    let paths = save_dataset(&ds, &cfg, &dir).unwrap();
    let mut exp = experiment_config(&paths, &dir.join("run"), seed);
    exp.data.embeddings = None;
    exp.sources = vec![PkSource::External];
    exp.models = vec![ModelKind::Mlp];
    exp.train = TrainConfig { learning_rate: 3e-3, ..TrainConfig::default() };
    let res = run_experiment(&exp).unwrap();
    let row = &res.rows[0];
    let grid = row.grid.iter().map(|s| s.n_significant).collect();
    (row.no_pk.n_significant, row.best().n_significant, grid)
}

#[test]
fn c11_prior_knowledge_helps_on_synthetic_modules() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut moderate = (Vec::new(), Vec::new());
    let mut strict_gains = 0usize;
    for (regime, noise) in [("moderate", 1.0), ("information-poor", 2.0)] {
        for seed in 0..5 {
            let (zero, best, grid) = claim_run(tmp.path(), seed, noise);
            lines.push(format!("{regime} seed {seed}: lambda=0 {zero}, grid {grid:?}, best {best}"));
            if regime == "moderate" {
                moderate.0.push(zero);
                moderate.1.push(best);
            } else if best > zero {
                strict_gains += 1;
            }
        }
    }
    for l in &lines {
        println!("    {l}");
    }
    let (m0, mb) = (median(moderate.0), median(moderate.1));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        11,
        "best lambda beats lambda=0 on synthetic modules",
        mb >= m0 && strict_gains >= 4 && secs < 900.0,
        format!(
            "moderate median best {mb} vs lambda=0 {m0}; information-poor strict gains {strict_gains}/5 (need 4); \
             {secs:.0}s (limit 900s)"
        ),
    );
}

fn small_cfg() -> SynthConfig {
    SynthConfig {
        n_patients: 50,
        n_genes: 80,
        n_modules: 3,
        genes_per_module: 10,
        latent_dim: 4,
        embed_dim: 6,
        patches_per_sample: 3,
        seed: 21,
        ..SynthConfig::default()
    }
}

fn small_experiment(dir: &Path, out: &str) -> ExperimentConfig {
    let cfg = small_cfg();
    let ds = generate_dataset(&cfg).unwrap();
    let paths = save_dataset(&ds, &cfg, dir.join("data")).unwrap();
    let mut exp = experiment_config(&paths, &dir.join(out), 13);
    exp.sources = vec![PkSource::Internal, PkSource::External, PkSource::Combined];
    exp.models = vec![ModelKind::Linear, ModelKind::Mlp];
    exp.lambda_grid = vec![0.2, 0.8];
    exp.tau = 0.6;
    exp.model.hidden_dim = 8;
    exp.train = TrainConfig { learning_rate: 0.01, max_epochs: 15, patience: 4, ..TrainConfig::default() };
    exp
}

fn train_val_graph(expr: &ExpressionMatrix, folds: &FoldSpec, f: usize, tau: f64) -> CoexpressionGraph {
    let rows = folds.fold(f).sample_rows(expr.patient_ids(), &[Split::Train, Split::Val]);
    build_graph(&expr.select_samples(&rows).unwrap(), &GraphOptions::with_tau(tau)).unwrap()
}

#[test]
fn c12_fold_graphs_use_only_train_and_validation_rows() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let exp = small_experiment(tmp.path(), "leak");
    let res: ExperimentResult = run_experiment(&exp).unwrap();
    let expr = pkexpr::dataio::load_expression_matrix(&exp.data.expression).unwrap();
    let mut bad = Vec::new();
    let mut edges = Vec::new();
    for f in 0..res.folds.n_folds {
        let used = res.internal_graphs[f].as_ref().unwrap();
        let saved = load_graph_edgelist(res.output_dir.join(format!("fold{f}/internal_graph.tsv"))).unwrap();
        let recomputed = train_val_graph(&expr, &res.folds, f, exp.tau);
        // scrambling every test-patient row must not move the fold graph
        let test_rows = res.folds.fold(f).sample_rows(expr.patient_ids(), &[Split::Test]);
        let mut values = expr.values().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(f as u64);
        for &r in &test_rows {
            values.row_mut(r).mapv_inplace(|_| rng.random_range(0.0..20.0));
        }
        let scrambled = ExpressionMatrix::new(
            expr.sample_ids().to_vec(),
            expr.patient_ids().to_vec(),
            expr.gene_ids().to_vec(),
            values,
        )
        .unwrap();
        let after = fold_internal_graph(&scrambled, &res.folds, f, exp.tau).unwrap();
        if *used != recomputed || saved != recomputed || after != recomputed {
            bad.push(f);
        }
        edges.push(used.n_edges());
    }
    verdict(
        12,
        "fold graph is a function of train+val rows only",
        bad.is_empty() && edges.iter().any(|e| *e > 0),
        format!("{} folds, edges per fold {edges:?}, mismatching folds {bad:?}", res.folds.n_folds),
    );
}

fn output_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = vec![dir.join("summary.tsv"), dir.join("summary_long.tsv")];
    let mut reports: Vec<PathBuf> = std::fs::read_dir(dir.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    reports.sort();
    files.extend(reports);
    files
}

#[test]
fn c13_runs_are_bitwise_reproducible() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let first = small_experiment(tmp.path(), "first");
    let second = ExperimentConfig { output_dir: tmp.path().join("second"), ..first.clone() };
    run_experiment(&first).unwrap();
    in_pool(1, || run_experiment(&second).unwrap());
    let a = output_files(&first.output_dir);
    let b = output_files(&second.output_dir);
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap())
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    verdict(
        13,
        "identical config and seeds give identical summaries",
        a.len() == b.len() && differing.is_empty(),
        format!(
            "{} summary/report files compared across a default pool and a 1-thread pool, differing: {differing:?}",
            a.len()
        ),
    );
}
