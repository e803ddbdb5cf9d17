//! Loading, validation and persistence of the toolkit's on-disk artifacts.
//!
//! Text formats are TAB separated UTF-8. Dense matrices use the little-endian
//! `PKMX` container: 4 magic bytes, a `u16` version, `u64` rows, `u64` cols and
//! then `rows * cols` row-major `f64` values. Identifier lists that belong to a
//! matrix live next to it in a `<file>.ids` sidecar with one id per line.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coexpr::CoexpressionGraph;
use crate::error::{ensure, Error, Result};

pub const PKMX_MAGIC: &[u8; 4] = b"PKMX";
pub const PKMX_VERSION: u16 = 1;
const PKMX_HEADER_LEN: usize = 4 + 2 + 8 + 8;

/// Samples × genes matrix of nonnegative expression values.
///
/// Values are opaque: callers are expected to normalize (log-TPM or similar)
/// before handing data to the toolkit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    sample_ids: Vec<String>,
    patient_ids: Vec<String>,
    gene_ids: Vec<String>,
    values: Array2<f64>,
}

impl ExpressionMatrix {
    pub fn new(
        sample_ids: Vec<String>,
        patient_ids: Vec<String>,
        gene_ids: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self> {
        ensure!(
            values.nrows() == sample_ids.len(),
            Validation,
            "{} rows but {} sample ids",
            values.nrows(),
            sample_ids.len()
        );
        ensure!(
            patient_ids.len() == sample_ids.len(),
            Validation,
            "{} patient ids for {} samples",
            patient_ids.len(),
            sample_ids.len()
        );
        ensure!(
            values.ncols() == gene_ids.len(),
            Validation,
            "{} columns but {} gene ids",
            values.ncols(),
            gene_ids.len()
        );
        if let Some(dup) = first_duplicate(&gene_ids) {
            return Err(Error::Validation(format!("duplicate gene id {dup:?}")));
        }
        if let Some(dup) = first_duplicate(&sample_ids) {
            return Err(Error::Validation(format!("duplicate sample id {dup:?}")));
        }
        if let Some(((r, c), v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Validation(format!(
                "value {v} at sample {:?}, gene {:?} is not a finite nonnegative number",
                sample_ids[r], gene_ids[c]
            )));
        }
        Ok(Self {
            sample_ids,
            patient_ids,
            gene_ids,
            values,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    /// Expression profile of one gene across all samples.
    pub fn profile(&self, gene: usize) -> ArrayView1<'_, f64> {
        self.values.column(gene)
    }

    /// Restricts the matrix to the given sample rows, in the given order.
    pub fn select_samples(&self, rows: &[usize]) -> Result<Self> {
        ensure!(
            rows.iter().all(|&r| r < self.n_samples()),
            InvalidArgument,
            "sample row out of range (matrix has {} samples)",
            self.n_samples()
        );
        Ok(Self {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            patient_ids: rows.iter().map(|&r| self.patient_ids[r].clone()).collect(),
            gene_ids: self.gene_ids.clone(),
            values: self.values.select(Axis(0), rows),
        })
    }
}

/// One embedding vector per sample (the slide embedding `w`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    sample_ids: Vec<String>,
    vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(sample_ids: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        ensure!(
            vectors.nrows() == sample_ids.len(),
            Validation,
            "{} vectors for {} sample ids",
            vectors.nrows(),
            sample_ids.len()
        );
        ensure!(vectors.ncols() >= 1, Validation, "embedding dimension must be positive");
        if let Some(dup) = first_duplicate(&sample_ids) {
            return Err(Error::Validation(format!("duplicate sample id {dup:?}")));
        }
        ensure!(
            vectors.iter().all(|v| v.is_finite()),
            Validation,
            "embedding table contains non-finite values"
        );
        Ok(Self {
            sample_ids,
            vectors,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Rows of `self` reordered to follow `sample_ids`.
    pub fn aligned_to(&self, sample_ids: &[String]) -> Result<Array2<f64>> {
        let index: BTreeMap<&str, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let rows = sample_ids
            .iter()
            .map(|s| {
                index
                    .get(s.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("no embedding for sample {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.vectors.select(Axis(0), &rows))
    }
}

/// Patch embeddings sampled from one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub sample_id: String,
    pub patches: Array2<f64>,
}

impl PatchSet {
    pub fn new(sample_id: String, patches: Array2<f64>) -> Result<Self> {
        ensure!(
            patches.nrows() >= 1,
            Validation,
            "sample {sample_id:?} has no patches"
        );
        ensure!(
            patches.iter().all(|v| v.is_finite()),
            Validation,
            "sample {sample_id:?} has non-finite patch values"
        );
        Ok(Self { sample_id, patches })
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }
}

fn first_duplicate(ids: &[String]) -> Option<&str> {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().find(|id| !seen.insert(id.as_str())).map(|s| s.as_str())
}

// ---------------------------------------------------------------------------
// Expression TSV

pub fn load_expression_matrix(path: impl AsRef<Path>) -> Result<ExpressionMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_expression_matrix(BufReader::new(file), path)
}

pub fn read_expression_matrix(reader: impl BufRead, path: &Path) -> Result<ExpressionMatrix> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, Ok(l))) if l.trim().is_empty() => continue,
            Some((n, Ok(l))) => break (n + 1, l),
            Some((n, Err(e))) => return Err(Error::parse(path, n + 1, e.to_string())),
            None => return Err(Error::parse(path, 1, "empty file, expected a header row")),
        }
    };
    let columns: Vec<&str> = header.1.trim_end_matches('\r').split('\t').collect();
    if columns.len() < 2 || columns[0] != "sample_id" || columns[1] != "patient_id" {
        return Err(Error::parse(
            path,
            header.0,
            "header must start with sample_id<TAB>patient_id",
        ));
    }
    let gene_ids: Vec<String> = columns[2..].iter().map(|s| s.to_string()).collect();
    let n_genes = gene_ids.len();

    let mut sample_ids = Vec::new();
    let mut patient_ids = Vec::new();
    let mut flat = Vec::new();
    for (n, line) in lines {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n_genes + 2 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} fields, found {}", n_genes + 2, fields.len()),
            ));
        }
        sample_ids.push(fields[0].to_string());
        patient_ids.push(fields[1].to_string());
        for (field, gene) in fields[2..].iter().zip(&gene_ids) {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(path, lineno, format!("gene {gene:?}: cannot parse {field:?}"))
            })?;
            flat.push(v);
        }
    }
    let values = Array2::from_shape_vec((sample_ids.len(), n_genes), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    ExpressionMatrix::new(sample_ids, patient_ids, gene_ids, values)
}

pub fn save_expression_matrix(expr: &ExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_with(path, |w| {
        write!(w, "sample_id\tpatient_id")?;
        for g in expr.gene_ids() {
            write!(w, "\t{g}")?;
        }
        writeln!(w)?;
        for (r, row) in expr.values().rows().into_iter().enumerate() {
            write!(w, "{}\t{}", expr.sample_ids[r], expr.patient_ids[r])?;
            for v in row {
                // `Display` for f64 is the shortest string that round-trips.
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Edge lists

pub fn load_graph_edgelist(path: impl AsRef<Path>) -> Result<CoexpressionGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_graph_edgelist(BufReader::new(file), path)
}

/// Parses `gene_a<TAB>gene_b[<TAB>correlation]` lines. Either every edge line
/// carries a weight or none does.
pub fn read_graph_edgelist(reader: impl BufRead, path: &Path) -> Result<CoexpressionGraph> {
    let mut genes = BTreeSet::new();
    let mut pairs = Vec::new();
    let mut weighted: Option<bool> = None;
    let mut threshold = None;
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(name) = rest.trim().strip_prefix("node\t") {
                // isolated nodes are recorded as comments so they survive a round trip
                genes.insert(name.trim().to_string());
            } else if let Some(tau) = rest.trim().strip_prefix("threshold\t") {
                let tau = tau.trim().parse::<f64>().map_err(|_| {
                    Error::parse(path, lineno, format!("cannot parse threshold {tau:?}"))
                })?;
                threshold = Some(tau);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let weight = match fields.len() {
            2 => None,
            3 => Some(fields[2].parse::<f64>().map_err(|_| {
                Error::parse(path, lineno, format!("cannot parse weight {:?}", fields[2]))
            })?),
            k => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected 2 or 3 tab-separated fields, found {k}"),
                ))
            }
        };
        if let Some(w) = weight {
            if !w.is_finite() || w.abs() > 1.0 {
                return Err(Error::parse(path, lineno, format!("weight {w} outside [-1, 1]")));
            }
        }
        match weighted {
            None => weighted = Some(weight.is_some()),
            Some(flag) if flag != weight.is_some() => {
                return Err(Error::parse(path, lineno, "mixed weighted and unweighted edges"))
            }
            _ => {}
        }
        let (a, b) = (fields[0].trim(), fields[1].trim());
        if a.is_empty() || b.is_empty() {
            return Err(Error::parse(path, lineno, "empty gene id"));
        }
        if a == b {
            return Err(Error::parse(path, lineno, format!("self-loop on {a:?}")));
        }
        genes.insert(a.to_string());
        genes.insert(b.to_string());
        pairs.push((a.to_string(), b.to_string(), weight));
    }
    Ok(CoexpressionGraph::from_named_edges(genes, pairs)?.with_threshold(threshold))
}

pub fn save_graph_edgelist(graph: &CoexpressionGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_with(path, |w| write_graph_edgelist(graph, w))
}

pub fn write_graph_edgelist(graph: &CoexpressionGraph, w: &mut impl Write) -> std::io::Result<()> {
    let genes = graph.gene_ids();
    writeln!(w, "# gene_a\tgene_b{}", if graph.weights().is_some() { "\tcorrelation" } else { "" })?;
    if let Some(tau) = graph.threshold() {
        writeln!(w, "# threshold\t{tau}")?;
    }
    let degree = graph.degrees();
    for (g, _) in genes.iter().zip(&degree).filter(|(_, &d)| d == 0) {
        writeln!(w, "# node\t{g}")?;
    }
    for (k, &(i, j)) in graph.edges().iter().enumerate() {
        match graph.weights() {
            Some(ws) => writeln!(w, "{}\t{}\t{}", genes[i as usize], genes[j as usize], ws[k])?,
            None => writeln!(w, "{}\t{}", genes[i as usize], genes[j as usize])?,
        }
    }
    Ok(())
}

/// Subgraph induced on the genes of `graph` that also appear in `genes`.
pub fn align_gene_universe(graph: &CoexpressionGraph, genes: &[String]) -> CoexpressionGraph {
    let universe: HashSet<&str> = genes.iter().map(|s| s.as_str()).collect();
    graph.induced(|g| universe.contains(g))
}

// ---------------------------------------------------------------------------
// PKMX matrices

pub fn encode_pkmx(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(PKMX_HEADER_LEN + 8 * m.len());
    out.extend_from_slice(PKMX_MAGIC);
    out.extend_from_slice(&PKMX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pkmx(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let bad = |msg: String| Error::parse(path, 0, msg);
    if bytes.len() < PKMX_HEADER_LEN || &bytes[..4] != PKMX_MAGIC {
        return Err(bad("missing PKMX magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PKMX_VERSION {
        return Err(bad(format!("unsupported PKMX version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| bad("matrix dimensions overflow".into()))?;
    let body = &bytes[PKMX_HEADER_LEN..];
    if body.len() != expected {
        return Err(bad(format!(
            "{rows}x{cols} matrix needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_pkmx(m: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pkmx(m)).map_err(|e| Error::io(path, e))
}

pub fn read_pkmx(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_pkmx(&bytes, path)
}

/// `<path>.ids`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn write_ids(ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_with(path, |w| {
        for id in ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    })
}

pub fn read_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Writes a matrix together with its row identifiers.
pub fn save_labeled_matrix(ids: &[String], m: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure!(
        ids.len() == m.nrows(),
        Shape,
        "{} ids for {} matrix rows",
        ids.len(),
        m.nrows()
    );
    write_pkmx(m, path)?;
    write_ids(ids, sidecar_path(path))
}

pub fn load_labeled_matrix(path: impl AsRef<Path>) -> Result<(Vec<String>, Array2<f64>)> {
    let path = path.as_ref();
    let m = read_pkmx(path)?;
    let ids = read_ids(sidecar_path(path))?;
    ensure!(
        ids.len() == m.nrows(),
        Validation,
        "{}: {} ids for {} rows",
        path.display(),
        ids.len(),
        m.nrows()
    );
    Ok((ids, m))
}

pub fn save_embedding_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    save_labeled_matrix(table.sample_ids(), table.vectors(), path)
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let (ids, m) = load_labeled_matrix(path)?;
    EmbeddingTable::new(ids, m)
}

/// Patch sets are stored stacked in one PKMX file; the sidecar lists
/// `sample_id<TAB>n_patches` in stacking order.
pub fn save_patch_sets(sets: &[PatchSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = sets.first().map_or(0, PatchSet::dim);
    ensure!(
        sets.iter().all(|s| s.dim() == dim),
        Validation,
        "inconsistent patch dimensions"
    );
    let total: usize = sets.iter().map(|s| s.patches.nrows()).sum();
    let mut stacked = Array2::zeros((total, dim));
    let mut offset = 0;
    for s in sets {
        let n = s.patches.nrows();
        stacked
            .slice_mut(ndarray::s![offset..offset + n, ..])
            .assign(&s.patches);
        offset += n;
    }
    write_pkmx(&stacked, path)?;
    let side = sidecar_path(path);
    write_with(&side, |w| {
        for s in sets {
            writeln!(w, "{}\t{}", s.sample_id, s.patches.nrows())?;
        }
        Ok(())
    })
}

pub fn load_patch_sets(path: impl AsRef<Path>) -> Result<Vec<PatchSet>> {
    let path = path.as_ref();
    let stacked = read_pkmx(path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut sets = Vec::new();
    let mut offset = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, count) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&side, n + 1, "expected sample_id<TAB>count"))?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| Error::parse(&side, n + 1, format!("bad patch count {count:?}")))?;
        if offset + count > stacked.nrows() {
            return Err(Error::parse(&side, n + 1, "patch counts exceed stacked rows"));
        }
        let block = stacked.slice(ndarray::s![offset..offset + count, ..]).to_owned();
        sets.push(PatchSet::new(id.to_string(), block)?);
        offset += count;
    }
    ensure!(
        offset == stacked.nrows(),
        Validation,
        "{} stacked patches but sidecar accounts for {offset}",
        stacked.nrows()
    );
    Ok(sets)
}

// ---------------------------------------------------------------------------
// Folds

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldAssignment {
    pub fn split_of(&self, patient: &str) -> Option<Split> {
        let has = |v: &[String]| v.binary_search_by(|p| p.as_str().cmp(patient)).is_ok();
        if has(&self.train) {
            Some(Split::Train)
        } else if has(&self.val) {
            Some(Split::Val)
        } else if has(&self.test) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn patients(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Indices of samples whose patient falls in one of `splits`.
    pub fn sample_rows(&self, sample_patients: &[String], splits: &[Split]) -> Vec<usize> {
        sample_patients
            .iter()
            .enumerate()
            .filter(|(_, p)| self.split_of(p).is_some_and(|s| splits.contains(&s)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Patient-level cross-validation folds. Serialized as TOML:
///
/// ```text
/// seed = 42
/// n_folds = 5
///
/// [[fold]]
/// train = ["P001", ...]
/// val = [...]
/// test = [...]
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub seed: u64,
    pub n_folds: usize,
    #[serde(rename = "fold")]
    pub folds: Vec<FoldAssignment>,
}

impl FoldSpec {
    pub fn fold(&self, f: usize) -> &FoldAssignment {
        &self.folds[f]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.folds.len() == self.n_folds,
            Validation,
            "n_folds = {} but {} folds listed",
            self.n_folds,
            self.folds.len()
        );
        let mut universe: Option<BTreeSet<&str>> = None;
        let mut tested = BTreeSet::new();
        for (f, fold) in self.folds.iter().enumerate() {
            let mut members = BTreeSet::new();
            for p in fold.train.iter().chain(&fold.val).chain(&fold.test) {
                ensure!(
                    members.insert(p.as_str()),
                    Validation,
                    "patient {p:?} appears twice in fold {f}"
                );
            }
            for split in [&fold.train, &fold.val, &fold.test] {
                ensure!(
                    split.windows(2).all(|w| w[0] < w[1]),
                    Validation,
                    "fold {f} patient lists must be sorted"
                );
            }
            match &universe {
                None => universe = Some(members),
                Some(u) => ensure!(
                    *u == members,
                    Validation,
                    "fold {f} covers a different patient set"
                ),
            }
            for p in &fold.test {
                ensure!(
                    tested.insert(p.as_str()),
                    Validation,
                    "patient {p:?} is tested in more than one fold"
                );
            }
        }
        if let Some(u) = universe {
            ensure!(
                u == tested,
                Validation,
                "test splits do not cover every patient"
            );
        }
        Ok(())
    }
}

/// Split fractions as (train, val, test).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    /// Ratios must be nonnegative, sum to 1, and the test fraction must be
    /// `1 / n_folds` so that test splits partition the patients.
    pub fn validate(&self, n_folds: usize) -> Result<()> {
        ensure!(n_folds >= 2, InvalidArgument, "need at least 2 folds, got {n_folds}");
        let parts = [self.train, self.val, self.test];
        ensure!(
            parts.iter().all(|r| r.is_finite() && *r >= 0.0),
            InvalidArgument,
            "split ratios must be nonnegative"
        );
        ensure!(
            (parts.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            InvalidArgument,
            "split ratios sum to {}, expected 1",
            parts.iter().sum::<f64>()
        );
        ensure!(
            (self.test * n_folds as f64 - 1.0).abs() < 1e-6,
            InvalidArgument,
            "test fraction {} cannot partition patients over {n_folds} folds",
            self.test
        );
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.72,
            val: 0.08,
            test: 0.20,
        }
    }
}

/// Assigns patients to folds.
///
/// Patients are shuffled with `seed`, the shuffled order is cut into `n_folds`
/// contiguous test chunks and, for each fold, the `round(val * n)` patients
/// following its test chunk (cyclically) form the validation split. Because
/// test splits partition the patients, the test fraction must equal
/// `1 / n_folds`.
pub fn make_folds(
    patient_ids: &[String],
    n_folds: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<FoldSpec> {
    ratios.validate(n_folds)?;
    let unique: BTreeSet<&String> = patient_ids.iter().collect();
    let n = unique.len();
    ensure!(
        n >= n_folds,
        InvalidArgument,
        "{n} patients cannot fill {n_folds} folds"
    );
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_val = (ratios.val * n as f64).round() as usize;
    // chunk boundaries: sizes differ by at most one
    let bounds: Vec<usize> = (0..=n_folds).map(|f| f * n / n_folds).collect();
    let folds = (0..n_folds)
        .map(|f| {
            let (start, end) = (bounds[f], bounds[f + 1]);
            let n_val = n_val.min(n - (end - start));
            let mut test: Vec<String> = order[start..end].to_vec();
            let mut val: Vec<String> = (0..n_val).map(|k| order[(end + k) % n].clone()).collect();
            let taken: HashSet<&String> = test.iter().chain(&val).collect();
            let mut train: Vec<String> =
                order.iter().filter(|p| !taken.contains(p)).cloned().collect();
            train.sort();
            val.sort();
            test.sort();
            FoldAssignment { train, val, test }
        })
        .collect();
    let spec = FoldSpec {
        seed,
        n_folds,
        folds,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn save_fold_spec(spec: &FoldSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(spec).map_err(|e| Error::Validation(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_fold_spec(path: impl AsRef<Path>) -> Result<FoldSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: FoldSpec = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map_or(0, |s| text[..s.start].matches('\n').count() + 1);
        Error::parse(path, line, e.message().to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

pub(crate) fn write_with(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
