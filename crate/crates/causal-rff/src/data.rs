//! Source datasets, the synthetic benchmark generator, and CSV ingestion.
//!
//! The generator draws a five-category latent confounder `z ~ Cat(ρ)`
//! (one-hot), binary proxies `x_j ~ Bern(logistic(a_j0 + zᵀa_j1))`,
//! treatment `w ~ Bern(logistic(b_0 + zᵀb_1 + Δ))`, and potential
//! outcomes `y(0) ~ N(softplus(c_0 + zᵀc_1 + Δ), σ_0²)`,
//! `y(1) ~ N(softplus(d_0 + zᵀd_1 + Δ), σ_1²)`. The per-source scalar
//! `Δ` shifts the treatment and outcome links, producing sources whose
//! data distributions disagree by a controlled amount. The recorded
//! ground-truth effect per record is the difference of the noise-free
//! means. Only `(w, y, x)` plus a unit identifier are observed; the
//! potential outcomes stay in a sibling structure that never enters the
//! federation path.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::model::{logistic, softplus};
use crate::{Error, Real, Result};

/// One source's observed records.
///
/// `w` holds the binary treatment, `y` the outcome, `x` one covariate row
/// per record. `unit_ids`, when present, feed the dedup round; raw ids
/// never cross the federation boundary (only their digests do).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDataset {
    pub unit_ids: Option<Vec<String>>,
    pub w: Vec<u8>,
    pub y: Vec<Real>,
    pub x: Array2<Real>,
}

impl SourceDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != self.y.len() || self.x.nrows() != self.y.len() {
            return Err(Error::shape("dataset record count", self.y.len(), self.w.len().min(self.x.nrows())));
        }
        if let Some(ids) = &self.unit_ids {
            if ids.len() != self.y.len() {
                return Err(Error::shape("dataset unit ids", self.y.len(), ids.len()));
            }
        }
        if self.w.iter().any(|&w| w > 1) {
            return Err(Error::parameter("w", "non-binary", "treatment must be 0 or 1"));
        }
        Ok(())
    }

    /// Covariate row `i` as a slice.
    pub fn x_row(&self, i: usize) -> &[Real] {
        self.x.row(i).to_slice().expect("x stored row-major")
    }

    /// Clones the record range `[start, start + len)` into a new dataset.
    pub fn slice_rows(&self, start: usize, len: usize) -> SourceDataset {
        let end = (start + len).min(self.n());
        let start = start.min(end);
        SourceDataset {
            unit_ids: self
                .unit_ids
                .as_ref()
                .map(|ids| ids[start..end].to_vec()),
            w: self.w[start..end].to_vec(),
            y: self.y[start..end].to_vec(),
            x: self.x.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }

    /// Drops every record whose unit-id digest is in `excluded`; returns
    /// how many records were removed. Datasets without unit ids are
    /// untouched.
    pub fn drop_excluded(&mut self, excluded: &HashSet<[u8; 32]>) -> usize {
        let Some(ids) = &self.unit_ids else {
            return 0;
        };
        if excluded.is_empty() {
            return 0;
        }
        let keep: Vec<bool> = ids
            .iter()
            .map(|id| !excluded.contains(&crate::federation::unit_digest(id)))
            .collect();
        let dropped = keep.iter().filter(|k| !**k).count();
        if dropped == 0 {
            return 0;
        }
        let ids = ids.clone();
        let mut new_ids = Vec::with_capacity(self.n() - dropped);
        let mut new_w = Vec::with_capacity(self.n() - dropped);
        let mut new_y = Vec::with_capacity(self.n() - dropped);
        let mut new_x = Vec::with_capacity((self.n() - dropped) * self.d_x());
        for i in 0..self.n() {
            if keep[i] {
                new_ids.push(ids[i].clone());
                new_w.push(self.w[i]);
                new_y.push(self.y[i]);
                new_x.extend_from_slice(self.x_row(i));
            }
        }
        let d_x = self.d_x();
        self.unit_ids = Some(new_ids);
        self.w = new_w;
        self.y = new_y;
        self.x = Array2::from_shape_vec((self.y.len(), d_x), new_x).expect("row count");
        dropped
    }

    /// Errors unless every covariate cell is 0 or 1.
    pub fn validate_binary_covariates(&self) -> Result<()> {
        for (i, row) in self.x.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Ingestion {
                        row: i + 1,
                        column: format!("x_{}", j + 1),
                        reason: format!("expected a binary value, got {v}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Shared ground-truth parameters of one benchmark (identical across its
/// sources; only `Δ` varies per source).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthParams {
    /// Latent category probabilities; must sum to 1.
    pub rho: [Real; 5],
    /// Per-covariate intercepts, length `d_x`.
    pub a0: Array1<Real>,
    /// Per-covariate category loadings, `d_x × 5`.
    pub a1: Array2<Real>,
    pub b0: Real,
    pub b1: Array1<Real>,
    pub c0: Real,
    pub c1: Array1<Real>,
    pub d0: Real,
    pub d1: Array1<Real>,
    pub sigma0: Real,
    pub sigma1: Real,
}

/// Default latent category probabilities.
pub const DEFAULT_RHO: [Real; 5] = [0.11, 0.17, 0.34, 0.26, 0.12];
/// Default untreated-link intercept.
pub const DEFAULT_C0: Real = 0.9;
/// Default treated-link intercept.
pub const DEFAULT_D0: Real = 7.9;

impl GroundTruthParams {
    /// Draws coefficients i.i.d. `N(0, 2)` (variance 2) with the default
    /// `ρ`, `(c_0, d_0) = (0.9, 7.9)`, and unit outcome noise.
    pub fn draw(d_x: usize, seed: u64) -> Result<Self> {
        if d_x == 0 {
            return Err(Error::parameter("d_x", d_x, "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let law = Normal::new(0.0, (2.0 as Real).sqrt()).expect("positive std");
        let mut draw_vec = |len: usize| -> Array1<Real> {
            Array1::from_iter((0..len).map(|_| law.sample(&mut rng)))
        };
        let a0 = draw_vec(d_x);
        let a1_flat = draw_vec(d_x * 5);
        let b0 = draw_vec(1)[0];
        let b1 = draw_vec(5);
        let c1 = draw_vec(5);
        let d1 = draw_vec(5);
        Ok(GroundTruthParams {
            rho: DEFAULT_RHO,
            a0,
            a1: Array2::from_shape_vec((d_x, 5), a1_flat.to_vec()).expect("shape"),
            b0,
            b1,
            c0: DEFAULT_C0,
            c1,
            d0: DEFAULT_D0,
            d1,
            sigma0: 1.0,
            sigma1: 1.0,
        })
    }

    pub fn d_x(&self) -> usize {
        self.a0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let total: Real = self.rho.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.rho.iter().any(|&p| p < 0.0) {
            return Err(Error::parameter("rho", total, "must be a probability vector"));
        }
        if !(self.sigma0 > 0.0) || !(self.sigma1 > 0.0) {
            return Err(Error::parameter("sigma0/sigma1", self.sigma0.min(self.sigma1), "must be positive"));
        }
        if self.a1.dim() != (self.a0.len(), 5) {
            return Err(Error::shape("a1", self.a0.len() * 5, self.a1.len()));
        }
        Ok(())
    }
}

/// One generated source: observed records plus hidden per-record truth.
///
/// Consistency holds exactly: `observed.y[i]` equals `y0[i]` when
/// `w[i] = 0` and `y1[i]` when `w[i] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSource {
    pub observed: SourceDataset,
    pub y0: Vec<Real>,
    pub y1: Vec<Real>,
    pub true_cate: Vec<Real>,
    pub delta: Real,
}

/// Draws `n` records from the generator with source discrepancy `delta`.
///
/// Per record the draw order is fixed (latent category, covariates,
/// treatment, then both potential-outcome noises), so a seed pins the
/// dataset bit-for-bit. Unit ids are derived from the seed, which keeps
/// ids of sources seeded differently disjoint.
pub fn generate_source(
    gt: &GroundTruthParams,
    delta: Real,
    n: usize,
    seed: u64,
) -> Result<BenchmarkSource> {
    if n == 0 {
        return Err(Error::parameter("n", n, "must be at least 1"));
    }
    gt.validate()?;
    let d_x = gt.d_x();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("positive std");

    let mut cum = [0.0 as Real; 5];
    let mut acc = 0.0;
    for (k, &p) in gt.rho.iter().enumerate() {
        acc += p;
        cum[k] = acc;
    }

    let mut unit_ids = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n * d_x);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut true_cate = Vec::with_capacity(n);

    for i in 0..n {
        let u: Real = rng.random();
        let k = cum.iter().position(|&c| u < c).unwrap_or(4);

        for j in 0..d_x {
            let p = logistic(gt.a0[j] + gt.a1[(j, k)]);
            let u: Real = rng.random();
            x.push(if u < p { 1.0 } else { 0.0 });
        }

        let p_w = logistic(gt.b0 + gt.b1[k] + delta);
        let u: Real = rng.random();
        let w_i: u8 = if u < p_w { 1 } else { 0 };

        let mean0 = softplus(gt.c0 + gt.c1[k] + delta);
        let mean1 = softplus(gt.d0 + gt.d1[k] + delta);
        let y0_i = mean0 + gt.sigma0 * normal.sample(&mut rng);
        let y1_i = mean1 + gt.sigma1 * normal.sample(&mut rng);

        unit_ids.push(format!("u{seed:016x}-{i:06}"));
        w.push(w_i);
        y.push(if w_i == 1 { y1_i } else { y0_i });
        y0.push(y0_i);
        y1.push(y1_i);
        true_cate.push(mean1 - mean0);
    }

    Ok(BenchmarkSource {
        observed: SourceDataset {
            unit_ids: Some(unit_ids),
            w,
            y,
            x: Array2::from_shape_vec((n, d_x), x).expect("row count"),
        },
        y0,
        y1,
        true_cate,
        delta,
    })
}

/// Benchmark families distinguished by their per-source discrepancies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    /// `Δ = 0` for every source.
    Same,
    /// `Δ = 0` for the first source, `Δ = 4` for the rest.
    Diff,
    /// `Δ = 0` everywhere, intended for larger source counts.
    LargeSame,
    /// `Δ ~ U[0, 8]` i.i.d. per source.
    LargeDiff,
}

/// Per-source record counts of the three positional splits; records
/// `[0, train)` are the training split, `[train, train + test)` the test
/// split, and the following `validation` records the validation split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub test: usize,
    pub validation: usize,
}

impl Splits {
    /// The default 50 / 450 / 400 per 1000 records, scaled proportionally.
    pub fn proportional(n_per_source: usize) -> Result<Self> {
        let splits = Splits {
            train: n_per_source * 50 / 1000,
            test: n_per_source * 450 / 1000,
            validation: n_per_source * 400 / 1000,
        };
        splits.check(n_per_source)?;
        Ok(splits)
    }

    pub fn total(&self) -> usize {
        self.train + self.test + self.validation
    }

    fn check(&self, n_per_source: usize) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(Error::parameter(
                "n_per_source",
                n_per_source,
                "too small to carve nonempty train and test splits",
            ));
        }
        if self.total() > n_per_source {
            return Err(Error::parameter(
                "splits",
                self.total(),
                "exceed the records available per source",
            ));
        }
        Ok(())
    }
}

/// A generated multi-source benchmark with its hidden ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub kind: BenchmarkKind,
    pub seed: u64,
    pub splits: Splits,
    pub gt: GroundTruthParams,
    pub deltas: Vec<Real>,
    pub sources: Vec<BenchmarkSource>,
}

impl Benchmark {
    /// Training split of source `s`.
    pub fn train_set(&self, s: usize) -> SourceDataset {
        self.sources[s].observed.slice_rows(0, self.splits.train)
    }

    /// Test split of source `s` with its true per-record effects.
    pub fn test_set(&self, s: usize) -> (SourceDataset, Vec<Real>) {
        let start = self.splits.train;
        let data = self.sources[s].observed.slice_rows(start, self.splits.test);
        let cates = self.sources[s].true_cate[start..start + self.splits.test].to_vec();
        (data, cates)
    }

    /// Validation split of source `s` with its true per-record effects.
    pub fn validation_set(&self, s: usize) -> (SourceDataset, Vec<Real>) {
        let start = self.splits.train + self.splits.test;
        let data = self
            .sources[s]
            .observed
            .slice_rows(start, self.splits.validation);
        let cates =
            self.sources[s].true_cate[start..start + self.splits.validation].to_vec();
        (data, cates)
    }
}

/// Generates an `m`-source benchmark with the default proportional splits.
pub fn make_benchmark(
    kind: BenchmarkKind,
    m: usize,
    n_per_source: usize,
    seed: u64,
) -> Result<Benchmark> {
    make_benchmark_with_splits(kind, m, Splits::proportional(n_per_source)?, n_per_source, seed)
}

/// Generates an `m`-source benchmark with explicit split sizes; the
/// per-source record count is `n_per_source` (at least `splits.total()`).
pub fn make_benchmark_with_splits(
    kind: BenchmarkKind,
    m: usize,
    splits: Splits,
    n_per_source: usize,
    seed: u64,
) -> Result<Benchmark> {
    if m == 0 {
        return Err(Error::parameter("m", m, "must be at least 1"));
    }
    splits.check(n_per_source)?;
    let d_x = 30;
    let gt = GroundTruthParams::draw(d_x, mix_seed(seed, 0))?;
    let mut delta_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let deltas: Vec<Real> = (0..m)
        .map(|s| match kind {
            BenchmarkKind::Same | BenchmarkKind::LargeSame => 0.0,
            BenchmarkKind::Diff => {
                if s == 0 {
                    0.0
                } else {
                    4.0
                }
            }
            BenchmarkKind::LargeDiff => delta_rng.random::<Real>() * 8.0,
        })
        .collect();
    let sources = deltas
        .iter()
        .enumerate()
        .map(|(s, &delta)| generate_source(&gt, delta, n_per_source, mix_seed(seed, 2 + s as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        kind,
        seed,
        splits,
        gt,
        deltas,
        sources,
    })
}

/// Stable seed mixer shared by the generator and the training loop.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Column mapping for [`load_csv_source`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
    pub unit_id: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            treatment: "w".into(),
            outcome: "y".into(),
            unit_id: Some("unit_id".into()),
        }
    }
}

/// Loads one source from a headed CSV file. Every column not named by the
/// schema is a covariate, in header order. The treatment column must be
/// binary; all cells must parse as numbers.
pub fn load_csv_source(path: &Path, schema: &CsvSchema) -> Result<SourceDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingestion {
            row: 0,
            column: name.to_owned(),
            reason: "column missing from header".into(),
        })
    };
    let w_col = col(&schema.treatment)?;
    let y_col = col(&schema.outcome)?;
    let id_col = schema.unit_id.as_deref().map(col).transpose()?;
    let x_cols: Vec<usize> = (0..headers.len())
        .filter(|&j| j != w_col && j != y_col && Some(j) != id_col)
        .collect();
    if x_cols.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            column: "covariates".into(),
            reason: "no covariate columns remain".into(),
        });
    }

    let mut unit_ids = id_col.map(|_| Vec::new());
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        let cell = |j: usize| -> Result<Real> {
            let raw = record.get(j).ok_or_else(|| Error::Ingestion {
                row,
                column: headers[j].clone(),
                reason: "missing cell".into(),
            })?;
            raw.trim().parse::<Real>().map_err(|_| Error::Ingestion {
                row,
                column: headers[j].clone(),
                reason: format!("not a number: {raw:?}"),
            })
        };
        let w_val = cell(w_col)?;
        if w_val != 0.0 && w_val != 1.0 {
            return Err(Error::Ingestion {
                row,
                column: headers[w_col].clone(),
                reason: format!("treatment must be 0 or 1, got {w_val}"),
            });
        }
        w.push(w_val as u8);
        y.push(cell(y_col)?);
        for &j in &x_cols {
            x.push(cell(j)?);
        }
        if let (Some(ids), Some(j)) = (&mut unit_ids, id_col) {
            ids.push(record.get(j).unwrap_or_default().to_owned());
        }
    }
    let n = y.len();
    Ok(SourceDataset {
        unit_ids,
        w,
        y,
        x: Array2::from_shape_vec((n, x_cols.len()), x).expect("row count"),
    })
}

/// Writes one source as a headed CSV (`unit_id, w, y, x_1..x_d`). Floats
/// print in shortest round-trip form, so a write/load cycle is lossless.
pub fn write_csv_source(path: &Path, data: &SourceDataset) -> Result<()> {
    data.validate()?;
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = Vec::with_capacity(data.d_x() + 3);
    if data.unit_ids.is_some() {
        header.push("unit_id".to_owned());
    }
    header.push("w".to_owned());
    header.push("y".to_owned());
    for j in 1..=data.d_x() {
        header.push(format!("x_{j}"));
    }
    writer.write_record(&header)?;
    for i in 0..data.n() {
        let mut row = Vec::with_capacity(header.len());
        if let Some(ids) = &data.unit_ids {
            row.push(ids[i].clone());
        }
        row.push(data.w[i].to_string());
        row.push(data.y[i].to_string());
        for &v in data.x_row(i) {
            row.push(v.to_string());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes the hidden per-record truth of one source
/// (`unit_id, y0, y1, cate`); kept out of the federation path.
pub fn write_truth_csv(path: &Path, source: &BenchmarkSource) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["unit_id", "y0", "y1", "cate"])?;
    let ids = source.observed.unit_ids.as_ref();
    for i in 0..source.observed.n() {
        writer.write_record(&[
            ids.map(|v| v[i].clone()).unwrap_or_else(|| i.to_string()),
            source.y0[i].to_string(),
            source.y1[i].to_string(),
            source.true_cate[i].to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a truth CSV written by [`write_truth_csv`]; returns
/// `(y0, y1, cate)` per record.
pub fn load_truth_csv(path: &Path) -> Result<Vec<(Real, Real, Real)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingestion {
            row: 0,
            column: name.to_owned(),
            reason: "column missing from header".into(),
        })
    };
    let (c0, c1, c2) = (find("y0")?, find("y1")?, find("cate")?);
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |j: usize| -> Result<Real> {
            record
                .get(j)
                .and_then(|raw| raw.trim().parse::<Real>().ok())
                .ok_or_else(|| Error::Ingestion {
                    row: idx + 1,
                    column: headers[j].clone(),
                    reason: "not a number".into(),
                })
        };
        out.push((parse(c0)?, parse(c1)?, parse(c2)?));
    }
    Ok(out)
}
