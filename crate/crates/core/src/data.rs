//! Score datasets, prior settings and persisted posterior draws.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{offset_a, TransformSpec, LPRIME_CLAMP_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: i64,
    /// Realized log predictive density, in nats.
    pub log_score: f64,
    /// Standard deviation of the expert's Gaussian predictive distribution.
    pub predictive_sd: f64,
    /// Raw (unstandardized) pooling-variable vector.
    pub pooling: Vec<f64>,
}

/// Per-column affine map `z ↦ (z − mean) / sd` applied to pooling variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], sd: vec![1.0; d] }
    }

    /// Fits column means and sample standard deviations; constant or
    /// single-row columns keep unit scale.
    pub fn fit(rows: &[Vec<f64>], d: usize) -> Self {
        let n = rows.len();
        if n == 0 {
            return Self::identity(d);
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let sd = (0..d)
            .map(|j| {
                if n < 2 {
                    return 1.0;
                }
                let ss: f64 = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum();
                let s = (ss / (n - 1) as f64).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, sd }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: z.len() });
        }
        Ok(z.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect())
    }

    /// Standardizes raw query points given as rows.
    pub fn apply_rows(&self, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut out = DMatrix::zeros(rows.len(), d);
        for (i, r) in rows.iter().enumerate() {
            let s = self.apply(r)?;
            for j in 0..d {
                out[(i, j)] = s[j];
            }
        }
        Ok(out)
    }
}

/// Log scores of one expert in temporal order, with the derived columns
/// `a`, `ℓ' = a − ℓ` and `ℓ'' = (ℓ')^{1/3}`.
#[derive(Debug, Clone)]
pub struct ScoreDataset {
    expert_name: String,
    pooling_names: Vec<String>,
    records: Vec<ScoreRecord>,
    offsets: Vec<f64>,
    lprime: Vec<f64>,
    ldblprime: Vec<f64>,
    standardizer: Standardizer,
    z: DMatrix<f64>,
}

impl ScoreDataset {
    /// Validates records and standardizes the pooling variables with
    /// statistics fitted on these records.
    pub fn new(expert_name: impl Into<String>, pooling_names: Vec<String>, records: Vec<ScoreRecord>) -> Result<Self> {
        let d = pooling_names.len();
        let rows: Vec<Vec<f64>> = records.iter().map(|r| r.pooling.clone()).collect();
        check_records(&records, d)?;
        let standardizer = Standardizer::fit(&rows, d);
        Self::build(expert_name.into(), pooling_names, records, standardizer)
    }

    /// Like [`ScoreDataset::new`] but reuses an existing pooling-variable map,
    /// so that e.g. evaluation-period rows line up with a fitted model.
    pub fn with_standardizer(
        expert_name: impl Into<String>,
        pooling_names: Vec<String>,
        records: Vec<ScoreRecord>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        if standardizer.dim() != pooling_names.len() {
            return Err(Error::DimensionMismatch { expected: pooling_names.len(), got: standardizer.dim() });
        }
        check_records(&records, pooling_names.len())?;
        Self::build(expert_name.into(), pooling_names, records, standardizer)
    }

    fn build(
        expert_name: String,
        pooling_names: Vec<String>,
        records: Vec<ScoreRecord>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let n = records.len();
        let d = pooling_names.len();
        let mut offsets = Vec::with_capacity(n);
        let mut lprime = Vec::with_capacity(n);
        let mut ldblprime = Vec::with_capacity(n);
        let mut z = DMatrix::zeros(n, d);
        let cube = TransformSpec::cube_root();
        for (i, r) in records.iter().enumerate() {
            let a = offset_a(r.predictive_sd).map_err(|e| Error::InvalidRow {
                row: i + 1,
                id: r.id.to_string(),
                message: e.to_string(),
            })?;
            let raw = a - r.log_score;
            if raw < -LPRIME_CLAMP_TOL {
                return Err(Error::InconsistentScore { row: i + 1, id: r.id.to_string(), lprime: raw });
            }
            let lp = raw.max(0.0);
            offsets.push(a);
            lprime.push(lp);
            ldblprime.push(cube.forward(lp)?);
            for (j, v) in standardizer.apply(&r.pooling)?.into_iter().enumerate() {
                z[(i, j)] = v;
            }
        }
        Ok(Self { expert_name, pooling_names, records, offsets, lprime, ldblprime, standardizer, z })
    }

    pub fn expert_name(&self) -> &str {
        &self.expert_name
    }

    pub fn pooling_names(&self) -> &[String] {
        &self.pooling_names
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pooling_names.len()
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn lprime(&self) -> &[f64] {
        &self.lprime
    }

    pub fn ldblprime(&self) -> &[f64] {
        &self.ldblprime
    }

    pub fn log_scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.log_score).collect()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Standardized pooling matrix, one row per record.
    pub fn pooling_matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// First `n` records, keeping this dataset's standardizer.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::with_standardizer(
            self.expert_name.clone(),
            self.pooling_names.clone(),
            self.records[..n].to_vec(),
            self.standardizer.clone(),
        )
    }

    /// Writes the raw columns (`id`, `log_score`, `predictive_sd`, pooling
    /// variables) as comma-separated text.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "log_score".into(), "predictive_sd".into()];
        header.extend(self.pooling_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.id.to_string(), r.log_score.to_string(), r.predictive_sd.to_string()];
            row.extend(r.pooling.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_records(records: &[ScoreRecord], d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidParameter("at least one pooling variable is required".into()));
    }
    for (i, r) in records.iter().enumerate() {
        let bad = |message: String| Error::InvalidRow { row: i + 1, id: r.id.to_string(), message };
        if r.pooling.len() != d {
            return Err(bad(format!("expected {d} pooling values, got {}", r.pooling.len())));
        }
        if !r.log_score.is_finite() {
            return Err(bad(format!("log score is not finite ({})", r.log_score)));
        }
        if !(r.predictive_sd > 0.0 && r.predictive_sd.is_finite()) {
            return Err(bad(format!("predictive sd must be positive and finite, got {}", r.predictive_sd)));
        }
        if let Some(v) = r.pooling.iter().find(|v| !v.is_finite()) {
            return Err(bad(format!("pooling value is not finite ({v})")));
        }
    }
    Ok(())
}

/// Column names in a delimiter-separated score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id: String,
    pub log_score: String,
    pub predictive_sd: String,
    /// Pooling columns; `None` takes every other column in header order.
    pub pooling: Option<Vec<String>>,
    pub delimiter: u8,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            log_score: "log_score".into(),
            predictive_sd: "predictive_sd".into(),
            pooling: None,
            delimiter: b',',
        }
    }
}

/// Reads raw records and the pooling column names from a score file.
pub fn read_records(path: &Path, schema: &ColumnMap) -> Result<(Vec<String>, Vec<ScoreRecord>)> {
    let mut reader = csv::ReaderBuilder::new().delimiter(schema.delimiter).trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let id_col = find(&schema.id)?;
    let score_col = find(&schema.log_score)?;
    let sd_col = find(&schema.predictive_sd)?;
    let pooling_names: Vec<String> = match &schema.pooling {
        Some(cols) => cols.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| ![id_col, score_col, sd_col].contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let pooling_cols = pooling_names.iter().map(|p| find(p)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let raw_id = row.get(id_col).unwrap_or("").to_string();
        let bad = |message: String| Error::InvalidRow { row: row_no, id: raw_id.clone(), message };
        let id: i64 = raw_id.parse().map_err(|_| bad(format!("id `{raw_id}` is not an integer")))?;
        let num = |col: usize, name: &str| -> Result<f64> {
            let s = row.get(col).unwrap_or("");
            let v: f64 = s.parse().map_err(|_| bad(format!("{name} `{s}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("{name} is not finite")))
            }
        };
        let log_score = num(score_col, &schema.log_score)?;
        let predictive_sd = num(sd_col, &schema.predictive_sd)?;
        let pooling = pooling_cols
            .iter()
            .zip(&pooling_names)
            .map(|(&c, name)| num(c, name))
            .collect::<Result<Vec<_>>>()?;
        records.push(ScoreRecord { id, log_score, predictive_sd, pooling });
    }
    Ok((pooling_names, records))
}

/// Loads and validates one expert's score file. The expert is named after
/// the file stem.
pub fn load_dataset(path: &Path, schema: &ColumnMap) -> Result<ScoreDataset> {
    let (pooling_names, records) = read_records(path, schema)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "expert".into());
    ScoreDataset::new(name, pooling_names, records)
}

/// Hyperprior settings shared by both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Inverse-gamma shape for every lengthscale.
    pub lengthscale_shape: f64,
    /// Inverse-gamma scale for every lengthscale.
    pub lengthscale_scale: f64,
    /// Scale of the half-normal prior on the signal sd.
    pub signal_sd_scale: f64,
    /// Scale of the half-normal prior on the observation noise sd.
    pub noise_sd_scale: f64,
    /// Scale of the `N⁺(1/2, ψ_b²)` prior on the χ² scale parameter.
    pub b_scale: f64,
    /// Constant GP mean; `None` picks each model's default.
    pub gp_mean: Option<f64>,
    /// Location and scale of the `N⁺` prior on a sampled power.
    pub power_location: f64,
    pub power_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            lengthscale_shape: 5.0,
            lengthscale_scale: 5.0,
            signal_sd_scale: 1.0,
            noise_sd_scale: 1.0,
            b_scale: 0.25,
            gp_mean: None,
            power_location: 1.0 / 3.0,
            power_scale: 0.1,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lengthscale_shape", self.lengthscale_shape),
            ("lengthscale_scale", self.lengthscale_scale),
            ("signal_sd_scale", self.signal_sd_scale),
            ("noise_sd_scale", self.noise_sd_scale),
            ("b_scale", self.b_scale),
            ("power_scale", self.power_scale),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("prior {name} must be positive, got {v}")));
            }
        }
        if let Some(m) = self.gp_mean {
            if !m.is_finite() {
                return Err(Error::InvalidParameter("prior gp_mean must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Sampler summary stored alongside the draws.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub chains: usize,
    /// Mean acceptance probability per chain over the sampling phase.
    pub acceptance: Vec<f64>,
    pub step_size: Vec<f64>,
    pub divergences: usize,
    /// Split-R̂ per column.
    pub rhat: Vec<f64>,
}

impl SamplerDiagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().filter(|r| r.is_finite()).fold(f64::NAN, f64::max)
    }
}

/// Posterior draws on the constrained scale, one row per draw, rows ordered
/// by chain then iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    chain: Vec<usize>,
    log_posterior: Vec<f64>,
    pub diagnostics: SamplerDiagnostics,
    pub seed: u64,
}

const DRAWS_FORMAT: &str = "lpa-draws/1";

#[derive(Debug, Serialize, Deserialize)]
struct DrawsHeader {
    format: String,
    columns: Vec<String>,
    seed: u64,
    diagnostics: SamplerDiagnostics,
}

/// Whether `name` is one of the recognized parameter column names.
pub fn is_known_column(name: &str) -> bool {
    if matches!(name, "signal_sd" | "noise_sd" | "b" | "power_alpha") {
        return true;
    }
    ["lengthscale[", "latent["].iter().any(|prefix| {
        name.strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(']'))
            .map(|idx| !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()))
            .unwrap_or(false)
    })
}

impl PosteriorDraws {
    pub fn new(
        columns: Vec<String>,
        rows: Vec<Vec<f64>>,
        chain: Vec<usize>,
        log_posterior: Vec<f64>,
        diagnostics: SamplerDiagnostics,
        seed: u64,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Draws("no draws".into()));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !is_known_column(c) {
                return Err(Error::Draws(format!("unknown column `{c}`")));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::Draws(format!("duplicate column `{c}`")));
            }
        }
        if chain.len() != rows.len() || log_posterior.len() != rows.len() {
            return Err(Error::Draws("chain and log-posterior vectors must align with rows".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(Error::Draws(format!("row {} has {} values, expected {}", i + 1, r.len(), columns.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Draws(format!("row {} has a non-finite value", i + 1)));
            }
        }
        Ok(Self { columns, rows, chain, log_posterior, diagnostics, seed })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn chain(&self) -> &[usize] {
        &self.chain
    }

    pub fn log_posterior(&self) -> &[f64] {
        &self.log_posterior
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Writes a one-line JSON header followed by comma-separated rows of
    /// `chain, lp__, <columns…>`. Values use shortest round-trip formatting.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = DrawsHeader {
            format: DRAWS_FORMAT.into(),
            columns: self.columns.clone(),
            seed: self.seed,
            diagnostics: self.diagnostics.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for ((row, chain), lp) in self.rows.iter().zip(&self.chain).zip(&self.log_posterior) {
            write!(w, "{chain},{lp}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let first = match lines.next() {
            Some(line) => line?,
            None => return Err(Error::Draws("no draws".into())),
        };
        if first.trim().is_empty() {
            return Err(Error::Draws("no draws".into()));
        }
        let header: DrawsHeader =
            serde_json::from_str(&first).map_err(|e| Error::Draws(format!("malformed header: {e}")))?;
        if header.format != DRAWS_FORMAT {
            return Err(Error::Draws(format!("unsupported format `{}`", header.format)));
        }
        let width = header.columns.len() + 2;
        let (mut rows, mut chain, mut lp) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(Error::Draws(format!("line {} has {} fields, expected {width}", i + 2, fields.len())));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Draws(format!("line {}: `{s}` is not a number", i + 2)));
            chain.push(fields[0].trim().parse::<usize>().map_err(|_| Error::Draws(format!("line {}: bad chain index", i + 2)))?);
            lp.push(parse(fields[1])?);
            rows.push(fields[2..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?);
        }
        Self::new(header.columns, rows, chain, lp, header.diagnostics, header.seed)
    }
}
