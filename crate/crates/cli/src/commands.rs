use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use lpa_core::data::{load_dataset, ColumnMap, ScoreDataset};
use lpa_core::pooling::{self, PoolHistoryStep, PoolWeights};
use lpa_core::simlab::{self, BenchmarkMethod, SimScenario, StudyModel};
use lpa_core::stats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelKind, PoolMethod, Settings};
use crate::models::{diagnostics_ok, Fitted};
use crate::output::{self, write_atomic, write_csv, write_json, write_table, Manifest};

pub struct Context<'a> {
    pub settings: &'a Settings,
}

impl<'a> Context<'a> {
    pub fn new(settings: &'a Settings) -> Self {
        Self { settings }
    }

    fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.settings.out.join(name)
    }

    fn schema(&self) -> ColumnMap {
        ColumnMap { pooling: self.settings.pooling_vars.clone(), ..ColumnMap::default() }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed);
        rng.set_stream(stream);
        rng
    }

    fn finish(&self, command: &str, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, ok: bool) -> Result<bool> {
        let manifest = Manifest {
            command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed: self.settings.seed,
            threads: rayon::current_num_threads(),
            inputs,
            outputs,
            settings: self.settings,
            diagnostics_ok: ok,
        };
        output::write_manifest(&self.settings.out, &manifest)?;
        Ok(ok)
    }

    fn load(&self, path: &Path) -> Result<ScoreDataset> {
        load_dataset(path, &self.schema()).with_context(|| format!("loading {}", path.display()))
    }
}

#[derive(Serialize)]
struct CovariateRow {
    id: usize,
    x1: f64,
    x2: f64,
    y: f64,
}

pub fn simulate(ctx: &Context) -> Result<bool> {
    let s = ctx.settings;
    let scenario = SimScenario { n: s.simulate.n, replications: s.simulate.replications, seed: s.seed, ..SimScenario::default() };
    scenario.validate()?;
    let mut outputs = Vec::new();
    for r in 0..scenario.replications {
        let seed = if scenario.replications == 1 { s.seed } else { scenario.replication_seed(r) };
        let data = simlab::simulate_with_seed(scenario.n, seed)?;
        let path = ctx.out(format!("sim_{r}.csv"));
        write_atomic(&path, |tmp| Ok(data.dataset.write_csv(tmp)?))?;
        let cov: Vec<CovariateRow> =
            (0..scenario.n).map(|i| CovariateRow { id: i, x1: data.x1[i], x2: data.x2[i], y: data.y[i] }).collect();
        let cov_path = ctx.out(format!("sim_{r}_covariates.csv"));
        write_csv(&cov_path, &cov)?;
        outputs.extend([path, cov_path]);
    }
    ctx.finish("simulate", Vec::new(), outputs, true)
}

pub fn fit(ctx: &Context, files: &[PathBuf]) -> Result<bool> {
    let s = ctx.settings;
    let mut outputs = Vec::new();
    let mut ok = true;
    for path in files {
        let ds = ctx.load(path)?;
        let fitted = Fitted::fit(&ds, s.model, &s.prior, &s.hmc).with_context(|| format!("fitting {}", ds.expert_name()))?;
        let draws = fitted.draws();
        let draws_path = ctx.out(format!("{}.draws", ds.expert_name()));
        write_atomic(&draws_path, |tmp| Ok(draws.save(tmp)?))?;
        let diag_path = ctx.out(format!("{}.diagnostics.json", ds.expert_name()));
        write_json(&diag_path, &draws.diagnostics)?;
        let this_ok = diagnostics_ok(draws);
        if !this_ok {
            eprintln!(
                "warning: {}: {} divergences in {} draws, max split-R̂ {:.3}",
                ds.expert_name(),
                draws.diagnostics.divergences,
                draws.len(),
                draws.diagnostics.max_rhat()
            );
        }
        ok &= this_ok;
        outputs.extend([draws_path, diag_path]);
    }
    ctx.finish("fit", files.to_vec(), outputs, ok)
}

/// Draws file for each expert: explicit `--fit` paths, else `<out>/<expert>.draws`.
fn draws_paths(ctx: &Context, datasets: &[ScoreDataset], fits: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if fits.is_empty() {
        return Ok(datasets.iter().map(|d| ctx.out(format!("{}.draws", d.expert_name()))).collect());
    }
    ensure!(fits.len() == datasets.len(), "{} --fit files for {} experts", fits.len(), datasets.len());
    Ok(fits.to_vec())
}

/// Query points and their offsets `ã` from a file with the pooling columns
/// and either `predictive_sd` or `offset`.
fn read_queries(path: &Path, names: &[String]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |n: &str| header.iter().position(|h| h == n);
    let z_cols = names
        .iter()
        .map(|n| col(n).with_context(|| format!("{}: missing pooling column `{n}`", path.display())))
        .collect::<Result<Vec<_>>>()?;
    let (sd_col, offset_col) = (col("predictive_sd"), col("offset"));
    ensure!(sd_col.is_some() || offset_col.is_some(), "{}: needs a `predictive_sd` or `offset` column", path.display());
    let (mut points, mut offsets) = (Vec::new(), Vec::new());
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let num = |c: usize| -> Result<f64> {
            let v = row.get(c).unwrap_or("");
            v.parse::<f64>().with_context(|| format!("{} row {}: `{v}` is not a number", path.display(), i + 1))
        };
        points.push(z_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
        offsets.push(match offset_col {
            Some(c) => num(c)?,
            None => lpa_core::transforms::offset_a(num(sd_col.unwrap())?)?,
        });
    }
    Ok((points, offsets))
}

pub fn predict(ctx: &Context, files: &[PathBuf], fits: &[PathBuf], query: Option<&Path>) -> Result<bool> {
    let s = ctx.settings;
    let datasets = files.iter().map(|p| ctx.load(p)).collect::<Result<Vec<_>>>()?;
    let draw_files = draws_paths(ctx, &datasets, fits)?;
    let mut outputs = Vec::new();
    let mut inputs = files.to_vec();
    inputs.extend(draw_files.iter().cloned());
    let mut rng = ctx.rng(1);
    for (ds, draws_path) in datasets.iter().zip(&draw_files) {
        let model = Fitted::load(ds, draws_path, None, &s.prior)?;
        let (points, offsets) = match query {
            Some(q) => read_queries(q, ds.pooling_names())?,
            None => (ds.records().iter().map(|r| r.pooling.clone()).collect(), ds.offsets().to_vec()),
        };
        let draws = model.elpd_draws_batch(&points, &offsets, &mut rng)?;
        let mut header: Vec<String> = vec!["point".into()];
        header.extend(ds.pooling_names().iter().cloned());
        header.extend(
            ["offset", "mean", "sd", "median", "hpd_low", "hpd_high", "central_low", "central_high"].map(String::from),
        );
        let rows: Vec<Vec<String>> = points
            .iter()
            .zip(&offsets)
            .zip(&draws)
            .enumerate()
            .map(|(i, ((z, a), d))| {
                let hpd = stats::hpd_interval(d, 0.95);
                let central = stats::central_interval(d, 0.95);
                let mut row = vec![i.to_string()];
                row.extend(z.iter().map(|v| v.to_string()));
                row.extend(
                    [*a, stats::mean(d), stats::variance(d).sqrt(), stats::quantile(d, 0.5), hpd.0, hpd.1, central.0, central.1]
                        .map(|v| v.to_string()),
                );
                row
            })
            .collect();
        let path = ctx.out(format!("{}.predictions.csv", ds.expert_name()));
        write_table(&path, &header, &rows)?;
        outputs.push(path);
    }
    if let Some(q) = query {
        inputs.push(q.to_path_buf());
    }
    ctx.finish("predict", inputs, outputs, true)
}

/// Everything needed to weight experts at one evaluation point.
struct PoolInputs<'a> {
    experts: &'a [String],
    elpd_draws: &'a [Vec<f64>],
    history: &'a [PoolHistoryStep],
    past_scores: &'a [Vec<f64>],
}

fn pool_weights(method: PoolMethod, s: &Settings, inputs: &PoolInputs, prob_best: &[f64]) -> Result<PoolWeights> {
    let names = inputs.experts.to_vec();
    Ok(match method {
        PoolMethod::Natural => pooling::natural_weights(names, prob_best)?,
        PoolMethod::Selection => pooling::selection_weights(names, inputs.elpd_draws)?,
        PoolMethod::SoftmaxFixedC => pooling::softmax_weights(names, prob_best, s.pool.c)?,
        PoolMethod::Dynamic => {
            let c = pooling::dynamic_c(inputs.history, &s.pool.c_grid);
            pooling::softmax_weights(names, prob_best, c)?
        }
        PoolMethod::Equal => pooling::equal_weights(names),
        PoolMethod::Optimal => {
            if inputs.past_scores.is_empty() {
                pooling::equal_weights(names)
            } else {
                pooling::optimal_pool_weights(names, inputs.past_scores)?
            }
        }
    })
}

fn aligned_len(datasets: &[ScoreDataset], what: &str) -> Result<usize> {
    let n = datasets[0].len();
    if let Some(d) = datasets.iter().find(|d| d.len() != n) {
        bail!("{what} files must have equal row counts ({} has {}, expected {n})", d.expert_name(), d.len());
    }
    Ok(n)
}

fn expert_names(datasets: &[ScoreDataset]) -> Vec<String> {
    datasets.iter().map(|d| d.expert_name().to_string()).collect()
}

fn pool_header(experts: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["row", "method", "c"].map(String::from).to_vec();
    h.extend(experts.iter().map(|e| format!("w_{e}")));
    h.extend(experts.iter().map(|e| format!("p_{e}")));
    h.push("pooled_log_density".into());
    h
}

fn pool_row(row: usize, method: PoolMethod, w: &PoolWeights, p: &[f64], pooled: f64) -> Vec<String> {
    let mut r = vec![row.to_string(), method.name().to_string(), w.c.map(|c| c.to_string()).unwrap_or_default()];
    r.extend(w.weights.iter().map(|v| v.to_string()));
    r.extend(p.iter().map(|v| v.to_string()));
    r.push(pooled.to_string());
    r
}

pub fn pool(ctx: &Context, files: &[PathBuf], fits: &[PathBuf], queries: &[PathBuf]) -> Result<bool> {
    let s = ctx.settings;
    let datasets = files.iter().map(|p| ctx.load(p)).collect::<Result<Vec<_>>>()?;
    ensure!(queries.len() == datasets.len(), "{} --query files for {} experts", queries.len(), datasets.len());
    let draw_files = draws_paths(ctx, &datasets, fits)?;
    let experts = expert_names(&datasets);

    let mut evals = Vec::with_capacity(datasets.len());
    for (ds, q) in datasets.iter().zip(queries) {
        let schema = ColumnMap { pooling: Some(ds.pooling_names().to_vec()), ..ColumnMap::default() };
        let (_, records) = lpa_core::data::read_records(q, &schema).with_context(|| format!("loading {}", q.display()))?;
        evals.push(ScoreDataset::with_standardizer(ds.expert_name(), ds.pooling_names().to_vec(), records, ds.standardizer().clone())?);
    }
    let n_eval = aligned_len(&evals, "query")?;

    let mut rng = ctx.rng(2);
    let mut elpd = Vec::with_capacity(datasets.len());
    for ((ds, path), ev) in datasets.iter().zip(&draw_files).zip(&evals) {
        let model = Fitted::load(ds, path, None, &s.prior)?;
        let points: Vec<Vec<f64>> = ev.records().iter().map(|r| r.pooling.clone()).collect();
        elpd.push(model.elpd_draws_batch(&points, ev.offsets(), &mut rng)?);
    }

    let mut past_scores: Vec<Vec<f64>> = if aligned_len(&datasets, "expert").is_ok() {
        (0..datasets[0].len()).map(|i| datasets.iter().map(|d| d.records()[i].log_score).collect()).collect()
    } else {
        Vec::new()
    };
    let mut history = Vec::new();
    let mut rows = Vec::new();
    for t in 0..n_eval {
        let draws_t: Vec<Vec<f64>> = elpd.iter().map(|e| e[t].clone()).collect();
        let realized: Vec<f64> = evals.iter().map(|e| e.records()[t].log_score).collect();
        let p = pooling::prob_best(&draws_t, &mut rng)?;
        let inputs = PoolInputs { experts: &experts, elpd_draws: &draws_t, history: &history, past_scores: &past_scores };
        for &method in &s.pool.methods {
            let w = pool_weights(method, s, &inputs, &p)?;
            let pooled = pooling::pooled_log_density(&realized, &w.weights).unwrap_or(f64::NEG_INFINITY);
            rows.push(pool_row(t, method, &w, &p, pooled));
        }
        history.push(PoolHistoryStep { prob_best: p, log_preds: realized.clone() });
        past_scores.push(realized);
    }
    let path = ctx.out("pool.csv");
    write_table(&path, &pool_header(&experts), &rows)?;
    let mut inputs = files.to_vec();
    inputs.extend(draw_files);
    inputs.extend(queries.iter().cloned());
    ctx.finish("pool", inputs, vec![path], true)
}

#[derive(Serialize)]
struct Table1Row {
    expert: String,
    method: String,
    steps: usize,
    mean_log_score: f64,
    median_log_score: f64,
}

#[derive(Serialize)]
struct Table2Row {
    method: String,
    c: String,
    steps: usize,
    mean_log_score: f64,
    median_log_score: f64,
}

fn summarize(values: &[f64]) -> (f64, f64) {
    (stats::mean(values), stats::quantile(values, 0.5))
}

pub fn backtest(ctx: &Context, files: &[PathBuf]) -> Result<bool> {
    let s = ctx.settings;
    let full = files.iter().map(|p| ctx.load(p)).collect::<Result<Vec<_>>>()?;
    let n = aligned_len(&full, "expert")?;
    let start = s.backtest.start;
    ensure!(start >= 3 && start < n, "backtest start must be in [3, {n}), got {start}");
    let experts = expert_names(&full);

    // Standardize with the initial window only, so no later record leaks in.
    let windows = full
        .iter()
        .map(|d| {
            let base = ScoreDataset::new(d.expert_name(), d.pooling_names().to_vec(), d.records()[..start].to_vec())?;
            Ok((d, base.standardizer().clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let prefix = |k: usize, i: usize| -> Result<ScoreDataset> {
        let (d, st) = &windows[k];
        Ok(ScoreDataset::with_standardizer(d.expert_name(), d.pooling_names().to_vec(), d.records()[..i].to_vec(), st.clone())?)
    };

    let mut rng = ctx.rng(3);
    let mut models: Vec<Option<Fitted>> = (0..full.len()).map(|_| None).collect();
    let mut model_scores = vec![Vec::with_capacity(n - start); full.len()];
    let mut pooled: HashMap<PoolMethod, Vec<f64>> = HashMap::new();
    let mut history = Vec::new();
    let mut step_rows = Vec::new();
    let mut ok = true;
    for i in start..n {
        let refit = (i - start) % s.backtest.refit_every == 0;
        let mut draws_i = Vec::with_capacity(full.len());
        for k in 0..full.len() {
            let train = prefix(k, i)?;
            let model = match (&models[k], refit) {
                (Some(m), false) => m.extend(&train)?,
                _ => {
                    let hmc = lpa_core::hmc::HmcConfig { seed: s.seed.wrapping_add(i as u64), ..s.hmc.clone() };
                    let m = Fitted::fit(&train, s.model, &s.prior, &hmc)
                        .with_context(|| format!("fitting {} on {i} records", train.expert_name()))?;
                    ok &= diagnostics_ok(m.draws());
                    m
                }
            };
            let rec = &full[k].records()[i];
            let a = full[k].offsets()[i];
            draws_i.push(model.elpd_draws(&rec.pooling, a, &mut rng)?);
            model_scores[k].push(model.log_score_density(&rec.pooling, a, rec.log_score, &mut rng)?);
            models[k] = Some(model);
        }
        let realized: Vec<f64> = full.iter().map(|d| d.records()[i].log_score).collect();
        let past: Vec<Vec<f64>> = (0..i).map(|j| full.iter().map(|d| d.records()[j].log_score).collect()).collect();
        let p = pooling::prob_best(&draws_i, &mut rng)?;
        let inputs = PoolInputs { experts: &experts, elpd_draws: &draws_i, history: &history, past_scores: &past };
        for &method in &s.pool.methods {
            let w = pool_weights(method, s, &inputs, &p)?;
            let v = pooling::pooled_log_density(&realized, &w.weights).unwrap_or(f64::NEG_INFINITY);
            pooled.entry(method).or_default().push(v);
            step_rows.push(pool_row(i, method, &w, &p, v));
        }
        history.push(PoolHistoryStep { prob_best: p, log_preds: realized });
    }

    let mut table1 = Vec::new();
    for (k, d) in full.iter().enumerate() {
        for method in BenchmarkMethod::ALL {
            let steps = simlab::benchmark_predict(d, method)?;
            let scores: Vec<f64> = steps.iter().filter(|st| st.index >= start).map(|st| st.log_density).collect();
            let (mean, median) = summarize(&scores);
            table1.push(Table1Row {
                expert: d.expert_name().into(),
                method: method.name().into(),
                steps: scores.len(),
                mean_log_score: mean,
                median_log_score: median,
            });
        }
        let (mean, median) = summarize(&model_scores[k]);
        table1.push(Table1Row {
            expert: d.expert_name().into(),
            method: model_label(s.model).into(),
            steps: model_scores[k].len(),
            mean_log_score: mean,
            median_log_score: median,
        });
    }
    let table2: Vec<Table2Row> = s
        .pool
        .methods
        .iter()
        .map(|m| {
            let v = &pooled[m];
            let (mean, median) = summarize(v);
            let c = if *m == PoolMethod::SoftmaxFixedC { s.pool.c.to_string() } else { String::new() };
            Table2Row { method: m.name().into(), c, steps: v.len(), mean_log_score: mean, median_log_score: median }
        })
        .collect();

    let outputs = vec![ctx.out("table1.csv"), ctx.out("table2.csv"), ctx.out("pool_steps.csv")];
    write_csv(&outputs[0], &table1)?;
    write_csv(&outputs[1], &table2)?;
    write_table(&outputs[2], &pool_header(&experts), &step_rows)?;
    ctx.finish("backtest", files.to_vec(), outputs, ok)
}

fn model_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Cube => "gp_cube",
        ModelKind::Power => "gp_power",
        ModelKind::Chisq => "gp_chisq",
    }
}

#[derive(Serialize)]
struct StudySummary {
    model: StudyModel,
    replications: usize,
    median_log_mise: f64,
    median_mils: f64,
    median_mise_replication: usize,
    hpd_coverage_at_median: f64,
}

pub fn evaluate(ctx: &Context) -> Result<bool> {
    let s = ctx.settings;
    let scenario = SimScenario { n: s.simulate.n, replications: s.simulate.replications, seed: s.seed, ..SimScenario::default() };
    let models = [StudyModel::GpCube, StudyModel::GpChisq];
    let chisq_reps = s.simulate.chisq_replications;
    let result = simlab::run_study_replications(&scenario, &models, &s.prior, &s.hmc, chisq_reps)?;

    let mut summaries = Vec::new();
    for pr in &result.percentiles {
        let metrics = result.metrics_for(pr.model);
        let log_mise: Vec<f64> = metrics.iter().map(|m| m.log_mise).collect();
        let mils: Vec<f64> = metrics.iter().map(|m| m.mils).collect();
        summaries.push(StudySummary {
            model: pr.model,
            replications: metrics.len(),
            median_log_mise: stats::quantile(&log_mise, 0.5),
            median_mils: stats::quantile(&mils, 0.5),
            median_mise_replication: pr.p500,
            hpd_coverage_at_median: simlab::hpd_coverage(&result.grid_for(pr.model, pr.p500), -2.0, 2.0),
        });
    }
    let total_draws = (s.hmc.draws * s.hmc.chains) as f64;
    let ok = result
        .metrics
        .iter()
        .all(|m| m.divergences as f64 / total_draws <= 0.05 && !(m.max_rhat > 1.05));

    let outputs = vec![ctx.out("metrics.csv"), ctx.out("grid.csv"), ctx.out("percentiles.csv"), ctx.out("summary.json")];
    write_csv(&outputs[0], &result.metrics)?;
    write_csv(&outputs[1], &result.grid)?;
    write_csv(&outputs[2], &result.percentiles)?;
    write_json(&outputs[3], &summaries)?;
    ctx.finish("evaluate", Vec::new(), outputs, ok)
}
