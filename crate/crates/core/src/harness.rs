//! Experiment runner: trains every (arm, code length, seed) cell, evaluates
//! Hamming ranking of the query set against the database, and writes the
//! report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::PackedCode;
use crate::data::{self, LabeledDataset, SplitConfig, SyntheticSpec};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::mining::MiningStats;
use crate::ranking::{average_precision, mean_of_defined, mean_pr_curve, precision_at_k, write_pr_csv, PrCurve, PrPoint, RankList};
use crate::train::{train, Method, RunSpec, StatsSink, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File {
        path: PathBuf,
        #[serde(default)]
        standardize: bool,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub split_seed: u64,
    pub bits: Vec<usize>,
    pub methods: Vec<Method>,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub precision_ks: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            split: SplitConfig::default(),
            split_seed: 0,
            bits: vec![16, 32, 48, 64],
            methods: Method::ALL.to_vec(),
            loss: LossConfig::default(),
            train: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
            precision_ks: vec![1, 10, 50, 100, 500, 1000],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.bits.is_empty() || self.bits.contains(&0) {
            return Err(Error::Config("code lengths must be a non-empty list of positive integers".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        if self.precision_ks.contains(&0) {
            return Err(Error::Config("precision cut-offs must be positive".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("duplicate method".into()));
        }
        self.loss.validate()?;
        for &m in &self.methods {
            self.train.validate_for(m)?;
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    /// Loads or generates the dataset and applies the configured split.
    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        let ds = match &self.data {
            DataSource::Synthetic(spec) => data::generate_clusters(spec)?,
            DataSource::File { path, standardize } => {
                let mut ds = data::load_features(path)?;
                if *standardize {
                    ds.standardize();
                }
                ds
            }
        };
        data::make_splits(ds, &self.split, self.split_seed)
    }
}

/// Binarized codes for `rows` of the dataset.
pub fn encode(enc: &Encoder, ds: &LabeledDataset, rows: &[usize], threshold: f64) -> Result<Vec<PackedCode>> {
    let relaxed = enc.forward(ds.select_features(rows).view())?;
    relaxed
        .rows()
        .into_iter()
        .map(|r| PackedCode::from_relaxed(r.as_slice().unwrap(), threshold))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub k: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub map: f64,
    pub precision_at_k: Vec<PrecisionAtK>,
    pub pr_curve: PrCurve,
}

/// Ranks the database against every query by Hamming distance and scores
/// the lists. Cut-offs beyond the database size are dropped.
pub fn evaluate_codes(
    ds: &LabeledDataset,
    query_rows: &[usize],
    query_codes: &[PackedCode],
    db_rows: &[usize],
    db_codes: &[PackedCode],
    ks: &[usize],
) -> Result<Evaluation> {
    if db_rows.is_empty() {
        return Err(Error::Split("empty retrieval database".into()));
    }
    let lists: Vec<RankList> = query_rows
        .par_iter()
        .zip(query_codes)
        .map(|(&q, code)| {
            RankList::rank(
                q,
                code,
                db_rows.iter().copied().zip(db_codes),
                |i| ds.relevant(q, i),
            )
        })
        .collect::<Result<_>>()?;
    let map = mean_of_defined(lists.iter().map(average_precision))?;
    let eligible: Vec<&RankList> = lists.iter().filter(|l| l.num_relevant() > 0).collect();
    let precision_at_k = ks
        .iter()
        .filter(|&&k| k <= db_rows.len())
        .map(|&k| {
            let sum: f64 = eligible.iter().map(|l| precision_at_k(l, k)).sum::<Result<f64>>()?;
            Ok(PrecisionAtK {
                k,
                precision: sum / eligible.len() as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        map,
        precision_at_k,
        pr_curve: mean_pr_curve(&lists)?,
    })
}

pub fn evaluate(enc: &Encoder, ds: &LabeledDataset, threshold: f64, ks: &[usize]) -> Result<Evaluation> {
    let splits = ds
        .splits()
        .ok_or_else(|| Error::Split("dataset has no query/database split".into()))?;
    let q = encode(enc, ds, &splits.query, threshold)?;
    let db = encode(enc, ds, &splits.database, threshold)?;
    evaluate_codes(ds, &splits.query, &q, &splits.database, &db, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub arm: String,
    pub method: Method,
    pub loss: LossConfig,
    pub bits: usize,
    pub seed: u64,
    pub map: f64,
    pub precision_at_k: Vec<PrecisionAtK>,
    pub pr_file: String,
    pub loss_curve: Vec<f64>,
    pub active_curve: Vec<f64>,
    pub mining: MiningStats,
    pub init_hash: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub arm: String,
    pub bits: usize,
    pub mean: f64,
    pub std_err: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: u32,
    pub bits: usize,
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    /// Arm names in report order.
    pub arms: Vec<String>,
    pub cells: Vec<CellReport>,
    pub map_table: Vec<MapCell>,
    #[serde(default)]
    pub gamma_table: Vec<GammaRow>,
    /// Seed-averaged PR curves per (arm, bits); written as CSV, not JSON.
    #[serde(skip)]
    pub pr_curves: Vec<(String, usize, PrCurve)>,
}

impl EvalReport {
    pub fn cell(&self, arm: &str, bits: usize, seed: u64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.arm == arm && c.bits == bits && c.seed == seed)
    }

    pub fn map_cell(&self, arm: &str, bits: usize) -> Option<&MapCell> {
        self.map_table.iter().find(|c| c.arm == arm && c.bits == bits)
    }

    /// Per-seed MAP of an arm at one code length, in seed order.
    pub fn maps(&self, arm: &str, bits: usize) -> Vec<f64> {
        self.config
            .seeds
            .iter()
            .filter_map(|&s| self.cell(arm, bits, s).map(|c| c.map))
            .collect()
    }
}

struct Arm {
    name: String,
    method: Method,
    loss: LossConfig,
}

fn run_arms(cfg: &ExperimentConfig, arms: &[Arm], sink: Option<&dyn StatsSink>) -> Result<EvalReport> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let splits = ds.splits().expect("split applied").clone();
    let train_x = ds.select_features(&splits.train);
    let train_labels = ds.select_labels(&splits.train);

    let mut jobs = Vec::new();
    for (a, _) in arms.iter().enumerate() {
        for &bits in &cfg.bits {
            for &seed in &cfg.seeds {
                jobs.push((a, bits, seed));
            }
        }
    }
    let results: Vec<(CellReport, PrCurve)> = jobs
        .par_iter()
        .map(|&(a, bits, seed)| {
            let arm = &arms[a];
            let start = Instant::now();
            let run = RunSpec {
                arm: &arm.name,
                method: arm.method,
                loss: arm.loss,
                bits,
                seed,
            };
            let TrainOutcome {
                encoder,
                init_hash,
                loss_curve,
                active_curve,
                mining,
            } = train(train_x.view(), &train_labels, &run, &cfg.train, sink)?;
            let eval = evaluate(&encoder, &ds, cfg.train.threshold, &cfg.precision_ks)?;
            Ok((
                CellReport {
                    arm: arm.name.clone(),
                    method: arm.method,
                    loss: arm.method.loss_config(&arm.loss),
                    bits,
                    seed,
                    map: eval.map,
                    precision_at_k: eval.precision_at_k,
                    pr_file: pr_file_name(&arm.name, bits),
                    loss_curve,
                    active_curve,
                    mining,
                    init_hash,
                    wall_clock_secs: start.elapsed().as_secs_f64(),
                },
                eval.pr_curve,
            ))
        })
        .collect::<Result<_>>()?;

    let mut map_table = Vec::new();
    let mut pr_curves = Vec::new();
    for arm in arms {
        for &bits in &cfg.bits {
            let group: Vec<&(CellReport, PrCurve)> = results
                .iter()
                .filter(|(c, _)| c.arm == arm.name && c.bits == bits)
                .collect();
            let maps: Vec<f64> = group.iter().map(|(c, _)| c.map).collect();
            let (mean, std_err) = mean_and_stderr(&maps);
            map_table.push(MapCell {
                arm: arm.name.clone(),
                bits,
                mean,
                std_err,
                seeds: maps.len(),
            });
            pr_curves.push((arm.name.clone(), bits, average_curves(group.iter().map(|(_, p)| p))));
        }
    }
    Ok(EvalReport {
        config: cfg.clone(),
        arms: arms.iter().map(|a| a.name.clone()).collect(),
        cells: results.into_iter().map(|(c, _)| c).collect(),
        map_table,
        gamma_table: Vec::new(),
        pr_curves,
    })
}

fn average_curves<'a>(curves: impl Iterator<Item = &'a PrCurve>) -> PrCurve {
    let curves: Vec<&PrCurve> = curves.collect();
    let Some(first) = curves.first() else {
        return PrCurve::default();
    };
    let n = curves.len() as f64;
    PrCurve {
        points: (0..first.points.len())
            .map(|i| PrPoint {
                cutoff: first.points[i].cutoff,
                recall: curves.iter().map(|c| c.points[i].recall).sum::<f64>() / n,
                precision: curves.iter().map(|c| c.points[i].precision).sum::<f64>() / n,
            })
            .collect(),
    }
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trains and evaluates every configured method at every code length and seed.
pub fn run_experiment(cfg: &ExperimentConfig, sink: Option<&dyn StatsSink>) -> Result<EvalReport> {
    let arms: Vec<Arm> = cfg
        .methods
        .iter()
        .map(|&m| Arm {
            name: m.name().to_string(),
            method: m,
            loss: cfg.loss,
        })
        .collect();
    run_arms(cfg, &arms, sink)
}

/// Code length used by the γ sweep.
pub const GAMMA_SWEEP_BITS: usize = 32;

/// One `full` arm per γ at 32 bits.
pub fn gamma_sweep(cfg: &ExperimentConfig, gammas: &[u32], sink: Option<&dyn StatsSink>) -> Result<EvalReport> {
    if gammas.is_empty() {
        return Err(Error::Config("no gamma values given".into()));
    }
    if gammas.contains(&0) {
        return Err(Error::Config("gamma must be at least 1".into()));
    }
    let cfg = ExperimentConfig {
        bits: vec![GAMMA_SWEEP_BITS],
        methods: vec![Method::Full],
        ..cfg.clone()
    };
    let arms: Vec<Arm> = gammas
        .iter()
        .map(|&g| Arm {
            name: format!("full_gamma{g}"),
            method: Method::Full,
            loss: LossConfig { gamma: g, ..cfg.loss },
        })
        .collect();
    let mut report = run_arms(&cfg, &arms, sink)?;
    report.gamma_table = gammas
        .iter()
        .zip(&arms)
        .map(|(&gamma, arm)| {
            let cell = report.map_cell(&arm.name, GAMMA_SWEEP_BITS).expect("cell exists");
            GammaRow {
                gamma,
                bits: GAMMA_SWEEP_BITS,
                mean: cell.mean,
                std_err: cell.std_err,
            }
        })
        .collect();
    Ok(report)
}

pub fn pr_file_name(arm: &str, bits: usize) -> String {
    format!("pr_{arm}_{bits}.csv")
}

pub fn loss_curve_file_name(arm: &str) -> String {
    format!("loss_curve_{arm}.csv")
}

/// `method,<bits>...` header, one row per arm, seed-mean MAP to 6 decimals.
pub fn map_table_csv(report: &EvalReport) -> String {
    let bits = &report.config.bits;
    let mut out = String::from("method");
    for b in bits {
        out.push_str(&format!(",{b}"));
    }
    out.push('\n');
    for arm in &report.arms {
        out.push_str(arm);
        for &b in bits {
            match report.map_cell(arm, b) {
                Some(c) => out.push_str(&format!(",{:.6}", c.mean)),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `map_table.csv`, one `pr_<arm>_<bits>.csv` per
/// cell group, one `loss_curve_<arm>.csv` per arm, and `map_vs_gamma.csv`
/// for γ sweeps. Returns the written paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.arms.is_empty() || report.cells.is_empty() {
        return Err(Error::Config("report has no methods to emit".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let path = dir.join("report.json");
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_file(&path, &json)?;
    written.push(path);

    let path = dir.join("map_table.csv");
    write_file(&path, map_table_csv(report).as_bytes())?;
    written.push(path);

    for (arm, bits, curve) in &report.pr_curves {
        let path = dir.join(pr_file_name(arm, *bits));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_pr_csv(&mut w, curve)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let mut curves: BTreeMap<&str, String> = BTreeMap::new();
    for cell in &report.cells {
        let csv = curves
            .entry(&cell.arm)
            .or_insert_with(|| String::from("bits,seed,epoch,loss,active_ratio\n"));
        for (epoch, (loss, active)) in cell.loss_curve.iter().zip(&cell.active_curve).enumerate() {
            csv.push_str(&format!("{},{},{},{},{:.6}\n", cell.bits, cell.seed, epoch, loss, active));
        }
    }
    for arm in &report.arms {
        if let Some(csv) = curves.get(arm.as_str()) {
            let path = dir.join(loss_curve_file_name(arm));
            write_file(&path, csv.as_bytes())?;
            written.push(path);
        }
    }

    if !report.gamma_table.is_empty() {
        let mut csv = String::from("gamma,bits,map,std_err\n");
        for row in &report.gamma_table {
            csv.push_str(&format!("{},{},{:.6},{:.6}\n", row.gamma, row.bits, row.mean, row.std_err));
        }
        let path = dir.join("map_vs_gamma.csv");
        write_file(&path, csv.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Paired comparison of two arms over the report's seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_diff: f64,
    pub std_err_diff: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign-test p-value for "a beats b".
    pub sign_test_p: f64,
}

pub fn compare_arms(report: &EvalReport, a: &str, b: &str, bits: usize) -> Result<Comparison> {
    let (xa, xb) = (report.maps(a, bits), report.maps(b, bits));
    if xa.is_empty() || xa.len() != xb.len() {
        return Err(Error::Config(format!("arms {a} and {b} lack paired cells at {bits} bits")));
    }
    let diffs: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x - y).collect();
    let wins = diffs.iter().filter(|&&d| d > 0.0).count();
    let losses = diffs.iter().filter(|&&d| d < 0.0).count();
    let (mean_diff, std_err_diff) = mean_and_stderr(&diffs);
    Ok(Comparison {
        mean_a: mean_and_stderr(&xa).0,
        mean_b: mean_and_stderr(&xb).0,
        mean_diff,
        std_err_diff,
        wins,
        losses,
        ties: diffs.len() - wins - losses,
        sign_test_p: sign_test(wins, losses),
    })
}

/// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`; ties are dropped.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut coef = 1.0f64; // C(n, 0)
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += coef;
        }
        coef = coef * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}
