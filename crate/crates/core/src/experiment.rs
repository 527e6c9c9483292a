//! Experiment configuration, data ingestion and the staged pipeline.
//!
//! A run goes through four stages that each persist their output in the run
//! directory: `simulate` (or ingest) writes `data.csv`, `fit-abc` writes one
//! ABC posterior per rule, `fit-fbp` one FBP posterior per rule, and `evaluate`
//! turns those into score matrices, `report.md` and `manifest.json`. Every
//! artifact carries the config hash, and later stages refuse artifacts from a
//! different config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abc::{read_posterior_csv, run_abc_with_fits, write_posterior_csv, AbcConfig, AbcPosterior, KeepPolicy, PriorSpec};
use crate::auxiliary::{fit_auxiliary, AuxFit, AuxKind};
use crate::error::{Error, Result};
use crate::evaluation::{render_report, resolve_rules, EvalReport, MatrixMeta, ReportFormat, ScoreMatrix};
use crate::fbp::{estimate_w, fbp_holdout_components, read_fbp_draws, run_rwmh, write_fbp_csv, FbpConfig, FbpPosterior};
use crate::models::{simulate_skew_sv, ModelKind, SkewSvParams, SsmParams, SvGaussianParams};
use crate::particle::{holdout_components_many, score_holdout, FilterConfig, HoldoutComponents, MAX_DROPPED_SHARE};
use crate::rng::RngStream;
use crate::scoring::{RuleSpec, ScoringRule};

pub const SCHEMA_VERSION: u32 = 1;

pub const PRESETS: [&str; 6] = [
    "table1-desk",
    "table1-full",
    "table2-desk",
    "table2-full",
    "table3-empirical",
    "table3-empirical-full",
];

/// Largest diagonal rank that counts as coherent in the gate.
pub const GATE_MAX_RANK: usize = 2;
/// Share of columns that must be coherent, as a fraction `num / den`.
pub const GATE_SHARE: (usize, usize) = (5, 7);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    CorrectSim,
    MisspecSim,
    Empirical,
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::CorrectSim => "correct-sim",
            Design::MisspecSim => "misspec-sim",
            Design::Empirical => "empirical",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSchema {
    Prices,
    Returns,
}

impl FromStr for DataSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prices" => Ok(DataSchema::Prices),
            "returns" => Ok(DataSchema::Returns),
            _ => Err(Error::Config(format!("unknown data schema `{s}` (expected prices or returns)"))),
        }
    }
}

fn default_scaling() -> f64 {
    100.0
}

fn default_workers() -> usize {
    1
}

/// Flat key-value experiment description, stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub design: Design,
    /// Assumed state space model.
    pub model: ModelKind,
    pub aux: AuxKind,
    /// Focusing rules, e.g. `["LS", "CLS10", "CRPS", "IS"]`.
    pub rules: Vec<String>,
    /// Simulated series length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Number of training observations of a simulated series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
    /// Number of trailing observations held out from an empirical series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    /// Data generating parameters of a simulated design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<Vec<f64>>,
    /// Length of the reference simulation for the skew-copula marginal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fz_draws: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_schema: Option<DataSchema>,
    #[serde(default = "default_scaling")]
    pub scaling: f64,
    pub n_draws: usize,
    /// `asymptotic`, `quantile:<q>` or a count.
    pub keep: String,
    pub n_particles: usize,
    pub state_draws: usize,
    pub fbp_draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub restarts: usize,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn rule_names(specs: &[RuleSpec]) -> Vec<String> {
    specs.iter().map(|r| r.to_string()).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn rule_specs(&self) -> Result<Vec<RuleSpec>> {
        let specs = self.rules.iter().map(|r| r.parse()).collect::<Result<Vec<RuleSpec>>>()?;
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].contains(s) {
                return Err(Error::Config(format!("rule {s} listed twice")));
            }
        }
        Ok(specs)
    }

    pub fn keep_policy(&self) -> Result<KeepPolicy> {
        let k = self.keep.trim();
        if k == "asymptotic" {
            return Ok(KeepPolicy::Asymptotic);
        }
        if let Some(q) = k.strip_prefix("quantile:") {
            let q: f64 = q.trim().parse().map_err(|_| Error::Config(format!("bad keep quantile `{k}`")))?;
            return Ok(KeepPolicy::Quantile(q));
        }
        k.parse::<usize>()
            .map(KeepPolicy::Count)
            .map_err(|_| Error::Config(format!("bad keep policy `{k}` (asymptotic, quantile:<q> or a count)")))
    }

    /// Training length for a series of `n` observations.
    pub fn split_of(&self, n: usize) -> Result<usize> {
        let split = match self.design {
            Design::Empirical => n.checked_sub(self.holdout.unwrap_or(0)).unwrap_or(0),
            _ => self.split.unwrap_or(0),
        };
        if split < 100 || split >= n {
            return Err(Error::Config(format!("training sample of {split} out of {n} observations is too short or leaves no hold-out")));
        }
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.rule_specs()?.is_empty() {
            return bad("at least one focusing rule is required".into());
        }
        let expected_model = match self.design {
            Design::Empirical => ModelKind::SvStable,
            _ => ModelKind::SvGaussian,
        };
        if self.model != expected_model {
            return bad(format!("design {} uses model {expected_model}, got {}", self.design, self.model));
        }
        match self.design {
            Design::CorrectSim | Design::MisspecSim => {
                let (Some(t), Some(split)) = (self.t, self.split) else {
                    return bad("simulated designs need t and split".into());
                };
                if split >= t {
                    return bad(format!("split {split} must be below t {t}"));
                }
                self.split_of(t)?;
                self.dgp_params()?;
            }
            Design::Empirical => {
                if self.data.is_none() {
                    return bad("the empirical design needs a data path".into());
                }
                if self.data_schema.is_none() {
                    return bad("the empirical design needs data_schema (prices or returns)".into());
                }
                if self.holdout.unwrap_or(0) == 0 {
                    return bad("the empirical design needs a positive holdout".into());
                }
                if !(self.scaling > 0.0 && self.scaling.is_finite()) {
                    return bad(format!("scaling must be positive, got {}", self.scaling));
                }
            }
        }
        if self.design == Design::MisspecSim && self.fz_draws.is_none() {
            return bad("the misspecified design needs fz_draws".into());
        }
        for (name, v) in [("n_draws", self.n_draws), ("restarts", self.restarts), ("workers", self.workers)] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        self.keep_policy()?.resolve(self.n_draws, 1000)?;
        self.filter_config().validate()?;
        self.fbp_config(1.0).validate()?;
        Ok(())
    }

    /// Parameters of the simulated DGP.
    pub fn dgp_params(&self) -> Result<Dgp> {
        let p = self.dgp.as_deref().unwrap_or(&[]);
        if p.len() != 4 {
            return Err(Error::Config(format!("dgp needs 4 values, got {}", p.len())));
        }
        match self.design {
            Design::CorrectSim => Ok(Dgp::SvGaussian(SvGaussianParams::new(p[0], p[1], p[2], p[3])?)),
            Design::MisspecSim => Ok(Dgp::SkewSv(SkewSvParams::new(p[0], p[1], p[2], p[3])?)),
            Design::Empirical => Err(Error::Config("the empirical design has no dgp".into())),
        }
    }

    pub fn prior(&self) -> PriorSpec {
        match self.design {
            Design::CorrectSim => PriorSpec::correct_spec(),
            Design::MisspecSim => PriorSpec::misspec(),
            Design::Empirical => PriorSpec::stable_empirical(),
        }
    }

    pub fn abc_config(&self) -> Result<AbcConfig> {
        Ok(AbcConfig {
            n_draws: self.n_draws,
            keep: self.keep_policy()?,
            aux: self.aux,
            restarts: self.restarts,
        })
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            state_draws: self.state_draws,
        }
    }

    pub fn fbp_config(&self, w: f64) -> FbpConfig {
        FbpConfig {
            w,
            n_draws: self.fbp_draws,
            burn_in: self.burn_in,
            thin: self.thin,
            proposal_scale: None,
            restarts: self.restarts,
        }
    }

    /// SHA-256 of everything that determines the artifacts (not the worker
    /// count), including the bytes of the data file; first 16 hex digits.
    pub fn config_hash(&self) -> Result<String> {
        let canonical = ExperimentConfig {
            workers: 0,
            ..self.clone()
        };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical)?);
        if let Some(p) = &self.data {
            let bytes = std::fs::read(p).map_err(|e| Error::Data {
                row: 0,
                message: format!("cannot read {}: {e}", p.display()),
            })?;
            h.update(bytes);
        }
        Ok(hex::encode(h.finalize())[..16].to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dgp {
    SvGaussian(SvGaussianParams),
    SkewSv(SkewSvParams),
}

/// Named experiment presets. Desk presets run in minutes; `-full` presets use
/// full-scale sizes and take hours.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let sim_rules = rule_names(&RuleSpec::simulation_set());
    let desk = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        design: Design::CorrectSim,
        model: ModelKind::SvGaussian,
        aux: AuxKind::Garch,
        rules: sim_rules,
        t: Some(4000),
        split: Some(2000),
        holdout: None,
        dgp: Some(vec![0.95, 0.3, 0.0009, -1.3]),
        fz_draws: None,
        data: None,
        data_schema: None,
        scaling: default_scaling(),
        n_draws: 200_000,
        keep: "100".into(),
        n_particles: 1000,
        state_draws: 20,
        fbp_draws: 1000,
        burn_in: 10_000,
        thin: 5,
        restarts: 3,
        seed: 1,
        workers: default_workers(),
    };
    let full = |c: ExperimentConfig| ExperimentConfig {
        t: Some(20_000),
        split: Some(10_000),
        n_draws: 5_000_000,
        keep: "250".into(),
        n_particles: 5000,
        fbp_draws: 4000,
        ..c
    };
    let misspec = ExperimentConfig {
        design: Design::MisspecSim,
        dgp: Some(vec![0.9, -0.4581, 0.4173, -5.0]),
        fz_draws: Some(1_000_000),
        ..desk.clone()
    };
    let empirical = ExperimentConfig {
        design: Design::Empirical,
        model: ModelKind::SvStable,
        rules: rule_names(&RuleSpec::empirical_set()),
        t: None,
        split: None,
        holdout: Some(500),
        dgp: None,
        data_schema: Some(DataSchema::Prices),
        n_draws: 50_000,
        keep: "50".into(),
        n_particles: 500,
        ..desk.clone()
    };
    match name {
        "table1-desk" => Ok(desk),
        "table1-full" => Ok(full(desk)),
        "table2-desk" => Ok(misspec),
        "table2-full" => Ok(full(misspec)),
        "table3-empirical" => Ok(empirical),
        "table3-empirical-full" => Ok(ExperimentConfig {
            n_draws: 450_000,
            keep: "250".into(),
            n_particles: 5000,
            fbp_draws: 4000,
            ..empirical
        }),
        _ => Err(Error::Config(format!("unknown preset `{name}`; available presets: {}", PRESETS.join(", ")))),
    }
}

/// Daily returns with their dates.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnsData {
    pub dates: Vec<NaiveDate>,
    pub returns: Vec<f64>,
}

/// Reads a `(date, price)` or `(date, return)` CSV with a header row. Dates are
/// `YYYY-MM-DD` and strictly increasing. Prices become `scaling·log(p_t/p_{t−1})`;
/// returns are multiplied by `scaling`. Row numbers in errors are file lines.
pub fn load_returns(path: &Path, schema: DataSchema, scaling: f64) -> Result<ReturnsData> {
    if !(scaling > 0.0 && scaling.is_finite()) {
        return Err(Error::Config(format!("scaling must be positive, got {scaling}")));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::Data {
        row: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let bad = |message: String| Error::Data { row, message };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 2 {
            return Err(bad(format!("expected 2 columns, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|_| bad(format!("bad date `{}`", &rec[0])))?;
        let v: f64 = rec[1].parse().map_err(|_| bad(format!("non-numeric value `{}`", &rec[1])))?;
        if !v.is_finite() {
            return Err(bad(format!("non-finite value `{}`", &rec[1])));
        }
        if schema == DataSchema::Prices && v <= 0.0 {
            return Err(bad(format!("non-positive price {v}")));
        }
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(bad(format!("date {date} does not follow {prev}")));
            }
        }
        dates.push(date);
        values.push(v);
    }
    let data = match schema {
        DataSchema::Returns => ReturnsData {
            dates,
            returns: values.iter().map(|r| scaling * r).collect(),
        },
        DataSchema::Prices => {
            if values.len() < 2 {
                return Err(Error::Data {
                    row: values.len() + 1,
                    message: "need at least two prices".into(),
                });
            }
            ReturnsData {
                dates: dates[1..].to_vec(),
                returns: values.windows(2).map(|p| scaling * (p[1] / p[0]).ln()).collect(),
            }
        }
    };
    log::info!(
        "loaded {} {schema:?} rows from {}: {} returns",
        values.len(),
        path.display(),
        data.returns.len()
    );
    Ok(data)
}

/// The observed series of a run and its training length.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesData {
    pub dates: Option<Vec<NaiveDate>>,
    pub y: Vec<f64>,
    pub split: usize,
}

impl SeriesData {
    pub fn train(&self) -> &[f64] {
        &self.y[..self.split]
    }

    pub fn holdout(&self) -> &[f64] {
        &self.y[self.split..]
    }
}

pub const DATA_FILE: &str = "data.csv";
pub const FBP_META_FILE: &str = "fbp_meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn abc_file(rule: &RuleSpec) -> String {
    format!("abc_{}.csv", rule.to_string().to_ascii_lowercase())
}

pub fn fbp_file(rule: &RuleSpec) -> String {
    format!("fbp_{}.csv", rule.to_string().to_ascii_lowercase())
}

fn root_stream(cfg: &ExperimentConfig) -> RngStream {
    RngStream::new(cfg.seed, 0)
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.display().to_string(),
            producer: producer.to_string(),
        })
    }
}

fn check_hash(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ConfigMismatch {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(f)
}

/// Simulates the design's series (or ingests the data file) and writes
/// `data.csv`.
pub fn simulate_stage(cfg: &ExperimentConfig, out: &Path) -> Result<SeriesData> {
    let run = || -> Result<SeriesData> {
        cfg.validate()?;
        let hash = cfg.config_hash()?;
        let (dates, y) = match cfg.design {
            Design::Empirical => {
                let path = cfg.data.as_deref().expect("validated");
                let d = load_returns(path, cfg.data_schema.expect("validated"), cfg.scaling)?;
                (Some(d.dates), d.returns)
            }
            _ => {
                let t = cfg.t.expect("validated");
                let mut rng = root_stream(cfg).named("data").rng();
                let path = match cfg.dgp_params()? {
                    Dgp::SvGaussian(p) => SsmParams::SvGaussian(p).simulate(t, &mut rng)?,
                    Dgp::SkewSv(p) => simulate_skew_sv(&p, t, &mut rng, cfg.fz_draws.expect("validated"))?,
                };
                (None, path.observations)
            }
        };
        let split = cfg.split_of(y.len())?;
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join(DATA_FILE))?;
        w.write_record(["t", "date", "y", "config_hash"])?;
        for (i, v) in y.iter().enumerate() {
            let date = dates.as_ref().map(|d| d[i].to_string()).unwrap_or_default();
            w.write_record([(i + 1).to_string(), date, v.to_string(), hash.clone()])?;
        }
        w.flush()?;
        log::info!("series of {} observations, training on the first {split}", y.len());
        Ok(SeriesData { dates, y, split })
    };
    run().map_err(|e| e.in_stage("simulate"))
}

/// Reads `data.csv` back, checking the config hash.
pub fn load_series(cfg: &ExperimentConfig, out: &Path) -> Result<SeriesData> {
    let path = out.join(DATA_FILE);
    require(&path, "simulate")?;
    let hash = cfg.config_hash()?;
    let mut r = csv::Reader::from_path(&path)?;
    let mut y = Vec::new();
    let mut dates = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::Data { row: i + 2, message };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", rec.len())));
        }
        check_hash(&path, &hash, &rec[3])?;
        y.push(rec[2].parse::<f64>().map_err(|_| bad(format!("bad value `{}`", &rec[2])))?);
        if !rec[1].is_empty() {
            dates.push(NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d").map_err(|_| bad(format!("bad date `{}`", &rec[1])))?);
        }
    }
    let split = cfg.split_of(y.len())?;
    Ok(SeriesData {
        dates: (!dates.is_empty()).then_some(dates),
        y,
        split,
    })
}

/// Fits the auxiliary model per rule on the training data and runs ABC on one
/// shared set of prior draws; writes `abc_<rule>.csv` and `abc_fits.csv`.
pub fn fit_abc_stage(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AbcPosterior>> {
    let run = || -> Result<Vec<AbcPosterior>> {
        cfg.validate()?;
        let hash = cfg.config_hash()?;
        let series = load_series(cfg, out)?;
        let specs = cfg.rule_specs()?;
        let rules = resolve_rules(&specs, series.train())?;
        let fits = rules
            .par_iter()
            .map(|r| fit_auxiliary(r, cfg.aux, series.train(), cfg.restarts))
            .collect::<Result<Vec<AuxFit>>>()?;
        let posts = run_abc_with_fits(&cfg.prior(), &fits, series.split, &cfg.abc_config()?, &root_stream(cfg).named("abc"))?;
        let mut w = csv::Writer::from_path(out.join("abc_fits.csv"))?;
        let mut header = AuxFit::csv_header();
        header.push("config_hash");
        w.write_record(&header)?;
        for f in &fits {
            let mut row = f.csv_record();
            row.push(hash.clone());
            w.write_record(&row)?;
        }
        w.flush()?;
        for (spec, post) in specs.iter().zip(&posts) {
            write_posterior_csv(&out.join(abc_file(spec)), post, &hash)?;
        }
        Ok(posts)
    };
    run().map_err(|e| e.in_stage("fit-abc"))
}

/// Per-chain facts recorded by `fit-fbp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub rule: String,
    pub w: f64,
    pub acceptance_rate: f64,
    pub tuning_warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbpMeta {
    pub config_hash: String,
    pub chains: Vec<ChainMeta>,
}

/// Runs the LS chain with `w = 1`, derives `ŵ` for the remaining rules from it
/// and runs their chains; writes `fbp_<rule>.csv` and `fbp_meta.json`.
pub fn fit_fbp_stage(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<FbpPosterior>> {
    let run = || -> Result<Vec<FbpPosterior>> {
        cfg.validate()?;
        let hash = cfg.config_hash()?;
        let series = load_series(cfg, out)?;
        let specs = cfg.rule_specs()?;
        let rules = resolve_rules(&specs, series.train())?;
        let rng = root_stream(cfg).named("fbp");
        let train = series.train();
        let base = run_rwmh(&ScoringRule::Ls, 1.0, train, cfg.aux, &cfg.fbp_config(1.0), &rng.named("LS"))?;
        let posts = rules
            .par_iter()
            .map(|rule| {
                if *rule == ScoringRule::Ls {
                    return Ok(base.clone());
                }
                let w = estimate_w(rule, train, &base)?;
                log::info!("FBP {}: w = {w}", rule.label());
                run_rwmh(rule, w, train, cfg.aux, &cfg.fbp_config(w), &rng.named(&rule.label()))
            })
            .collect::<Result<Vec<FbpPosterior>>>()?;
        let mut chains = Vec::new();
        for (spec, post) in specs.iter().zip(&posts) {
            write_fbp_csv(&out.join(fbp_file(spec)), post, &hash)?;
            if let Some(w) = &post.tuning_warning {
                log::warn!("FBP {spec}: {w}");
            }
            chains.push(ChainMeta {
                rule: spec.to_string(),
                w: post.w_used,
                acceptance_rate: post.acceptance_rate,
                tuning_warning: post.tuning_warning.clone(),
            });
        }
        let meta = FbpMeta {
            config_hash: hash,
            chains,
        };
        std::fs::write(out.join(FBP_META_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(posts)
    };
    run().map_err(|e| e.in_stage("fit-fbp"))
}

fn average(scores: &[Vec<f64>]) -> Vec<f64> {
    scores.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect()
}

fn abc_rows(cfg: &ExperimentConfig, out: &Path, series: &SeriesData, specs: &[RuleSpec], rules: &[ScoringRule], hash: &str) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut kept = Vec::new();
    let mut union: BTreeMap<usize, SsmParams> = BTreeMap::new();
    for spec in specs {
        let path = out.join(abc_file(spec));
        require(&path, "fit-abc")?;
        let draws = read_posterior_csv(&path, cfg.model)?;
        check_hash(&path, hash, &draws.config_hash)?;
        for (i, theta) in draws.indices.iter().zip(&draws.thetas) {
            union.insert(*i, *theta);
        }
        kept.push(draws.indices);
    }
    let keys: Vec<u64> = union.keys().map(|k| *k as u64).collect();
    let thetas: Vec<SsmParams> = union.values().copied().collect();
    log::info!("filtering {} distinct ABC draws", thetas.len());
    let comps = holdout_components_many(&thetas, &keys, &series.y, series.split, &cfg.filter_config(), &root_stream(cfg).named("filter"))?;
    let by_index: BTreeMap<usize, &HoldoutComponents> = union.keys().zip(&comps).filter_map(|(k, c)| c.as_ref().map(|c| (*k, c))).collect();
    let dropped = comps.iter().filter(|c| c.is_none()).count();
    let rows = specs
        .iter()
        .zip(&kept)
        .map(|(spec, idx)| {
            let live: Vec<&HoldoutComponents> = idx.iter().filter_map(|i| by_index.get(i).copied()).collect();
            let lost = idx.len() - live.len();
            if lost as f64 > MAX_DROPPED_SHARE * idx.len() as f64 {
                return Err(Error::Estimation(format!("{lost} of {} ABC-{spec} filters degenerated", idx.len())));
            }
            log::info!("scoring ABC-{spec}");
            Ok(average(&score_holdout(&live, series.holdout(), rules)?))
        })
        .collect::<Result<_>>()?;
    Ok((rows, dropped))
}

fn fbp_rows(cfg: &ExperimentConfig, out: &Path, series: &SeriesData, specs: &[RuleSpec], rules: &[ScoringRule], hash: &str) -> Result<(Vec<Vec<f64>>, FbpMeta)> {
    let meta_path = out.join(FBP_META_FILE);
    require(&meta_path, "fit-fbp")?;
    let meta: FbpMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    check_hash(&meta_path, hash, &meta.config_hash)?;
    let rows = specs
        .iter()
        .zip(rules)
        .map(|(spec, rule)| {
            let path = out.join(fbp_file(spec));
            require(&path, "fit-fbp")?;
            let (draws, found) = read_fbp_draws(&path, cfg.aux)?;
            check_hash(&path, hash, &found)?;
            let chain = meta
                .chains
                .iter()
                .find(|c| c.rule == spec.to_string())
                .ok_or_else(|| Error::Config(format!("{} has no entry for {spec}", meta_path.display())))?;
            let post = FbpPosterior {
                draws,
                acceptance_rate: chain.acceptance_rate,
                rule: *rule,
                w_used: chain.w,
                tuning_warning: chain.tuning_warning.clone(),
            };
            log::info!("scoring FBP-{spec}");
            let comps = fbp_holdout_components(&post, &series.y, series.split)?;
            let live: Vec<&HoldoutComponents> = comps.iter().collect();
            Ok(average(&score_holdout(&live, series.holdout(), rules)?))
        })
        .collect::<Result<_>>()?;
    Ok((rows, meta))
}

#[derive(Clone, Debug, Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    seed: u64,
    code_version: &'a str,
    config: &'a ExperimentConfig,
    n_observations: usize,
    split: usize,
    cls_thresholds: BTreeMap<String, f64>,
    dropped_abc_filters: usize,
    fbp_chains: &'a [ChainMeta],
    coherence: BTreeMap<String, Vec<usize>>,
    gate: BTreeMap<String, bool>,
}

/// Scores every ABC and FBP predictive over the hold-out and writes the score
/// CSVs, `report.md` and `manifest.json`.
pub fn evaluate_stage(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let run = || -> Result<EvalReport> {
        cfg.validate()?;
        let hash = cfg.config_hash()?;
        let series = load_series(cfg, out)?;
        let specs = cfg.rule_specs()?;
        let rules = resolve_rules(&specs, series.train())?;
        let (abc, dropped) = abc_rows(cfg, out, &series, &specs, &rules, &hash)?;
        let (fbp, meta) = fbp_rows(cfg, out, &series, &specs, &rules, &hash)?;
        let labels = rule_names(&specs);
        let mm = MatrixMeta {
            t: series.y.len(),
            split: series.split,
            seeds: vec![cfg.seed],
            config_hash: hash.clone(),
        };
        let matrices = vec![
            ScoreMatrix::new("ABC", labels.clone(), labels.clone(), abc, mm.clone())?,
            ScoreMatrix::new("FBP", labels.clone(), labels, fbp, mm)?,
        ];
        let mut notes: Vec<String> = meta
            .chains
            .iter()
            .map(|c| format!("FBP-{}: w = {}, acceptance rate {:.3}", c.rule, c.w, c.acceptance_rate))
            .collect();
        notes.extend(meta.chains.iter().filter_map(|c| c.tuning_warning.as_ref().map(|w| format!("FBP-{}: {w}", c.rule))));
        if dropped > 0 {
            notes.push(format!("{dropped} ABC draws dropped after particle filter degeneracy"));
        }
        let title = match cfg.design {
            Design::CorrectSim => "Correct specification",
            Design::MisspecSim => "Misspecification",
            Design::Empirical => "Empirical design",
        };
        let report = EvalReport::new(title, matrices, notes)?;
        render_report(&report, &[ReportFormat::Csv, ReportFormat::Markdown], out)?;
        let cls_thresholds = rules
            .iter()
            .filter_map(|r| match r {
                ScoringRule::Cls(region) => Some((r.label(), region.threshold)),
                _ => None,
            })
            .collect();
        let manifest = Manifest {
            config_hash: &hash,
            seed: cfg.seed,
            code_version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            n_observations: series.y.len(),
            split: series.split,
            cls_thresholds,
            dropped_abc_filters: dropped,
            fbp_chains: &meta.chains,
            coherence: report.matrices.iter().zip(&report.coherence).map(|(m, r)| (m.method.clone(), r.clone())).collect(),
            gate: coherence_gate(&report),
        };
        std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(report)
    };
    run().map_err(|e| e.in_stage("evaluate"))
}

/// Whether each matrix has diagonal rank ≤ [`GATE_MAX_RANK`] in at least the
/// [`GATE_SHARE`] of its columns.
pub fn coherence_gate(report: &EvalReport) -> BTreeMap<String, bool> {
    report
        .matrices
        .iter()
        .zip(&report.coherence)
        .map(|(m, ranks)| (m.method.clone(), gate_passes(ranks)))
        .collect()
}

pub fn gate_passes(ranks: &[usize]) -> bool {
    let good = ranks.iter().filter(|r| **r <= GATE_MAX_RANK).count();
    good * GATE_SHARE.1 >= GATE_SHARE.0 * ranks.len()
}

/// All four stages in one pool of `cfg.workers` threads.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        simulate_stage(cfg, out)?;
        fit_abc_stage(cfg, out)?;
        fit_fbp_stage(cfg, out)?;
        evaluate_stage(cfg, out)
    })
}
