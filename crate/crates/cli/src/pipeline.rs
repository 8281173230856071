//! The `run`, `sensitivity`, `validate` and `simulate` commands.
//!
//! Periods in every output are indices `1..=T` in ascending label order; the
//! manifest records the labels. Result files other than the manifest depend
//! only on the input, the configuration and the seed, never on the
//! execution mode.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use stagdid::aggregate::{
    aggregate_all, bootstrap_inference, Aggregates, BootstrapResult, EstimatorSpec, MIN_REPLICATES,
};
use stagdid::csdid::{gtatt_table, overlap_report, Flavor, GtattCell, DEFAULT_OVERLAP_EPS};
use stagdid::panel::{build_cohort_design, Cohort, CohortDesign, PanelDataset};
use stagdid::sensitivity::{bh_compare, budget_grid, robust_grids, PreTrend, CONSERVATIVE_LABEL};
use stagdid::simlab::{gen_panel, ScenarioSpec};
use stagdid::twfe::{percent_increase, staggered_twfe};
use stagdid::Execution;

use crate::error::{CliError, CliResult};
use crate::ingest::{covariate_names, fmt_f64, read_panel, write_panel, ColumnMap};

pub const GTATT_FILE: &str = "gtatt.csv";
pub const AGGREGATES_FILE: &str = "aggregates.json";
pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const EVENTSTUDY_FILE: &str = "eventstudy.csv";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const PANEL_FILE: &str = "panel.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Comparison units. Only never-treated units are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlGroup {
    #[default]
    NeverTreated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationSet {
    Overall,
    Group,
    Event,
    Simple,
}

impl std::str::FromStr for AggregationSet {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "overall" => Ok(AggregationSet::Overall),
            "group" => Ok(AggregationSet::Group),
            "event" => Ok(AggregationSet::Event),
            "simple" => Ok(AggregationSet::Simple),
            other => Err(CliError::config(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    pub columns: ColumnMap,
    pub covariates: Vec<String>,
    /// Covariates also entered squared, as `<name>_sq`.
    pub squared: Vec<String>,
    pub flavor: Flavor,
    pub control_group: ControlGroup,
    pub aggregations: Vec<AggregationSet>,
    /// Bootstrap replicates; 0 keeps influence-function standard errors and
    /// skips the trend comparison.
    pub bootstrap: usize,
    pub seed: Option<u64>,
    pub m_grid: Vec<f64>,
    pub mbar_grid: Vec<f64>,
    pub output_dir: Option<PathBuf>,
    pub execution: Execution,
    pub overlap_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: PathBuf::new(),
            columns: ColumnMap::default(),
            covariates: Vec::new(),
            squared: Vec::new(),
            flavor: Flavor::Dr,
            control_group: ControlGroup::NeverTreated,
            aggregations: vec![
                AggregationSet::Overall,
                AggregationSet::Group,
                AggregationSet::Event,
                AggregationSet::Simple,
            ],
            bootstrap: 999,
            seed: None,
            m_grid: budget_grid(0.5, 11),
            mbar_grid: budget_grid(2.0, 21),
            output_dir: None,
            execution: Execution::Parallel,
            overlap_eps: DEFAULT_OVERLAP_EPS,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn check(&self) -> CliResult<()> {
        if self.bootstrap > 0 && self.seed.is_none() {
            return Err(CliError::new(
                "CONFIG_MISSING_SEED",
                "a seed is required when bootstrap replicates are requested",
            ));
        }
        if self.input.as_os_str().is_empty() {
            return Err(CliError::config("no input file given"));
        }
        if !(self.overlap_eps > 0.0 && self.overlap_eps < 1.0) {
            return Err(CliError::config("overlap_eps must lie in (0, 1)"));
        }
        Ok(())
    }

    fn covariate_names(&self) -> Vec<String> {
        covariate_names(&self.covariates, &self.squared)
    }

    fn output_dir(&self) -> CliResult<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::config("no output directory given"))
    }
}

/// Everything computed for one configuration.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub design: CohortDesign,
    pub cells: Vec<GtattCell>,
    pub aggregates: Aggregates,
    pub bootstrap: Option<BootstrapResult>,
    pub aggregates_json: Value,
    pub sensitivity_json: Value,
}

/// Mean outcome over treated unit-periods.
fn observed_treated_mean(panel: &PanelDataset) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for u in 0..panel.n_units() {
        for t in 1..=panel.n_periods() {
            if panel.treated_at(u, t) {
                sum += panel.outcome(u, t);
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn error_value(e: &stagdid::Error) -> Value {
    json!({ "error": { "code": e.code(), "message": e.to_string() } })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("results serialise")
}

pub fn analyze(panel: &PanelDataset, config: &RunConfig) -> CliResult<Analysis> {
    let design = build_cohort_design(panel)?;
    let covariates = config.covariate_names();
    let mut cells = gtatt_table(panel, &design, &covariates, config.flavor, config.execution)?;
    let mut aggregates = aggregate_all(&cells, &design)?;
    let bootstrap = if config.bootstrap > 0 {
        let spec = EstimatorSpec {
            covariates: covariates.clone(),
            flavor: config.flavor,
        };
        let seed = config.seed.expect("checked");
        let result = bootstrap_inference(
            panel,
            &design,
            &spec,
            config.bootstrap,
            seed,
            config.execution,
        )?;
        result.apply(&mut cells, &mut aggregates);
        Some(result)
    } else {
        None
    };

    // aggregates.json
    let mut agg = Map::new();
    agg.insert("flavor".into(), to_value(&config.flavor));
    agg.insert("control_group".into(), to_value(&config.control_group));
    let wants = |s: AggregationSet| config.aggregations.contains(&s);
    if wants(AggregationSet::Overall) {
        agg.insert("overall".into(), to_value(&aggregates.overall));
    }
    if wants(AggregationSet::Group) {
        agg.insert("groups".into(), to_value(&aggregates.groups));
    }
    if wants(AggregationSet::Event) {
        agg.insert("events".into(), to_value(&aggregates.events));
        agg.insert(
            "pretrend_slope".into(),
            to_value(&aggregates.pretrend_slope),
        );
    }
    if wants(AggregationSet::Simple) {
        agg.insert("simple".into(), to_value(&aggregates.simple));
    }
    let treated_mean = observed_treated_mean(panel);
    let pct = |att: f64| percent_increase(att, treated_mean).ok();
    agg.insert(
        "percent_increase".into(),
        json!({
            "observed_treated_mean": treated_mean,
            "overall": pct(aggregates.overall.estimate),
            "simple": pct(aggregates.simple.estimate),
        }),
    );
    agg.insert(
        "twfe".into(),
        match staggered_twfe(panel, &covariates) {
            Ok(est) => to_value(&est),
            Err(e) => error_value(&e),
        },
    );
    agg.insert(
        "bootstrap".into(),
        match &bootstrap {
            Some(b) => json!({ "replicates": b.replicates, "seed": b.seed, "failed_replicates": b.failed_replicates }),
            None => Value::Null,
        },
    );

    // sensitivity.json
    let mut sens = Map::new();
    sens.insert("label".into(), json!(CONSERVATIVE_LABEL));
    match PreTrend::from_aggregates(&aggregates) {
        Ok(pre) => {
            sens.insert("pre_trend".into(), to_value(&pre));
            sens.insert(
                "robust_intervals".into(),
                to_value(&robust_grids(
                    &aggregates,
                    &config.m_grid,
                    &config.mbar_grid,
                )?),
            );
        }
        Err(e) => {
            sens.insert("pre_trend".into(), error_value(&e));
            sens.insert("robust_intervals".into(), json!([]));
        }
    }
    let mut comparisons = Vec::new();
    for &g in &design.cohorts {
        let outcome = if config.bootstrap < MIN_REPLICATES {
            Err(stagdid::Error::TooFewReplicates {
                min: MIN_REPLICATES,
                got: config.bootstrap,
            })
        } else {
            panel.restrict_to_cohort(g).and_then(|sub| {
                bh_compare(
                    &sub,
                    &covariates,
                    config.bootstrap,
                    config.seed.expect("checked"),
                    config.execution,
                )
            })
        };
        comparisons.push(match outcome {
            Ok(c) => to_value(&c),
            Err(e) => {
                let mut v = error_value(&e);
                v["g"] = json!(g);
                v
            }
        });
    }
    sens.insert("trend_comparisons".into(), Value::Array(comparisons));
    sens.insert(
        "overlap".into(),
        to_value(&overlap_report(&cells, config.overlap_eps)),
    );

    Ok(Analysis {
        design,
        cells,
        aggregates,
        bootstrap,
        aggregates_json: Value::Object(agg),
        sensitivity_json: Value::Object(sens),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn gtatt_csv(cells: &[GtattCell]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "g",
        "t",
        "e",
        "estimate",
        "se",
        "ci_lo",
        "ci_hi",
        "p",
        "flavor",
        "flags",
        "se_source",
        "n_treated",
        "n_control",
        "error",
    ])?;
    for c in cells {
        let flags: Vec<&str> = c.flags.iter().map(|f| f.as_str()).collect();
        w.write_record([
            c.g.to_string(),
            c.t.to_string(),
            c.event_time.to_string(),
            fmt_f64(c.estimate),
            fmt_f64(c.se),
            fmt_f64(c.ci.lo),
            fmt_f64(c.ci.hi),
            fmt_f64(c.p_value),
            c.flavor.as_str().to_string(),
            flags.join(";"),
            to_value(&c.se_source)
                .as_str()
                .unwrap_or_default()
                .to_string(),
            c.n_treated.to_string(),
            c.n_control.to_string(),
            c.error
                .as_ref()
                .map(|e| e.code().to_string())
                .unwrap_or_default(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| CliError::new("IO_ERROR", e.to_string()))
}

pub fn eventstudy_csv(aggregates: &Aggregates) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "e",
        "estimate",
        "se",
        "ci_lo",
        "ci_hi",
        "ci_percentile_lo",
        "ci_percentile_hi",
        "n_cohorts",
    ])?;
    for r in &aggregates.events {
        let e = match r.kind {
            stagdid::aggregate::AggregationKind::Event { e } => e,
            _ => continue,
        };
        w.write_record([
            e.to_string(),
            fmt_f64(r.estimate),
            fmt_f64(r.se),
            fmt_f64(r.ci.lo),
            fmt_f64(r.ci.hi),
            opt(r.ci_percentile.map(|i| i.lo)),
            opt(r.ci_percentile.map(|i| i.hi)),
            r.weights.len().to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| CliError::new("IO_ERROR", e.to_string()))
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("json values serialise");
    out.push(b'\n');
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn load(config: &RunConfig) -> CliResult<(Vec<u8>, PanelDataset)> {
    config.check()?;
    let bytes = fs::read(&config.input).map_err(|e| CliError::io(&config.input, e))?;
    let panel = read_panel(
        bytes.as_slice(),
        &config.columns,
        &config.covariates,
        &config.squared,
    )?;
    Ok((bytes, panel))
}

fn prepare_dir(config: &RunConfig) -> CliResult<PathBuf> {
    let dir = config.output_dir()?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

/// Full analysis; writes the five result files and returns their paths.
pub fn run(config: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let (input, panel) = load(config)?;
    let dir = prepare_dir(config)?;
    let analysis = analyze(&panel, config)?;

    let files = [
        (GTATT_FILE, gtatt_csv(&analysis.cells)?),
        (AGGREGATES_FILE, json_bytes(&analysis.aggregates_json)),
        (SENSITIVITY_FILE, json_bytes(&analysis.sensitivity_json)),
        (EVENTSTUDY_FILE, eventstudy_csv(&analysis.aggregates)?),
    ];
    let mut written = Vec::new();
    let mut checksums = Map::new();
    for (name, bytes) in &files {
        written.push(write_file(&dir, name, bytes)?);
        checksums.insert(name.to_string(), json!(sha256_hex(bytes)));
    }
    let cohorts: Vec<Value> = analysis
        .design
        .cohorts
        .iter()
        .zip(&analysis.design.cohort_sizes)
        .map(|(g, n)| json!({ "g": g, "n": n }))
        .collect();
    let manifest = json!({
        "tool": "stagdid",
        "cli_version": env!("CARGO_PKG_VERSION"),
        "core_version": stagdid::VERSION,
        "created": chrono::Utc::now().to_rfc3339(),
        "config": config,
        "seed": config.seed,
        "input": {
            "path": config.input,
            "sha256": sha256_hex(&input),
            "n_units": panel.n_units(),
            "n_periods": panel.n_periods(),
            "period_labels": panel.period_labels(),
            "cohorts": cohorts,
            "n_never": analysis.design.n_never,
        },
        "outputs": checksums,
    });
    written.push(write_file(&dir, MANIFEST_FILE, &json_bytes(&manifest))?);
    Ok(written)
}

/// Analysis restricted to the sensitivity report.
pub fn sensitivity(config: &RunConfig) -> CliResult<PathBuf> {
    let (_, panel) = load(config)?;
    let dir = prepare_dir(config)?;
    let analysis = analyze(&panel, config)?;
    write_file(
        &dir,
        SENSITIVITY_FILE,
        &json_bytes(&analysis.sensitivity_json),
    )
}

/// Validate an input file and summarise its layout.
pub fn validate(
    input: &Path,
    columns: &ColumnMap,
    covariates: &[String],
    squared: &[String],
) -> CliResult<Value> {
    let bytes = fs::read(input).map_err(|e| CliError::io(input, e))?;
    let panel = read_panel(bytes.as_slice(), columns, covariates, squared)?;
    let mut sizes = std::collections::BTreeMap::new();
    for c in panel.cohorts() {
        let key = match c {
            Cohort::Never => "never".to_string(),
            Cohort::First(g) => panel.period_labels()[g - 1].to_string(),
        };
        *sizes.entry(key).or_insert(0usize) += 1;
    }
    Ok(json!({
        "valid": true,
        "n_units": panel.n_units(),
        "n_periods": panel.n_periods(),
        "period_labels": panel.period_labels(),
        "cohort_sizes": sizes,
        "covariates": panel.covariate_names(),
        "sha256": sha256_hex(&bytes),
    }))
}

/// Generate a synthetic panel from a scenario file; writes `panel.csv` and
/// `truth.json`.
pub fn simulate(scenario: &Path, seed: Option<u64>, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let text = fs::read_to_string(scenario).map_err(|e| CliError::io(scenario, e))?;
    let mut spec: ScenarioSpec = serde_json::from_str(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (panel, truth) = gen_panel(&spec)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut csv = Vec::new();
    write_panel(&mut csv, &panel)?;
    Ok(vec![
        write_file(out_dir, PANEL_FILE, &csv)?,
        write_file(out_dir, TRUTH_FILE, &json_bytes(&to_value(&truth)))?,
    ])
}
