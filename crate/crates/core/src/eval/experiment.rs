//! Config-driven experiment suites: ours vs retrain oracle vs reference
//! baselines over deletion scenarios, repeated across seeds.
//!
//! Seed derivation is part of the reproducibility contract: every row mixes
//! its indices into the master seed with [`derive_seed`] (a splitmix64
//! finalizer), so identical plans produce identical reports except for
//! wall-clock fields.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datagen::{
    attach_sensitive_from_background, generate_scm_dataset, load_tabular_csv, make_deletion,
    split_train_test, CsvSchema, Dataset, Partition, Scenario, ScmSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    disparate_impact, equal_opportunity_difference, forgetting_accuracy, mia_score,
    remaining_accuracy, semantic_redistribution, train_mia_attacker,
};
use crate::exec::{derive_seed, par_map};
use crate::model::{init_model, train_baseline, ModelParams, TrainConfig};
use crate::unlearn::{unlearn, UnlearnConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Where the experiment's data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Scm {
        spec: ScmSpec,
        /// Attach a sensitive attribute derived from these backgrounds.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        privileged_backgrounds: Option<Vec<usize>>,
    },
    Csv {
        path: String,
        schema: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_widths: Vec<usize>,
    pub train: TrainConfig,
}

/// An unlearning method under evaluation. `Ours` carries optional loss-weight
/// overrides for ablation rows; the parse syntax is
/// `ours[:alpha=A][,beta=B][,gamma=C]` with `gamma` naming the retain
/// cross-entropy weight.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Ours {
        alpha: Option<f64>,
        beta: Option<f64>,
        gamma_loss: Option<f64>,
    },
    Retrain,
    NaiveFinetune,
    RandomRelabel,
}

impl Method {
    pub fn parse(tag: &str) -> Result<Method> {
        match tag {
            "ours" => Ok(Method::Ours {
                alpha: None,
                beta: None,
                gamma_loss: None,
            }),
            "retrain" => Ok(Method::Retrain),
            "naive-finetune" => Ok(Method::NaiveFinetune),
            "random-relabel" => Ok(Method::RandomRelabel),
            _ => {
                let rest = tag.strip_prefix("ours:").ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "unknown method '{tag}' (expected ours, retrain, naive-finetune, \
                         random-relabel, or ours:<overrides>)"
                    ))
                })?;
                let mut alpha = None;
                let mut beta = None;
                let mut gamma_loss = None;
                for part in rest.split(',') {
                    let (key, value) = part.split_once('=').ok_or_else(|| {
                        Error::InvalidConfig(format!("bad method override '{part}' in '{tag}'"))
                    })?;
                    let value: f64 = value.parse().map_err(|_| {
                        Error::InvalidConfig(format!("bad number '{value}' in '{tag}'"))
                    })?;
                    match key {
                        "alpha" => alpha = Some(value),
                        "beta" => beta = Some(value),
                        "gamma" | "gamma_loss" => gamma_loss = Some(value),
                        _ => {
                            return Err(Error::InvalidConfig(format!(
                                "unknown override key '{key}' in '{tag}'"
                            )))
                        }
                    }
                }
                Ok(Method::Ours {
                    alpha,
                    beta,
                    gamma_loss,
                })
            }
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Method::Retrain => "retrain".into(),
            Method::NaiveFinetune => "naive-finetune".into(),
            Method::RandomRelabel => "random-relabel".into(),
            Method::Ours {
                alpha,
                beta,
                gamma_loss,
            } => {
                let mut parts = Vec::new();
                if let Some(a) = alpha {
                    parts.push(format!("alpha={a}"));
                }
                if let Some(b) = beta {
                    parts.push(format!("beta={b}"));
                }
                if let Some(g) = gamma_loss {
                    parts.push(format!("gamma={g}"));
                }
                if parts.is_empty() {
                    "ours".into()
                } else {
                    format!("ours:{}", parts.join(","))
                }
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.tag())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let tag = String::deserialize(deserializer)?;
        Method::parse(&tag).map_err(D::Error::custom)
    }
}

/// Everything needed to run a suite; the CLI wraps this with output-directory
/// and manifest concerns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: DatasetSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub model: ModelSpec,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub master_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_repetitions() -> usize {
    5
}

impl ExperimentPlan {
    /// Collect every validation error instead of stopping at the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        match &self.dataset {
            DatasetSource::Scm { spec, .. } => {
                if let Err(e) = spec.validate() {
                    errors.push(format!("dataset.scm: {e}"));
                }
            }
            DatasetSource::Csv { path, schema } => {
                if path.is_empty() {
                    errors.push("dataset.csv: empty path".into());
                }
                if schema.is_empty() {
                    errors.push("dataset.csv: empty schema path".into());
                }
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            errors.push(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            ));
        }
        if self.scenarios.is_empty() {
            errors.push("scenarios: list is empty".into());
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            if let Err(e) = s.validate() {
                errors.push(format!("scenarios[{i}]: {e}"));
            }
        }
        if self.methods.is_empty() {
            errors.push("methods: list is empty".into());
        }
        if self.repetitions == 0 {
            errors.push("repetitions must be at least 1".into());
        }
        if let Err(e) = self.unlearn.validate() {
            errors.push(format!("unlearn: {e}"));
        }
        if self.model.hidden_widths.iter().any(|&w| w == 0) {
            errors.push("model.hidden_widths: zero-width layer".into());
        }
        errors
    }

    pub fn validate(&self) -> Result<()> {
        let errors = self.validation_errors();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors.join("; ")))
        }
    }
}

/// One evaluated (method, scenario, repetition) row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub method: String,
    pub scenario: String,
    pub rep: usize,
    /// Derived per-row seed (reproduction handle).
    pub seed: u64,
    pub deletion_fraction: Option<f64>,
    pub ra: Option<f64>,
    pub fa: Option<f64>,
    pub mia: Option<f64>,
    pub rte_seconds: Option<f64>,
    pub di: Option<f64>,
    pub eod: Option<f64>,
    pub redistribution: Option<f64>,
    pub failure: Option<String>,
}

struct PreparedRep {
    train: Dataset,
    test: Dataset,
    teacher: ModelParams,
}

fn load_source(plan: &ExperimentPlan, rep: usize) -> Result<Dataset> {
    match &plan.dataset {
        DatasetSource::Scm {
            spec,
            privileged_backgrounds,
        } => {
            let seed = derive_seed(plan.master_seed, 1000 + rep as u64);
            let ds = generate_scm_dataset(spec, seed)?;
            match privileged_backgrounds {
                Some(bgs) => attach_sensitive_from_background(&ds, bgs),
                None => Ok(ds),
            }
        }
        DatasetSource::Csv { path, schema } => {
            let schema = CsvSchema::from_file(schema)?;
            load_tabular_csv(path, &schema)
        }
    }
}

fn prepare_rep(plan: &ExperimentPlan, rep: usize) -> Result<PreparedRep> {
    let dataset = load_source(plan, rep)?;
    let split_seed = derive_seed(plan.master_seed, 2000 + rep as u64);
    let (train, test) = split_train_test(&dataset, plan.test_fraction, split_seed)?;
    let teacher_seed = derive_seed(plan.master_seed, 3000 + rep as u64);
    let init = init_model(
        train.num_features(),
        &plan.model.hidden_widths,
        train.num_classes(),
        teacher_seed,
    )?;
    let train_cfg = TrainConfig {
        seed: teacher_seed,
        ..plan.model.train.clone()
    };
    let teacher = train_baseline(&init, train.features.view(), &train.labels, &train_cfg)?;
    Ok(PreparedRep {
        train,
        test,
        teacher,
    })
}

/// Run one method on a prepared partition; returns the model and its RTE.
fn run_method(
    method: &Method,
    plan: &ExperimentPlan,
    prep: &PreparedRep,
    partition: &Partition,
    seed: u64,
) -> Result<(ModelParams, f64)> {
    match method {
        Method::Ours {
            alpha,
            beta,
            gamma_loss,
        } => {
            let mut cfg = plan.unlearn.clone();
            cfg.seed = seed;
            cfg.cf_search.seed = derive_seed(seed, 0xCF);
            if let Some(a) = alpha {
                cfg.alpha = *a;
            }
            if let Some(b) = beta {
                cfg.beta = *b;
            }
            if let Some(g) = gamma_loss {
                cfg.gamma_loss = *g;
            }
            let out = unlearn(&prep.teacher, &prep.train, partition, &cfg, None)?;
            Ok((out.student, out.rte_seconds))
        }
        Method::Retrain => {
            let t0 = Instant::now();
            let retain_ds = prep.train.subset(&partition.retain_indices);
            let init = init_model(
                retain_ds.num_features(),
                &plan.model.hidden_widths,
                retain_ds.num_classes(),
                seed,
            )?;
            let cfg = TrainConfig {
                seed,
                ..plan.model.train.clone()
            };
            let model =
                train_baseline(&init, retain_ds.features.view(), &retain_ds.labels, &cfg)?;
            Ok((model, round_ms(t0.elapsed().as_secs_f64())))
        }
        Method::NaiveFinetune => {
            let t0 = Instant::now();
            let retain_ds = prep.train.subset(&partition.retain_indices);
            let cfg = TrainConfig {
                learning_rate: plan.unlearn.learning_rate,
                epochs: plan.unlearn.epochs,
                batch_size: plan.unlearn.batch_size.min(retain_ds.num_rows()),
                seed,
                optimizer: plan.unlearn.optimizer,
            };
            let model = train_baseline(
                &prep.teacher,
                retain_ds.features.view(),
                &retain_ds.labels,
                &cfg,
            )?;
            Ok((model, round_ms(t0.elapsed().as_secs_f64())))
        }
        Method::RandomRelabel => {
            let t0 = Instant::now();
            let mut labels = prep.train.labels.clone();
            let k = prep.train.num_classes();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBAD));
            for &i in &partition.forget_indices {
                let mut new_label = rng.random_range(0..k - 1);
                if new_label >= labels[i] {
                    new_label += 1; // uniform over wrong labels
                }
                labels[i] = new_label;
            }
            let cfg = TrainConfig {
                learning_rate: plan.unlearn.learning_rate,
                epochs: plan.unlearn.epochs,
                batch_size: plan.unlearn.batch_size.min(prep.train.num_rows()),
                seed,
                optimizer: plan.unlearn.optimizer,
            };
            let model =
                train_baseline(&prep.teacher, prep.train.features.view(), &labels, &cfg)?;
            Ok((model, round_ms(t0.elapsed().as_secs_f64())))
        }
    }
}

fn round_ms(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

fn evaluate_row(
    model: &ModelParams,
    rte_seconds: f64,
    prep: &PreparedRep,
    partition: &Partition,
) -> Result<RowMetrics> {
    let ra = remaining_accuracy(model, &prep.train, &partition.retain_indices)?;
    let fa = forgetting_accuracy(model, &prep.train, &partition.forget_indices)?;
    let members = prep
        .train
        .features
        .select(ndarray::Axis(0), &partition.retain_indices);
    let attacker = train_mia_attacker(model, members.view(), prep.test.features.view())?;
    let mia = mia_score(&attacker, model, &prep.train, &partition.forget_indices)?;
    let redistribution = semantic_redistribution(model, &prep.train, &partition.forget_indices)?;
    let test_rows: Vec<usize> = (0..prep.test.num_rows()).collect();
    let (di, eod) = if prep.test.sensitive.is_some() {
        (
            disparate_impact(model, &prep.test, &test_rows)?,
            equal_opportunity_difference(model, &prep.test, &test_rows)?,
        )
    } else {
        (None, None)
    };
    Ok(RowMetrics {
        ra,
        fa,
        mia,
        rte_seconds,
        di,
        eod,
        redistribution,
    })
}

struct RowMetrics {
    ra: f64,
    fa: f64,
    mia: f64,
    rte_seconds: f64,
    di: Option<f64>,
    eod: Option<f64>,
    redistribution: f64,
}

/// Run the full suite: every (method, scenario, repetition) combination.
/// Failed rows carry a failure tag; the suite continues.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Vec<MetricsReport>> {
    plan.validate()?;
    let reps: Vec<usize> = (0..plan.repetitions).collect();
    let prepared: Vec<Result<PreparedRep>> = par_map(&reps, |&rep| prepare_rep(plan, rep));

    #[derive(Clone, Copy)]
    struct RowSpec {
        rep: usize,
        scenario_idx: usize,
        method_idx: usize,
    }
    let mut specs = Vec::new();
    for rep in 0..plan.repetitions {
        for scenario_idx in 0..plan.scenarios.len() {
            for method_idx in 0..plan.methods.len() {
                specs.push(RowSpec {
                    rep,
                    scenario_idx,
                    method_idx,
                });
            }
        }
    }

    let mut reports: Vec<MetricsReport> = par_map(&specs, |spec| {
        let scenario = &plan.scenarios[spec.scenario_idx];
        let method = &plan.methods[spec.method_idx];
        let partition_seed = derive_seed(
            plan.master_seed,
            4000 + (spec.rep as u64) * 100 + spec.scenario_idx as u64,
        );
        let method_seed = derive_seed(partition_seed, 1 + spec.method_idx as u64);
        let mut report = MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.tag(),
            scenario: scenario.to_string(),
            rep: spec.rep,
            seed: method_seed,
            deletion_fraction: None,
            ra: None,
            fa: None,
            mia: None,
            rte_seconds: None,
            di: None,
            eod: None,
            redistribution: None,
            failure: None,
        };
        let prep = match &prepared[spec.rep] {
            Ok(p) => p,
            Err(e) => {
                report.failure = Some(format!("rep preparation failed: {e}"));
                return report;
            }
        };
        let outcome = make_deletion(&prep.train, scenario, partition_seed).and_then(|partition| {
            report.deletion_fraction =
                Some(partition.forget_indices.len() as f64 / prep.train.num_rows() as f64);
            let (model, rte) = run_method(method, plan, prep, &partition, method_seed)?;
            evaluate_row(&model, rte, prep, &partition)
        });
        match outcome {
            Ok(m) => {
                report.ra = Some(m.ra);
                report.fa = Some(m.fa);
                report.mia = Some(m.mia);
                report.rte_seconds = Some(m.rte_seconds);
                report.di = m.di;
                report.eod = m.eod;
                report.redistribution = Some(m.redistribution);
            }
            Err(e) => report.failure = Some(e.to_string()),
        }
        report
    });

    // canonical order: scenario, then method, then repetition
    reports.sort_by(|a, b| {
        (&a.scenario, &a.method, a.rep).cmp(&(&b.scenario, &b.method, b.rep))
    });
    Ok(reports)
}

/// Serialize reports as a JSON array.
pub fn write_reports_json(reports: &[MetricsReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(reports)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_reports_json(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Serialize reports as CSV with a fixed column order.
pub fn write_reports_csv(reports: &[MetricsReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(
        "schema_version,method,scenario,rep,seed,deletion_fraction,ra,fa,mia,rte_seconds,di,eod,redistribution,failure\n",
    );
    let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        writeln!(
            out,
            "{},{},\"{}\",{},{},{},{},{},{},{},{},{},{},{}",
            r.schema_version,
            r.method,
            r.scenario,
            r.rep,
            r.seed,
            fmt(&r.deletion_fraction),
            fmt(&r.ra),
            fmt(&r.fa),
            fmt(&r.mia),
            fmt(&r.rte_seconds),
            fmt(&r.di),
            fmt(&r.eod),
            fmt(&r.redistribution),
            r.failure.clone().unwrap_or_default()
        )
        .expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `(x, y, series)` triples for the RA-vs-deletion-fraction figure.
pub fn plot_ra_vs_fraction(reports: &[MetricsReport]) -> Vec<(String, f64, String)> {
    reports
        .iter()
        .filter(|r| r.failure.is_none())
        .filter_map(|r| {
            Some((
                format!("{:.4}", r.deletion_fraction?),
                r.ra?,
                r.method.clone(),
            ))
        })
        .collect()
}

/// `(x, y, series)` triples for the DI bar figure.
pub fn plot_di_bars(reports: &[MetricsReport]) -> Vec<(String, f64, String)> {
    reports
        .iter()
        .filter(|r| r.failure.is_none())
        .filter_map(|r| Some((r.method.clone(), r.di?, r.scenario.clone())))
        .collect()
}

pub fn write_plot_csv(points: &[(String, f64, String)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("x,y,series\n");
    for (x, y, series) in points {
        writeln!(out, "{x},{y},{series}").expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean of a metric over successful rows matching a (method, scenario) pair.
pub fn mean_metric<F: Fn(&MetricsReport) -> Option<f64>>(
    reports: &[MetricsReport],
    method: &str,
    scenario_contains: &str,
    metric: F,
) -> Option<f64> {
    let values: Vec<f64> = reports
        .iter()
        .filter(|r| r.method == method && r.scenario.contains(scenario_contains))
        .filter_map(metric)
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
