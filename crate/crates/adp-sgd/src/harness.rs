//! Experiment orchestration: synthetic data, flat-file configs, seed-parallel
//! DP-vs-ADP comparisons at a shared privacy budget, bound evaluation, and
//! report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{audit_forward, calibrate_noise_for_budget, AccountantParams, PrivacyBudget};
use crate::bounds::{bound_adaptive, bound_constant, bound_decay, BoundInputs, BoundVariant};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::models::{estimate_bounds, full_loss_and_grad, Activation, Dataset, ModelSpec};
use crate::optimizer::{run_capturing, OptimizerConfig, RunLog};
use crate::rng::{derive_seed, seeded_rng};
use crate::schedules::{precompute_alphas, Boost, NoiseScaleSchedule, StepsizeSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Linreg,
    Logreg,
}

/// Where the dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic {
        n: u64,
        p: u64,
        model: SyntheticKind,
        noise: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

/// Either a target budget (noise is calibrated per arm) or an explicit
/// per-step noise standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrivacySpec {
    Budget { eps: f64, delta: f64 },
    Sigma { sigma: f64 },
}

/// One comparison arm: a stepsize schedule paired with a noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub id: String,
    pub step: StepsizeSchedule,
    pub noise: NoiseScaleSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub eta: f64,
    pub iterations: u64,
    pub batch_size: u64,
    pub clip_radius: Option<f64>,
    pub full_eval_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerSettings,
    pub privacy: PrivacySpec,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// Per-seed outcome inside an arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed_index: usize,
    pub run_seed: u64,
    pub tau: Option<u64>,
    pub min_grad_norm_sq: Option<f64>,
    pub final_grad_norm_sq: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm_id: String,
    pub sigma: f64,
    pub achieved: Option<PrivacyBudget>,
    pub bound_value: Option<f64>,
    pub mean_min_grad_norm_sq: Option<f64>,
    pub std_min_grad_norm_sq: Option<f64>,
    pub mean_final_loss: Option<f64>,
    pub std_final_loss: Option<f64>,
    pub seeds: Vec<SeedSummary>,
    /// Full per-run logs; emitted as separate CSV files, not serialized.
    #[serde(skip)]
    pub run_logs: Vec<Option<RunLog>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: ExperimentConfig,
    /// Gradient bound used for calibration (clip radius, or probed).
    pub grad_bound: f64,
    pub arms: Vec<ArmReport>,
}

/// Gaussian features with labels from a seeded unit-norm planted parameter:
/// `x^T theta* + N(0, noise^2)` for linreg, `Bernoulli(sigmoid(x^T theta*))`
/// for logreg.
pub fn generate_synthetic(n: u64, p: u64, kind: SyntheticKind, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || p == 0 {
        return Err(Error::invalid("synthetic data needs n >= 1 and p >= 1"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::invalid("noise level must be >= 0"));
    }
    let mut rng = seeded_rng(derive_seed(seed, "synthetic", 0));
    let (n, p) = (n as usize, p as usize);
    let mut star: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ns = norm(&star);
    if ns > 0.0 {
        for s in star.iter_mut() {
            *s /= ns;
        }
    }
    let mut features = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: f64 = row.iter().zip(&star).map(|(x, s)| x * s).sum();
        let label = match kind {
            SyntheticKind::Linreg => {
                let e: f64 = StandardNormal.sample(&mut rng);
                z + noise * e
            }
            SyntheticKind::Logreg => {
                let prob = 1.0 / (1.0 + (-z).exp());
                if rng.gen::<f64>() < prob {
                    1.0
                } else {
                    0.0
                }
            }
        };
        features.extend_from_slice(&row);
        labels.push(label);
    }
    Dataset::new(features, labels, n, p)
}

pub fn load_dataset(spec: &DataSpec) -> Result<Dataset> {
    match spec {
        DataSpec::Synthetic {
            n,
            p,
            model,
            noise,
            seed,
        } => generate_synthetic(*n, *p, *model, *noise, *seed),
        DataSpec::Csv { path } => Dataset::read_csv(path),
    }
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (Some(mean), Some(var.sqrt()))
}

/// The closed-form bound matching an arm's schedule pair, when one exists.
fn matching_bound(inputs: &BoundInputs, arm: &Arm) -> Option<f64> {
    match (&arm.step, &arm.noise) {
        (StepsizeSchedule::PolynomialDecay { .. }, NoiseScaleSchedule::SqrtOfB) => {
            bound_decay(inputs, BoundVariant::Adp).ok()
        }
        (StepsizeSchedule::PolynomialDecay { .. }, NoiseScaleSchedule::ConstantOne) => {
            bound_decay(inputs, BoundVariant::Dp).ok()
        }
        (StepsizeSchedule::AdaGradNorm { .. }, NoiseScaleSchedule::PolynomialQuarter { .. }) => {
            bound_adaptive(inputs, BoundVariant::Adp).ok()
        }
        (StepsizeSchedule::AdaGradNorm { .. }, NoiseScaleSchedule::ConstantOne) => {
            bound_adaptive(inputs, BoundVariant::Dp).ok()
        }
        (StepsizeSchedule::Constant { .. }, NoiseScaleSchedule::ConstantOne) => {
            bound_constant(inputs).ok()
        }
        _ => None,
    }
}

/// Gradient bound used for sensitivity: the clipping radius when set,
/// otherwise a probe-based estimate.
fn resolve_grad_bound(config: &ExperimentConfig, model: &ModelSpec, data: &Dataset) -> Result<f64> {
    if let Some(c) = config.optimizer.clip_radius {
        return Ok(c);
    }
    let est = estimate_bounds(model, data, 32, 2.0, 17)?;
    if est.degenerate {
        return Err(Error::domain(
            "cannot infer a gradient bound from degenerate data; set a clipping radius",
        ));
    }
    Ok(est.g_hat)
}

pub fn bound_inputs_for(
    config: &ExperimentConfig,
    model: &ModelSpec,
    data: &Dataset,
    grad_bound: f64,
    budget: &PrivacyBudget,
) -> Result<BoundInputs> {
    let d = model.param_dim(data.p())? as u64;
    let est = estimate_bounds(model, data, 32, 2.0, 17)?;
    let theta0 = vec![0.0; d as usize];
    let (f0, _) = full_loss_and_grad(model, &theta0, data)?;
    // F* is unknown in general; both losses here are nonnegative, so F* >= 0
    // and D_F <= F(theta_0). Using F(theta_0) keeps the bounds valid.
    let (a, c) = match &config.arms.first().map(|x| &x.step) {
        Some(StepsizeSchedule::PolynomialDecay { a, c }) => (*a, *c),
        _ => (1.0, 1.0),
    };
    let (b0, nu) = config
        .arms
        .iter()
        .find_map(|arm| match &arm.step {
            StepsizeSchedule::AdaGradNorm { b0, nu, .. } => Some((*b0, *nu)),
            _ => None,
        })
        .unwrap_or((1.0, 1e-5));
    let c_alpha = config
        .arms
        .iter()
        .find_map(|arm| match &arm.noise {
            NoiseScaleSchedule::PolynomialQuarter { c, .. } => Some(*c),
            _ => None,
        })
        .unwrap_or(1e-3);
    Ok(BoundInputs {
        g: grad_bound,
        l: est.exact_l.unwrap_or(est.l_hat),
        d_f: f0,
        eta: config.optimizer.eta,
        d,
        n: data.n() as u64,
        epsilon: budget.epsilon,
        delta: budget.delta,
        iterations: config.optimizer.iterations,
        a,
        c,
        b0,
        nu,
        c_alpha,
    })
}

/// Runs every arm over every seed and assembles the report. Arms share one
/// calibration target; per-run failures are recorded without aborting the
/// other runs.
pub fn run_comparison(config: &ExperimentConfig) -> Result<ComparisonReport> {
    run_comparison_with_parallelism(config, true)
}

/// Sequential variant used to check that the report is independent of the
/// degree of parallelism.
pub fn run_comparison_sequential(config: &ExperimentConfig) -> Result<ComparisonReport> {
    run_comparison_with_parallelism(config, false)
}

fn run_comparison_with_parallelism(config: &ExperimentConfig, parallel: bool) -> Result<ComparisonReport> {
    if config.arms.is_empty() {
        return Ok(ComparisonReport {
            config: config.clone(),
            grad_bound: 0.0,
            arms: Vec::new(),
        });
    }
    if config.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let data = load_dataset(&config.data)?;
    let model = &config.model;
    let d = model.param_dim(data.p())?;
    let grad_bound = resolve_grad_bound(config, model, &data)?;
    for arm in &config.arms {
        arm.step.validate()?;
        arm.step.validate_against_grad_bound(grad_bound)?;
        arm.noise.validate()?;
    }

    let budget = match config.privacy {
        PrivacySpec::Budget { eps, delta } => Some(PrivacyBudget::new(eps, delta)?),
        PrivacySpec::Sigma { .. } => None,
    };
    let bound_in = budget
        .as_ref()
        .map(|b| bound_inputs_for(config, model, &data, grad_bound, b))
        .transpose()?;

    let mut arm_reports = Vec::with_capacity(config.arms.len());
    for arm in &config.arms {
        let alphas = precompute_alphas(&arm.noise, &arm.step, config.optimizer.iterations)?;
        let (sigma, achieved) = match (&config.privacy, &budget) {
            (PrivacySpec::Sigma { sigma }, _) => (*sigma, None),
            (PrivacySpec::Budget { .. }, Some(b)) => {
                let params = AccountantParams::for_budget(
                    data.n() as u64,
                    config.optimizer.batch_size,
                    config.optimizer.iterations,
                    grad_bound,
                    b,
                )?;
                let sigma_sq = calibrate_noise_for_budget(&alphas, &params, b)?;
                let sigma = sigma_sq.sqrt();
                (sigma, Some(audit_forward(&alphas, sigma, &params)?))
            }
            _ => unreachable!("budget parsed above"),
        };

        let opt = OptimizerConfig {
            eta: config.optimizer.eta,
            iterations: config.optimizer.iterations,
            batch_size: config.optimizer.batch_size,
            clip_radius: config.optimizer.clip_radius,
            step_schedule: arm.step.clone(),
            noise_schedule: arm.noise.clone(),
            sigma,
            seed: 0, // replaced per seed
            b_from_raw_grad: false,
            full_eval_every: config.optimizer.full_eval_every,
        };

        let one_seed = |(i, &s): (usize, &u64)| -> (SeedSummary, Option<RunLog>) {
            let run_seed = derive_seed(s, &arm.id, i as u64);
            let mut cfg = opt.clone();
            cfg.seed = run_seed;
            let (log, err) = run_capturing(&cfg, model, &data, vec![0.0; d]);
            let summary = SeedSummary {
                seed_index: i,
                run_seed,
                tau: log.as_ref().and_then(|l| l.summary.tau),
                min_grad_norm_sq: log.as_ref().and_then(|l| l.summary.min_grad_norm_sq),
                final_grad_norm_sq: log.as_ref().and_then(|l| l.summary.final_grad_norm_sq),
                final_loss: log.as_ref().and_then(|l| l.summary.final_loss),
                error: err.map(|e| e.to_string()),
            };
            (summary, log)
        };

        let results: Vec<(SeedSummary, Option<RunLog>)> = if parallel {
            config.seeds.par_iter().enumerate().map(one_seed).collect()
        } else {
            config.seeds.iter().enumerate().map(one_seed).collect()
        };

        let (seeds, run_logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let mins: Vec<f64> = seeds.iter().filter_map(|s| s.min_grad_norm_sq).collect();
        let finals: Vec<f64> = seeds.iter().filter_map(|s| s.final_loss).collect();
        let (mean_min, std_min) = mean_std(&mins);
        let (mean_fin, std_fin) = mean_std(&finals);
        arm_reports.push(ArmReport {
            arm_id: arm.id.clone(),
            sigma,
            achieved,
            bound_value: bound_in.as_ref().and_then(|bi| matching_bound(bi, arm)),
            mean_min_grad_norm_sq: mean_min,
            std_min_grad_norm_sq: std_min,
            mean_final_loss: mean_fin,
            std_final_loss: std_fin,
            seeds,
            run_logs,
        });
    }

    Ok(ComparisonReport {
        config: config.clone(),
        grad_bound,
        arms: arm_reports,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

/// Writes `report.json`, `summary.csv` (one row per arm), and one RunLog
/// CSV per completed run. Re-emitting the same report is byte-identical.
pub fn emit_report(report: &ComparisonReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let mut csv = String::from("arm_id,mean,std,achieved_eps,bound_value\n");
    for arm in &report.arms {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            arm.arm_id,
            fmt_opt(arm.mean_min_grad_norm_sq),
            fmt_opt(arm.std_min_grad_norm_sq),
            fmt_opt(arm.achieved.map(|a| a.epsilon)),
            fmt_opt(arm.bound_value),
        ));
    }
    let csv_path = dir.join("summary.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    for arm in &report.arms {
        for (seed, log) in arm.seeds.iter().zip(&arm.run_logs) {
            if let Some(log) = log {
                let path = dir.join(format!("runlog_{}_{:02}.csv", arm.arm_id, seed.seed_index));
                fs::write(&path, log.to_csv_string())
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
    }
    Ok(())
}

/// Parsed rows of `summary.csv`, for round-trip checks and downstream tools.
pub fn parse_summary_csv(text: &str) -> Result<Vec<(String, Option<f64>, Option<f64>, Option<f64>, Option<f64>)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty summary".into()))?;
    if header != "arm_id,mean,std,achieved_eps,bound_value" {
        return Err(Error::Config(format!("unexpected summary header: {header}")));
    }
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::Config(format!("bad float {s}: {e}")))
        }
    };
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!("bad summary row: {line}")));
        }
        out.push((
            fields[0].to_string(),
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])?,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Flat key-value config format
// ---------------------------------------------------------------------------

/// Parses the flat `section.key = value` config format. Unknown keys are
/// rejected so typos fail loudly.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    build_config(&mut kv)
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

struct KvReader<'a> {
    kv: &'a mut BTreeMap<String, String>,
    used: Vec<String>,
}

impl<'a> KvReader<'a> {
    fn take(&mut self, key: &str) -> Option<String> {
        let v = self.kv.get(key).cloned();
        if v.is_some() {
            self.used.push(key.to_string());
        }
        v
    }

    fn req(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key: {key}")))
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Config(format!("{key}: {e}")))
            })
            .transpose()
    }

    fn f64_req(&mut self, key: &str) -> Result<f64> {
        self.f64(key)?
            .ok_or_else(|| Error::Config(format!("missing required key: {key}")))
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|e| Error::Config(format!("{key}: {e}")))
            })
            .transpose()
    }

    fn u64_req(&mut self, key: &str) -> Result<u64> {
        self.u64(key)?
            .ok_or_else(|| Error::Config(format!("missing required key: {key}")))
    }
}

fn parse_step_schedule(r: &mut KvReader, prefix: &str) -> Result<Option<StepsizeSchedule>> {
    let kind = match r.take(&format!("{prefix}.kind")) {
        Some(k) => k,
        None => return Ok(None),
    };
    let sched = match kind.as_str() {
        "constant" => StepsizeSchedule::Constant {
            b: r.f64_req(&format!("{prefix}.b"))?,
        },
        "poly" => StepsizeSchedule::PolynomialDecay {
            a: r.f64_req(&format!("{prefix}.a"))?,
            c: r.f64_req(&format!("{prefix}.c"))?,
        },
        "adagrad_norm" => {
            let beta = r.f64(&format!("{prefix}.beta"))?;
            let period = r.u64(&format!("{prefix}.beta_period"))?;
            let boost = match (beta, period) {
                (None, _) => Boost::None,
                (Some(b), None) => Boost::Constant { beta: b },
                (Some(b), Some(p)) => Boost::Sawtooth { beta: b, period: p },
            };
            StepsizeSchedule::AdaGradNorm {
                b0: r.f64_req(&format!("{prefix}.b0"))?,
                nu: r.f64_req(&format!("{prefix}.nu"))?,
                boost,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "{prefix}.kind must be constant|poly|adagrad_norm, got {other}"
            )))
        }
    };
    sched.validate()?;
    Ok(Some(sched))
}

fn parse_noise_schedule(r: &mut KvReader, prefix: &str) -> Result<Option<NoiseScaleSchedule>> {
    let kind = match r.take(&format!("{prefix}.kind")) {
        Some(k) => k,
        None => return Ok(None),
    };
    let sched = match kind.as_str() {
        "one" => NoiseScaleSchedule::ConstantOne,
        "sqrt_b" => NoiseScaleSchedule::SqrtOfB,
        "poly_quarter" => NoiseScaleSchedule::PolynomialQuarter {
            b0_sq: r.f64_req(&format!("{prefix}.b0_sq"))?,
            c: r.f64_req(&format!("{prefix}.C"))?,
        },
        other => {
            return Err(Error::Config(format!(
                "{prefix}.kind must be one|sqrt_b|poly_quarter, got {other}"
            )))
        }
    };
    sched.validate()?;
    Ok(Some(sched))
}

fn build_config(kv: &mut BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let mut r = KvReader {
        kv,
        used: Vec::new(),
    };

    let data = match r.req("data.kind")?.as_str() {
        "synthetic_linreg" | "synthetic_logreg" => {
            let model = if r.kv.get("data.kind").map(|s| s.as_str()) == Some("synthetic_linreg") {
                SyntheticKind::Linreg
            } else {
                SyntheticKind::Logreg
            };
            DataSpec::Synthetic {
                n: r.u64_req("data.n")?,
                p: r.u64_req("data.p")?,
                model,
                noise: r.f64("data.noise")?.unwrap_or(0.0),
                seed: r.u64("data.seed")?.unwrap_or(0),
            }
        }
        "csv" => DataSpec::Csv {
            path: PathBuf::from(r.req("data.path")?),
        },
        other => {
            return Err(Error::Config(format!(
                "data.kind must be synthetic_linreg|synthetic_logreg|csv, got {other}"
            )))
        }
    };

    let model = match r.req("model.kind")?.as_str() {
        "linreg" => ModelSpec::LinearRegressionMse,
        "logreg" => ModelSpec::LogisticRegression,
        "mlp" => {
            let layers: Vec<usize> = r
                .req("model.layers")?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Config(format!("model.layers: {e}")))
                })
                .collect::<Result<_>>()?;
            let activation = match r.req("model.activation")?.as_str() {
                "tanh" => Activation::Tanh,
                "relu" => Activation::Relu,
                other => {
                    return Err(Error::Config(format!(
                        "model.activation must be tanh|relu, got {other}"
                    )))
                }
            };
            ModelSpec::Mlp { layers, activation }
        }
        other => {
            return Err(Error::Config(format!(
                "model.kind must be linreg|logreg|mlp, got {other}"
            )))
        }
    };

    let optimizer = OptimizerSettings {
        eta: r.f64_req("optimizer.eta")?,
        iterations: r.u64_req("optimizer.iterations")?,
        batch_size: r.u64_req("optimizer.m")?,
        clip_radius: r.f64("optimizer.clip")?,
        full_eval_every: r.u64("optimizer.full_eval_every")?.unwrap_or(1),
    };

    let privacy = match (r.f64("privacy.eps")?, r.f64("privacy.delta")?, r.f64("optimizer.sigma")?) {
        (Some(eps), Some(delta), None) => PrivacySpec::Budget { eps, delta },
        (None, None, Some(sigma)) => PrivacySpec::Sigma { sigma },
        _ => {
            return Err(Error::Config(
                "specify either privacy.eps + privacy.delta, or optimizer.sigma".into(),
            ))
        }
    };

    let default_step = parse_step_schedule(&mut r, "schedule.step")?;
    let default_noise = parse_noise_schedule(&mut r, "noise")?;

    let arm_ids: Vec<String> = match r.take("arms") {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => vec!["default".to_string()],
    };
    let mut arms = Vec::with_capacity(arm_ids.len());
    for id in &arm_ids {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!("arm id must be [A-Za-z0-9_-]+, got '{id}'")));
        }
        let step = parse_step_schedule(&mut r, &format!("arm.{id}.step"))?
            .or_else(|| default_step.clone())
            .ok_or_else(|| {
                Error::Config(format!("arm '{id}' has no step schedule and no schedule.step.* default"))
            })?;
        let noise = parse_noise_schedule(&mut r, &format!("arm.{id}.noise"))?
            .or_else(|| default_noise.clone())
            .ok_or_else(|| {
                Error::Config(format!("arm '{id}' has no noise schedule and no noise.* default"))
            })?;
        arms.push(Arm {
            id: id.clone(),
            step,
            noise,
        });
    }

    let seeds: Vec<u64> = match r.take("seeds") {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::Config(format!("seeds: {e}")))
            })
            .collect::<Result<_>>()?,
        None => vec![0],
    };

    let output_dir = PathBuf::from(r.take("output.dir").unwrap_or_else(|| "out".into()));

    let used = r.used.clone();
    for key in kv.keys() {
        if !used.contains(key) {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
    }

    Ok(ExperimentConfig {
        data,
        model,
        optimizer,
        privacy,
        arms,
        seeds,
        output_dir,
    })
}

/// Serializes a config back to the flat key-value format. `parse_config`
/// of the result reproduces the config field-by-field.
pub fn serialize_config(config: &ExperimentConfig) -> String {
    let mut out = String::new();
    match &config.data {
        DataSpec::Synthetic {
            n,
            p,
            model,
            noise,
            seed,
        } => {
            let kind = match model {
                SyntheticKind::Linreg => "synthetic_linreg",
                SyntheticKind::Logreg => "synthetic_logreg",
            };
            out.push_str(&format!(
                "data.kind = {kind}\ndata.n = {n}\ndata.p = {p}\ndata.noise = {noise}\ndata.seed = {seed}\n"
            ));
        }
        DataSpec::Csv { path } => {
            out.push_str(&format!("data.kind = csv\ndata.path = {}\n", path.display()));
        }
    }
    match &config.model {
        ModelSpec::LinearRegressionMse => out.push_str("model.kind = linreg\n"),
        ModelSpec::LogisticRegression => out.push_str("model.kind = logreg\n"),
        ModelSpec::Mlp { layers, activation } => {
            let layers: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
            let act = match activation {
                Activation::Tanh => "tanh",
                Activation::Relu => "relu",
            };
            out.push_str(&format!(
                "model.kind = mlp\nmodel.layers = {}\nmodel.activation = {act}\n",
                layers.join(",")
            ));
        }
    }
    out.push_str(&format!(
        "optimizer.eta = {}\noptimizer.iterations = {}\noptimizer.m = {}\n",
        config.optimizer.eta, config.optimizer.iterations, config.optimizer.batch_size
    ));
    if let Some(c) = config.optimizer.clip_radius {
        out.push_str(&format!("optimizer.clip = {c}\n"));
    }
    out.push_str(&format!(
        "optimizer.full_eval_every = {}\n",
        config.optimizer.full_eval_every
    ));
    match &config.privacy {
        PrivacySpec::Budget { eps, delta } => {
            out.push_str(&format!("privacy.eps = {eps}\nprivacy.delta = {delta}\n"));
        }
        PrivacySpec::Sigma { sigma } => out.push_str(&format!("optimizer.sigma = {sigma}\n")),
    }
    let ids: Vec<&str> = config.arms.iter().map(|a| a.id.as_str()).collect();
    out.push_str(&format!("arms = {}\n", ids.join(",")));
    for arm in &config.arms {
        let p = format!("arm.{}.step", arm.id);
        match &arm.step {
            StepsizeSchedule::Constant { b } => {
                out.push_str(&format!("{p}.kind = constant\n{p}.b = {b}\n"));
            }
            StepsizeSchedule::PolynomialDecay { a, c } => {
                out.push_str(&format!("{p}.kind = poly\n{p}.a = {a}\n{p}.c = {c}\n"));
            }
            StepsizeSchedule::AdaGradNorm { b0, nu, boost } => {
                out.push_str(&format!("{p}.kind = adagrad_norm\n{p}.b0 = {b0}\n{p}.nu = {nu}\n"));
                match boost {
                    Boost::None => {}
                    Boost::Constant { beta } => out.push_str(&format!("{p}.beta = {beta}\n")),
                    Boost::Sawtooth { beta, period } => {
                        out.push_str(&format!("{p}.beta = {beta}\n{p}.beta_period = {period}\n"))
                    }
                    Boost::Custom { .. } => {} // not representable in the flat format
                }
            }
        }
        let p = format!("arm.{}.noise", arm.id);
        match &arm.noise {
            NoiseScaleSchedule::ConstantOne => out.push_str(&format!("{p}.kind = one\n")),
            NoiseScaleSchedule::SqrtOfB => out.push_str(&format!("{p}.kind = sqrt_b\n")),
            NoiseScaleSchedule::PolynomialQuarter { b0_sq, c } => {
                out.push_str(&format!("{p}.kind = poly_quarter\n{p}.b0_sq = {b0_sq}\n{p}.C = {c}\n"))
            }
        }
    }
    let seeds: Vec<String> = config.seeds.iter().map(|s| s.to_string()).collect();
    out.push_str(&format!("seeds = {}\n", seeds.join(",")));
    out.push_str(&format!("output.dir = {}\n", config.output_dir.display()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
# sample comparison config
data.kind = synthetic_logreg
data.n = 64
data.p = 4
data.noise = 0
data.seed = 3
model.kind = logreg
optimizer.eta = 1.0
optimizer.iterations = 40
optimizer.m = 8
optimizer.full_eval_every = 1
privacy.eps = 0.5
privacy.delta = 1e-5
schedule.step.kind = poly
schedule.step.a = 20
schedule.step.c = 1
arms = dp,adp
arm.dp.noise.kind = one
arm.adp.noise.kind = sqrt_b
seeds = 1,2
output.dir = /tmp/adp-out
";

    #[test]
    fn parse_sample_config() {
        let cfg = parse_config(SAMPLE).unwrap();
        assert_eq!(cfg.arms.len(), 2);
        assert_eq!(cfg.arms[0].id, "dp");
        assert_eq!(cfg.arms[1].noise, NoiseScaleSchedule::SqrtOfB);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert!(matches!(cfg.privacy, PrivacySpec::Budget { .. }));
    }

    #[test]
    fn config_round_trip() {
        let cfg = parse_config(SAMPLE).unwrap();
        let text = serialize_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{SAMPLE}\nschdule.step.kid = poly\n");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn synthetic_linreg_noiseless_identifiable() {
        // with zero label noise and n >= p, least squares recovers theta*
        // exactly, so the residual at the planted parameter is zero; verify
        // by checking that some theta achieves zero loss via the normal
        // equations residual being consistent: F at the planted theta* is 0.
        let data = generate_synthetic(50, 5, SyntheticKind::Linreg, 0.0, 9).unwrap();
        // recover theta* from 5 rows by Gaussian elimination
        let mut a = vec![vec![0.0; 6]; 5];
        for i in 0..5 {
            for j in 0..5 {
                a[i][j] = data.row(i)[j];
            }
            a[i][5] = data.label(i);
        }
        for col in 0..5 {
            let piv = (col..5).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap()).unwrap();
            a.swap(col, piv);
            let div = a[col][col];
            for j in col..6 {
                a[col][j] /= div;
            }
            for i in 0..5 {
                if i != col {
                    let f = a[i][col];
                    for j in col..6 {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
        let theta: Vec<f64> = (0..5).map(|i| a[i][5]).collect();
        let (loss, _) = full_loss_and_grad(&ModelSpec::LinearRegressionMse, &theta, &data).unwrap();
        assert!(loss < 1e-18, "loss = {loss}");
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic(20, 3, SyntheticKind::Logreg, 0.0, 42).unwrap();
        let b = generate_synthetic(20, 3, SyntheticKind::Logreg, 0.0, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logreg_label_mean_in_binomial_band() {
        let n = 4000;
        let data = generate_synthetic(n, 6, SyntheticKind::Logreg, 0.0, 5).unwrap();
        let mean_label: f64 = (0..n as usize).map(|i| data.label(i)).sum::<f64>() / n as f64;
        // mean sigmoid(z) with z ~ N(0,1) is exactly 1/2 by symmetry; the
        // empirical label mean differs by binomial noise plus sampling noise
        // in z, both O(1/sqrt(n)); allow 3 combined sigmas
        let sigma = 0.5 / (n as f64).sqrt() * 2.0;
        assert!(
            (mean_label - 0.5).abs() < 3.0 * sigma + 0.01,
            "mean = {mean_label}"
        );
    }

    #[test]
    fn empty_arm_list_yields_empty_report() {
        let mut cfg = parse_config(SAMPLE).unwrap();
        cfg.arms.clear();
        let report = run_comparison(&cfg).unwrap();
        assert!(report.arms.is_empty());
        let dir = std::env::temp_dir().join("adp_sgd_empty_report");
        emit_report(&report, &dir).unwrap();
        let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
        assert_eq!(summary, "arm_id,mean,std,achieved_eps,bound_value\n");
    }
}
