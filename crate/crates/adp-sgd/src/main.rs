use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::Rng;
use serde::Serialize;

use adp_sgd::accountant::{
    audit_forward, calibrate_noise_for_budget, compose_classical, compose_extended, gaussian_epsilon,
    gaussian_sigma, AccountantParams, PerStepPrivacy, PrivacyBudget,
};
use adp_sgd::bounds::{bound_adaptive, bound_constant, bound_decay, BoundVariant};
use adp_sgd::error::Error;
use adp_sgd::harness::{
    bound_inputs_for, emit_report, load_dataset, parse_config_file, run_comparison,
    ExperimentConfig, PrivacySpec,
};
use adp_sgd::models::{clip, full_loss_and_grad, Dataset, ModelSpec};
use adp_sgd::optimizer::{run as run_optimizer, OptimizerConfig};
use adp_sgd::rng::seeded_rng;
use adp_sgd::schedules::{m_adp, m_functional, precompute_alphas, NoiseScaleSchedule, StepsizeSchedule};

#[derive(Parser)]
#[command(
    name = "adp-sgd",
    about = "Differentially private SGD with stepsize-adapted noise scales",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate per-step noise to the config's privacy budget and print the
    /// forward audit for every arm.
    Calibrate { config: PathBuf },
    /// Run a single arm for a single seed and write its log.
    Run {
        config: PathBuf,
        /// Arm id (defaults to the first arm).
        #[arg(long)]
        arm: Option<String>,
        /// Overrides the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full arm-by-seed grid and emit report files.
    Compare { config: PathBuf },
    /// Evaluate the closed-form utility bounds for the config.
    Bounds { config: PathBuf },
    /// Run the built-in invariant suite.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::HypothesisViolation(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cmd: Command) -> adp_sgd::Result<()> {
    match cmd {
        Command::Calibrate { config } => calibrate_cmd(&parse_config_file(&config)?),
        Command::Run { config, arm, seed } => run_cmd(&parse_config_file(&config)?, arm, seed),
        Command::Compare { config } => compare_cmd(&parse_config_file(&config)?),
        Command::Bounds { config } => bounds_cmd(&parse_config_file(&config)?),
        Command::Selftest => selftest(),
    }
}

fn budget_of(config: &ExperimentConfig) -> adp_sgd::Result<PrivacyBudget> {
    match config.privacy {
        PrivacySpec::Budget { eps, delta } => PrivacyBudget::new(eps, delta),
        PrivacySpec::Sigma { .. } => Err(Error::Config(
            "this command needs privacy.eps and privacy.delta in the config".into(),
        )),
    }
}

fn grad_bound_of(config: &ExperimentConfig, data: &Dataset) -> adp_sgd::Result<f64> {
    if let Some(c) = config.optimizer.clip_radius {
        return Ok(c);
    }
    let est = adp_sgd::models::estimate_bounds(&config.model, data, 32, 2.0, 17)?;
    if est.degenerate {
        return Err(Error::domain(
            "cannot infer a gradient bound from degenerate data; set optimizer.clip",
        ));
    }
    Ok(est.g_hat)
}

fn calibrate_cmd(config: &ExperimentConfig) -> adp_sgd::Result<()> {
    let budget = budget_of(config)?;
    let data = load_dataset(&config.data)?;
    let g = grad_bound_of(config, &data)?;
    let params = AccountantParams::for_budget(
        data.n() as u64,
        config.optimizer.batch_size,
        config.optimizer.iterations,
        g,
        &budget,
    )?;
    println!(
        "target: eps = {}, delta = {}; G = {g}, delta_0 = {:.3e}, delta' = {:.3e}",
        budget.epsilon, budget.delta, params.delta_0, params.delta_prime
    );
    for arm in &config.arms {
        let alphas = precompute_alphas(&arm.noise, &arm.step, config.optimizer.iterations)?;
        let sigma_sq = calibrate_noise_for_budget(&alphas, &params, &budget)?;
        let sigma = sigma_sq.sqrt();
        let achieved = audit_forward(&alphas, sigma, &params)?;
        println!(
            "arm {:>8}: sigma^2 = {sigma_sq:.6e}  sigma = {sigma:.6e}  audit: (eps = {:.6}, delta = {:.3e})",
            arm.id, achieved.epsilon, achieved.delta
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RunSummaryFile<'a> {
    tau: Option<u64>,
    min_grad_norm_sq: Option<f64>,
    final_grad_norm_sq: Option<f64>,
    final_loss: Option<f64>,
    config: &'a OptimizerConfig,
    achieved: Option<PrivacyBudget>,
}

fn run_cmd(config: &ExperimentConfig, arm_id: Option<String>, seed: Option<u64>) -> adp_sgd::Result<()> {
    let arm = match &arm_id {
        Some(id) => config
            .arms
            .iter()
            .find(|a| &a.id == id)
            .ok_or_else(|| Error::Config(format!("no arm named '{id}'")))?,
        None => config
            .arms
            .first()
            .ok_or_else(|| Error::Config("config has no arms".into()))?,
    };
    let data = load_dataset(&config.data)?;
    let d = config.model.param_dim(data.p())?;
    let g = grad_bound_of(config, &data)?;
    let alphas = precompute_alphas(&arm.noise, &arm.step, config.optimizer.iterations)?;
    let (sigma, achieved) = match config.privacy {
        PrivacySpec::Sigma { sigma } => (sigma, None),
        PrivacySpec::Budget { .. } => {
            let budget = budget_of(config)?;
            let params = AccountantParams::for_budget(
                data.n() as u64,
                config.optimizer.batch_size,
                config.optimizer.iterations,
                g,
                &budget,
            )?;
            let sigma = calibrate_noise_for_budget(&alphas, &params, &budget)?.sqrt();
            (sigma, Some(audit_forward(&alphas, sigma, &params)?))
        }
    };
    let run_seed = seed.or_else(|| config.seeds.first().copied()).unwrap_or(0);
    let opt = OptimizerConfig {
        eta: config.optimizer.eta,
        iterations: config.optimizer.iterations,
        batch_size: config.optimizer.batch_size,
        clip_radius: config.optimizer.clip_radius,
        step_schedule: arm.step.clone(),
        noise_schedule: arm.noise.clone(),
        sigma,
        seed: run_seed,
        b_from_raw_grad: false,
        full_eval_every: config.optimizer.full_eval_every,
    };
    let log = run_optimizer(&opt, &config.model, &data, vec![0.0; d])?;
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(config.output_dir.display().to_string(), e))?;
    let csv_path = config.output_dir.join(format!("runlog_{}.csv", arm.id));
    fs::write(&csv_path, log.to_csv_string())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let summary = RunSummaryFile {
        tau: log.summary.tau,
        min_grad_norm_sq: log.summary.min_grad_norm_sq,
        final_grad_norm_sq: log.summary.final_grad_norm_sq,
        final_loss: log.summary.final_loss,
        config: &opt,
        achieved,
    };
    let json_path = config.output_dir.join(format!("run_summary_{}.json", arm.id));
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    println!(
        "arm {} seed {run_seed}: tau = {:?}, min ||grad F||^2 = {:?}, sigma = {sigma:.6e}",
        arm.id, log.summary.tau, log.summary.min_grad_norm_sq
    );
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn compare_cmd(config: &ExperimentConfig) -> adp_sgd::Result<()> {
    let report = run_comparison(config)?;
    emit_report(&report, &config.output_dir)?;
    for arm in &report.arms {
        println!(
            "arm {:>8}: mean min ||grad F||^2 = {}  (+/- {})  achieved eps = {}  bound = {}",
            arm.arm_id,
            arm.mean_min_grad_norm_sq.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into()),
            arm.std_min_grad_norm_sq.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into()),
            arm.achieved.map(|a| format!("{:.6}", a.epsilon)).unwrap_or_else(|| "-".into()),
            arm.bound_value.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into()),
        );
    }
    println!("report written to {}", config.output_dir.display());
    Ok(())
}

fn bounds_cmd(config: &ExperimentConfig) -> adp_sgd::Result<()> {
    let budget = budget_of(config)?;
    let data = load_dataset(&config.data)?;
    let g = grad_bound_of(config, &data)?;
    let inputs = bound_inputs_for(config, &config.model, &data, g, &budget)?;
    let mut bounds: BTreeMap<&str, f64> = BTreeMap::new();
    if let Ok(v) = bound_constant(&inputs) {
        bounds.insert("constant", v);
    }
    if config.arms.iter().any(|a| matches!(a.step, StepsizeSchedule::PolynomialDecay { .. })) {
        if let Ok(v) = bound_decay(&inputs, BoundVariant::Adp) {
            bounds.insert("decay_adp", v);
        }
        if let Ok(v) = bound_decay(&inputs, BoundVariant::Dp) {
            bounds.insert("decay_dp", v);
        }
    }
    if config.arms.iter().any(|a| matches!(a.step, StepsizeSchedule::AdaGradNorm { .. })) {
        if let Ok(v) = bound_adaptive(&inputs, BoundVariant::Adp) {
            bounds.insert("adaptive_adp", v);
        }
        if let Ok(v) = bound_adaptive(&inputs, BoundVariant::Dp) {
            bounds.insert("adaptive_dp", v);
        }
    }
    #[derive(Serialize)]
    struct BoundsOut<'a> {
        inputs: &'a adp_sgd::bounds::BoundInputs,
        bounds: &'a BTreeMap<&'a str, f64>,
    }
    let out = BoundsOut {
        inputs: &inputs,
        bounds: &bounds,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(|e| Error::Config(format!("json: {e}")))?
    );
    Ok(())
}

fn check(name: &str, ok: bool) -> adp_sgd::Result<()> {
    if ok {
        println!("PASS {name}");
        Ok(())
    } else {
        println!("FAIL {name}");
        Err(Error::Config(format!("selftest failed: {name}")))
    }
}

fn selftest() -> adp_sgd::Result<()> {
    let mut rng = seeded_rng(20240801);

    let mut ok = true;
    for _ in 0..1000 {
        let eps0 = rng.gen_range(0.001..0.999);
        let delta0 = rng.gen_range(0.0..1e-3);
        let k = rng.gen_range(1..1000u64);
        let dp = rng.gen_range(1e-8..0.5);
        let c = compose_classical(eps0, delta0, k, dp)?;
        let steps = PerStepPrivacy::new(vec![eps0; k as usize], vec![delta0; k as usize])?;
        let e = compose_extended(&steps, dp)?;
        ok &= (c.eps_tilde - e.eps_tilde).abs() <= 1e-12 * c.eps_tilde.max(1e-300);
        ok &= (c.delta_tilde - e.delta_tilde).abs() <= 1e-12 * c.delta_tilde.max(1e-300);
    }
    check("composition reduction (1000 random tuples)", ok)?;

    ok = true;
    for _ in 0..1000 {
        let delta = 10f64.powf(rng.gen_range(-8.0..-1.0));
        let eps = rng.gen_range(0.01..5.0);
        let sens = rng.gen_range(0.01..10.0);
        let budget = PrivacyBudget::new(eps, delta)?;
        let s = gaussian_sigma(sens, &budget)?;
        let back = gaussian_epsilon(sens, s, delta)?;
        ok &= (back - eps).abs() <= 1e-12 * eps;
    }
    check("gaussian mechanism round trip (1000 random)", ok)?;

    ok = true;
    for _ in 0..500 {
        let len = rng.gen_range(1..100usize);
        let bs: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..10.0)).collect();
        let alphas: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..10.0)).collect();
        ok &= m_functional(&alphas, &bs) >= m_adp(&bs) * (1.0 - 1e-12);
        let opt: Vec<f64> = bs.iter().map(|b| b.sqrt()).collect();
        let m = m_functional(&opt, &bs);
        ok &= (m - m_adp(&bs)).abs() <= 1e-10 * m_adp(&bs);
    }
    check("noise-scale optimality (500 random sequences)", ok)?;

    ok = true;
    let mut sound_checked = 0;
    while sound_checked < 20 {
        let n = rng.gen_range(2000..100_000u64);
        let m = rng.gen_range(n / 8..=n / 2);
        let t = rng.gen_range(100..2000u64);
        let eps = rng.gen_range(0.05..1.5);
        let delta = 10f64.powf(rng.gen_range(-7.0..-4.0));
        let budget = PrivacyBudget::new(eps, delta)?;
        let g = rng.gen_range(0.1..5.0);
        let Ok(params) = AccountantParams::for_budget(n, m, t, g, &budget) else {
            continue;
        };
        let alphas = vec![1.0; t as usize];
        let Ok(sigma_sq) = calibrate_noise_for_budget(&alphas, &params, &budget) else {
            continue;
        };
        let achieved = audit_forward(&alphas, sigma_sq.sqrt(), &params)?;
        ok &= achieved.epsilon <= eps && achieved.delta <= delta;
        sound_checked += 1;
    }
    check("calibration soundness (20 random valid configurations)", ok)?;

    // zero-noise equivalence on a 3-d quadratic
    let model = ModelSpec::LinearRegressionMse;
    let data = Dataset::new(
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        vec![0.0; 3],
        3,
        3,
    )?;
    let opt = OptimizerConfig {
        eta: 1.0,
        iterations: 200,
        batch_size: 3,
        clip_radius: None,
        step_schedule: StepsizeSchedule::PolynomialDecay { a: 20.0, c: 1.0 },
        noise_schedule: NoiseScaleSchedule::SqrtOfB,
        sigma: 0.0,
        seed: 9,
        b_from_raw_grad: false,
        full_eval_every: 1,
    };
    let log = run_optimizer(&opt, &model, &data, vec![1.0, -2.0, 0.5])?;
    let mut theta = vec![1.0f64, -2.0, 0.5];
    for t in 0..200u64 {
        let (_, grad) = full_loss_and_grad(&model, &theta, &data)?;
        let b = (20.0 + (t as f64 + 1.0)).sqrt();
        for (x, g) in theta.iter_mut().zip(&grad) {
            *x -= 1.0 / b * g;
        }
    }
    let (_, grad) = full_loss_and_grad(&model, &theta, &data)?;
    let diff = (log.summary.final_grad_norm_sq.unwrap() - adp_sgd::linalg::norm_sq(&grad)).abs();
    check("zero-noise equivalence vs plain SGD", diff < 1e-20)?;

    ok = true;
    for _ in 0..200 {
        let len = rng.gen_range(1..30usize);
        let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let c = rng.gen_range(0.1..3.0);
        let once = clip(&g, c);
        let twice = clip(&once, c);
        ok &= once == twice;
        ok &= adp_sgd::linalg::norm(&once) <= c * (1.0 + 1e-12);
    }
    check("clipping is a projection (200 random)", ok)?;

    println!("selftest ok");
    Ok(())
}
