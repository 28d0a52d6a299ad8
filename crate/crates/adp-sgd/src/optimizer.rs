//! The ADP-SGD loop: sample a mini-batch, clip, inject noise scaled by
//! `alpha_{t+1}`, and update `theta_{t+1} = theta_t - (eta/b_{t+1})(g + alpha_{t+1} c_t)`.
//!
//! With the noise scale pinned at 1 this is plain DP-SGD; with sigma = 0 it
//! is exactly SGD with stepsize `eta/b_{t+1}`.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm, norm_sq};
use crate::models::{clip, full_loss_and_grad, loss_and_grad, Dataset, ModelSpec};
use crate::rng::{gaussian_vector, run_streams};
use crate::schedules::{next_alpha, next_b, precompute_alphas, NoiseScaleSchedule, ScheduleState, StepsizeSchedule};

const DIVERGENCE_NORM: f64 = 1e12;

/// Configuration of a single optimization run.
///
/// `sigma` is the per-step noise standard deviation; pass the square root of
/// a calibrated variance. The privacy analysis additionally requires
/// `2m <= n`, which the accountant enforces; the optimizer itself accepts any
/// `1 <= m <= n` so that non-private full-batch runs work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub iterations: u64,
    pub batch_size: u64,
    /// Clipping radius; `None` releases raw gradients.
    pub clip_radius: Option<f64>,
    pub step_schedule: StepsizeSchedule,
    pub noise_schedule: NoiseScaleSchedule,
    /// Per-step noise standard deviation (not variance).
    pub sigma: f64,
    pub seed: u64,
    /// Update `b` from the raw gradient norm instead of the clipped one
    /// (ablation switch; the clipped norm is the released quantity and the
    /// default).
    #[serde(default)]
    pub b_from_raw_grad: bool,
    /// Evaluate the full loss/gradient every k-th iteration. They cost O(n).
    #[serde(default = "default_eval_every")]
    pub full_eval_every: u64,
}

fn default_eval_every() -> u64 {
    1
}

impl OptimizerConfig {
    fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 || self.batch_size as usize > data.n() {
            return Err(Error::invalid(format!(
                "batch size must be in [1, n]; got m={}, n={}",
                self.batch_size,
                data.n()
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if let Some(c) = self.clip_radius {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid(format!("clip radius must be > 0, got {c}")));
            }
        }
        if self.full_eval_every == 0 {
            return Err(Error::invalid("full_eval_every must be >= 1"));
        }
        self.step_schedule.validate()?;
        self.noise_schedule.validate()
    }
}

/// One row of the run log. Full-objective fields are present on the
/// iterations where they were evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u64,
    /// `F(theta_t)` before the update.
    pub loss: Option<f64>,
    /// Norm of the released (possibly clipped) batch gradient.
    pub batch_grad_norm: f64,
    /// `||grad F(theta_t)||` before the update.
    pub full_grad_norm: Option<f64>,
    pub b_next: f64,
    pub alpha_next: f64,
    /// `||(eta/b_{t+1}) alpha_{t+1} c_t||`, the realized injected noise.
    pub noise_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Iteration with the smallest logged `||grad F||^2` (first on ties).
    pub tau: Option<u64>,
    pub min_grad_norm_sq: Option<f64>,
    /// `||grad F(theta_T)||^2` at the final parameters.
    pub final_grad_norm_sq: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IterationRecord>,
    pub summary: RunSummary,
    /// Set when the run aborted; records cover the completed iterations.
    pub diverged_at: Option<u64>,
}

impl RunLog {
    /// CSV with columns exactly `t,loss,batch_grad_norm,full_grad_norm,b_next,alpha_next,noise_norm`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "t,loss,batch_grad_norm,full_grad_norm,b_next,alpha_next,noise_norm"
        )?;
        for r in &self.records {
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{:.17e},{},{:.17e},{:.17e},{:.17e}",
                r.t,
                fmt_opt(r.loss),
                r.batch_grad_norm,
                fmt_opt(r.full_grad_norm),
                r.b_next,
                r.alpha_next,
                r.noise_norm
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Per-step theoretical injected-noise standard deviation
/// `eta_t * alpha_t * sigma = (eta / b_{t+1}) alpha_{t+1} sigma`.
pub fn injected_noise_series(log: &RunLog, eta: f64, sigma: f64) -> Vec<f64> {
    log.records
        .iter()
        .map(|r| eta / r.b_next * r.alpha_next * sigma)
        .collect()
}

/// Epoch-shuffling mini-batch source. Each epoch the data order and the
/// serving order of the `ceil(n/m)` prepared batches are reshuffled, so
/// batches within one epoch are disjoint while the served batch index stays
/// uniform across epochs.
pub struct MinibatchSampler {
    n: usize,
    m: usize,
    order: Vec<usize>,
    batch_order: Vec<usize>,
    pos: usize,
}

impl MinibatchSampler {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 || m > n {
            return Err(Error::invalid(format!("need 1 <= m <= n, got m={m}, n={n}")));
        }
        let batches = n.div_ceil(m);
        Ok(Self {
            n,
            m,
            order: (0..n).collect(),
            batch_order: (0..batches).collect(),
            pos: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.m)
    }

    /// Returns `(xi_t, indices)` for the next iteration.
    pub fn next_batch(&mut self, rng: &mut ChaCha12Rng) -> (usize, Vec<usize>) {
        if self.pos == 0 {
            self.order.shuffle(rng);
            self.batch_order.shuffle(rng);
        }
        let xi = self.batch_order[self.pos];
        let lo = xi * self.m;
        let hi = ((xi + 1) * self.m).min(self.n);
        let batch = self.order[lo..hi].to_vec();
        self.pos = (self.pos + 1) % self.batches_per_epoch();
        (xi, batch)
    }
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub theta: Vec<f64>,
    pub sched: ScheduleState,
    pub t: u64,
}

/// Driver owning the state of one optimization run. `step` advances one
/// iteration; `into_log` finalizes whatever has been recorded so far.
pub struct AdpSgdRun<'a> {
    config: OptimizerConfig,
    model: &'a ModelSpec,
    data: &'a Dataset,
    state: RunState,
    alphas: Option<Vec<f64>>,
    sampler: MinibatchSampler,
    batch_rng: ChaCha12Rng,
    noise_rng: ChaCha12Rng,
    records: Vec<IterationRecord>,
    diverged_at: Option<u64>,
}

impl<'a> AdpSgdRun<'a> {
    pub fn new(
        config: &OptimizerConfig,
        model: &'a ModelSpec,
        data: &'a Dataset,
        theta0: Vec<f64>,
    ) -> Result<Self> {
        config.validate(data)?;
        let d = model.param_dim(data.p())?;
        if theta0.len() != d {
            return Err(Error::invalid(format!(
                "theta0 has dimension {}, model expects {d}",
                theta0.len()
            )));
        }
        if !all_finite(&theta0) {
            return Err(Error::invalid("theta0 must be finite"));
        }
        // Fix the alpha sequence in advance whenever the schedule permits it;
        // data-dependent schedules fall back to the on-the-fly update, which
        // is only meaningful when sigma was supplied directly.
        let alphas =
            precompute_alphas(&config.noise_schedule, &config.step_schedule, config.iterations).ok();
        let sampler = MinibatchSampler::new(data.n(), config.batch_size as usize)?;
        let (batch_rng, noise_rng) = run_streams(config.seed);
        Ok(Self {
            config: config.clone(),
            model,
            data,
            state: RunState {
                theta: theta0,
                sched: ScheduleState::initial(&config.step_schedule),
                t: 0,
            },
            alphas,
            sampler,
            batch_rng,
            noise_rng,
            records: Vec::with_capacity(config.iterations as usize),
            diverged_at: None,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn step(&mut self) -> Result<&IterationRecord> {
        let t = self.state.t;
        if t >= self.config.iterations {
            return Err(Error::invalid(format!(
                "run already completed its {} iterations",
                self.config.iterations
            )));
        }
        let (full_loss, full_grad_norm) = if t % self.config.full_eval_every == 0 {
            let (l, g) = full_loss_and_grad(self.model, &self.state.theta, self.data)?;
            (Some(l), Some(norm(&g)))
        } else {
            (None, None)
        };

        let (_xi, batch) = self.sampler.next_batch(&mut self.batch_rng);
        let (_, raw_grad) = loss_and_grad(self.model, &self.state.theta, &batch, self.data)?;
        let released = match self.config.clip_radius {
            Some(c) => clip(&raw_grad, c),
            None => raw_grad.clone(),
        };
        let b_norm_sq = if self.config.b_from_raw_grad {
            norm_sq(&raw_grad)
        } else {
            norm_sq(&released)
        };
        let b_next = next_b(&self.config.step_schedule, &self.state.sched, b_norm_sq);
        let alpha_next = match &self.alphas {
            Some(seq) => seq[t as usize],
            None => next_alpha(&self.config.noise_schedule, &self.state.sched, b_next),
        };
        let noise = gaussian_vector(&mut self.noise_rng, released.len(), self.config.sigma);
        let step_scale = self.config.eta / b_next;
        for ((th, g), c) in self.state.theta.iter_mut().zip(&released).zip(&noise) {
            *th -= step_scale * (g + alpha_next * c);
        }
        let noise_norm = step_scale * alpha_next * norm(&noise);
        self.records.push(IterationRecord {
            t,
            loss: full_loss,
            batch_grad_norm: norm(&released),
            full_grad_norm,
            b_next,
            alpha_next,
            noise_norm,
        });
        self.state.sched.advance(b_next, alpha_next);
        self.state.t += 1;

        if !all_finite(&self.state.theta) || norm(&self.state.theta) > DIVERGENCE_NORM {
            self.diverged_at = Some(t);
            return Err(Error::Divergence {
                iteration: t as usize,
                reason: "parameters non-finite or exceeding the norm threshold".into(),
            });
        }
        Ok(self.records.last().expect("just pushed"))
    }

    /// Finalizes the log over whatever iterations completed.
    pub fn into_log(self) -> RunLog {
        let mut tau = None;
        let mut min_sq = f64::INFINITY;
        for r in &self.records {
            if let Some(g) = r.full_grad_norm {
                if g * g < min_sq {
                    min_sq = g * g;
                    tau = Some(r.t);
                }
            }
        }
        let (final_grad_norm_sq, final_loss) = if self.diverged_at.is_none() {
            match full_loss_and_grad(self.model, &self.state.theta, self.data) {
                Ok((l, g)) => (Some(norm_sq(&g)), Some(l)),
                Err(_) => (None, None),
            }
        } else {
            (None, None)
        };
        RunLog {
            records: self.records,
            summary: RunSummary {
                tau,
                min_grad_norm_sq: tau.map(|_| min_sq),
                final_grad_norm_sq,
                final_loss,
            },
            diverged_at: self.diverged_at,
        }
    }
}

/// Runs the configured number of iterations; the log is returned alongside
/// the divergence error, if any, so partial results survive an abort.
pub fn run_capturing(
    config: &OptimizerConfig,
    model: &ModelSpec,
    data: &Dataset,
    theta0: Vec<f64>,
) -> (Option<RunLog>, Option<Error>) {
    let mut driver = match AdpSgdRun::new(config, model, data, theta0) {
        Ok(d) => d,
        Err(e) => return (None, Some(e)),
    };
    for _ in 0..config.iterations {
        if let Err(e) = driver.step() {
            return (Some(driver.into_log()), Some(e));
        }
    }
    (Some(driver.into_log()), None)
}

/// Runs to completion or fails on the first error.
pub fn run(
    config: &OptimizerConfig,
    model: &ModelSpec,
    data: &Dataset,
    theta0: Vec<f64>,
) -> Result<RunLog> {
    match run_capturing(config, model, data, theta0) {
        (Some(log), None) => Ok(log),
        (_, Some(e)) => Err(e),
        (None, None) => unreachable!("run_capturing returns a log or an error"),
    }
}
