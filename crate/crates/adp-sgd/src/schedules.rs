//! Stepsize-denominator and noise-scale update rules, plus the M functionals
//! that quantify what a noise schedule costs in the utility bound.
//!
//! A run takes a stepsize `eta / b_{t+1}` where `b` follows one of three
//! rules, and scales its injected noise by `alpha_{t+1}`. Schedules emit
//! `b_1..b_T` and `alpha_1..alpha_T`, consumed at iterations `t = 0..T-1`
//! as `b_{t+1}` and `alpha_{t+1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplier applied to the squared gradient norm inside the AdaGrad-Norm
/// update. `Sawtooth` is the preset `beta_t = max(beta / ((t mod period) + 1), 1)`;
/// `Custom` supplies the whole sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Boost {
    None,
    Constant { beta: f64 },
    Sawtooth { beta: f64, period: u64 },
    Custom { values: Vec<f64> },
}

impl Boost {
    pub fn at(&self, t: u64) -> f64 {
        match self {
            Boost::None => 1.0,
            Boost::Constant { beta } => *beta,
            Boost::Sawtooth { beta, period } => (beta / ((t % period) as f64 + 1.0)).max(1.0),
            Boost::Custom { values } => values.get(t as usize).copied().unwrap_or(1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Boost::None => true,
            Boost::Constant { beta } => *beta >= 1.0,
            Boost::Sawtooth { beta, period } => *beta >= 1.0 && *period > 0,
            Boost::Custom { values } => values.iter().all(|v| *v >= 1.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("boost values must be >= 1"))
        }
    }
}

/// Update rule for the stepsize denominator `b_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepsizeSchedule {
    /// `b_t = b` for all t.
    Constant { b: f64 },
    /// `b_t = (a + c t)^{1/2}`.
    PolynomialDecay { a: f64, c: f64 },
    /// `b_{t+1}^2 = b_t^2 + max(beta_t * ||g||^2, nu)`, starting from `b0`.
    AdaGradNorm { b0: f64, nu: f64, boost: Boost },
}

impl StepsizeSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            StepsizeSchedule::Constant { b } => {
                if !(b.is_finite() && *b > 0.0) {
                    return Err(Error::invalid(format!("constant b must be > 0, got {b}")));
                }
            }
            StepsizeSchedule::PolynomialDecay { a, c } => {
                if !(a.is_finite() && *a > 0.0 && c.is_finite() && *c > 0.0) {
                    return Err(Error::invalid(format!(
                        "polynomial decay needs a > 0 and c > 0, got a={a}, c={c}"
                    )));
                }
            }
            StepsizeSchedule::AdaGradNorm { b0, nu, boost } => {
                if !(b0.is_finite() && *b0 > 0.0 && nu.is_finite() && *nu > 0.0) {
                    return Err(Error::invalid(format!(
                        "adagrad-norm needs b0 > 0 and nu > 0, got b0={b0}, nu={nu}"
                    )));
                }
                boost.validate()?;
            }
        }
        Ok(())
    }

    /// `nu` must not exceed `G^2` for the adaptive-stepsize analysis to apply.
    pub fn validate_against_grad_bound(&self, grad_bound: f64) -> Result<()> {
        if let StepsizeSchedule::AdaGradNorm { nu, .. } = self {
            let g_sq = grad_bound * grad_bound;
            if *nu > g_sq {
                return Err(Error::invalid(format!(
                    "adagrad-norm nu = {nu} exceeds G^2 = {g_sq}"
                )));
            }
        }
        Ok(())
    }

    /// Whether `b_1..b_T` can be written down before seeing any gradients.
    pub fn is_data_independent(&self) -> bool {
        !matches!(self, StepsizeSchedule::AdaGradNorm { .. })
    }

    /// Initial denominator `b_0`.
    pub fn initial_b(&self) -> f64 {
        match self {
            StepsizeSchedule::Constant { b } => *b,
            StepsizeSchedule::PolynomialDecay { a, .. } => a.sqrt(),
            StepsizeSchedule::AdaGradNorm { b0, .. } => *b0,
        }
    }
}

/// Update rule for the noise scale `alpha_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseScaleSchedule {
    /// `alpha_t = 1`: plain DP-SGD.
    ConstantOne,
    /// `alpha_t^2 = b_t`; requires a data-independent stepsize schedule
    /// when the sequence must be precomputed.
    SqrtOfB,
    /// `alpha_t = (b0^2 + t C)^{1/4}`, the precomputable stand-in when the
    /// stepsize itself is data-dependent.
    PolynomialQuarter {
        b0_sq: f64,
        #[serde(rename = "C")]
        c: f64,
    },
}

impl NoiseScaleSchedule {
    pub fn validate(&self) -> Result<()> {
        if let NoiseScaleSchedule::PolynomialQuarter { b0_sq, c } = self {
            if !(b0_sq.is_finite() && *b0_sq > 0.0 && c.is_finite() && *c > 0.0) {
                return Err(Error::invalid(format!(
                    "polynomial-quarter needs b0_sq > 0 and C > 0, got b0_sq={b0_sq}, C={c}"
                )));
            }
        }
        Ok(())
    }
}

/// Evolving `(t, b_t, alpha_t)` owned by a single run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub t: u64,
    pub b: f64,
    pub alpha: f64,
}

impl ScheduleState {
    pub fn initial(schedule: &StepsizeSchedule) -> Self {
        ScheduleState {
            t: 0,
            b: schedule.initial_b(),
            alpha: 1.0,
        }
    }

    pub fn advance(&mut self, b_next: f64, alpha_next: f64) {
        self.t += 1;
        self.b = b_next;
        self.alpha = alpha_next;
    }
}

/// `b_{t+1}` from the current state and the squared norm of the released
/// gradient (ignored by the non-adaptive variants).
pub fn next_b(schedule: &StepsizeSchedule, state: &ScheduleState, grad_norm_sq: f64) -> f64 {
    debug_assert!(grad_norm_sq >= 0.0);
    match schedule {
        StepsizeSchedule::Constant { b } => *b,
        StepsizeSchedule::PolynomialDecay { a, c } => (a + c * (state.t as f64 + 1.0)).sqrt(),
        StepsizeSchedule::AdaGradNorm { nu, boost, .. } => {
            let boosted = boost.at(state.t) * grad_norm_sq;
            (state.b * state.b + boosted.max(*nu)).sqrt()
        }
    }
}

/// On-the-fly `alpha_{t+1} = phi_2(alpha_t, b_{t+1})`. Only meaningful when
/// the noise level sigma is supplied directly; calibrated runs must use
/// [`precompute_alphas`] so the whole sequence is fixed in advance.
pub fn next_alpha(noise: &NoiseScaleSchedule, state: &ScheduleState, b_next: f64) -> f64 {
    match noise {
        NoiseScaleSchedule::ConstantOne => 1.0,
        NoiseScaleSchedule::SqrtOfB => b_next.sqrt(),
        NoiseScaleSchedule::PolynomialQuarter { b0_sq, c } => {
            (b0_sq + c * (state.t as f64 + 1.0)).powf(0.25)
        }
    }
}

/// The full `alpha_1..alpha_T` sequence for calibration.
///
/// `SqrtOfB` over a data-dependent stepsize schedule cannot be written down
/// ahead of the run and is rejected.
pub fn precompute_alphas(
    noise: &NoiseScaleSchedule,
    step: &StepsizeSchedule,
    iterations: u64,
) -> Result<Vec<f64>> {
    noise.validate()?;
    step.validate()?;
    match noise {
        NoiseScaleSchedule::ConstantOne => Ok(vec![1.0; iterations as usize]),
        NoiseScaleSchedule::SqrtOfB => {
            if !step.is_data_independent() {
                return Err(Error::invalid(
                    "alpha^2 = b requires a precomputable stepsize schedule; \
                     adagrad-norm b_t depends on the data, use polynomial-quarter instead",
                ));
            }
            let mut state = ScheduleState::initial(step);
            let mut out = Vec::with_capacity(iterations as usize);
            for _ in 0..iterations {
                let b = next_b(step, &state, 0.0);
                out.push(b.sqrt());
                state.advance(b, 1.0);
            }
            Ok(out)
        }
        NoiseScaleSchedule::PolynomialQuarter { b0_sq, c } => Ok((1..=iterations)
            .map(|t| (b0_sq + c * t as f64).powf(0.25))
            .collect()),
    }
}

fn check_positive(name: &str, xs: &[f64]) {
    assert!(
        xs.iter().all(|x| x.is_finite() && *x > 0.0),
        "{name} entries must be positive and finite"
    );
}

/// `M({alpha},{b}) = sum_t (alpha_t/b_t)^2 * sum_t 1/alpha_t^2`, the factor
/// the noise schedule contributes to the utility bound.
pub fn m_functional(alphas: &[f64], bs: &[f64]) -> f64 {
    assert_eq!(alphas.len(), bs.len(), "sequence length mismatch");
    check_positive("alpha", alphas);
    check_positive("b", bs);
    let ratio_sq: f64 = alphas
        .iter()
        .zip(bs.iter())
        .map(|(a, b)| {
            let r = a / b;
            r * r
        })
        .sum();
    let inv_alpha_sq: f64 = alphas.iter().map(|a| 1.0 / (a * a)).sum();
    ratio_sq * inv_alpha_sq
}

/// Minimum of `M` over alpha for fixed `b`: `(sum_t 1/b_t)^2`, attained at
/// `alpha_t^2 = b_t`.
pub fn m_adp(bs: &[f64]) -> f64 {
    check_positive("b", bs);
    let s: f64 = bs.iter().map(|b| 1.0 / b).sum();
    s * s
}

/// Value of `M` at `alpha_t = 1`: `T * sum_t 1/b_t^2`. At least `m_adp` by
/// Cauchy-Schwarz, with equality only for constant `b`.
pub fn m_dp(bs: &[f64]) -> f64 {
    check_positive("b", bs);
    let s: f64 = bs.iter().map(|b| 1.0 / (b * b)).sum();
    bs.len() as f64 * s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(a: f64, c: f64) -> StepsizeSchedule {
        StepsizeSchedule::PolynomialDecay { a, c }
    }

    fn adagrad(b0: f64, nu: f64) -> StepsizeSchedule {
        StepsizeSchedule::AdaGradNorm {
            b0,
            nu,
            boost: Boost::None,
        }
    }

    #[test]
    fn adagrad_norm_update() {
        let sched = adagrad(20.0f64.sqrt(), 1e-5);
        let state = ScheduleState::initial(&sched);
        let b1 = next_b(&sched, &state, 4.0);
        assert!((b1 - 24.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adagrad_norm_floor_active() {
        let sched = adagrad(20.0f64.sqrt(), 1e-5);
        let state = ScheduleState::initial(&sched);
        let b1 = next_b(&sched, &state, 0.0);
        assert!((b1 - (20.0 + 1e-5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn polynomial_decay_matches_curve() {
        // a=20, c=1, t=0 gives b_1 = sqrt(21), so eta/b_1 = 1/sqrt(20+t) at t=1
        let sched = poly(20.0, 1.0);
        let state = ScheduleState::initial(&sched);
        let b1 = next_b(&sched, &state, 123.0);
        assert!((b1 - 21.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sawtooth_boost_preset() {
        let boost = Boost::Sawtooth {
            beta: 512.0,
            period: 195,
        };
        assert_eq!(boost.at(0), 512.0);
        assert_eq!(boost.at(1), 256.0);
        assert_eq!(boost.at(195), 512.0);
        assert_eq!(boost.at(194), (512.0f64 / 195.0).max(1.0));
        assert_eq!(boost.at(2000 % 195 + 195), boost.at(2000 % 195));
    }

    #[test]
    fn precompute_constant_one() {
        let alphas =
            precompute_alphas(&NoiseScaleSchedule::ConstantOne, &poly(20.0, 1.0), 5).unwrap();
        assert_eq!(alphas, vec![1.0; 5]);
    }

    #[test]
    fn precompute_sqrt_b_over_poly() {
        let alphas = precompute_alphas(&NoiseScaleSchedule::SqrtOfB, &poly(20.0, 1.0), 10).unwrap();
        for (i, &a) in alphas.iter().enumerate() {
            let t = (i + 1) as f64;
            assert!((a - (20.0 + t).powf(0.25)).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn precompute_polynomial_quarter_pinned() {
        let alphas = precompute_alphas(
            &NoiseScaleSchedule::PolynomialQuarter {
                b0_sq: 20.0,
                c: 1e-3,
            },
            &adagrad(20.0f64.sqrt(), 1e-5),
            1000,
        )
        .unwrap();
        // (20 + 1000 * 1e-3)^{1/4} = 21^{1/4}, independently evaluated
        assert!((alphas[999] - 2.1406951429280723).abs() < 1e-12);
    }

    #[test]
    fn sqrt_b_over_adagrad_rejected() {
        let err = precompute_alphas(
            &NoiseScaleSchedule::SqrtOfB,
            &adagrad(20.0f64.sqrt(), 1e-5),
            10,
        )
        .unwrap_err();
        assert!(err.to_string().contains("precomputable"));
    }

    #[test]
    fn m_functional_all_ones() {
        assert_eq!(m_functional(&[1.0; 4], &[1.0; 4]), 16.0);
        assert_eq!(m_adp(&[1.0; 4]), 16.0);
        assert_eq!(m_dp(&[1.0; 4]), 16.0);
    }

    #[test]
    fn m_adp_small_case() {
        assert!((m_adp(&[1.0, 2.0]) - 2.25).abs() < 1e-15);
        assert!((m_dp(&[1.0, 2.0]) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn m_adp_brute_force_pinned() {
        let bs: Vec<f64> = (1..=1000).map(|t| (20.0 + t as f64).sqrt()).collect();
        // (sum 1/sqrt(20+t))^2 for t=1..1000, independently evaluated
        assert!((m_adp(&bs) - 3006.868723915138).abs() / m_adp(&bs) < 1e-12);
    }

    #[test]
    fn m_equality_at_sqrt_b() {
        let bs: Vec<f64> = (1..=50).map(|t| 0.5 + (t as f64).sin().abs() * 3.0).collect();
        let alphas: Vec<f64> = bs.iter().map(|b| b.sqrt()).collect();
        let m = m_functional(&alphas, &bs);
        let madp = m_adp(&bs);
        assert!((m - madp).abs() / madp < 1e-12);
    }

    #[test]
    fn m_dominates_m_adp() {
        // crude deterministic pseudo-random positives
        let mut x = 0.37f64;
        let mut next = || {
            x = (x * 997.13).fract();
            0.1 + 2.0 * x
        };
        for _ in 0..100 {
            let alphas: Vec<f64> = (0..50).map(|_| next()).collect();
            let bs: Vec<f64> = (0..50).map(|_| next()).collect();
            let m = m_functional(&alphas, &bs);
            let madp = m_adp(&bs);
            assert!(m >= madp * (1.0 - 1e-12), "m = {m}, madp = {madp}");
            assert!(m_dp(&bs) >= madp * (1.0 - 1e-12));
        }
    }

    #[test]
    fn m_scale_equivariance() {
        let bs: Vec<f64> = (1..=20).map(|t| (20.0 + t as f64).sqrt()).collect();
        let scaled: Vec<f64> = bs.iter().map(|b| 3.0 * b).collect();
        assert!((m_adp(&scaled) - m_adp(&bs) / 9.0).abs() / m_adp(&bs) < 1e-12);
        assert!((m_dp(&scaled) - m_dp(&bs) / 9.0).abs() / m_dp(&bs) < 1e-12);
    }

    #[test]
    fn adagrad_b_stays_in_band() {
        let g = 2.0f64;
        let sched = adagrad(3.0, 1e-4);
        let mut state = ScheduleState::initial(&sched);
        let mut x = 0.7f64;
        for t in 1..=500u64 {
            x = (x * 313.7).fract();
            let gsq = x * g * g; // all draws below G^2
            let b = next_b(&sched, &state, gsq);
            state.advance(b, 1.0);
            let b_sq = b * b;
            assert!(b_sq >= 9.0 + t as f64 * 1e-4 - 1e-9);
            assert!(b_sq <= 9.0 + t as f64 * g * g + 1e-9);
            assert!(b >= state.b - 1e-12, "monotone");
        }
    }
}
