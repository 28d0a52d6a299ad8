//! Closed-form evaluators for the utility bounds and the technical lemmas
//! behind them, so empirical runs can be checked against their theoretical
//! envelopes.
//!
//! All bounds use the single-sample `B_delta = ln(16T/(n delta)) ln(1.25/delta)`.

use serde::{Deserialize, Serialize};

use crate::accountant::b_delta;
use crate::error::{Error, Result};
use crate::schedules::m_functional;

/// Constants feeding the closed-form utility bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Gradient-norm bound.
    #[serde(rename = "G")]
    pub g: f64,
    /// Gradient Lipschitz constant.
    #[serde(rename = "L")]
    pub l: f64,
    /// `F(theta_0) - F*`.
    #[serde(rename = "D_F")]
    pub d_f: f64,
    pub eta: f64,
    /// Parameter dimension.
    pub d: u64,
    pub n: u64,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub iterations: u64,
    /// Decay-schedule parameters: `b_t = (a + c t)^{1/2}`.
    pub a: f64,
    pub c: f64,
    /// Adaptive-schedule parameters.
    pub b0: f64,
    pub nu: f64,
    /// Growth rate of the precomputed noise scale `alpha_t = (b0^2 + t C)^{1/4}`.
    #[serde(rename = "C")]
    pub c_alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// Noise scale `alpha_t^2 = b_t`.
    Adp,
    /// Constant noise scale `alpha_t = 1`.
    Dp,
}

impl BoundInputs {
    fn b_delta(&self) -> Result<f64> {
        b_delta(self.iterations, 1, self.n, self.delta)
    }

    fn n_eps_sq(&self) -> f64 {
        let ne = self.n as f64 * self.epsilon;
        ne * ne
    }
}

/// Optimization and privacy parts of the general utility bound
/// (their sum bounds `E ||grad F(theta_tau)||^2`):
///
/// ```text
/// (1 / sum_t 1/b_{t+1}) * (W_opt + eta d L (16G)^2 B_delta / (2 n^2 eps^2) * M)
/// ```
///
/// with `W_opt = D_F/eta + (eta L / 2) * sum_t E||g_t||^2 / b_{t+1}^2`. The
/// caller supplies that gradient sum: realized logged values when checking a
/// run, or the `G^2` worst case when evaluating schedules a priori.
pub fn utility_bound_parts(
    inputs: &BoundInputs,
    alphas: &[f64],
    bs: &[f64],
    grad_sq_over_b2_sum: f64,
) -> Result<(f64, f64)> {
    if alphas.len() != bs.len() {
        return Err(Error::invalid("alpha and b sequences must have equal length"));
    }
    let bd = inputs.b_delta()?;
    let inv_b_sum: f64 = bs.iter().map(|b| 1.0 / b).sum();
    let w_opt = inputs.d_f / inputs.eta + inputs.eta * inputs.l / 2.0 * grad_sq_over_b2_sum;
    let m = m_functional(alphas, bs);
    let g16 = 16.0 * inputs.g;
    let privacy =
        inputs.eta * inputs.d as f64 * inputs.l * g16 * g16 * bd * m / (2.0 * inputs.n_eps_sq());
    Ok((w_opt / inv_b_sum, privacy / inv_b_sum))
}

/// The general utility bound; see [`utility_bound_parts`].
pub fn utility_bound_general(
    inputs: &BoundInputs,
    alphas: &[f64],
    bs: &[f64],
    grad_sq_over_b2_sum: f64,
) -> Result<f64> {
    let (opt, privacy) = utility_bound_parts(inputs, alphas, bs, grad_sq_over_b2_sum)?;
    Ok(opt + privacy)
}

/// Utility bound for the polynomially decaying stepsize `b_t = (a + c t)^{1/2}`:
///
/// ```text
/// ADP: W_decay/sqrt(T-1) + eta d L (16G)^2 B_delta sqrt(T) / (2 n^2 eps^2 sqrt(c))
/// DP:  W_decay/sqrt(T-1) + eta d L (16G)^2 B_delta sqrt(T) B_T / (n^2 eps^2 sqrt(c))
/// ```
///
/// with `W_decay = sqrt(c) (D_F/eta + eta G^2 L B_T / (2c))` and
/// `B_T = ln(1 + T c/a)`. Requires `T >= 5 + 4a/c`.
pub fn bound_decay(inputs: &BoundInputs, variant: BoundVariant) -> Result<f64> {
    let t = inputs.iterations as f64;
    let min_t = 5.0 + 4.0 * inputs.a / inputs.c;
    if t < min_t {
        return Err(Error::hypothesis(format!(
            "decay bound needs T >= 5 + 4a/c = {min_t}, got T = {t}"
        )));
    }
    let bd = inputs.b_delta()?;
    let b_t = (1.0 + t * inputs.c / inputs.a).ln();
    let w_decay = inputs.c.sqrt()
        * (inputs.d_f / inputs.eta + inputs.eta * inputs.g * inputs.g * inputs.l * b_t / (2.0 * inputs.c));
    let g16 = 16.0 * inputs.g;
    let base = inputs.eta * inputs.d as f64 * inputs.l * g16 * g16 * bd * t.sqrt()
        / (inputs.n_eps_sq() * inputs.c.sqrt());
    let privacy = match variant {
        BoundVariant::Adp => base / 2.0,
        BoundVariant::Dp => base * b_t,
    };
    Ok(w_decay / (t - 1.0).sqrt() + privacy)
}

/// Utility bound for the adaptive stepsize
/// `b_{t+1}^2 = b_t^2 + max(||g||^2, nu)` with noise scale
/// `alpha_t = (b0^2 + t C)^{1/4}`:
///
/// ```text
/// ADP: W_adap/sqrt(T-1) + 128 G^3 eta d L B_delta sqrt(T) / (n^2 eps^2 nu)
/// DP:  W_adap/sqrt(T-1) +  32 G^3 eta d L B_delta sqrt(T) ln(1 + T nu / b0^2) / (n^2 eps^2 nu)
/// ```
///
/// with `W_adap = 2G (2G + eta L/2)(1 + ln(T (G^2 + nu^2)/b0^2 + 1)) + 2 G D_F / eta`.
/// Requires `T >= 5 + 4 b0^2 / G^2`.
pub fn bound_adaptive(inputs: &BoundInputs, variant: BoundVariant) -> Result<f64> {
    let t = inputs.iterations as f64;
    let b0_sq = inputs.b0 * inputs.b0;
    let g_sq = inputs.g * inputs.g;
    let min_t = 5.0 + 4.0 * b0_sq / g_sq;
    if t < min_t {
        return Err(Error::hypothesis(format!(
            "adaptive bound needs T >= 5 + 4 b0^2/G^2 = {min_t}, got T = {t}"
        )));
    }
    if inputs.nu <= 0.0 {
        return Err(Error::invalid("nu must be > 0"));
    }
    let bd = inputs.b_delta()?;
    let w_adap = 2.0
        * inputs.g
        * (2.0 * inputs.g + inputs.eta * inputs.l / 2.0)
        * (1.0 + (t * (g_sq + inputs.nu * inputs.nu) / b0_sq + 1.0).ln())
        + 2.0 * inputs.g * inputs.d_f / inputs.eta;
    let g_cubed = inputs.g * g_sq;
    let core = g_cubed * inputs.eta * inputs.d as f64 * inputs.l * bd * t.sqrt()
        / (inputs.n_eps_sq() * inputs.nu);
    let privacy = match variant {
        BoundVariant::Adp => 128.0 * core,
        BoundVariant::Dp => 32.0 * core * (1.0 + t * inputs.nu / b0_sq).ln(),
    };
    Ok(w_adap / (t - 1.0).sqrt() + privacy)
}

/// Utility bound for constant stepsize `eta` (b_t = 1):
///
/// ```text
/// 2 D_F/(eta T) + eta L G^2 (1 + d 16^2 B_delta T / (n^2 eps^2))
/// ```
pub fn bound_constant(inputs: &BoundInputs) -> Result<f64> {
    let bd = inputs.b_delta()?;
    let t = inputs.iterations as f64;
    Ok(2.0 * inputs.d_f / (inputs.eta * t)
        + inputs.eta
            * inputs.l
            * inputs.g
            * inputs.g
            * (1.0 + inputs.d as f64 * 256.0 * bd * t / inputs.n_eps_sq()))
}

/// Lower and upper bounds on `sum_{t=1..T} (a1 + a2 t)^{-p}` for `p` in (0,1]:
///
/// ```text
/// p < 1: 1/((1-p) a2^p) * ((a1/a2 + 1 + T)^{1-p} - (a1/a2 + 1)^{1-p})   <= sum
///        sum <= 1/((1-p) a2^p) * ((a1/a2 + T)^{1-p} - (a1/a2)^{1-p})
/// p = 1: (1/a2) ln(1 + T/(a1/a2 + 1))  <=  sum  <=  (1/a2) ln(1 + T a2/a1)
/// ```
pub fn sum_power_bounds(a1: f64, a2: f64, p: f64, iterations: u64) -> Result<(f64, f64)> {
    if !(a1 > 0.0 && a2 > 0.0) {
        return Err(Error::invalid("a1 and a2 must be positive"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("p must be in (0,1], got {p}")));
    }
    let t = iterations as f64;
    let r = a1 / a2;
    if (p - 1.0).abs() < f64::EPSILON {
        let upper = (1.0 + t / r).ln() / a2;
        let lower = (1.0 + t / (r + 1.0)).ln() / a2;
        Ok((lower, upper))
    } else {
        let q = 1.0 - p;
        let scale = 1.0 / (q * a2.powf(p));
        let upper = scale * ((r + t).powf(q) - r.powf(q));
        let lower = scale * ((r + 1.0 + t).powf(q) - (r + 1.0).powf(q));
        Ok((lower, upper))
    }
}

/// For a nonnegative sequence with `a_1 > 1`, returns
/// `(sum_l a_l / sum_{i<=l} a_i, ln(sum_i a_i) + 1)`; the first never exceeds
/// the second.
pub fn logsum_bound(seq: &[f64]) -> Result<(f64, f64)> {
    let first = *seq
        .first()
        .ok_or_else(|| Error::invalid("sequence must be non-empty"))?;
    if first <= 1.0 {
        return Err(Error::invalid(format!("first element must exceed 1, got {first}")));
    }
    if seq.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid("sequence entries must be non-negative"));
    }
    let mut prefix = 0.0;
    let mut lhs = 0.0;
    for &a in seq {
        prefix += a;
        lhs += a / prefix;
    }
    Ok((lhs, prefix.ln() + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The numeric instance shared by the pinned tests:
    /// G=1, L=1, D_F=1, eta=1, d=10, n=1e3, eps=1, delta=1e-5, T=1e3,
    /// a=20, c=1, b0^2=20, nu=1e-5.
    fn instance() -> BoundInputs {
        BoundInputs {
            g: 1.0,
            l: 1.0,
            d_f: 1.0,
            eta: 1.0,
            d: 10,
            n: 1000,
            epsilon: 1.0,
            delta: 1e-5,
            iterations: 1000,
            a: 20.0,
            c: 1.0,
            b0: 20.0f64.sqrt(),
            nu: 1e-5,
            c_alpha: 1e-3,
        }
    }

    fn decay_bs(t: u64) -> Vec<f64> {
        (1..=t).map(|k| (20.0 + k as f64).sqrt()).collect()
    }

    #[test]
    fn utility_general_pinned_adp() {
        let inputs = instance();
        let bs = decay_bs(1000);
        let alphas: Vec<f64> = bs.iter().map(|b| b.sqrt()).collect();
        let grad_sum: f64 = bs.iter().map(|b| 1.0 / (b * b)).sum(); // G^2 = 1 worst case
        let v = utility_bound_general(&inputs, &alphas, &bs, grad_sum).unwrap();
        assert!((v - 11.821407846171595).abs() / v < 1e-12, "v = {v}");
    }

    #[test]
    fn utility_general_pinned_dp() {
        let inputs = instance();
        let bs = decay_bs(1000);
        let alphas = vec![1.0; 1000];
        let grad_sum: f64 = bs.iter().map(|b| 1.0 / (b * b)).sum();
        let v = utility_bound_general(&inputs, &alphas, &bs, grad_sum).unwrap();
        assert!((v - 15.34617050831238).abs() / v < 1e-12, "v = {v}");
    }

    #[test]
    fn utility_privacy_term_collapses_at_sqrt_b() {
        // with alpha_t^2 = b_t the privacy part is
        // eta d L (16G)^2 B_delta/(2 n^2 eps^2) * sum 1/b
        let inputs = instance();
        let bs = decay_bs(200);
        let alphas: Vec<f64> = bs.iter().map(|b| b.sqrt()).collect();
        let (_, privacy) = utility_bound_parts(&inputs, &alphas, &bs, 0.0).unwrap();
        let bd = b_delta(1000, 1, 1000, 1e-5).unwrap();
        let inv_b: f64 = bs.iter().map(|b| 1.0 / b).sum();
        let expect = inputs.eta * 10.0 * inputs.l * 256.0 * bd / (2.0 * 1e6) * inv_b;
        assert!((privacy - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn bound_decay_pinned_values() {
        let inputs = instance();
        let adp = bound_decay(&inputs, BoundVariant::Adp).unwrap();
        let dp = bound_decay(&inputs, BoundVariant::Dp).unwrap();
        assert!((adp - 6.880066180846241).abs() / adp < 1e-12, "adp = {adp}");
        assert!((dp - 53.45837442873636).abs() / dp < 1e-12, "dp = {dp}");
    }

    #[test]
    fn bound_decay_privacy_ratio_is_twice_log() {
        let inputs = instance();
        let t = inputs.iterations as f64;
        let w = inputs.c.sqrt()
            * (1.0 + (1.0 + t / 20.0).ln() / 2.0)
            / (t - 1.0).sqrt();
        let adp = bound_decay(&inputs, BoundVariant::Adp).unwrap() - w;
        let dp = bound_decay(&inputs, BoundVariant::Dp).unwrap() - w;
        let b_t = (1.0 + t / 20.0f64).ln();
        assert!((dp / adp - 2.0 * b_t).abs() < 1e-9, "ratio = {}", dp / adp);
    }

    #[test]
    fn bound_decay_rejects_small_t() {
        let mut inputs = instance();
        inputs.iterations = 10;
        inputs.a = 100.0;
        inputs.c = 1.0;
        assert!(matches!(
            bound_decay(&inputs, BoundVariant::Adp),
            Err(Error::HypothesisViolation(_))
        ));
    }

    #[test]
    fn bound_adaptive_pinned_values() {
        let inputs = instance();
        let adp = bound_adaptive(&inputs, BoundVariant::Adp).unwrap();
        let dp = bound_adaptive(&inputs, BoundVariant::Dp).unwrap();
        assert!((adp - 678623.7286609294).abs() / adp < 1e-12, "adp = {adp}");
        assert!((dp - 85.65011824016466).abs() / dp < 1e-12, "dp = {dp}");
    }

    #[test]
    fn bound_adaptive_privacy_ratio() {
        // DP/ADP privacy-term ratio = ln(1 + T nu / b0^2) / 4
        let inputs = instance();
        let t = inputs.iterations as f64;
        let w = {
            let g = inputs.g;
            let g_sq = g * g;
            (2.0 * g * (2.0 * g + 0.5) * (1.0 + (t * (g_sq + 1e-10) / 20.0 + 1.0).ln()) + 2.0)
                / (t - 1.0).sqrt()
        };
        let adp = bound_adaptive(&inputs, BoundVariant::Adp).unwrap() - w;
        let dp = bound_adaptive(&inputs, BoundVariant::Dp).unwrap() - w;
        let expect = (1.0 + t * inputs.nu / 20.0f64).ln() / 4.0;
        assert!((dp / adp - expect).abs() / expect < 1e-6, "ratio = {}", dp / adp);
    }

    #[test]
    fn bound_constant_pinned_value() {
        let inputs = instance();
        let v = bound_constant(&inputs).unwrap();
        assert!((v - 430.20079791157034).abs() / v < 1e-12, "v = {v}");
    }

    #[test]
    fn bound_constant_sqrt_t_reduction() {
        // with eta = 1/sqrt(T) and d = 1 the bound equals
        // (2 D_F + L G^2)/sqrt(T) + L (16G)^2 B_delta sqrt(T)/(n^2 eps^2)
        let mut inputs = instance();
        inputs.d = 1;
        let t = inputs.iterations as f64;
        inputs.eta = 1.0 / t.sqrt();
        let v = bound_constant(&inputs).unwrap();
        let bd = b_delta(inputs.iterations, 1, inputs.n, inputs.delta).unwrap();
        let expect = (2.0 * inputs.d_f + inputs.l * inputs.g * inputs.g) / t.sqrt()
            + inputs.l * 256.0 * inputs.g * inputs.g * bd * t.sqrt() / 1e6;
        assert!((v - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn sum_power_upper_log_branch() {
        let (_, upper) = sum_power_bounds(1.0, 1.0, 1.0, 100).unwrap();
        assert!((upper - 101.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_power_half_scaling() {
        // p = 1/2, a1 -> 0: upper approaches 2 sqrt(T)
        let (_, upper) = sum_power_bounds(1e-12, 1.0, 0.5, 10_000).unwrap();
        assert!((upper - 2.0 * 100.0).abs() < 1e-3, "upper = {upper}");
    }

    #[test]
    fn sum_power_sandwiches_brute_force() {
        let cases = [
            (1.0, 1.0, 1.0, 1000u64),
            (20.0, 1.0, 0.5, 2000),
            (3.0, 0.25, 0.75, 500),
            (0.5, 2.0, 1.0, 100),
        ];
        for (a1, a2, p, t) in cases {
            let brute: f64 = (1..=t).map(|k| (a1 + a2 * k as f64).powf(-p)).sum();
            let (lower, upper) = sum_power_bounds(a1, a2, p, t).unwrap();
            assert!(
                lower <= brute + 1e-12 && brute <= upper + 1e-12,
                "a1={a1} a2={a2} p={p}: {lower} <= {brute} <= {upper}"
            );
        }
    }

    #[test]
    fn logsum_single_element() {
        let (lhs, rhs) = logsum_bound(&[std::f64::consts::E]).unwrap();
        assert!((lhs - 1.0).abs() < 1e-15);
        assert!((rhs - 2.0).abs() < 1e-15);
    }

    #[test]
    fn logsum_equal_elements() {
        let (lhs, rhs) = logsum_bound(&[2.0, 2.0, 2.0]).unwrap();
        assert!((lhs - (1.0 + 0.5 + 1.0 / 3.0)).abs() < 1e-14);
        assert!((rhs - (6.0f64.ln() + 1.0)).abs() < 1e-14);
        assert!(lhs <= rhs);
    }

    #[test]
    fn logsum_rejects_small_head() {
        assert!(logsum_bound(&[0.5, 2.0]).is_err());
    }
}
