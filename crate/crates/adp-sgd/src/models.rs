//! Desk-scale differentiable objectives with closed-form gradients, gradient
//! clipping, and empirical smoothness/gradient-bound estimation.
//!
//! Every objective is an empirical risk `F(theta) = (1/n) sum_i f(theta; x_i)`
//! and `loss_and_grad` returns exact batch-averaged values, so the smoothness
//! and bounded-gradient assumptions behind the theory can be checked on real
//! instances instead of assumed.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dot, norm, sub};
use crate::rng::seeded_rng;

/// Feature matrix (row-major n x p) plus labels.
///
/// Logistic-regression labels are 0/1; regression labels are arbitrary reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    n: usize,
    p: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, n: usize, p: usize) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::invalid("dataset needs n >= 1 and p >= 1"));
        }
        if features.len() != n * p || labels.len() != n {
            return Err(Error::invalid(format!(
                "dataset shape mismatch: {} features, {} labels for n={n}, p={p}",
                features.len(),
                labels.len()
            )));
        }
        if !all_finite(&features) || !all_finite(&labels) {
            return Err(Error::invalid("dataset entries must be finite"));
        }
        Ok(Self {
            features,
            labels,
            n,
            p,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    /// Reads the dataset CSV: header `f0,..,f{p-1},label`, '.' decimal point.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Config(format!("bad csv header: {e}")))?
            .clone();
        if headers.len() < 2 || &headers[headers.len() - 1] != "label" {
            return Err(Error::Config(
                "dataset csv must have columns f0..f{p-1},label".into(),
            ));
        }
        let p = headers.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Config(format!("bad csv record {i}: {e}")))?;
            if rec.len() != p + 1 {
                return Err(Error::Config(format!("csv row {i} has {} fields", rec.len())));
            }
            for field in rec.iter().take(p) {
                features.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("csv row {i}: {e}")))?,
                );
            }
            labels.push(
                rec[p]
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("csv row {i}: {e}")))?,
            );
        }
        let n = labels.len();
        Dataset::new(features, labels, n, p)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        let mut header: Vec<String> = (0..self.p).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)
            .map_err(|e| Error::Config(format!("csv write: {e}")))?;
        for i in 0..self.n {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{}", self.label(i)));
            w.write_record(&rec)
                .map_err(|e| Error::Config(format!("csv write: {e}")))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    // relu derivative at the kink is taken as 0
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Model family. `Mlp.layers` is the full size list including the input
/// width (which must match the dataset's p) and the scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `f(theta; x, y) = 1/2 (x^T theta - y)^2`
    LinearRegressionMse,
    /// `f(theta; x, y) = ln(1 + e^{x^T theta}) - y x^T theta`, labels in {0,1}
    LogisticRegression,
    /// Fully connected net with scalar squared-error output loss.
    Mlp {
        layers: Vec<usize>,
        activation: Activation,
    },
}

impl ModelSpec {
    pub fn param_dim(&self, p: usize) -> Result<usize> {
        match self {
            ModelSpec::LinearRegressionMse | ModelSpec::LogisticRegression => Ok(p),
            ModelSpec::Mlp { layers, .. } => {
                if layers.len() < 2 {
                    return Err(Error::invalid("mlp needs at least input and output layers"));
                }
                if layers[0] != p {
                    return Err(Error::invalid(format!(
                        "mlp input width {} does not match dataset p = {p}",
                        layers[0]
                    )));
                }
                if *layers.last().unwrap() != 1 {
                    return Err(Error::invalid("mlp output layer must have width 1"));
                }
                if layers.iter().any(|&l| l == 0) {
                    return Err(Error::invalid("mlp layer sizes must be positive"));
                }
                Ok(layers
                    .windows(2)
                    .map(|w| (w[0] + 1) * w[1])
                    .sum())
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ln(1 + e^z) without overflow
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Exact batch-averaged loss and gradient at `theta` over the rows in `batch`.
pub fn loss_and_grad(
    model: &ModelSpec,
    theta: &[f64],
    batch: &[usize],
    data: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must be non-empty"));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.n()) {
        return Err(Error::invalid(format!("batch index {i} out of range")));
    }
    let d = model.param_dim(data.p())?;
    if theta.len() != d {
        return Err(Error::invalid(format!(
            "theta has dimension {}, model expects {d}",
            theta.len()
        )));
    }
    if !all_finite(theta) {
        return Err(Error::invalid("theta must be finite"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    match model {
        ModelSpec::LinearRegressionMse => {
            for &i in batch {
                let x = data.row(i);
                let r = dot(x, theta) - data.label(i);
                loss += 0.5 * r * r * inv;
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += inv * r * xi;
                }
            }
        }
        ModelSpec::LogisticRegression => {
            for &i in batch {
                let x = data.row(i);
                let z = dot(x, theta);
                let y = data.label(i);
                loss += inv * (softplus(z) - y * z);
                let coeff = inv * (sigmoid(z) - y);
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += coeff * xi;
                }
            }
        }
        ModelSpec::Mlp { layers, activation } => {
            for &i in batch {
                let (l, _) = mlp_example(layers, *activation, theta, data.row(i), data.label(i), Some(&mut grad), inv);
                loss += inv * l;
            }
        }
    }
    if !loss.is_finite() || !all_finite(&grad) {
        return Err(Error::Overflow(
            "loss or gradient is non-finite; parameters likely diverged".into(),
        ));
    }
    Ok((loss, grad))
}

/// Loss and gradient over the whole dataset, `F(theta)` and `grad F(theta)`.
pub fn full_loss_and_grad(model: &ModelSpec, theta: &[f64], data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let batch: Vec<usize> = (0..data.n()).collect();
    loss_and_grad(model, theta, &batch, data)
}

// Forward + backward pass for one example; accumulates `scale * grad` into
// `grad_acc` when provided. Returns (loss, prediction).
fn mlp_example(
    layers: &[usize],
    act: Activation,
    theta: &[f64],
    x: &[f64],
    y: f64,
    grad_acc: Option<&mut Vec<f64>>,
    scale: f64,
) -> (f64, f64) {
    let depth = layers.len() - 1;
    // forward: keep pre-activations and activations per layer
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    let mut pres: Vec<Vec<f64>> = Vec::with_capacity(depth);
    acts.push(x.to_vec());
    let mut offset = 0;
    for l in 0..depth {
        let (fan_in, fan_out) = (layers[l], layers[l + 1]);
        let w = &theta[offset..offset + fan_in * fan_out];
        let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += (fan_in + 1) * fan_out;
        let input = &acts[l];
        let mut z = vec![0.0; fan_out];
        for (o, zo) in z.iter_mut().enumerate() {
            *zo = b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], input);
        }
        let a = if l + 1 == depth {
            z.clone() // linear output layer
        } else {
            z.iter().map(|&v| act.apply(v)).collect()
        };
        pres.push(z);
        acts.push(a);
    }
    let pred = acts[depth][0];
    let loss = 0.5 * (pred - y) * (pred - y);
    if let Some(grad) = grad_acc {
        // backward
        let mut delta = vec![pred - y]; // d loss / d z for the output layer
        let mut offsets: Vec<usize> = Vec::with_capacity(depth);
        let mut off = 0;
        for l in 0..depth {
            offsets.push(off);
            off += (layers[l] + 1) * layers[l + 1];
        }
        for l in (0..depth).rev() {
            let (fan_in, fan_out) = (layers[l], layers[l + 1]);
            let base = offsets[l];
            let input = &acts[l];
            for o in 0..fan_out {
                let d_o = delta[o];
                let wrow = base + o * fan_in;
                for (j, inj) in input.iter().enumerate() {
                    grad[wrow + j] += scale * d_o * inj;
                }
                grad[base + fan_in * fan_out + o] += scale * d_o;
            }
            if l > 0 {
                let w = &theta[base..base + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for (o, &d_o) in delta.iter().enumerate() {
                    for (j, pj) in prev.iter_mut().enumerate() {
                        *pj += d_o * w[o * fan_in + j];
                    }
                }
                for (j, pj) in prev.iter_mut().enumerate() {
                    *pj *= act.derivative(pres[l - 1][j]);
                }
                delta = prev;
            }
        }
    }
    (loss, pred)
}

/// Scale-to-norm clipping: `g * min(1, c / ||g||)`. The zero vector is
/// returned unchanged. The comparison carries a few ulps of slack so that
/// re-clipping an already-clipped vector is an exact no-op.
pub fn clip(grad: &[f64], c: f64) -> Vec<f64> {
    assert!(c > 0.0, "clipping radius must be positive");
    let n = norm(grad);
    if n <= c * (1.0 + 4.0 * f64::EPSILON) {
        grad.to_vec()
    } else {
        let s = c / n;
        grad.iter().map(|g| g * s).collect()
    }
}

/// Empirical stand-ins for the smoothness constant L and gradient bound G.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    /// Max pairwise `||grad F(x) - grad F(y)|| / ||x - y||` over the probes.
    pub l_hat: f64,
    /// Max probe gradient norm.
    pub g_hat: f64,
    /// Spectral `lambda_max((1/n) X^T X)` for linear regression, where the
    /// estimate has an exact reference.
    pub exact_l: Option<f64>,
    /// Set when the data admits no gradient signal at all (g_hat = 0).
    pub degenerate: bool,
}

/// Probes the full objective at `probe_count` points sampled uniformly in
/// the ball of the given radius and reports the largest observed gradient
/// norm and gradient-difference ratio.
pub fn estimate_bounds(
    model: &ModelSpec,
    data: &Dataset,
    probe_count: usize,
    radius: f64,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    if probe_count < 2 {
        return Err(Error::invalid("need at least 2 probes"));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let d = model.param_dim(data.p())?;
    let mut rng = seeded_rng(seed);
    let mut points = Vec::with_capacity(probe_count);
    let mut grads = Vec::with_capacity(probe_count);
    let mut g_hat: f64 = 0.0;
    for _ in 0..probe_count {
        let theta = sample_ball(&mut rng, d, radius);
        let (_, g) = full_loss_and_grad(model, &theta, data)?;
        g_hat = g_hat.max(norm(&g));
        points.push(theta);
        grads.push(g);
    }
    let mut l_hat: f64 = 0.0;
    for i in 0..probe_count {
        for j in (i + 1)..probe_count {
            let dx = norm(&sub(&points[i], &points[j]));
            if dx < 1e-12 {
                continue;
            }
            let dg = norm(&sub(&grads[i], &grads[j]));
            l_hat = l_hat.max(dg / dx);
        }
    }
    let exact_l = match model {
        ModelSpec::LinearRegressionMse => {
            let l = spectral_norm_gram(data);
            debug_assert!(l_hat <= l * (1.0 + 1e-6), "probe L exceeded spectral L");
            Some(l)
        }
        _ => None,
    };
    Ok(SmoothnessEstimate {
        l_hat,
        g_hat,
        exact_l,
        degenerate: g_hat == 0.0,
    })
}

fn sample_ball(rng: &mut ChaCha12Rng, d: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&v);
    if n == 0.0 {
        return v;
    }
    let u: f64 = rng.gen::<f64>();
    let r = radius * u.powf(1.0 / d as f64) / n;
    for vi in v.iter_mut() {
        *vi *= r;
    }
    v
}

/// `lambda_max((1/n) X^T X)` by power iteration on the matrix-free operator.
pub fn spectral_norm_gram(data: &Dataset) -> f64 {
    let p = data.p();
    let n = data.n();
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; p];
        for i in 0..n {
            let x = data.row(i);
            let s = dot(x, v) / n as f64;
            for (o, xi) in out.iter_mut().zip(x) {
                *o += s * xi;
            }
        }
        out
    };
    let mut v = vec![0.0; p];
    // deterministic non-degenerate start
    for (j, vj) in v.iter_mut().enumerate() {
        *vj = 1.0 + (j as f64 * 0.7).sin();
    }
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = apply(&v);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        let next_lambda = dot(&w, &v) / dot(&v, &v);
        for (vj, wj) in v.iter_mut().zip(&w) {
            *vj = wj / nw;
        }
        if (next_lambda - lambda).abs() <= 1e-14 * next_lambda.abs().max(1.0) {
            return next_lambda;
        }
        lambda = next_lambda;
    }
    lambda
}
