//! Query-conditioned Laplacian temporal attention.
//!
//! Each head keeps static priors (slope `alpha_bar`, peak `mu_bar` stored as
//! a logit). A small shared perceptron maps every query slice to residuals
//! `(delta_alpha, delta_mu)` that reshape the prior per query. The resulting
//! bias `-alpha_i |D_ij - mu_i|` over log time distances is added to the
//! scaled dot-product scores together with a timestamp causal mask.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{logit, sigmoid, xavier_uniform, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 60.0;
pub const DEFAULT_GAMMA_MU: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 4.0;
pub const ALPHA_FLOOR: f64 = 1e-4;
pub const ALPHA_CEILING: f64 = 2.5;
/// Hidden width of the residual predictor.
pub const PREDICTOR_HIDDEN: usize = 64;
/// Tiling of peak priors covers `[0, MU_TILE_SPAN * gamma_mu]`.
pub const MU_TILE_SPAN: f64 = 0.95;
pub const MU_PROB_MIN: f64 = 0.05;
pub const MU_PROB_MAX: f64 = 0.95;
pub const ALPHA_JITTER: f64 = 0.05;
/// Horizon of the sinusoidal time encoding, two weeks in seconds.
pub const SINUSOID_HORIZON: f64 = 1_209_600.0;

/// `D[i][j] = ln(|t_i - t_j| / tau + 1)`
pub fn log_distance_matrix(t: &[i64], tau: f64) -> Result<Tensor> {
    ensure!(tau > 0.0, InvalidArgument, "tau must be positive, got {tau}");
    let s = t.len();
    let mut d = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            d[i * s + j] = ((t[i] - t[j]).unsigned_abs() as f64 / tau).ln_1p();
        }
    }
    Tensor::new(vec![s, s], d)
}

/// `M[i][j] = 0` when `t_j <= t_i`, else `-inf`. Equal timestamps see each other.
pub fn causal_mask(t: &[i64]) -> Tensor {
    let s = t.len();
    let mut m = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            if t[j] > t[i] {
                m[i * s + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::from_parts(vec![s, s], m)
}

/// `B[i][j] = -alpha[i] * |D[i][j] - mu[i]|`
pub fn laplace_bias(dist: &Tensor, alpha: &[f64], mu: &[f64]) -> Result<Tensor> {
    let s = dist.last_dim();
    ensure!(dist.shape() == [s, s], Shape, "distance matrix must be square");
    ensure!(
        alpha.len() == s && mu.len() == s,
        Shape,
        "need {s} per-query slopes and peaks, got {} and {}",
        alpha.len(),
        mu.len()
    );
    ensure!(alpha.iter().all(|&a| a > 0.0), InvalidArgument, "slopes must be positive");
    Ok(crate::numerics::laplace_bias_values(alpha, mu, dist))
}

/// `clamp(alpha_bar * exp(delta_alpha), ALPHA_FLOOR, ALPHA_CEILING)`
pub fn project_alpha(alpha_bar: f64, delta_alpha: f64) -> f64 {
    (alpha_bar * delta_alpha.exp()).clamp(ALPHA_FLOOR, ALPHA_CEILING)
}

/// `sigmoid(logit(mu_bar / gamma_mu) + lambda * delta_mu) * gamma_mu`
pub fn project_mu(mu_bar: f64, delta_mu: f64, lambda: f64, gamma_mu: f64) -> Result<f64> {
    let p = mu_bar / gamma_mu;
    ensure!(p > 0.0 && p < 1.0, InvalidArgument, "peak prior {mu_bar} must lie strictly inside (0, {gamma_mu})");
    Ok(sigmoid(logit(p) + lambda * delta_mu) * gamma_mu)
}

/// `Phi(t)[2j] = sin(w_j t)`, `Phi(t)[2j+1] = cos(w_j t)` with `w_j = horizon^(-2j/d)`.
pub fn sinusoidal_time_encoding(t: f64, d: usize, horizon: f64) -> Result<Vec<f64>> {
    ensure!(d.is_multiple_of(2) && d > 0, InvalidArgument, "encoding width must be even, got {d}");
    let mut out = vec![0.0; d];
    for j in 0..d / 2 {
        let w = horizon.powf(-2.0 * j as f64 / d as f64);
        let (s, c) = (w * t).sin_cos();
        out[2 * j] = s;
        out[2 * j + 1] = c;
    }
    Ok(out)
}

/// Trainable temporal-bias parameters of one attention layer.
///
/// `alpha_bar` and `mu_logit` hold one entry per head; the perceptron
/// `w1 [d_h, 64], b1 [64], w2 [64, 2], b2 [2]` is shared by all heads.
/// Column 0 of the output drives the slope, column 1 the peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalParams<T> {
    pub alpha_bar: T,
    pub mu_logit: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

pub type TemporalBiasParams = TemporalParams<Tensor>;

impl<T> TemporalParams<T> {
    /// `(name, value, is_predictor)` in a fixed order.
    pub fn fields(&self) -> [(&'static str, &T, bool); 6] {
        [
            ("alpha_bar", &self.alpha_bar, false),
            ("mu_logit", &self.mu_logit, false),
            ("w1", &self.w1, true),
            ("b1", &self.b1, true),
            ("w2", &self.w2, true),
            ("b2", &self.b2, true),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut T, bool); 6] {
        [
            ("alpha_bar", &mut self.alpha_bar, false),
            ("mu_logit", &mut self.mu_logit, false),
            ("w1", &mut self.w1, true),
            ("b1", &mut self.b1, true),
            ("w2", &mut self.w2, true),
            ("b2", &mut self.b2, true),
        ]
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&'static str, &T, bool) -> Result<U>) -> Result<TemporalParams<U>> {
        Ok(TemporalParams {
            alpha_bar: f("alpha_bar", &self.alpha_bar, false)?,
            mu_logit: f("mu_logit", &self.mu_logit, false)?,
            w1: f("w1", &self.w1, true)?,
            b1: f("b1", &self.b1, true)?,
            w2: f("w2", &self.w2, true)?,
            b2: f("b2", &self.b2, true)?,
        })
    }
}

/// Peak prior probabilities tiled over `[0, 0.95]` and clamped to `[0.05, 0.95]`.
pub fn tiled_mu_probabilities(n_heads: usize) -> Vec<f64> {
    (0..n_heads).map(|h| (h as f64 / (n_heads - 1) as f64 * MU_TILE_SPAN).clamp(MU_PROB_MIN, MU_PROB_MAX)).collect()
}

/// Initial temporal parameters: tiled peaks, jittered slopes, random hidden
/// layer, and an exactly zero output layer so every query starts at its
/// head's prior.
pub fn init_priors(n_heads: usize, head_dim: usize, alpha_base: f64, seed: u64) -> Result<TemporalBiasParams> {
    ensure!(n_heads >= 2, InvalidArgument, "need at least 2 heads to tile priors, got {n_heads}");
    ensure!(alpha_base > 0.0, InvalidArgument, "alpha_base must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = (0..n_heads).map(|_| alpha_base + rng.gen_range(-ALPHA_JITTER..=ALPHA_JITTER)).collect();
    let mu = tiled_mu_probabilities(n_heads).into_iter().map(logit).collect();
    Ok(TemporalParams {
        alpha_bar: Tensor::vector(alpha),
        mu_logit: Tensor::vector(mu),
        w1: xavier_uniform(head_dim, PREDICTOR_HIDDEN, &mut rng),
        b1: Tensor::zeros(&[PREDICTOR_HIDDEN]),
        w2: Tensor::zeros(&[PREDICTOR_HIDDEN, 2]),
        b2: Tensor::zeros(&[2]),
    })
}

impl TemporalBiasParams {
    pub fn n_heads(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Static peak of head `h` in log-distance units.
    pub fn mu_bar(&self, h: usize, gamma_mu: f64) -> f64 {
        sigmoid(self.mu_logit.data()[h]) * gamma_mu
    }

    /// `w2ᵀ tanh(w1ᵀ q + b1) + b2` for one per-head query.
    pub fn predict_residuals(&self, q: &[f64]) -> Result<(f64, f64)> {
        let dh = self.w1.rows();
        ensure!(q.len() == dh, Shape, "query of length {} for head dimension {dh}", q.len());
        let (w1, b1, w2, b2) = (self.w1.data(), self.b1.data(), self.w2.data(), self.b2.data());
        let (mut da, mut dm) = (b2[0], b2[1]);
        for u in 0..PREDICTOR_HIDDEN {
            let z: f64 = b1[u] + (0..dh).map(|c| q[c] * w1[c * PREDICTOR_HIDDEN + u]).sum::<f64>();
            let a = z.tanh();
            da += a * w2[2 * u];
            dm += a * w2[2 * u + 1];
        }
        Ok((da, dm))
    }
}

/// Constants and ablation switches of the temporal bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSettings {
    pub tau: f64,
    pub gamma_mu: f64,
    pub lambda: f64,
    /// When false the slope stays at its static prior.
    pub dynamic_alpha: bool,
    /// When false the peak stays at its static prior.
    pub dynamic_mu: bool,
}

impl Default for BiasSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            gamma_mu: DEFAULT_GAMMA_MU,
            lambda: DEFAULT_LAMBDA,
            dynamic_alpha: true,
            dynamic_mu: true,
        }
    }
}

/// Per-sequence constants shared by every layer.
#[derive(Debug, Clone)]
pub struct SeqGeometry {
    pub dist: Rc<Tensor>,
    pub mask: Tensor,
}

impl SeqGeometry {
    pub fn new(t: &[i64], tau: f64) -> Result<Self> {
        Ok(Self { dist: Rc::new(log_distance_matrix(t, tau)?), mask: causal_mask(t) })
    }
}

/// Tape handles of one attention layer's weights.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub temporal: Option<TemporalParams<Var>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HeadTrace {
    /// Per-query projected slope; empty without a temporal bias.
    pub alpha: Vec<f64>,
    /// Per-query projected peak; empty without a temporal bias.
    pub mu: Vec<f64>,
    pub bias: Option<Tensor>,
    pub weights: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
}

/// Multi-head attention over one sequence `x [S, d]` recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    tape: &mut Tape,
    x: Var,
    geometry: &SeqGeometry,
    mask: Var,
    n_heads: usize,
    vars: &AttentionVars,
    settings: &BiasSettings,
    mut trace: Option<&mut LayerTrace>,
) -> Result<Var> {
    let (s, d) = (tape.value(x).rows(), tape.value(x).last_dim());
    ensure!(n_heads > 0 && d % n_heads == 0, Shape, "model width {d} not divisible by {n_heads} heads");
    ensure!(geometry.dist.shape() == [s, s], Shape, "timestamps for {} events, sequence has {s}", geometry.dist.rows());
    let dh = d / n_heads;
    let q = tape.matmul(x, vars.wq)?;
    let k = tape.matmul(x, vars.wk)?;
    let v = tape.matmul(x, vars.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let raw = tape.matmul_bt(qh, kh)?;
        let mut scores = tape.scale(raw, scale);
        let mut head_trace = HeadTrace::default();

        if let Some(tp) = &vars.temporal {
            let (alpha, mu) = project_per_query(tape, qh, tp, h, s, settings)?;
            let bias = tape.laplace_bias(alpha, mu, Rc::clone(&geometry.dist))?;
            scores = tape.add(scores, bias)?;
            if trace.is_some() {
                head_trace.alpha = tape.value(alpha).data().to_vec();
                head_trace.mu = tape.value(mu).data().to_vec();
                head_trace.bias = Some(tape.value(bias).clone());
            }
        }
        let scores = tape.add(scores, mask)?;
        if let Some(pos) = tape.value(scores).data().iter().position(|v| v.is_nan()) {
            return Err(Error::Numerical(format!(
                "NaN attention score at head {h}, query {}, key {}",
                pos / s,
                pos % s
            )));
        }
        let weights = tape.softmax(scores)?;
        if let Some(tr) = trace.as_deref_mut() {
            head_trace.weights = tape.value(weights).clone();
            tr.heads.push(head_trace);
        }
        outs.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, vars.wo)
}

/// Per-query `(alpha, mu)` columns `[S, 1]` for head `h`.
fn project_per_query(
    tape: &mut Tape,
    qh: Var,
    tp: &TemporalParams<Var>,
    h: usize,
    s: usize,
    settings: &BiasSettings,
) -> Result<(Var, Var)> {
    let residuals = if settings.dynamic_alpha || settings.dynamic_mu {
        let pre = tape.matmul(qh, tp.w1)?;
        let pre = tape.add_row(pre, tp.b1)?;
        let hidden = tape.tanh(pre);
        let out = tape.matmul(hidden, tp.w2)?;
        Some(tape.add_row(out, tp.b2)?)
    } else {
        None
    };

    let alpha_bar = tape.broadcast(tp.alpha_bar, h, s)?;
    let alpha = match residuals {
        Some(r) if settings.dynamic_alpha => {
            let da = tape.slice_cols(r, 0, 1)?;
            let growth = tape.exp(da);
            tape.mul(alpha_bar, growth)?
        }
        _ => alpha_bar,
    };
    let alpha = tape.clamp(alpha, ALPHA_FLOOR, ALPHA_CEILING);

    let mu_logit = tape.broadcast(tp.mu_logit, h, s)?;
    let z = match residuals {
        Some(r) if settings.dynamic_mu => {
            let dm = tape.slice_cols(r, 1, 1)?;
            let step = tape.scale(dm, settings.lambda);
            tape.add(mu_logit, step)?
        }
        _ => mu_logit,
    };
    let p = tape.sigmoid(z);
    let mu = tape.scale(p, settings.gamma_mu);
    Ok((alpha, mu))
}

/// Value-level attention layer with its own weights, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct MataAttention {
    pub n_heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub temporal: Option<TemporalBiasParams>,
    pub settings: BiasSettings,
}

impl MataAttention {
    pub fn init(d_model: usize, n_heads: usize, alpha_base: f64, settings: BiasSettings, seed: u64) -> Result<Self> {
        ensure!(
            n_heads > 0 && d_model.is_multiple_of(n_heads),
            Shape,
            "model width {d_model} not divisible by {n_heads} heads"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = || xavier_uniform(d_model, d_model, &mut rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        Ok(Self {
            n_heads,
            wq,
            wk,
            wv,
            wo,
            temporal: Some(init_priors(n_heads, d_model / n_heads, alpha_base, seed ^ 0x9e37_79b9)?),
            settings,
        })
    }

    /// Runs the layer on `x [S, d]` with event times `t`.
    pub fn forward(&self, x: &Tensor, t: &[i64]) -> Result<(Tensor, LayerTrace)> {
        let geometry = SeqGeometry::new(t, self.settings.tau)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mask = tape.constant(geometry.mask.clone());
        let vars = AttentionVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            wo: tape.constant(self.wo.clone()),
            temporal: self
                .temporal
                .as_ref()
                .map(|tp| tp.try_map(&mut |_, v, _| Ok(tape.constant(v.clone()))))
                .transpose()?,
        };
        let mut trace = LayerTrace::default();
        let out =
            attention_forward(&mut tape, xv, &geometry, mask, self.n_heads, &vars, &self.settings, Some(&mut trace))?;
        Ok((tape.value(out).clone(), trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn log_distance_examples() {
        let d = log_distance_matrix(&[0, 0, 60, 3600], 60.0).unwrap();
        assert_eq!(d.at2(0, 1), 0.0);
        assert!((d.at2(0, 2) - 2f64.ln()).abs() < 1e-15);
        assert!((d.at2(3, 0) - 61f64.ln()).abs() < 1e-15);
        assert!((d.at2(0, 3) - 4.11087).abs() < 5e-6);
        assert!(log_distance_matrix(&[0], 0.0).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = causal_mask(&[5, 5]);
        assert_eq!(m.data(), &[0.0; 4]);
        let m = causal_mask(&[1, 2]);
        assert_eq!(m.at2(0, 1), f64::NEG_INFINITY);
        assert_eq!(m.at2(1, 0), 0.0);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_alpha(1.0, 0.0), 1.0);
        assert_eq!(project_alpha(1.0, 3f64.ln()), 2.5);
        assert_eq!(project_alpha(1.0, -20.0), 1e-4);
        assert!((project_mu(5.0, 0.0, 4.0, 10.0).unwrap() - 5.0).abs() < 1e-12);
        assert!((project_mu(5.0, 0.25, 4.0, 10.0).unwrap() - 7.31059).abs() < 5e-6);
        assert!(project_mu(5.0, 1e3, 4.0, 10.0).unwrap() <= 10.0);
        assert!(project_mu(10.0, 0.0, 4.0, 10.0).is_err());
    }

    #[test]
    fn laplace_bias_examples() {
        let d = Tensor::matrix(2, 2, vec![1.0, 0.0, 3.5, 1.0]).unwrap();
        let b = laplace_bias(&d, &[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(b.data(), &[0.0, -2.0, -5.0, 0.0]);
    }

    #[test]
    fn prior_examples() {
        let p = init_priors(2, 8, 1.0, 0).unwrap();
        let probs: Vec<f64> = p.mu_logit.data().iter().map(|&l| sigmoid(l)).collect();
        assert!((probs[0] - 0.05).abs() < 1e-12 && (probs[1] - 0.95).abs() < 1e-12);

        let p = init_priors(4, 8, 1.0, 3).unwrap();
        let probs: Vec<f64> = p.mu_logit.data().iter().map(|&l| sigmoid(l)).collect();
        for (a, b) in probs.iter().zip([0.05, 0.95 / 3.0, 1.9 / 3.0, 0.95]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(p.alpha_bar.data().iter().all(|&a| (0.95..=1.05).contains(&a)));
        assert!(p.w2.data().iter().all(|&w| w == 0.0));
        assert!(p.b2.data().iter().all(|&w| w == 0.0));
        assert_eq!(p.predict_residuals(&[0.3; 8]).unwrap(), (0.0, 0.0));
        assert!(p.predict_residuals(&[0.3; 7]).is_err());
        assert!(init_priors(1, 8, 1.0, 0).is_err());
    }

    #[test]
    fn residual_bounds() {
        let mut p = init_priors(4, 4, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        p.w2 = xavier_uniform(PREDICTOR_HIDDEN, 2, &mut rng);
        p.b1 = Tensor::vector((0..PREDICTOR_HIDDEN).map(|_| rng.gen_range(-1.0..1.0)).collect());
        // q = 0 leaves only the bias path
        let (da, dm) = p.predict_residuals(&[0.0; 4]).unwrap();
        let mut ea = 0.0;
        let mut em = 0.0;
        for u in 0..PREDICTOR_HIDDEN {
            let a = p.b1.data()[u].tanh();
            ea += a * p.w2.at2(u, 0);
            em += a * p.w2.at2(u, 1);
        }
        assert!((da - ea).abs() < 1e-12 && (dm - em).abs() < 1e-12);
        let l1: f64 = p.w2.data().iter().map(|w| w.abs()).sum();
        for _ in 0..50 {
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let (a, m) = p.predict_residuals(&q).unwrap();
            assert!(a.abs() <= l1 && m.abs() <= l1);
        }
    }

    #[test]
    fn sinusoid_examples() {
        let z = sinusoidal_time_encoding(0.0, 8, SINUSOID_HORIZON).unwrap();
        assert_eq!(z, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let z = sinusoidal_time_encoding(12345.0, 4096, SINUSOID_HORIZON).unwrap();
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 45.2548).abs() < 5e-5);
        assert!(sinusoidal_time_encoding(0.0, 5, SINUSOID_HORIZON).is_err());
    }

    /// Straight-line evaluation of one attention layer with explicit loops.
    fn loop_oracle(layer: &MataAttention, x: &Tensor, t: &[i64]) -> Vec<f64> {
        let (s, d) = (x.rows(), x.last_dim());
        let nh = layer.n_heads;
        let dh = d / nh;
        let proj = |w: &Tensor| {
            let mut out = vec![0.0; s * d];
            for i in 0..s {
                for c in 0..d {
                    let mut acc = 0.0;
                    for r in 0..d {
                        acc += x.at2(i, r) * w.at2(r, c);
                    }
                    out[i * d + c] = acc;
                }
            }
            out
        };
        let (q, k, v) = (proj(&layer.wq), proj(&layer.wk), proj(&layer.wv));
        let tp = layer.temporal.as_ref().unwrap();
        let st = &layer.settings;
        let mut cat = vec![0.0; s * d];
        for h in 0..nh {
            for i in 0..s {
                let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                let (da, dm) = tp.predict_residuals(qi).unwrap();
                let alpha = project_alpha(tp.alpha_bar.data()[h], da);
                let mu = project_mu(tp.mu_bar(h, st.gamma_mu), dm, st.lambda, st.gamma_mu).unwrap();
                let mut scores = vec![f64::NEG_INFINITY; s];
                for j in 0..s {
                    if t[j] <= t[i] {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += qi[c] * k[j * d + h * dh + c];
                        }
                        let dist = ((t[i] - t[j]).abs() as f64 / st.tau + 1.0).ln();
                        scores[j] = dot / (dh as f64).sqrt() - alpha * (dist - mu).abs();
                    }
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|&z| (z - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i * d + h * dh + c] = (0..s).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
                }
            }
        }
        let mut out = vec![0.0; s * d];
        for i in 0..s {
            for c in 0..d {
                out[i * d + c] = (0..d).map(|r| cat[i * d + r] * layer.wo.at2(r, c)).sum();
            }
        }
        out
    }

    fn trained_like(seed: u64) -> MataAttention {
        let mut layer = MataAttention::init(8, 2, 1.0, BiasSettings::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let tp = layer.temporal.as_mut().unwrap();
        tp.w2 = xavier_uniform(PREDICTOR_HIDDEN, 2, &mut rng);
        tp.b2 = Tensor::vector(vec![0.1, -0.2]);
        layer
    }

    #[test]
    fn matches_loop_oracle() {
        let layer = trained_like(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::matrix(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let t = [0, 700, 700];
        let (out, _) = layer.forward(&x, &t).unwrap();
        let expect = loop_oracle(&layer, &x, &t);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn single_event_attends_to_itself() {
        let layer = trained_like(2);
        let x = Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (out, trace) = layer.forward(&x, &[42]).unwrap();
        for h in &trace.heads {
            assert_eq!(h.weights.data(), &[1.0]);
        }
        let mut v = [0.0; 8];
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = (0..8).map(|r| x.at2(0, r) * layer.wv.at2(r, c)).sum();
        }
        for c in 0..8 {
            let o: f64 = (0..8).map(|r| v[r] * layer.wo.at2(r, c)).sum();
            assert!((out.data()[c] - o).abs() < 1e-12);
        }
    }

    #[test]
    fn warm_start_bias_equals_static_prior() {
        let layer = MataAttention::init(8, 4, 1.0, BiasSettings::default(), 3).unwrap();
        let x = Tensor::matrix(4, 8, (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let t = [0, 30, 4000, 90_000];
        let (_, trace) = layer.forward(&x, &t).unwrap();
        let dist = log_distance_matrix(&t, DEFAULT_TAU).unwrap();
        let tp = layer.temporal.as_ref().unwrap();
        for (h, ht) in trace.heads.iter().enumerate() {
            let a = tp.alpha_bar.data()[h];
            let m = tp.mu_bar(h, DEFAULT_GAMMA_MU);
            let expect = laplace_bias(&dist, &[a; 4], &[m; 4]).unwrap();
            assert_eq!(ht.bias.as_ref().unwrap(), &expect);
        }
    }

    #[test]
    fn nan_scores_name_head_and_query() {
        let mut layer = trained_like(4);
        layer.wq.data_mut()[0] = f64::NAN;
        let x = Tensor::matrix(2, 8, vec![1.0; 16]).unwrap();
        let err = layer.forward(&x, &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("head 0, query 0"), "{err}");
    }

    #[test]
    fn static_peak_ignores_peak_residual() {
        let mut layer = trained_like(5);
        layer.settings.dynamic_mu = false;
        let x = Tensor::matrix(3, 8, (0..24).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let (_, trace) = layer.forward(&x, &[0, 100, 5000]).unwrap();
        let tp = layer.temporal.as_ref().unwrap();
        for (h, ht) in trace.heads.iter().enumerate() {
            let m = tp.mu_bar(h, DEFAULT_GAMMA_MU);
            assert!(ht.mu.iter().all(|&v| v == m));
            assert!(ht.alpha.iter().any(|&a| a != tp.alpha_bar.data()[h]));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let layer = trained_like(6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::matrix(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let t = [0i64, 50, 50, 4000];
        let geometry = SeqGeometry::new(&t, DEFAULT_TAU).unwrap();
        let tp = layer.temporal.clone().unwrap();
        // differentiate w.r.t. each weight tensor in turn
        let names = ["wq", "wk", "wv", "wo", "alpha_bar", "mu_logit", "w1", "b1", "w2", "b2"];
        for name in names {
            let pick = |n: &str| -> Tensor {
                match n {
                    "wq" => layer.wq.clone(),
                    "wk" => layer.wk.clone(),
                    "wv" => layer.wv.clone(),
                    "wo" => layer.wo.clone(),
                    other => tp.fields().iter().find(|f| f.0 == other).unwrap().1.clone(),
                }
            };
            let f = |tape: &mut Tape, p: Var| -> Result<Var> {
                let mut get = |n: &str| if n == name { p } else { tape.constant(pick(n)) };
                let wq = get("wq");
                let wk = get("wk");
                let wv = get("wv");
                let wo = get("wo");
                let temporal = TemporalParams {
                    alpha_bar: get("alpha_bar"),
                    mu_logit: get("mu_logit"),
                    w1: get("w1"),
                    b1: get("b1"),
                    w2: get("w2"),
                    b2: get("b2"),
                };
                let vars = AttentionVars { wq, wk, wv, wo, temporal: Some(temporal) };
                let xv = tape.constant(x.clone());
                let mask = tape.constant(geometry.mask.clone());
                let out = attention_forward(tape, xv, &geometry, mask, 2, &vars, &layer.settings, None)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum(sq))
            };
            let r = grad_check(f, &pick(name), 1e-6, 1e-4).unwrap();
            assert!(r.passed, "{name}: {:?}", r.worst());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn projections_stay_in_range(
            abar in 1e-3f64..5.0,
            da in -50.0f64..50.0,
            p in 0.001f64..0.999,
            dm in -50.0f64..50.0,
        ) {
            let a = project_alpha(abar, da);
            prop_assert!((ALPHA_FLOOR..=ALPHA_CEILING).contains(&a));
            let m = project_mu(p * 10.0, dm, DEFAULT_LAMBDA, 10.0).unwrap();
            prop_assert!((0.0..=10.0).contains(&m));
        }

        #[test]
        fn bias_peaks_where_distance_matches(
            d in prop::collection::vec(0.0f64..12.0, 1..12),
            alpha in 0.01f64..2.5,
            mu in 0.0f64..10.0,
        ) {
            let s = d.len();
            let mut dist = vec![0.0; s * s];
            dist[..s].copy_from_slice(&d);
            let dist = Tensor::matrix(s, s, dist).unwrap();
            let b = laplace_bias(&dist, &vec![alpha; s], &vec![mu; s]).unwrap();
            let row = &b.data()[..s];
            let best = (0..s).max_by(|&a, &c| row[a].total_cmp(&row[c])).unwrap();
            let closest = d.iter().map(|x| (x - mu).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(((d[best] - mu).abs() - closest).abs() < 1e-12);
        }

        #[test]
        fn causal_rows_sum_to_one(
            t in prop::collection::vec(0i64..20, 1..8),
            seed in 0u64..1000,
        ) {
            let mut t = t;
            t.sort();
            let layer = trained_like(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::matrix(t.len(), 8, (0..t.len() * 8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let (_, trace) = layer.forward(&x, &t).unwrap();
            for h in &trace.heads {
                for i in 0..t.len() {
                    let row = h.weights.row(i);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for j in 0..t.len() {
                        if t[j] > t[i] {
                            prop_assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }
}
