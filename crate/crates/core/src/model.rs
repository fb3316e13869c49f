//! The transformer stack: input projection, pre-norm blocks of temporal
//! attention and feed-forward layers, and a sigmoid multi-risk,
//! multi-horizon head.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, attention_forward, init_priors, sinusoidal_time_encoding, AttentionVars, BiasSettings, LayerTrace,
    SeqGeometry, TemporalParams, PREDICTOR_HIDDEN, SINUSOID_HORIZON,
};
use crate::error::{ensure, Error, Result};
use crate::numerics::{logit, xavier_uniform, Tape, Tensor, Var};

pub const RMS_EPS: f64 = 1e-6;
/// Initial output probability of every head unit, close to the positive
/// rate of sparse risk targets.
pub const HEAD_PRIOR_PROB: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    /// Laplacian temporal bias in every attention layer.
    Mata,
    /// Additive sinusoidal encoding of timestamps on the scaled input.
    Sinusoidal,
    /// Causal mask only; no time information beyond ordering.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// `(silu(x W_gate) * (x W_up)) W_down`
    #[default]
    Gated,
    /// `silu(x W_up) W_down`
    Plain,
}

fn yes() -> bool {
    true
}

fn default_embed_scale() -> f64 {
    64.0
}

/// Missing keys take the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_risks: usize,
    pub horizons: Vec<f64>,
    pub input_dim: usize,
    pub tau: f64,
    pub gamma_mu: f64,
    pub lambda: f64,
    pub alpha_base: f64,
    pub time_mode: TimeMode,
    #[serde(default = "yes")]
    pub dynamic_alpha: bool,
    #[serde(default = "yes")]
    pub dynamic_mu: bool,
    #[serde(default)]
    pub ffn: FfnKind,
    /// Factor on the unit-norm input embeddings in every time mode; the
    /// sinusoidal mode adds its encoding after scaling.
    #[serde(default = "default_embed_scale")]
    pub embed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 172,
            n_risks: 8,
            horizons: crate::labels::DEFAULT_HORIZONS.to_vec(),
            input_dim: 64,
            tau: attention::DEFAULT_TAU,
            gamma_mu: attention::DEFAULT_GAMMA_MU,
            lambda: attention::DEFAULT_LAMBDA,
            alpha_base: 1.0,
            time_mode: TimeMode::Mata,
            dynamic_alpha: true,
            dynamic_mu: true,
            ffn: FfnKind::Gated,
            embed_scale: default_embed_scale(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d_model > 0 && self.input_dim > 0, Config, "widths must be positive");
        ensure!(
            self.n_heads > 0 && self.d_model.is_multiple_of(self.n_heads),
            Config,
            "d_model {} is not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(self.n_risks > 0 && !self.horizons.is_empty(), Config, "empty output head");
        ensure!(self.horizons.iter().all(|&k| k > 0.0), Config, "horizons must be positive");
        ensure!(self.d_ff > 0, Config, "d_ff must be positive");
        ensure!(self.tau > 0.0, Config, "tau must be positive");
        ensure!(self.gamma_mu > 0.0, Config, "gamma_mu must be positive");
        ensure!(self.alpha_base > 0.0, Config, "alpha_base must be positive");
        if self.time_mode == TimeMode::Mata && self.n_layers > 0 {
            ensure!(self.n_heads >= 2, Config, "temporal bias needs at least 2 heads");
        }
        if self.time_mode == TimeMode::Sinusoidal {
            ensure!(self.input_dim.is_multiple_of(2), Config, "sinusoidal mode needs an even input_dim");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Output cells per event, `n_risks * horizons.len()`.
    pub fn output_width(&self) -> usize {
        self.n_risks * self.horizons.len()
    }

    pub fn bias_settings(&self) -> BiasSettings {
        BiasSettings {
            tau: self.tau,
            gamma_mu: self.gamma_mu,
            lambda: self.lambda,
            dynamic_alpha: self.dynamic_alpha,
            dynamic_mu: self.dynamic_mu,
        }
    }
}

/// Optimizer group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    /// The residual predictor of the temporal bias.
    Predictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub temporal: Option<TemporalParams<T>>,
    pub ffn_norm: T,
    pub w_gate: Option<T>,
    pub w_up: T,
    pub w_down: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub input_w: T,
    pub input_b: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: T,
    pub head_w: T,
    pub head_b: T,
}

fn group_of(predictor: bool) -> Group {
    if predictor {
        Group::Predictor
    } else {
        Group::Backbone
    }
}

impl<T> Params<T> {
    /// Every tensor with its checkpoint name and group, in a fixed order.
    pub fn fields(&self) -> Vec<(String, &T, Group)> {
        let mut out = vec![
            ("input.w".to_string(), &self.input_w, Group::Backbone),
            ("input.b".to_string(), &self.input_b, Group::Backbone),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), &l.attn_norm, Group::Backbone));
            out.push((p("wq"), &l.wq, Group::Backbone));
            out.push((p("wk"), &l.wk, Group::Backbone));
            out.push((p("wv"), &l.wv, Group::Backbone));
            out.push((p("wo"), &l.wo, Group::Backbone));
            if let Some(tp) = &l.temporal {
                for (n, v, pred) in tp.fields() {
                    out.push((p(&format!("temporal.{n}")), v, group_of(pred)));
                }
            }
            out.push((p("ffn_norm"), &l.ffn_norm, Group::Backbone));
            if let Some(g) = &l.w_gate {
                out.push((p("w_gate"), g, Group::Backbone));
            }
            out.push((p("w_up"), &l.w_up, Group::Backbone));
            out.push((p("w_down"), &l.w_down, Group::Backbone));
        }
        out.push(("final_norm".to_string(), &self.final_norm, Group::Backbone));
        out.push(("head.w".to_string(), &self.head_w, Group::Backbone));
        out.push(("head.b".to_string(), &self.head_b, Group::Backbone));
        out
    }

    /// Mutable counterpart of [`Params::fields`], same order.
    pub fn fields_mut(&mut self) -> Vec<(String, &mut T, Group)> {
        let mut out = vec![
            ("input.w".to_string(), &mut self.input_w, Group::Backbone),
            ("input.b".to_string(), &mut self.input_b, Group::Backbone),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), &mut l.attn_norm, Group::Backbone));
            out.push((p("wq"), &mut l.wq, Group::Backbone));
            out.push((p("wk"), &mut l.wk, Group::Backbone));
            out.push((p("wv"), &mut l.wv, Group::Backbone));
            out.push((p("wo"), &mut l.wo, Group::Backbone));
            if let Some(tp) = &mut l.temporal {
                for (n, v, pred) in tp.fields_mut() {
                    out.push((p(&format!("temporal.{n}")), v, group_of(pred)));
                }
            }
            out.push((p("ffn_norm"), &mut l.ffn_norm, Group::Backbone));
            if let Some(g) = &mut l.w_gate {
                out.push((p("w_gate"), g, Group::Backbone));
            }
            out.push((p("w_up"), &mut l.w_up, Group::Backbone));
            out.push((p("w_down"), &mut l.w_down, Group::Backbone));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm, Group::Backbone));
        out.push(("head.w".to_string(), &mut self.head_w, Group::Backbone));
        out.push(("head.b".to_string(), &mut self.head_b, Group::Backbone));
        out
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<Params<U>> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerParams {
                    attn_norm: f(&l.attn_norm)?,
                    wq: f(&l.wq)?,
                    wk: f(&l.wk)?,
                    wv: f(&l.wv)?,
                    wo: f(&l.wo)?,
                    temporal: l.temporal.as_ref().map(|tp| tp.try_map(&mut |_, v, _| f(v))).transpose()?,
                    ffn_norm: f(&l.ffn_norm)?,
                    w_gate: l.w_gate.as_ref().map(&mut *f).transpose()?,
                    w_up: f(&l.w_up)?,
                    w_down: f(&l.w_down)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Params {
            input_w: f(&self.input_w)?,
            input_b: f(&self.input_b)?,
            layers,
            final_norm: f(&self.final_norm)?,
            head_w: f(&self.head_w)?,
            head_b: f(&self.head_b)?,
        })
    }
}

/// Trainable parameter counts split by optimizer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub predictor: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.backbone + self.predictor
    }
}

/// Closed-form parameter count.
///
/// Per layer the backbone holds two norm gains (`2d`), four attention
/// projections (`4d²`), the feed-forward weights (`3·d·d_ff` gated,
/// `2·d·d_ff` plain) and, with the temporal bias, `2H` priors. The predictor
/// holds `d_h·64 + 64 + 64·2 + 2` per layer.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let d = config.d_model;
    let out = config.output_width();
    let ffn = match config.ffn {
        FfnKind::Gated => 3,
        FfnKind::Plain => 2,
    } * d
        * config.d_ff;
    let temporal = config.time_mode == TimeMode::Mata;
    let per_layer = 2 * d + 4 * d * d + ffn + if temporal { 2 * config.n_heads } else { 0 };
    let predictor_per_layer =
        if temporal { config.head_dim() * PREDICTOR_HIDDEN + PREDICTOR_HIDDEN + PREDICTOR_HIDDEN * 2 + 2 } else { 0 };
    ParamCount {
        backbone: config.input_dim * d + d + config.n_layers * per_layer + d + d * out + out,
        predictor: config.n_layers * predictor_per_layer,
    }
}

/// Model weights with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MataFormer {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

/// Values recorded during an inspected forward pass.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

impl MataFormer {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let out = config.output_width();
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut w = |r: usize, c: usize| xavier_uniform(r, c, &mut rng);
                let (wq, wk, wv, wo) = (w(d, d), w(d, d), w(d, d), w(d, d));
                let w_gate = (config.ffn == FfnKind::Gated).then(|| w(d, config.d_ff));
                let (w_up, w_down) = (w(d, config.d_ff), w(config.d_ff, d));
                let temporal = if config.time_mode == TimeMode::Mata {
                    Some(init_priors(config.n_heads, config.head_dim(), config.alpha_base, rand::Rng::gen(&mut rng))?)
                } else {
                    None
                };
                Ok(LayerParams {
                    attn_norm: Tensor::full(&[d], 1.0),
                    wq,
                    wk,
                    wv,
                    wo,
                    temporal,
                    ffn_norm: Tensor::full(&[d], 1.0),
                    w_gate,
                    w_up,
                    w_down,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Params {
            input_w: xavier_uniform(config.input_dim, d, &mut rng),
            input_b: Tensor::zeros(&[d]),
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            head_w: xavier_uniform(d, out, &mut rng),
            head_b: Tensor::full(&[out], logit(HEAD_PRIOR_PROB)),
        };
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> ParamCount {
        let mut c = ParamCount { backbone: 0, predictor: 0 };
        for (_, t, g) in self.params.fields() {
            match g {
                Group::Backbone => c.backbone += t.len(),
                Group::Predictor => c.predictor += t.len(),
            }
        }
        c
    }

    /// Registers every weight on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Params<Var> {
        self.params.try_map(&mut |t| Ok(tape.param(t.clone()))).expect("registration cannot fail")
    }

    /// Registers every weight as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.params.try_map(&mut |t| Ok(tape.constant(t.clone()))).expect("registration cannot fail")
    }

    /// Sequence forward on `tape`: embeddings `[S, input_dim]` and times →
    /// probabilities `[S, n_risks * horizons]`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &Params<Var>,
        embeddings: &Tensor,
        times: &[i64],
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = embeddings.rows();
        ensure!(
            embeddings.shape() == [s, cfg.input_dim],
            Shape,
            "embeddings {:?} for input_dim {}",
            embeddings.shape(),
            cfg.input_dim
        );
        ensure!(times.len() == s, Shape, "{} timestamps for {s} events", times.len());
        ensure!(s > 0, Shape, "empty sequence");
        ensure!(times.windows(2).all(|w| w[0] <= w[1]), Data, "timestamps must be nondecreasing");

        let mut z: Vec<f64> = embeddings.data().iter().map(|x| cfg.embed_scale * x).collect();
        if cfg.time_mode == TimeMode::Sinusoidal {
            for (i, &t) in times.iter().enumerate() {
                let phi = sinusoidal_time_encoding(t as f64, cfg.input_dim, SINUSOID_HORIZON)?;
                for (zc, p) in z[i * cfg.input_dim..(i + 1) * cfg.input_dim].iter_mut().zip(phi) {
                    *zc += p;
                }
            }
        }
        let input = Tensor::new(vec![s, cfg.input_dim], z)?;
        let x = tape.constant(input);
        let h = tape.matmul(x, vars.input_w)?;
        let mut h = tape.add_row(h, vars.input_b)?;

        let geometry = SeqGeometry::new(times, cfg.tau)?;
        let mask = tape.constant(geometry.mask.clone());
        let settings = cfg.bias_settings();
        for lv in &vars.layers {
            let a = tape.rmsnorm(h, lv.attn_norm, RMS_EPS)?;
            let avars = AttentionVars { wq: lv.wq, wk: lv.wk, wv: lv.wv, wo: lv.wo, temporal: lv.temporal.clone() };
            let mut layer_trace = trace.as_ref().map(|_| LayerTrace::default());
            let a = attention_forward(tape, a, &geometry, mask, cfg.n_heads, &avars, &settings, layer_trace.as_mut())?;
            if let (Some(tr), Some(lt)) = (trace.as_deref_mut(), layer_trace) {
                tr.layers.push(lt);
            }
            h = tape.add(h, a)?;

            let f = tape.rmsnorm(h, lv.ffn_norm, RMS_EPS)?;
            let up = tape.matmul(f, lv.w_up)?;
            let inner = match lv.w_gate {
                Some(wg) => {
                    let g = tape.matmul(f, wg)?;
                    let g = tape.silu(g);
                    tape.mul(g, up)?
                }
                None => tape.silu(up),
            };
            let f = tape.matmul(inner, lv.w_down)?;
            h = tape.add(h, f)?;
        }
        let h = tape.rmsnorm(h, vars.final_norm, RMS_EPS)?;
        let logits = tape.matmul(h, vars.head_w)?;
        let logits = tape.add_row(logits, vars.head_b)?;
        Ok(tape.sigmoid(logits))
    }

    /// Probabilities `[S, n_risks * horizons]` for one sequence.
    pub fn predict(&self, embeddings: &Tensor, times: &[i64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let out = self.forward_tape(&mut tape, &vars, embeddings, times, None)?;
        Ok(tape.value(out).clone())
    }

    /// Prediction plus per-layer attention traces.
    pub fn inspect(&self, embeddings: &Tensor, times: &[i64]) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let mut trace = ForwardTrace::default();
        let out = self.forward_tape(&mut tape, &vars, embeddings, times, Some(&mut trace))?;
        Ok((tape.value(out).clone(), trace))
    }

    /// Batched prediction; each output has shape `[S_b, n_risks, horizons]`.
    pub fn forward(&self, batch: &[(Tensor, Vec<i64>)]) -> Result<Vec<Tensor>> {
        let (r, k) = (self.config.n_risks, self.config.horizons.len());
        batch.iter().map(|(e, t)| self.predict(e, t)?.reshape(vec![t.len(), r, k])).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> =
            self.params.fields().into_iter().map(|(n, t, _)| (n, t.clone())).collect();
        let ck = Checkpoint { config: self.config.clone(), tensors };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(ck)
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let mut model = Self::init(ck.config.clone(), 0)?;
        for (name, slot, _) in model.params.fields_mut() {
            let t =
                ck.tensors.remove(&name).ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
            ensure!(
                t.shape() == slot.shape(),
                Data,
                "checkpoint tensor {name} has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            );
            *slot = t;
        }
        ensure!(
            ck.tensors.is_empty(),
            Data,
            "checkpoint has tensors the config does not use: {:?}",
            ck.tensors.keys().collect::<Vec<_>>()
        );
        Ok(model)
    }
}

/// On-disk model: configuration plus named tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Stacks unit embeddings `[S][input_dim]` into a tensor.
pub fn embedding_tensor(vectors: &[Vec<f64>]) -> Result<Tensor> {
    ensure!(!vectors.is_empty(), Shape, "no embeddings");
    let d = vectors[0].len();
    ensure!(vectors.iter().all(|v| v.len() == d), Shape, "ragged embeddings");
    Tensor::new(vec![vectors.len(), d], vectors.concat())
}
