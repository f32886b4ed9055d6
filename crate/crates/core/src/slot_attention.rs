//! Iterative Slot Attention with four ways of normalizing the per-slot update
//! codes.
//!
//! One iteration computes `Γ = softmax_rows(k(x) q(θ)ᵀ / √D)`, accumulates
//! `ũ_k = Σ_n γ_{n,k} v(x_n)`, normalizes `ũ_k` according to
//! [`NormalizationMode`] and feeds the result through a shared GRU followed by
//! a residual MLP. Inputs and slots are layer-normalized (separate parameters)
//! before the key/query/value maps, which carry no bias.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GruCell, LayerNorm, Linear, Mlp};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Divisor of the weighted-sum normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SumScale {
    Constant(f64),
    /// Resolved at call time to the number of input tokens `N`.
    TokenCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NormalizationMode {
    /// `u_k = ũ_k / Σ_n γ_{n,k}`
    WeightedMean,
    /// `u_k = LayerNorm(ũ_k)`, one layer norm shared across slots.
    LayerNormed,
    /// `u_k = ũ_k / C`
    WeightedSum { scale: SumScale },
    /// `u_k = α (ũ_k − m) / √(v + ε) + β` with scalar batch statistics `m`,
    /// `v` taken from the first iteration. `alpha` and `beta` are the initial
    /// values of the learned scalars.
    BatchScaled {
        alpha: f64,
        beta: f64,
        eps: f64,
        momentum: f64,
    },
}

impl NormalizationMode {
    pub fn batch_scaled() -> Self {
        NormalizationMode::BatchScaled {
            alpha: 1.0,
            beta: 0.0,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NormalizationMode::WeightedSum {
                scale: SumScale::Constant(c),
            } if !(c > 0.0) => Err(Error::contract(
                "NormalizationMode",
                "weighted-sum constant must be positive",
            )),
            NormalizationMode::BatchScaled { eps, momentum, .. } => {
                if !(eps > 0.0) {
                    Err(Error::contract(
                        "NormalizationMode",
                        "batch-scale eps must be positive",
                    ))
                } else if !(momentum > 0.0 && momentum < 1.0) {
                    Err(Error::contract(
                        "NormalizationMode",
                        "momentum must lie in (0, 1)",
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAttentionConfig {
    pub input_dim: usize,
    pub slot_dim: usize,
    /// Common key/query/value dimension `D`.
    pub dim: usize,
    pub mlp_hidden: usize,
    pub eps: f64,
    pub mode: NormalizationMode,
}

impl SlotAttentionConfig {
    pub fn new(dim: usize, slot_dim: usize, mlp_hidden: usize, mode: NormalizationMode) -> Self {
        Self {
            input_dim: dim,
            slot_dim,
            dim,
            mlp_hidden,
            eps: DEFAULT_EPS,
            mode,
        }
    }
}

/// Scalar statistics used by the batch-scaled normalization.
#[derive(Clone, Copy, Debug)]
pub struct ScaleStats {
    pub mean: Var,
    pub var: Var,
}

/// Running batch statistics of the batch-scaled normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Statistics of the most recent training batch.
    pub m: f64,
    pub v: f64,
    pub ema_m: Option<f64>,
    pub ema_v: Option<f64>,
    pub momentum: f64,
    pub training: bool,
}

impl BatchStats {
    pub fn new(momentum: f64) -> Self {
        Self {
            m: 0.0,
            v: 0.0,
            ema_m: None,
            ema_v: None,
            momentum,
            training: true,
        }
    }

    /// Frozen copy for inference.
    pub fn inference(&self) -> Self {
        Self {
            training: false,
            ..self.clone()
        }
    }

    /// `ema <- momentum * ema + (1 - momentum) * batch`; the first call
    /// initializes the averages to the batch values.
    pub fn ema_update(&self, m_batch: f64, v_batch: f64) -> Result<Self> {
        if !self.training {
            return Err(Error::contract("ema_update", "called in inference mode"));
        }
        if !(v_batch >= 0.0) || !m_batch.is_finite() || !v_batch.is_finite() {
            return Err(Error::contract(
                "ema_update",
                "batch statistics must be finite with v >= 0",
            ));
        }
        let blend = |ema: Option<f64>, x: f64| match ema {
            None => x,
            Some(e) => self.momentum * e + (1.0 - self.momentum) * x,
        };
        Ok(Self {
            m: m_batch,
            v: v_batch,
            ema_m: Some(blend(self.ema_m, m_batch)),
            ema_v: Some(blend(self.ema_v, v_batch)),
            ..self.clone()
        })
    }
}

/// Keys and values of one set of input tokens.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub keys: Var,
    pub values: Var,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub gamma: Var,
    pub keys: Var,
    pub values: Var,
}

pub struct RunOutput {
    /// Final slots per sample, `[K, D_slot]`.
    pub slots: Vec<Var>,
    /// Attention matrix of the last iteration per sample, `[N, K]`.
    pub gammas: Vec<Var>,
    /// Batch statistics `(m, v)` computed in this pass (batch-scaled training).
    pub moments: Option<(f64, f64)>,
}

/// Parameters and wiring of the module.
#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub config: SlotAttentionConfig,
    pub input_norm: LayerNorm,
    pub slot_norm: LayerNorm,
    pub key: Linear,
    pub query: Linear,
    pub value: Linear,
    pub update_norm: Option<LayerNorm>,
    pub gru: GruCell,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
    pub batch_alpha: Option<ParamId>,
    pub batch_beta: Option<ParamId>,
    pub slot_mu: ParamId,
    pub slot_log_sigma: ParamId,
}

impl SlotAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: SlotAttentionConfig,
    ) -> Result<Self> {
        config.mode.validate()?;
        let SlotAttentionConfig {
            input_dim,
            slot_dim,
            dim,
            mlp_hidden,
            eps,
            mode,
        } = config.clone();
        if input_dim != dim {
            return Err(Error::contract(
                "SlotAttention::new",
                format!("input dimension {input_dim} must equal attention dimension {dim}"),
            ));
        }
        if dim == 0 || slot_dim == 0 || !(eps > 0.0) {
            return Err(Error::contract(
                "SlotAttention::new",
                "dimensions and eps must be positive",
            ));
        }
        let n = |s: &str| format!("{name}.{s}");
        let input_norm = LayerNorm::new(store, &n("input_norm"), input_dim, eps);
        let slot_norm = LayerNorm::new(store, &n("slot_norm"), slot_dim, eps);
        let key = Linear::new(store, rng, &n("key"), input_dim, dim, false);
        let query = Linear::new(store, rng, &n("query"), slot_dim, dim, false);
        let value = Linear::new(store, rng, &n("value"), input_dim, dim, false);
        let update_norm = matches!(mode, NormalizationMode::LayerNormed)
            .then(|| LayerNorm::new(store, &n("update_norm"), dim, eps));
        let gru = GruCell::new(store, rng, &n("gru"), dim, slot_dim);
        let mlp_norm = LayerNorm::new(store, &n("mlp_norm"), slot_dim, eps);
        let mlp = Mlp::new(store, rng, &n("mlp"), slot_dim, mlp_hidden, slot_dim);
        let (batch_alpha, batch_beta) = match mode {
            NormalizationMode::BatchScaled { alpha, beta, .. } => (
                Some(store.add(n("batch_alpha"), Tensor::scalar(alpha))),
                Some(store.add(n("batch_beta"), Tensor::scalar(beta))),
            ),
            _ => (None, None),
        };
        let slot_mu = store.add(n("slot_mu"), xavier_uniform(rng, &[slot_dim], 1, slot_dim));
        let slot_log_sigma = store.add(
            n("slot_log_sigma"),
            xavier_uniform(rng, &[slot_dim], 1, slot_dim),
        );
        Ok(Self {
            config,
            input_norm,
            slot_norm,
            key,
            query,
            value,
            update_norm,
            gru,
            mlp_norm,
            mlp,
            batch_alpha,
            batch_beta,
            slot_mu,
            slot_log_sigma,
        })
    }

    pub fn mode(&self) -> &NormalizationMode {
        &self.config.mode
    }

    /// Softmax temperature `√D`.
    pub fn temperature(&self) -> f64 {
        (self.config.dim as f64).sqrt()
    }

    /// Draws `k` slots from the learned diagonal Gaussian `μ + σ ⊙ ε`.
    pub fn sample_slots(
        &self,
        tape: &mut Tape,
        p: &Bound,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let d = self.config.slot_dim;
        let noise: Vec<f64> = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
        let noise = tape.constant(Tensor::new(&[k, d], noise)?);
        let sigma = tape.exp(p.var(self.slot_log_sigma));
        let sigma = tape.reshape(sigma, &[1, d])?;
        let sigma = tape.broadcast_rows(sigma, k)?;
        let sigma = tape.reshape(sigma, &[k, d])?;
        let scaled = tape.mul(sigma, noise)?;
        tape.add_broadcast(scaled, p.var(self.slot_mu))
    }

    /// Layer-normalizes `inputs: [N, D_input]` and extracts keys and values.
    pub fn embed_inputs(&self, tape: &mut Tape, p: &Bound, inputs: Var) -> Result<Tokens> {
        let (n, d) = tape.value(inputs).dims2()?;
        if n == 0 {
            return Err(Error::contract("compute_attention", "empty input set"));
        }
        if d != self.config.input_dim {
            return Err(Error::shape(
                "compute_attention",
                format!("inputs have width {d}, expected {}", self.config.input_dim),
            ));
        }
        let x = self.input_norm.forward(tape, p, inputs)?;
        let keys = self.key.forward(tape, p, x)?;
        let values = self.value.forward(tape, p, x)?;
        Ok(Tokens {
            keys,
            values,
            count: n,
        })
    }

    /// Queries of layer-normalized `slots: [K, D_slot]`.
    pub fn queries(&self, tape: &mut Tape, p: &Bound, slots: Var) -> Result<Var> {
        let (k, d) = tape.value(slots).dims2()?;
        if k == 0 {
            return Err(Error::contract("compute_attention", "empty slot set"));
        }
        if d != self.config.slot_dim {
            return Err(Error::shape(
                "compute_attention",
                format!("slots have width {d}, expected {}", self.config.slot_dim),
            ));
        }
        let theta = self.slot_norm.forward(tape, p, slots)?;
        self.query.forward(tape, p, theta)
    }

    /// `Γ = softmax_rows(keys · queriesᵀ, τ = √D)`, shape `[N, K]`.
    pub fn attention_from(&self, tape: &mut Tape, keys: Var, queries: Var) -> Result<Var> {
        let qt = tape.transpose(queries)?;
        let logits = tape.matmul(keys, qt)?;
        tape.softmax_rows(logits, self.temperature())
    }

    pub fn compute_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: Var,
        slots: Var,
    ) -> Result<Attention> {
        let tokens = self.embed_inputs(tape, p, inputs)?;
        let queries = self.queries(tape, p, slots)?;
        let gamma = self.attention_from(tape, tokens.keys, queries)?;
        Ok(Attention {
            gamma,
            keys: tokens.keys,
            values: tokens.values,
        })
    }

    /// Unnormalized update codes `ũ = Γᵀ V`, shape `[K, D]`.
    pub fn accumulate(&self, tape: &mut Tape, gamma: Var, values: Var) -> Result<Var> {
        let gt = tape.transpose(gamma)?;
        tape.matmul(gt, values)
    }

    /// Applies the configured normalization to unnormalized codes `ũ`.
    pub fn normalize(
        &self,
        tape: &mut Tape,
        p: &Bound,
        gamma: Var,
        raw: Var,
        stats: Option<ScaleStats>,
    ) -> Result<Var> {
        match self.config.mode {
            NormalizationMode::WeightedMean => {
                let mass = tape.column_sums(gamma)?;
                if tape.value(mass).data().iter().any(|&m| m == 0.0) {
                    return Err(Error::DivisionByZero("aggregate (weighted mean)"));
                }
                tape.div_rows(raw, mass)
            }
            NormalizationMode::WeightedSum { scale } => {
                let c = match scale {
                    SumScale::Constant(c) => c,
                    SumScale::TokenCount => tape.value(gamma).dims2()?.0 as f64,
                };
                Ok(tape.scale(raw, 1.0 / c))
            }
            NormalizationMode::LayerNormed => {
                let ln = self
                    .update_norm
                    .as_ref()
                    .expect("layer-normed mode owns an update norm");
                ln.forward(tape, p, raw)
            }
            NormalizationMode::BatchScaled { eps, .. } => {
                let stats = stats.ok_or_else(|| {
                    Error::contract("aggregate", "batch-scaled mode requires batch statistics")
                })?;
                let alpha = p.var(self.batch_alpha.expect("batch-scaled mode owns alpha"));
                let beta = p.var(self.batch_beta.expect("batch-scaled mode owns beta"));
                let denom = tape.add_const(stats.var, eps);
                let denom = tape.sqrt(denom);
                let inv = tape.recip(denom);
                let gain = tape.mul(inv, alpha)?;
                let centered = tape.sub_scalar(raw, stats.mean)?;
                let scaled = tape.mul_scalar(centered, gain)?;
                tape.add_scalar(scaled, beta)
            }
        }
    }

    /// `ũ = Γᵀ V` followed by the mode's normalization.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        gamma: Var,
        values: Var,
        stats: Option<ScaleStats>,
    ) -> Result<Var> {
        let raw = self.accumulate(tape, gamma, values)?;
        self.normalize(tape, p, gamma, raw, stats)
    }

    /// GRU step followed by the residual MLP, applied to every slot row
    /// independently with shared weights.
    pub fn update_slots(&self, tape: &mut Tape, p: &Bound, slots: Var, codes: Var) -> Result<Var> {
        let (k, _) = tape.value(slots).dims2()?;
        let (k2, _) = tape.value(codes).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "update_slots",
                format!("{k} slots but {k2} update codes"),
            ));
        }
        let h = self.gru.forward(tape, p, codes, slots)?;
        let normed = self.mlp_norm.forward(tape, p, h)?;
        let delta = self.mlp.forward(tape, p, normed)?;
        tape.add(h, delta)
    }

    /// Single-sample [`run_batch`](Self::run_batch).
    pub fn run(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: Var,
        init_slots: Var,
        iters: usize,
        stats: Option<&BatchStats>,
    ) -> Result<(Var, Var, Option<(f64, f64)>)> {
        let out = self.run_batch(tape, p, &[inputs], &[init_slots], iters, stats)?;
        Ok((out.slots[0], out.gammas[0], out.moments))
    }

    /// Runs `iters` refinement steps on a mini-batch. In batch-scaled mode the
    /// statistics are measured once on the first iteration's unnormalized codes
    /// of the whole batch (training) or taken from the cached averages
    /// (inference), and reused by every later iteration.
    pub fn run_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[Var],
        init_slots: &[Var],
        iters: usize,
        stats: Option<&BatchStats>,
    ) -> Result<RunOutput> {
        if iters == 0 {
            return Err(Error::contract("run", "at least one iteration is required"));
        }
        if inputs.is_empty() || inputs.len() != init_slots.len() {
            return Err(Error::contract(
                "run",
                format!("{} inputs and {} slot sets", inputs.len(), init_slots.len()),
            ));
        }
        let batch_scaled = matches!(self.config.mode, NormalizationMode::BatchScaled { .. });
        if batch_scaled && stats.is_none() {
            return Err(Error::contract(
                "run",
                "batch-scaled mode requires batch statistics",
            ));
        }
        let tokens = inputs
            .iter()
            .map(|&x| self.embed_inputs(tape, p, x))
            .collect::<Result<Vec<_>>>()?;
        let counts = init_slots
            .iter()
            .map(|&s| Ok(tape.value(s).dims2()?.0))
            .collect::<Result<Vec<_>>>()?;
        let mut slots = init_slots.to_vec();
        let mut gammas = Vec::new();
        let mut scale: Option<ScaleStats> = None;
        let mut moments = None;

        if let (true, Some(st)) = (batch_scaled, stats) {
            if !st.training {
                let (m, v) = st.ema_m.zip(st.ema_v).ok_or_else(|| {
                    Error::contract("run", "inference requires initialized moving averages")
                })?;
                scale = Some(ScaleStats {
                    mean: tape.constant(Tensor::scalar(m)),
                    var: tape.constant(Tensor::scalar(v)),
                });
            }
        }

        for iter in 0..iters {
            gammas.clear();
            let mut raws = Vec::with_capacity(inputs.len());
            for (tok, &s) in tokens.iter().zip(&slots) {
                let q = self.queries(tape, p, s)?;
                let gamma = self.attention_from(tape, tok.keys, q)?;
                raws.push(self.accumulate(tape, gamma, tok.values)?);
                gammas.push(gamma);
            }
            if batch_scaled && iter == 0 && scale.is_none() {
                let st = batch_statistics(tape, &raws)?;
                moments = Some((tape.value(st.mean).item()?, tape.value(st.var).item()?));
                scale = Some(st);
            }
            let codes = gammas
                .iter()
                .zip(&raws)
                .map(|(&g, &r)| self.normalize(tape, p, g, r, scale))
                .collect::<Result<Vec<_>>>()?;
            let all_slots = tape.concat_rows(&slots)?;
            let all_codes = tape.concat_rows(&codes)?;
            let updated = self.update_slots(tape, p, all_slots, all_codes)?;
            let mut start = 0;
            for (s, &k) in slots.iter_mut().zip(&counts) {
                *s = tape.slice_rows(updated, start, k)?;
                start += k;
            }
        }
        Ok(RunOutput {
            slots,
            gammas,
            moments,
        })
    }
}

/// Scalar mean and sample variance (divisor `L·K·D − 1`) over every entry of
/// the first-iteration codes of a mini-batch; differentiable.
pub fn batch_statistics(tape: &mut Tape, codes: &[Var]) -> Result<ScaleStats> {
    if codes.is_empty() {
        return Err(Error::contract("batch_statistics", "no update codes"));
    }
    let all = tape.concat_rows(codes)?;
    let n = tape.value(all).numel();
    if n < 2 {
        return Err(Error::contract(
            "batch_statistics",
            "at least two entries are required",
        ));
    }
    let mean = tape.mean(all);
    let centered = tape.sub_scalar(all, mean)?;
    let sq = tape.square(centered);
    let total = tape.sum(sq);
    let var = tape.scale(total, 1.0 / (n - 1) as f64);
    Ok(ScaleStats { mean, var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ema_first_call_initializes() {
        let s = BatchStats::new(0.9).ema_update(2.0, 3.0).unwrap();
        assert_eq!((s.ema_m, s.ema_v), (Some(2.0), Some(3.0)));
    }

    #[test]
    fn ema_blends_with_momentum() {
        let mut s = BatchStats::new(0.9);
        s.ema_m = Some(0.0);
        s.ema_v = Some(0.0);
        let s = s.ema_update(1.0, 1.0).unwrap();
        assert!((s.ema_m.unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ema_converges_geometrically_on_a_constant_stream() {
        // Starting from ema = 0 (one seeding step at 0), the gap to the
        // constant c after t further steps is c * momentum^t.
        let momentum = 0.8;
        let c = 5.0;
        let mut s = BatchStats::new(momentum).ema_update(0.0, 0.0).unwrap();
        for t in 1..=40 {
            s = s.ema_update(c, c).unwrap();
            let expected_gap = c * momentum.powi(t);
            assert!((c - s.ema_m.unwrap() - expected_gap).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_update_rejected_at_inference() {
        let s = BatchStats::new(0.9)
            .ema_update(1.0, 1.0)
            .unwrap()
            .inference();
        assert!(matches!(
            s.ema_update(1.0, 1.0),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn invalid_modes_are_rejected() {
        let bad = NormalizationMode::WeightedSum {
            scale: SumScale::Constant(0.0),
        };
        assert!(bad.validate().is_err());
        let bad = NormalizationMode::BatchScaled {
            alpha: 1.0,
            beta: 0.0,
            eps: 0.0,
            momentum: 0.9,
        };
        assert!(bad.validate().is_err());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = SlotAttentionConfig::new(4, 4, 8, NormalizationMode::WeightedMean);
        cfg.input_dim = 5;
        assert!(SlotAttention::new(&mut store, &mut rng, "sa", cfg).is_err());
    }

    #[test]
    fn mode_serializes_with_a_kind_tag() {
        let m = NormalizationMode::WeightedSum {
            scale: SumScale::TokenCount,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"kind":"weighted_sum","scale":"token_count"}"#);
        assert_eq!(serde_json::from_str::<NormalizationMode>(&s).unwrap(), m);
    }
}
