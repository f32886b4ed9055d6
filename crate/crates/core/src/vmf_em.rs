//! Mixtures of von Mises-Fisher distributions fitted by EM, plus numeric
//! checks of how Slot Attention relates to them.
//!
//! Densities are handled without their normalizer `Z(d, τ)`: the concentration
//! is shared by every component, so `Z` cancels in the responsibilities and
//! only shifts the log-likelihood by a constant.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::slot_attention::{NormalizationMode, SlotAttention};
use crate::tensor::{LayerNormParams, Tape, Tensor};

const UNIT_TOL: f64 = 1e-9;
const SINGULAR_COND: f64 = 1e12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_unit(op: &'static str, x: &[f64]) -> Result<()> {
    if (norm(x) - 1.0).abs() > UNIT_TOL {
        return Err(Error::contract(
            op,
            format!("expected a unit vector, norm is {}", norm(x)),
        ));
    }
    Ok(())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VmfMixture {
    /// Unit mean directions, `[K, d]`.
    pub directions: Tensor,
    /// Shared `τ`; the density is proportional to `exp(θᵀx / τ)`.
    pub concentration: f64,
    pub weights: Vec<f64>,
}

impl VmfMixture {
    pub fn new(directions: Tensor, concentration: f64, weights: Vec<f64>) -> Result<Self> {
        let (k, _) = directions.dims2()?;
        if k == 0 || weights.len() != k {
            return Err(Error::contract(
                "VmfMixture::new",
                format!("{k} directions but {} weights", weights.len()),
            ));
        }
        if !(concentration > 0.0) {
            return Err(Error::contract(
                "VmfMixture::new",
                "concentration must be positive",
            ));
        }
        for r in 0..k {
            if (norm(directions.row(r)) - 1.0).abs() > 1e-12 {
                return Err(Error::contract(
                    "VmfMixture::new",
                    format!("direction {r} is not unit length"),
                ));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::contract(
                "VmfMixture::new",
                "weights must lie on the probability simplex",
            ));
        }
        Ok(Self {
            directions,
            concentration,
            weights,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.directions.shape()[1]
    }
}

/// `θᵀx / τ`.
pub fn vmf_log_density_unnorm(x: &[f64], theta: &[f64], tau: f64) -> Result<f64> {
    check_unit("vmf_log_density_unnorm", x)?;
    check_unit("vmf_log_density_unnorm", theta)?;
    if x.len() != theta.len() {
        return Err(Error::shape(
            "vmf_log_density_unnorm",
            format!("{} vs {}", x.len(), theta.len()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(
            "vmf_log_density_unnorm",
            "tau must be positive",
        ));
    }
    Ok(dot(x, theta) / tau)
}

fn check_points(op: &'static str, x: &Tensor, dim: usize) -> Result<usize> {
    let (n, d) = x.dims2()?;
    if d != dim {
        return Err(Error::shape(
            op,
            format!("points have dimension {d}, mixture {dim}"),
        ));
    }
    for r in 0..n {
        check_unit(op, x.row(r))?;
    }
    Ok(n)
}

/// Per-point joint log terms `log π_k + θ_kᵀx / τ`, row-major `[N, K]`.
fn joint_logs(x: &Tensor, mix: &VmfMixture) -> Vec<f64> {
    let (n, k) = (x.shape()[0], mix.components());
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        for c in 0..k {
            out.push(
                mix.weights[c].ln() + dot(x.row(r), mix.directions.row(c)) / mix.concentration,
            );
        }
    }
    out
}

/// Responsibilities `γ_{n,k} ∝ π_k exp(x_nᵀθ_k / τ)`.
pub fn e_step(x: &Tensor, mix: &VmfMixture) -> Result<Tensor> {
    let n = check_points("e_step", x, mix.dim())?;
    let k = mix.components();
    let mut logs = joint_logs(x, mix);
    for row in logs.chunks_mut(k) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    Tensor::new(&[n, k], logs)
}

/// `θ_k = Σ_n γ_{n,k} x_n / ‖·‖`, `π_k = Σ_n γ_{n,k} / N`.
pub fn m_step(x: &Tensor, gamma: &Tensor, concentration: f64) -> Result<VmfMixture> {
    let (n, d) = x.dims2()?;
    let (gn, k) = gamma.dims2()?;
    if gn != n || n == 0 {
        return Err(Error::shape(
            "m_step",
            format!("{n} points but {gn} responsibility rows"),
        ));
    }
    let mut directions = vec![0.0; k * d];
    let mut mass = vec![0.0; k];
    for r in 0..n {
        let xr = x.row(r);
        for c in 0..k {
            let g = gamma.at2(r, c);
            mass[c] += g;
            for (acc, xi) in directions[c * d..(c + 1) * d].iter_mut().zip(xr) {
                *acc += g * xi;
            }
        }
    }
    for c in 0..k {
        let dir = &mut directions[c * d..(c + 1) * d];
        let len = norm(dir);
        if !(len > 1e-12 * mass[c]) {
            return Err(Error::DegenerateComponent { component: c });
        }
        dir.iter_mut().for_each(|v| *v /= len);
    }
    let weights = mass.iter().map(|m| m / n as f64).collect();
    VmfMixture::new(Tensor::new(&[k, d], directions)?, concentration, weights)
}

/// `Σ_n log Σ_k π_k exp(x_nᵀθ_k / τ)`, i.e. the log-likelihood up to the
/// constant `−N log Z(d, τ)`.
pub fn log_likelihood(x: &Tensor, mix: &VmfMixture) -> Result<f64> {
    check_points("log_likelihood", x, mix.dim())?;
    let logs = joint_logs(x, mix);
    Ok(logs.chunks(mix.components()).map(log_sum_exp).sum())
}

/// Unit vector drawn uniformly from the sphere in `R^dim`.
pub fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let len = norm(&v);
        if len > 1e-8 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// EM with directions initialized uniformly on the sphere and uniform
/// weights. Returns the fitted mixture and the log-likelihood before the
/// first iteration followed by its value after every iteration.
pub fn em_fit(
    x: &Tensor,
    k: usize,
    iters: usize,
    concentration: f64,
    seed: u64,
) -> Result<(VmfMixture, Vec<f64>)> {
    use rand::SeedableRng;
    let (n, d) = x.dims2()?;
    if k == 0 || n < k {
        return Err(Error::contract(
            "em_fit",
            format!("need N >= K >= 1, got N={n}, K={k}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f64> = (0..k).flat_map(|_| random_direction(&mut rng, d)).collect();
    let mut mix = VmfMixture::new(
        Tensor::new(&[k, d], init)?,
        concentration,
        vec![1.0 / k as f64; k],
    )?;
    let mut trace = vec![log_likelihood(x, &mix)?];
    for _ in 0..iters {
        let gamma = e_step(x, &mix)?;
        mix = m_step(x, &gamma, concentration)?;
        trace.push(log_likelihood(x, &mix)?);
    }
    Ok((mix, trace))
}

/// Draws from a vMF distribution with mean `mu` and concentration
/// `kappa = 1 / τ` (Wood's rejection sampler).
pub fn sample_vmf(rng: &mut ChaCha8Rng, mu: &[f64], kappa: f64) -> Result<Vec<f64>> {
    check_unit("sample_vmf", mu)?;
    let d = mu.len();
    if d < 2 || !(kappa > 0.0) {
        return Err(Error::contract(
            "sample_vmf",
            "need dimension >= 2 and kappa > 0",
        ));
    }
    let dm1 = (d - 1) as f64;
    let b = (-2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt()) / dm1;
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("positive shape parameters");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    // Uniform direction in the tangent space at mu.
    let tangent = loop {
        let g = random_direction(rng, d);
        let along = dot(&g, mu);
        let t: Vec<f64> = g.iter().zip(mu).map(|(gi, mi)| gi - along * mi).collect();
        let len = norm(&t);
        if len > 1e-8 {
            break t.into_iter().map(|v| v / len).collect::<Vec<_>>();
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let out: Vec<f64> = mu
        .iter()
        .zip(&tangent)
        .map(|(m, t)| w * m + s * t)
        .collect();
    let len = norm(&out);
    Ok(out.into_iter().map(|v| v / len).collect())
}

/// Angle in degrees between two unit vectors.
pub fn angle_degrees(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Exhaustive matching of estimated to true directions (K ≤ 4) minimizing
/// the largest angle. Returns `perm` with `estimated[perm[i]] ↔ truth[i]` and
/// that largest angle in degrees.
pub fn match_directions(estimated: &Tensor, truth: &Tensor) -> Result<(Vec<usize>, f64)> {
    let (k, d) = truth.dims2()?;
    let (ke, de) = estimated.dims2()?;
    if k != ke || d != de {
        return Err(Error::shape(
            "match_directions",
            format!("[{ke}, {de}] vs [{k}, {d}]"),
        ));
    }
    if k > 4 {
        return Err(Error::contract(
            "match_directions",
            "exhaustive matching supports K <= 4",
        ));
    }
    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..k {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    let mut best = (Vec::new(), f64::INFINITY);
    for perm in permutations(k) {
        let worst = (0..k)
            .map(|i| angle_degrees(estimated.row(perm[i]), truth.row(i)))
            .fold(0.0, f64::max);
        if worst < best.1 {
            best = (perm, worst);
        }
    }
    Ok(best)
}

/// The affine hull `a + V` of the image `{B · layer_norm(x)}` of a square
/// linear map composed with a layer normalization, with `a ⊥ V`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineDecomposition {
    pub a: Vec<f64>,
    /// Orthonormal basis of `V`, one vector per entry.
    pub v_basis: Vec<Vec<f64>>,
    /// Unit normal of `V` with `a = offset · normal`.
    pub normal: Vec<f64>,
    pub offset: f64,
    /// Condition number of `B`.
    pub condition: f64,
    shift_norm: f64,
}

impl AffineDecomposition {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Orthogonal projection onto `V`.
    pub fn project_v(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for v in &self.v_basis {
            let c = dot(v, x);
            out.iter_mut().zip(v).for_each(|(o, vi)| *o += c * vi);
        }
        out
    }

    /// Orthogonal projection onto `span(a)` (zero when `a = 0`).
    pub fn project_a(&self, x: &[f64]) -> Vec<f64> {
        let aa = dot(&self.a, &self.a);
        if aa == 0.0 {
            return vec![0.0; x.len()];
        }
        let c = dot(&self.a, x) / aa;
        self.a.iter().map(|ai| c * ai).collect()
    }
}

/// Decomposes `B (diag(α) 𝟙^⊥ + β)` for a square `B` acting on column
/// vectors. A row-vector map `x ↦ x W` has `B = Wᵀ`.
pub fn affine_decompose(b: &Tensor, ln: &LayerNormParams) -> Result<AffineDecomposition> {
    let (rows, cols) = b.dims2()?;
    if rows != cols {
        return Err(Error::shape(
            "affine_decompose",
            format!("B must be square, got [{rows}, {cols}]"),
        ));
    }
    if ln.dim() != cols {
        return Err(Error::shape(
            "affine_decompose",
            format!("layer norm over {} features, B has {cols}", ln.dim()),
        ));
    }
    let d = cols;
    if d < 2 {
        return Err(Error::contract(
            "affine_decompose",
            "dimension must be at least 2",
        ));
    }
    let bm = DMatrix::from_row_slice(d, d, b.data());
    let sv = bm.clone().svd(false, false).singular_values;
    let condition = if sv[d - 1] > 0.0 {
        sv[0] / sv[d - 1]
    } else {
        f64::INFINITY
    };
    if condition > SINGULAR_COND {
        warn!("affine_decompose: B is numerically singular (condition {condition:e}); using its computed column space");
    }

    // Basis of 𝟙^⊥ (not orthonormal; only its span matters).
    let mut e = DMatrix::zeros(d, d - 1);
    for i in 0..d - 1 {
        e[(i, i)] = 1.0;
        e[(d - 1, i)] = -1.0;
    }
    let alpha = DMatrix::from_diagonal(&DVector::from_column_slice(&ln.alpha));
    // Padding with a zero column makes U square, so the left singular
    // vectors of vanishing singular values span the complement of V.
    let span = (&bm * alpha * e).insert_column(d - 1, 0.0);
    let svd = span.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let (kept, dropped): (Vec<_>, Vec<_>) =
        (0..d).partition(|&i| top > 0.0 && svd.singular_values[i] > top * 1e-12);
    let column = |i: usize| u.column(i).iter().copied().collect::<Vec<f64>>();
    let v_basis: Vec<Vec<f64>> = kept.into_iter().map(column).collect();
    if condition <= SINGULAR_COND && ln.alpha.iter().all(|&a| a != 0.0) && v_basis.len() != d - 1 {
        return Err(Error::contract(
            "affine_decompose",
            format!(
                "direction space has dimension {}, expected {}",
                v_basis.len(),
                d - 1
            ),
        ));
    }

    let shift = &bm * DVector::from_column_slice(&ln.beta);
    let shift: Vec<f64> = shift.iter().copied().collect();
    let mut dec = AffineDecomposition {
        a: Vec::new(),
        v_basis,
        normal: Vec::new(),
        offset: 0.0,
        condition,
        shift_norm: 0.0,
    };
    if dropped.len() == 1 {
        // Taking the normal straight from the decomposition keeps it accurate
        // even when a is tiny.
        let n = column(dropped[0]);
        let offset = dot(&n, &shift);
        dec.a = n.iter().map(|v| offset * v).collect();
        dec.normal = n;
        dec.offset = offset;
    } else {
        let pv = dec.project_v(&shift);
        dec.a = shift.iter().zip(&pv).map(|(s, p)| s - p).collect();
        let len = norm(&dec.a);
        dec.normal = if len > 0.0 {
            dec.a.iter().map(|v| v / len).collect()
        } else {
            vec![0.0; d]
        };
        dec.offset = len;
    }
    dec.shift_norm = norm(&shift);
    Ok(dec)
}

/// `f(u) = C aᵀu / (N ‖a‖²)`: maps a weighted-sum update code back to the
/// fraction of input mass its slot received. Evaluated as
/// `C nᵀu / (N nᵀa)` with the unit normal `n`, which is better conditioned
/// when `a` is short.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryFunction {
    pub normal: Vec<f64>,
    pub offset: f64,
    pub scale: f64,
    pub tokens: usize,
}

impl RecoveryFunction {
    pub fn eval(&self, u: &[f64]) -> f64 {
        self.scale * dot(&self.normal, u) / (self.tokens as f64 * self.offset)
    }
}

pub fn recovery_function(
    dec: &AffineDecomposition,
    scale: f64,
    tokens: usize,
) -> Result<RecoveryFunction> {
    if tokens == 0 || !(scale > 0.0) {
        return Err(Error::contract(
            "recovery_function",
            "need N >= 1 and C > 0",
        ));
    }
    if !(dec.offset.abs() > 1e-12 * dec.shift_norm.max(1.0)) {
        return Err(Error::NotRecoverable);
    }
    Ok(RecoveryFunction {
        normal: dec.normal.clone(),
        offset: dec.offset,
        scale,
        tokens,
    })
}

/// `exp(aᵀ p_a(q))`, the input-independent factor that a query contributes to
/// every attention logit once keys are split into `a + p_V(k)`. Pass `q / τ`
/// to account for a softmax temperature.
pub fn slot_prior_weight(q: &[f64], dec: &AffineDecomposition) -> f64 {
    dot(&dec.a, &dec.project_a(q)).exp()
}

/// Outcome of running one slot versus two identical slots on the same inputs.
#[derive(Clone, Debug)]
pub struct DuplicateSlotReport {
    /// Update code of the single slot, length `D`.
    pub single_code: Vec<f64>,
    /// Update codes of the two identical slots, `[2, D]`.
    pub double_codes: Tensor,
    /// `Σ_n γ_{n,k} / N` for the single slot (1) and the two slots (1/2 each).
    pub single_fraction: f64,
    pub double_fractions: [f64; 2],
    /// `max_{k,d} |u^(1)_d − u^(2)_{k,d}|`.
    pub max_code_gap: f64,
}

impl DuplicateSlotReport {
    /// Equal codes with different column sums: no function of the update code
    /// can recover the column sum.
    pub fn is_witness(&self, tol: f64) -> bool {
        self.max_code_gap < tol && (self.single_fraction - self.double_fractions[0]).abs() > 0.25
    }
}

/// Aggregates the same inputs with one zero slot and with two zero slots.
pub fn duplicate_slot_report(
    sa: &SlotAttention,
    store: &ParamStore,
    inputs: &Tensor,
) -> Result<DuplicateSlotReport> {
    if matches!(sa.mode(), NormalizationMode::BatchScaled { .. }) {
        return Err(Error::contract(
            "duplicate_slot_report",
            "batch-scaled codes depend on batch statistics, not on a single scene",
        ));
    }
    let (n, _) = inputs.dims2()?;
    let ds = sa.config.slot_dim;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(inputs.clone());
    let mut codes = Vec::new();
    let mut fractions = Vec::new();
    for k in [1, 2] {
        let slots = tape.constant(Tensor::zeros(&[k, ds]));
        let att = sa.compute_attention(&mut tape, &p, x, slots)?;
        let u = sa.aggregate(&mut tape, &p, att.gamma, att.values, None)?;
        let sums = tape.column_sums(att.gamma)?;
        fractions.push(
            tape.value(sums)
                .data()
                .iter()
                .map(|s| s / n as f64)
                .collect::<Vec<_>>(),
        );
        codes.push(tape.value(u).clone());
    }
    let single_code = codes[0].row(0).to_vec();
    let double_codes = codes[1].clone();
    let max_code_gap = (0..2)
        .flat_map(|k| {
            double_codes
                .row(k)
                .iter()
                .zip(&single_code)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    Ok(DuplicateSlotReport {
        single_code,
        double_codes,
        single_fraction: fractions[0][0],
        double_fractions: [fractions[1][0], fractions[1][1]],
        max_code_gap,
    })
}
