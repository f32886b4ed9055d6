//! Small layers built from tape primitives.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{LayerNormParams, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [rows, in_dim] -> [rows, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_broadcast(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            alpha: store.add(format!("{name}.alpha"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, p.var(self.alpha), p.var(self.beta), self.eps)
    }

    /// Current values as a plain [`LayerNormParams`].
    pub fn params(&self, store: &ParamStore) -> LayerNormParams {
        LayerNormParams {
            alpha: store.get(self.alpha).data().to_vec(),
            beta: store.get(self.beta).data().to_vec(),
            eps: self.eps,
        }
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), in_dim, hidden, true),
            output: Linear::new(store, rng, &format!("{name}.1"), hidden, out_dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, p, h)
    }
}

/// Gated recurrent unit with sigmoid reset/update gates and a tanh candidate:
///
/// ```text
/// r  = sigmoid(x W_xr + b_xr + h W_hr + b_hr)
/// z  = sigmoid(x W_xz + b_xz + h W_hz + b_hz)
/// n  = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub x_reset: Linear,
    pub x_update: Linear,
    pub x_candidate: Linear,
    pub h_reset: Linear,
    pub h_update: Linear,
    pub h_candidate: Linear,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let mut lin =
            |part: &str, i| Linear::new(store, rng, &format!("{name}.{part}"), i, hidden, true);
        Self {
            x_reset: lin("x_reset", input),
            x_update: lin("x_update", input),
            x_candidate: lin("x_candidate", input),
            h_reset: lin("h_reset", hidden),
            h_update: lin("h_update", hidden),
            h_candidate: lin("h_candidate", hidden),
        }
    }

    /// `x: [rows, input]`, `h: [rows, hidden]`; each row is independent.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let xr = self.x_reset.forward(tape, p, x)?;
        let hr = self.h_reset.forward(tape, p, h)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);

        let xz = self.x_update.forward(tape, p, x)?;
        let hz = self.h_update.forward(tape, p, h)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);

        let xn = self.x_candidate.forward(tape, p, x)?;
        let hn = self.h_candidate.forward(tape, p, h)?;
        let rhn = tape.mul(r, hn)?;
        let n = tape.add(xn, rhn)?;
        let n = tape.tanh(n);

        // (1 - z) * n + z * h == n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let gated = tape.mul(z, diff)?;
        tape.add(n, gated)
    }
}
