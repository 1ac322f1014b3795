//! Per-modality encoders, target-specific representations, and aggregation of
//! modalities into one latent Gaussian per target.

use mnp_tensor::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MnpError, Result};
use crate::params::{Bound, Linear, ParamId, ParamSet};

/// Floor of the positivity transform `h -> 0.01 + 0.99 * softplus(h)`.
pub const VARIANCE_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mba,
    Mean,
    Concat,
}

/// `FC -> LeakyReLU -> FC -> LayerNorm(affine)`, optionally followed by the
/// positivity transform.
#[derive(Clone, Debug)]
pub struct Encoder {
    fc1: Linear,
    fc2: Linear,
    ln_gain: ParamId,
    ln_bias: ParamId,
    positive: bool,
    slope: f64,
}

impl Encoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_e: usize,
        positive: bool,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), d_in, d_e, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), d_e, d_e, rng),
            ln_gain: params.add(format!("{name}.ln.gain"), Tensor::ones(&[1, d_e])),
            ln_bias: params.add(format!("{name}.ln.bias"), Tensor::zeros(&[1, d_e])),
            positive,
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.leaky_relu(h, self.slope)?;
        let h = self.fc2.forward(g, p, h)?;
        let h = g.layer_norm_rows(h)?;
        let h = g.mul(h, p.var(self.ln_gain))?;
        let h = g.add(h, p.var(self.ln_bias))?;
        if self.positive {
            positive(g, h)
        } else {
            Ok(h)
        }
    }
}

/// `0.01 + 0.99 * softplus(h)`.
pub fn positive(g: &mut Graph, h: Var) -> Result<Var> {
    let s = g.softplus(h)?;
    let s = g.scale(s, 1.0 - VARIANCE_FLOOR)?;
    Ok(g.add_scalar(s, VARIANCE_FLOOR)?)
}

/// The four encoders of one modality. `phi`/`psi` give the attended
/// representations `(r, s)`, `theta`/`omega` the mean representations `(u, q)`.
#[derive(Clone, Debug)]
pub struct EncoderSet {
    pub phi: Encoder,
    pub psi: Encoder,
    pub theta: Encoder,
    pub omega: Encoder,
}

impl EncoderSet {
    pub fn new(params: &mut ParamSet, prefix: &str, d_in: usize, d_e: usize, slope: f64, rng: &mut impl Rng) -> Self {
        Self {
            phi: Encoder::new(params, &format!("{prefix}.enc_phi"), d_in, d_e, false, slope, rng),
            psi: Encoder::new(params, &format!("{prefix}.enc_psi"), d_in, d_e, true, slope, rng),
            theta: Encoder::new(params, &format!("{prefix}.enc_theta"), d_in, d_e, false, slope, rng),
            omega: Encoder::new(params, &format!("{prefix}.enc_omega"), d_in, d_e, true, slope, rng),
        }
    }
}

/// `(r^m, s^m)` for every memory row. `context` is `cat[C_X; C_Y]`.
pub fn encode_context(g: &mut Graph, p: &Bound, enc: &EncoderSet, context: Var) -> Result<(Var, Var)> {
    let r = enc.phi.forward(g, p, context)?;
    let s = enc.psi.forward(g, p, context)?;
    Ok((r, s))
}

/// Uniformly weighted `(u^m, q^m)`, each `1 x d_e`.
pub fn mean_context(g: &mut Graph, p: &Bound, enc: &EncoderSet, context: Var) -> Result<(Var, Var)> {
    let u = enc.theta.forward(g, p, context)?;
    let q = enc.omega.forward(g, p, context)?;
    Ok((g.mean_rows(u)?, g.mean_rows(q)?))
}

/// `(A r, A s)`.
pub fn target_specific(g: &mut Graph, attention: Var, r: Var, s: Var) -> Result<(Var, Var)> {
    Ok((g.matmul(attention, r)?, g.matmul(attention, s)?))
}

/// Diagonal Gaussian per target.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mean: Tensor,
    pub variance: Tensor,
}

/// One modality's inputs to the fusion: likelihood mean/variance (`r*`, `s*`,
/// `N_T x d_e`) and prior mean/variance (`u`, `q`, `1 x d_e` or `N_T x d_e`).
#[derive(Clone, Copy, Debug)]
pub struct ModalityEvidence {
    pub r: Var,
    pub s: Var,
    pub u: Var,
    pub q: Var,
}

/// Closed-form posterior of `z` under `r*^m ~ N(z, s*^m)` with the factorised
/// prior `prod_m N(u^m, q^m)`:
///
/// `var = [sum_m (1/s*^m + 1/q^m)]^-1`, `mean = var * sum_m (r*^m / s*^m + u^m / q^m)`.
///
/// Returns `(mean, variance)` nodes.
pub fn mba_fuse(g: &mut Graph, parts: &[ModalityEvidence]) -> Result<(Var, Var)> {
    if parts.is_empty() {
        return Err(MnpError::Contract("fusion needs at least one modality".into()));
    }
    let mut precision: Option<Var> = None;
    let mut weighted: Option<Var> = None;
    for (m, e) in parts.iter().enumerate() {
        for (name, v) in [("s*", e.s), ("q", e.q)] {
            if g.value(v).data().iter().any(|&x| x.is_nan() || x <= 0.0) {
                return Err(MnpError::Contract(format!("modality {m}: non-positive variance in {name}")));
            }
        }
        let inv_s = g.recip(e.s)?;
        let inv_q = g.recip(e.q)?;
        let p = g.add(inv_s, inv_q)?;
        let rs = g.mul(e.r, inv_s)?;
        let uq = g.mul(e.u, inv_q)?;
        let w = g.add(rs, uq)?;
        precision = Some(match precision {
            Some(acc) => g.add(acc, p)?,
            None => p,
        });
        weighted = Some(match weighted {
            Some(acc) => g.add(acc, w)?,
            None => w,
        });
    }
    let variance = g.recip(precision.expect("nonempty"))?;
    let mean = g.mul(variance, weighted.expect("nonempty"))?;
    Ok((mean, variance))
}

/// [`mba_fuse`] on plain tensors: `(r*, s*, u, q)` per modality.
pub fn mba_fuse_values(parts: &[(Tensor, Tensor, Tensor, Tensor)]) -> Result<LatentGaussian> {
    let mut g = Graph::new();
    let ev: Vec<ModalityEvidence> = parts
        .iter()
        .map(|(r, s, u, q)| ModalityEvidence {
            r: g.constant(r.clone()),
            s: g.constant(s.clone()),
            u: g.constant(u.clone()),
            q: g.constant(q.clone()),
        })
        .collect();
    let (mean, variance) = mba_fuse(&mut g, &ev)?;
    Ok(LatentGaussian {
        mean: g.value(mean).clone(),
        variance: g.value(variance).clone(),
    })
}

/// MLP over concatenated per-modality representations, `M * d_e -> d_e -> d_e`.
#[derive(Clone, Debug)]
pub struct ConcatHead {
    fc1: Linear,
    fc2: Linear,
    slope: f64,
}

impl ConcatHead {
    pub fn new(params: &mut ParamSet, modalities: usize, d_e: usize, slope: f64, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(params, "concat.fc1", modalities * d_e, d_e, rng),
            fc2: Linear::new(params, "concat.fc2", d_e, d_e, rng),
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, parts: &[Var]) -> Result<Var> {
        let x = g.concat_cols(parts)?;
        let h = self.fc1.forward(g, p, x)?;
        let h = g.leaky_relu(h, self.slope)?;
        self.fc2.forward(g, p, h)
    }
}

/// Deterministic aggregation of `r*^m`: the average for `Mean`, the concat
/// MLP for `Concat`.
pub fn aggregate_baseline(
    g: &mut Graph,
    p: &Bound,
    kind: Aggregation,
    r_star: &[Var],
    head: Option<&ConcatHead>,
) -> Result<Var> {
    if r_star.is_empty() {
        return Err(MnpError::Contract("aggregation needs at least one modality".into()));
    }
    match kind {
        Aggregation::Mean => {
            let mut acc = r_star[0];
            for &r in &r_star[1..] {
                acc = g.add(acc, r)?;
            }
            Ok(g.scale(acc, 1.0 / r_star.len() as f64)?)
        }
        Aggregation::Concat => {
            let head = head.ok_or_else(|| MnpError::Config("concat aggregation needs its MLP head".into()))?;
            head.forward(g, p, r_star)
        }
        Aggregation::Mba => Err(MnpError::Config("MBA is not a baseline aggregation".into())),
    }
}
