//! Attention weights between target and context points: an ARD-RBF or scaled
//! dot-product similarity, normalised by Sparsemax or Softmax.

use mnp_tensor::{CustomOp, Graph, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MnpError, Result};

/// Lower bound enforced on every lengthscale coordinate after an optimiser step.
pub const LENGTHSCALE_FLOOR: f64 = 1e-6;

/// Initial value of every lengthscale coordinate.
pub const LENGTHSCALE_INIT: f64 = 10.0;

/// Per-modality ARD lengthscale, strictly positive, stored as a `1 x d` row.
#[derive(Clone, Debug, PartialEq)]
pub struct Lengthscale(Tensor);

impl Lengthscale {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(MnpError::Contract(format!("lengthscale must be positive and finite: {values:?}")));
        }
        Ok(Self(Tensor::row(values)))
    }

    /// `10 * 1` of the given dimension.
    pub fn initial(dim: usize) -> Self {
        Self(Tensor::full(&[1, dim], LENGTHSCALE_INIT))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        Self::new(t.into_data())
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Clamps every coordinate at [`LENGTHSCALE_FLOOR`].
pub fn clamp_lengthscale(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(LENGTHSCALE_FLOOR));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Rbf,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalisation {
    #[default]
    Sparsemax,
    Softmax,
}

/// How the coordinate difference is scaled inside the RBF exponent.
///
/// `LengthscaleSquared`: `exp(-1/2 * sum_j ((x_j - x'_j) / l_j^2)^2)`.
/// `Lengthscale`: `exp(-1/2 * sum_j (x_j - x'_j)^2 / l_j^2)`, the usual ARD form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceScaling {
    #[default]
    LengthscaleSquared,
    Lengthscale,
}

impl DistanceScaling {
    /// Weight `w(l)` on the squared difference and its derivative `w'(l)`.
    #[inline]
    fn weight(self, l: f64) -> (f64, f64) {
        match self {
            DistanceScaling::LengthscaleSquared => {
                let l2 = l * l;
                (1.0 / (l2 * l2), -4.0 / (l2 * l2 * l))
            }
            DistanceScaling::Lengthscale => (1.0 / (l * l), -2.0 / (l * l * l)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub similarity: Similarity,
    pub normalisation: Normalisation,
    pub scaling: DistanceScaling,
}

impl AttentionConfig {
    /// The four similarity/normalisation pairs.
    pub fn grid() -> [AttentionConfig; 4] {
        let mk = |similarity, normalisation| AttentionConfig {
            similarity,
            normalisation,
            scaling: DistanceScaling::default(),
        };
        [
            mk(Similarity::Rbf, Normalisation::Softmax),
            mk(Similarity::Rbf, Normalisation::Sparsemax),
            mk(Similarity::Dot, Normalisation::Softmax),
            mk(Similarity::Dot, Normalisation::Sparsemax),
        ]
    }
}

fn check_rbf_shapes(q: &Tensor, k: &Tensor, l: &Tensor) -> Result<(), TensorError> {
    if !q.is_matrix() || !k.is_matrix() || q.cols() != k.cols() || l.len() != q.cols() {
        return Err(TensorError::Shape(format!(
            "rbf queries {:?}, keys {:?}, lengthscale {:?}",
            q.shape(),
            k.shape(),
            l.shape()
        )));
    }
    Ok(())
}

fn rbf_forward(q: &Tensor, k: &Tensor, l: &[f64], scaling: DistanceScaling) -> Tensor {
    let w: Vec<f64> = l.iter().map(|&lj| scaling.weight(lj).0).collect();
    let (n, m) = (q.rows(), k.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let qi = q.row_slice(i);
        for c in 0..m {
            let kc = k.row_slice(c);
            let mut dist = 0.0;
            for j in 0..w.len() {
                let d = qi[j] - kc[j];
                dist += w[j] * d * d;
            }
            out.push((-0.5 * dist).exp());
        }
    }
    Tensor::matrix(n, m, out).expect("rbf output shape")
}

/// Kernel matrix `G[i, c] = kappa(queries[i], keys[c])`.
pub fn rbf_matrix(queries: &Tensor, keys: &Tensor, l: &Lengthscale, scaling: DistanceScaling) -> Result<Tensor> {
    check_rbf_shapes(queries, keys, l.as_tensor())?;
    Ok(rbf_forward(queries, keys, l.as_tensor().data(), scaling))
}

struct RbfOp {
    scaling: DistanceScaling,
}

impl CustomOp for RbfOp {
    fn name(&self) -> &'static str {
        "rbf"
    }

    fn backward(&self, inputs: &[&Tensor], kappa: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, l) = (inputs[0], inputs[1], inputs[2]);
        let d = q.cols();
        let (n, m) = (q.rows(), k.rows());
        let (w, dw): (Vec<f64>, Vec<f64>) = l.data().iter().map(|&lj| self.scaling.weight(lj)).unzip();
        let mut gq = Tensor::zeros(q.shape());
        let mut gk = Tensor::zeros(k.shape());
        let mut gl = vec![0.0; d];
        for i in 0..n {
            let qi = q.row_slice(i);
            for c in 0..m {
                let h = grad.get(i, c) * kappa.get(i, c);
                if h == 0.0 {
                    continue;
                }
                let kc = k.row_slice(c);
                for j in 0..d {
                    let diff = qi[j] - kc[j];
                    let t = h * w[j] * diff;
                    gq.data_mut()[i * d + j] -= t;
                    gk.data_mut()[c * d + j] += t;
                    gl[j] -= 0.5 * h * dw[j] * diff * diff;
                }
            }
        }
        vec![Some(gq), Some(gk), Some(Tensor::new(l.shape().to_vec(), gl).expect("lengthscale grad"))]
    }
}

/// Differentiable [`rbf_matrix`]; `l` is a `1 x d` node holding the lengthscale.
pub fn rbf_matrix_var(g: &mut Graph, queries: Var, keys: Var, l: Var, scaling: DistanceScaling) -> Result<Var> {
    let (q, k, lv) = (g.value(queries), g.value(keys), g.value(l));
    check_rbf_shapes(q, k, lv)?;
    if lv.data().iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(MnpError::Contract("non-positive lengthscale".into()));
    }
    let value = rbf_forward(q, k, lv.data(), scaling);
    Ok(g.custom(&[queries, keys, l], value, Box::new(RbfOp { scaling })))
}

/// Euclidean projection of one row onto the probability simplex.
fn sparsemax_row(z: &[f64], out: &mut [f64]) {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (idx, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (idx + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = idx + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - tau).max(0.0);
    }
}

/// Row-wise Sparsemax. Each output row lies on the probability simplex.
pub fn sparsemax_rows(z: &Tensor) -> Result<Tensor> {
    if !z.is_matrix() || z.cols() == 0 {
        return Err(TensorError::Shape(format!("sparsemax of {:?}", z.shape())).into());
    }
    let mut out = Tensor::zeros(z.shape());
    for i in 0..z.rows() {
        sparsemax_row(z.row_slice(i), out.row_slice_mut(i));
    }
    Ok(out)
}

struct SparsemaxOp;

impl CustomOp for SparsemaxOp {
    fn name(&self) -> &'static str {
        "sparsemax"
    }

    // On the support S the Jacobian is I - 1 1^T / |S|; off the support it is zero.
    fn backward(&self, _inputs: &[&Tensor], p: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut gz = Tensor::zeros(p.shape());
        for i in 0..p.rows() {
            let pr = p.row_slice(i);
            let gr = grad.row_slice(i);
            let (sum, count) = pr
                .iter()
                .zip(gr)
                .filter(|(&pv, _)| pv > 0.0)
                .fold((0.0, 0usize), |(s, c), (_, &gv)| (s + gv, c + 1));
            let mean = sum / count.max(1) as f64;
            let out = gz.row_slice_mut(i);
            for j in 0..pr.len() {
                if pr[j] > 0.0 {
                    out[j] = gr[j] - mean;
                }
            }
        }
        vec![Some(gz)]
    }
}

pub fn sparsemax_rows_var(g: &mut Graph, z: Var) -> Result<Var> {
    let value = sparsemax_rows(g.value(z))?;
    Ok(g.custom(&[z], value, Box::new(SparsemaxOp)))
}

/// Scaled dot-product scores `Q K^T / sqrt(d)`.
fn dot_scores(g: &mut Graph, queries: Var, keys: Var) -> Result<Var> {
    let d = g.value(queries).cols();
    let s = g.matmul_nt(queries, keys)?;
    Ok(g.scale(s, 1.0 / (d as f64).sqrt())?)
}

/// `Softmax(Q K^T / sqrt(d)) V`; returns `(weights, output)`.
pub fn dot_attention(g: &mut Graph, queries: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
    let scores = dot_scores(g, queries, keys)?;
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, values)?;
    Ok((weights, out))
}

/// Row-stochastic attention weights `[N_T x N]` under the configured pair.
pub fn attention_weights(
    g: &mut Graph,
    cfg: &AttentionConfig,
    queries: Var,
    keys: Var,
    lengthscale: Option<Var>,
) -> Result<Var> {
    let scores = match cfg.similarity {
        Similarity::Rbf => {
            let l = lengthscale.ok_or_else(|| MnpError::Config("RBF attention requires a lengthscale".into()))?;
            rbf_matrix_var(g, queries, keys, l, cfg.scaling)?
        }
        Similarity::Dot => dot_scores(g, queries, keys)?,
    };
    match cfg.normalisation {
        Normalisation::Sparsemax => sparsemax_rows_var(g, scores),
        Normalisation::Softmax => Ok(g.softmax_rows(scores)?),
    }
}
