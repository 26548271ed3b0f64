//! Adapters mapping a frozen image embedding `I ∈ R^M` to an adapted feature `A ∈ R^M`.
//!
//! | kind | matrices | forward |
//! |------|----------|---------|
//! | identity | none | `A = I` |
//! | linear | `W` | `A = W I` |
//! | self_attention | `W_q, W_k, W_v` | see [`AttentionMode`] |
//! | mlp | `W1, W2` | `A = W2 relu(W1 I)` |
//!
//! All matrices are `M × M` and carry no bias. The flat parameter order is the
//! matrices above concatenated, each row-major.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::Cursor;
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Identity,
    Linear,
    SelfAttention,
    Mlp,
}

impl AdapterKind {
    pub fn num_matrices(self) -> usize {
        match self {
            AdapterKind::Identity => 0,
            AdapterKind::Linear => 1,
            AdapterKind::SelfAttention => 3,
            AdapterKind::Mlp => 2,
        }
    }

    pub fn param_count(self, dim: usize) -> usize {
        self.num_matrices() * dim * dim
    }
}

/// How the self-attention adapter treats a single embedding.
///
/// `Scalar` reads `Q`, `K`, `V` as one token each: the score `Q·K/√M` is a
/// single number, its softmax is exactly 1 and `A = V`, so `W_q` and `W_k`
/// receive zero gradient. `Outer` treats the `M` coordinates as tokens:
/// `α = rowsoftmax(Q Kᵀ / √M)` is `M × M` and `A = α V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Scalar,
    #[default]
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitScheme {
    /// `I + ε·N(0,1)` entrywise.
    IdentityPerturbed { epsilon: f64 },
    /// `N(0, 1/M)` entrywise.
    Gaussian,
}

pub const DEFAULT_INIT_EPSILON: f64 = 0.01;

impl InitScheme {
    /// Identity-perturbed for linear and mlp, gaussian for attention.
    pub fn default_for(kind: AdapterKind) -> Self {
        match kind {
            AdapterKind::SelfAttention => InitScheme::Gaussian,
            _ => InitScheme::IdentityPerturbed {
                epsilon: DEFAULT_INIT_EPSILON,
            },
        }
    }
}

/// Flat parameter vector in canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatParamView(pub Vec<f64>);

impl FlatParamView {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    kind: AdapterKind,
    attention_mode: AttentionMode,
    dim: usize,
    matrices: Vec<DenseMatrix>,
}

impl AdapterParams {
    pub fn new(
        kind: AdapterKind,
        attention_mode: AttentionMode,
        dim: usize,
        matrices: Vec<DenseMatrix>,
    ) -> Result<Self> {
        if matrices.len() != kind.num_matrices() {
            return Err(Error::contract(format!(
                "{kind:?} adapter takes {} matrices, got {}",
                kind.num_matrices(),
                matrices.len()
            )));
        }
        for (i, m) in matrices.iter().enumerate() {
            if m.rows() != dim || m.cols() != dim {
                return Err(Error::contract(format!(
                    "matrix {i} is {}x{}, expected {dim}x{dim}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self {
            kind,
            attention_mode,
            dim,
            matrices,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            kind: AdapterKind::Identity,
            attention_mode: AttentionMode::default(),
            dim,
            matrices: Vec::new(),
        }
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn attention_mode(&self) -> AttentionMode {
        self.attention_mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrices(&self) -> &[DenseMatrix] {
        &self.matrices
    }

    pub fn param_count(&self) -> usize {
        self.kind.param_count(self.dim)
    }

    pub fn flatten(&self) -> FlatParamView {
        let mut v = Vec::with_capacity(self.param_count());
        for m in &self.matrices {
            v.extend_from_slice(m.as_slice());
        }
        FlatParamView(v)
    }

    /// Rebuilds parameters of the same kind, mode and dim from a flat view.
    pub fn with_flat(&self, view: &FlatParamView) -> Result<Self> {
        unflatten(view, self.kind, self.attention_mode, self.dim)
    }

    /// Overwrites the parameters from a flat view of matching length.
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::contract(format!(
                "flat view has {} values, {:?} adapter at dim {} needs {}",
                values.len(),
                self.kind,
                self.dim,
                self.param_count()
            )));
        }
        let block = self.dim * self.dim;
        for (m, chunk) in self.matrices.iter_mut().zip(values.chunks_exact(block.max(1))) {
            m.as_mut_slice().copy_from_slice(chunk);
        }
        Ok(())
    }

    /// Flat index ranges of each matrix, in canonical order.
    pub fn matrix_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let block = self.dim * self.dim;
        (0..self.matrices.len())
            .map(|i| i * block..(i + 1) * block)
            .collect()
    }
}

pub fn unflatten(
    view: &FlatParamView,
    kind: AdapterKind,
    attention_mode: AttentionMode,
    dim: usize,
) -> Result<AdapterParams> {
    let need = kind.param_count(dim);
    if view.len() != need {
        return Err(Error::contract(format!(
            "flat view has {} values, {kind:?} adapter at dim {dim} needs {need}",
            view.len()
        )));
    }
    let block = dim * dim;
    let matrices = (0..kind.num_matrices())
        .map(|i| DenseMatrix::from_vec(dim, dim, view.0[i * block..(i + 1) * block].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    AdapterParams::new(kind, attention_mode, dim, matrices)
}

/// Deterministic initialization under `seed`.
pub fn init(
    kind: AdapterKind,
    attention_mode: AttentionMode,
    dim: usize,
    seed: u64,
    scheme: InitScheme,
) -> Result<AdapterParams> {
    if dim == 0 {
        return Err(Error::contract("adapter dim must be at least 1"));
    }
    let mut rng = rng::stream(seed, "adapter_init");
    let matrices = (0..kind.num_matrices())
        .map(|_| {
            let data: Vec<f64> = match scheme {
                InitScheme::IdentityPerturbed { epsilon } => (0..dim * dim)
                    .map(|idx| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let diag = if idx / dim == idx % dim { 1.0 } else { 0.0 };
                        diag + epsilon * z
                    })
                    .collect(),
                InitScheme::Gaussian => {
                    let sd = (1.0 / dim as f64).sqrt();
                    (0..dim * dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            sd * z
                        })
                        .collect()
                }
            };
            DenseMatrix::from_vec(dim, dim, data)
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterParams::new(kind, attention_mode, dim, matrices)
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Trace {
    Identity,
    Linear {
        input: DenseVector,
    },
    AttentionScalar {
        input: DenseVector,
        q: DenseVector,
        k: DenseVector,
        v: DenseVector,
        alpha: f64,
    },
    AttentionOuter {
        input: DenseVector,
        q: DenseVector,
        k: DenseVector,
        v: DenseVector,
        alpha: DenseMatrix,
        out: DenseVector,
    },
    Mlp {
        input: DenseVector,
        pre: DenseVector,
        hidden: DenseVector,
    },
}

pub fn forward(params: &AdapterParams, input: &DenseVector) -> Result<DenseVector> {
    forward_traced(params, input).map(|(a, _)| a)
}

pub(crate) fn forward_traced(
    params: &AdapterParams,
    input: &DenseVector,
) -> Result<(DenseVector, Trace)> {
    if input.dim() != params.dim {
        return Err(Error::contract(format!(
            "adapter expects dim {}, input has dim {}",
            params.dim,
            input.dim()
        )));
    }
    let m = &params.matrices;
    match params.kind {
        AdapterKind::Identity => Ok((input.clone(), Trace::Identity)),
        AdapterKind::Linear => Ok((
            linalg::matvec(&m[0], input)?,
            Trace::Linear {
                input: input.clone(),
            },
        )),
        AdapterKind::Mlp => {
            let pre = linalg::matvec(&m[0], input)?;
            let hidden = DenseVector::new(pre.as_slice().iter().map(|&x| x.max(0.0)).collect());
            let out = linalg::matvec(&m[1], &hidden)?;
            Ok((
                out,
                Trace::Mlp {
                    input: input.clone(),
                    pre,
                    hidden,
                },
            ))
        }
        AdapterKind::SelfAttention => {
            let q = linalg::matvec(&m[0], input)?;
            let k = linalg::matvec(&m[1], input)?;
            let v = linalg::matvec(&m[2], input)?;
            let scale = (params.dim as f64).sqrt();
            match params.attention_mode {
                AttentionMode::Scalar => {
                    let score = linalg::dot(q.as_slice(), k.as_slice()) / scale;
                    let alpha = linalg::softmax_slice(&[score])?[0];
                    let out = v.scaled(alpha);
                    Ok((
                        out,
                        Trace::AttentionScalar {
                            input: input.clone(),
                            q,
                            k,
                            v,
                            alpha,
                        },
                    ))
                }
                AttentionMode::Outer => {
                    let dim = params.dim;
                    let mut alpha = Vec::with_capacity(dim * dim);
                    let mut out = Vec::with_capacity(dim);
                    let mut scores = vec![0.0; dim];
                    for &qi in q.as_slice() {
                        for (s, &kj) in scores.iter_mut().zip(k.as_slice()) {
                            *s = qi * kj / scale;
                        }
                        let row = linalg::softmax_slice(&scores)?;
                        out.push(linalg::dot(&row, v.as_slice()));
                        alpha.extend(row);
                    }
                    let out = DenseVector::new(out);
                    Ok((
                        out.clone(),
                        Trace::AttentionOuter {
                            input: input.clone(),
                            q,
                            k,
                            v,
                            alpha: DenseMatrix::from_vec(dim, dim, alpha)?,
                            out,
                        },
                    ))
                }
            }
        }
    }
}

/// Accumulates `∂L/∂θ` into `grads` (canonical flat order) given `∂L/∂A`.
pub(crate) fn backward(
    params: &AdapterParams,
    trace: &Trace,
    grad_out: &[f64],
    grads: &mut [f64],
) -> Result<()> {
    if grads.len() != params.param_count() || grad_out.len() != params.dim {
        return Err(Error::contract("backward: buffer sizes do not match adapter"));
    }
    let dim = params.dim;
    let block = dim * dim;
    let mut acc = |slot: usize, scale: f64, u: &[f64], v: &[f64]| {
        let g = &mut grads[slot * block..(slot + 1) * block];
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            for (gij, &vj) in g[i * dim..(i + 1) * dim].iter_mut().zip(v) {
                *gij += s * vj;
            }
        }
    };
    match trace {
        Trace::Identity => {}
        Trace::Linear { input } => acc(0, 1.0, grad_out, input.as_slice()),
        Trace::Mlp { input, pre, hidden } => {
            acc(1, 1.0, grad_out, hidden.as_slice());
            let g_hidden =
                linalg::matvec_transposed(&params.matrices[1], &DenseVector::new(grad_out.to_vec()))?;
            let g_pre: Vec<f64> = g_hidden
                .as_slice()
                .iter()
                .zip(pre.as_slice())
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
            acc(0, 1.0, &g_pre, input.as_slice());
        }
        Trace::AttentionScalar {
            input,
            q,
            k,
            v,
            alpha,
        } => {
            let scale = (dim as f64).sqrt();
            // A = α V; dα = gA·V, d(score) = α dα − α² dα (softmax Jacobian over one entry)
            let d_alpha = linalg::dot(grad_out, v.as_slice());
            let d_score = alpha * d_alpha - alpha * alpha * d_alpha;
            acc(0, d_score / scale, k.as_slice(), input.as_slice());
            acc(1, d_score / scale, q.as_slice(), input.as_slice());
            acc(2, *alpha, grad_out, input.as_slice());
        }
        Trace::AttentionOuter {
            input,
            q,
            k,
            v,
            alpha,
            out,
        } => {
            let scale = (dim as f64).sqrt();
            let (q, k, v, out) = (q.as_slice(), k.as_slice(), v.as_slice(), out.as_slice());
            let mut dq = vec![0.0; dim];
            let mut dk = vec![0.0; dim];
            let mut dv = vec![0.0; dim];
            for i in 0..dim {
                let row = alpha.row(i);
                let gi = grad_out[i];
                for j in 0..dim {
                    dv[j] += row[j] * gi;
                    // dS_ij = α_ij · g_i · (V_j − A_i)
                    let ds = row[j] * gi * (v[j] - out[i]) / scale;
                    dq[i] += ds * k[j];
                    dk[j] += ds * q[i];
                }
            }
            let x = input.as_slice();
            acc(0, 1.0, &dq, x);
            acc(1, 1.0, &dk, x);
            acc(2, 1.0, &dv, x);
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CADP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn kind_tag(p: &AdapterParams) -> u8 {
    match (p.kind, p.attention_mode) {
        (AdapterKind::Identity, _) => 0,
        (AdapterKind::Linear, _) => 1,
        (AdapterKind::SelfAttention, AttentionMode::Outer) => 2,
        (AdapterKind::Mlp, _) => 3,
        (AdapterKind::SelfAttention, AttentionMode::Scalar) => 4,
    }
}

fn from_tag(tag: u8) -> Option<(AdapterKind, AttentionMode)> {
    Some(match tag {
        0 => (AdapterKind::Identity, AttentionMode::Outer),
        1 => (AdapterKind::Linear, AttentionMode::Outer),
        2 => (AdapterKind::SelfAttention, AttentionMode::Outer),
        3 => (AdapterKind::Mlp, AttentionMode::Outer),
        4 => (AdapterKind::SelfAttention, AttentionMode::Scalar),
        _ => return None,
    })
}

/// `CADP` checkpoint: magic, u32 version, u8 kind tag, u32 `M`, then every
/// matrix as little-endian f32 in canonical order.
///
/// Kind tags: 0 identity, 1 linear, 2 self-attention (outer), 3 mlp,
/// 4 self-attention (scalar).
pub fn checkpoint_bytes(params: &AdapterParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + 4 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(kind_tag(params));
    let dim = u32::try_from(params.dim).map_err(|_| Error::contract("dim does not fit in u32"))?;
    out.extend_from_slice(&dim.to_le_bytes());
    for &x in params.flatten().as_slice() {
        let f = x as f32;
        if !f.is_finite() {
            return Err(Error::contract(format!("non-finite adapter parameter {x}")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<AdapterParams> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"CADP\""));
    }
    let version = cur.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let tag = cur.u8("header")?;
    let (kind, mode) =
        from_tag(tag).ok_or_else(|| Error::format(8, format!("unknown adapter kind tag {tag}")))?;
    let dim = cur.u32("header")? as usize;
    let need = kind.param_count(dim);
    if cur.remaining() != 4 * need {
        return Err(Error::format(
            cur.pos,
            format!(
                "parameter section holds {} bytes, {kind:?} at dim {dim} needs {}",
                cur.remaining(),
                4 * need
            ),
        ));
    }
    let mut values = Vec::with_capacity(need);
    for _ in 0..need {
        let at = cur.pos;
        let x = f32::from_le_bytes(cur.array("parameters")?);
        if !x.is_finite() {
            return Err(Error::format(at, "non-finite parameter"));
        }
        values.push(f64::from(x));
    }
    unflatten(&FlatParamView(values), kind, mode, dim)
}

pub fn save_checkpoint(params: &AdapterParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AdapterParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
