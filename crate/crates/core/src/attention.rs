//! Softmax and linear attention, band-masked cross attention, and the
//! self-and-cross blocks built from them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SemError};
use crate::features::FeatureMap;
use crate::geometry::EpipolarBand;
use crate::matching::Support;
use crate::params::{Mlp, ParamStore};

/// `N_q x N_k` boolean mask; `true` = attend.
pub type AttentionMask = Support;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Vanilla,
    Linear,
}

/// Projections and output MLP of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub head_count: usize,
    pub mlp: Mlp,
}

impl AttentionParams {
    pub fn load(store: &ParamStore, prefix: &str, channels: usize, hidden: usize, head_count: usize) -> Result<Self> {
        if head_count == 0 || !channels.is_multiple_of(head_count) {
            return Err(SemError::InvalidConfig(format!(
                "{channels} channels cannot be split into {head_count} heads"
            )));
        }
        let proj = |p: &str| store.matrix(&format!("{prefix}.{p}"), channels, channels);
        Ok(Self {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            head_count,
            mlp: Mlp::load(store, prefix, channels, hidden, channels)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.nrows()
    }
}

fn check_inner(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<()> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(SemError::ShapeMismatch(format!(
            "Q {}x{}, K {}x{}, V {}x{}",
            q.nrows(),
            q.ncols(),
            k.nrows(),
            k.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}

/// Row-stochastic weights `softmax(Q K^T / sqrt(d))` over unmasked entries.
pub fn attention_weights(q: &DMatrix<f64>, k: &DMatrix<f64>, mask: Option<&AttentionMask>) -> Result<DMatrix<f64>> {
    if q.ncols() != k.ncols() {
        return Err(SemError::ShapeMismatch(format!(
            "Q has {} columns, K has {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let (nq, nk) = (q.nrows(), k.nrows());
    if let Some(m) = mask {
        if (m.rows, m.cols) != (nq, nk) {
            return Err(SemError::ShapeMismatch(format!(
                "mask is {}x{}, scores are {nq}x{nk}",
                m.rows, m.cols
            )));
        }
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    // Column i of the transposed scores holds query row i contiguously.
    let scores_t = k * q.transpose() * scale;
    let mut weights_t = DMatrix::zeros(nk, nq);
    for i in 0..nq {
        let open = |j: usize| mask.is_none_or(|m| m.data[i * nk + j]);
        let col = scores_t.column(i);
        let col = col.as_slice();
        let max = (0..nk)
            .filter(|&j| open(j))
            .map(|j| col[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(SemError::EmptyRow(i));
        }
        let mut out = weights_t.column_mut(i);
        let out = out.as_mut_slice();
        let mut total = 0.0;
        for j in (0..nk).filter(|&j| open(j)) {
            let e = (col[j] - max).exp();
            out[j] = e;
            total += e;
        }
        out.iter_mut().for_each(|w| *w /= total);
    }
    let weights = weights_t.transpose();
    Ok(weights)
}

/// Scaled dot-product softmax attention with an optional mask.
pub fn vanilla_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mask: Option<&AttentionMask>,
) -> Result<DMatrix<f64>> {
    check_inner(q, k, v)?;
    Ok(attention_weights(q, k, mask)? * v)
}

/// `elu(u) + 1`.
pub fn elu_feature(u: f64) -> f64 {
    if u > 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

/// Kernelized attention `phi(Q) (phi(K)^T V)`, normalized per row by
/// `phi(Q) (phi(K)^T 1)`.
pub fn linear_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_inner(q, k, v)?;
    let fq = q.map(elu_feature);
    let fk = k.map(elu_feature);
    let kv = fk.transpose() * v;
    let ksum: DVector<f64> = fk.row_sum().transpose();
    let numer = &fq * kv;
    let denom = &fq * ksum;
    let mut out = numer;
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row /= denom[i];
    }
    Ok(out)
}

fn heads_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    heads: usize,
    kind: AttentionKind,
    mask: Option<&AttentionMask>,
) -> Result<DMatrix<f64>> {
    if heads == 1 {
        return match kind {
            AttentionKind::Vanilla => vanilla_attention(q, k, v, mask),
            AttentionKind::Linear => linear_attention(q, k, v),
        };
    }
    let d = q.ncols() / heads;
    let mut out = DMatrix::zeros(q.nrows(), v.ncols());
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let qh = q.columns(cols.start, d).into_owned();
        let kh = k.columns(cols.start, d).into_owned();
        let vh = v.columns(cols.start, d).into_owned();
        let oh = match kind {
            AttentionKind::Vanilla => vanilla_attention(&qh, &kh, &vh, mask)?,
            AttentionKind::Linear => linear_attention(&qh, &kh, &vh)?,
        };
        out.columns_mut(cols.start, d).copy_from(&oh);
    }
    Ok(out)
}

/// One attention layer: queries from `x`, keys and values from `source`,
/// followed by the output projection, MLP and residual.
pub fn attention_layer(
    x: &DMatrix<f64>,
    source: &DMatrix<f64>,
    params: &AttentionParams,
    kind: AttentionKind,
    mask: Option<&AttentionMask>,
) -> Result<DMatrix<f64>> {
    let c = params.channels();
    if x.ncols() != c || source.ncols() != c {
        return Err(SemError::ShapeMismatch(format!(
            "layer expects {c} channels, got {} and {}",
            x.ncols(),
            source.ncols()
        )));
    }
    let q = x * params.wq.transpose();
    let k = source * params.wk.transpose();
    let v = source * params.wv.transpose();
    let message = heads_attention(&q, &k, &v, params.head_count, kind, mask)? * params.wo.transpose();
    Ok(x + params.mlp.forward_rows(&message))
}

/// Parameters of a self-attention layer followed by a cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
}

impl BlockParams {
    pub fn load(store: &ParamStore, prefix: &str, channels: usize, hidden: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::load(store, &format!("{prefix}.self"), channels, hidden, heads)?,
            cross_attn: AttentionParams::load(store, &format!("{prefix}.cross"), channels, hidden, heads)?,
        })
    }
}

/// Self attention within each map, then cross attention between them.
///
/// Both cross updates read the post-self-attention maps. `masks`, when given,
/// restricts the `a -> b` and `b -> a` cross attention respectively.
pub fn self_cross_block(
    f_a: &FeatureMap,
    f_b: &FeatureMap,
    params: &BlockParams,
    kind: AttentionKind,
    masks: Option<(&AttentionMask, &AttentionMask)>,
) -> Result<(FeatureMap, FeatureMap)> {
    let a = f_a.to_matrix();
    let b = f_b.to_matrix();
    let a1 = attention_layer(&a, &a, &params.self_attn, kind, None)?;
    let b1 = attention_layer(&b, &b, &params.self_attn, kind, None)?;
    let a2 = attention_layer(&a1, &b1, &params.cross_attn, kind, masks.map(|m| m.0))?;
    let b2 = attention_layer(&b1, &a1, &params.cross_attn, kind, masks.map(|m| m.1))?;
    Ok((
        FeatureMap::from_matrix(&a2, f_a.height, f_a.width, f_a.scale),
        FeatureMap::from_matrix(&b2, f_b.height, f_b.width, f_b.scale),
    ))
}

/// Cross attention from every query cell to the key cells inside its band.
///
/// Invalid bands (and bands that miss every cell center) attend globally.
pub fn epipolar_cross_attention(
    f_q: &FeatureMap,
    f_kv: &FeatureMap,
    bands: &[EpipolarBand],
    params: &AttentionParams,
) -> Result<FeatureMap> {
    if bands.len() != f_q.cells() {
        return Err(SemError::ShapeMismatch(format!(
            "{} bands for {} query cells",
            bands.len(),
            f_q.cells()
        )));
    }
    let mask = AttentionMask::from_bands(bands, f_kv.width, f_kv.height);
    let mask = (!mask.is_full()).then_some(mask);
    let out = attention_layer(
        &f_q.to_matrix(),
        &f_kv.to_matrix(),
        params,
        AttentionKind::Vanilla,
        mask.as_ref(),
    )?;
    Ok(FeatureMap::from_matrix(&out, f_q.height, f_q.width, f_q.scale))
}
