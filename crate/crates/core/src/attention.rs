//! Deterministic single-head attention with temporal anchoring.
//!
//! Frame 0's keys and values are cached; every later frame attends with
//! `K_t ← γ K₀ + (1 − γ) K_t` (likewise for V), optionally extended by a
//! reference stream concatenated in front of its own keys and values.

use crate::error::{Error, Result};
use crate::par;

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}×{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Stacks `self` on top of `other`.
    pub fn vconcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!("cannot stack {} and {} channels", self.cols, other.cols)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor2 {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Column block `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Tensor2 {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Tensor2 {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / √C)`, `T × S`.
pub fn attention_weights(q: &Tensor2, k: &Tensor2) -> Result<Tensor2> {
    if q.cols == 0 {
        return Err(Error::Config("attention needs at least one channel".into()));
    }
    if q.cols != k.cols {
        return Err(Error::Shape(format!("query has {} channels, keys have {}", q.cols, k.cols)));
    }
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut w = Tensor2::zeros(q.rows, k.rows);
    for t in 0..q.rows {
        let qr = q.row(t);
        let out = &mut w.data[t * k.rows..(t + 1) * k.rows];
        for (s, o) in out.iter_mut().enumerate() {
            *o = qr.iter().zip(k.row(s)).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
        softmax_in_place(out);
    }
    Ok(w)
}

fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `softmax(Q Kᵀ / √C) V`.
pub fn self_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Result<Tensor2> {
    if k.rows != v.rows || k.cols != v.cols {
        return Err(Error::Shape(format!("keys {}×{} vs values {}×{}", k.rows, k.cols, v.rows, v.cols)));
    }
    let w = attention_weights(q, k)?;
    let mut out = Tensor2::zeros(q.rows, v.cols);
    for t in 0..q.rows {
        let wr = w.row(t);
        let o = &mut out.data[t * v.cols..(t + 1) * v.cols];
        for (s, &ws) in wr.iter().enumerate() {
            for (oc, &vc) in o.iter_mut().zip(v.row(s)) {
                *oc += ws * vc;
            }
        }
    }
    Ok(out)
}

/// Splits channels into `heads` equal blocks, attends per block and
/// concatenates the results.
pub fn multi_head_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, heads: usize) -> Result<Tensor2> {
    if heads == 0 || !q.cols.is_multiple_of(heads) {
        return Err(Error::Config(format!("{} channels do not split into {heads} heads", q.cols)));
    }
    let w = q.cols / heads;
    let parts = (0..heads)
        .map(|h| self_attention(&q.columns(h * w, w), &k.columns(h * w, w), &v.columns(h * w, w)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Tensor2::zeros(q.rows, q.cols);
    for (h, p) in parts.iter().enumerate() {
        for r in 0..q.rows {
            out.data[r * q.cols + h * w..r * q.cols + (h + 1) * w].copy_from_slice(p.row(r));
        }
    }
    Ok(out)
}

/// `(γ K₀ + (1 − γ) K_t, γ V₀ + (1 − γ) V_t)`.
pub fn timemix(k_t: &Tensor2, v_t: &Tensor2, anchor_k: &Tensor2, anchor_v: &Tensor2, gamma: f32) -> Result<(Tensor2, Tensor2)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0, 1], got {gamma}")));
    }
    let same = |a: &Tensor2, b: &Tensor2| a.rows == b.rows && a.cols == b.cols;
    if !same(k_t, anchor_k) || !same(v_t, anchor_v) {
        return Err(Error::Shape(format!(
            "frame K/V {}×{} / {}×{} vs anchor {}×{} / {}×{}",
            k_t.rows, k_t.cols, v_t.rows, v_t.cols, anchor_k.rows, anchor_k.cols, anchor_v.rows, anchor_v.cols
        )));
    }
    let mix = |cur: &Tensor2, anchor: &Tensor2| Tensor2 {
        rows: cur.rows,
        cols: cur.cols,
        data: cur.data.iter().zip(&anchor.data).map(|(&c, &a)| gamma * a + (1.0 - gamma) * c).collect(),
    };
    Ok((mix(k_t, anchor_k), mix(v_t, anchor_v)))
}

/// Attention over the current keys/values extended by a reference stream.
/// An empty reference reduces to [`self_attention`].
pub fn reference_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, ref_k: &Tensor2, ref_v: &Tensor2) -> Result<Tensor2> {
    if ref_k.rows != ref_v.rows {
        return Err(Error::Shape(format!("reference keys {} vs values {}", ref_k.rows, ref_v.rows)));
    }
    if ref_k.rows == 0 {
        return self_attention(q, k, v);
    }
    self_attention(q, &ref_k.vconcat(k)?, &ref_v.vconcat(v)?)
}

#[derive(Clone, Debug)]
pub struct FrameQkv {
    pub q: Tensor2,
    pub k: Tensor2,
    pub v: Tensor2,
}

/// Optional reference keys/values per frame.
#[derive(Clone, Debug)]
pub struct ReferenceKv {
    pub k: Tensor2,
    pub v: Tensor2,
}

/// Cached raw frame-0 keys/values plus the mixing weight.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub anchor_k: Tensor2,
    pub anchor_v: Tensor2,
    pub gamma: f32,
}

impl AttentionState {
    pub fn from_anchor(frame0: &FrameQkv, gamma: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {gamma}")));
        }
        Ok(Self {
            anchor_k: frame0.k.clone(),
            anchor_v: frame0.v.clone(),
            gamma,
        })
    }

    /// Attention for a frame after the anchor.
    pub fn attend(&self, frame: &FrameQkv, reference: Option<&ReferenceKv>) -> Result<Tensor2> {
        let (k, v) = timemix(&frame.k, &frame.v, &self.anchor_k, &self.anchor_v, self.gamma)?;
        attend_with_reference(&frame.q, &k, &v, reference)
    }
}

fn attend_with_reference(q: &Tensor2, k: &Tensor2, v: &Tensor2, reference: Option<&ReferenceKv>) -> Result<Tensor2> {
    match reference {
        Some(r) => reference_attention(q, k, v, &r.k, &r.v),
        None => self_attention(q, k, v),
    }
}

/// Runs frame 0 with its own keys/values, caches them, then processes the
/// remaining frames (in parallel) against the anchored keys/values.
/// `references`, when given, must have one entry per frame.
pub fn anchored_sequence_pass(frames: &[FrameQkv], gamma: f32, references: Option<&[ReferenceKv]>) -> Result<Vec<Tensor2>> {
    let first = frames.first().ok_or_else(|| Error::Config("anchored pass needs at least one frame".into()))?;
    if let Some(r) = references {
        if r.len() != frames.len() {
            return Err(Error::Shape(format!("{} reference streams for {} frames", r.len(), frames.len())));
        }
    }
    let reference = |i: usize| references.map(|r| &r[i]);
    let state = AttentionState::from_anchor(first, gamma)?;
    let out0 = attend_with_reference(&first.q, &first.k, &first.v, reference(0))?;
    let rest = par::map_range(frames.len() - 1, |i| state.attend(&frames[i + 1], reference(i + 1)));
    let mut outs = Vec::with_capacity(frames.len());
    outs.push(out0);
    for r in rest {
        outs.push(r?);
    }
    Ok(outs)
}
