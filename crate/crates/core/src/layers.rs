//! Layer kinds, activations, and the forward/backward kernels they share.
//!
//! All layer options at a slot preserve the representation width, so any
//! option can be substituted for any other at the same position. Inputs are
//! batched matrices `[batch, width]`; weights are `[out, in]` row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width-preserving layer options for a slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Identity,
    Linear,
    /// `y = x + multiplier * (W x + b)`.
    Residual { multiplier: f64 },
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        !matches!(self, LayerKind::Identity)
    }

    pub fn label(&self) -> String {
        match self {
            LayerKind::Identity => "identity".into(),
            LayerKind::Linear => "linear".into(),
            LayerKind::Residual { multiplier } => format!("residual:{multiplier}"),
        }
    }
}

/// Elementwise activation options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Swish,
}

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Swish => z * sigmoid(z),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn grad(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Swish => "swish",
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Row-norm scale used by the per-network normalization toggle: weights are
/// divided by `max(1, largest row L2 norm)` at forward time, capping the
/// layer's gain without ever amplifying small weights.
pub fn row_norm_scale(w: &Tensor) -> (f64, usize) {
    let (rows, cols) = (w.rows(), w.cols());
    let mut best = 0.0f64;
    let mut best_row = 0;
    for r in 0..rows {
        let mut sq = 0.0;
        for c in 0..cols {
            let v = w.at2(r, c);
            sq += v * v;
        }
        if sq > best {
            best = sq;
            best_row = r;
        }
    }
    let norm = best.sqrt();
    if norm > 1.0 {
        (norm, best_row)
    } else {
        (1.0, best_row)
    }
}

/// Cache of one affine application, enough to run its backward pass.
#[derive(Debug, Clone)]
pub struct AffineCache {
    /// Input batch `[batch, in]`.
    pub x: Tensor,
    /// Normalization scale (1.0 when the toggle is off or the norm is small).
    pub scale: f64,
    /// Row attaining the largest norm (meaningful only when `scale > 1`).
    pub scale_row: usize,
}

/// `z = (W / scale) x + b` over a batch. `normalize` enables the row-norm cap.
pub fn affine_forward(w: &Tensor, b: &Tensor, normalize: bool, x: &Tensor) -> Result<(Tensor, AffineCache)> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    if x.cols() != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "affine expects input width {in_dim}, got {}",
            x.cols()
        )));
    }
    if b.shape() != [out_dim] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match out dim {out_dim}",
            b.shape()
        )));
    }
    let (scale, scale_row) = if normalize { row_norm_scale(w) } else { (1.0, 0) };
    let batch = x.rows();
    let mut z = Tensor::zeros(&[batch, out_dim])?;
    for n in 0..batch {
        for o in 0..out_dim {
            let mut acc = 0.0;
            for i in 0..in_dim {
                acc += w.at2(o, i) * x.at2(n, i);
            }
            z.set2(n, o, acc / scale + b.data()[o]);
        }
    }
    Ok((
        z,
        AffineCache {
            x: x.clone(),
            scale,
            scale_row,
        },
    ))
}

/// Gradients of one affine application.
pub struct AffineGrads {
    pub w: Tensor,
    pub b: Tensor,
    pub x: Tensor,
}

/// Backward pass of [`affine_forward`] given `dz = dL/dz`.
///
/// When the row-norm cap was active the scale depends on the weights, and the
/// returned weight gradient accounts for that dependence exactly (so finite
/// differences agree).
pub fn affine_backward(w: &Tensor, cache: &AffineCache, dz: &Tensor) -> Result<AffineGrads> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    let batch = cache.x.rows();
    if dz.shape() != [batch, out_dim] {
        return Err(Error::ShapeMismatch(format!(
            "dz shape {:?} does not match [{batch}, {out_dim}]",
            dz.shape()
        )));
    }
    let s = cache.scale;

    // dL/dW_eff where W_eff = W / s.
    let mut g_eff = Tensor::zeros(&[out_dim, in_dim])?;
    for o in 0..out_dim {
        for i in 0..in_dim {
            let mut acc = 0.0;
            for n in 0..batch {
                acc += dz.at2(n, o) * cache.x.at2(n, i);
            }
            g_eff.set2(o, i, acc);
        }
    }

    let mut gb = Tensor::zeros(&[out_dim])?;
    for o in 0..out_dim {
        let mut acc = 0.0;
        for n in 0..batch {
            acc += dz.at2(n, o);
        }
        gb.data_mut()[o] = acc;
    }

    let mut gx = Tensor::zeros(&[batch, in_dim])?;
    for n in 0..batch {
        for i in 0..in_dim {
            let mut acc = 0.0;
            for o in 0..out_dim {
                acc += dz.at2(n, o) * w.at2(o, i);
            }
            gx.set2(n, i, acc / s);
        }
    }

    let mut gw = Tensor::zeros(&[out_dim, in_dim])?;
    if s > 1.0 {
        // L = F(W/s(W)) with s = ||W_r*||, so
        // dL/dW_ij = G_ij/s - (sum_kl G_kl W_kl) / s^2 * ds/dW_ij,
        // where ds/dW_ij = [i == r*] W_ij / s.
        let mut inner = 0.0;
        for k in 0..out_dim * in_dim {
            inner += g_eff.data()[k] * w.data()[k];
        }
        let r = cache.scale_row;
        for o in 0..out_dim {
            for i in 0..in_dim {
                let mut g = g_eff.at2(o, i) / s;
                if o == r {
                    g -= inner / (s * s) * (w.at2(r, i) / s);
                }
                gw.set2(o, i, g);
            }
        }
    } else {
        for k in 0..out_dim * in_dim {
            gw.data_mut()[k] = g_eff.data()[k];
        }
    }

    Ok(AffineGrads { w: gw, b: gb, x: gx })
}

/// Forward pass of one slot layer over a batch: Identity passes the input
/// through, Linear applies the affine, Residual adds the scaled affine branch.
pub fn layer_forward(
    kind: LayerKind,
    params: Option<(&Tensor, &Tensor)>,
    normalize: bool,
    x: &Tensor,
) -> Result<(Tensor, Option<AffineCache>)> {
    match kind {
        LayerKind::Identity => {
            if params.is_some() {
                return Err(Error::ShapeMismatch(
                    "identity layer carries no parameters".into(),
                ));
            }
            Ok((x.clone(), None))
        }
        LayerKind::Linear => {
            let (w, b) = params.ok_or_else(|| {
                Error::ShapeMismatch("linear layer requires parameters".into())
            })?;
            let (z, cache) = affine_forward(w, b, normalize, x)?;
            Ok((z, Some(cache)))
        }
        LayerKind::Residual { multiplier } => {
            let (w, b) = params.ok_or_else(|| {
                Error::ShapeMismatch("residual layer requires parameters".into())
            })?;
            if w.rows() != w.cols() || w.cols() != x.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "residual weights {:?} must be square of width {}",
                    w.shape(),
                    x.cols()
                )));
            }
            let (z, cache) = affine_forward(w, b, normalize, x)?;
            let mut y = x.clone();
            for k in 0..y.len() {
                y.data_mut()[k] += multiplier * z.data()[k];
            }
            Ok((y, Some(cache)))
        }
    }
}

/// Backward pass of [`layer_forward`]; returns parameter grads (when the kind
/// has weights) and the input grad.
pub fn layer_backward(
    kind: LayerKind,
    w: Option<&Tensor>,
    cache: Option<&AffineCache>,
    dy: &Tensor,
) -> Result<(Option<AffineGrads>, Tensor)> {
    match kind {
        LayerKind::Identity => Ok((None, dy.clone())),
        LayerKind::Linear => {
            let w = w.expect("linear layer has weights");
            let cache = cache.expect("linear layer cached its forward");
            let grads = affine_backward(w, cache, dy)?;
            let gx = grads.x.clone();
            Ok((Some(grads), gx))
        }
        LayerKind::Residual { multiplier } => {
            let w = w.expect("residual layer has weights");
            let cache = cache.expect("residual layer cached its forward");
            // y = x + m * z  =>  dz = m * dy.
            let mut dz = dy.clone();
            for v in dz.data_mut() {
                *v *= multiplier;
            }
            let grads = affine_backward(w, cache, &dz)?;
            let mut gx = dy.clone();
            for k in 0..gx.len() {
                gx.data_mut()[k] += grads.x.data()[k];
            }
            Ok((Some(grads), gx))
        }
    }
}
