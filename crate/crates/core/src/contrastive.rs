//! Bilinear discriminator and the intra/inter-domain contrastive losses.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Scores a pair of representations as `σ(xᵀ W y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub weight: Array2<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn zeros(width: usize) -> Self {
        Discriminator {
            weight: Array2::zeros((width, width)),
        }
    }

    pub fn identity(width: usize) -> Self {
        Discriminator {
            weight: Array2::eye(width),
        }
    }

    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width.max(1) as f64).sqrt();
        Discriminator {
            weight: Array2::from_shape_simple_fn((width, width), || T::lit(rng.random_range(-bound..=bound))),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.nrows()
    }

    fn check(&self, x: usize, y: usize) -> Result<()> {
        if x != self.width() || y != self.width() {
            return Err(shape_err(format!(
                "discriminator width {} applied to vectors of widths {x} and {y}",
                self.width()
            )));
        }
        Ok(())
    }

    fn logit(&self, x: ArrayView1<'_, T>, y: ArrayView1<'_, T>) -> T {
        x.dot(&self.weight.dot(&y))
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn discriminate<T: Scalar>(x: ArrayView1<'_, T>, y: ArrayView1<'_, T>, disc: &Discriminator<T>) -> Result<T> {
    disc.check(x.len(), y.len())?;
    Ok(sigmoid(disc.logit(x, y)))
}

/// `-log D` for a positive pair (`positive = true`) or `-log(1 - D)` for a
/// negative one, with `D = clamp(σ(logit), ε, 1-ε)`. Returns the value and its
/// derivative with respect to the logit (zero where the clamp is active).
pub(crate) fn bce_term<T: Scalar>(logit: T, positive: bool, eps: T) -> (T, T) {
    let d = sigmoid(logit);
    let lo = eps;
    let hi = T::one() - eps;
    let clamped = d < lo || d > hi;
    let dc = d.max(lo).min(hi);
    if positive {
        let grad = if clamped { T::zero() } else { d - T::one() };
        (-dc.ln(), grad)
    } else {
        let grad = if clamped { T::zero() } else { d };
        (-(T::one() - dc).ln(), grad)
    }
}

/// Gradients of [`intra_loss`].
#[derive(Debug, Clone)]
pub struct IntraGrad<T> {
    pub d_h: Array2<T>,
    pub d_h_corrupt: Array2<T>,
    pub d_readout: Array1<T>,
    pub d_weight: Array2<T>,
}

/// Node-vs-graph loss: mean over nodes of `-log D(h_i, r) - log(1 - D(h̃_i, r))`.
pub fn intra_loss<T: Scalar>(
    h: ArrayView2<'_, T>,
    h_corrupt: ArrayView2<'_, T>,
    readout: ArrayView1<'_, T>,
    disc: &Discriminator<T>,
    eps: T,
) -> Result<T> {
    intra_loss_grad(h, h_corrupt, readout, disc, eps).map(|(v, _)| v)
}

pub fn intra_loss_grad<T: Scalar>(
    h: ArrayView2<'_, T>,
    h_corrupt: ArrayView2<'_, T>,
    readout: ArrayView1<'_, T>,
    disc: &Discriminator<T>,
    eps: T,
) -> Result<(T, IntraGrad<T>)> {
    if h.dim() != h_corrupt.dim() {
        return Err(shape_err("clean and corrupted embeddings differ in shape"));
    }
    if h.nrows() == 0 {
        return Err(shape_err("contrastive loss over zero nodes"));
    }
    disc.check(h.ncols(), readout.len())?;
    let n = T::lit(h.nrows() as f64);
    // W r, shared by every node-vs-readout logit
    let wr = disc.weight.dot(&readout);
    let pos_logits = h.dot(&wr);
    let neg_logits = h_corrupt.dot(&wr);

    let mut total = T::zero();
    let mut g_pos = Array1::zeros(h.nrows());
    let mut g_neg = Array1::zeros(h.nrows());
    for i in 0..h.nrows() {
        let (vp, gp) = bce_term(pos_logits[i], true, eps);
        let (vn, gn) = bce_term(neg_logits[i], false, eps);
        total += vp + vn;
        g_pos[i] = gp / n;
        g_neg[i] = gn / n;
    }

    let wr_row = wr.view().insert_axis(Axis(0));
    let d_h = g_pos.view().insert_axis(Axis(1)).dot(&wr_row);
    let d_h_corrupt = g_neg.view().insert_axis(Axis(1)).dot(&wr_row);
    // Σ_i g_i h_i, the node-weighted sum that multiplies r on both sides
    let weighted = h.t().dot(&g_pos) + h_corrupt.t().dot(&g_neg);
    let d_readout = disc.weight.t().dot(&weighted);
    let d_weight = outer(weighted.view(), readout);
    Ok((
        total / n,
        IntraGrad {
            d_h,
            d_h_corrupt,
            d_readout,
            d_weight,
        },
    ))
}

/// Gradients of [`inter_loss`].
#[derive(Debug, Clone)]
pub struct InterGrad<T> {
    pub d_anchor: Array1<T>,
    pub d_positive: Array1<T>,
    pub d_negative: Array1<T>,
    pub d_weight: Array2<T>,
}

/// Graph-vs-graph loss `-log D(anchor, positive) - log(1 - D(anchor, negative))`.
///
/// For the target side, `anchor = r_t`, `positive = r_s` and `negative` is
/// the readout of the corrupted source graph.
pub fn inter_loss<T: Scalar>(
    anchor: ArrayView1<'_, T>,
    positive: ArrayView1<'_, T>,
    negative: ArrayView1<'_, T>,
    disc: &Discriminator<T>,
    eps: T,
) -> Result<T> {
    inter_loss_grad(anchor, positive, negative, disc, eps).map(|(v, _)| v)
}

pub fn inter_loss_grad<T: Scalar>(
    anchor: ArrayView1<'_, T>,
    positive: ArrayView1<'_, T>,
    negative: ArrayView1<'_, T>,
    disc: &Discriminator<T>,
    eps: T,
) -> Result<(T, InterGrad<T>)> {
    disc.check(anchor.len(), positive.len())?;
    disc.check(anchor.len(), negative.len())?;
    let (vp, gp) = bce_term(disc.logit(anchor, positive), true, eps);
    let (vn, gn) = bce_term(disc.logit(anchor, negative), false, eps);
    let w = &disc.weight;
    let d_anchor = w.dot(&positive) * gp + w.dot(&negative) * gn;
    let d_positive = w.t().dot(&anchor) * gp;
    let d_negative = w.t().dot(&anchor) * gn;
    let d_weight = outer(anchor, positive) * gp + outer(anchor, negative) * gn;
    Ok((
        vp + vn,
        InterGrad {
            d_anchor,
            d_positive,
            d_negative,
            d_weight,
        },
    ))
}

/// The four contrastive terms, kept separately for loss traces.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContrastiveParts<T> {
    pub source_intra: T,
    pub source_inter: T,
    pub target_intra: T,
    pub target_inter: T,
}

pub fn contra_loss<T: Scalar>(parts: &ContrastiveParts<T>) -> T {
    parts.source_intra + parts.source_inter + parts.target_intra + parts.target_inter
}

pub(crate) fn outer<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Array2<T> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sigmoid_is_strictly_increasing(a in -30.0f64..30.0, delta in 1e-3f64..5.0) {
            prop_assert!(sigmoid(a + delta) > sigmoid(a));
        }

        #[test]
        fn intra_loss_is_finite_and_above_floor(
            vals in proptest::collection::vec(-50.0f64..50.0, 4 * 3 * 2 + 9),
        ) {
            let h = Array2::from_shape_vec((4, 3), vals[0..12].to_vec()).unwrap();
            let hc = Array2::from_shape_vec((4, 3), vals[12..24].to_vec()).unwrap();
            let w = Array2::from_shape_vec((3, 3), vals[24..33].to_vec()).unwrap();
            let r = h.mean_axis(Axis(0)).unwrap();
            let v = intra_loss(h.view(), hc.view(), r.view(), &Discriminator { weight: w }, 1e-7).unwrap();
            prop_assert!(v.is_finite());
            prop_assert!(v >= -2.0 * (1.0f64 - 1e-7).ln() - 1e-15);
        }
    }
}
