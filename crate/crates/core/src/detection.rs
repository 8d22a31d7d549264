//! Gaussian-kernel hypersphere loss with a shared center plus per-domain
//! offsets, the combined objective, and anomaly scores.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::Domain;
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

/// How the effective per-domain centers are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CenterMode {
    /// `c^d = u^d + c` with a learnable shared `c`.
    #[default]
    Shared,
    /// `c^d = u^d`; the shared center is unused.
    Independent,
}

/// Which kernel term each label is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPairing {
    /// Normals pay `-log l`, anomalies pay `-log(1 - l)`.
    #[default]
    Standard,
    /// The swapped pairing: label 1 pays `-log l`.
    Swapped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet<T> {
    pub shared: Array1<T>,
    pub source_offset: Array1<T>,
    pub target_offset: Array1<T>,
}

impl<T: Scalar> CenterSet<T> {
    pub fn zeros(width: usize) -> Self {
        CenterSet {
            shared: Array1::zeros(width),
            source_offset: Array1::zeros(width),
            target_offset: Array1::zeros(width),
        }
    }

    pub fn offset(&self, domain: Domain) -> &Array1<T> {
        match domain {
            Domain::Source => &self.source_offset,
            Domain::Target => &self.target_offset,
        }
    }

    pub fn offset_mut(&mut self, domain: Domain) -> &mut Array1<T> {
        match domain {
            Domain::Source => &mut self.source_offset,
            Domain::Target => &mut self.target_offset,
        }
    }

    pub fn effective(&self, domain: Domain, mode: CenterMode) -> Array1<T> {
        match mode {
            CenterMode::Shared => self.offset(domain) + &self.shared,
            CenterMode::Independent => self.offset(domain).clone(),
        }
    }

    /// Routes a gradient with respect to an effective center back to its parts.
    pub fn accumulate(&mut self, domain: Domain, mode: CenterMode, d_center: ArrayView1<'_, T>) {
        *self.offset_mut(domain) += &d_center;
        if mode == CenterMode::Shared {
            self.shared += &d_center;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub alpha_balance: T,
}

fn squared_distance<T: Scalar>(z: ArrayView1<'_, T>, center: ArrayView1<'_, T>) -> T {
    z.iter().zip(center.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// `exp(-‖z - center‖²)`.
pub fn rbf_similarity<T: Scalar>(z: ArrayView1<'_, T>, center: ArrayView1<'_, T>) -> Result<T> {
    if z.len() != center.len() {
        return Err(shape_err(format!("vector width {} vs center width {}", z.len(), center.len())));
    }
    Ok((-squared_distance(z, center)).exp())
}

/// Per-node term and its derivative with respect to `d = ‖z - c‖²`.
fn hsc_term<T: Scalar>(dist2: T, attract: bool, eps: T) -> (T, T) {
    let l = (-dist2).exp();
    let lo = eps;
    let hi = T::one() - eps;
    let clamped = l < lo || l > hi;
    let lc = l.max(lo).min(hi);
    if attract {
        // -log l = d inside the clamp
        (-lc.ln(), if clamped { T::zero() } else { T::one() })
    } else {
        // d/dd [-log(1 - e^{-d})] = -l / (1 - l)
        (-(T::one() - lc).ln(), if clamped { T::zero() } else { -l / (T::one() - l) })
    }
}

/// Mean hypersphere classification loss over labeled rows of `z`, plus the
/// gradients with respect to `z` (full `n × k`, zero for unlisted rows) and
/// the effective center.
pub fn dahsc_loss_grad<T: Scalar>(
    z: ArrayView2<'_, T>,
    supervision: &[(usize, u8)],
    center: ArrayView1<'_, T>,
    eps: T,
    pairing: LabelPairing,
) -> Result<(T, Array2<T>, Array1<T>)> {
    if z.ncols() != center.len() {
        return Err(shape_err(format!("embedding width {} vs center width {}", z.ncols(), center.len())));
    }
    if supervision.is_empty() {
        return Err(arg_err("hypersphere loss over an empty node set"));
    }
    let count = T::lit(supervision.len() as f64);
    let mut total = T::zero();
    let mut d_z = Array2::zeros(z.raw_dim());
    let mut d_center = Array1::zeros(center.len());
    for &(node, label) in supervision {
        if label > 1 {
            return Err(arg_err(format!("node {node} has non-binary label {label}")));
        }
        if node >= z.nrows() {
            return Err(shape_err(format!("node {node} outside {} embeddings", z.nrows())));
        }
        let attract = match pairing {
            LabelPairing::Standard => label == 0,
            LabelPairing::Swapped => label == 1,
        };
        let row = z.row(node);
        let diff = &row - &center;
        let (v, dd) = hsc_term(squared_distance(row, center), attract, eps);
        total += v;
        let g = &diff * (T::lit(2.0) * dd / count);
        let mut dz = d_z.row_mut(node);
        dz += &g;
        d_center -= &g;
    }
    Ok((total / count, d_z, d_center))
}

/// Mean hypersphere classification loss over all rows of `z`.
pub fn dahsc_loss<T: Scalar>(
    z: ArrayView2<'_, T>,
    labels: &[u8],
    center: ArrayView1<'_, T>,
    eps: T,
    pairing: LabelPairing,
) -> Result<T> {
    if labels.len() != z.nrows() {
        return Err(shape_err(format!("{} labels for {} nodes", labels.len(), z.nrows())));
    }
    let sup: Vec<(usize, u8)> = labels.iter().copied().enumerate().collect();
    dahsc_loss_grad(z, &sup, center, eps, pairing).map(|(v, _, _)| v)
}

/// `l_t + l_s + α · l_contra`.
pub fn total_loss<T: Scalar>(l_target: T, l_source: T, l_contra: T, weights: LossWeights<T>) -> T {
    l_target + l_source + weights.alpha_balance * l_contra
}

/// `s_i = 1 - exp(-‖z_i - c‖²)`; larger means more anomalous.
pub fn anomaly_scores<T: Scalar>(z: ArrayView2<'_, T>, center: ArrayView1<'_, T>) -> Result<Array1<T>> {
    if z.ncols() != center.len() {
        return Err(shape_err(format!("embedding width {} vs center width {}", z.ncols(), center.len())));
    }
    Ok(z.rows()
        .into_iter()
        .map(|row| T::one() - (-squared_distance(row, center)).exp())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;
    use rand::Rng;

    const EPS: f64 = 1e-7;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, Stream::Init);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rbf_closed_forms() {
        let c = array![0.5, -1.0];
        assert_eq!(rbf_similarity(c.view(), c.view()).unwrap(), 1.0);
        let z = array![1.5, -1.0];
        assert!((rbf_similarity(z.view(), c.view()).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(rbf_similarity(array![1.0].view(), c.view()).is_err());
    }

    #[test]
    fn rbf_matches_explicit_oracle() {
        let x = random(2, 64, 1);
        let mut d = 0.0;
        for j in 0..64 {
            d += (x[[0, j]] - x[[1, j]]).powi(2);
        }
        let got = rbf_similarity(x.row(0), x.row(1)).unwrap();
        assert!((got - (-d).exp()).abs() < 1e-12);
    }

    #[test]
    fn dahsc_closed_forms() {
        let c = array![0.0, 0.0];
        let perfect = dahsc_loss(array![[0.0, 0.0]].view(), &[0], c.view(), EPS, LabelPairing::Standard).unwrap();
        // clamped to 1 - ε, so the floor is -ln(1 - ε) ≈ 1e-7
        assert!(perfect.abs() < 2e-7);
        let z = array![[std::f64::consts::LN_2.sqrt(), 0.0]];
        let anomaly = dahsc_loss(z.view(), &[1], c.view(), EPS, LabelPairing::Standard).unwrap();
        assert!((anomaly - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(dahsc_loss(z.view(), &[2], c.view(), EPS, LabelPairing::Standard).is_err());
    }

    #[test]
    fn swapped_pairing_exchanges_terms() {
        let z = random(6, 3, 2);
        let c = array![0.1, 0.2, -0.1];
        let labels = [0, 1, 0, 0, 1, 0];
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = dahsc_loss(z.view(), &labels, c.view(), EPS, LabelPairing::Swapped).unwrap();
        let b = dahsc_loss(z.view(), &flipped, c.view(), EPS, LabelPairing::Standard).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dahsc_matches_node_loop() {
        let z = random(8, 5, 3);
        let c = random(1, 5, 4).row(0).to_owned();
        let labels = [0u8, 1, 0, 0, 1, 1, 0, 0];
        let mut expect = 0.0;
        for i in 0..8 {
            let mut d = 0.0;
            for j in 0..5 {
                d += (z[[i, j]] - c[j]).powi(2);
            }
            let l = (-d).exp().clamp(EPS, 1.0 - EPS);
            let y = labels[i] as f64;
            expect += -(1.0 - y) * l.ln() - y * (1.0 - l).ln();
        }
        expect /= 8.0;
        let got = dahsc_loss(z.view(), &labels, c.view(), EPS, LabelPairing::Standard).unwrap();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn dahsc_gradients_match_finite_differences() {
        let z = random(7, 4, 5);
        let c = random(1, 4, 6).row(0).to_owned() * 0.5;
        let sup = [(0, 0), (2, 1), (3, 0), (5, 1), (6, 0)];
        let f = |z: &Array2<f64>, c: &Array1<f64>| {
            dahsc_loss_grad(z.view(), &sup, c.view(), EPS, LabelPairing::Standard).unwrap().0
        };
        let (_, dz, dc) = dahsc_loss_grad(z.view(), &sup, c.view(), EPS, LabelPairing::Standard).unwrap();
        let h = 1e-5;
        for ((i, j), &a) in dz.indexed_iter() {
            let mut p = z.clone();
            p[[i, j]] += h;
            let mut m = z.clone();
            m[[i, j]] -= h;
            let n = (f(&p, &c) - f(&m, &c)) / (2.0 * h);
            assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-6), "{i},{j}: {a} vs {n}");
        }
        for j in 0..4 {
            let mut p = c.clone();
            p[j] += h;
            let mut m = c.clone();
            m[j] -= h;
            let n = (f(&z, &p) - f(&z, &m)) / (2.0 * h);
            assert!((dc[j] - n).abs() <= 1e-4 * dc[j].abs().max(n.abs()).max(1e-6));
        }
    }

    #[test]
    fn center_gradient_routes_to_shared_and_offset() {
        let mut g = CenterSet::<f64>::zeros(2);
        g.accumulate(Domain::Target, CenterMode::Shared, array![1.0, 2.0].view());
        g.accumulate(Domain::Source, CenterMode::Independent, array![3.0, 4.0].view());
        assert_eq!(g.shared, array![1.0, 2.0]);
        assert_eq!(g.target_offset, array![1.0, 2.0]);
        assert_eq!(g.source_offset, array![3.0, 4.0]);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights { alpha_balance: 0.0 };
        assert_eq!(total_loss(1.25, 2.5, 100.0, w), 3.75);
        assert_eq!(total_loss(0.0, 0.0, 4.0, LossWeights { alpha_balance: 0.5 }), 2.0);
        let (a, b, c): (f64, f64, f64) = (0.731, 1.402, 5.118);
        assert!((total_loss(a, b, c, LossWeights { alpha_balance: 0.5 }) - (a + b + 0.5 * c)).abs() < 1e-15);
    }

    #[test]
    fn score_closed_forms() {
        let c = array![1.0, 1.0];
        let z = array![[1.0, 1.0], [2.0, 1.0]];
        let s = anomaly_scores(z.view(), c.view()).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((s[1] - 0.63212).abs() < 1e-5);
    }

    #[test]
    fn scores_are_one_minus_rbf() {
        let z = random(10, 6, 7);
        let c = random(1, 6, 8).row(0).to_owned();
        let s = anomaly_scores(z.view(), c.view()).unwrap();
        for i in 0..10 {
            let r = rbf_similarity(z.row(i), c.view()).unwrap();
            assert!((s[i] - (1.0 - r)).abs() < 1e-12);
        }
    }
}
