//! Per-domain MLP preprocessing, the shared two-layer GraphSAGE encoder and
//! prompt-token enhancement.
//!
//! Every forward step keeps what its backward step needs in an
//! [`EncoderPass`], so gradients are computed by hand without a tape.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, shape_err, Result};
use crate::graph::{permute_rows, AttributedGraph, Neighborhoods};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: &mut Array2<T>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(T::zero()));
        }
    }

    /// Multiplies `grad` by the activation derivative at `pre`.
    fn backprop<T: Scalar>(self, pre: &Array2<T>, grad: &mut Array2<T>) {
        if self == Activation::Relu {
            Zip::from(grad).and(pre).for_each(|g, &p| {
                if p <= T::zero() {
                    *g = T::zero();
                }
            });
        }
    }
}

/// Affine map `x W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            weight: fan_in_uniform(input, output, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.ncols()
    }
}

/// Mean-aggregator GraphSAGE layer: `act(h W_self + mean_N(h) W_neigh + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer<T> {
    pub w_self: Array2<T>,
    pub w_neigh: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> SageLayer<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        SageLayer {
            w_self: Array2::zeros((input, output)),
            w_neigh: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        SageLayer {
            w_self: fan_in_uniform(input, output, rng),
            w_neigh: fan_in_uniform(input, output, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w_self.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.w_self.ncols()
    }
}

/// `m` prompt basis vectors stored as the rows of an `m × k` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    pub bases: Array2<T>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn zeros(m: usize, width: usize) -> Self {
        PromptBank {
            bases: Array2::zeros((m, width)),
        }
    }

    /// Bases drawn from N(0, 0.01²), so early prompt tokens are near zero.
    pub fn init<R: Rng + ?Sized>(m: usize, width: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        PromptBank {
            bases: Array2::from_shape_simple_fn((m, width), || T::lit(normal.sample(rng))),
        }
    }

    pub fn len(&self) -> usize {
        self.bases.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.bases.ncols()
    }
}

/// One prompt bank per encoder layer for a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPrompts<T> {
    pub layer1: PromptBank<T>,
    pub layer2: PromptBank<T>,
}

impl<T: Scalar> DomainPrompts<T> {
    pub fn zeros(m: usize, hidden: usize, out: usize) -> Self {
        DomainPrompts {
            layer1: PromptBank::zeros(m, hidden),
            layer2: PromptBank::zeros(m, out),
        }
    }

    pub fn init<R: Rng + ?Sized>(m: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        DomainPrompts {
            layer1: PromptBank::init(m, hidden, rng),
            layer2: PromptBank::init(m, out, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub source_mlp: Dense<T>,
    pub target_mlp: Dense<T>,
    pub layer1: SageLayer<T>,
    pub layer2: SageLayer<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(source_dim: usize, target_dim: usize, hidden: usize, out: usize) -> Self {
        EncoderParams {
            source_mlp: Dense::zeros(source_dim, hidden),
            target_mlp: Dense::zeros(target_dim, hidden),
            layer1: SageLayer::zeros(hidden, hidden),
            layer2: SageLayer::zeros(hidden, out),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        source_dim: usize,
        target_dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        EncoderParams {
            source_mlp: Dense::init(source_dim, hidden, rng),
            target_mlp: Dense::init(target_dim, hidden, rng),
            layer1: SageLayer::init(hidden, hidden, rng),
            layer2: SageLayer::init(hidden, out, rng),
        }
    }

    pub fn mlp(&self, domain: Domain) -> &Dense<T> {
        match domain {
            Domain::Source => &self.source_mlp,
            Domain::Target => &self.target_mlp,
        }
    }

    pub fn mlp_mut(&mut self, domain: Domain) -> &mut Dense<T> {
        match domain {
            Domain::Source => &mut self.source_mlp,
            Domain::Target => &mut self.target_mlp,
        }
    }

    pub fn output_width(&self) -> usize {
        self.layer2.output_width()
    }
}

fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Array2<T> {
    let bound = 1.0 / (input.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((input, output), || T::lit(rng.random_range(-bound..=bound)))
}

fn dense_forward<T: Scalar>(x: ArrayView2<'_, T>, layer: &Dense<T>) -> Array2<T> {
    let mut pre = x.dot(&layer.weight);
    pre += &layer.bias;
    pre
}

/// Domain-specific MLP: `relu(x W + b)` for every node.
pub fn mlp_preprocess<T: Scalar>(
    features: ArrayView2<'_, T>,
    domain: Domain,
    params: &EncoderParams<T>,
) -> Result<Array2<T>> {
    let mlp = params.mlp(domain);
    if features.ncols() != mlp.input_width() {
        return Err(shape_err(format!(
            "{domain:?} features have width {}, MLP expects {}",
            features.ncols(),
            mlp.input_width()
        )));
    }
    let mut h = dense_forward(features, mlp);
    Activation::Relu.apply(&mut h);
    Ok(h)
}

/// Row-wise neighbor mean; isolated nodes get the zero vector.
pub fn mean_aggregate<T: Scalar>(h: ArrayView2<'_, T>, neighbors: &Neighborhoods) -> Array2<T> {
    let mut out = Array2::zeros(h.raw_dim());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let nb = neighbors.of(i);
        if nb.is_empty() {
            continue;
        }
        for &j in nb {
            row += &h.row(j);
        }
        row /= T::lit(nb.len() as f64);
    }
    out
}

/// Adjoint of [`mean_aggregate`].
fn mean_aggregate_backward<T: Scalar>(grad: ArrayView2<'_, T>, neighbors: &Neighborhoods) -> Array2<T> {
    let mut out = Array2::zeros(grad.raw_dim());
    for i in 0..grad.nrows() {
        let nb = neighbors.of(i);
        if nb.is_empty() {
            continue;
        }
        let scaled = &grad.row(i) / T::lit(nb.len() as f64);
        for &j in nb {
            let mut r = out.row_mut(j);
            r += &scaled;
        }
    }
    out
}

pub fn sage_layer<T: Scalar>(
    embeddings: ArrayView2<'_, T>,
    neighbors: &Neighborhoods,
    layer: &SageLayer<T>,
    activation: Activation,
) -> Result<Array2<T>> {
    check_sage(embeddings, neighbors, layer)?;
    let agg = mean_aggregate(embeddings, neighbors);
    let mut out = sage_pre(embeddings, agg.view(), layer);
    activation.apply(&mut out);
    Ok(out)
}

fn check_sage<T: Scalar>(h: ArrayView2<'_, T>, neighbors: &Neighborhoods, layer: &SageLayer<T>) -> Result<()> {
    if h.ncols() != layer.input_width() {
        return Err(shape_err(format!(
            "embedding width {} does not match layer input width {}",
            h.ncols(),
            layer.input_width()
        )));
    }
    if h.nrows() != neighbors.num_nodes() {
        return Err(shape_err(format!(
            "{} embeddings for a {}-node graph",
            h.nrows(),
            neighbors.num_nodes()
        )));
    }
    Ok(())
}

fn sage_pre<T: Scalar>(h: ArrayView2<'_, T>, agg: ArrayView2<'_, T>, layer: &SageLayer<T>) -> Array2<T> {
    let mut pre = h.dot(&layer.w_self);
    pre += &agg.dot(&layer.w_neigh);
    pre += &layer.bias;
    pre
}

fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row /= sum;
    }
}

/// Softmax over `h_i · p_j` for every node `i` and basis `j`.
pub fn prompt_weights<T: Scalar>(embeddings: ArrayView2<'_, T>, bank: &PromptBank<T>) -> Result<Array2<T>> {
    if bank.is_empty() {
        return Err(arg_err("prompt bank has no bases"));
    }
    if bank.width() != embeddings.ncols() {
        return Err(shape_err(format!(
            "prompt width {} does not match embedding width {}",
            bank.width(),
            embeddings.ncols()
        )));
    }
    let mut w = embeddings.dot(&bank.bases.t());
    softmax_rows(&mut w);
    Ok(w)
}

/// `z_i = h_i + Σ_j α_ij p_j`.
pub fn enhance<T: Scalar>(embeddings: ArrayView2<'_, T>, bank: &PromptBank<T>) -> Result<Array2<T>> {
    let alpha = prompt_weights(embeddings, bank)?;
    Ok(&embeddings + &alpha.dot(&bank.bases))
}

/// Backward through `z = h + softmax(h Pᵀ) P`. Returns `dL/dh`, accumulates `dL/dP`.
fn enhance_backward<T: Scalar>(
    h: ArrayView2<'_, T>,
    alpha: &Array2<T>,
    bank: &PromptBank<T>,
    d_z: ArrayView2<'_, T>,
    d_bases: &mut Array2<T>,
) -> Array2<T> {
    let d_alpha = d_z.dot(&bank.bases.t());
    *d_bases += &alpha.t().dot(&d_z);
    let mut d_scores = d_alpha;
    for (mut ds, a) in d_scores.axis_iter_mut(Axis(0)).zip(alpha.axis_iter(Axis(0))) {
        let inner: T = ds.iter().zip(a.iter()).map(|(&g, &p)| g * p).sum();
        Zip::from(&mut ds).and(&a).for_each(|g, &p| *g = p * (*g - inner));
    }
    *d_bases += &d_scores.t().dot(&h);
    let mut d_h = d_z.to_owned();
    d_h += &d_scores.dot(&bank.bases);
    d_h
}

struct SageCache<T> {
    input: Array2<T>,
    agg: Array2<T>,
    // empty for the identity-activated output layer
    pre: Array2<T>,
}

struct PromptCache<T> {
    input: Array2<T>,
    alpha: Array2<T>,
}

/// A forward pass through the encoder with all intermediates retained.
pub struct EncoderPass<T> {
    domain: Domain,
    features: Array2<T>,
    mlp_pre: Array2<T>,
    layer1: SageCache<T>,
    prompt1: Option<PromptCache<T>>,
    layer2: SageCache<T>,
    prompt2: Option<PromptCache<T>>,
    output: Array2<T>,
}

impl<T: Scalar> EncoderPass<T> {
    /// Runs MLP → SAGE₁ (relu) → [prompt₁] → SAGE₂ (identity) → [prompt₂].
    ///
    /// `permutation`, when given, shuffles feature rows first (the corrupted
    /// view); `prompts` switches on the detection branch.
    pub fn forward(
        features: ArrayView2<'_, T>,
        neighbors: &Neighborhoods,
        domain: Domain,
        params: &EncoderParams<T>,
        prompts: Option<&DomainPrompts<T>>,
        permutation: Option<&[usize]>,
    ) -> Result<Self> {
        if features.nrows() != neighbors.num_nodes() {
            return Err(shape_err(format!(
                "{} feature rows for a {}-node graph",
                features.nrows(),
                neighbors.num_nodes()
            )));
        }
        let features = match permutation {
            Some(p) => {
                if p.len() != features.nrows() {
                    return Err(shape_err("permutation length differs from node count"));
                }
                permute_rows(features, p)
            }
            None => features.to_owned(),
        };
        let mlp = params.mlp(domain);
        if features.ncols() != mlp.input_width() {
            return Err(shape_err(format!(
                "{domain:?} features have width {}, MLP expects {}",
                features.ncols(),
                mlp.input_width()
            )));
        }
        let mlp_pre = dense_forward(features.view(), mlp);
        let mut h0 = mlp_pre.clone();
        Activation::Relu.apply(&mut h0);

        check_sage(h0.view(), neighbors, &params.layer1)?;
        let agg1 = mean_aggregate(h0.view(), neighbors);
        let pre1 = sage_pre(h0.view(), agg1.view(), &params.layer1);
        let mut h1 = pre1.clone();
        Activation::Relu.apply(&mut h1);
        let layer1 = SageCache {
            input: h0,
            agg: agg1,
            pre: pre1,
        };

        let (g1, prompt1) = match prompts {
            Some(p) => {
                let alpha = prompt_weights(h1.view(), &p.layer1)?;
                let z = &h1 + &alpha.dot(&p.layer1.bases);
                (z, Some(PromptCache { input: h1, alpha }))
            }
            None => (h1, None),
        };

        check_sage(g1.view(), neighbors, &params.layer2)?;
        let agg2 = mean_aggregate(g1.view(), neighbors);
        let h2 = sage_pre(g1.view(), agg2.view(), &params.layer2);
        let layer2 = SageCache {
            input: g1,
            agg: agg2,
            pre: Array2::zeros((0, 0)),
        };

        let (output, prompt2) = match prompts {
            Some(p) => {
                let alpha = prompt_weights(h2.view(), &p.layer2)?;
                let z = &h2 + &alpha.dot(&p.layer2.bases);
                (z, Some(PromptCache { input: h2, alpha }))
            }
            None => (h2, None),
        };

        Ok(EncoderPass {
            domain,
            features,
            mlp_pre,
            layer1,
            prompt1,
            layer2,
            prompt2,
            output,
        })
    }

    pub fn output(&self) -> &Array2<T> {
        &self.output
    }

    pub fn into_output(self) -> Array2<T> {
        self.output
    }

    /// Accumulates parameter gradients for `dL/d output = d_out`.
    ///
    /// `prompt_grads` must be supplied iff the pass used prompts.
    pub fn backward(
        &self,
        neighbors: &Neighborhoods,
        params: &EncoderParams<T>,
        prompts: Option<&DomainPrompts<T>>,
        d_out: ArrayView2<'_, T>,
        grads: &mut EncoderParams<T>,
        mut prompt_grads: Option<&mut DomainPrompts<T>>,
    ) {
        let mut d = d_out.to_owned();
        if let (Some(cache), Some(p), Some(pg)) = (&self.prompt2, prompts, prompt_grads.as_deref_mut()) {
            d = enhance_backward(cache.input.view(), &cache.alpha, &p.layer2, d.view(), &mut pg.layer2.bases);
        }

        // layer 2: identity activation
        let d_in2 = sage_backward(&self.layer2, &params.layer2, d.view(), &mut grads.layer2, neighbors);
        let mut d = d_in2;

        if let (Some(cache), Some(p), Some(pg)) = (&self.prompt1, prompts, prompt_grads) {
            d = enhance_backward(cache.input.view(), &cache.alpha, &p.layer1, d.view(), &mut pg.layer1.bases);
        }

        Activation::Relu.backprop(&self.layer1.pre, &mut d);
        let mut d_h0 = sage_backward(&self.layer1, &params.layer1, d.view(), &mut grads.layer1, neighbors);

        Activation::Relu.backprop(&self.mlp_pre, &mut d_h0);
        let g = grads.mlp_mut(self.domain);
        g.weight += &self.features.t().dot(&d_h0);
        g.bias += &d_h0.sum_axis(Axis(0));
    }
}

fn sage_backward<T: Scalar>(
    cache: &SageCache<T>,
    layer: &SageLayer<T>,
    d_pre: ArrayView2<'_, T>,
    grads: &mut SageLayer<T>,
    neighbors: &Neighborhoods,
) -> Array2<T> {
    grads.w_self += &cache.input.t().dot(&d_pre);
    grads.w_neigh += &cache.agg.t().dot(&d_pre);
    grads.bias += &d_pre.sum_axis(Axis(0));
    let d_agg = d_pre.dot(&layer.w_neigh.t());
    let mut d_in = d_pre.dot(&layer.w_self.t());
    d_in += &mean_aggregate_backward(d_agg.view(), neighbors);
    d_in
}

/// Encoder output for a whole graph: the contrastive branch `H` when
/// `prompts` is `None`, the detection branch `Z` otherwise.
pub fn encode<T: Scalar>(
    graph: &AttributedGraph<T>,
    neighbors: &Neighborhoods,
    domain: Domain,
    params: &EncoderParams<T>,
    prompts: Option<&DomainPrompts<T>>,
    permutation: Option<&[usize]>,
) -> Result<Array2<T>> {
    EncoderPass::forward(graph.features().view(), neighbors, domain, params, prompts, permutation)
        .map(EncoderPass::into_output)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn prompt_weight_rows_are_distributions(
            h in proptest::collection::vec(-50.0f64..50.0, 4 * 3),
            p in proptest::collection::vec(-5.0f64..5.0, 5 * 3),
        ) {
            let h = Array2::from_shape_vec((4, 3), h).unwrap();
            let bank = PromptBank { bases: Array2::from_shape_vec((5, 3), p).unwrap() };
            let w = prompt_weights(h.view(), &bank).unwrap();
            for row in w.rows() {
                prop_assert!(row.iter().all(|&v| v > 0.0 || v == 0.0 && row.iter().any(|&u| u > 0.5)));
                prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn zero_bases_are_the_identity(h in proptest::collection::vec(-10.0f64..10.0, 3 * 4), m in 1usize..6) {
            let h = Array2::from_shape_vec((3, 4), h).unwrap();
            prop_assert_eq!(enhance(h.view(), &PromptBank::zeros(m, 4)).unwrap(), h);
        }
    }
}
