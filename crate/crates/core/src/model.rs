//! The full set of learnable parameters and a flat view over them.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::Discriminator;
use crate::detection::CenterSet;
use crate::encoder::{Domain, DomainPrompts, EncoderParams};
use crate::scalar::Scalar;

/// Widths that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub source_dim: usize,
    pub target_dim: usize,
    pub hidden_width: usize,
    pub out_width: usize,
    pub m_bases: usize,
}

/// Parameter groups, used to freeze parts of the model per training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    SourceMlp,
    TargetMlp,
    Encoder,
    SourcePrompts,
    TargetPrompts,
    Discriminators,
    SharedCenter,
    SourceOffset,
    TargetOffset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminators<T> {
    pub intra_source: Discriminator<T>,
    pub intra_target: Discriminator<T>,
    pub inter: Discriminator<T>,
}

impl<T: Scalar> Discriminators<T> {
    pub fn intra(&self, domain: Domain) -> &Discriminator<T> {
        match domain {
            Domain::Source => &self.intra_source,
            Domain::Target => &self.intra_target,
        }
    }

    pub fn intra_mut(&mut self, domain: Domain) -> &mut Discriminator<T> {
        match domain {
            Domain::Source => &mut self.intra_source,
            Domain::Target => &mut self.intra_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub shape: ModelShape,
    pub encoder: EncoderParams<T>,
    pub source_prompts: DomainPrompts<T>,
    pub target_prompts: DomainPrompts<T>,
    pub discriminators: Discriminators<T>,
    pub centers: CenterSet<T>,
}

/// Read-only view of one parameter tensor in row-major order.
pub struct ParamRef<'a, T> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a mut [T],
}

macro_rules! visit_params {
    ($state:expr, $mat:ident, $vec:ident, $($r:tt)+) => {{
        use ParamGroup::*;
        let s = $state;
        vec![
            $mat("source_mlp.weight", SourceMlp, $($r)+ s.encoder.source_mlp.weight),
            $vec("source_mlp.bias", SourceMlp, $($r)+ s.encoder.source_mlp.bias),
            $mat("target_mlp.weight", TargetMlp, $($r)+ s.encoder.target_mlp.weight),
            $vec("target_mlp.bias", TargetMlp, $($r)+ s.encoder.target_mlp.bias),
            $mat("layer1.w_self", Encoder, $($r)+ s.encoder.layer1.w_self),
            $mat("layer1.w_neigh", Encoder, $($r)+ s.encoder.layer1.w_neigh),
            $vec("layer1.bias", Encoder, $($r)+ s.encoder.layer1.bias),
            $mat("layer2.w_self", Encoder, $($r)+ s.encoder.layer2.w_self),
            $mat("layer2.w_neigh", Encoder, $($r)+ s.encoder.layer2.w_neigh),
            $vec("layer2.bias", Encoder, $($r)+ s.encoder.layer2.bias),
            $mat("prompts.source.layer1", SourcePrompts, $($r)+ s.source_prompts.layer1.bases),
            $mat("prompts.source.layer2", SourcePrompts, $($r)+ s.source_prompts.layer2.bases),
            $mat("prompts.target.layer1", TargetPrompts, $($r)+ s.target_prompts.layer1.bases),
            $mat("prompts.target.layer2", TargetPrompts, $($r)+ s.target_prompts.layer2.bases),
            $mat("disc.intra_source", Discriminators, $($r)+ s.discriminators.intra_source.weight),
            $mat("disc.intra_target", Discriminators, $($r)+ s.discriminators.intra_target.weight),
            $mat("disc.inter", Discriminators, $($r)+ s.discriminators.inter.weight),
            $vec("center.shared", SharedCenter, $($r)+ s.centers.shared),
            $vec("center.source", SourceOffset, $($r)+ s.centers.source_offset),
            $vec("center.target", TargetOffset, $($r)+ s.centers.target_offset),
        ]
    }};
}

impl<T: Scalar> ModelState<T> {
    pub fn zeros(shape: ModelShape) -> Self {
        let ModelShape {
            source_dim,
            target_dim,
            hidden_width: hidden,
            out_width: out,
            m_bases: m,
        } = shape;
        ModelState {
            shape,
            encoder: EncoderParams::zeros(source_dim, target_dim, hidden, out),
            source_prompts: DomainPrompts::zeros(m, hidden, out),
            target_prompts: DomainPrompts::zeros(m, hidden, out),
            discriminators: Discriminators {
                intra_source: Discriminator::zeros(out),
                intra_target: Discriminator::zeros(out),
                inter: Discriminator::zeros(out),
            },
            centers: CenterSet::zeros(out),
        }
    }

    /// Random weights; centers are left at zero for the caller to place.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let ModelShape {
            source_dim,
            target_dim,
            hidden_width: hidden,
            out_width: out,
            m_bases: m,
        } = shape;
        let encoder = EncoderParams::init(source_dim, target_dim, hidden, out, rng);
        let source_prompts = DomainPrompts::init(m, hidden, out, rng);
        let target_prompts = DomainPrompts::init(m, hidden, out, rng);
        let discriminators = Discriminators {
            intra_source: Discriminator::init(out, rng),
            intra_target: Discriminator::init(out, rng),
            inter: Discriminator::init(out, rng),
        };
        ModelState {
            shape,
            encoder,
            source_prompts,
            target_prompts,
            discriminators,
            centers: CenterSet::zeros(out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    pub fn prompts(&self, domain: Domain) -> &DomainPrompts<T> {
        match domain {
            Domain::Source => &self.source_prompts,
            Domain::Target => &self.target_prompts,
        }
    }

    pub fn prompts_mut(&mut self, domain: Domain) -> &mut DomainPrompts<T> {
        match domain {
            Domain::Source => &mut self.source_prompts,
            Domain::Target => &mut self.target_prompts,
        }
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        fn mat<'a, T>(name: &'static str, group: ParamGroup, a: &'a Array2<T>) -> ParamRef<'a, T> {
            ParamRef {
                name,
                group,
                rows: a.nrows(),
                cols: a.ncols(),
                values: a.as_slice().expect("standard layout"),
            }
        }
        fn vec<'a, T>(name: &'static str, group: ParamGroup, a: &'a Array1<T>) -> ParamRef<'a, T> {
            ParamRef {
                name,
                group,
                rows: 1,
                cols: a.len(),
                values: a.as_slice().expect("standard layout"),
            }
        }
        visit_params!(self, mat, vec, &)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        fn mat<'a, T>(name: &'static str, group: ParamGroup, a: &'a mut Array2<T>) -> ParamMut<'a, T> {
            let (rows, cols) = a.dim();
            ParamMut {
                name,
                group,
                rows,
                cols,
                values: a.as_slice_mut().expect("standard layout"),
            }
        }
        fn vec<'a, T>(name: &'static str, group: ParamGroup, a: &'a mut Array1<T>) -> ParamMut<'a, T> {
            let cols = a.len();
            ParamMut {
                name,
                group,
                rows: 1,
                cols,
                values: a.as_slice_mut().expect("standard layout"),
            }
        }
        visit_params!(self, mat, vec, &mut)
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.params().iter().zip(other.params().iter()) {
            for (&x, &y) in a.values.iter().zip(b.values.iter()) {
                worst = worst.max((x - y).abs().as_f64());
            }
        }
        Some(worst)
    }
}
