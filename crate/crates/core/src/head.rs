//! The entity branch of a training step: compose each matched span's
//! representations, project, and score against the ontology embedding.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use thiserror::Error;

use crate::composition::{Activation, Composer, CompositionError, Method};
use crate::energy::{regularizer, Energy, EnergyError, Projection};
use crate::lexicon::EntityLexicon;
use crate::matcher::EntityMatch;
use crate::params::{Parameters, TensorView};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("match at {start}+{len} lies outside {rows} representation rows")]
    SpanOutOfRange { start: usize, len: usize, rows: usize },
}

/// Composition and projection parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityHead {
    pub composer: Composer,
    pub projection: Projection,
}

/// One sentence's regularizer value and the gradient it sends back into the
/// representation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceTerm {
    pub value: f64,
    pub entities: usize,
    pub d_reps: Array2<f64>,
}

impl EntityHead {
    /// `d_c` is the composed size, `d_x` the representation size and `d_e`
    /// the ontology embedding size.
    pub fn init<R: Rng + ?Sized>(
        method: Method,
        d_c: usize,
        d_x: usize,
        d_e: usize,
        g: Activation,
        rng: &mut R,
    ) -> Result<Self, CompositionError> {
        let composer = Composer::init(method, d_c, d_x, g, rng)?;
        let projection = Projection::init(d_e, d_c, rng);
        Ok(Self {
            composer,
            projection,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            composer: self.composer.zeros_like(),
            projection: Projection::zeros(self.projection.output_dim(), self.projection.input_dim()),
        }
    }

    /// Regularizer for one sentence.
    ///
    /// Row `p` of `reps` holds the representation of 1-based sentence
    /// position `p` (row 0 is the leading `[CLS]`). Gradients of
    /// `scale * value` are accumulated into `grads`; the returned `d_reps`
    /// carries the same scale.
    pub fn sentence(
        &self,
        reps: ArrayView2<f64>,
        matches: &[EntityMatch],
        lexicon: &EntityLexicon,
        energy: &Energy,
        scale: f64,
        grads: &mut EntityHead,
    ) -> Result<SentenceTerm, HeadError> {
        let mut d_reps = Array2::zeros(reps.raw_dim());
        if matches.is_empty() {
            return Ok(SentenceTerm {
                value: 0.0,
                entities: 0,
                d_reps,
            });
        }
        let mut forward = Vec::with_capacity(matches.len());
        for m in matches {
            if m.start == 0 || m.len == 0 || m.end() >= reps.nrows() {
                return Err(HeadError::SpanOutOfRange {
                    start: m.start,
                    len: m.len,
                    rows: reps.nrows(),
                });
            }
            forward.push(self.composer.compose(reps.slice(s![m.start..m.start + m.len, ..]))?);
        }
        let composed: Vec<ArrayView1<f64>> = forward.iter().map(|(c, _)| c.view()).collect();
        let targets: Vec<ArrayView1<f64>> = matches
            .iter()
            .map(|m| ArrayView1::from(&lexicon.entity(m.entity).embedding[..]))
            .collect();
        let reg = regularizer(&self.projection, &composed, &targets, energy)?;
        grads.projection.add_scaled(&reg.grad_projection, scale);
        for ((m, (_, cache)), upstream) in matches.iter().zip(&forward).zip(&reg.grad_composed) {
            let (g, d_span) = self.composer.backward(cache, upstream.view())?;
            grads.composer.add_scaled(&g, scale);
            let mut rows = d_reps.slice_mut(s![m.start..m.start + m.len, ..]);
            rows.scaled_add(scale, &d_span);
        }
        Ok(SentenceTerm {
            value: reg.value,
            entities: matches.len(),
            d_reps,
        })
    }
}

impl Parameters for EntityHead {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = self.composer.tensors();
        out.extend(self.projection.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.composer.tensors_mut();
        out.extend(self.projection.tensors_mut());
        out
    }
}
