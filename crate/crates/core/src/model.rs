//! Toy encoder: a learnable class token attends over embedded patch tokens,
//! then a two-layer projection head maps the pooled token onto the unit
//! sphere.
//!
//! For one sample with patch matrix `X` (P×d_in):
//!
//! ```text
//! vis  = X · W_embed                         (P×d_model)
//! α    = softmax((cls0·W_q)(vis·W_k)ᵀ / √d)  (1×P)
//! h    = α · (vis·W_v) + cls0                (1×d_model)
//! z    = normalize(relu(h·W1 + b1)·W2 + b2)  (1×D)
//! ```
//!
//! The residual `+ cls0` is part of the update rule, so `h` is the attention
//! pooled value shifted by the shared initial class token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_in: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl EncoderDims {
    /// `d_hidden` defaults to twice `d_model`.
    pub fn new(d_in: usize, d_model: usize, d_out: usize) -> Self {
        Self { d_in, d_model, d_hidden: 2 * d_model, d_out }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return Err(Error::invalid(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Learnable encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub embed_w: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub cls0: Matrix<T>,
    pub proj_w1: Matrix<T>,
    pub proj_b1: Matrix<T>,
    pub proj_w2: Matrix<T>,
    pub proj_b2: Matrix<T>,
}

/// Parameter names in checkpoint order.
pub const PARAM_NAMES: [&str; 9] =
    ["embed_w", "wq", "wk", "wv", "cls0", "proj_w1", "proj_b1", "proj_w2", "proj_b2"];

impl<T: Scalar> EncoderParams<T> {
    /// Uniform in ±1/√fan_in per matrix.
    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-bound..=bound)))
        };
        let EncoderDims { d_in, d_model, d_hidden, d_out } = dims;
        Ok(Self {
            embed_w: uniform(d_in, d_model, d_in),
            wq: uniform(d_model, d_model, d_model),
            wk: uniform(d_model, d_model, d_model),
            wv: uniform(d_model, d_model, d_model),
            cls0: uniform(1, d_model, d_model),
            proj_w1: uniform(d_model, d_hidden, d_model),
            proj_b1: uniform(1, d_hidden, d_model),
            proj_w2: uniform(d_hidden, d_out, d_hidden),
            proj_b2: uniform(1, d_out, d_hidden),
        })
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            d_in: self.embed_w.rows(),
            d_model: self.embed_w.cols(),
            d_hidden: self.proj_w1.cols(),
            d_out: self.proj_w2.cols(),
        }
    }

    pub fn tensors(&self) -> [&Matrix<T>; 9] {
        [
            &self.embed_w,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.cls0,
            &self.proj_w1,
            &self.proj_b1,
            &self.proj_w2,
            &self.proj_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 9] {
        [
            &mut self.embed_w,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.cls0,
            &mut self.proj_w1,
            &mut self.proj_b1,
            &mut self.proj_w2,
            &mut self.proj_b2,
        ]
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order, checking
    /// that the shapes agree with each other.
    pub fn from_tensors(mut t: Vec<Matrix<T>>) -> Result<Self> {
        if t.len() != PARAM_NAMES.len() {
            return Err(Error::invalid(format!("expected {} tensors, got {}", PARAM_NAMES.len(), t.len())));
        }
        let mut take = || t.remove(0);
        let p = Self {
            embed_w: take(),
            wq: take(),
            wk: take(),
            wv: take(),
            cls0: take(),
            proj_w1: take(),
            proj_b1: take(),
            proj_w2: take(),
            proj_b2: take(),
        };
        let d = p.dims();
        let expected = [
            (d.d_in, d.d_model),
            (d.d_model, d.d_model),
            (d.d_model, d.d_model),
            (d.d_model, d.d_model),
            (1, d.d_model),
            (d.d_model, d.d_hidden),
            (1, d.d_hidden),
            (d.d_hidden, d.d_out),
            (1, d.d_out),
        ];
        for ((name, m), want) in PARAM_NAMES.iter().zip(p.tensors()).zip(expected) {
            if m.shape() != want {
                return Err(Error::shape("EncoderParams::from_tensors", format!("{name} is {:?}, expected {want:?}", m.shape())));
            }
        }
        d.validate()?;
        Ok(p)
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> EncoderVars {
        let [embed_w, wq, wk, wv, cls0, proj_w1, proj_b1, proj_w2, proj_b2] =
            self.tensors().map(|m| tape.leaf(m.clone()));
        EncoderVars { embed_w, wq, wk, wv, cls0, proj_w1, proj_b1, proj_w2, proj_b2 }
    }
}

/// Tape handles for [`EncoderParams`], same field order.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub embed_w: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub cls0: Var,
    pub proj_w1: Var,
    pub proj_b1: Var,
    pub proj_w2: Var,
    pub proj_b2: Var,
}

impl EncoderVars {
    pub fn all(&self) -> [Var; 9] {
        [
            self.embed_w,
            self.wq,
            self.wk,
            self.wv,
            self.cls0,
            self.proj_w1,
            self.proj_b1,
            self.proj_w2,
            self.proj_b2,
        ]
    }
}

/// Samples with their patch tokens, labels and split flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    /// One P×d_in matrix per sample.
    pub patches: Vec<Matrix<T>>,
    pub labels: Vec<Option<usize>>,
    pub is_labeled: Vec<bool>,
    /// Evaluation metadata: true when the sample's class is a known class.
    pub is_known_class: Vec<bool>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Checks flag lengths, patch shapes, and that labels appear only on
    /// labeled samples of known classes `0..known_classes`.
    pub fn validate(&self, known_classes: usize) -> Result<()> {
        let n = self.patches.len();
        if self.labels.len() != n || self.is_labeled.len() != n || self.is_known_class.len() != n {
            return Err(Error::invalid("sample batch fields have different lengths"));
        }
        let d_in = self.patches.first().map_or(0, Matrix::cols);
        for (i, p) in self.patches.iter().enumerate() {
            if p.rows() == 0 || p.cols() == 0 || p.cols() != d_in {
                return Err(Error::shape("SampleBatch", format!("sample {i} has patches {:?}", p.shape())));
            }
            match (self.is_labeled[i], self.labels[i]) {
                (true, Some(y)) if y < known_classes && self.is_known_class[i] => {}
                (true, _) => {
                    return Err(Error::invalid(format!("labeled sample {i} lacks a known-class label")));
                }
                (false, Some(_)) => {
                    return Err(Error::invalid(format!("unlabeled sample {i} carries a label")));
                }
                (false, None) => {}
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            patches: idx.iter().map(|&i| self.patches[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            is_labeled: idx.iter().map(|&i| self.is_labeled[i]).collect(),
            is_known_class: idx.iter().map(|&i| self.is_known_class[i]).collect(),
        }
    }
}

/// Encoder outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ClassTokenBatch {
    /// B×D unit-norm embeddings.
    pub z: Var,
    /// B×d_model pooled class tokens.
    pub h: Var,
}

/// Attention pooling of already-embedded patch tokens `vis` (P×d_model) into
/// one updated class token (1×d_model).
pub fn attend_pool<T: Scalar>(tape: &mut Tape<T>, vis: Var, params: &EncoderVars) -> Result<Var> {
    let q = tape.matmul(params.cls0, params.wq)?;
    let k = tape.matmul(vis, params.wk)?;
    let v = tape.matmul(vis, params.wv)?;
    pool_one(tape, q, k, v, params.cls0)
}

/// Attention weights of the class token over `vis`, for inspection.
pub fn attention_weights<T: Scalar>(tape: &mut Tape<T>, vis: Var, params: &EncoderVars) -> Result<Matrix<T>> {
    let q = tape.matmul(params.cls0, params.wq)?;
    let k = tape.matmul(vis, params.wk)?;
    let d_k = tape.shape(k).1;
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, T::one() / T::from_count(d_k).sqrt());
    let alpha = tape.row_softmax(scores);
    Ok(tape.value(alpha).clone())
}

fn pool_one<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, cls0: Var) -> Result<Var> {
    let d_k = tape.shape(k).1;
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, T::one() / T::from_count(d_k).sqrt());
    let alpha = tape.row_softmax(scores);
    let pooled = tape.matmul(alpha, v)?;
    tape.add(pooled, cls0)
}

/// Encodes every sample: attention pooling, then the projection head and
/// row normalization. Differentiable end to end.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, patches: &[Matrix<T>], params: &EncoderVars) -> Result<ClassTokenBatch> {
    if patches.is_empty() {
        return Err(Error::invalid("encode: empty batch"));
    }
    // Embed, key and value projections run once on the stacked patches.
    let refs: Vec<&Matrix<T>> = patches.iter().collect();
    let stacked = tape.constant(Matrix::vstack(&refs)?);
    let vis = tape.matmul(stacked, params.embed_w)?;
    let keys = tape.matmul(vis, params.wk)?;
    let values = tape.matmul(vis, params.wv)?;
    let q = tape.matmul(params.cls0, params.wq)?;

    let mut pooled = Vec::with_capacity(patches.len());
    let mut start = 0;
    for p in patches {
        let idx: Vec<usize> = (start..start + p.rows()).collect();
        start += p.rows();
        let k = tape.row_select(keys, &idx)?;
        let v = tape.row_select(values, &idx)?;
        pooled.push(pool_one(tape, q, k, v, params.cls0)?);
    }
    let h = tape.concat_rows(&pooled)?;
    let z = project(tape, h, params)?;
    Ok(ClassTokenBatch { z, h })
}

/// Projection head `normalize(relu(h·W1 + b1)·W2 + b2)`.
pub fn project<T: Scalar>(tape: &mut Tape<T>, h: Var, params: &EncoderVars) -> Result<Var> {
    let a = tape.matmul(h, params.proj_w1)?;
    let a = tape.add_row(a, params.proj_b1)?;
    let a = tape.relu(a);
    let o = tape.matmul(a, params.proj_w2)?;
    let o = tape.add_row(o, params.proj_b2)?;
    tape.l2_normalize_rows(o)
}

/// Forward pass without gradients; returns (z, h) values.
pub fn embed<T: Scalar>(params: &EncoderParams<T>, patches: &[Matrix<T>]) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = encode(&mut tape, patches, &vars)?;
    Ok((tape.value(out.z).clone(), tape.value(out.h).clone()))
}
