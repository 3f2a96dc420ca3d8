//! The black-box boundary: identity-enrolled similarity scoring with exact
//! query accounting.
//!
//! The attacker sees nothing but [`SimilarityOracle::score_batch`]. Local
//! embedders here stand in for real recognition models: one seed plays the
//! attacked system, another the independent critic.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Geometry, Image};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown identity {0:?}")]
    UnknownIdentity(String),
    #[error("query budget exhausted: used {used} of {limit}, batch of {attempted} rejected")]
    BudgetExhausted { used: u64, limit: u64, attempted: u64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("image geometry {actual} does not match oracle geometry {expected}")]
    Geometry { expected: Geometry, actual: Geometry },
    #[error("embedding length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("invalid oracle config: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote error {status} ({code}): {message}")]
    Remote {
        status: u16,
        code: String,
        message: String,
    },
}

/// Identity-enrolled similarity scoring.
///
/// `score_batch` is all-or-nothing: on success `queries_used` grows by
/// exactly `images.len()`, on error it does not move. Scores lie in
/// `[-1, 1]`. Images are only read during the call.
pub trait SimilarityOracle: Send + Sync {
    fn geometry(&self) -> Geometry;

    fn enroll(&self, id: &str, image: &Image) -> Result<(), OracleError>;

    fn score_batch(&self, images: &[Image], id: &str) -> Result<Vec<f64>, OracleError>;

    fn queries_used(&self) -> u64;

    /// Total query allowance, if the oracle enforces one.
    fn budget(&self) -> Option<u64> {
        None
    }

    fn remaining(&self) -> Option<u64> {
        self.budget()
            .map(|limit| limit.saturating_sub(self.queries_used()))
    }
}

impl<O: SimilarityOracle + ?Sized> SimilarityOracle for Arc<O> {
    fn geometry(&self) -> Geometry {
        (**self).geometry()
    }
    fn enroll(&self, id: &str, image: &Image) -> Result<(), OracleError> {
        (**self).enroll(id, image)
    }
    fn score_batch(&self, images: &[Image], id: &str) -> Result<Vec<f64>, OracleError> {
        (**self).score_batch(images, id)
    }
    fn queries_used(&self) -> u64 {
        (**self).queries_used()
    }
    fn budget(&self) -> Option<u64> {
        (**self).budget()
    }
}

impl<O: SimilarityOracle + ?Sized> SimilarityOracle for &O {
    fn geometry(&self) -> Geometry {
        (**self).geometry()
    }
    fn enroll(&self, id: &str, image: &Image) -> Result<(), OracleError> {
        (**self).enroll(id, image)
    }
    fn score_batch(&self, images: &[Image], id: &str) -> Result<Vec<f64>, OracleError> {
        (**self).score_batch(images, id)
    }
    fn queries_used(&self) -> u64 {
        (**self).queries_used()
    }
    fn budget(&self) -> Option<u64> {
        (**self).budget()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes; a zero vector stays zero and unnormalized.
    pub fn normalize(mut self) -> Self {
        let norm = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= norm);
            self.normalized = true;
        }
        self
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, OracleError> {
    if a.values.len() != b.values.len() {
        return Err(OracleError::Length(a.values.len(), b.values.len()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(OracleError::Degenerate("zero embedding".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Elementwise map applied after the random projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Nonlinearity {
    /// No map: the embedder is linear, so `score(a·X) = score(X)` for `a > 0`
    /// as long as clipping is inactive.
    Identity,
    /// `tanh(gain · p)`.
    Tanh { gain: f64 },
    /// `sin(frequency · p)`: finite random Fourier features, whose cosine
    /// similarity is a rugged, multimodal function of the input.
    Sine { frequency: f64 },
}

impl Default for Nonlinearity {
    fn default() -> Self {
        Nonlinearity::Tanh { gain: 1.0 }
    }
}

/// `identity`, `tanh`, `tanh:GAIN` or `sine:FREQUENCY`.
impl std::str::FromStr for Nonlinearity {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || OracleError::Config(format!("unknown nonlinearity {s:?}"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a.parse::<f64>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let n = match (name, arg) {
            ("identity", None) => Nonlinearity::Identity,
            ("tanh", None) => Nonlinearity::Tanh { gain: 1.0 },
            ("tanh", Some(gain)) => Nonlinearity::Tanh { gain },
            ("sine", Some(frequency)) => Nonlinearity::Sine { frequency },
            _ => return Err(bad()),
        };
        match n {
            Nonlinearity::Tanh { gain: v } | Nonlinearity::Sine { frequency: v } if !(v.is_finite() && v > 0.0) => {
                Err(bad())
            }
            n => Ok(n),
        }
    }
}

impl std::fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Nonlinearity::Identity => write!(f, "identity"),
            Nonlinearity::Tanh { gain } => write!(f, "tanh:{gain}"),
            Nonlinearity::Sine { frequency } => write!(f, "sine:{frequency}"),
        }
    }
}

/// Seeded random feature map `d → m`: clip, project with i.i.d.
/// `N(0, 1/d)` weights, apply the nonlinearity, L2-normalize.
#[derive(Debug)]
pub struct RandomEmbedder {
    geometry: Geometry,
    projection: DMatrix<f64>,
    /// Planar image subtracted before projecting.
    reference: Option<DVector<f64>>,
    nonlinearity: Nonlinearity,
    gallery: RwLock<HashMap<String, Embedding>>,
    used: AtomicU64,
}

impl RandomEmbedder {
    pub fn new(
        seed: u64,
        geometry: Geometry,
        m: usize,
        nonlinearity: Nonlinearity,
    ) -> Result<Self, OracleError> {
        if m < 2 {
            return Err(OracleError::Config(format!(
                "embedding size must be at least 2, got {m}"
            )));
        }
        let d = geometry.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let values: Vec<f64> = (0..m * d)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            geometry,
            projection: DMatrix::from_row_slice(m, d, &values),
            reference: None,
            nonlinearity,
            gallery: RwLock::new(HashMap::new()),
            used: AtomicU64::new(0),
        })
    }

    /// Subtracts a fixed reference image (typically an average face) before
    /// projecting, so that features shared by every face stop dominating the
    /// similarity. The map becomes affine rather than linear.
    pub fn with_reference(mut self, reference: &Image) -> Result<Self, OracleError> {
        check_geometry(self.geometry, reference)?;
        self.reference = Some(DVector::from_vec(reference.flatten()));
        Ok(self)
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn embed(&self, image: &Image) -> Result<Embedding, OracleError> {
        check_geometry(self.geometry, image)?;
        let mut x = DVector::from_vec(image.clip().flatten());
        if let Some(r) = &self.reference {
            x -= r;
        }
        let mut p = &self.projection * x;
        match self.nonlinearity {
            Nonlinearity::Identity => {}
            Nonlinearity::Tanh { gain } => p.apply(|v| *v = (gain * *v).tanh()),
            Nonlinearity::Sine { frequency } => p.apply(|v| *v = (frequency * *v).sin()),
        }
        Ok(Embedding::raw(p.data.into()).normalize())
    }

    fn template(&self, id: &str) -> Result<Embedding, OracleError> {
        self.gallery
            .read()
            .expect("gallery lock")
            .get(id)
            .cloned()
            .ok_or_else(|| OracleError::UnknownIdentity(id.to_string()))
    }
}

fn check_geometry(expected: Geometry, image: &Image) -> Result<(), OracleError> {
    if image.geometry() != expected {
        return Err(OracleError::Geometry {
            expected,
            actual: image.geometry(),
        });
    }
    Ok(())
}

/// Cosine that maps a zero embedding (e.g. an all-black image through a
/// bias-free embedder) to 0 instead of failing the whole batch.
fn score_against(template: &Embedding, e: &Embedding) -> f64 {
    cosine(template, e).unwrap_or(0.0)
}

impl SimilarityOracle for RandomEmbedder {
    fn geometry(&self) -> Geometry {
        self.geometry
    }

    fn enroll(&self, id: &str, image: &Image) -> Result<(), OracleError> {
        let e = self.embed(image)?;
        if !e.normalized {
            return Err(OracleError::Degenerate(format!(
                "enrollment image for {id:?} embeds to zero"
            )));
        }
        self.gallery
            .write()
            .expect("gallery lock")
            .insert(id.to_string(), e);
        Ok(())
    }

    fn score_batch(&self, images: &[Image], id: &str) -> Result<Vec<f64>, OracleError> {
        let template = self.template(id)?;
        let scores = images
            .iter()
            .map(|img| self.embed(img).map(|e| score_against(&template, &e)))
            .collect::<Result<Vec<_>, _>>()?;
        self.used.fetch_add(images.len() as u64, Ordering::SeqCst);
        Ok(scores)
    }

    fn queries_used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }
}

pub fn make_random_embedder(
    seed: u64,
    geometry: Geometry,
    m: usize,
) -> Result<RandomEmbedder, OracleError> {
    RandomEmbedder::new(seed, geometry, m, Nonlinearity::default())
}

/// Hard cap on the number of images an oracle will score.
///
/// A batch that would cross the limit is rejected whole and leaves the
/// count untouched.
#[derive(Debug)]
pub struct BudgetedOracle<O> {
    inner: O,
    limit: u64,
    used: AtomicU64,
}

pub fn with_budget<O: SimilarityOracle>(inner: O, limit: u64) -> BudgetedOracle<O> {
    BudgetedOracle {
        inner,
        limit,
        used: AtomicU64::new(0),
    }
}

impl<O> BudgetedOracle<O> {
    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }
}

impl<O: SimilarityOracle> SimilarityOracle for BudgetedOracle<O> {
    fn geometry(&self) -> Geometry {
        self.inner.geometry()
    }

    fn enroll(&self, id: &str, image: &Image) -> Result<(), OracleError> {
        self.inner.enroll(id, image)
    }

    fn score_batch(&self, images: &[Image], id: &str) -> Result<Vec<f64>, OracleError> {
        let n = images.len() as u64;
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |used| {
                (used + n <= self.limit).then_some(used + n)
            })
            .map_err(|used| OracleError::BudgetExhausted {
                used,
                limit: self.limit,
                attempted: n,
            })?;
        self.inner.score_batch(images, id).inspect_err(|_| {
            self.used.fetch_sub(n, Ordering::SeqCst);
        })
    }

    fn queries_used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    fn budget(&self) -> Option<u64> {
        Some(self.limit)
    }
}

/// Rounds every submitted image to 8 bits before scoring: the local
/// equivalent of sending images over the wire as PGM/PPM files.
#[derive(Debug)]
pub struct Quantized<O>(pub O);

impl<O: SimilarityOracle> SimilarityOracle for Quantized<O> {
    fn geometry(&self) -> Geometry {
        self.0.geometry()
    }

    fn enroll(&self, id: &str, image: &Image) -> Result<(), OracleError> {
        self.0.enroll(id, image)
    }

    fn score_batch(&self, images: &[Image], id: &str) -> Result<Vec<f64>, OracleError> {
        let q: Vec<Image> = images.iter().map(Image::quantize).collect();
        self.0.score_batch(&q, id)
    }

    fn queries_used(&self) -> u64 {
        self.0.queries_used()
    }

    fn budget(&self) -> Option<u64> {
        self.0.budget()
    }
}
