//! Bias-free linear autoencoder whose decoder columns are the eigenfaces.
//!
//! The forward pass is `y = W2 · (W1ᵀ · x)` with `W1, W2` both `d × k`.
//! Training minimizes, per sample,
//!
//! ```text
//! MSE(target(x), W2·W1ᵀ·x) + MSE(x_pair, W2·z)
//! ```
//!
//! where `target(x)` is either `x` or its soft-symmetrized version
//! `(x + 2·reflect(x)) / 3`, `z ~ N(0, I_k)` and `x_pair` is an independently
//! drawn dataset image. Both MSE terms average over the `d` components.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Geometry, Image, ImageError};

const MAGIC: &[u8; 4] = b"EIGB";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 4;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite weights")]
    Diverged { epoch: usize },
    #[error("basis column {0} has zero or non-finite norm")]
    DegenerateColumn(usize),
    #[error("bad basis file: {0}")]
    Format(String),
    #[error("truncated basis file: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unsupported basis file version {0}")]
    UnsupportedVersion(u16),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which terms of the training loss are active.
///
/// The four combinations are the ablation variants: plain reconstruction
/// (`SL`), symmetry target (`SR`), generative term (`GR`) and both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossTerms {
    pub symmetry: bool,
    pub generative: bool,
}

impl LossTerms {
    pub const SL: LossTerms = LossTerms {
        symmetry: false,
        generative: false,
    };
    pub const SR: LossTerms = LossTerms {
        symmetry: true,
        generative: false,
    };
    pub const GR: LossTerms = LossTerms {
        symmetry: false,
        generative: true,
    };
    pub const SR_GR: LossTerms = LossTerms {
        symmetry: true,
        generative: true,
    };

    pub const ALL: [LossTerms; 4] = [Self::SL, Self::SR, Self::GR, Self::SR_GR];

    pub fn label(&self) -> &'static str {
        match (self.symmetry, self.generative) {
            (false, false) => "SL",
            (true, false) => "SR",
            (false, true) => "GR",
            (true, true) => "SR+GR",
        }
    }
}

impl std::str::FromStr for LossTerms {
    type Err = BasisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::SL, Self::SR, Self::GR, Self::SR_GR]
            .into_iter()
            .find(|t| t.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| BasisError::Config(format!("unknown loss variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderWeights {
    geometry: Geometry,
    /// Encoder, `d × k`.
    pub w1: DMatrix<f64>,
    /// Decoder, `d × k`; its columns are the eigenfaces.
    pub w2: DMatrix<f64>,
}

/// Gradients of the training loss with respect to both weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
}

impl AutoencoderWeights {
    pub fn new(geometry: Geometry, w1: DMatrix<f64>, w2: DMatrix<f64>) -> Result<Self, BasisError> {
        let d = geometry.len();
        if w1.nrows() != d || w2.nrows() != d {
            return Err(BasisError::Dimension {
                what: "weight rows",
                expected: d,
                actual: if w1.nrows() != d { w1.nrows() } else { w2.nrows() },
            });
        }
        if w1.ncols() != w2.ncols() {
            return Err(BasisError::Dimension {
                what: "weight columns",
                expected: w1.ncols(),
                actual: w2.ncols(),
            });
        }
        Ok(Self { geometry, w1, w2 })
    }

    /// Uniform init in `[-1/√d, 1/√d]`.
    pub fn random(geometry: Geometry, k: usize, rng: &mut impl Rng) -> Self {
        let d = geometry.len();
        let bound = 1.0 / (d as f64).sqrt();
        let mut sample = || rng.random_range(-bound..=bound);
        let w1 = DMatrix::from_fn(d, k, |_, _| sample());
        let w2 = DMatrix::from_fn(d, k, |_, _| sample());
        Self { geometry, w1, w2 }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn k(&self) -> usize {
        self.w1.ncols()
    }

    fn check_len(&self, what: &'static str, v: &DVector<f64>, expected: usize) -> Result<(), BasisError> {
        if v.len() != expected {
            return Err(BasisError::Dimension {
                what,
                expected,
                actual: v.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, BasisError> {
        self.check_len("input", x, self.dim())?;
        Ok(&self.w2 * (self.w1.tr_mul(x)))
    }

    /// Reconstruction target for `x`: `x` itself, or its soft-symmetrized
    /// version when the symmetry term is on.
    pub fn target(&self, x: &DVector<f64>, terms: LossTerms) -> Result<DVector<f64>, BasisError> {
        self.check_len("input", x, self.dim())?;
        if !terms.symmetry {
            return Ok(x.clone());
        }
        let img = Image::reshape(x.as_slice(), self.geometry)?;
        Ok(DVector::from_vec(img.symmetrize().flatten()))
    }

    pub fn loss(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        x_pair: &DVector<f64>,
        terms: LossTerms,
    ) -> Result<f64, BasisError> {
        let target = self.target(x, terms)?;
        self.loss_with_target(x, &target, z, x_pair, terms.generative)
    }

    fn loss_with_target(
        &self,
        x: &DVector<f64>,
        target: &DVector<f64>,
        z: &DVector<f64>,
        x_pair: &DVector<f64>,
        generative: bool,
    ) -> Result<f64, BasisError> {
        let d = self.dim() as f64;
        let recon = self.forward(x)?;
        let mut loss = (recon - target).norm_squared() / d;
        if generative {
            self.check_len("latent", z, self.k())?;
            self.check_len("pair", x_pair, self.dim())?;
            loss += (&self.w2 * z - x_pair).norm_squared() / d;
        }
        Ok(loss)
    }

    /// Analytic gradients of [`AutoencoderWeights::loss`].
    ///
    /// With `r = W2·W1ᵀ·x − target`, `h = W1ᵀ·x`, `g = W2·z − x_pair`:
    /// `dW2 = (2/d)(r·hᵀ + g·zᵀ)`, `dW1 = (2/d)·x·(W2ᵀ·r)ᵀ`.
    pub fn grad(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        x_pair: &DVector<f64>,
        terms: LossTerms,
    ) -> Result<Gradients, BasisError> {
        let target = self.target(x, terms)?;
        let mut g = Gradients {
            w1: DMatrix::zeros(self.dim(), self.k()),
            w2: DMatrix::zeros(self.dim(), self.k()),
        };
        self.accumulate_grad(x, &target, z, x_pair, terms.generative, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `scale ×` the per-sample gradient into `acc`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_grad(
        &self,
        x: &DVector<f64>,
        target: &DVector<f64>,
        z: &DVector<f64>,
        x_pair: &DVector<f64>,
        generative: bool,
        scale: f64,
        acc: &mut Gradients,
    ) -> Result<(), BasisError> {
        self.check_len("input", x, self.dim())?;
        let c = scale * 2.0 / self.dim() as f64;
        let h = self.w1.tr_mul(x);
        let r = &self.w2 * &h - target;
        let back = self.w2.tr_mul(&r);
        acc.w2.ger(c, &r, &h, 1.0);
        acc.w1.ger(c, x, &back, 1.0);
        if generative {
            self.check_len("latent", z, self.k())?;
            self.check_len("pair", x_pair, self.dim())?;
            let gen = &self.w2 * z - x_pair;
            acc.w2.ger(c, &gen, z, 1.0);
        }
        Ok(())
    }

    /// Mean over samples of `‖x − W2·W1ᵀ·x‖² / d`.
    pub fn reconstruction_mse(&self, data: &[DVector<f64>]) -> Result<f64, BasisError> {
        let d = self.dim() as f64;
        let mut total = 0.0;
        for x in data {
            total += (self.forward(x)? - x).norm_squared() / d;
        }
        Ok(total / data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
    }

    pub fn to_basis(&self) -> Result<EigenBasis, BasisError> {
        EigenBasis::new(self.geometry, self.w2.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub terms: LossTerms,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 64,
            step_size: 0.5,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            terms: LossTerms::SR_GR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BasisError> {
        if self.k == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(BasisError::Config(
                "k, batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(BasisError::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: AutoencoderWeights,
    /// Mean per-sample training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn basis(&self) -> Result<EigenBasis, BasisError> {
        self.weights.to_basis()
    }
}

pub fn check_dataset(dataset: &[Image]) -> Result<Geometry, BasisError> {
    let first = dataset
        .first()
        .ok_or_else(|| BasisError::Input("empty dataset".into()))?;
    let geometry = first.geometry();
    for img in dataset {
        if img.geometry() != geometry {
            return Err(ImageError::Geometry {
                expected: geometry,
                actual: img.geometry(),
            }
            .into());
        }
    }
    Ok(geometry)
}

pub fn flatten_dataset(dataset: &[Image]) -> Vec<DVector<f64>> {
    dataset
        .iter()
        .map(|img| DVector::from_vec(img.flatten()))
        .collect()
}

/// Mini-batch SGD with a constant step size.
///
/// Every sample draws a fresh latent `z` and an independent `x_pair`. The
/// epoch order is shuffled with the seeded generator, so two runs with the
/// same seed and dataset order produce identical weights.
pub fn train(dataset: &[Image], cfg: &TrainConfig) -> Result<TrainOutcome, BasisError> {
    cfg.validate()?;
    let geometry = check_dataset(dataset)?;
    if dataset.len() < 2 {
        return Err(BasisError::Input(format!(
            "need at least 2 images, got {}",
            dataset.len()
        )));
    }
    let data = flatten_dataset(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = AutoencoderWeights::random(geometry, cfg.k, &mut rng);
    let targets = data
        .iter()
        .map(|x| weights.target(x, cfg.terms))
        .collect::<Result<Vec<_>, _>>()?;

    let (d, k) = (weights.dim(), cfg.k);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grads = Gradients {
        w1: DMatrix::zeros(d, k),
        w2: DMatrix::zeros(d, k),
    };
    let empty = DVector::zeros(0);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.w1.fill(0.0);
            grads.w2.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (z, pair) = if cfg.terms.generative {
                    let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let j = rng.random_range(0..data.len());
                    (z, &data[j])
                } else {
                    (DVector::zeros(0), &empty)
                };
                epoch_loss +=
                    weights.loss_with_target(&data[i], &targets[i], &z, pair, cfg.terms.generative)?;
                weights.accumulate_grad(
                    &data[i],
                    &targets[i],
                    &z,
                    pair,
                    cfg.terms.generative,
                    scale,
                    &mut grads,
                )?;
            }
            weights.w1 -= &grads.w1 * cfg.step_size;
            weights.w2 -= &grads.w2 * cfg.step_size;
            if !weights.is_finite() {
                return Err(BasisError::Diverged { epoch });
            }
        }
        let mean = epoch_loss / data.len() as f64;
        tracing::debug!(epoch, loss = mean, "epoch done");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        weights,
        epoch_losses,
    })
}

/// A set of `k` flattened eigen-images stored as the columns of a `d × k`
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    geometry: Geometry,
    e: DMatrix<f64>,
    column_norms: Vec<f64>,
}

impl EigenBasis {
    pub fn new(geometry: Geometry, e: DMatrix<f64>) -> Result<Self, BasisError> {
        if e.nrows() != geometry.len() {
            return Err(BasisError::Dimension {
                what: "basis rows",
                expected: geometry.len(),
                actual: e.nrows(),
            });
        }
        if e.ncols() == 0 {
            return Err(BasisError::Input("basis has no columns".into()));
        }
        let column_norms: Vec<f64> = e.column_iter().map(|c| c.norm()).collect();
        if let Some(j) = column_norms
            .iter()
            .position(|n| !n.is_finite() || *n == 0.0)
        {
            return Err(BasisError::DegenerateColumn(j));
        }
        Ok(Self {
            geometry,
            e,
            column_norms,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn k(&self) -> usize {
        self.e.ncols()
    }

    pub fn dim(&self) -> usize {
        self.e.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn column_norms(&self) -> &[f64] {
        &self.column_norms
    }

    /// `E · c` as a flat planar vector, unclipped.
    pub fn combine(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>, BasisError> {
        if coeffs.len() != self.k() {
            return Err(BasisError::Dimension {
                what: "coefficients",
                expected: self.k(),
                actual: coeffs.len(),
            });
        }
        Ok(&self.e * coeffs)
    }

    /// `reshape(E · c)`, unclipped.
    pub fn synthesize(&self, coeffs: &DVector<f64>) -> Result<Image, BasisError> {
        let flat = self.combine(coeffs)?;
        Ok(Image::reshape(flat.as_slice(), self.geometry)?)
    }

    pub fn eigenface(&self, j: usize) -> Image {
        Image::reshape(self.e.column(j).as_slice(), self.geometry)
            .expect("column length equals geometry")
    }

    /// `‖E_j − reflect(E_j)‖ / ‖E_j‖` for every column.
    pub fn column_asymmetry(&self) -> Vec<f64> {
        (0..self.k())
            .map(|j| {
                let face = self.eigenface(j);
                let mirrored = face.reflect();
                let diff: f64 = face
                    .data()
                    .iter()
                    .zip(mirrored.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                diff.sqrt() / self.column_norms[j]
            })
            .collect()
    }

    pub fn mean_column_asymmetry(&self) -> f64 {
        let a = self.column_asymmetry();
        a.iter().sum::<f64>() / a.len() as f64
    }

    /// Serializes to the `EIGB` layout: magic, `u16` version, `u32` width,
    /// height, channels, k, then `d·k` little-endian `f32` in column-major
    /// order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = self.geometry;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.e.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [g.width, g.height, g.channels, self.k()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        // nalgebra storage is column-major already
        for v in self.e.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BasisError> {
        if bytes.len() < HEADER_LEN {
            return Err(BasisError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(BasisError::Format(format!(
                "bad magic {:?}, expected \"EIGB\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(BasisError::UnsupportedVersion(version));
        }
        let field = |i: usize| {
            let at = 6 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let (width, height, channels, k) = (field(0), field(1), field(2), field(3));
        let geometry = Geometry::new(width, height, channels)
            .map_err(|e| BasisError::Format(format!("bad geometry: {e}")))?;
        let expected = HEADER_LEN + 4 * geometry.len() * k;
        if bytes.len() != expected {
            return Err(BasisError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        let e = DMatrix::from_iterator(geometry.len(), k, values);
        EigenBasis::new(geometry, e)
    }
}

pub fn save_basis(basis: &EigenBasis, path: impl AsRef<Path>) -> Result<(), BasisError> {
    fs::write(path, basis.to_bytes())?;
    Ok(())
}

pub fn load_basis(path: impl AsRef<Path>) -> Result<EigenBasis, BasisError> {
    EigenBasis::from_bytes(&fs::read(path)?)
}

/// Classical eigenfaces: top-k eigenvectors of the dataset's second-moment
/// matrix `(1/n) Σ x xᵀ`, by dense symmetric eigendecomposition.
///
/// The autoencoder has no bias, so the matching reference is the uncentered
/// second moment rather than the mean-subtracted covariance. Meant for small
/// `d` (a few hundred).
#[derive(Debug, Clone)]
pub struct PcaReference {
    pub geometry: Geometry,
    /// `d × k`, orthonormal columns; padded columns are zero.
    pub components: DMatrix<f64>,
    /// All `d` eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    /// Number of trailing zero columns added because `k > rank`.
    pub padded: usize,
}

pub fn pca_basis(dataset: &[Image], k: usize) -> Result<PcaReference, BasisError> {
    let geometry = check_dataset(dataset)?;
    let data = flatten_dataset(dataset);
    let d = geometry.len();
    if k == 0 || k > d {
        return Err(BasisError::Config(format!("k must be in 1..={d}, got {k}")));
    }
    let mut moment = DMatrix::<f64>::zeros(d, d);
    for x in &data {
        moment.ger(1.0, x, x, 1.0);
    }
    moment /= data.len() as f64;
    let eig = SymmetricEigen::new(moment);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let tol = eigenvalues[0].max(f64::MIN_POSITIVE) * 1e-10 * d as f64;
    let rank = eigenvalues.iter().take_while(|&&l| l > tol).count();
    let kept = k.min(rank);
    let mut components = DMatrix::zeros(d, k);
    for (j, &i) in order.iter().take(kept).enumerate() {
        components.set_column(j, &eig.eigenvectors.column(i));
    }
    Ok(PcaReference {
        geometry,
        components,
        eigenvalues,
        rank,
        padded: k - kept,
    })
}

impl PcaReference {
    /// Mean over samples of `‖x − U·Uᵀ·x‖² / d`.
    pub fn projection_mse(&self, data: &[DVector<f64>]) -> f64 {
        let d = self.components.nrows() as f64;
        let total: f64 = data
            .iter()
            .map(|x| (x - &self.components * self.components.tr_mul(x)).norm_squared() / d)
            .sum();
        total / data.len() as f64
    }

    /// Sum of the eigenvalues outside the top `k`, per component.
    pub fn discarded_energy(&self) -> f64 {
        let k = self.components.ncols();
        self.eigenvalues[k..].iter().sum::<f64>() / self.components.nrows() as f64
    }

    pub fn into_basis(self) -> Result<EigenBasis, BasisError> {
        if self.padded > 0 {
            return Err(BasisError::Input(format!(
                "{} zero-padded components (dataset rank {})",
                self.padded, self.rank
            )));
        }
        EigenBasis::new(self.geometry, self.components)
    }
}
