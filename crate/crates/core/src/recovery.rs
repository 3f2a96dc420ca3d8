//! Zeroth-order ascent in eigenface coefficient space.
//!
//! Each iteration samples a batch of coefficient offsets `Z_j ~ N(0, σ²I)`,
//! submits `clip(E·(c + Z_j))` to the oracle in a single call, and moves to
//! the best-scoring candidate. The state is the coefficient vector `c`, so
//! the unclipped reconstruction always lies in the span of the basis.
//!
//! The multi-start policy runs several short probes from zero with distinct
//! seeds, keeps the probe with the highest score at the checkpoint, and
//! continues it (coefficients, score and generator state) with whatever is
//! left of the budget.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, EigenBasis};
use crate::image::Image;
use crate::oracle::{OracleError, SimilarityOracle};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("invalid recovery config: {0}")]
    Config(String),
    #[error("basis geometry {basis} does not match oracle geometry {oracle}")]
    Geometry {
        basis: crate::image::Geometry,
        oracle: crate::image::Geometry,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcceptMode {
    /// Add the argmax candidate every iteration, even if it scores lower
    /// than the current image.
    Always,
    /// Add it only if it strictly beats the best score so far.
    Monotone,
}

impl std::str::FromStr for AcceptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "always" => Ok(AcceptMode::Always),
            "monotone" => Ok(AcceptMode::Monotone),
            other => Err(format!("unknown accept mode {other:?} (always|monotone)")),
        }
    }
}

impl std::fmt::Display for AcceptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AcceptMode::Always => "always",
            AcceptMode::Monotone => "monotone",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub batch_size: usize,
    pub query_budget: u64,
    pub sigma: f64,
    pub restarts: usize,
    pub restart_iters: usize,
    pub accept: AcceptMode,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            query_budget: 50_000,
            sigma: 1.0,
            restarts: 10,
            restart_iters: 100,
            accept: AcceptMode::Monotone,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    /// Queries spent by the probe phase.
    pub fn probe_queries(&self) -> u64 {
        (self.restarts * self.restart_iters * self.batch_size) as u64
    }

    pub fn validate(&self) -> Result<(), RecoveryError> {
        if self.batch_size == 0 {
            return Err(RecoveryError::Config("batch_size must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(RecoveryError::Config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if self.restarts > 0 && self.restart_iters == 0 {
            return Err(RecoveryError::Config(
                "restart_iters must be positive when restarts > 0".into(),
            ));
        }
        if self.restarts > 0 && self.probe_queries() >= self.query_budget {
            return Err(RecoveryError::Config(format!(
                "probe phase needs {} queries ({} restarts x {} iterations x batch {}), \
                 which does not fit in a budget of {}",
                self.probe_queries(),
                self.restarts,
                self.restart_iters,
                self.batch_size,
                self.query_budget
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub restart_id: usize,
    pub iteration: usize,
    /// Cumulative queries of the whole run after this iteration.
    pub queries_used: u64,
    pub best_score: f64,
    pub accepted: bool,
    /// Index of the argmax candidate in this iteration's batch.
    pub chosen: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub const CSV_HEADER: &'static str = "restart_id,iteration,queries_used,best_score,accepted";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn chosen_indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.chosen).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.restart_id, r.iteration, r.queries_used, r.best_score, r.accepted as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    /// `clip(E · coeffs)`.
    pub image: Image,
    pub coeffs: DVector<f64>,
    /// Oracle score of `image` as observed during the run (no extra query).
    pub final_score: f64,
    /// Highest score seen on an accepted candidate.
    pub best_score: f64,
    pub trajectory: Trajectory,
    pub total_queries: u64,
    /// Stopped early because the oracle budget ran out.
    pub exhausted: bool,
    /// Probe continued by the multi-start policy, if one ran.
    pub chosen_restart: Option<usize>,
    /// Checkpoint score of every probe, indexed by restart id.
    pub probe_scores: Vec<f64>,
}

/// `batch_size × k` matrix of i.i.d. `N(0, σ²)` entries; row `j` is the
/// offset of candidate `j`. Entries are drawn row by row.
pub fn sample_coeff_batch(k: usize, batch_size: usize, sigma: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let values: Vec<f64> = (0..k * batch_size)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DMatrix::from_row_slice(batch_size, k, &values)
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if *s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Seed of restart `restart_id`; a single run uses restart id 0.
pub fn derive_seed(seed: u64, restart_id: usize) -> u64 {
    // splitmix64 finalizer over (seed, id)
    let mut z = seed
        .wrapping_add((restart_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One greedy ascent: coefficients, scores and its own generator.
#[derive(Debug, Clone)]
struct Search {
    restart_id: usize,
    coeffs: DVector<f64>,
    /// Score of the current image; `-inf` before anything was accepted.
    current: f64,
    best: f64,
    iteration: usize,
    queries: u64,
    rng: ChaCha8Rng,
    records: Vec<TrajectoryRecord>,
    exhausted: bool,
}

enum Step {
    Done,
    OutOfBudget,
}

impl Search {
    fn new(restart_id: usize, coeffs: DVector<f64>, seed: u64) -> Self {
        Self {
            restart_id,
            coeffs,
            current: f64::NEG_INFINITY,
            best: f64::NEG_INFINITY,
            iteration: 0,
            queries: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, restart_id)),
            records: Vec::new(),
            exhausted: false,
        }
    }

    /// Runs up to `iters` iterations without spending more than `allowance`
    /// queries.
    fn run(
        &mut self,
        oracle: &dyn SimilarityOracle,
        id: &str,
        basis: &EigenBasis,
        cfg: &RecoveryConfig,
        iters: usize,
        allowance: u64,
    ) -> Result<(), RecoveryError> {
        let batch = cfg.batch_size as u64;
        let mut spent = 0u64;
        for _ in 0..iters {
            let oracle_left = oracle.remaining().unwrap_or(u64::MAX);
            if spent + batch > allowance || batch > oracle_left {
                self.exhausted = true;
                break;
            }
            match self.step(oracle, id, basis, cfg)? {
                Step::Done => spent += batch,
                Step::OutOfBudget => {
                    self.exhausted = true;
                    break;
                }
            }
        }
        Ok(())
    }

    fn step(
        &mut self,
        oracle: &dyn SimilarityOracle,
        id: &str,
        basis: &EigenBasis,
        cfg: &RecoveryConfig,
    ) -> Result<Step, RecoveryError> {
        let z = sample_coeff_batch(basis.k(), cfg.batch_size, cfg.sigma, &mut self.rng);
        // E·(c + z_j), the same arithmetic that later renders the accepted
        // coefficients, so the returned image is bit-identical to what was scored
        let candidates = z
            .row_iter()
            .map(|row| Ok(basis.synthesize(&(&self.coeffs + row.transpose()))?.clip()))
            .collect::<Result<Vec<Image>, BasisError>>()?;
        let scores = match oracle.score_batch(&candidates, id) {
            Ok(s) => s,
            Err(OracleError::BudgetExhausted { .. }) => return Ok(Step::OutOfBudget),
            Err(e) => return Err(e.into()),
        };
        self.queries += cfg.batch_size as u64;
        let ind = argmax(&scores).expect("non-empty batch");
        let s = scores[ind];
        let accepted = match cfg.accept {
            AcceptMode::Always => true,
            AcceptMode::Monotone => s > self.best,
        };
        if accepted {
            self.coeffs = &self.coeffs + z.row(ind).transpose();
            self.current = s;
            self.best = self.best.max(s);
        }
        self.iteration += 1;
        self.records.push(TrajectoryRecord {
            restart_id: self.restart_id,
            iteration: self.iteration,
            queries_used: self.queries,
            best_score: self.best,
            accepted,
            chosen: ind,
        });
        Ok(Step::Done)
    }
}

fn check_inputs(
    oracle: &dyn SimilarityOracle,
    basis: &EigenBasis,
    cfg: &RecoveryConfig,
) -> Result<(), RecoveryError> {
    cfg.validate()?;
    if basis.geometry() != oracle.geometry() {
        return Err(RecoveryError::Geometry {
            basis: basis.geometry(),
            oracle: oracle.geometry(),
        });
    }
    Ok(())
}

fn finish(
    basis: &EigenBasis,
    search: Search,
    records: Vec<TrajectoryRecord>,
    total_queries: u64,
    chosen_restart: Option<usize>,
    probe_scores: Vec<f64>,
) -> Result<RecoveryResult, RecoveryError> {
    let image = basis.synthesize(&search.coeffs)?.clip();
    Ok(RecoveryResult {
        image,
        final_score: search.current,
        best_score: search.best,
        coeffs: search.coeffs,
        trajectory: Trajectory { records },
        total_queries,
        exhausted: search.exhausted,
        chosen_restart,
        probe_scores,
    })
}

/// A single greedy run of at most `iters` iterations, starting from
/// `init_coeffs` (zero when `None`) with generator seed
/// `derive_seed(cfg.seed, 0)`.
///
/// Stops early, with `exhausted` set, when the next batch would overrun
/// `cfg.query_budget` or the oracle's own budget. `final_score` is `-inf`
/// only if no candidate was ever accepted.
pub fn recover_single(
    oracle: &dyn SimilarityOracle,
    id: &str,
    basis: &EigenBasis,
    cfg: &RecoveryConfig,
    init_coeffs: Option<&DVector<f64>>,
    iters: usize,
) -> Result<RecoveryResult, RecoveryError> {
    check_inputs(oracle, basis, cfg)?;
    let init = match init_coeffs {
        Some(c) if c.len() != basis.k() => {
            return Err(BasisError::Dimension {
                what: "initial coefficients",
                expected: basis.k(),
                actual: c.len(),
            }
            .into())
        }
        Some(c) => c.clone(),
        None => DVector::zeros(basis.k()),
    };
    let mut search = Search::new(0, init, cfg.seed);
    search.run(oracle, id, basis, cfg, iters, cfg.query_budget)?;
    let records = std::mem::take(&mut search.records);
    let total = search.queries;
    finish(basis, search, records, total, None, Vec::new())
}

/// Multi-start recovery under `cfg.query_budget`.
///
/// With `cfg.restarts == 0` this is one run over the whole budget. Otherwise
/// `restarts` probes of `restart_iters` iterations run (concurrently) from
/// zero, the probe with the highest best score wins (ties to the lowest
/// restart id), and it continues for `(budget − probe queries) / batch`
/// more iterations.
pub fn recover_multistart(
    oracle: &dyn SimilarityOracle,
    id: &str,
    basis: &EigenBasis,
    cfg: &RecoveryConfig,
) -> Result<RecoveryResult, RecoveryError> {
    check_inputs(oracle, basis, cfg)?;
    let batch = cfg.batch_size as u64;
    if cfg.restarts == 0 {
        let iters = (cfg.query_budget / batch) as usize;
        return recover_single(oracle, id, basis, cfg, None, iters);
    }

    let per_probe = cfg.restart_iters as u64 * batch;
    let probes: Vec<Search> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut s = Search::new(r, DVector::zeros(basis.k()), cfg.seed);
            s.run(oracle, id, basis, cfg, cfg.restart_iters, per_probe)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>, RecoveryError>>()?;

    let mut records = Vec::with_capacity(probes.iter().map(|p| p.records.len()).sum());
    let mut offset = 0u64;
    for p in &probes {
        records.extend(p.records.iter().map(|r| TrajectoryRecord {
            queries_used: r.queries_used + offset,
            ..*r
        }));
        offset += p.queries;
    }
    let probe_scores: Vec<f64> = probes.iter().map(|p| p.best).collect();
    let winner = argmax(&probe_scores).expect("at least one probe");
    let exhausted = probes.iter().any(|p| p.exhausted);
    let mut search = probes.into_iter().nth(winner).expect("winner exists");
    let probe_total = offset;

    if !exhausted {
        let remaining = cfg.query_budget - probe_total;
        let iters = (remaining / batch) as usize;
        let before = search.records.len();
        let queries_before = search.queries;
        search.run(oracle, id, basis, cfg, iters, remaining)?;
        records.extend(search.records[before..].iter().map(|r| TrajectoryRecord {
            queries_used: probe_total + (r.queries_used - queries_before),
            ..*r
        }));
    }
    let total = records.last().map_or(0, |r| r.queries_used);
    finish(basis, search, records, total, Some(winner), probe_scores)
}
