//! Evaluation harness: attacked-vs-critic similarity, ablation grid and a
//! verification-style accuracy test.
//!
//! The attacked oracle is the only attack surface. The critic scores each
//! reconstruction once and is never budget-limited.

pub mod faces;

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{EigenBasis, LossTerms};
use crate::image::{Geometry, Image};
use crate::oracle::{OracleError, SimilarityOracle};
use crate::recovery::{derive_seed, recover_multistart, RecoveryConfig, RecoveryError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no targets to evaluate")]
    Empty,
    #[error("critic geometry {critic} does not match attacked geometry {attacked}")]
    Geometry { attacked: Geometry, critic: Geometry },
    #[error("mismatched inputs: {0}")]
    Input(String),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A named target image; the name doubles as the enrolled identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub name: String,
    pub image: Image,
}

impl Target {
    pub fn new(name: impl Into<String>, image: Image) -> Self {
        Self {
            name: name.into(),
            image,
        }
    }
}

/// Pixelwise mean of equally shaped images.
pub fn mean_face(images: &[Image]) -> Result<Image, BenchError> {
    let first = images.first().ok_or(BenchError::Empty)?;
    let g = first.geometry();
    let mut acc = vec![0.0; g.len()];
    for img in images {
        if img.geometry() != g {
            return Err(BenchError::Input(format!(
                "image geometry {} differs from {g}",
                img.geometry()
            )));
        }
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Image::from_interleaved(g, acc).expect("same geometry"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub recovery: RecoveryConfig,
    /// Recorded in the fingerprint only; the oracles are built by the caller.
    pub attacked_seed: u64,
    pub critic_seed: u64,
    /// Free-form label for the basis variant, e.g. `SR+GR`.
    pub basis_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub attacked_seed: u64,
    pub critic_seed: u64,
    pub seed: u64,
    pub k: usize,
    pub basis: String,
    pub accept: String,
    pub restarts: usize,
    pub restart_iters: usize,
    pub batch_size: usize,
    pub query_budget: u64,
    pub sigma: f64,
}

impl Fingerprint {
    pub fn new(cfg: &EvalConfig, k: usize) -> Self {
        let r = &cfg.recovery;
        Self {
            attacked_seed: cfg.attacked_seed,
            critic_seed: cfg.critic_seed,
            seed: r.seed,
            k,
            basis: cfg.basis_label.clone(),
            accept: r.accept.to_string(),
            restarts: r.restarts,
            restart_iters: r.restart_iters,
            batch_size: r.batch_size,
            query_budget: r.query_budget,
            sigma: r.sigma,
        }
    }
}

/// One evaluated target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: String,
    /// Attacked-oracle score of the final reconstruction.
    pub attacked: f64,
    pub critic: f64,
    pub best_score: f64,
    pub queries: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fingerprint: Fingerprint,
    /// Sorted by target name.
    pub rows: Vec<TargetRow>,
    pub n_targets: usize,
    pub mean_attacked: f64,
    pub std_attacked: f64,
    pub mean_critic: f64,
    pub std_critic: f64,
    pub mean_queries: f64,
}

/// Mean and population standard deviation.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    /// Aggregates are a pure function of the rows, so a report read back
    /// from CSV has exactly the same means and deviations.
    pub fn from_rows(fingerprint: Fingerprint, mut rows: Vec<TargetRow>) -> Self {
        rows.sort_by(|a, b| a.target.cmp(&b.target));
        let (mean_attacked, std_attacked) = mean_std(rows.iter().map(|r| r.attacked));
        let (mean_critic, std_critic) = mean_std(rows.iter().map(|r| r.critic));
        let (mean_queries, _) = mean_std(rows.iter().map(|r| r.queries as f64));
        Self {
            fingerprint,
            n_targets: rows.len(),
            rows,
            mean_attacked,
            std_attacked,
            mean_critic,
            std_critic,
            mean_queries,
        }
    }

    /// Per-target rows with header `target,attacked,critic,best_score,queries`.
    pub fn write_rows_csv(&self, w: impl Write) -> Result<(), BenchError> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Fingerprint and aggregates as `key,value` lines.
    pub fn write_summary_csv(&self, mut w: impl Write) -> Result<(), BenchError> {
        let f = &self.fingerprint;
        writeln!(w, "key,value")?;
        let pairs: [(&str, String); 18] = [
            ("n_targets", self.n_targets.to_string()),
            ("mean_attacked", self.mean_attacked.to_string()),
            ("std_attacked", self.std_attacked.to_string()),
            ("mean_critic", self.mean_critic.to_string()),
            ("std_critic", self.std_critic.to_string()),
            ("mean_queries", self.mean_queries.to_string()),
            ("attacked_seed", f.attacked_seed.to_string()),
            ("critic_seed", f.critic_seed.to_string()),
            ("seed", f.seed.to_string()),
            ("k", f.k.to_string()),
            ("basis", f.basis.clone()),
            ("accept", f.accept.clone()),
            ("restarts", f.restarts.to_string()),
            ("restart_iters", f.restart_iters.to_string()),
            ("batch_size", f.batch_size.to_string()),
            ("query_budget", f.query_budget.to_string()),
            ("sigma", f.sigma.to_string()),
            ("rows", self.rows.len().to_string()),
        ];
        for (k, v) in pairs {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    }
}

pub fn read_rows_csv(r: impl Read) -> Result<Vec<TargetRow>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr.deserialize().collect::<Result<Vec<TargetRow>, _>>()?;
    Ok(rows)
}

/// Recovers every target against `attacked` and scores the result under
/// both oracles.
///
/// Targets are processed in name order; target `i` uses the recovery seed
/// `derive_seed(cfg.recovery.seed, i)`, so the same target list yields the
/// same seeds in every ablation cell. Evaluations run in parallel.
pub fn evaluate(
    targets: &[Target],
    attacked: &dyn SimilarityOracle,
    critic: &dyn SimilarityOracle,
    basis: &EigenBasis,
    cfg: &EvalConfig,
) -> Result<EvalReport, BenchError> {
    evaluate_with_images(targets, attacked, critic, basis, cfg).map(|(report, _)| report)
}

/// [`evaluate`], also returning the reconstructions in row order.
pub fn evaluate_with_images(
    targets: &[Target],
    attacked: &dyn SimilarityOracle,
    critic: &dyn SimilarityOracle,
    basis: &EigenBasis,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Image>), BenchError> {
    if targets.is_empty() {
        return Err(BenchError::Empty);
    }
    if attacked.geometry() != critic.geometry() {
        return Err(BenchError::Geometry {
            attacked: attacked.geometry(),
            critic: critic.geometry(),
        });
    }
    cfg.recovery.validate()?;
    let mut order: Vec<&Target> = targets.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    if order.windows(2).any(|w| w[0].name == w[1].name) {
        return Err(BenchError::Input("duplicate target names".into()));
    }

    let results = order
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            attacked.enroll(&t.name, &t.image)?;
            critic.enroll(&t.name, &t.image)?;
            let rcfg = RecoveryConfig {
                seed: derive_seed(cfg.recovery.seed, i),
                ..cfg.recovery.clone()
            };
            let result = recover_multistart(attacked, &t.name, basis, &rcfg)?;
            // final_score is the attacked score of result.image, so no
            // extra attacked query is spent on it
            let critic_score = critic.score_batch(std::slice::from_ref(&result.image), &t.name)?[0];
            tracing::debug!(target = %t.name, attacked = result.final_score, critic = critic_score, "evaluated");
            let row = TargetRow {
                target: t.name.clone(),
                attacked: result.final_score,
                critic: critic_score,
                best_score: result.best_score,
                queries: result.total_queries,
            };
            Ok((row, result.image))
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let (rows, images): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((EvalReport::from_rows(Fingerprint::new(cfg, basis.k()), rows), images))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub loss: LossTerms,
    pub restarts: usize,
    pub report: EvalReport,
}

/// Runs [`evaluate`] for every (basis variant, restart setting) pair over
/// the same targets, oracles and seeds.
pub fn ablation(
    targets: &[Target],
    variants: &[(LossTerms, &EigenBasis)],
    restarts: &[usize],
    attacked: &dyn SimilarityOracle,
    critic: &dyn SimilarityOracle,
    cfg: &EvalConfig,
) -> Result<Vec<AblationCell>, BenchError> {
    let mut cells = Vec::with_capacity(variants.len() * restarts.len());
    for &(loss, basis) in variants {
        for &r in restarts {
            let cell_cfg = EvalConfig {
                recovery: RecoveryConfig {
                    restarts: r,
                    ..cfg.recovery.clone()
                },
                basis_label: loss.label().to_string(),
                ..cfg.clone()
            };
            let report = evaluate(targets, attacked, critic, basis, &cell_cfg)?;
            cells.push(AblationCell {
                loss,
                restarts: r,
                report,
            });
        }
    }
    Ok(cells)
}

pub const ABLATION_HEADER: &str =
    "loss,restarts,n_targets,mean_attacked,std_attacked,mean_critic,std_critic,mean_queries";

pub fn write_ablation_csv(cells: &[AblationCell], mut w: impl Write) -> Result<(), BenchError> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for c in cells {
        let r = &c.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            c.loss.label(),
            c.restarts,
            r.n_targets,
            r.mean_attacked,
            r.std_attacked,
            r.mean_critic,
            r.std_critic,
            r.mean_queries
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub accuracy: f64,
    /// Pairs scoring at or above this are declared "same identity".
    pub threshold: f64,
}

/// Genuine and impostor scores for reconstructions against enrolled
/// identities: genuine pairs `(recovered_i, id_i)`, impostor pairs
/// `(recovered_i, id_{i+1 mod n})`.
pub fn verification_scores(
    recovered: &[Image],
    ids: &[String],
    oracle: &dyn SimilarityOracle,
) -> Result<(Vec<f64>, Vec<f64>), BenchError> {
    if recovered.len() != ids.len() {
        return Err(BenchError::Input(format!(
            "{} reconstructions for {} identities",
            recovered.len(),
            ids.len()
        )));
    }
    if ids.len() < 2 {
        return Err(BenchError::Input("need at least two identities".into()));
    }
    let n = ids.len();
    let mut genuine = Vec::with_capacity(n);
    let mut impostor = Vec::with_capacity(n);
    for (i, img) in recovered.iter().enumerate() {
        let one = std::slice::from_ref(img);
        genuine.push(oracle.score_batch(one, &ids[i])?[0]);
        impostor.push(oracle.score_batch(one, &ids[(i + 1) % n])?[0]);
    }
    Ok((genuine, impostor))
}

/// Best accuracy `(TP + TN) / (P + N)` over every threshold that splits the
/// pooled scores differently. Thresholds are midpoints between adjacent
/// distinct scores, plus one below and one above all scores; ties keep the
/// lowest threshold.
pub fn verification_test(genuine: &[f64], impostor: &[f64]) -> Result<Verification, BenchError> {
    if genuine.is_empty() && impostor.is_empty() {
        return Err(BenchError::Empty);
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(BenchError::Input("NaN score".into()));
    }
    let mut pooled: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pooled.len() as f64;

    // threshold below everything: all pairs declared genuine
    let mut correct = genuine.len() as i64;
    let mut best = Verification {
        accuracy: correct as f64 / total,
        threshold: pooled[0].0 - 1.0,
    };
    let mut i = 0;
    while i < pooled.len() {
        let value = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == value {
            correct += if pooled[i].1 { -1 } else { 1 };
            i += 1;
        }
        let threshold = match pooled.get(i) {
            Some(&(next, _)) => 0.5 * (value + next),
            None => value + 1.0,
        };
        let accuracy = correct as f64 / total;
        if accuracy > best.accuracy {
            best = Verification {
                accuracy,
                threshold,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::make_random_embedder;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n²) evaluation of the accuracy at every candidate threshold.
    fn brute_force_accuracy(genuine: &[f64], impostor: &[f64]) -> f64 {
        let mut cands: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
        cands.push(f64::INFINITY);
        cands
            .iter()
            .map(|&t| {
                let tp = genuine.iter().filter(|&&s| s >= t).count();
                let tn = impostor.iter().filter(|&&s| s < t).count();
                (tp + tn) as f64 / (genuine.len() + impostor.len()) as f64
            })
            .fold(f64::MIN, f64::max)
    }

    #[test]
    fn separated_scores_give_full_accuracy() {
        let v = verification_test(&[1.0; 5], &[0.0; 5]).unwrap();
        assert_eq!(v.accuracy, 1.0);
        assert_eq!(v.threshold, 0.5);
    }

    #[test]
    fn sweep_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let g: Vec<f64> = (0..rng.random_range(0..12))
                .map(|_| (rng.random_range(-5..5) as f64) / 4.0)
                .collect();
            let i: Vec<f64> = (0..rng.random_range(1..12))
                .map(|_| (rng.random_range(-5..5) as f64) / 4.0)
                .collect();
            let v = verification_test(&g, &i).unwrap();
            assert_eq!(v.accuracy, brute_force_accuracy(&g, &i));
        }
    }

    #[test]
    fn accuracy_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<f64> = (0..50).map(|_| rng.random_range(-0.5..1.0)).collect();
        let i: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..0.5)).collect();
        let base = verification_test(&g, &i).unwrap().accuracy;
        let f = |v: &f64| (3.0 * v).exp() + v.powi(3);
        let gt: Vec<f64> = g.iter().map(f).collect();
        let it: Vec<f64> = i.iter().map(f).collect();
        assert_eq!(verification_test(&gt, &it).unwrap().accuracy, base);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pooled: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
            pooled.shuffle(&mut rng);
            let acc = verification_test(&pooled[..100], &pooled[100..]).unwrap().accuracy;
            assert!((acc - 0.5).abs() <= 0.1, "seed {seed}: {acc}");
        }
    }

    #[test]
    fn mean_face_averages_pixels() {
        let g = Geometry::gray(2, 1);
        let a = Image::from_interleaved(g, vec![0.0, 1.0]).unwrap();
        let b = Image::from_interleaved(g, vec![0.5, 0.0]).unwrap();
        assert_eq!(mean_face(&[a, b]).unwrap().data(), &[0.25, 0.5]);
        assert!(matches!(mean_face(&[]), Err(BenchError::Empty)));
    }

    #[test]
    fn report_round_trips_through_csv() {
        let rows = vec![
            TargetRow { target: "b".into(), attacked: 0.1 + 0.2, critic: -1.0 / 3.0, best_score: 0.3, queries: 160 },
            TargetRow { target: "a".into(), attacked: 0.7, critic: 2.0f64.sqrt() / 2.0, best_score: 0.75, queries: 320 },
        ];
        let cfg = EvalConfig {
            recovery: RecoveryConfig::default(),
            attacked_seed: 1,
            critic_seed: 2,
            basis_label: "SL".into(),
        };
        let report = EvalReport::from_rows(Fingerprint::new(&cfg, 4), rows);
        assert_eq!(report.rows[0].target, "a");
        let mut buf = Vec::new();
        report.write_rows_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"target,attacked,critic,best_score,queries\n"));
        let back = EvalReport::from_rows(report.fingerprint.clone(), read_rows_csv(&buf[..]).unwrap());
        assert_eq!(back, report);
    }

    #[test]
    fn evaluate_rejects_bad_inputs() {
        let g = Geometry::gray(4, 4);
        let a = make_random_embedder(1, g, 8).unwrap();
        let c = make_random_embedder(2, Geometry::gray(4, 5), 8).unwrap();
        let basis = EigenBasis::new(g, nalgebra::DMatrix::identity(16, 2)).unwrap();
        let cfg = EvalConfig {
            recovery: RecoveryConfig { restarts: 0, query_budget: 32, ..Default::default() },
            attacked_seed: 1,
            critic_seed: 2,
            basis_label: "SL".into(),
        };
        assert!(matches!(evaluate(&[], &a, &a, &basis, &cfg), Err(BenchError::Empty)));
        let t = [Target::new("x", Image::zeros(g))];
        assert!(matches!(evaluate(&t, &a, &c, &basis, &cfg), Err(BenchError::Geometry { .. })));
    }
}
