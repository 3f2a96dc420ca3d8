use facet_core::basis::pca_basis;
use facet_core::bench::faces::FaceGenerator;
use facet_core::bench::{
    evaluate, mean_face, read_rows_csv, verification_scores, verification_test, EvalConfig,
    EvalReport, Target,
};
use facet_core::image::Geometry;
use facet_core::oracle::{with_budget, Nonlinearity, RandomEmbedder, SimilarityOracle};
use facet_core::recovery::{recover_multistart, RecoveryConfig};

fn setup(n: usize) -> (Geometry, Vec<Target>, facet_core::EigenBasis) {
    let g = Geometry::gray(8, 8);
    let gen = FaceGenerator::new(g, 2);
    let basis = pca_basis(&gen.dataset(150, 1), 8).unwrap().into_basis().unwrap();
    let targets = gen
        .dataset(n, 9)
        .into_iter()
        .enumerate()
        .map(|(i, img)| Target::new(format!("face{i}"), img))
        .collect();
    (g, targets, basis)
}

fn cfg(budget: u64) -> EvalConfig {
    EvalConfig {
        recovery: RecoveryConfig {
            batch_size: 8,
            query_budget: budget,
            restarts: 2,
            restart_iters: 10,
            ..RecoveryConfig::default()
        },
        attacked_seed: 1,
        critic_seed: 2,
        basis_label: "PCA".into(),
    }
}

#[test]
fn identical_critic_reproduces_attacked_scores() {
    let (g, targets, basis) = setup(5);
    let a = RandomEmbedder::new(1, g, 32, Nonlinearity::default()).unwrap();
    let report = evaluate(&targets, &a, &a, &basis, &cfg(400)).unwrap();
    assert_eq!(report.n_targets, 5);
    assert_eq!(report.rows.len(), 5);
    assert_eq!(report.mean_critic, report.mean_attacked);
    for row in &report.rows {
        assert!((-1.0..=1.0).contains(&row.attacked));
        assert_eq!(row.queries, 400);
    }
}

#[test]
fn critic_scoring_does_not_touch_the_attack_budget() {
    let (g, targets, basis) = setup(3);
    let attacked = with_budget(RandomEmbedder::new(1, g, 32, Nonlinearity::default()).unwrap(), 3 * 400);
    let critic = RandomEmbedder::new(2, g, 32, Nonlinearity::default()).unwrap();
    let report = evaluate(&targets, &attacked, &critic, &basis, &cfg(400)).unwrap();
    assert_eq!(attacked.queries_used(), 1200);
    assert_eq!(critic.queries_used(), 3);
    assert_eq!(report.mean_queries, 400.0);
}

#[test]
fn in_span_targets_reach_near_perfect_similarity() {
    let (g, targets, basis) = setup(4);
    let linear = RandomEmbedder::new(3, g, 32, Nonlinearity::Identity).unwrap();
    let in_span: Vec<Target> = targets
        .iter()
        .map(|t| {
            let e = basis.matrix();
            let x = nalgebra::DVector::from_vec(t.image.flatten());
            // orthonormal PCA columns: projection coefficients are Eᵀx
            let c = e.transpose() * x;
            Target::new(t.name.clone(), basis.synthesize(&c).unwrap())
        })
        .collect();
    let report = evaluate(&in_span, &linear, &linear, &basis, &cfg(20_000)).unwrap();
    for row in &report.rows {
        assert!(row.attacked >= 0.99, "{row:?}");
    }
}

#[test]
fn report_rows_regenerate_the_aggregates() {
    let (g, targets, basis) = setup(4);
    let a = RandomEmbedder::new(1, g, 32, Nonlinearity::default()).unwrap();
    let c = RandomEmbedder::new(2, g, 32, Nonlinearity::default()).unwrap();
    let report = evaluate(&targets, &a, &c, &basis, &cfg(200)).unwrap();
    let mut buf = Vec::new();
    report.write_rows_csv(&mut buf).unwrap();
    let again = EvalReport::from_rows(report.fingerprint.clone(), read_rows_csv(&buf[..]).unwrap());
    assert_eq!(again, report);
    let names: Vec<&str> = report.rows.iter().map(|r| r.target.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn reconstructions_verify_against_their_own_identity() {
    let g = Geometry::gray(12, 12);
    let gen = FaceGenerator::new(g, 2);
    let train_set = gen.dataset(200, 1);
    let basis = pca_basis(&train_set, 10).unwrap().into_basis().unwrap();
    let mu = mean_face(&train_set).unwrap();
    let attacked = RandomEmbedder::new(5, g, 64, Nonlinearity::default()).unwrap().with_reference(&mu).unwrap();
    let critic = RandomEmbedder::new(6, g, 64, Nonlinearity::default()).unwrap().with_reference(&mu).unwrap();
    let faces = gen.dataset(12, 3);
    let ids: Vec<String> = (0..faces.len()).map(|i| format!("p{i}")).collect();
    let mut recovered = Vec::new();
    for (id, face) in ids.iter().zip(&faces) {
        attacked.enroll(id, face).unwrap();
        critic.enroll(id, face).unwrap();
        let cfg = RecoveryConfig { query_budget: 20_000, ..RecoveryConfig::default() };
        recovered.push(recover_multistart(&attacked, id, &basis, &cfg).unwrap().image);
    }
    let (genuine, impostor) = verification_scores(&recovered, &ids, &critic).unwrap();
    let v = verification_test(&genuine, &impostor).unwrap();
    assert!(v.accuracy >= 0.75, "{v:?}");
}
