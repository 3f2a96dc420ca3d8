use facet_core::basis::{
    flatten_dataset, load_basis, pca_basis, save_basis, train, LossTerms, TrainConfig,
};
use facet_core::bench::faces::FaceGenerator;
use facet_core::image::{Geometry, Image};

fn small_faces(n: usize) -> Vec<Image> {
    FaceGenerator::new(Geometry::gray(8, 8), 3).dataset(n, 4)
}

#[test]
fn loss_settles_over_the_second_half_of_training() {
    let cfg = TrainConfig {
        k: 6,
        epochs: 60,
        terms: LossTerms::SL,
        ..TrainConfig::default()
    };
    let out = train(&small_faces(120), &cfg).unwrap();
    let l = &out.epoch_losses;
    assert_eq!(l.len(), 60);
    assert!(l[59] < l[0] / 5.0);
    let half = &l[30..];
    let first = half[..10].iter().sum::<f64>() / 10.0;
    let last = half[20..].iter().sum::<f64>() / 10.0;
    assert!(last <= first * 1.001, "{first} -> {last}");
}

#[test]
fn trained_reconstruction_approaches_pca() {
    let data = small_faces(200);
    let cfg = TrainConfig {
        k: 5,
        epochs: 300,
        terms: LossTerms::SL,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg).unwrap();
    let flat = flatten_dataset(&data);
    let ae = out.weights.reconstruction_mse(&flat).unwrap();
    let pca = pca_basis(&data, 5).unwrap().projection_mse(&flat);
    // never better than the optimum, and within a modest factor of it
    assert!(ae >= pca * (1.0 - 1e-9));
    assert!(ae < 3.0 * pca, "AE {ae} PCA {pca}");
}

#[test]
fn symmetry_term_yields_mirror_symmetric_columns() {
    let data = small_faces(150);
    let base = TrainConfig {
        k: 4,
        epochs: 150,
        ..TrainConfig::default()
    };
    let sl = train(&data, &TrainConfig { terms: LossTerms::SL, ..base.clone() }).unwrap();
    let sr = train(&data, &TrainConfig { terms: LossTerms::SR, ..base }).unwrap();
    let a_sl = sl.basis().unwrap().mean_column_asymmetry();
    let a_sr = sr.basis().unwrap().mean_column_asymmetry();
    assert!(a_sr < a_sl, "SR {a_sr} SL {a_sl}");
}

#[test]
fn generative_term_shrinks_decoder_columns() {
    let data = small_faces(100);
    let base = TrainConfig {
        k: 4,
        epochs: 80,
        ..TrainConfig::default()
    };
    let sl = train(&data, &TrainConfig { terms: LossTerms::SL, ..base.clone() }).unwrap();
    let gr = train(&data, &TrainConfig { terms: LossTerms::GR, ..base }).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let n_sl = mean(sl.basis().unwrap().column_norms());
    let n_gr = mean(gr.basis().unwrap().column_norms());
    assert!(n_gr < n_sl, "GR {n_gr} SL {n_sl}");
}

#[test]
fn trained_basis_survives_a_file_round_trip() {
    let cfg = TrainConfig {
        k: 3,
        epochs: 5,
        ..TrainConfig::default()
    };
    let basis = train(&small_faces(40), &cfg).unwrap().basis().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("faces.eigb");
    save_basis(&basis, &path).unwrap();
    let back = load_basis(&path).unwrap();
    assert_eq!(back.geometry(), basis.geometry());
    assert_eq!(back.k(), 3);
    // stored as f32
    for (a, b) in back.matrix().iter().zip(basis.matrix().iter()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}
