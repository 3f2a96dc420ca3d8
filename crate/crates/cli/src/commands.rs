use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use facet_core::basis::{load_basis, save_basis, train, EigenBasis, LossTerms, TrainConfig};
use facet_core::bench::faces::FaceGenerator;
use facet_core::bench::{
    ablation as run_ablation, evaluate_with_images, mean_face, verification_scores, verification_test,
    write_ablation_csv, EvalConfig, Target,
};
use facet_core::image::{read_dir_images, read_image, write_image, Geometry, Image};
use facet_core::oracle::{with_budget, Nonlinearity, RandomEmbedder, SimilarityOracle};
use facet_core::recovery::{recover_multistart, RecoveryConfig};
use facet_core::wire;

use crate::config::{sidecar_path, Settings};
use crate::error::CliError;
use crate::{
    AblationArgs, EmbedderArgs, EvaluateArgs, RecoverArgs, SearchArgs, ServeArgs, SynthArgs, TrainArgs,
};

const DEFAULT_EMBEDDING_DIM: usize = 128;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path.display(), e))
}

fn load_images(dir: &Path) -> Result<Vec<(String, Image)>, CliError> {
    let images = read_dir_images(dir).map_err(|e| CliError::io(dir.display(), e))?;
    if images.is_empty() {
        return Err(CliError::Usage(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    Ok(images)
}

fn open_basis(path: &Path) -> Result<EigenBasis, CliError> {
    load_basis(path).map_err(|e| match CliError::from(e) {
        CliError::Io(msg) => CliError::Io(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn open_image(path: &Path) -> Result<Image, CliError> {
    read_image(path).map_err(|e| CliError::io(path.display(), e))
}

fn image_name(name: &str, image: &Image) -> String {
    let ext = if image.channels() == 1 { "pgm" } else { "ppm" };
    format!("{name}.{ext}")
}

fn search_config(s: &mut Settings, a: &SearchArgs, restarts: usize) -> Result<RecoveryConfig, CliError> {
    let d = RecoveryConfig::default();
    Ok(RecoveryConfig {
        restarts,
        query_budget: s.get("budget", a.budget, Some(d.query_budget))?,
        restart_iters: s.get("restart_iters", a.restart_iters, Some(d.restart_iters))?,
        batch_size: s.get("batch", a.batch, Some(d.batch_size))?,
        accept: s.get("accept", a.accept, Some(d.accept))?,
        sigma: s.get("sigma", a.sigma, Some(d.sigma))?,
        seed: s.seed("seed", a.seed, d.seed)?,
    })
}

struct EmbedderSpec {
    dim: usize,
    nonlinearity: Nonlinearity,
    reference: Option<Image>,
}

impl EmbedderSpec {
    fn resolve(
        s: &mut Settings,
        dim: Option<usize>,
        nonlinearity: Option<Nonlinearity>,
        reference: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let dim = s.get("embedding_dim", dim, Some(DEFAULT_EMBEDDING_DIM))?;
        let nonlinearity = s.get("nonlinearity", nonlinearity, Some(Nonlinearity::default()))?;
        let reference = s.opt_path("reference", reference)?;
        Ok(Self {
            dim,
            nonlinearity,
            reference: reference.as_deref().map(open_image).transpose()?,
        })
    }

    fn from_args(s: &mut Settings, a: &EmbedderArgs) -> Result<Self, CliError> {
        Self::resolve(s, a.embedding_dim, a.nonlinearity, a.reference.clone())
    }

    fn build(&self, seed: u64, g: Geometry) -> Result<RandomEmbedder, CliError> {
        let e = RandomEmbedder::new(seed, g, self.dim, self.nonlinearity)?;
        Ok(match &self.reference {
            Some(r) => e.with_reference(r)?,
            None => e,
        })
    }
}

pub fn train_basis(a: TrainArgs, mut s: Settings) -> Result<(), CliError> {
    let d = TrainConfig::default();
    let data = s.path("data", a.data)?;
    let out = s.path("out", a.out)?;
    let symmetry = s.get("symmetry", a.no_symmetry.then_some(false), Some(d.terms.symmetry))?;
    let generative = s.get("generative", a.no_generative.then_some(false), Some(d.terms.generative))?;
    let cfg = TrainConfig {
        k: s.get("k", a.k, Some(d.k))?,
        step_size: s.get("step_size", a.step_size, Some(d.step_size))?,
        batch_size: s.get("batch_size", a.batch_size, Some(d.batch_size))?,
        epochs: s.get("epochs", a.epochs, Some(d.epochs))?,
        seed: s.seed("seed", a.seed, d.seed)?,
        terms: LossTerms {
            symmetry,
            generative,
        },
    };
    s.finish()?;
    cfg.validate()?;

    let images: Vec<Image> = load_images(&data)?.into_iter().map(|(_, img)| img).collect();
    tracing::info!(n = images.len(), k = cfg.k, terms = cfg.terms.label(), "training");
    let outcome = train(&images, &cfg)?;
    let basis = outcome.basis()?;
    save_basis(&basis, &out).map_err(|e| CliError::io(out.display(), e))?;

    let loss_path = sidecar_path(&out, "loss.csv");
    let mut w = create(&loss_path)?;
    writeln!(w, "epoch,loss")?;
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()?;
    s.write_sidecar(&out)?;
    println!(
        "wrote {} (k={}, {}, final loss {})",
        out.display(),
        basis.k(),
        cfg.terms.label(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

enum OracleSpec {
    Local(u64),
    Remote(String),
}

fn parse_oracle(spec: &str) -> Result<OracleSpec, CliError> {
    if let Some(seed) = spec.strip_prefix("local:") {
        return seed
            .parse()
            .map(OracleSpec::Local)
            .map_err(|_| CliError::Usage(format!("bad oracle seed in {spec:?}")));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(OracleSpec::Remote(spec.to_string()));
    }
    Err(CliError::Usage(format!("oracle must be local:SEED or an http URL, got {spec:?}")))
}

pub fn recover(a: RecoverArgs, mut s: Settings) -> Result<(), CliError> {
    let basis_path = s.path("basis", a.basis)?;
    let oracle_spec: String = s.get("oracle", a.oracle, None)?;
    let id: String = s.get("id", a.id, None)?;
    let restarts = s.get("restarts", a.restarts, Some(RecoveryConfig::default().restarts))?;
    let cfg = search_config(&mut s, &a.search, restarts)?;
    let out_image = s.path("out_image", a.out_image)?;
    let out_trajectory = s.opt_path("out_trajectory", a.out_trajectory)?;

    let spec = parse_oracle(&oracle_spec)?;
    let local = match spec {
        OracleSpec::Local(seed) => {
            let target = s.path("target", a.target)?;
            Some((seed, target, EmbedderSpec::from_args(&mut s, &a.embedder)?))
        }
        OracleSpec::Remote(_) => {
            let e = &a.embedder;
            if a.target.is_some() || e.embedding_dim.is_some() || e.nonlinearity.is_some() || e.reference.is_some() {
                return Err(CliError::Usage(
                    "--target, --embedding-dim, --nonlinearity and --reference need a local oracle".into(),
                ));
            }
            None
        }
    };
    s.finish()?;
    cfg.validate()?;

    let basis = open_basis(&basis_path)?;
    let oracle: Box<dyn SimilarityOracle> = match (&spec, local) {
        (OracleSpec::Local(_), Some((seed, target, embedder))) => {
            let o = embedder.build(seed, basis.geometry())?;
            o.enroll(&id, &open_image(&target)?)?;
            Box::new(o)
        }
        (OracleSpec::Remote(url), _) => Box::new(wire::connect(url)?),
        _ => unreachable!("local oracle settings resolved above"),
    };

    let result = recover_multistart(oracle.as_ref(), &id, &basis, &cfg)?;
    write_image(&result.image, &out_image).map_err(|e| CliError::io(out_image.display(), e))?;
    if let Some(path) = &out_trajectory {
        let mut w = create(path)?;
        result.trajectory.write_csv(&mut w)?;
        w.flush()?;
    }
    s.write_sidecar(&out_image)?;
    println!(
        "final_score={} best_score={} queries={} chosen_restart={}",
        result.final_score,
        result.best_score,
        result.total_queries,
        result.chosen_restart.map_or("none".to_string(), |r| r.to_string())
    );
    if result.exhausted {
        return Err(CliError::Budget(format!(
            "oracle budget ran out after {} queries; partial result written to {}",
            result.total_queries,
            out_image.display()
        )));
    }
    Ok(())
}

struct Bench {
    targets: Vec<Target>,
    attacked: RandomEmbedder,
    critic: RandomEmbedder,
    cfg: EvalConfig,
}

fn bench_setup(
    s: &mut Settings,
    targets: &Path,
    g: Geometry,
    embedder: &EmbedderSpec,
    cfg: EvalConfig,
) -> Result<Bench, CliError> {
    s.finish()?;
    cfg.recovery.validate()?;
    let targets: Vec<Target> = load_images(targets)?
        .into_iter()
        .map(|(name, img)| Target::new(name, img))
        .collect();
    Ok(Bench {
        targets,
        attacked: embedder.build(cfg.attacked_seed, g)?,
        critic: embedder.build(cfg.critic_seed, g)?,
        cfg,
    })
}

pub fn evaluate(a: EvaluateArgs, mut s: Settings) -> Result<(), CliError> {
    let targets = s.path("targets", a.targets)?;
    let basis_path = s.path("basis", a.basis)?;
    let attacked_seed = s.get("attacked_seed", a.attacked_seed, Some(1))?;
    let critic_seed = s.get("critic_seed", a.critic_seed, Some(2))?;
    let restarts = s.get("restarts", a.restarts, Some(RecoveryConfig::default().restarts))?;
    let recovery = search_config(&mut s, &a.search, restarts)?;
    let embedder = EmbedderSpec::from_args(&mut s, &a.embedder)?;
    let out = s.path("out", a.out)?;
    let out_images = s.opt_path("out_images", a.out_images)?;
    if attacked_seed == critic_seed {
        tracing::warn!("attacked and critic seeds are equal; the critic is not independent");
    }

    let basis = open_basis(&basis_path)?;
    let label = basis_path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let cfg = EvalConfig {
        recovery,
        attacked_seed,
        critic_seed,
        basis_label: label,
    };
    let bench = bench_setup(&mut s, &targets, basis.geometry(), &embedder, cfg)?;
    let (report, images) = evaluate_with_images(&bench.targets, &bench.attacked, &bench.critic, &basis, &bench.cfg)?;

    let mut w = create(&out)?;
    report.write_rows_csv(&mut w)?;
    w.flush()?;

    let summary_path = sidecar_path(&out, "summary.csv");
    let mut w = create(&summary_path)?;
    report.write_summary_csv(&mut w)?;
    if report.rows.len() >= 2 {
        let ids: Vec<String> = report.rows.iter().map(|r| r.target.clone()).collect();
        let (genuine, impostor) = verification_scores(&images, &ids, &bench.critic)?;
        let v = verification_test(&genuine, &impostor)?;
        writeln!(w, "verification_accuracy,{}", v.accuracy)?;
        writeln!(w, "verification_threshold,{}", v.threshold)?;
    }
    w.flush()?;

    if let Some(dir) = &out_images {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        for (row, img) in report.rows.iter().zip(&images) {
            let path = dir.join(image_name(&row.target, img));
            write_image(img, &path).map_err(|e| CliError::io(path.display(), e))?;
        }
    }
    s.write_sidecar(&out)?;
    println!(
        "targets={} mean_attacked={} mean_critic={} mean_queries={}",
        report.n_targets, report.mean_attacked, report.mean_critic, report.mean_queries
    );
    Ok(())
}

fn parse_bases(spec: &str) -> Result<Vec<(LossTerms, PathBuf)>, CliError> {
    let bases = spec
        .split(',')
        .map(|item| {
            let (loss, path) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected LOSS=FILE, got {item:?}")))?;
            Ok((loss.trim().parse::<LossTerms>()?, PathBuf::from(path.trim())))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for (i, (loss, _)) in bases.iter().enumerate() {
        if bases[..i].iter().any(|(l, _)| l == loss) {
            return Err(CliError::Usage(format!("basis {} given twice", loss.label())));
        }
    }
    Ok(bases)
}

fn parse_restarts(spec: &str) -> Result<Vec<usize>, CliError> {
    spec.split(',')
        .map(|r| {
            r.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad restart count {r:?}")))
        })
        .collect()
}

pub fn ablation(a: AblationArgs, mut s: Settings) -> Result<(), CliError> {
    let targets = s.path("targets", a.targets)?;
    let bases_spec: String = s.get("bases", a.bases, None)?;
    let restarts_spec: String = s.get("restarts", a.restarts, Some("0,10".into()))?;
    let attacked_seed = s.get("attacked_seed", a.attacked_seed, Some(1))?;
    let critic_seed = s.get("critic_seed", a.critic_seed, Some(2))?;
    let restarts = parse_restarts(&restarts_spec)?;
    let max_restarts = restarts.iter().copied().max().unwrap_or(0);
    let recovery = search_config(&mut s, &a.search, max_restarts)?;
    let embedder = EmbedderSpec::from_args(&mut s, &a.embedder)?;
    let out = s.path("out", a.out)?;
    let bases = parse_bases(&bases_spec)?;

    let loaded = bases
        .iter()
        .map(|(loss, path)| Ok((*loss, open_basis(path)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let g = loaded[0].1.geometry();
    if let Some((loss, b)) = loaded.iter().find(|(_, b)| b.geometry() != g) {
        return Err(CliError::Usage(format!(
            "basis {} has geometry {}, expected {g}",
            loss.label(),
            b.geometry()
        )));
    }
    let cfg = EvalConfig {
        recovery,
        attacked_seed,
        critic_seed,
        basis_label: String::new(),
    };
    let bench = bench_setup(&mut s, &targets, g, &embedder, cfg)?;
    let variants: Vec<(LossTerms, &EigenBasis)> = loaded.iter().map(|(l, b)| (*l, b)).collect();
    let cells = run_ablation(&bench.targets, &variants, &restarts, &bench.attacked, &bench.critic, &bench.cfg)?;

    let mut w = create(&out)?;
    write_ablation_csv(&cells, &mut w)?;
    w.flush()?;
    s.write_sidecar(&out)?;
    for c in &cells {
        println!(
            "{} restarts={} mean_attacked={} mean_critic={}",
            c.loss.label(),
            c.restarts,
            c.report.mean_attacked,
            c.report.mean_critic
        );
    }
    Ok(())
}

pub fn serve_oracle(a: ServeArgs, mut s: Settings) -> Result<(), CliError> {
    let g: Geometry = s.get("basis_geometry", a.basis_geometry, None)?;
    let kind: String = s.get("embedder", a.embedder, Some("random".into()))?;
    if kind != "random" {
        return Err(CliError::Usage(format!("unknown embedder {kind:?} (random)")));
    }
    let seed = s.seed("seed", a.seed, 0)?;
    let embedder = EmbedderSpec::resolve(&mut s, a.embedding_dim, a.nonlinearity, a.reference)?;
    let budget: Option<u64> = s.opt("budget", a.budget)?;
    let bind: String = s.get("bind", a.bind, Some("127.0.0.1:8080".into()))?;
    let enroll_flag = (!a.enroll.is_empty()).then(|| a.enroll.join(","));
    let enroll: Option<String> = s.opt("enroll", enroll_flag)?;
    let targets = s.opt_path("targets", a.targets)?;
    s.finish()?;

    let oracle = embedder.build(seed, g)?;
    let mut n = 0;
    for item in enroll.iter().flat_map(|e| e.split(',')) {
        let (id, path) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected ID=FILE, got {item:?}")))?;
        oracle.enroll(id.trim(), &open_image(Path::new(path.trim()))?)?;
        n += 1;
    }
    if let Some(dir) = &targets {
        for (name, img) in load_images(dir)? {
            oracle.enroll(&name, &img)?;
            n += 1;
        }
    }
    if n == 0 {
        tracing::warn!("no identities enrolled; every score request will fail");
    }
    let shared: Arc<dyn SimilarityOracle> = match budget {
        Some(limit) => Arc::new(with_budget(oracle, limit)),
        None => Arc::new(oracle),
    };
    let server = wire::serve(shared, &bind)?;
    println!("{}", server.url());
    std::io::stdout().flush()?;
    eprintln!("serving {n} identities at {g}; stop with Ctrl-C");
    server.wait()?;
    Ok(())
}

pub fn synth_faces(a: SynthArgs, mut s: Settings) -> Result<(), CliError> {
    let out = s.path("out", a.out)?;
    let n: usize = s.get("n", a.n, Some(100))?;
    let g: Geometry = s.get("geometry", a.geometry, Some(Geometry::gray(32, 32)))?;
    let seed = s.seed("seed", a.seed, 0)?;
    let face_seed = s.get("face_seed", a.face_seed, Some(0))?;
    let mean = s.opt_path("mean", a.mean)?;
    s.finish()?;
    if n == 0 {
        return Err(CliError::Usage("n must be positive".into()));
    }

    let faces = FaceGenerator::new(g, face_seed).dataset(n, seed);
    fs::create_dir_all(&out).map_err(|e| CliError::io(out.display(), e))?;
    for (i, img) in faces.iter().enumerate() {
        let path = out.join(image_name(&format!("face{i:04}"), img));
        write_image(img, &path).map_err(|e| CliError::io(path.display(), e))?;
    }
    if let Some(path) = &mean {
        write_image(&mean_face(&faces)?, path).map_err(|e| CliError::io(path.display(), e))?;
    }
    s.write_sidecar(&out)?;
    println!("wrote {n} faces ({g}) to {}", out.display());
    Ok(())
}
