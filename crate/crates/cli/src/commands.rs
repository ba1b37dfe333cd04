use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ctnet_core::attention::{Mechanism, Operator};
use ctnet_core::dataset::{synth_dataset, write_dataset_dir, ShapeKind, Split, SynthSpec};
use ctnet_core::network::{
    count_costs, evaluate, saliency as saliency_map, softmax, Batch, Checkpoint, Metrics, Model, Trainer,
};
use ctnet_core::pointcloud::{load, write_xyz_scored, Format, PointCloud};
use ctnet_core::verify::{gradient_suite, Scope};
use ctnet_core::Error;

use crate::config::{DataSource, RunConfig};
use crate::error::{io_error, CliError};
use crate::{BenchArgs, ClassifyArgs, EvalArgs, GradcheckArgs, SaliencyArgs, SynthArgs, TrainArgs};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

#[derive(Serialize)]
struct Report<'a> {
    class_names: &'a [String],
    macc: f64,
    oa: f64,
    per_class: Vec<Option<f64>>,
    confusion: &'a [Vec<usize>],
}

fn report<'a>(m: &'a Metrics, names: &'a [String]) -> Report<'a> {
    Report {
        class_names: names,
        macc: m.macc(),
        oa: m.oa(),
        per_class: m.per_class(),
        confusion: &m.confusion,
    }
}

fn print_metrics(m: &Metrics, names: &[String]) {
    outln!("mAcc {:.4}  OA {:.4}  ({} / {} correct)", m.macc(), m.oa(), m.correct(), m.total());
    let width = names.iter().map(String::len).max().unwrap_or(0).max(5);
    outln!("confusion (rows = true, columns = predicted):");
    for (name, row) in names.iter().zip(&m.confusion) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        outln!("  {name:>width$} {}", cells.join(""));
    }
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.flags.resolve()?;
    if let Some(out) = a.out {
        cfg.out = out;
    }
    if let Some(path) = a.data {
        cfg.data = DataSource::Manifest { path };
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    cfg.train.validate()?;
    let (train, test) = cfg.load_data()?;
    if train.is_empty() {
        return Err(CliError::Data("training set is empty".into()));
    }
    if cfg.train.batch_size > train.len() {
        return Err(CliError::Usage(format!(
            "batch size {} exceeds the {} training clouds",
            cfg.train.batch_size,
            train.len()
        )));
    }
    cfg.model.classes = train.num_classes();
    cfg.model.validate()?;

    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    write_json(&cfg.out.join("run_config.json"), &cfg)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != cfg.model {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint architecture differs from the requested configuration",
                    path.display()
                )));
            }
            let mut t = ck.trainer()?;
            t.config = cfg.train.clone();
            t
        }
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.seed)?, cfg.train.clone())?,
    };
    let log_path = cfg.out.join("log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    writeln!(log, "{}", ctnet_core::network::EpochLog::CSV_HEADER).map_err(|e| io_error(&log_path, e))?;
    if !a.quiet {
        outln!(
            "training {} parameters on {} clouds ({} test), {} epochs",
            trainer.model.num_params(),
            train.len(),
            test.len(),
            cfg.train.epochs
        );
        outln!("{}", ctnet_core::network::EpochLog::CSV_HEADER);
    }
    let quiet = a.quiet;
    let result = trainer.run(&train, Some(&test), |row, _| {
        writeln!(log, "{}", row.csv_row())
            .and_then(|_| log.flush())
            .map_err(|source| Error::Io {
                path: log_path.clone(),
                source,
            })?;
        if !quiet {
            outln!("{}", row.csv_row());
        }
        Ok(())
    });
    result?;

    let ck_path = cfg.out.join("checkpoint.json");
    Checkpoint::from_trainer(&trainer, &train.class_names).save(&ck_path)?;
    let metrics = evaluate(&trainer.model, &test, cfg.train.eval_batch)?;
    write_json(&cfg.out.join("metrics.json"), &report(&metrics, &test.class_names))?;
    if !quiet {
        print_metrics(&metrics, &test.class_names);
        outln!("run directory: {}", cfg.out.display());
    }
    Ok(())
}

fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join("run_config.json");
    p.exists().then_some(p)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let mut cfg = match a.config.clone().or_else(|| sibling_config(&a.checkpoint)) {
        Some(path) => RunConfig::read(&path)?,
        None if a.data.is_some() => RunConfig::defaults(ctnet_core::network::Preset::Paper, model.config.points),
        None => {
            return Err(CliError::Usage(
                "no dataset: pass --data MANIFEST or --config RUN_CONFIG".into(),
            ))
        }
    };
    if let Some(path) = a.data {
        cfg.data = DataSource::Manifest { path };
    }
    cfg.model = model.config.clone();
    let (_, test) = cfg.load_data()?;
    if test.num_classes() != model.config.classes {
        return Err(CliError::Data(format!(
            "dataset has {} classes, checkpoint expects {}",
            test.num_classes(),
            model.config.classes
        )));
    }
    let metrics = evaluate(&model, &test, ck.train.eval_batch)?;
    print_metrics(&metrics, &test.class_names);
    if let Some(path) = a.json {
        write_json(&path, &report(&metrics, &test.class_names))?;
    }
    Ok(())
}

/// Loads, normalizes and resamples one cloud for `model`.
fn load_cloud(path: &Path, points: usize, seed: u64) -> Result<PointCloud, CliError> {
    let format = Format::from_path(path).unwrap_or(Format::Xyz);
    let cloud = load(path, format)?.normalize();
    Ok(if cloud.len() == points {
        cloud
    } else {
        cloud.resample(points, seed)?
    })
}

fn class_name(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("class {i}"))
}

pub fn classify(a: ClassifyArgs) -> Result<(), CliError> {
    if a.top_k == 0 {
        return Err(CliError::Usage("--top-k must be positive".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let cloud = load_cloud(&a.cloud, model.config.points, a.seed)?;
    let logits = model.predict_logits(&Batch::new([&cloud])?)?;
    let probs = softmax(&logits[0]);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(CliError::Numerical("non-finite class scores".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&x, &y| probs[y].total_cmp(&probs[x]).then(x.cmp(&y)));
    for (rank, &c) in order.iter().take(a.top_k).enumerate() {
        outln!("{}. {} {:.4}", rank + 1, class_name(&ck.class_names, c), probs[c]);
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    scales: usize,
    mechanism: Mechanism,
    operator: Operator,
    params: usize,
    flops: usize,
}

pub fn bench(a: BenchArgs) -> Result<(), CliError> {
    let mut cfg = a.flags.resolve()?;
    if let Some(c) = a.classes {
        cfg.model.classes = c;
    }
    let base = cfg.model;
    let costs = count_costs(&base)?;
    outln!(
        "configured model (N={}, C={}): params {} ({:.2} M), FLOPs {} ({:.2} G)",
        base.points,
        base.classes,
        costs.params,
        costs.params as f64 / 1e6,
        costs.flops(),
        costs.flops() as f64 / 1e9
    );
    outln!("{:>6} {:>9} {:>9} {:>12} {:>10}", "scales", "mechanism", "operator", "params (M)", "FLOPs (G)");
    let mut rows = Vec::new();
    for scales in [3, 1] {
        let scaled = if scales == 1 { base.clone().with_scales(1)? } else { base.clone() };
        for m in Mechanism::ALL {
            for op in Operator::ALL {
                let c = count_costs(&scaled.clone().with_mechanism(m).with_operator(op))?;
                outln!(
                    "{scales:>6} {:>9} {:>9} {:>12.3} {:>10.3}",
                    m.short_name(),
                    op.short_name(),
                    c.params as f64 / 1e6,
                    c.flops() as f64 / 1e9
                );
                rows.push(BenchRow {
                    scales,
                    mechanism: m,
                    operator: op,
                    params: c.params,
                    flops: c.flops(),
                });
            }
        }
    }
    if let Some(path) = a.json {
        write_json(&path, &rows)?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let scopes = match a.scope.as_str() {
        "all" => Scope::ALL.to_vec(),
        s => vec![s.parse::<Scope>()?],
    };
    let mut failed = 0;
    let mut total = 0;
    for scope in scopes {
        for c in gradient_suite(scope)? {
            total += 1;
            let status = if c.passed() { "PASS" } else { "FAIL" };
            failed += usize::from(!c.passed());
            outln!("{status} {scope}/{} max_rel_err={:.3e} tol={:.0e}", c.name, c.max_rel_err, c.tol);
        }
    }
    outln!("{} of {total} checks passed", total - failed);
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

pub fn saliency(a: SaliencyArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let cloud = load_cloud(&a.cloud, model.config.points, a.seed)?;
    let target = match &a.class {
        Some(s) => match s.parse::<usize>() {
            Ok(i) if i < model.config.classes => i,
            Ok(i) => return Err(CliError::Usage(format!("class index {i} out of range"))),
            Err(_) => ck
                .class_names
                .iter()
                .position(|n| n == s)
                .ok_or_else(|| CliError::Usage(format!("unknown class {s:?}")))?,
        },
        None => model.predict(&Batch::new([&cloud])?)?[0],
    };
    let s = saliency_map(&model, &cloud, target)?;
    let out = a.out.unwrap_or_else(|| {
        let stem = a.cloud.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
        a.cloud.with_file_name(format!("{stem}.saliency.xyz"))
    });
    write_xyz_scored(&out, &cloud, &s.scores)?;
    outln!(
        "class {} -> {} ({} points, {} centers)",
        class_name(&ck.class_names, target),
        out.display(),
        cloud.len(),
        s.centers.len()
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let classes = if a.classes.is_empty() {
        ShapeKind::ALL.to_vec()
    } else {
        a.classes.iter().map(|s| s.parse()).collect::<Result<Vec<ShapeKind>, _>>()?
    };
    let mut spec = SynthSpec {
        classes,
        per_class: a.per_class,
        points: a.points,
        noise_sigma: a.noise,
        seed: a.seed,
        augment: !a.no_augment,
    };
    let train = synth_dataset(&spec, Split::Train)?;
    spec.per_class = a.test_per_class;
    let test = synth_dataset(&spec, Split::Test)?;
    let manifest = write_dataset_dir(&a.out, &train, &test)?;
    outln!(
        "{} train / {} test clouds of {} points -> {}",
        train.len(),
        test.len(),
        a.points,
        manifest.display()
    );
    Ok(())
}
