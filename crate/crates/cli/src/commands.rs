use std::path::{Path, PathBuf};

use serde::Serialize;
use volage::checkpoint::{load_checkpoint, save_checkpoint, CheckpointDoc};
use volage::data::{
    load_dataset, load_manifest, read_nifti, read_raw, sidecar_path, synth_generate, write_manifest, write_raw,
    zscore_normalize, Dataset, ManifestRow, SynthSpec, VolumeFormat,
};
use volage::interpret::{extract_slice, gradcam as run_gradcam, write_heatmap_csv, write_image, CamTarget, Plane};
use volage::training::{ablate_sharing, cross_evaluate, evaluate, stratified_split, train as run_train, Metrics};
use volage::{BrainAgeModel, Error, Result, Tensor};

use crate::config::RunConfig;
use crate::{AblateArgs, EvalArgs, GradcamArgs, Overrides, ParamsArgs, SynthArgs, TrainArgs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn load_run_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = o.attention {
        cfg.model.attention_mode = v;
    }
    if let Some(v) = o.test_fraction {
        cfg.test_fraction = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checked(manifest: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let data = load_dataset(&load_manifest(manifest)?, cfg.normalize)?;
    if data.shape != cfg.model.input_shape {
        return Err(Error::Shape(format!(
            "dataset {} has volumes of shape {:?}, config input_shape is {:?}",
            data.name, data.shape, cfg.model.input_shape
        )));
    }
    Ok(data)
}

/// Stratified train/held-out split; the held-out set is `None` when the
/// configured fraction is zero.
fn split(data: &Dataset, cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let s = stratified_split(&data.ages(), cfg.test_fraction, cfg.bin_width, cfg.train.seed)?;
    if s.train.is_empty() {
        return Err(Error::Config(format!(
            "split left no training subjects out of {}; lower test_fraction or widen bin_width",
            data.len()
        )));
    }
    let train = data.subset(data.name.clone(), &s.train)?;
    let test = (!s.test.is_empty())
        .then(|| data.subset(format!("{}-heldout", data.name), &s.test))
        .transpose()?;
    Ok((train, test))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_subjects: a.n,
        age_range: a.age_range,
        shape: a.shape,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    spec.validate()?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let records = synth_generate(&spec)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let file = PathBuf::from(format!("{}.f32raw", r.subject_id));
        write_raw(a.out.join(&file), &r.volume)?;
        rows.push(ManifestRow {
            subject_id: r.subject_id.clone(),
            age: r.age,
            path: file,
            format: VolumeFormat::Raw,
        });
    }
    let manifest = a.out.join(format!("{}.csv", a.name));
    write_manifest(&manifest, &rows)?;
    let ages: Vec<f64> = records.iter().map(|r| r.age).collect();
    let mean = ages.iter().sum::<f64>() / ages.len() as f64;
    let (lo, hi) = ages.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    println!("subjects={}", records.len());
    println!("shape={},{},{}", a.shape[0], a.shape[1], a.shape[2]);
    println!("age_min={lo:.2}\nage_max={hi:.2}\nage_mean={mean:.2}");
    println!("manifest={}", manifest.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), &a.overrides)?;
    let data = load_checked(&a.data, &cfg)?;
    let (train_set, held_out) = split(&data, &cfg)?;
    let mut model = BrainAgeModel::build(&cfg.model, cfg.train.seed)?;
    eprintln!(
        "training on {} subjects ({} held out), {} parameters",
        train_set.len(),
        held_out.as_ref().map_or(0, Dataset::len),
        model.param_count()
    );
    let history = run_train(&mut model, &train_set, held_out.as_ref(), &cfg.train)?;
    let doc = CheckpointDoc {
        model: cfg.model.clone(),
        normalize_inputs: cfg.normalize,
        trained_on: data.name.clone(),
    };
    create_parent(&a.out)?;
    save_checkpoint(&a.out, &model, &doc)?;
    create_parent(&a.history)?;
    std::fs::write(&a.history, history.to_csv()).map_err(io_err(&a.history))?;

    let last = history.epochs.last().expect("at least one epoch");
    println!("epochs={}", last.epoch);
    println!("train_mae={:.4}", evaluate(&model, &train_set)?.mae);
    if let Some(v) = &held_out {
        println!("val_mae={:.4}", evaluate(&model, v)?.mae);
    }
    println!("checkpoint={}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    trained_on: &'a str,
    evaluated_on: &'a str,
    cross: bool,
    n: usize,
    mae: f64,
    rmse: f64,
}

pub fn eval(a: EvalArgs, cross: bool) -> Result<()> {
    let (model, doc) = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&load_manifest(&a.data)?, doc.normalize_inputs)?;
    let metrics: Metrics = if cross {
        cross_evaluate(&model, &doc.trained_on, &data)?.metrics
    } else {
        evaluate(&model, &data)?
    };
    let report = EvalReport {
        trained_on: &doc.trained_on,
        evaluated_on: &data.name,
        cross,
        n: metrics.n,
        mae: metrics.mae,
        rmse: metrics.rmse,
    };
    println!("trained_on={}\nevaluated_on={}\ncross={cross}", report.trained_on, report.evaluated_on);
    print!("{}", metrics.to_kv());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

pub fn params(a: ParamsArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(mode) = a.attention {
        cfg.model.attention_mode = mode;
    }
    let table = cfg.model.param_table()?;
    let width = table.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for row in &table {
        let shape = row.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        println!("{:<width$}  {:<18}  {:>9}", row.name, shape, row.count);
    }
    println!("total {}", table.iter().map(|r| r.count).sum::<usize>());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), &a.overrides)?;
    if cfg.test_fraction == 0.0 {
        return Err(Error::Config("ablation needs a held-out split; test_fraction is 0".into()));
    }
    let data = load_checked(&a.data, &cfg)?;
    let (train_set, held_out) = split(&data, &cfg)?;
    let held_out = held_out.expect("positive fraction holds out at least one subject");
    let report = ablate_sharing(&train_set, &held_out, &cfg.model, &cfg.train)?;
    print!("{}", report.to_kv());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti(path),
        _ => read_raw(path, sidecar_path(path)),
    }
}

pub fn gradcam(a: GradcamArgs) -> Result<()> {
    let (model, doc) = load_checkpoint(&a.ckpt)?;
    let mut vol = read_volume(&a.volume)?;
    let expect = doc.model.input_shape;
    if vol.shape() != expect {
        return Err(Error::Shape(format!(
            "volume {} has shape {:?}, model expects {expect:?}",
            a.volume.display(),
            vol.shape()
        )));
    }
    if doc.normalize_inputs {
        vol = zscore_normalize(&vol)?;
    }
    let [d, h, w] = expect;
    let target = if a.target == "pre" {
        CamTarget::PreAttention
    } else {
        CamTarget::PostAttention
    };
    let map = run_gradcam(&model, &vol.reshape(&[1, 1, d, h, w])?, a.layer, target)?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    for plane in Plane::ALL {
        let index = expect[plane.fixed_axis()] / 2;
        let img = extract_slice(&map, plane, index)?;
        let path = a.out.join(format!("layer{}_{}.pgm", a.layer, plane.name()));
        write_image(&img, &path)?;
        println!("{}={}", plane.name(), path.display());
    }
    if a.csv {
        let path = a.out.join(format!("layer{}_heatmap.csv", a.layer));
        write_heatmap_csv(&map, &path)?;
        println!("heatmap_csv={}", path.display());
    }
    println!("raw_shape={:?}", map.raw_shape);
    Ok(())
}
