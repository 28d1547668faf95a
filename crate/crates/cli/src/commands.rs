use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bsrnn::audio::{read_wav, write_wav};
use bsrnn::datagen::{ActivityIndex, DiskStore, MemoryStore, Regime, Split, StemStore, TrackSet};
use bsrnn::energymeter::{pareto_indices, render_table, ParetoPoint, RunReport};
use bsrnn::inference::{separate_song, InferenceConfig};
use bsrnn::metrics::{evaluate_pair, EvaluationReport};
use bsrnn::trainer::{train as run_training, Checkpoint, TrainJob, ValidSong};
use bsrnn::{build_scheme, BandSplitModel, Scalar, Source, Waveform};
use log::{info, warn};

use crate::config::{PipelineConfig, Precision, StoreKind};
use crate::{ReportArgs, SeparateArgs, TrainArgs, EvaluateArgs, UserError, DATASET_ENV};

fn dataset_root(cfg: &PipelineConfig) -> Result<&Path> {
    cfg.dataset_root.as_deref().ok_or_else(|| {
        UserError(format!("no dataset root: pass --dataset-root, set {DATASET_ENV} or dataset_root in the config")).into()
    })
}

fn parse_sources(label: &str) -> Result<Vec<Source>> {
    if label == "all" {
        return Ok(Source::ALL.to_vec());
    }
    let s: Source = label
        .parse()
        .map_err(|_| UserError(format!("unknown source {label:?} (expected vocals, bass, drums, other or all)")))?;
    Ok(vec![s])
}

fn add<T: Scalar>(a: &mut Waveform<T>, b: &Waveform<T>) -> Result<()> {
    if a.samples.dim() != b.samples.dim() {
        bail!(UserError("stems of one song differ in shape".into()));
    }
    a.samples += &b.samples;
    Ok(())
}

/// The song's mixture file, or the sum of its stems when there is none.
fn load_mixture<T: Scalar>(song: &bsrnn::datagen::Song) -> Result<Waveform<T>> {
    let path = song.mixture_path();
    if path.is_file() {
        return Ok(read_wav(&path)?);
    }
    let mut mix = read_wav::<T>(&song.stem_path(Source::ALL[0]))?;
    for s in &Source::ALL[1..] {
        add(&mut mix, &read_wav(&song.stem_path(*s))?)?;
    }
    Ok(mix)
}

pub fn train(cfg: PipelineConfig, args: &TrainArgs) -> Result<()> {
    if args.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let sources = parse_sources(&args.source)?;
    if args.seeds == 0 {
        bail!(UserError("--seeds must be >= 1".into()));
    }
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, args, &sources),
        Precision::F64 => train_typed::<f64>(&cfg, args, &sources),
    }
}

fn train_typed<T: Scalar>(cfg: &PipelineConfig, args: &TrainArgs, sources: &[Source]) -> Result<()> {
    let root = dataset_root(cfg)?;
    let train_set = TrackSet::load(root, Split::Train)?;
    let valid_set = TrackSet::load(root, Split::Valid)?;
    if train_set.is_empty() || valid_set.is_empty() {
        bail!(UserError(format!(
            "{}: need at least one training and one validation song (found {} and {})",
            root.display(),
            train_set.len(),
            valid_set.len()
        )));
    }
    let store: Box<dyn StemStore<T>> = match cfg.store {
        StoreKind::Memory => Box::new(MemoryStore::<T>::load(&train_set)?),
        StoreKind::Disk => Box::new(DiskStore::open(train_set.clone())?),
    };
    if store.sample_rate() != cfg.sample_rate {
        bail!(UserError(format!(
            "dataset is sampled at {} Hz, config expects {} Hz",
            store.sample_rate(),
            cfg.sample_rate
        )));
    }
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let activity = match cfg.data.regime {
        Regime::Sad => Some(ActivityIndex::load_or_build(store.as_ref(), &cfg.data.sad, &cfg.output_dir)?),
        Regime::Umx => None,
    };
    let schemes = cfg.schemes()?;
    let multi = sources.len() > 1 || args.seeds > 1;

    for seed in cfg.seed..cfg.seed + args.seeds {
        for &source in sources {
            let valid = valid_set
                .songs
                .iter()
                .map(|s| {
                    Ok(ValidSong {
                        id: s.id.clone(),
                        mixture: load_mixture::<T>(s)?,
                        target: read_wav(&s.stem_path(source))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let scheme = build_scheme(source.as_str(), cfg.frame.window_size, cfg.sample_rate, schemes.as_ref())?;
            let model = BandSplitModel::<T>::new(cfg.model.clone(), scheme, cfg.frame, seed)?;
            let name = format!("{}-{source}-seed{seed}", cfg.label);
            let run_dir = match &args.run_dir {
                Some(d) if multi => d.join(&name),
                Some(d) => d.clone(),
                None => cfg.output_dir.join(&name),
            };
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.train.seed = seed;
            std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
            std::fs::write(run_dir.join("config.toml"), run_cfg.to_toml()?)
                .with_context(|| format!("writing config snapshot in {}", run_dir.display()))?;
            info!("training {source} ({} parameters) in {}", model.count_params(), run_dir.display());
            let job = TrainJob {
                store: store.as_ref(),
                activity: activity.as_ref(),
                data: &run_cfg.data,
                train: &run_cfg.train,
                target: source,
                valid: &valid,
                inference: &run_cfg.inference,
                hardware: &run_cfg.hardware,
                run_dir: &run_dir,
                model_label: run_cfg.label.clone(),
            };
            let outcome = run_training(model, &job)?;
            outcome.report.append_jsonl(&cfg.output_dir.join("runs.jsonl"))?;
            println!(
                "{source}: {} epochs, best uSDR {} at epoch {}, {:.4} kWh, checkpoint {}",
                outcome.report.epochs,
                outcome.report.best_metric_db.map_or("n/a".into(), |v| format!("{v:.3} dB")),
                outcome.report.best_epoch,
                outcome.report.energy_kwh,
                outcome.best_checkpoint.display()
            );
        }
    }
    Ok(())
}

fn load_models<T: Scalar>(paths: &[PathBuf]) -> Result<BTreeMap<Source, BandSplitModel<T>>> {
    let mut models = BTreeMap::new();
    for p in paths {
        if !p.is_file() {
            bail!(UserError(format!("checkpoint {} does not exist", p.display())));
        }
        let ck = Checkpoint::load(p)?;
        let source: Source = ck
            .header
            .source
            .parse()
            .map_err(|_| UserError(format!("{}: unknown source {:?}", p.display(), ck.header.source)))?;
        if models.insert(source, ck.to_model()?).is_some() {
            bail!(UserError(format!("two checkpoints for {source}")));
        }
    }
    Ok(models)
}

pub fn separate(cfg: &PipelineConfig, args: &SeparateArgs) -> Result<()> {
    match cfg.precision {
        Precision::F32 => separate_typed::<f32>(cfg, args),
        Precision::F64 => separate_typed::<f64>(cfg, args),
    }
}

fn separate_typed<T: Scalar>(cfg: &PipelineConfig, args: &SeparateArgs) -> Result<()> {
    let models = load_models::<T>(&args.checkpoints)?;
    for input in &args.inputs {
        if !input.is_file() {
            bail!(UserError(format!("input {} does not exist", input.display())));
        }
        let song = read_wav::<T>(input)?;
        if song.sample_rate != cfg.sample_rate {
            warn!("{} is sampled at {} Hz, models expect {} Hz", input.display(), song.sample_rate, cfg.sample_rate);
        }
        let name = input.file_stem().map_or_else(|| "song".into(), |s| s.to_string_lossy().into_owned());
        for (source, model) in &models {
            let est = separate_song(&song, model, &cfg.inference)?;
            let out = args.out_dir.join(&name).join(format!("{source}.wav"));
            write_wav(&out, &est)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    match cfg.precision {
        Precision::F32 => evaluate_typed::<f32>(cfg, args),
        Precision::F64 => evaluate_typed::<f64>(cfg, args),
    }
}

fn evaluate_typed<T: Scalar>(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    let split: Split = args.split.parse().map_err(|e: bsrnn::Error| UserError(e.to_string()))?;
    let tracks = TrackSet::load(dataset_root(cfg)?, split)?;
    let mut entries = Vec::new();
    match (&args.estimates, args.checkpoints.is_empty()) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                bail!(UserError(format!("estimates directory {} does not exist", dir.display())));
            }
            for song in &tracks.songs {
                for source in Source::ALL {
                    let est_path = dir.join(&song.id).join(format!("{source}.wav"));
                    if est_path.is_file() {
                        let reference = read_wav::<T>(&song.stem_path(source))?;
                        let est = read_wav::<T>(&est_path)?;
                        entries.push(evaluate_pair(&song.id, source.as_str(), &reference, &est)?);
                    }
                }
            }
            if entries.is_empty() {
                bail!(UserError(format!(
                    "no estimates for the {} split found under {} (expected <song>/<source>.wav)",
                    args.split,
                    dir.display()
                )));
            }
        }
        (None, false) => {
            let models = load_models::<T>(&args.checkpoints)?;
            for song in &tracks.songs {
                let mix = load_mixture::<T>(song)?;
                for (source, model) in &models {
                    let est = separate_song(&mix, model, &cfg.inference as &InferenceConfig)?;
                    let reference = read_wav::<T>(&song.stem_path(*source))?;
                    entries.push(evaluate_pair(&song.id, source.as_str(), &reference, &est)?);
                }
            }
        }
        (None, true) => bail!(UserError("pass --estimates or at least one --checkpoint".into())),
    }
    let report = EvaluationReport::from_entries(entries);
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
        std::fs::write(out.with_extension("txt"), &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    if path.is_dir() {
        let mut out = Vec::new();
        let direct = path.join("run_report.json");
        if direct.is_file() {
            out.extend(read_reports(&direct)?);
        }
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("run_report.json").is_file())
            .collect();
        subdirs.sort();
        for d in subdirs {
            out.extend(read_reports(&d.join("run_report.json"))?);
        }
        return Ok(out);
    }
    if !path.is_file() {
        bail!(UserError(format!("{} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(one) = serde_json::from_str::<RunReport>(&text) {
        return Ok(vec![one]);
    }
    RunReport::read_jsonl(path).map_err(|e| UserError(format!("{}: {e}", path.display())).into())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut merged: BTreeMap<(String, String, u64), RunReport> = BTreeMap::new();
    for p in &args.runs {
        for r in read_reports(p)? {
            merged.insert((r.run_id.clone(), r.source.clone(), r.seed), r);
        }
    }
    if merged.is_empty() {
        bail!(UserError("no run reports found".into()));
    }
    let reports: Vec<RunReport> = merged.into_values().collect();
    for r in reports.iter().filter(|r| !r.is_consistent()) {
        warn!("{}: energy does not match its wall time and hardware", r.run_id);
    }
    let mut text = render_table(&reports);
    let points: Vec<ParetoPoint> = reports
        .iter()
        .map(|r| ParetoPoint {
            metric_db: r.best_metric_db.unwrap_or(f64::NEG_INFINITY),
            energy_kwh: r.energy_kwh,
        })
        .collect();
    text.push_str("\nPareto front (by energy):\n");
    for i in pareto_indices(&points) {
        let r = &reports[i];
        text.push_str(&format!(
            "  {} / {} seed {}: {} dB at {:.4} kWh\n",
            r.model,
            r.source,
            r.seed,
            r.best_metric_db.map_or("n/a".into(), |v| format!("{v:.3}")),
            r.energy_kwh
        ));
    }
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
