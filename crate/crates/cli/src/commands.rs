use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{anyhow, bail, Context, Result};
use fdylka_core::checkpoint;
use fdylka_core::data_io::{
    self, parse_any, parse_strong, parse_weak, read_prediction_jsonl, write_prediction_jsonl, write_predictions,
    write_pseudolabels, DatasetManifest, PredictionRecord, SynthSpec,
};
use fdylka_core::dsp::{self, CorpusStats, LogMel, NormScope, StatsAccumulator};
use fdylka_core::eval::{decode, event_f1, EventAnnotation, Matching, MetricConfig};
use fdylka_core::model::{ClipPrediction, ModelConfig, ModelParams};
use fdylka_core::pseudolabel::{ensemble, label_external, label_in_domain};
use fdylka_core::train::{
    predict_examples, run_stage, strong_target, weak_target, Example, ExampleSource, Target, TrainData,
};

use crate::config::RunConfig;
use crate::{Command, Common, MatchingArg, PseudoMode, Scope, UsageError};

pub(crate) fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synthgen { common, spec, clips } => synthgen(&common, spec.as_deref(), clips),
        Command::Featurize {
            common,
            audio_dir,
            manifest,
            stats_manifest,
            scope,
        } => featurize(&common, audio_dir, &manifest, &stats_manifest, scope),
        Command::Train {
            common,
            stage,
            pseudo_labels,
            epochs,
        } => train(&common, stage, pseudo_labels, epochs),
        Command::Pseudolabel {
            common,
            checkpoints,
            manifest,
            mode,
        } => pseudolabel(&common, &checkpoints, &manifest, mode),
        Command::Predict {
            common,
            checkpoints,
            manifest,
            probs,
        } => predict(&common, &checkpoints, &manifest, probs.as_deref()),
        Command::Ensemble { common, inputs, events } => ensemble_files(&common, &inputs, events.as_deref()),
        Command::Evaluate {
            common,
            reference,
            est,
            matching,
        } => evaluate(&common, &reference, &est, matching),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if cfg.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    Ok(cfg)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Split `items` into `workers` contiguous chunks, run `f` on each in its
/// own thread and concatenate the results in order.
fn par_chunks<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&[T]) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return f(items);
    }
    let size = items.len().div_ceil(workers);
    let results: Vec<Result<Vec<R>>> = thread::scope(|s| {
        let handles: Vec<_> = items.chunks(size).map(|c| s.spawn(|| f(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("worker thread panicked"))))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn synthgen(common: &Common, spec_path: Option<&Path>, clips: Option<usize>) -> Result<()> {
    let out = common.out.clone().ok_or_else(|| usage("synthgen needs --out <dir>"))?;
    let mut spec = match spec_path {
        Some(p) => serde_json::from_str::<SynthSpec>(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(n) = clips {
        spec.clip_count = n;
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let res = data_io::synth_generate(&spec, &out)?;
    println!(
        "wrote {} clips ({} strong, {} weak, {} unlabeled, {} events) to {}",
        res.clips.len(),
        res.strong_clips.len(),
        res.weak_clips.len(),
        res.unlabeled_clips.len(),
        res.events.len(),
        out.display()
    );
    Ok(())
}

fn manifest_clips(paths: &[PathBuf], vocab: &[String]) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in paths {
        for c in parse_any(p, vocab)?.clips() {
            if seen.insert(c.clone()) {
                out.push(c);
            }
        }
    }
    Ok(out)
}

fn featurize(
    common: &Common,
    audio_dir: Option<PathBuf>,
    manifests: &[PathBuf],
    stats_manifests: &[PathBuf],
    scope: Scope,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let audio = audio_dir
        .or(cfg.paths.audio_dir.clone())
        .ok_or_else(|| usage("featurize needs --audio-dir or paths.audio_dir"))?;
    let out = common
        .out
        .clone()
        .or(cfg.paths.feature_dir.clone())
        .ok_or_else(|| usage("featurize needs --out or paths.feature_dir"))?;
    cfg.paths.audio_dir = Some(audio.clone());
    cfg.paths.feature_dir = Some(out.clone());
    cfg.echo(&out, "featurize.resolved.json")?;

    let clips = if manifests.is_empty() {
        let mut v: Vec<String> = fs::read_dir(&audio)
            .with_context(|| format!("listing {}", audio.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
            .collect();
        v.sort();
        v
    } else {
        manifest_clips(manifests, &cfg.classes)?
    };
    if clips.is_empty() {
        bail!("no clips to featurize in {}", audio.display());
    }
    let stats_set: Option<BTreeSet<String>> = if stats_manifests.is_empty() {
        None
    } else {
        Some(manifest_clips(stats_manifests, &cfg.classes)?.into_iter().collect())
    };
    let extractor = LogMel::new();
    let partials = par_chunks(&clips, cfg.workers, |chunk| {
        let mut acc = StatsAccumulator::new();
        for c in chunk {
            let f = dsp::featurize_file(&audio.join(c), &extractor)?;
            dsp::write_features(&dsp::feature_path(&out, c), &f)?;
            if stats_set.as_ref().is_none_or(|s| s.contains(c)) {
                acc.add(&f)?;
            }
        }
        Ok(vec![acc])
    })?;
    let mut acc = StatsAccumulator::new();
    for p in &partials {
        acc.merge(p)?;
    }
    let stats = acc.finish(match scope {
        Scope::Global => NormScope::Global,
        Scope::PerBand => NormScope::PerBand,
    })?;
    let stats_path = out.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)
        .with_context(|| format!("writing {}", stats_path.display()))?;
    println!(
        "featurized {} clips into {} (stats over {} clips: mean {:.4}, std {:.4})",
        clips.len(),
        out.display(),
        stats.clip_count,
        stats.mean,
        stats.std
    );
    Ok(())
}

fn read_stats(feature_dir: &Path) -> Result<CorpusStats> {
    let p = feature_dir.join("stats.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading corpus statistics {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// Loads examples for a model configuration.
struct Loader {
    feature_dir: PathBuf,
    stats: CorpusStats,
    cfg: RunConfig,
    model: ModelConfig,
}

impl Loader {
    fn new(cfg: &RunConfig, model: &ModelConfig) -> Result<Self> {
        let feature_dir = cfg
            .paths
            .feature_dir
            .clone()
            .ok_or_else(|| anyhow!("paths.feature_dir is not set"))?;
        if model.embedding_dim.is_some() && cfg.paths.embeddings.is_none() {
            bail!("the model has a fusion block but paths.embeddings is not set");
        }
        Ok(Self {
            stats: read_stats(&feature_dir)?,
            feature_dir,
            cfg: cfg.clone(),
            model: model.clone(),
        })
    }

    fn load(&self, clip: &str, target: Target) -> Result<Example> {
        let src = ExampleSource {
            feature_dir: &self.feature_dir,
            stats: &self.stats,
            embeddings: self.model.embedding_dim.and(self.cfg.paths.embeddings.as_ref()),
            embedding_dim: self.model.embedding_dim.unwrap_or(0),
            output_frames: self.model.output_frames(),
            align: self.cfg.align,
        };
        src.load(clip, target).with_context(|| format!("loading clip {clip}"))
    }

    fn strong_examples(&self, paths: &[PathBuf]) -> Result<(Vec<Example>, Vec<EventAnnotation>)> {
        let frame_seconds = self.cfg.decode.frame_seconds;
        let mut examples = Vec::new();
        let mut events = Vec::new();
        for p in paths {
            let m = parse_strong(p, &self.cfg.classes)?;
            for c in &m.clips {
                let ev: Vec<&EventAnnotation> = m.events.iter().filter(|e| &e.clip_id == c).collect();
                let t = strong_target(&ev, &self.cfg.classes, self.model.output_frames(), frame_seconds)?;
                examples.push(self.load(c, Target::Strong(t))?);
            }
            events.extend(m.events);
        }
        Ok((examples, events))
    }
}

fn train(common: &Common, stage: u32, pseudo_labels: Vec<PathBuf>, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.stage = stage;
    if !pseudo_labels.is_empty() {
        cfg.paths.pseudo_labels = pseudo_labels;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &common.out {
        cfg.paths.output_dir = Some(o.clone());
    }
    let out = cfg
        .paths
        .output_dir
        .clone()
        .ok_or_else(|| usage("train needs --out or paths.output_dir"))?;
    cfg.validate()?;
    cfg.echo(&out, &format!("stage{stage}.resolved.json"))?;
    if stage == 2 && cfg.paths.pseudo_labels.is_empty() {
        bail!("stage 2 needs pseudo-label manifests: pass --pseudo-labels or set paths.pseudo_labels");
    }

    let loader = Loader::new(&cfg, &cfg.model)?;
    let mut strong_paths = cfg.paths.strong.clone();
    if stage == 2 {
        strong_paths.extend(cfg.paths.pseudo_labels.iter().cloned());
    }
    let (strong, _) = loader.strong_examples(&strong_paths)?;
    let mut weak = Vec::new();
    for p in &cfg.paths.weak {
        for (c, labels) in parse_weak(p, &cfg.classes)?.records {
            weak.push(loader.load(&c, Target::Weak(weak_target(&labels, &cfg.classes)?))?);
        }
    }
    let unlabeled_clips = manifest_clips(&cfg.paths.unlabeled, &cfg.classes)?;
    let unlabeled = unlabeled_clips
        .iter()
        .map(|c| loader.load(c, Target::Unlabeled))
        .collect::<Result<Vec<_>>>()?;
    let validation_paths = match &cfg.paths.validation {
        Some(p) => vec![p.clone()],
        None => cfg.paths.strong.clone(),
    };
    let (validation, validation_events) = loader.strong_examples(&validation_paths)?;
    let data = TrainData {
        strong,
        weak,
        unlabeled,
        validation,
        validation_events,
    };
    eprintln!(
        "stage {stage}: {} strong, {} weak, {} unlabeled, {} validation clips; {} epochs",
        data.strong.len(),
        data.weak.len(),
        data.unlabeled.len(),
        data.validation.len(),
        cfg.train.epochs
    );
    let res = run_stage(stage, &data, &cfg.model, &cfg.train, &cfg.classes, &cfg.decode, Some(&out))?;
    let best = |b: &Option<fdylka_core::train::BestCheckpoint>| {
        b.as_ref().map(|b| {
            serde_json::json!({
                "epoch": b.epoch,
                "f1": b.f1,
                "checkpoint": b.path,
            })
        })
    };
    let summary = serde_json::json!({
        "stage": stage,
        "epochs": res.log.len(),
        "best_student": best(&res.best_student),
        "best_teacher": best(&res.best_teacher),
    });
    let path = out.join(format!("stage{stage}_summary.json"));
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{summary}");
    Ok(())
}

fn load_checkpoints(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<ModelParams>> {
    let models = paths
        .iter()
        .map(|p| checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let first = &models[0].config;
    for (m, p) in models.iter().zip(paths) {
        let c = &m.config;
        if c.class_count != cfg.classes.len() {
            bail!(
                "checkpoint {} predicts {} classes, config lists {}",
                p.display(),
                c.class_count,
                cfg.classes.len()
            );
        }
        if (c.n_frames, c.n_mels, c.output_frames(), c.embedding_dim)
            != (first.n_frames, first.n_mels, first.output_frames(), first.embedding_dim)
        {
            bail!("checkpoint {} has different input geometry from {}", p.display(), paths[0].display());
        }
    }
    Ok(models)
}

/// Ensemble predictions of every model for every clip, in clip order.
fn ensemble_predict(models: &[ModelParams], loader: &Loader, clips: &[String], workers: usize) -> Result<Vec<ClipPrediction>> {
    let chunk = 4;
    par_chunks(clips, workers, |part| {
        let mut out = Vec::with_capacity(part.len());
        for group in part.chunks(chunk) {
            let examples = group
                .iter()
                .map(|c| loader.load(c, Target::Unlabeled))
                .collect::<Result<Vec<_>>>()?;
            let per_model = models
                .iter()
                .map(|m| predict_examples(m, &examples, chunk))
                .collect::<fdylka_core::Result<Vec<_>>>()?;
            for i in 0..group.len() {
                let preds: Vec<ClipPrediction> = per_model.iter().map(|p| p[i].clone()).collect();
                out.push(ensemble(&preds)?);
            }
        }
        Ok(out)
    })
}

fn pseudolabel(common: &Common, checkpoints: &[PathBuf], manifests: &[PathBuf], mode: PseudoMode) -> Result<()> {
    let cfg = load_config(common)?;
    let out = common.out.clone().ok_or_else(|| usage("pseudolabel needs --out <file.tsv>"))?;
    cfg.echo(&parent_dir(&out), "pseudolabel.resolved.json")?;
    let models = load_checkpoints(checkpoints, &cfg)?;
    let loader = Loader::new(&cfg, &models[0].config)?;
    let mut clips = Vec::new();
    let mut weak_labels: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for p in manifests {
        let m = parse_any(p, &cfg.classes)?;
        if mode == PseudoMode::External {
            let DatasetManifest::Weak(w) = &m else {
                bail!("external pseudo-labeling needs weak manifests; {} is not one", p.display());
            };
            for (c, labels) in &w.records {
                let t = weak_target(labels, &cfg.classes)?;
                weak_labels.insert(c.clone(), t.iter().map(|&v| v > 0.5).collect());
            }
        }
        clips.extend(m.clips());
    }
    let mut seen = BTreeSet::new();
    clips.retain(|c| seen.insert(c.clone()));
    let preds = ensemble_predict(&models, &loader, &clips, cfg.workers)?;
    let grids = clips
        .iter()
        .zip(&preds)
        .map(|(c, p)| match mode {
            PseudoMode::InDomain => Ok(label_in_domain(c, p, &cfg.pseudo)),
            PseudoMode::External => label_external(c, p, &weak_labels[c], &cfg.pseudo),
        })
        .collect::<fdylka_core::Result<Vec<_>>>()?;
    let events = write_pseudolabels(&out, &grids, &cfg.classes, &cfg.decode, &cfg.pseudo)?;
    println!(
        "wrote {} pseudo-labeled events for {} clips to {}",
        events.len(),
        clips.len(),
        out.display()
    );
    Ok(())
}

fn decode_all(records: &[PredictionRecord], cfg: &RunConfig) -> Result<Vec<EventAnnotation>> {
    let mut events = Vec::new();
    for r in records {
        events.extend(decode(&r.clip_id, &r.strong, &cfg.classes, &cfg.decode)?);
    }
    Ok(events)
}

fn predict(common: &Common, checkpoints: &[PathBuf], manifests: &[PathBuf], probs: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = common.out.clone().ok_or_else(|| usage("predict needs --out <file.tsv>"))?;
    cfg.echo(&parent_dir(&out), "predict.resolved.json")?;
    let models = load_checkpoints(checkpoints, &cfg)?;
    let loader = Loader::new(&cfg, &models[0].config)?;
    let clips = manifest_clips(manifests, &cfg.classes)?;
    let preds = ensemble_predict(&models, &loader, &clips, cfg.workers)?;
    let records: Vec<PredictionRecord> = clips
        .iter()
        .zip(preds)
        .map(|(c, p)| PredictionRecord::new(c, p))
        .collect();
    let events = decode_all(&records, &cfg)?;
    write_predictions(&out, &events)?;
    if let Some(p) = probs {
        write_prediction_jsonl(p, &records)?;
    }
    println!("wrote {} events for {} clips to {}", events.len(), clips.len(), out.display());
    Ok(())
}

fn ensemble_files(common: &Common, inputs: &[PathBuf], events: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = common.out.clone().ok_or_else(|| usage("ensemble needs --out <file.jsonl>"))?;
    cfg.echo(&parent_dir(&out), "ensemble.resolved.json")?;
    let files = inputs
        .iter()
        .map(|p| read_prediction_jsonl(p))
        .collect::<fdylka_core::Result<Vec<_>>>()?;
    let order: Vec<String> = files[0].iter().map(|r| r.clip_id.clone()).collect();
    let maps: Vec<BTreeMap<&str, &PredictionRecord>> = files
        .iter()
        .map(|f| f.iter().map(|r| (r.clip_id.as_str(), r)).collect())
        .collect();
    for (m, p) in maps.iter().zip(inputs) {
        if m.len() != order.len() || order.iter().any(|c| !m.contains_key(c.as_str())) {
            bail!("{} does not cover the same clips as {}", p.display(), inputs[0].display());
        }
    }
    let records = order
        .iter()
        .map(|c| {
            let preds: Vec<ClipPrediction> = maps.iter().map(|m| m[c.as_str()].prediction()).collect();
            Ok(PredictionRecord::new(c, ensemble(&preds)?))
        })
        .collect::<Result<Vec<_>>>()?;
    write_prediction_jsonl(&out, &records)?;
    if let Some(p) = events {
        write_predictions(p, &decode_all(&records, &cfg)?)?;
    }
    println!("averaged {} files over {} clips into {}", inputs.len(), records.len(), out.display());
    Ok(())
}

fn evaluate(common: &Common, reference: &Path, est: &Path, matching: MatchingArg) -> Result<()> {
    let cfg = load_config(common)?;
    let r = parse_strong(reference, &cfg.classes)?;
    let e = parse_strong(est, &cfg.classes)?;
    let metric = MetricConfig {
        matching: match matching {
            MatchingArg::Greedy => Matching::Greedy,
            MatchingArg::Bipartite => Matching::Bipartite,
        },
        ..MetricConfig::default()
    };
    let report = event_f1(&r.events, &e.events, &metric)?;
    print!("{}", report.table());
    if let Some(p) = &common.out {
        cfg.echo(&parent_dir(p), "evaluate.resolved.json")?;
        let json = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
