//! Mean-teacher training: losses, schedules, the EMA teacher, AdamW and
//! the per-stage loop with validation and checkpointing.

mod augment;
mod data;
mod optim;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply_filter, augment, filter_gains, mix, shift, time_mask, AugmentConfig};
pub use data::{strong_target, weak_target, Example, ExampleSource, LabelKind, Target, TrainData};
pub use optim::{ema_update, AdamW, ADAM_EPS, BETA1, BETA2};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{decode, event_f1, DecodeConfig, MetricConfig};
use crate::model::{self, ClipPrediction, ModelConfig, ModelOutput, ModelParams};
use crate::nn::{apply_bn_updates, Mode, Session, BN_MOMENTUM};
use crate::tensor::{Graph, Tensor, Var};

pub const METRICS_HEADER: &str =
    "epoch,lr,cons_w,loss_total,loss_strong,loss_weak,loss_cons,val_f1_student,val_f1_teacher";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub n_strong: usize,
    pub n_weak: usize,
    pub n_unlabeled: usize,
    pub lr_max: f64,
    pub rampup_epochs: usize,
    pub ema_alpha: f64,
    pub weak_loss_weight: f64,
    pub consistency_max_weight: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validate (and checkpoint) every this many epochs and after the last.
    pub validate_every: usize,
    /// Clips per forward pass during validation.
    pub eval_batch: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            steps_per_epoch: 10,
            n_strong: 1,
            n_weak: 1,
            n_unlabeled: 2,
            lr_max: 0.001,
            rampup_epochs: 50,
            ema_alpha: 0.999,
            weak_loss_weight: 0.5,
            consistency_max_weight: 2.0,
            weight_decay: 1e-6,
            seed: 0,
            validate_every: 1,
            eval_batch: 4,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_strong + self.n_weak + self.n_unlabeled == 0 {
            return Err(Error::Config("all batch quotas are zero".into()));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha must be in [0, 1), got {}", self.ema_alpha)));
        }
        if self.steps_per_epoch == 0 || self.validate_every == 0 || self.eval_batch == 0 {
            return Err(Error::Config("steps_per_epoch, validate_every and eval_batch must be positive".into()));
        }
        for (name, v) in [
            ("lr_max", self.lr_max),
            ("weak_loss_weight", self.weak_loss_weight),
            ("consistency_max_weight", self.consistency_max_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        self.augment.validate()
    }
}

/// Ramp factor `exp(−5·(1 − min(e/rampup, 1))²)`.
pub fn ramp(epoch: usize, rampup_epochs: usize) -> f64 {
    if rampup_epochs == 0 || epoch >= rampup_epochs {
        return 1.0;
    }
    let t = 1.0 - epoch as f64 / rampup_epochs as f64;
    (-5.0 * t * t).exp()
}

/// `(learning rate, consistency weight)` for an epoch.
pub fn schedules(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let r = ramp(epoch, cfg.rampup_epochs);
    (cfg.lr_max * r, cfg.consistency_max_weight * r)
}

/// Loss graph nodes plus their values.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub strong: f64,
    pub weak: f64,
    pub consistency: f64,
    pub total_value: f64,
}

fn gather(g: &mut Graph, v: Var, idx: &[usize]) -> Result<Var> {
    let parts = idx.iter().map(|&i| g.narrow(v, 0, i, 1)).collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 0)
    }
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        if p.shape() != parts[0].shape() {
            return Err(Error::Contract(format!("target shapes differ: {:?} vs {:?}", p.shape(), parts[0].shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

fn mse(g: &mut Graph, a: Var, target: &Tensor) -> Result<Var> {
    if g.shape(a) != target.shape() {
        return Err(Error::Contract(format!(
            "consistency target {:?} vs prediction {:?}",
            target.shape(),
            g.shape(a)
        )));
    }
    let t = g.constant(target.clone());
    let d = g.sub(a, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `BCE_strong + w_weak·BCE_weak + w_cons·(MSE_strong + MSE_weak)`.
///
/// Strong BCE covers the strong clips, weak BCE the weak clips; the
/// consistency terms cover every clip and are skipped when `teacher` is
/// `None`. `strong`/`weak` are the student's `[B, T, C]` and `[B, C]`
/// probabilities; teacher tensors are constants.
pub fn batch_loss(
    g: &mut Graph,
    strong: Var,
    weak: Var,
    teacher: Option<(&Tensor, &Tensor)>,
    targets: &[Target],
    weak_loss_weight: f64,
    consistency_weight: f64,
) -> Result<LossTerms> {
    let (b, t, c) = match g.shape(strong) {
        &[b, t, c] => (b, t, c),
        s => return Err(Error::Contract(format!("strong output must be [B, T, C], got {s:?}"))),
    };
    if targets.len() != b || g.shape(weak) != [b, c] {
        return Err(Error::Contract(format!(
            "{} targets for a batch of {b}, weak output {:?}",
            targets.len(),
            g.shape(weak)
        )));
    }
    let zero = g.constant(Tensor::scalar(0.0));
    let strong_idx: Vec<usize> = (0..b).filter(|&i| matches!(targets[i], Target::Strong(_))).collect();
    let weak_idx: Vec<usize> = (0..b).filter(|&i| matches!(targets[i], Target::Weak(_))).collect();

    let l_strong = if strong_idx.is_empty() {
        zero
    } else {
        let tt: Vec<&Tensor> = strong_idx
            .iter()
            .map(|&i| match &targets[i] {
                Target::Strong(x) => x,
                _ => unreachable!(),
            })
            .collect();
        let target = stack(&tt)?;
        if target.shape()[1..] != [t, c] {
            return Err(Error::Contract(format!("strong target {:?}, prediction [{t}, {c}]", &target.shape()[1..])));
        }
        let p = gather(g, strong, &strong_idx)?;
        g.bce_mean(p, &target)?
    };
    let l_weak = if weak_idx.is_empty() {
        zero
    } else {
        let mut data = Vec::new();
        for &i in &weak_idx {
            let Target::Weak(w) = &targets[i] else { unreachable!() };
            if w.len() != c {
                return Err(Error::Contract(format!("weak target has {} classes, prediction {c}", w.len())));
            }
            data.extend_from_slice(w);
        }
        let p = gather(g, weak, &weak_idx)?;
        g.bce_mean(p, &Tensor::new(vec![weak_idx.len(), c], data)?)?
    };
    let l_cons = match teacher {
        None => zero,
        Some((ts, tw)) => {
            let a = mse(g, strong, ts)?;
            let bw = mse(g, weak, tw)?;
            g.add(a, bw)?
        }
    };
    let ww = g.scale(l_weak, weak_loss_weight);
    let wc = g.scale(l_cons, consistency_weight);
    let total = g.add(l_strong, ww)?;
    let total = g.add(total, wc)?;
    Ok(LossTerms {
        total,
        strong: g.value(l_strong).item(),
        weak: g.value(l_weak).item(),
        consistency: g.value(l_cons).item(),
        total_value: g.value(total).item(),
    })
}

/// Student, teacher and optimizer moments for one stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    /// Fresh Xavier initialization; the teacher starts as a copy of the student.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let student = ModelParams::build(config, seed)?;
        let teacher = student.clone();
        let optimizer = AdamW::new(&student.store);
        Ok(Self {
            student,
            teacher,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub strong: f64,
    pub weak: f64,
    pub consistency: f64,
}

fn inputs(batch: &[Example]) -> (Vec<&Tensor>, Option<Vec<&Tensor>>) {
    let feats = batch.iter().map(|e| &e.features).collect();
    let embs = batch.iter().map(|e| e.embedding.as_ref()).collect::<Option<Vec<_>>>();
    (feats, embs)
}

fn run_forward(s: &mut Session, cfg: &ModelConfig, batch: &[Example]) -> Result<ModelOutput> {
    let (feats, embs) = inputs(batch);
    let x = model::stack_features(&mut s.graph, cfg, &feats)?;
    let e = match (cfg.embedding_dim, embs) {
        (Some(_), Some(e)) => Some(model::stack_embeddings(&mut s.graph, cfg, &e)?),
        (Some(_), None) => return Err(Error::Input("fusion model needs an embedding for every clip".into())),
        (None, _) => None,
    };
    model::forward(s, cfg, x, e)
}

/// One optimization step on an already augmented batch.
pub fn train_step(state: &mut TrainState, batch: &[Example], cfg: &TrainConfig, lr: f64, cons_w: f64, dropout_seed: u64) -> Result<StepLoss> {
    let mcfg = state.student.config.clone();
    let targets: Vec<Target> = batch.iter().map(|e| e.target.clone()).collect();
    // The teacher only matters through the consistency term.
    let teacher_out = if cons_w > 0.0 {
        let mut ts = Session::new(&state.teacher.store, Mode::Eval, Graph::no_grad());
        let out = run_forward(&mut ts, &mcfg, batch)?;
        Some((ts.graph.value(out.strong).clone(), ts.graph.value(out.weak).clone()))
    } else {
        None
    };
    let mut s = Session::new(&state.student.store, Mode::Train, Graph::new())
        .with_rng(ChaCha8Rng::seed_from_u64(dropout_seed));
    let out = run_forward(&mut s, &mcfg, batch)?;
    let (mut g, bn) = s.into_parts();
    let loss = batch_loss(
        &mut g,
        out.strong,
        out.weak,
        teacher_out.as_ref().map(|(a, b)| (a, b)),
        &targets,
        cfg.weak_loss_weight,
        cons_w,
    )?;
    state.student.store.zero_grad();
    g.backward_into(loss.total, &mut state.student.store)?;
    drop(g);
    if state.teacher.store.params().iter().any(|p| p.grad.is_some()) {
        return Err(Error::Contract("teacher leaves received gradients".into()));
    }
    state.optimizer.step(&mut state.student.store, lr, cfg.weight_decay)?;
    apply_bn_updates(&mut state.student.store, &bn, BN_MOMENTUM)?;
    state.step += 1;
    // Early in training the teacher tracks the student more closely.
    let alpha = (1.0 - 1.0 / (state.step as f64 + 1.0)).min(cfg.ema_alpha);
    ema_update(&mut state.teacher.store, &state.student.store, alpha)?;
    Ok(StepLoss {
        total: loss.total_value,
        strong: loss.strong,
        weak: loss.weak,
        consistency: loss.consistency,
    })
}

/// Eval-mode predictions for `examples`, `chunk` clips per forward pass.
pub fn predict_examples(params: &ModelParams, examples: &[Example], chunk: usize) -> Result<Vec<ClipPrediction>> {
    let mut out = Vec::with_capacity(examples.len());
    for part in examples.chunks(chunk.max(1)) {
        let (feats, embs) = inputs(part);
        let embs = match params.config.embedding_dim {
            Some(_) => Some(embs.ok_or_else(|| Error::Input("fusion model needs an embedding for every clip".into()))?),
            None => None,
        };
        out.extend(params.predict(&feats, embs.as_deref())?);
    }
    Ok(out)
}

/// Decode predictions and score them against `reference`.
pub fn score(
    params: &ModelParams,
    examples: &[Example],
    reference: &[crate::eval::EventAnnotation],
    classes: &[String],
    decode_cfg: &DecodeConfig,
    chunk: usize,
) -> Result<f64> {
    let preds = predict_examples(params, examples, chunk)?;
    let mut est = Vec::new();
    for (e, p) in examples.iter().zip(&preds) {
        est.extend(decode(&e.clip_id, &p.strong, classes, decode_cfg)?);
    }
    Ok(event_f1(reference, &est, &MetricConfig::default())?.macro_f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub cons_w: f64,
    pub loss_total: f64,
    pub loss_strong: f64,
    pub loss_weak: f64,
    pub loss_cons: f64,
    pub val_f1_student: Option<f64>,
    pub val_f1_teacher: Option<f64>,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.cons_w,
            self.loss_total,
            self.loss_strong,
            self.loss_weak,
            self.loss_cons,
            opt(self.val_f1_student),
            opt(self.val_f1_teacher)
        )
    }
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub f1: f64,
    pub path: Option<PathBuf>,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub best_student: Option<BestCheckpoint>,
    pub best_teacher: Option<BestCheckpoint>,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

pub fn checkpoint_name(stage: u32, epoch: usize, teacher: bool) -> String {
    format!("stage{stage}_epoch{epoch}_{}.flkc", if teacher { "teacher" } else { "student" })
}

/// Cycles through a stream in freshly shuffled epochs.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Train one stage from a fresh initialization.
///
/// With `out_dir` set, writes `metrics.csv` (appending to an existing file)
/// and `stage<k>_epoch<e>_<student|teacher>.flkc` at every validation.
pub fn run_stage(
    stage: u32,
    data: &TrainData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    classes: &[String],
    decode_cfg: &DecodeConfig,
    out_dir: Option<&Path>,
) -> Result<StageResult> {
    cfg.validate()?;
    decode_cfg.validate()?;
    if classes.len() != model_cfg.class_count {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            classes.len(),
            model_cfg.class_count
        )));
    }
    for (name, quota, stream) in [
        ("strong", cfg.n_strong, &data.strong),
        ("weak", cfg.n_weak, &data.weak),
        ("unlabeled", cfg.n_unlabeled, &data.unlabeled),
    ] {
        if quota > 0 && stream.is_empty() {
            return Err(Error::Config(format!("{name} quota is {quota} but the {name} stream is empty")));
        }
    }
    let stage_seed = cfg.seed ^ (stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut state = TrainState::new(model_cfg.clone(), stage_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed);
    let mut samplers = [
        Sampler::new(data.strong.len(), rng.gen()),
        Sampler::new(data.weak.len(), rng.gen()),
        Sampler::new(data.unlabeled.len(), rng.gen()),
    ];
    let metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut metrics = metrics;
    let mut log = Vec::new();
    let (mut best_student, mut best_teacher): (Option<BestCheckpoint>, Option<BestCheckpoint>) = (None, None);

    for epoch in 0..cfg.epochs {
        let (lr, cons_w) = schedules(epoch, cfg);
        let mut sums = StepLoss::default();
        for _ in 0..cfg.steps_per_epoch {
            let mut batch = Vec::with_capacity(cfg.n_strong + cfg.n_weak + cfg.n_unlabeled);
            for (k, (quota, stream)) in [
                (cfg.n_strong, &data.strong),
                (cfg.n_weak, &data.weak),
                (cfg.n_unlabeled, &data.unlabeled),
            ]
            .into_iter()
            .enumerate()
            {
                for _ in 0..quota {
                    batch.push(stream[samplers[k].next()].clone());
                }
            }
            augment(&mut batch, &cfg.augment, &mut rng)?;
            let l = train_step(&mut state, &batch, cfg, lr, cons_w, rng.gen())?;
            sums.total += l.total;
            sums.strong += l.strong;
            sums.weak += l.weak;
            sums.consistency += l.consistency;
        }
        state.epoch = epoch + 1;
        let n = cfg.steps_per_epoch as f64;
        let mut entry = EpochLog {
            epoch: epoch + 1,
            lr,
            cons_w,
            loss_total: sums.total / n,
            loss_strong: sums.strong / n,
            loss_weak: sums.weak / n,
            loss_cons: sums.consistency / n,
            val_f1_student: None,
            val_f1_teacher: None,
        };
        if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs {
            for teacher in [false, true] {
                let params = if teacher { &state.teacher } else { &state.student };
                let f1 = score(params, &data.validation, &data.validation_events, classes, decode_cfg, cfg.eval_batch)?;
                let path = match out_dir {
                    Some(dir) => {
                        let p = dir.join(checkpoint_name(stage, epoch + 1, teacher));
                        checkpoint::save(&p, params)?;
                        Some(p)
                    }
                    None => None,
                };
                let best = if teacher { &mut best_teacher } else { &mut best_student };
                if best.as_ref().is_none_or(|b| f1 > b.f1) {
                    *best = Some(BestCheckpoint {
                        epoch: epoch + 1,
                        f1,
                        path,
                        params: params.clone(),
                    });
                }
                if teacher {
                    entry.val_f1_teacher = Some(f1);
                } else {
                    entry.val_f1_student = Some(f1);
                }
            }
        }
        if let Some((f, path)) = &mut metrics {
            writeln!(f, "{}", entry.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(entry);
    }
    Ok(StageResult {
        best_student,
        best_teacher,
        log,
        state,
    })
}
