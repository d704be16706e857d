//! Pretraining loop: batch assembly, the joint loss, optimizer and EMA
//! updates, centering, collapse diagnostics, checkpointing, resume.
//!
//! Per step, per clip: a fresh mask partition; the teacher encodes the
//! masked patches and projects them through its head (both inside the
//! graph as stop-gradient constants); the student encodes the visible
//! patches; the predictor fills masked slots with the shared mask token
//! and produces latent predictions; the prediction and classification
//! losses combine with weight alpha. The optimizer updates student,
//! predictor and student head only; then the teacher encoder follows by
//! EMA (lambda), the teacher head by EMA (zeta), and the center by its
//! own EMA over the batch's teacher logits. That ordering is asserted.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::{parse_config_str, RunConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::frontend;
use crate::graph::Graph;
use crate::manifest::Manifest;
use crate::masking::{self, MaskPartition};
use crate::model::{
    bind_encoder, bind_head, bind_predictor, encoder_forward, head_forward_on,
    predictor_forward, EncoderNodes, HeadNodes, ModelState, PredictorNodes,
};
use crate::objectives::{self, CenterState};
use crate::optim::AdamW;
use crate::rng;
use crate::schedules;
use crate::steplog::{self, StepLogWriter, StepRecord};

pub const CHECKPOINT_VERSION: u64 = 1;

/// Preprocessed pretraining data: standardized patch grids, one per clip.
pub struct Dataset {
    pub patches: Vec<Array2<f64>>,
    pub n_patches: usize,
    pub grid: (usize, usize),
    pub stats: (f64, f64),
}

impl Dataset {
    /// Load every manifest entry through the frontend with the config's
    /// clip duration, standardizing with seeded dataset statistics.
    pub fn load(config: &RunConfig, manifest: &Manifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Dataset("empty pretraining manifest".into()));
        }
        let dur = config.frontend.clip_duration_s;
        let stats = frontend::compute_dataset_stats(
            manifest,
            config.frontend.stats_max_clips,
            dur,
            config.seed,
        )?;
        let expected_grid = config.grid();
        let mut patches = Vec::with_capacity(manifest.len());
        for (i, entry) in manifest.entries.iter().enumerate() {
            let mut crop_rng = rng::stream(config.seed, "crop", &[i as u64]);
            let clip = frontend::load_clip(&entry.path, dur, &mut crop_rng)?;
            let spec = frontend::log_mel(&clip)?;
            let spec = frontend::standardize(&spec, stats)?;
            let grid = frontend::patchify(&spec)?;
            if grid.grid_shape != expected_grid {
                return Err(Error::Shape(format!(
                    "{}: grid {:?} does not match configured {:?}",
                    entry.path.display(),
                    grid.grid_shape,
                    expected_grid
                )));
            }
            patches.push(grid.patches);
        }
        Ok(Dataset {
            n_patches: expected_grid.0 * expected_grid.1,
            grid: expected_grid,
            stats,
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Mean row entropy and peak mean probability of a teacher distribution
/// batch. Dominance near 1 means one output dimension dominates.
pub fn collapse_diagnostics(p_batch: &Array2<f64>) -> Result<(f64, f64)> {
    if p_batch.nrows() == 0 {
        return Err(Error::InvalidArg("diagnostics over zero rows".into()));
    }
    let k = p_batch.ncols() as f64;
    for row in p_batch.outer_iter() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArg(format!(
                "invalid probability row (sum {s})"
            )));
        }
    }
    let n = p_batch.nrows() as f64;
    let entropy = p_batch
        .outer_iter()
        .map(|row| -row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / n;
    let dominance = (0..p_batch.ncols())
        .map(|j| p_batch.column(j).sum() / n)
        .fold(f64::NEG_INFINITY, f64::max);

    let eps = 1e-9;
    if !(-eps..=k.ln() + eps).contains(&entropy) || !((1.0 / k) - eps..=1.0 + eps).contains(&dominance)
    {
        return Err(Error::Numeric(format!(
            "diagnostics out of bounds: entropy {entropy}, dominance {dominance}"
        )));
    }
    Ok((entropy, dominance))
}

/// Scalar schedule values for one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedules {
    pub lr: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub tau_t: f64,
}

pub fn schedules_at(config: &RunConfig, epoch_pos: f64) -> Result<StepSchedules> {
    let t = &config.train;
    Ok(StepSchedules {
        lr: schedules::lr_schedule(
            epoch_pos,
            t.warmup_epochs as f64,
            t.epochs as f64,
            t.base_lr,
        )?,
        lambda: schedules::lambda_schedule(
            epoch_pos,
            t.epochs as f64,
            t.lambda_start,
            t.lambda_end,
        )?,
        zeta: schedules::zeta_schedule(epoch_pos, t.epochs as f64)?,
        tau_t: schedules::tau_t_schedule(epoch_pos, t.n_tau_epochs as f64)?,
    })
}

/// Node bundle produced by [`build_clip_loss`].
pub struct ClipLoss {
    pub total: crate::graph::NodeId,
    pub l_pred: crate::graph::NodeId,
    pub l_cls: crate::graph::NodeId,
    pub teacher_logits: Array2<f64>,
    pub teacher_probs: Array2<f64>,
}

/// Assemble the full per-clip training loss on a graph. Teacher bundles
/// must be bound as constants; gradients then reach only the student
/// encoder, predictor and student head by construction.
#[allow(clippy::too_many_arguments)]
pub fn build_clip_loss(
    g: &mut Graph,
    student: &EncoderNodes,
    predictor: &PredictorNodes,
    student_head: &HeadNodes,
    teacher: &EncoderNodes,
    teacher_head: &HeadNodes,
    patches: &Array2<f64>,
    partition: &MaskPartition,
    center: &CenterState,
    sched_tau_t: f64,
    tau_s: f64,
    alpha: f64,
    predictor_pos_all: bool,
) -> Result<ClipLoss> {
    if patches.nrows() != partition.n_total {
        return Err(Error::Shape(format!(
            "{} patches vs partition over {}",
            patches.nrows(),
            partition.n_total
        )));
    }
    if partition.masked.is_empty() {
        return Err(Error::InvalidArg("cannot train with an empty mask".into()));
    }
    let (visible_patches, masked_patches) = masking::split(patches, partition)?;

    // Teacher path (constants: no gradient by construction).
    let masked_const = g.constant(masked_patches);
    let z_m_node = encoder_forward(g, teacher, masked_const, &partition.masked);
    let z_m = g.value(z_m_node).clone();
    let teacher_logits_node = head_forward_on(g, teacher_head, z_m_node);
    let teacher_logits = g.value(teacher_logits_node).clone();
    let teacher_probs = objectives::teacher_probs(&teacher_logits, sched_tau_t, center)?;

    // Student path.
    let visible_const = g.constant(visible_patches);
    let z_v = encoder_forward(g, student, visible_const, &partition.visible);
    let positions_all: Vec<usize> = (0..partition.n_total).collect();
    let z_hat = predictor_forward(g, predictor, z_v, partition, &positions_all, predictor_pos_all);

    let l_pred = objectives::pred_loss_on(g, z_hat, &z_m);
    let student_logits = head_forward_on(g, student_head, z_hat);
    let l_cls = objectives::cls_loss_on(g, student_logits, &teacher_probs, tau_s);
    let total = objectives::total_loss_on(g, l_cls, l_pred, alpha);

    Ok(ClipLoss {
        total,
        l_pred,
        l_cls,
        teacher_logits,
        teacher_probs,
    })
}

/// Names and shapes of the optimizer-visible parameters, in canonical
/// order (student encoder, predictor, student head).
pub fn trainable_specs(model: &ModelState, head_gain: bool) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut push = |n: String, a: &Array2<f64>| out.push((n, (a.nrows(), a.ncols())));
    model.student.for_each("student", &mut push);
    model.predictor.for_each("predictor", &mut push);
    model.student_head.for_each("student_head", &mut |n, a| {
        if head_gain || !n.ends_with("wn_g") {
            out.push((n, (a.nrows(), a.ncols())));
        }
    });
    out
}

fn with_trainable_mut(
    model: &mut ModelState,
    head_gain: bool,
    f: &mut dyn FnMut(&mut Array2<f64>),
) {
    model.student.for_each_mut("student", &mut |_, a| f(a));
    model.predictor.for_each_mut("predictor", &mut |_, a| f(a));
    model.student_head.for_each_mut("student_head", &mut |n, a| {
        if head_gain || !n.ends_with("wn_g") {
            f(a)
        }
    });
}

fn ema_encoder(target: &mut crate::model::EncoderParams, source: &crate::model::EncoderParams, decay: f64) -> Result<()> {
    let mut src: Vec<&Array2<f64>> = Vec::new();
    source.for_each("s", &mut |_, a| src.push(a));
    let mut i = 0;
    let mut res = Ok(());
    target.for_each_mut("t", &mut |_, a| {
        if res.is_ok() {
            res = schedules::ema_update_array(a, src[i], decay);
        }
        i += 1;
    });
    res
}

fn ema_head(target: &mut crate::model::HeadParams, source: &crate::model::HeadParams, decay: f64) -> Result<()> {
    let mut src: Vec<&Array2<f64>> = Vec::new();
    source.for_each("s", &mut |_, a| src.push(a));
    let mut i = 0;
    let mut res = Ok(());
    target.for_each_mut("t", &mut |_, a| {
        if res.is_ok() {
            res = schedules::ema_update_array(a, src[i], decay);
        }
        i += 1;
    });
    res
}

/// Enforced per-step update ordering.
#[derive(Debug, PartialEq, Eq, Clone, Copy)]
enum Phase {
    Forward,
    Optimized,
    EncoderEma,
    HeadEma,
    Centered,
}

struct UpdateOrder {
    phase: Phase,
}

impl UpdateOrder {
    fn new() -> Self {
        UpdateOrder {
            phase: Phase::Forward,
        }
    }

    fn advance(&mut self, from: Phase, to: Phase) {
        assert_eq!(
            self.phase, from,
            "update ordering violated: expected {from:?} -> {to:?}, was {:?}",
            self.phase
        );
        self.phase = to;
    }
}

/// Live training state.
pub struct Trainer {
    pub config: RunConfig,
    pub model: ModelState,
    pub opt: AdamW,
    pub epochs_done: usize,
    pub global_step: u64,
    pub stats: (f64, f64),
    collapse_run: usize,
    pub collapse_first_step: Option<u64>,
}

impl Trainer {
    pub fn new(config: RunConfig, stats: (f64, f64)) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let mut init_rng = rng::stream(config.seed, "init", &[]);
        let model = ModelState::init(&dims, config.train.center_momentum, &mut init_rng)?;
        let specs = trainable_specs(&model, config.train.train_head_gain);
        let opt = AdamW::new(&specs, config.train.weight_decay);
        Ok(Trainer {
            config,
            model,
            opt,
            epochs_done: 0,
            global_step: 0,
            stats,
            collapse_run: 0,
            collapse_first_step: None,
        })
    }

    /// One optimization step over a batch of dataset clip indices.
    pub fn train_step(&mut self, dataset: &Dataset, batch: &[usize], epoch_pos: f64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArg("empty batch".into()));
        }
        let sched = schedules_at(&self.config, epoch_pos)?;
        let t = self.config.train.clone();
        let head_gain = t.train_head_gain;
        let specs = trainable_specs(&self.model, head_gain);

        let mut order = UpdateOrder::new();
        let mut grad_acc: Vec<Array2<f64>> =
            specs.iter().map(|(_, s)| Array2::zeros(*s)).collect();
        let mut l_pred_sum = 0.0;
        let mut l_cls_sum = 0.0;
        let mut total_sum = 0.0;
        let mut pooled_logits: Vec<Array2<f64>> = Vec::new();
        let mut pooled_probs: Vec<Array2<f64>> = Vec::new();

        for &clip_idx in batch {
            let patches = dataset
                .patches
                .get(clip_idx)
                .ok_or_else(|| Error::Dataset(format!("clip index {clip_idx} out of range")))?;
            let mut mask_rng = rng::stream(
                self.config.seed,
                "mask",
                &[self.epochs_done as u64, clip_idx as u64],
            );
            let partition = masking::sample_mask(dataset.n_patches, t.mask_ratio, &mut mask_rng)?;

            let mut g = Graph::new();
            let student = bind_encoder(&mut g, &self.model.student, true);
            let predictor = bind_predictor(&mut g, &self.model.predictor, true);
            let student_head = bind_head(&mut g, &self.model.student_head, true, head_gain);
            let teacher = bind_encoder(&mut g, &self.model.teacher, false);
            let teacher_head = bind_head(&mut g, &self.model.teacher_head, false, false);

            let loss = build_clip_loss(
                &mut g,
                &student,
                &predictor,
                &student_head,
                &teacher,
                &teacher_head,
                patches,
                &partition,
                &self.model.center,
                sched.tau_t,
                t.tau_s,
                t.alpha,
                self.config.model.predictor_pos_all,
            )?;

            let total = g.scalar(loss.total);
            let l_pred = g.scalar(loss.l_pred);
            let l_cls = g.scalar(loss.l_cls);
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} (clip {clip_idx}): total={total}, l_pred={l_pred}, l_cls={l_cls}",
                    self.global_step
                )));
            }
            total_sum += total;
            l_pred_sum += l_pred;
            l_cls_sum += l_cls;

            let grads = g.backward(loss.total);
            let mut ids = Vec::with_capacity(specs.len());
            student.collect_ids(&mut ids);
            predictor.collect_ids(&mut ids);
            student_head.collect_ids(&mut ids);
            debug_assert_eq!(ids.len(), specs.len());
            for (acc, &id) in grad_acc.iter_mut().zip(&ids) {
                if let Some(gr) = grads.get_opt(id) {
                    *acc += gr;
                }
            }

            pooled_logits.push(loss.teacher_logits);
            pooled_probs.push(loss.teacher_probs);
        }

        let inv = 1.0 / batch.len() as f64;
        for gacc in &mut grad_acc {
            gacc.mapv_inplace(|v| v * inv);
        }

        // Optimizer over student-path parameters only.
        order.advance(Phase::Forward, Phase::Optimized);
        self.opt.begin_step();
        {
            let opt = &mut self.opt;
            let mut i = 0usize;
            let mut res: Result<()> = Ok(());
            with_trainable_mut(&mut self.model, head_gain, &mut |p| {
                if res.is_ok() {
                    res = opt.update_param(i, p, &grad_acc[i], sched.lr);
                }
                i += 1;
            });
            res?;
        }

        // Teacher encoder EMA, then teacher head EMA.
        order.advance(Phase::Optimized, Phase::EncoderEma);
        ema_encoder(&mut self.model.teacher, &self.model.student, sched.lambda)?;
        order.advance(Phase::EncoderEma, Phase::HeadEma);
        ema_head(&mut self.model.teacher_head, &self.model.student_head, sched.zeta)?;

        // Center update over all masked-token logits in the batch.
        order.advance(Phase::HeadEma, Phase::Centered);
        let views: Vec<_> = pooled_logits.iter().map(|a| a.view()).collect();
        let all_logits = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.model.center = objectives::update_center(&self.model.center, &all_logits)?;

        let prob_views: Vec<_> = pooled_probs.iter().map(|a| a.view()).collect();
        let all_probs = ndarray::concatenate(ndarray::Axis(0), &prob_views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (entropy, dominance) = collapse_diagnostics(&all_probs)?;

        self.global_step += 1;
        if dominance > steplog::COLLAPSE_DOMINANCE {
            self.collapse_run += 1;
            if self.collapse_run >= steplog::COLLAPSE_WINDOW && self.collapse_first_step.is_none() {
                self.collapse_first_step = Some(self.global_step);
            }
        } else {
            self.collapse_run = 0;
        }

        Ok(StepRecord {
            step: self.global_step,
            epoch: self.epochs_done as u64,
            l_pred: l_pred_sum * inv,
            l_cls: l_cls_sum * inv,
            total: total_sum * inv,
            teacher_entropy: entropy,
            dominance,
            lr: sched.lr,
            lambda: sched.lambda,
            zeta: sched.zeta,
            tau_t: sched.tau_t,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        // Checkpoints are location-independent: the embedded config
        // carries a neutral output_dir so identical runs in different
        // directories produce identical bytes.
        let mut meta_config = self.config.clone();
        meta_config.output_dir = PathBuf::from(".");
        let mut c = Container::new(meta_config.to_toml());
        c.push_scalar_u64("ckpt.version", CHECKPOINT_VERSION)?;
        c.push_scalar_u64("progress.epochs_done", self.epochs_done as u64)?;
        c.push_scalar_u64("progress.global_step", self.global_step)?;
        c.push_scalar_f64("data.stats.mean", self.stats.0)?;
        c.push_scalar_f64("data.stats.std", self.stats.1)?;
        c.push_scalar_u64(
            "progress.collapse_first_step",
            self.collapse_first_step.map_or(u64::MAX, |s| s),
        )?;
        c.push_scalar_u64("progress.collapse_run", self.collapse_run as u64)?;

        let mut res = Ok(());
        {
            let mut push = |name: String, a: &Array2<f64>| {
                if res.is_ok() {
                    res = c.push_array2(format!("model.{name}"), a);
                }
            };
            self.model.student.for_each("student", &mut push);
            self.model.teacher.for_each("teacher", &mut push);
            self.model.predictor.for_each("predictor", &mut push);
            self.model.student_head.for_each("student_head", &mut push);
            self.model.teacher_head.for_each("teacher_head", &mut push);
        }
        res?;
        let center = Array2::from_shape_fn((1, self.model.center.k()), |(_, j)| {
            self.model.center.c[j]
        });
        c.push_array2("model.center.c", &center)?;
        c.push_scalar_f64("model.center.momentum", self.model.center.momentum)?;

        c.push_scalar_u64("opt.step_count", self.opt.step_count)?;
        let specs = trainable_specs(&self.model, self.config.train.train_head_gain);
        for ((name, _), (m, v)) in specs.iter().zip(&self.opt.moments) {
            c.push_array2(format!("opt.m.{name}"), m)?;
            c.push_array2(format!("opt.v.{name}"), v)?;
        }

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        c.write(path)
    }

    /// Restore a trainer from a checkpoint file.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let version = c.get_scalar_u64("ckpt.version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config = parse_config_str(&c.meta)?;
        let dims = config.dims();
        let mut init_rng = rng::stream(config.seed, "init", &[]);
        let mut model = ModelState::init(&dims, config.train.center_momentum, &mut init_rng)?;

        let mut res: Result<()> = Ok(());
        {
            let mut fill = |name: String, a: &mut Array2<f64>| {
                if res.is_ok() {
                    match c.get_array2(&format!("model.{name}")) {
                        Ok(loaded) if loaded.raw_dim() == a.raw_dim() => *a = loaded,
                        Ok(loaded) => {
                            res = Err(Error::Checkpoint(format!(
                                "model.{name}: checkpoint shape {:?} vs expected {:?}",
                                loaded.shape(),
                                a.shape()
                            )))
                        }
                        Err(e) => res = Err(e),
                    }
                }
            };
            model.student.for_each_mut("student", &mut fill);
            model.teacher.for_each_mut("teacher", &mut fill);
            model.predictor.for_each_mut("predictor", &mut fill);
            model.student_head.for_each_mut("student_head", &mut fill);
            model.teacher_head.for_each_mut("teacher_head", &mut fill);
        }
        res?;
        let center = c.get_array2("model.center.c")?;
        if center.ncols() != dims.k {
            return Err(Error::Checkpoint(format!(
                "center K={} vs model K={}",
                center.ncols(),
                dims.k
            )));
        }
        model.center = CenterState {
            c: center.row(0).to_owned(),
            momentum: c.get_scalar_f64("model.center.momentum")?,
        };

        let specs = trainable_specs(&model, config.train.train_head_gain);
        let mut opt = AdamW::new(&specs, config.train.weight_decay);
        opt.step_count = c.get_scalar_u64("opt.step_count")?;
        for ((name, shape), slot) in specs.iter().zip(opt.moments.iter_mut()) {
            let m = c.get_array2(&format!("opt.m.{name}"))?;
            let v = c.get_array2(&format!("opt.v.{name}"))?;
            if m.raw_dim() != Array2::<f64>::zeros(*shape).raw_dim() {
                return Err(Error::Checkpoint(format!("opt.m.{name}: wrong shape")));
            }
            *slot = (m, v);
        }

        let stats = (
            c.get_scalar_f64("data.stats.mean")?,
            c.get_scalar_f64("data.stats.std")?,
        );
        let collapse_first = c.get_scalar_u64("progress.collapse_first_step")?;
        Ok(Trainer {
            epochs_done: c.get_scalar_u64("progress.epochs_done")? as usize,
            global_step: c.get_scalar_u64("progress.global_step")?,
            collapse_run: c.get_scalar_u64("progress.collapse_run")? as usize,
            collapse_first_step: (collapse_first != u64::MAX).then_some(collapse_first),
            config,
            model,
            opt,
            stats,
        })
    }
}

/// Check that a checkpoint's training/model/frontend configuration can
/// continue under `current`.
pub fn ensure_resume_compatible(current: &RunConfig, from_ckpt: &RunConfig) -> Result<()> {
    let a = current.dims();
    let b = from_ckpt.dims();
    if a != b {
        // Point at the most common mismatch directly.
        if a.k != b.k {
            return Err(Error::Checkpoint(format!(
                "model K mismatch: config {} vs checkpoint {}",
                a.k, b.k
            )));
        }
        return Err(Error::Checkpoint(format!(
            "model shape mismatch: config {a:?} vs checkpoint {b:?}"
        )));
    }
    if current.train != from_ckpt.train
        || current.frontend != from_ckpt.frontend
        || current.model != from_ckpt.model
        || current.seed != from_ckpt.seed
    {
        return Err(Error::Checkpoint(
            "training configuration differs from checkpoint; resume requires identical \
             seed, frontend, model and train sections"
                .into(),
        ));
    }
    Ok(())
}

/// Outcome of a (possibly resumed) training run.
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub epochs_done: usize,
    pub collapse_first_step: Option<u64>,
    pub records: Vec<StepRecord>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt-epoch{epoch:04}.bin"))
}

/// Run (or resume) the pretraining loop over a manifest.
pub fn train_loop(
    config: &RunConfig,
    manifest: &Manifest,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    train_loop_until(config, manifest, resume, None)
}

/// Like [`train_loop`], but optionally stop after `until` epochs while
/// keeping the full schedule horizon (a time-boxed partial run; resuming
/// later continues exactly where an uninterrupted run would have been).
pub fn train_loop_until(
    config: &RunConfig,
    manifest: &Manifest,
    resume: Option<&Path>,
    until: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = config.resolved_output_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    config.write_echo(&out_dir)?;

    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::load_checkpoint(path)?;
            ensure_resume_compatible(config, &t.config)?;
            t.config.output_dir = config.output_dir.clone();
            t
        }
        None => {
            let dataset = Dataset::load(config, manifest)?;
            let mut t = Trainer::new(config.clone(), dataset.stats)?;
            t.stats = dataset.stats;
            return run_epochs(&mut t, dataset, &out_dir, false, until);
        }
    };
    let dataset = Dataset::load(config, manifest)?;
    run_epochs(&mut trainer, dataset, &out_dir, true, until)
}

fn run_epochs(
    trainer: &mut Trainer,
    dataset: Dataset,
    out_dir: &Path,
    resumed: bool,
    until: Option<usize>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let log_path = out_dir.join("steps.csv");
    let mut log = if resumed && log_path.exists() {
        StepLogWriter::append(&log_path)?
    } else {
        StepLogWriter::create(&log_path)?
    };

    let t = trainer.config.train.clone();
    let batch = t.batch_size.min(dataset.len());
    let steps_per_epoch = dataset.len().div_ceil(batch);
    let mut records = Vec::new();
    let mut last_ckpt = None;

    let start_epoch = trainer.epochs_done;
    let end_epoch = until.map_or(t.epochs, |u| u.min(t.epochs));
    'outer: for epoch in start_epoch..end_epoch {
        // Deterministic per-epoch clip order.
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut order_rng = rng::stream(trainer.config.seed, "order", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut order_rng, 0..=i);
            order.swap(i, j);
        }

        for (step_in_epoch, chunk) in order.chunks(batch).enumerate() {
            let epoch_pos = epoch as f64 + step_in_epoch as f64 / steps_per_epoch as f64;
            let record = trainer.train_step(&dataset, chunk, epoch_pos)?;
            log.write(&record)?;
            records.push(record);
            if t.stop_on_collapse && trainer.collapse_first_step.is_some() {
                trainer.epochs_done = epoch + 1;
                let path = checkpoint_path(out_dir, trainer.epochs_done);
                trainer.save_checkpoint(&path)?;
                last_ckpt = Some(path);
                break 'outer;
            }
        }
        trainer.epochs_done = epoch + 1;

        let due = trainer.epochs_done % t.checkpoint_every_epochs == 0
            || trainer.epochs_done == end_epoch;
        if due {
            let path = checkpoint_path(out_dir, trainer.epochs_done);
            trainer.save_checkpoint(&path)?;
            last_ckpt = Some(path);
        }
    }

    let last_checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            // Resumed at completion: re-save the final state.
            let path = checkpoint_path(out_dir, trainer.epochs_done);
            trainer.save_checkpoint(&path)?;
            path
        }
    };

    Ok(TrainOutcome {
        last_checkpoint,
        log_path,
        epochs_done: trainer.epochs_done,
        collapse_first_step: trainer.collapse_first_step,
        records,
    })
}
