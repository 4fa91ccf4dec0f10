use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::databench::{task_texts, Dataset, Record, TaskKind};
use crate::dssl::{sample_patch_boxes, select_members, write_queue_dump, Label, MemoryQueue, QueueSample};
use crate::error::{Error, Result};
use crate::numcore::{checkpoint, cosine_lr, named_rng, AdamW, Graph, ParamStore, Real, Tensor};
use crate::seghead::total_loss;

use super::config::RunConfig;
use super::model::{resize, Example, Model};
use super::{resolve_split, CHECKPOINT_FILE, CONFIG_FILE, LOSSES_FILE, OPTIMIZER_FILE, QUEUE_FILE, STATE_FILE};

/// Mean loss components of one epoch. `pbsd` averages over the examples
/// that computed it and is 0 when none did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub txt: f64,
    pub seg: f64,
    pub pbsd: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Total memory-queue entries built for the epoch.
    pub queue_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the files in the output directory when present.
    pub resume: bool,
    /// Stop after this many epochs in total (the schedule still spans all
    /// configured epochs).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<EpochLosses>,
    pub checkpoint: PathBuf,
}

/// A training image held in memory at the model's input size.
#[derive(Clone, Debug)]
pub struct LoadedItem<R: Real> {
    pub record: Record,
    pub image: Tensor<R>,
    pub mask: Tensor<R>,
}

impl<R: Real> LoadedItem<R> {
    pub fn label(&self) -> Label {
        if self.record.is_abnormal() {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

/// Loads the `split` records of `classes`, resized to `size`.
pub fn load_items<R: Real>(ds: &Dataset, classes: &[usize], split: &str, size: usize) -> Result<Vec<LoadedItem<R>>> {
    let items = ds
        .records()
        .iter()
        .filter(|r| classes.contains(&r.class_id) && r.split == split)
        .map(|r| {
            let image = resize(&ds.load_image::<R>(r)?, size, size)?;
            let mask = resize(&ds.load_mask::<R>(r)?, size, size)?;
            let mask = Tensor::new(
                mask.shape(),
                mask.data()
                    .iter()
                    .map(|&v| if v.as_f64() >= 0.5 { R::one() } else { R::zero() })
                    .collect(),
            )?;
            Ok(LoadedItem {
                record: r.clone(),
                image,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::Dataset(format!("no `{split}` images for classes {classes:?}")));
    }
    Ok(items)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

fn task_pattern(mix: [usize; 3]) -> Vec<TaskKind> {
    let kinds = [TaskKind::SegOnly, TaskKind::SegAnswer, TaskKind::Vqa];
    kinds
        .iter()
        .zip(mix)
        .flat_map(|(&k, n)| std::iter::repeat(k).take(n))
        .collect()
}

/// Per-class memory queues for `epoch`, built with the current weights.
pub fn build_queues<R: Real>(
    cfg: &RunConfig,
    model: &Model,
    store: &ParamStore<R>,
    items: &[LoadedItem<R>],
    epoch: usize,
) -> Result<BTreeMap<usize, MemoryQueue<R>>> {
    let samples: Vec<QueueSample> = items
        .iter()
        .enumerate()
        .map(|(i, it)| QueueSample {
            index: i,
            class: it.record.class_id,
            label: it.label(),
        })
        .collect();
    let d = &cfg.model.dssl;
    let members = select_members(&samples, d.queue_fraction, d.queue_min_per_label, cfg.seed, epoch)?;
    MemoryQueue::build_all(&samples, &members, epoch, |q| {
        let it = &items[q.index];
        model.queue_entry(store, &it.image, &it.record.normal_text)
    })
}

fn read_losses(path: &Path) -> Result<Vec<EpochLosses>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("malformed loss row `{l}`")))
            };
            Ok(EpochLosses {
                epoch: num(0)? as usize,
                total: num(1)?,
                txt: num(2)?,
                seg: num(3)?,
                pbsd: num(4)?,
                lr: num(5)?,
                queue_entries: num(6)? as usize,
            })
        })
        .collect()
}

pub fn write_losses(path: &Path, losses: &[EpochLosses]) -> Result<()> {
    let mut out = String::from("epoch,total,txt,seg,pbsd,lr,queue_entries\n");
    for l in losses {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{}\n",
            l.epoch, l.total, l.txt, l.seg, l.pbsd, l.lr, l.queue_entries
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

/// Trains from scratch (or resumes) and writes checkpoint, optimizer state,
/// losses and queue dump to `cfg.out_dir` after every epoch.
pub fn train<R: Real>(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    let split = resolve_split(cfg, &ds)?;
    let (model, mut store) = Model::build::<R>(cfg.seed, &cfg.model)?;
    let items = load_items::<R>(&ds, &split.train, &cfg.train_split, model.image_size())?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut opt = AdamW::new(&store, cfg.optim.weight_decay);
    let mut state = TrainState {
        epochs_done: 0,
        steps: 0,
    };
    let mut losses = Vec::new();
    if opts.resume && out.join(STATE_FILE).exists() {
        let saved = RunConfig::load(&out.join(CONFIG_FILE))?;
        if saved.model != cfg.model || saved.seed != cfg.seed || saved.optim != cfg.optim || saved.loss != cfg.loss {
            return Err(Error::Config(
                "cannot resume: run configuration differs from the saved one".into(),
            ));
        }
        let text = fs::read_to_string(out.join(STATE_FILE)).map_err(|e| Error::io(out.join(STATE_FILE), e))?;
        state = serde_json::from_str(&text)?;
        checkpoint::restore_into(&mut store, &checkpoint::load(out.join(CHECKPOINT_FILE))?)?;
        opt.load_state(&store, &checkpoint::load(out.join(OPTIMIZER_FILE))?)?;
        losses = read_losses(&out.join(LOSSES_FILE))?;
        losses.truncate(state.epochs_done);
        log::info!("resuming after epoch {}", state.epochs_done);
    }
    cfg.save(&out.join(CONFIG_FILE))?;

    let size = model.image_size();
    let batch = cfg.optim.batch_size;
    let steps_per_epoch = items.len().div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.optim.epochs;
    let pattern = task_pattern(cfg.task_mix);
    let last = opts.stop_after.unwrap_or(cfg.optim.epochs).min(cfg.optim.epochs);
    let d = &cfg.model.dssl;

    for epoch in state.epochs_done..last {
        let queues = build_queues(cfg, &model, &store, &items, epoch)?;
        write_queue_dump(&queues, &out.join(QUEUE_FILE))?;
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut named_rng(mix(cfg.seed, epoch as u64, 0), "train.order"));

        let (mut sum_total, mut sum_txt, mut sum_seg, mut sum_pbsd) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_seg, mut n_pbsd) = (0usize, 0usize);
        let mut lr = 0.0;
        for (chunk_no, chunk) in order.chunks(batch).enumerate() {
            for (k, &i) in chunk.iter().enumerate() {
                let it = &items[i];
                let kind = pattern[(chunk_no * batch + k) % pattern.len()];
                let r = &it.record;
                let (instruction, answer) = task_texts(kind, &r.class, &r.normal_text, r.defect_type);
                let boxes = if kind.has_seg() && cfg.loss.pbsd > 0.0 {
                    sample_patch_boxes(
                        size,
                        size,
                        d.num_boxes,
                        d.box_min_frac,
                        d.box_max_frac,
                        mix(cfg.seed, epoch as u64 + 1, i as u64 + 1),
                    )?
                } else {
                    Vec::new()
                };
                let ex = Example {
                    image: &it.image,
                    mask: &it.mask,
                    instruction: &instruction,
                    answer: &answer,
                    normal_text: &r.normal_text,
                    has_seg: kind.has_seg(),
                };
                let mut g = Graph::<R>::new();
                let c = model.example_losses(&mut g, &store, &ex, queues.get(&r.class_id), &boxes, &cfg.loss)?;
                let total = total_loss(&mut g, &c, &cfg.loss)?;
                let value = |v: Option<crate::numcore::Var>, g: &Graph<R>| v.map(|v| g.value(v).item().as_f64());
                sum_total += g.value(total).item().as_f64();
                sum_txt += value(c.txt, &g).unwrap_or(0.0);
                if let Some(v) = value(c.seg, &g) {
                    sum_seg += v;
                    n_seg += 1;
                }
                if let Some(v) = value(c.pbsd, &g) {
                    sum_pbsd += v;
                    n_pbsd += 1;
                }
                let scaled = g.scale(total, 1.0 / chunk.len() as f64)?;
                g.backward(scaled)?;
                g.accumulate_param_grads(&mut store);
            }
            if let Some(max) = cfg.optim.grad_clip {
                let norm = store.clip_grad_norm(max);
                if !norm.is_finite() {
                    return Err(Error::NonFiniteLoss("gradient".into()));
                }
            }
            lr = cosine_lr(state.steps, total_steps, cfg.optim.lr, cfg.optim.warmup_frac);
            opt.step(&mut store, lr);
            store.zero_grad();
            state.steps += 1;
        }
        let n = items.len() as f64;
        let row = EpochLosses {
            epoch: epoch + 1,
            total: sum_total / n,
            txt: sum_txt / n,
            seg: if n_seg > 0 { sum_seg / n_seg as f64 } else { 0.0 },
            pbsd: if n_pbsd > 0 { sum_pbsd / n_pbsd as f64 } else { 0.0 },
            lr,
            queue_entries: queues.values().map(|q| q.len()).sum(),
        };
        log::info!(
            "epoch {}: total {:.4} txt {:.4} seg {:.4} pbsd {:.4}",
            row.epoch,
            row.total,
            row.txt,
            row.seg,
            row.pbsd
        );
        losses.push(row);
        state.epochs_done = epoch + 1;
        checkpoint::save(&store, out.join(CHECKPOINT_FILE))?;
        checkpoint::save(&opt.state(&store)?, out.join(OPTIMIZER_FILE))?;
        write_losses(&out.join(LOSSES_FILE), &losses)?;
        write_json(&out.join(STATE_FILE), &state)?;
    }
    Ok(TrainOutcome {
        losses,
        checkpoint: out.join(CHECKPOINT_FILE),
    })
}
