use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{named_rng, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

/// A dataset item eligible for a queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueSample {
    /// Caller-side index of the sample.
    pub index: usize,
    pub class: usize,
    pub label: Label,
}

/// Per-class store of detached global features and semantic tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue<R: Real> {
    pub class: usize,
    pub epoch: usize,
    /// Caller-side sample indices, in queue order.
    pub members: Vec<usize>,
    pub labels: Vec<Label>,
    /// Unit-norm visual features, `[m, C_f]`.
    pub z: Tensor<R>,
    /// Semantic tokens, `[m, C_t]`.
    pub theta: Tensor<R>,
}

impl<R: Real> MemoryQueue<R> {
    pub fn new(
        class: usize,
        epoch: usize,
        members: Vec<usize>,
        labels: Vec<Label>,
        z: Tensor<R>,
        theta: Tensor<R>,
    ) -> Result<Self> {
        let m = members.len();
        if m == 0
            || labels.len() != m
            || z.rank() != 2
            || theta.rank() != 2
            || z.shape()[0] != m
            || theta.shape()[0] != m
        {
            return Err(Error::shape(format!(
                "queue for class {class}: {m} members, {} labels, z {:?}, theta {:?}",
                labels.len(),
                z.shape(),
                theta.shape()
            )));
        }
        if !labels.contains(&Label::Normal) {
            return Err(Error::Dataset(format!("queue for class {class} has no normal entry")));
        }
        for r in 0..m {
            let n = z.row(r).iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::contract(format!(
                    "queue entry {r} of class {class} has norm {n}"
                )));
            }
        }
        Ok(Self {
            class,
            epoch,
            members,
            labels,
            z,
            theta,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Queue positions of normal entries.
    pub fn positives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Label::Normal)
            .map(|(i, _)| i)
            .collect()
    }

    /// Builds one queue per class from `members`, calling `embed` for the
    /// `(z, theta)` pair of each selected sample.
    pub fn build_all<F>(
        samples: &[QueueSample],
        members: &BTreeMap<usize, Vec<usize>>,
        epoch: usize,
        mut embed: F,
    ) -> Result<BTreeMap<usize, Self>>
    where
        F: FnMut(&QueueSample) -> Result<(Vec<R>, Vec<R>)>,
    {
        let mut out = BTreeMap::new();
        for (&class, picks) in members {
            let mut z = Vec::new();
            let mut theta = Vec::new();
            let mut dims = (0, 0);
            for &p in picks {
                let (zi, ti) = embed(&samples[p])?;
                dims = (zi.len(), ti.len());
                z.extend(zi);
                theta.extend(ti);
            }
            let m = picks.len();
            let q = Self::new(
                class,
                epoch,
                picks.iter().map(|&p| samples[p].index).collect(),
                picks.iter().map(|&p| samples[p].label).collect(),
                Tensor::new(&[m, dims.0], z)?,
                Tensor::new(&[m, dims.1], theta)?,
            )?;
            out.insert(class, q);
        }
        Ok(out)
    }
}

/// Per class, reservoir-samples `round(fraction * count)` items of each label
/// (at least `min_per_label` when available). Returns positions into
/// `samples`, normal entries first, each group in sample order.
pub fn select_members(
    samples: &[QueueSample],
    fraction: f64,
    min_per_label: usize,
    seed: u64,
    epoch: usize,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<(usize, Label), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.class, s.label)).or_default().push(i);
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = samples.iter().map(|s| s.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut out = BTreeMap::new();
    for class in classes {
        if !groups.contains_key(&(class, Label::Normal)) {
            return Err(Error::Dataset(format!(
                "class {class} has no normal sample for its queue"
            )));
        }
        let mut picked = Vec::new();
        for label in [Label::Normal, Label::Abnormal] {
            let Some(items) = groups.get(&(class, label)) else {
                continue;
            };
            let k = ((fraction * items.len() as f64).round() as usize)
                .max(min_per_label)
                .clamp(1, items.len());
            let mut rng = named_rng(
                seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                &format!("dssl.queue.{class}.{}", label.as_str()),
            );
            let mut reservoir: Vec<usize> = items[..k].to_vec();
            for (t, &item) in items.iter().enumerate().skip(k) {
                let j = rng.gen_range(0..=t);
                if j < k {
                    reservoir[j] = item;
                }
            }
            reservoir.sort_unstable();
            picked.extend(reservoir);
        }
        out.insert(class, picked);
    }
    Ok(out)
}

/// One line per entry: `class<TAB>label<TAB>branch<TAB>v1,v2,...`.
pub fn write_queue_dump<R: Real>(queues: &BTreeMap<usize, MemoryQueue<R>>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let fmt = |row: &[R]| {
        row.iter()
            .map(|v| format!("{}", v.as_f64()))
            .collect::<Vec<_>>()
            .join(",")
    };
    for q in queues.values() {
        for i in 0..q.len() {
            let label = q.labels[i].as_str();
            writeln!(f, "{}\t{label}\tvisual\t{}", q.class, fmt(q.z.row(i))).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}\t{label}\ttext\t{}", q.class, fmt(q.theta.row(i))).map_err(|e| Error::io(path, e))?;
        }
    }
    f.flush().map_err(|e| Error::io(path, e))
}
