//! Offline datasets: collection, proportioned mixing, minibatch sampling and
//! the JSON Lines file format.
//!
//! File layout (UTF-8, one JSON object per line):
//!
//! ```text
//! {"format_version":1,"env":"one_step_jump","obs_dim":1,"act_dim":1,"seed":1,"tier_counts":{"random":5,"expert":5}}
//! {"s":[0.0],"a":[7.03],"r":10.0,"s_next":[7.03],"done":true,"tier":"expert"}
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a written file
//! reproduces every bit of the in-memory dataset.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{self, BehaviorTier, EnvSpec};
use crate::rng::StreamRng;
use crate::{Error, Matrix, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub tier: BehaviorTier,
}

impl Transition {
    fn bit_eq(&self, other: &Self) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        same(&self.s, &other.s)
            && same(&self.a, &other.a)
            && self.r.to_bits() == other.r.to_bits()
            && same(&self.s_next, &other.s_next)
            && self.done == other.done
            && self.tier == other.tier
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub tier_counts: BTreeMap<BehaviorTier, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub spec: EnvSpec,
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

fn count_tiers(transitions: &[Transition]) -> BTreeMap<BehaviorTier, usize> {
    let mut counts = BTreeMap::new();
    for t in transitions {
        *counts.entry(t.tier).or_insert(0) += 1;
    }
    counts
}

impl OfflineDataset {
    /// Builds a dataset, validating dimensions and deriving tier counts.
    pub fn new(spec: EnvSpec, transitions: Vec<Transition>, seed: u64) -> Result<Self> {
        for (i, t) in transitions.iter().enumerate() {
            check_dims(&spec, t).map_err(|m| Error::Shape(format!("transition {i}: {m}")))?;
        }
        let tier_counts = count_tiers(&transitions);
        Ok(Self {
            spec,
            transitions,
            meta: DatasetMeta { seed, tier_counts },
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.meta == other.meta
            && self.transitions.len() == other.transitions.len()
            && self
                .transitions
                .iter()
                .zip(&other.transitions)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn mean_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum::<f64>() / self.len().max(1) as f64
    }
}

fn check_dims(spec: &EnvSpec, t: &Transition) -> std::result::Result<(), String> {
    if t.s.len() != spec.obs_dim || t.s_next.len() != spec.obs_dim {
        return Err(format!(
            "state has {} / next state {} entries, obs_dim is {}",
            t.s.len(),
            t.s_next.len(),
            spec.obs_dim
        ));
    }
    if t.a.len() != spec.act_dim {
        return Err(format!("action has {} entries, act_dim is {}", t.a.len(), spec.act_dim));
    }
    Ok(())
}

/// Rolls out the scripted `tier` policy until exactly `n_transitions` have
/// been recorded; the last episode may be cut short.
pub fn collect(spec: &EnvSpec, tier: BehaviorTier, n_transitions: usize, rng: &mut StreamRng) -> Result<OfflineDataset> {
    if n_transitions == 0 {
        return Err(Error::InvalidArgument("n_transitions must be >= 1".into()));
    }
    let mut transitions = Vec::with_capacity(n_transitions);
    while transitions.len() < n_transitions {
        let mut state = envs::reset(spec, rng);
        while !state.terminated && transitions.len() < n_transitions {
            let a = envs::scripted_action(spec, tier, &state, rng);
            let out = envs::step(spec, &state, &a)?;
            transitions.push(Transition {
                s: state.observation.clone(),
                a,
                r: out.reward,
                s_next: out.next.observation.clone(),
                done: out.next.terminated,
                tier,
            });
            state = out.next;
        }
    }
    OfflineDataset::new(spec.clone(), transitions, rng.root_seed())
}

/// Target composition of a mixed dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MixRecipe {
    pub components: Vec<(BehaviorTier, f64)>,
    pub total: usize,
}

impl MixRecipe {
    pub fn new(components: Vec<(BehaviorTier, f64)>, total: usize) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mix recipe has no components".into()));
        }
        if total == 0 {
            return Err(Error::InvalidArgument("mix total must be >= 1".into()));
        }
        for (i, (tier, p)) in components.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidArgument(format!("proportion for {tier} is {p}, outside [0, 1]")));
            }
            if components[..i].iter().any(|(t, _)| t == tier) {
                return Err(Error::InvalidArgument(format!("tier {tier} listed twice")));
            }
        }
        let sum: f64 = components.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("proportions sum to {sum}, expected 1")));
        }
        Ok(Self { components, total })
    }

    /// Parses `random:0.5,expert:0.5`.
    pub fn parse(text: &str, total: usize) -> Result<Self> {
        let mut components = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (tier, prop) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("expected tier:proportion, got {part:?}")))?;
            let prop: f64 = prop
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad proportion in {part:?}")))?;
            components.push((tier.trim().parse()?, prop));
        }
        Self::new(components, total)
    }

    /// Transition count per component; the rounding remainder goes to the first.
    pub fn shares(&self) -> Vec<(BehaviorTier, usize)> {
        let mut shares: Vec<(BehaviorTier, usize)> = self
            .components
            .iter()
            // the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
            .map(|&(t, p)| (t, (p * self.total as f64 + 1e-9).floor() as usize))
            .collect();
        let assigned: usize = shares.iter().map(|(_, n)| n).sum();
        shares[0].1 = (shares[0].1 + self.total).saturating_sub(assigned);
        shares
    }
}

/// Subsamples each source without replacement per the recipe and shuffles the union.
pub fn mix(recipe: &MixRecipe, sources: &BTreeMap<BehaviorTier, OfflineDataset>, rng: &mut StreamRng) -> Result<OfflineDataset> {
    let mut spec: Option<&EnvSpec> = None;
    let mut transitions = Vec::with_capacity(recipe.total);
    for (tier, count) in recipe.shares() {
        if count == 0 {
            continue;
        }
        let source = sources
            .get(&tier)
            .ok_or_else(|| Error::InvalidArgument(format!("no source dataset for tier {tier}")))?;
        if let Some(s) = spec {
            if *s != source.spec {
                return Err(Error::InvalidArgument("source datasets come from different environments".into()));
            }
        }
        spec = Some(&source.spec);
        if source.len() < count {
            return Err(Error::InvalidArgument(format!(
                "source for {tier} has {} transitions, recipe needs {count} (short by {})",
                source.len(),
                count - source.len()
            )));
        }
        for i in index::sample(rng, source.len(), count) {
            transitions.push(source.transitions[i].clone());
        }
    }
    transitions.shuffle(rng);
    let spec = spec.expect("recipe total >= 1 implies a non-empty component").clone();
    OfflineDataset::new(spec, transitions, rng.root_seed())
}

/// Uniform sampling with replacement.
pub fn sample_indices<R: Rng + ?Sized>(dataset: &OfflineDataset, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
    }
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} not in 1..={}",
            dataset.len()
        )));
    }
    Ok((0..batch_size).map(|_| rng.random_range(0..dataset.len())).collect())
}

pub fn sample_batch<'d, R: Rng + ?Sized>(
    dataset: &'d OfflineDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'d Transition>> {
    Ok(sample_indices(dataset, batch_size, rng)?
        .into_iter()
        .map(|i| &dataset.transitions[i])
        .collect())
}

/// A minibatch laid out as matrices, one row per transition.
#[derive(Clone, Debug)]
pub struct Batch {
    pub s: Matrix,
    pub a: Matrix,
    pub r: Vec<f64>,
    pub s_next: Matrix,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(transitions: &[&Transition]) -> Self {
        let n = transitions.len();
        let obs = transitions.first().map_or(0, |t| t.s.len());
        let act = transitions.first().map_or(0, |t| t.a.len());
        Self {
            s: Matrix::from_shape_fn((n, obs), |(i, j)| transitions[i].s[j]),
            a: Matrix::from_shape_fn((n, act), |(i, j)| transitions[i].a[j]),
            r: transitions.iter().map(|t| t.r).collect(),
            s_next: Matrix::from_shape_fn((n, obs), |(i, j)| transitions[i].s_next[j]),
            done: transitions.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRecord {
    format_version: u32,
    env: String,
    obs_dim: usize,
    act_dim: usize,
    seed: u64,
    tier_counts: BTreeMap<BehaviorTier, usize>,
}

pub fn write_dataset(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    if let Some(i) = dataset.transitions.iter().position(|t| {
        !(t.r.is_finite() && t.s.iter().chain(&t.a).chain(&t.s_next).all(|v| v.is_finite()))
    }) {
        return Err(Error::NonFinite(format!("transition {i} cannot be serialized")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let meta = MetaRecord {
        format_version: FORMAT_VERSION,
        env: dataset.spec.name().to_string(),
        obs_dim: dataset.spec.obs_dim,
        act_dim: dataset.spec.act_dim,
        seed: dataset.meta.seed,
        tier_counts: dataset.meta.tier_counts.clone(),
    };
    let line_err = |e: serde_json::Error| Error::io(path, std::io::Error::other(e));
    serde_json::to_writer(&mut out, &meta).map_err(line_err)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for t in &dataset.transitions {
        serde_json::to_writer(&mut out, t).map_err(line_err)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();

    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "empty file, missing meta line".into())),
    };
    let meta: MetaRecord = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(parse_err(1, format!("unsupported format_version {}", meta.format_version)));
    }
    let spec = EnvSpec::from_kind(meta.env.parse().map_err(|e: Error| parse_err(1, e.to_string()))?);
    if spec.obs_dim != meta.obs_dim || spec.act_dim != meta.act_dim {
        return Err(parse_err(
            1,
            format!("{} has obs_dim {} / act_dim {}", spec.name(), spec.obs_dim, spec.act_dim),
        ));
    }
    let expected: usize = meta.tier_counts.values().sum();

    let mut transitions = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            return Err(parse_err(line_no, "blank line".into()));
        }
        let t: Transition = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if t.s.len() != meta.obs_dim || t.s_next.len() != meta.obs_dim || t.a.len() != meta.act_dim {
            return Err(parse_err(
                line_no,
                format!(
                    "dimension mismatch: s {} / a {} / s_next {} against obs_dim {} / act_dim {}",
                    t.s.len(),
                    t.a.len(),
                    t.s_next.len(),
                    meta.obs_dim,
                    meta.act_dim
                ),
            ));
        }
        transitions.push(t);
    }
    if transitions.len() != expected {
        return Err(parse_err(
            transitions.len() + 2,
            format!("truncated: meta announces {expected} transitions, found {}", transitions.len()),
        ));
    }
    let counts = count_tiers(&transitions);
    if counts != meta.tier_counts {
        return Err(parse_err(1, format!("tier_counts {:?} disagree with the file body {counts:?}", meta.tier_counts)));
    }
    Ok(OfflineDataset {
        spec,
        transitions,
        meta: DatasetMeta {
            seed: meta.seed,
            tier_counts: counts,
        },
    })
}
