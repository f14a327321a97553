//! Rollout evaluation, fixed-condition sweeps, PCA of latent codes and
//! multi-seed aggregation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{env_normalized_score, reset, step, EnvSpec};
use crate::rng::StreamRng;
use crate::{Error, Result};

pub const DEFAULT_EPISODES: usize = 10;
pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 1000;

/// Anything that maps `(s, ξ)` to an action in environment units.
pub trait Policy {
    fn act(&self, s: &[f64], xi: f64) -> Result<Vec<f64>>;

    /// The latent code behind the action, for policies that have one.
    fn latent(&self, _s: &[f64], _xi: f64) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, s: &[f64], xi: f64) -> Result<Vec<f64>> {
        (**self).act(s, xi)
    }

    fn latent(&self, s: &[f64], xi: f64) -> Result<Option<Vec<f64>>> {
        (**self).latent(s, xi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    pub episodes: usize,
    pub xi_used: f64,
}

/// The JSON form written by the command-line tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub variant: String,
    pub seed: u64,
    pub xi: f64,
    pub mean: f64,
    pub std: f64,
    pub norm_score: f64,
    pub episodes: usize,
}

impl EvalRecord {
    pub fn new(variant: &str, seed: u64, report: &EvalReport) -> Self {
        Self {
            variant: variant.to_string(),
            seed,
            xi: report.xi_used,
            mean: report.mean_return,
            std: report.std_return,
            norm_score: report.normalized_score,
            episodes: report.episodes,
        }
    }
}

fn check_xi(xi: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&xi) {
        return Err(Error::InvalidArgument(format!("advantage condition {xi} outside [-1, 1]")));
    }
    Ok(())
}

/// Undiscounted return of one episode acting with a fixed condition.
pub fn rollout<P: Policy + ?Sized, R: Rng + ?Sized>(policy: &P, spec: &EnvSpec, xi: f64, rng: &mut R) -> Result<f64> {
    let state = reset(spec, rng);
    rollout_from(policy, spec, xi, state)
}

fn rollout_from<P: Policy + ?Sized>(policy: &P, spec: &EnvSpec, xi: f64, mut state: crate::envs::EnvState) -> Result<f64> {
    let mut ret = 0.0;
    while !state.terminated {
        let a = policy.act(&state.observation, xi)?;
        let out = step(spec, &state, &a)?;
        ret += out.reward;
        state = out.next;
    }
    Ok(ret)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    xi: f64,
    n_episodes: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    check_xi(xi)?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let returns = (0..n_episodes)
        .map(|_| rollout(policy, spec, xi, rng))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&returns);
    Ok(EvalReport {
        mean_return: mean,
        std_return: std,
        normalized_score: env_normalized_score(spec.kind, mean),
        episodes: n_episodes,
        xi_used: xi,
    })
}

/// One report per condition, each replaying the same environment stream.
pub fn xi_sweep<P: Policy + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    xis: &[f64],
    n_episodes: usize,
    rng: &StreamRng,
) -> Result<Vec<EvalReport>> {
    xis.iter()
        .map(|&xi| evaluate(policy, spec, xi, n_episodes, &mut rng.clone()))
        .collect()
}

/// Mean and population std of per-seed mean returns.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<(f64, f64)> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs at least 2 seeds, got {}",
            reports.len()
        )));
    }
    Ok(mean_std(&reports.iter().map(|r| r.mean_return).collect::<Vec<_>>()))
}

#[derive(Clone, Debug)]
pub struct Pca2 {
    pub projected: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
    /// Set when the points span fewer than two directions; the second
    /// component is then an arbitrary unit vector orthogonal to the first.
    pub degenerate: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn orthogonalize(v: &mut [f64], against: &[&[f64]]) {
    for u in against {
        let d = dot(v, u);
        v.iter_mut().zip(u.iter()).for_each(|(x, y)| *x -= d * y);
    }
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Leading eigenvector of a PSD matrix restricted to the complement of
/// `against`, by power iteration from each basis vector in turn.
fn leading_eigen(m: &[Vec<f64>], against: &[&[f64]]) -> Option<(Vec<f64>, f64)> {
    let d = m.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in 0..d {
        let mut v = vec![0.0; d];
        v[start] = 1.0;
        orthogonalize(&mut v, against);
        if normalize(&mut v) < 1e-12 {
            continue;
        }
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut next = mat_vec(m, &v);
            orthogonalize(&mut next, against);
            if normalize(&mut next) < 1e-300 {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            v = next;
            if delta < PCA_TOLERANCE {
                break;
            }
        }
        let rq = dot(&v, &mat_vec(m, &v));
        if best.as_ref().is_none_or(|(_, b)| rq > *b + 1e-12) {
            best = Some((v, rq));
        }
    }
    best
}

/// Top-two principal components and the centred projection onto them.
pub fn pca2(points: &[Vec<f64>]) -> Result<Pca2> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("pca2 needs at least 3 points, got {}", points.len())));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(Error::InvalidArgument("pca2 needs dimension at least 2".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("pca2 points have mixed dimensions".into()));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pca2 input".into()));
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j] / n;
            }
        }
    }
    let total: f64 = (0..d).map(|i| cov[i][i]).sum();
    let scale_floor = 1e-12 * total.max(f64::MIN_POSITIVE);

    let (mut c1, l1) = leading_eigen(&cov, &[]).expect("a basis vector survives with no constraints");
    fix_sign(&mut c1);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i][j] -= l1 * c1[i] * c1[j];
        }
    }
    let (mut c2, l2) = leading_eigen(&deflated, &[&c1]).expect("dimension >= 2 leaves a direction");
    // one more pass keeps the pair orthonormal to rounding
    orthogonalize(&mut c2, &[&c1]);
    normalize(&mut c2);
    fix_sign(&mut c2);
    let l2 = l2.max(0.0);
    let degenerate = l1 <= scale_floor || l2 <= scale_floor;

    let projected = centred.iter().map(|p| [dot(p, &c1), dot(p, &c2)]).collect();
    Ok(Pca2 {
        projected,
        components: [c1, c2],
        variances: [l1.max(0.0), l2],
        degenerate,
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length samples of size >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug)]
pub struct LatentRow {
    pub xi: f64,
    pub latent: Vec<f64>,
    pub projected: [f64; 2],
    pub rollout_return: f64,
}

#[derive(Clone, Debug)]
pub struct LatentDump {
    pub rows: Vec<LatentRow>,
    pub pca: Pca2,
}

/// Samples conditions uniformly from `[-1, 1]`, records the policy latent at a
/// fresh initial state, its PCA projection and one episode's return.
pub fn latent_dump<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    n_samples: usize,
    rng: &mut R,
) -> Result<LatentDump> {
    let mut xis = Vec::with_capacity(n_samples);
    let mut latents = Vec::with_capacity(n_samples);
    let mut returns = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let xi = rng.random_range(-1.0..=1.0);
        let s0 = reset(spec, rng);
        let z = policy
            .latent(&s0.observation, xi)?
            .ok_or_else(|| Error::InvalidArgument("policy has no latent representation".into()))?;
        returns.push(rollout_from(policy, spec, xi, s0)?);
        xis.push(xi);
        latents.push(z);
    }
    let pca = pca2(&latents)?;
    let rows = (0..n_samples)
        .map(|i| LatentRow {
            xi: xis[i],
            latent: std::mem::take(&mut latents[i]),
            projected: pca.projected[i],
            rollout_return: returns[i],
        })
        .collect();
    Ok(LatentDump { rows, pca })
}

pub fn write_latent_csv(dump: &LatentDump, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let k = dump.rows.first().map_or(0, |r| r.latent.len());
    let mut header = vec!["xi".to_string()];
    header.extend((0..k).map(|j| format!("z_{j}")));
    header.extend(["p_0", "p_1", "ret"].map(String::from));
    let mut text = header.join(",");
    text.push('\n');
    for row in &dump.rows {
        let mut fields = vec![row.xi.to_string()];
        fields.extend(row.latent.iter().map(f64::to_string));
        fields.extend([row.projected[0], row.projected[1], row.rollout_return].map(|v| v.to_string()));
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn export_latent_dump<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    n_samples: usize,
    rng: &mut R,
    path: &Path,
) -> Result<LatentDump> {
    let dump = latent_dump(policy, spec, n_samples, rng)?;
    write_latent_csv(&dump, path)?;
    Ok(dump)
}

/// Scripted behavior tier wrapped as a policy; ignores the condition.
pub struct ScriptedPolicy<'a> {
    pub spec: &'a EnvSpec,
    pub tier: crate::envs::BehaviorTier,
    pub rng: std::cell::RefCell<StreamRng>,
}

impl Policy for ScriptedPolicy<'_> {
    fn act(&self, s: &[f64], _xi: f64) -> Result<Vec<f64>> {
        let state = crate::envs::EnvState {
            observation: s.to_vec(),
            step_index: 0,
            terminated: false,
        };
        Ok(crate::envs::scripted_action(self.spec, self.tier, &state, &mut *self.rng.borrow_mut()))
    }
}
