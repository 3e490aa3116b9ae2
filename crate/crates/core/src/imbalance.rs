//! Cluster-driven handling of class imbalance without labels.
//!
//! Representations of a candidate pool are clustered with k-means. Sample
//! re-weighting (RE) gives each sample the inverse frequency of its cluster;
//! sample selection (SE) builds a batch around the two centroids that lie
//! farthest apart. [`BatchPlanner`] turns either strategy into a stream of
//! training batches after a plain warm-up epoch.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub frequencies: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn validate_points(points: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k ≥ 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!("k-means with k = {k} on only {} points", points.len())));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("k-means points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: "k-means input".into() });
    }
    Ok(d)
}

/// Nearest centroid per point; ties go to the lower centroid index.
pub fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn inertia_of(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points.iter().zip(assignments).map(|(p, a)| sq_dist(p, &centroids[*a])).sum()
}

fn frequencies(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut f = vec![0; k];
    for a in assignments {
        f[*a] += 1;
    }
    f
}

fn means(points: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let d = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, a) in points.iter().zip(assignments) {
        counts[*a] += 1;
        for (s, v) in sums[*a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
    }
}

/// Moves, for every empty cluster, the point farthest from its own centroid
/// (among clusters with at least two members) into the empty one.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let freq = frequencies(assignments, k);
        let Some(empty) = freq.iter().position(|f| *f == 0) else {
            return;
        };
        let mut pick = None;
        let mut far = -1.0;
        for (i, p) in points.iter().enumerate() {
            if freq[assignments[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assignments[i]]);
            if d > far {
                far = d;
                pick = Some(i);
            }
        }
        let i = pick.expect("N ≥ k leaves a cluster with two members");
        centroids[empty] = points[i].clone();
        assignments[i] = empty;
    }
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[next].clone();
        for (dv, p) in d2.iter_mut().zip(points) {
            *dv = dv.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeding until the assignment no longer
/// changes or [`MAX_LLOYD_ITERATIONS`] is reached.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    validate_points(points, k)?;
    let mut r = rng::stream(seed, rng::STREAM_KMEANS, &[]);
    let mut centroids = plus_plus_init(points, k, &mut r);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut next = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut next);
        history.push(inertia_of(points, &centroids, &next));
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        means(points, &assignments, &mut centroids);
    }
    if !converged {
        history.push(inertia_of(points, &centroids, &assignments));
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(ClusterModel {
        frequencies: frequencies(&assignments, k),
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Best of `restarts` independently seeded runs (lowest inertia, earliest on ties).
pub fn kmeans_restarts(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let m = kmeans(points, k, rng::derive_seed(seed, "restart", &[r as u64]))?;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("one restart"))
}

/// Per-sample RE weights: `N/f_j` rescaled so that the smallest weight is 1.
pub fn reweight(model: &ClusterModel) -> Vec<f64> {
    let f = &model.frequencies;
    // (N/f_j)/(N/f_max) = f_max/f_j, computed with a single rounding
    let f_max = model.assignments.iter().map(|a| f[*a]).max().unwrap_or(1) as f64;
    model.assignments.iter().map(|a| f_max / f[*a] as f64).collect()
}

/// The raw `N/f_j` weights before rescaling.
pub fn raw_weights(model: &ClusterModel) -> Vec<f64> {
    let n = model.assignments.len() as f64;
    model.assignments.iter().map(|a| n / model.frequencies[*a] as f64).collect()
}

/// Weights from cluster frequencies alone, `N = Σ f`.
pub fn weights_for_frequencies(freq: &[usize]) -> Vec<f64> {
    let assignments: Vec<usize> = freq.iter().enumerate().flat_map(|(j, f)| std::iter::repeat_n(j, *f)).collect();
    let model = ClusterModel {
        centroids: vec![Vec::new(); freq.len()],
        frequencies: freq.to_vec(),
        assignments,
        inertia: 0.0,
        inertia_history: Vec::new(),
        iterations: 0,
        converged: true,
    };
    reweight(&model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// `m/2` indices nearest the first centroid, then `m/2` nearest the second.
    pub indices: Vec<usize>,
    pub pair: (usize, usize),
    pub distance: f64,
}

/// Centroid pair of maximal Euclidean distance, lowest index pair on ties.
pub fn farthest_pair(centroids: &[Vec<f64>]) -> Result<((usize, usize), f64)> {
    if centroids.len() < 2 {
        return Err(Error::InvalidArgument("SE requires ≥ 2 clusters".into()));
    }
    let mut best = (0, 1);
    let mut best_d = -1.0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let d = sq_dist(&centroids[i], &centroids[j]);
            if d > best_d {
                best_d = d;
                best = (i, j);
            }
        }
    }
    Ok((best, best_d.sqrt()))
}

/// Checks `2 ≤ m`, `m` even and `m < N/k`.
pub fn check_selection_size(n: usize, k: usize, m: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config("SE requires ≥ 2 clusters".into()));
    }
    if m < 2 || !m.is_multiple_of(2) {
        return Err(Error::Config(format!("SE batch size m = {m} must be even and at least 2")));
    }
    if m * k >= n {
        return Err(Error::Config(format!(
            "SE batch size m = {m} violates m < N/k with N = {n}, k = {k}"
        )));
    }
    Ok(())
}

/// SE: the `m/2` points nearest each centroid of the farthest pair. Ranking
/// is over the whole pool, ties by lower index, and points taken by the first
/// centroid are unavailable to the second.
pub fn select_batch(points: &[Vec<f64>], model: &ClusterModel, m: usize) -> Result<Selection> {
    check_selection_size(points.len(), model.k(), m)?;
    let ((a, b), distance) = farthest_pair(&model.centroids)?;
    let mut taken = vec![false; points.len()];
    let mut indices = Vec::with_capacity(m);
    for c in [a, b] {
        let mut order: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, p)| (sq_dist(p, &model.centroids[c]), i))
            .collect();
        order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for (_, i) in order.into_iter().take(m / 2) {
            taken[i] = true;
            indices.push(i);
        }
    }
    Ok(Selection {
        indices,
        pair: (a, b),
        distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceMode {
    None,
    Re,
    Se,
}

impl std::str::FromStr for ImbalanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "vanilla" => Ok(Self::None),
            "re" => Ok(Self::Re),
            "se" => Ok(Self::Se),
            other => Err(Error::Config(format!("unknown imbalance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub mode: ImbalanceMode,
    pub k: usize,
    /// Candidate pool size is `k·q`.
    pub q: usize,
    /// SE batch size.
    pub m: usize,
    /// Plain and RE batch size.
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Refit the centroids every this many iterations; in between, pools are
    /// assigned to the cached centroids.
    pub kmeans_period: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mode: ImbalanceMode::None,
            k: 3,
            q: 10,
            m: 6,
            batch_size: 6,
            warmup_epochs: 1,
            kmeans_period: 1,
        }
    }
}

impl PlannerConfig {
    pub fn pool_size(&self) -> usize {
        self.k * self.q
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if dataset_len < 2 {
            return Err(Error::Config("need at least two samples".into()));
        }
        if self.kmeans_period == 0 {
            return Err(Error::Config("kmeans period must be positive".into()));
        }
        match self.mode {
            ImbalanceMode::None => Ok(()),
            ImbalanceMode::Re | ImbalanceMode::Se => {
                if self.k == 0 || self.q == 0 {
                    return Err(Error::Config("k and q must be positive".into()));
                }
                let n = self.pool_size();
                if dataset_len < n {
                    return Err(Error::Config(format!(
                        "dataset of {dataset_len} samples is smaller than the candidate pool N = {n}"
                    )));
                }
                if self.mode == ImbalanceMode::Se {
                    check_selection_size(n, self.k, self.m)
                } else if self.batch_size > n {
                    Err(Error::Config(format!("RE batch {} exceeds the pool N = {n}", self.batch_size)))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Per-iteration clustering summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub iteration: u64,
    pub inertia: f64,
    pub frequencies: Vec<usize>,
    pub chosen_pair: Option<(usize, usize)>,
    pub distance: Option<f64>,
}

/// One training batch: dataset indices and their loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub iteration: u64,
    pub mode: ImbalanceMode,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub diagnostics: Option<ClusterDiagnostics>,
}

/// Deterministic batch stream: plain shuffled epochs during warm-up (and
/// throughout for [`ImbalanceMode::None`]), then RE or SE over a fresh
/// candidate pool every iteration.
#[derive(Debug, Clone)]
pub struct BatchPlanner {
    pub config: PlannerConfig,
    pub seed: u64,
    pub dataset_len: usize,
    pub iteration: u64,
    centroids: Option<Vec<Vec<f64>>>,
}

impl BatchPlanner {
    pub fn new(config: PlannerConfig, dataset_len: usize, seed: u64) -> Result<Self> {
        config.validate(dataset_len)?;
        Ok(Self {
            config,
            seed,
            dataset_len,
            iteration: 0,
            centroids: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.dataset_len.div_ceil(self.config.batch_size) as u64
    }

    pub fn warmup_iterations(&self) -> u64 {
        self.batches_per_epoch() * self.config.warmup_epochs as u64
    }

    pub fn in_warmup(&self) -> bool {
        self.config.mode == ImbalanceMode::None || self.iteration < self.warmup_iterations()
    }

    /// A plain batch of the epoch-shuffled order; the final batch of an
    /// epoch wraps around to stay full.
    fn plain(&self, it: u64) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, slot) = (it / per, (it % per) as usize);
        let mut order: Vec<usize> = (0..self.dataset_len).collect();
        order.shuffle(&mut rng::stream(self.seed, rng::STREAM_PLANNER, &[0, epoch]));
        let b = self.config.batch_size;
        (slot * b..slot * b + b).map(|i| order[i % self.dataset_len]).collect()
    }

    fn pool(&self, it: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.dataset_len).collect();
        let mut r = rng::stream(self.seed, rng::STREAM_PLANNER, &[1, it]);
        order.partial_shuffle(&mut r, self.config.pool_size());
        order.truncate(self.config.pool_size());
        order
    }

    fn cluster(&mut self, it: u64, reps: &[Vec<f64>]) -> Result<ClusterModel> {
        let period = self.config.kmeans_period as u64;
        let warm = self.warmup_iterations();
        let refit = self.centroids.is_none() || (it - warm).is_multiple_of(period);
        if refit {
            let model = kmeans(reps, self.config.k, rng::derive_seed(self.seed, rng::STREAM_KMEANS, &[it]))?;
            self.centroids = Some(model.centroids.clone());
            return Ok(model);
        }
        let centroids = self.centroids.clone().expect("cached centroids");
        let assignments = assign(reps, &centroids);
        let inertia = inertia_of(reps, &centroids, &assignments);
        Ok(ClusterModel {
            frequencies: frequencies(&assignments, centroids.len()),
            centroids,
            assignments,
            inertia,
            inertia_history: vec![inertia],
            iterations: 0,
            converged: true,
        })
    }

    /// Plans the next batch. `encode` maps dataset indices to representation
    /// rows and is only called outside the warm-up.
    pub fn next_batch<F>(&mut self, encode: F) -> Result<BatchPlan>
    where
        F: FnOnce(&[usize]) -> Result<Vec<Vec<f64>>>,
    {
        let it = self.iteration;
        let mode = self.config.mode;
        let plan = if self.in_warmup() {
            let indices = self.plain(it);
            BatchPlan {
                iteration: it,
                mode,
                weights: vec![1.0; indices.len()],
                indices,
                diagnostics: None,
            }
        } else {
            let pool = self.pool(it);
            let reps = encode(&pool)?;
            if reps.len() != pool.len() {
                return Err(Error::Shape(format!("{} representations for a pool of {}", reps.len(), pool.len())));
            }
            let model = self.cluster(it, &reps)?;
            let mut diag = ClusterDiagnostics {
                iteration: it,
                inertia: model.inertia,
                frequencies: model.frequencies.clone(),
                chosen_pair: None,
                distance: None,
            };
            match mode {
                ImbalanceMode::Se => {
                    let sel = select_batch(&reps, &model, self.config.m)?;
                    diag.chosen_pair = Some(sel.pair);
                    diag.distance = Some(sel.distance);
                    BatchPlan {
                        iteration: it,
                        mode,
                        weights: vec![1.0; sel.indices.len()],
                        indices: sel.indices.iter().map(|i| pool[*i]).collect(),
                        diagnostics: Some(diag),
                    }
                }
                _ => {
                    let w = reweight(&model);
                    let mut pick: Vec<usize> = (0..pool.len()).collect();
                    let mut r = rng::stream(self.seed, rng::STREAM_PLANNER, &[2, it]);
                    pick.partial_shuffle(&mut r, self.config.batch_size);
                    pick.truncate(self.config.batch_size);
                    BatchPlan {
                        iteration: it,
                        mode,
                        indices: pick.iter().map(|i| pool[*i]).collect(),
                        weights: pick.iter().map(|i| w[*i]).collect(),
                        diagnostics: Some(diag),
                    }
                }
            }
        };
        self.iteration += 1;
        Ok(plan)
    }
}
