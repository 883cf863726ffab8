//! Rehearsal-buffer construction.
//!
//! The buffer is drawn from the first domain so that it stays both diverse
//! and representative of the relationship to the incoming domain:
//!
//! 1. Cluster the first domain's embeddings into `K` clusters (Lloyd
//!    iteration with k-means++ seeding).
//! 2. Cluster the union of both domains' embeddings into two classes and
//!    take the center `q` of the class the second domain belongs to.
//! 3. Rank the `K` cluster centers by Euclidean distance to `q`, split the
//!    ranking into three contiguous groups, and fill a buffer of size `T`
//!    with per-group quotas proportional to the ratio weights γ, drawing
//!    round-robin across each group's clusters, nearest-to-center first.
//!
//! Only embeddings enter this module: buffer construction never touches the
//! second domain's pixels.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const KMEANS_MAX_ITERS: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

/// Result of one k-means run over `n` points of dimension `d`.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub k: usize,
    pub d: usize,
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    /// `k × d` cluster centers.
    pub centers: Vec<f64>,
    /// Sum of squared distances to assigned centers.
    pub inertia: f64,
    /// Inertia after each assignment phase; non-increasing by construction.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Clustering {
    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.d..(i + 1) * self.d]
    }

    pub fn cluster_size(&self, i: usize) -> usize {
        self.assignments.iter().filter(|&&a| a == i).count()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

fn point(points: &[f64], d: usize, i: usize) -> &[f64] {
    &points[i * d..(i + 1) * d]
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn kmeans_pp_init(points: &[f64], n: usize, d: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k * d);
    let mut chosen = vec![false; n];
    let first = rng::below(rng, n as u64) as usize;
    centers.extend_from_slice(point(points, d, first));
    chosen[first] = true;
    let mut best: Vec<f64> = (0..n)
        .map(|i| dist2(point(points, d, i), point(points, d, first)))
        .collect();
    while centers.len() / d < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng::uniform(rng) * total;
            let mut pick = 0;
            for (i, &w) in best.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                u -= w;
                pick = i;
                if u <= 0.0 {
                    break;
                }
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points): take the first
            // unchosen index.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[next] = true;
        centers.extend_from_slice(point(points, d, next));
        let c = centers.len() / d - 1;
        for i in 0..n {
            let dd = dist2(point(points, d, i), &centers[c * d..(c + 1) * d]);
            if dd < best[i] {
                best[i] = dd;
            }
        }
    }
    centers
}

fn assign_all(points: &[f64], n: usize, d: usize, centers: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    for i in 0..n {
        let p = point(points, d, i);
        let mut best_c = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dd = dist2(p, &centers[c * d..(c + 1) * d]);
            if dd < best_d {
                best_d = dd;
                best_c = c;
            }
        }
        assignments[i] = best_c;
        dists[i] = best_d;
    }
    (assignments, dists)
}

/// Lloyd iteration until the largest center movement drops below 1e-6 or
/// 300 iterations pass. Empty clusters are re-seeded to the point farthest
/// from its assigned center. Deterministic per seed.
pub fn kmeans(points: &[f64], n: usize, d: usize, k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be in 1..={n}")));
    }
    if points.len() != n * d {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {n} points of dim {d}",
            points.len()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("embeddings contain non-finite values"));
    }
    let mut rng = rng::rng_for(seed, rng::stream::KMEANS, 0);
    let mut centers = kmeans_pp_init(points, n, d, k, &mut rng);
    let mut inertia_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..KMEANS_MAX_ITERS {
        iterations = iter + 1;
        let (mut assignments, mut dists) = assign_all(points, n, d, centers.as_slice(), k);
        // Re-seed empty clusters to the worst-fit point of a non-singleton
        // cluster; its contribution drops to zero, so inertia still falls.
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut worst: Option<usize> = None;
            for i in 0..n {
                if sizes[assignments[i]] < 2 {
                    continue;
                }
                if worst.map_or(true, |w| dists[i] > dists[w]) {
                    worst = Some(i);
                }
            }
            if let Some(i) = worst {
                sizes[assignments[i]] -= 1;
                sizes[c] += 1;
                assignments[i] = c;
                centers[c * d..(c + 1) * d].copy_from_slice(point(points, d, i));
                dists[i] = 0.0;
            }
        }
        inertia_history.push(dists.iter().sum());

        // Update centers to member means.
        let mut new_centers = vec![0.0; k * d];
        for i in 0..n {
            let c = assignments[i];
            for (dst, &src) in new_centers[c * d..(c + 1) * d].iter_mut().zip(point(points, d, i)) {
                *dst += src;
            }
        }
        for c in 0..k {
            if sizes[c] == 0 {
                // Unfixable empty cluster (all others singleton): keep its
                // previous position.
                new_centers[c * d..(c + 1) * d].copy_from_slice(&centers[c * d..(c + 1) * d]);
                continue;
            }
            for v in new_centers[c * d..(c + 1) * d].iter_mut() {
                *v /= sizes[c] as f64;
            }
        }
        let movement = (0..k)
            .map(|c| dist2(&centers[c * d..(c + 1) * d], &new_centers[c * d..(c + 1) * d]).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        if movement < KMEANS_TOL {
            converged = true;
            break;
        }
    }
    let (assignments, dists) = assign_all(points, n, d, &centers, k);
    let inertia: f64 = dists.iter().sum();
    inertia_history.push(inertia);
    Ok(Clustering {
        k,
        d,
        assignments,
        centers,
        inertia,
        inertia_history,
        iterations,
        converged,
    })
}

/// Two-class clustering of the combined domains; returns the center of the
/// class holding the majority of second-domain samples. Ties break toward
/// the cluster with the higher second-domain fraction, then the lower index.
pub fn d2_class_center(
    emb_d1: &[f64],
    n1: usize,
    emb_d2: &[f64],
    n2: usize,
    d: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("both domains must contribute embeddings"));
    }
    let mut combined = Vec::with_capacity((n1 + n2) * d);
    combined.extend_from_slice(emb_d1);
    combined.extend_from_slice(emb_d2);
    let clustering = kmeans(&combined, n1 + n2, d, 2, seed)?;
    let mut d2_count = [0usize; 2];
    let mut size = [0usize; 2];
    for (i, &a) in clustering.assignments.iter().enumerate() {
        size[a] += 1;
        if i >= n1 {
            d2_count[a] += 1;
        }
    }
    let fraction = |c: usize| {
        if size[c] == 0 {
            0.0
        } else {
            d2_count[c] as f64 / size[c] as f64
        }
    };
    let winner = if d2_count[0] != d2_count[1] {
        usize::from(d2_count[1] > d2_count[0])
    } else if fraction(0) != fraction(1) {
        usize::from(fraction(1) > fraction(0))
    } else {
        0
    };
    Ok(clustering.center(winner).to_vec())
}

/// Euclidean distance from each cluster center to the reference vector.
pub fn cluster_distances(centers: &[f64], k: usize, d: usize, q: &[f64]) -> Vec<f64> {
    (0..k)
        .map(|c| dist2(&centers[c * d..(c + 1) * d], q).sqrt())
        .collect()
}

/// Clusters sorted by ascending distance and split into three contiguous
/// groups whose sizes differ by at most one (the nearest group gets any
/// extra).
#[derive(Debug, Clone)]
pub struct GroupPartition {
    /// Cluster indices sorted by ascending (distance, index).
    pub ordering: Vec<usize>,
    /// Three disjoint groups covering every cluster; `groups[0]` is nearest.
    pub groups: [Vec<usize>; 3],
    /// Input distances, index-aligned with clusters.
    pub distances: Vec<f64>,
}

pub fn partition_groups(distances: &[f64]) -> Result<GroupPartition> {
    let k = distances.len();
    if k < 3 {
        return Err(Error::invalid(format!(
            "group partition requires at least 3 clusters, got {k}"
        )));
    }
    let mut ordering: Vec<usize> = (0..k).collect();
    ordering.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let s1 = k.div_ceil(3);
    let s2 = (k - s1).div_ceil(2);
    let groups = [
        ordering[..s1].to_vec(),
        ordering[s1..s1 + s2].to_vec(),
        ordering[s1 + s2..].to_vec(),
    ];
    Ok(GroupPartition {
        ordering,
        groups,
        distances: distances.to_vec(),
    })
}

/// Largest-remainder apportionment of `total` over non-negative weights.
/// Quotas sum to `total` and each is within one of its ideal share.
pub fn apportion(total: usize, weights: &[f64]) -> Result<Vec<usize>> {
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("apportionment weights must be non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::invalid("apportionment weights must not all be zero"));
    }
    let ideals: Vec<f64> = weights.iter().map(|&w| total as f64 * w / sum).collect();
    let mut quotas: Vec<usize> = ideals.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideals[a] - ideals[a].floor();
        let fb = ideals[b] - ideals[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &g in order.iter().take(total - assigned) {
        quotas[g] += 1;
    }
    Ok(quotas)
}

/// One selected sample with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample_id: u64,
    pub cluster: usize,
    pub group: usize,
    /// Euclidean distance from the sample's embedding to its cluster center.
    pub distance_to_own_center: f64,
    /// The sample's cluster-to-reference distance.
    pub cluster_distance: f64,
}

/// Buffer header recorded alongside the entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferMeta {
    pub k: usize,
    pub t: usize,
    pub gamma: [f64; 3],
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalBuffer {
    pub meta: BufferMeta,
    pub entries: Vec<BufferEntry>,
}

impl RehearsalBuffer {
    pub fn sample_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.sample_id).collect()
    }
}

/// Derive the cluster count and buffer size from the first-domain size:
/// `K = floor(N1 * alpha)`, `T = floor(N1 * beta)`.
pub fn derive_buffer_params(n1: usize, alpha: f64, beta: f64) -> Result<(usize, usize)> {
    if !(alpha > 0.0 && alpha <= 1.0) || !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("alpha and beta must be in (0, 1]"));
    }
    let k = (n1 as f64 * alpha).floor() as usize;
    let t = (n1 as f64 * beta).floor() as usize;
    if k < 3 {
        return Err(Error::invalid(format!(
            "derived cluster count {k} < 3; increase alpha or dataset size"
        )));
    }
    if t < 1 {
        return Err(Error::invalid(format!(
            "derived buffer size {t} < 1; increase beta or dataset size"
        )));
    }
    Ok((k, t))
}

/// Fill the buffer: apportion `t` over the three groups by the γ weights
/// (capped at group population, shortfall redistributed), then take samples
/// round-robin across each group's clusters in ascending distance order,
/// each cluster yielding its next-nearest-to-center unused sample.
pub fn select_buffer(
    sample_ids: &[u64],
    embeddings: &[f64],
    clustering: &Clustering,
    partition: &GroupPartition,
    t: usize,
    gamma: [f64; 3],
) -> Result<Vec<BufferEntry>> {
    let n = sample_ids.len();
    if clustering.assignments.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {n} samples",
            clustering.assignments.len()
        )));
    }
    if t > n {
        return Err(Error::invalid(format!("buffer size {t} exceeds dataset size {n}")));
    }
    if gamma.iter().any(|&g| g < 0.0) || gamma.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid(
            "gamma weights must be non-negative and not all zero",
        ));
    }
    let d = clustering.d;

    // Members per cluster, nearest-to-center first.
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); clustering.k];
    for i in 0..n {
        let c = clustering.assignments[i];
        let dist = dist2(point(embeddings, d, i), clustering.center(c)).sqrt();
        members[c].push((dist, i));
    }
    for list in members.iter_mut() {
        list.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    }

    let populations: Vec<usize> = partition
        .groups
        .iter()
        .map(|g| g.iter().map(|&c| members[c].len()).sum())
        .collect();

    // Capacity-constrained apportionment: quota per group proportional to
    // γ, capped at the group's population; any shortfall redistributes over
    // the remaining groups by the same rule. Groups that run out of weight
    // fall back to equal weights so the buffer always reaches size t.
    let mut quotas = [0usize; 3];
    let mut remaining = t;
    while remaining > 0 {
        let free: Vec<usize> = (0..3).filter(|&g| quotas[g] < populations[g]).collect();
        if free.is_empty() {
            return Err(Error::invalid("group capacities exhausted before t samples"));
        }
        let mut weights: Vec<f64> = free.iter().map(|&g| gamma[g]).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            eprintln!(
                "warning: positive quota left for zero-weight groups; distributing {remaining} samples equally"
            );
            weights = vec![1.0; free.len()];
        }
        let shares = apportion(remaining, &weights)?;
        let mut progressed = false;
        for (slot, &g) in free.iter().enumerate() {
            let take = shares[slot].min(populations[g] - quotas[g]);
            if take > 0 {
                quotas[g] += take;
                remaining -= take;
                progressed = true;
            }
        }
        if !progressed {
            // All shares rounded to zero on capped groups: give one to the
            // first free group to guarantee termination.
            quotas[free[0]] += 1;
            remaining -= 1;
        }
    }
    for (g, &quota) in quotas.iter().enumerate() {
        if quota > 0 && populations[g] == 0 {
            unreachable!("quota assigned to empty group {g}");
        }
    }

    // Round-robin across each group's clusters, ascending distance order.
    let mut entries = Vec::with_capacity(t);
    for g in 0..3 {
        let clusters = &partition.groups[g];
        let mut cursor: Vec<usize> = vec![0; clusters.len()];
        let mut taken = 0;
        while taken < quotas[g] {
            let mut advanced = false;
            for (slot, &c) in clusters.iter().enumerate() {
                if taken >= quotas[g] {
                    break;
                }
                if cursor[slot] >= members[c].len() {
                    continue;
                }
                let (dist, idx) = members[c][cursor[slot]];
                cursor[slot] += 1;
                entries.push(BufferEntry {
                    sample_id: sample_ids[idx],
                    cluster: c,
                    group: g,
                    distance_to_own_center: dist,
                    cluster_distance: partition.distances[c],
                });
                taken += 1;
                advanced = true;
            }
            if !advanced {
                return Err(Error::invalid(format!(
                    "group {g} exhausted at {taken} of {} samples",
                    quotas[g]
                )));
            }
        }
    }
    debug_assert_eq!(entries.len(), t);
    Ok(entries)
}

/// Uniform-random baseline selection of `t` sample ids (ablation control).
pub fn select_buffer_random(sample_ids: &[u64], t: usize, seed: u64) -> Result<Vec<u64>> {
    if t > sample_ids.len() {
        return Err(Error::invalid(format!(
            "buffer size {t} exceeds dataset size {}",
            sample_ids.len()
        )));
    }
    let mut rng = rng::rng_for(seed, rng::stream::RANDOM_BUFFER, 0);
    Ok(rng::sample_without_replacement(&mut rng, sample_ids.len(), t)
        .into_iter()
        .map(|i| sample_ids[i])
        .collect())
}

// ---------------------------------------------------------------------------
// Buffer manifest: one JSON header line, then one JSON record per entry.
// ---------------------------------------------------------------------------

pub fn write_buffer_manifest(path: &Path, buffer: &RehearsalBuffer) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let header =
        serde_json::to_string(&buffer.meta).map_err(|e| Error::parse(path, e.to_string()))?;
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for entry in &buffer.entries {
        let line = serde_json::to_string(entry).map_err(|e| Error::parse(path, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_buffer_manifest(path: &Path) -> Result<RehearsalBuffer> {
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            produced_by: "build-buffer".into(),
        });
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty buffer manifest"))?
        .map_err(|e| Error::io(path, e))?;
    let meta: BufferMeta =
        serde_json::from_str(&header_line).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: BufferEntry = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("record {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    if entries.len() != meta.t {
        return Err(Error::parse(
            path,
            format!("header says t = {}, found {} records", meta.t, entries.len()),
        ));
    }
    Ok(RehearsalBuffer { meta, entries })
}
