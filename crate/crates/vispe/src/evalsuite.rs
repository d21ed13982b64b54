//! Open-set evaluation: KNN classification, retrieval recall, k-means
//! clustering with NMI, few-shot linear probing, and embedding export.
//!
//! Distances are cosine (equivalently squared Euclidean on unit vectors) and
//! always computed in f64.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{MultiviewDataset, Partition};
use crate::embedder::{self, EmbedderParams};
use crate::error::{Result, VispeError};

#[derive(Debug, Clone)]
pub struct EmbeddedSet {
    pub vectors: Vec<Vec<f64>>,
    pub object_ids: Vec<usize>,
    pub class_ids: Vec<usize>,
    pub partitions: Vec<Partition>,
}

impl EmbeddedSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> EmbeddedSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        EmbeddedSet {
            vectors: idx.iter().map(|&i| self.vectors[i].clone()).collect(),
            object_ids: idx.iter().map(|&i| self.object_ids[i]).collect(),
            class_ids: idx.iter().map(|&i| self.class_ids[i]).collect(),
            partitions: idx.iter().map(|&i| self.partitions[i]).collect(),
        }
    }
}

/// Embed every view of the given objects (all objects when `ids` is None).
pub fn embed_objects(
    params: &EmbedderParams,
    ds: &MultiviewDataset,
    ids: Option<&[usize]>,
) -> Result<EmbeddedSet> {
    let all: Vec<usize>;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            all = (0..ds.objects.len()).collect();
            &all
        }
    };
    let mut set = EmbeddedSet {
        vectors: Vec::new(),
        object_ids: Vec::new(),
        class_ids: Vec::new(),
        partitions: Vec::new(),
    };
    for &id in ids {
        let o = &ds.objects[id];
        for view in &o.views {
            let e = embedder::embed(params, &embedder::view_to_f64(view))?;
            set.vectors.push(e.v);
            set.object_ids.push(o.object_id);
            set.class_ids.push(o.class_id);
            set.partitions.push(o.partition);
        }
    }
    Ok(set)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Default k for KNN: the reference image count of the class with the
/// fewest images, so even the rarest class can fill a full neighborhood.
pub fn default_k(reference: &EmbeddedSet) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in &reference.class_ids {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts.values().copied().min().unwrap_or(1).max(1)
}

/// Majority-vote KNN over cosine distance. Ties break by smaller summed
/// distance, then smaller class id.
pub fn knn_classify(
    reference: &EmbeddedSet,
    queries: &EmbeddedSet,
    k: usize,
) -> Result<(Vec<usize>, f64)> {
    if reference.is_empty() {
        return Err(VispeError::Config("reference set is empty".into()));
    }
    if k < 1 || k > reference.len() {
        return Err(VispeError::Config(format!(
            "k = {k} out of range for reference of size {}",
            reference.len()
        )));
    }
    let mut predictions = Vec::with_capacity(queries.len());
    let mut correct = 0usize;
    for (qi, q) in queries.vectors.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = reference
            .vectors
            .iter()
            .enumerate()
            .map(|(i, r)| (cosine_distance(q, r), i))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(d, i) in dists.iter().take(k) {
            let e = votes.entry(reference.class_ids[i]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += d;
        }
        let (&class, _) = votes
            .iter()
            .max_by(|(ca, (na, da)), (cb, (nb, db))| {
                na.cmp(nb)
                    .then(db.partial_cmp(da).unwrap())
                    .then(cb.cmp(ca))
            })
            .unwrap();
        predictions.push(class);
        if class == queries.class_ids[qi] {
            correct += 1;
        }
    }
    let accuracy = if queries.is_empty() {
        0.0
    } else {
        correct as f64 / queries.len() as f64
    };
    Ok((predictions, accuracy))
}

/// For each item: success at K iff any of its K nearest *other* items shares
/// its class. Returns the success fraction per K.
pub fn recall_at_k(set: &EmbeddedSet, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if set.len() < max_k + 1 {
        return Err(VispeError::Config(format!(
            "set of size {} too small for recall@{max_k}",
            set.len()
        )));
    }
    let n = set.len();
    let mut successes: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine_distance(&set.vectors[i], &set.vectors[j]), j))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (&k, hit) in successes.iter_mut() {
            if dists
                .iter()
                .take(k)
                .any(|&(_, j)| set.class_ids[j] == set.class_ids[i])
            {
                *hit += 1;
            }
        }
    }
    Ok(successes
        .into_iter()
        .map(|(k, s)| (k, s as f64 / n as f64))
        .collect())
}

/// Lloyd's algorithm with k-means++ seeding and 40 restarts (lowest inertia
/// wins). Max 300 iterations per restart, stopping when the largest centroid
/// shift drops below 1e-6. Empty clusters are repaired by stealing the point
/// farthest from its centroid.
pub fn kmeans(set: &EmbeddedSet, n_clusters: usize, seed: u64) -> Result<Vec<usize>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..40u64 {
        let a = kmeans_once(set, n_clusters, seed ^ restart.wrapping_mul(0x9e3779b97f4a7c15))?;
        let inertia = kmeans_inertia(set, &a, n_clusters);
        if best.as_ref().map_or(true, |(bi, _)| inertia < *bi) {
            best = Some((inertia, a));
        }
    }
    Ok(best.unwrap().1)
}

fn kmeans_once(set: &EmbeddedSet, n_clusters: usize, seed: u64) -> Result<Vec<usize>> {
    let n = set.len();
    if n_clusters < 1 || n_clusters > n {
        return Err(VispeError::Config(format!(
            "n_clusters = {n_clusters} out of range for {n} points"
        )));
    }
    let dim = set.vectors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    centroids.push(set.vectors[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = set
        .vectors
        .iter()
        .map(|v| sq_dist(v, &centroids[0]))
        .collect();
    while centroids.len() < n_clusters {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(set.vectors[next].clone());
        for (i, v) in set.vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, centroids.last().unwrap()));
        }
    }
    let mut assignments = vec![0usize; n];
    for _iter in 0..300 {
        // assign
        for (i, v) in set.vectors.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(v, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
        }
        // repair empty clusters
        for c in 0..n_clusters {
            if !assignments.contains(&c) {
                let (far, _) = (0..n)
                    .map(|i| (i, sq_dist(&set.vectors[i], &centroids[assignments[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                assignments[far] = c;
            }
        }
        // update
        let mut shift: f64 = 0.0;
        for c in 0..n_clusters {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(&set.vectors[i]) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= members.len() as f64;
            }
            shift = shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        if shift < 1e-6 {
            break;
        }
    }
    // final assignment against converged centroids
    for (i, v) in set.vectors.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::MAX;
        for (c, cent) in centroids.iter().enumerate() {
            let d = sq_dist(v, cent);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
    }
    Ok(assignments)
}

pub fn kmeans_inertia(set: &EmbeddedSet, assignments: &[usize], n_clusters: usize) -> f64 {
    let dim = set.vectors[0].len();
    let mut inertia = 0.0;
    for c in 0..n_clusters {
        let members: Vec<usize> = (0..set.len()).filter(|&i| assignments[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for &i in &members {
            for (m, v) in mean.iter_mut().zip(&set.vectors[i]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= members.len() as f64;
        }
        for &i in &members {
            inertia += sq_dist(&set.vectors[i], &mean);
        }
    }
    inertia
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Normalized mutual information 2·I(A;C) / (H(A) + H(C)) in natural log.
/// 1.0 when both partitions are trivial (hence identical), 0.0 when either
/// side carries no information about the other.
pub fn nmi(assignments: &[usize], class_labels: &[usize]) -> Result<f64> {
    if assignments.len() != class_labels.len() {
        return Err(VispeError::Config("length mismatch".into()));
    }
    let n = assignments.len();
    if n == 0 {
        return Err(VispeError::Config("empty inputs".into()));
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cc: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &c) in assignments.iter().zip(class_labels) {
        *joint.entry((a, c)).or_insert(0) += 1;
        *ca.entry(a).or_insert(0) += 1;
        *cc.entry(c).or_insert(0) += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &BTreeMap<usize, usize>| {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum::<f64>()
    };
    let ha = entropy(&ca);
    let hc = entropy(&cc);
    if ha + hc == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (&(a, c), &cnt) in &joint {
        let p = cnt as f64 / nf;
        let pa = ca[&a] as f64 / nf;
        let pc = cc[&c] as f64 / nf;
        mi += p * (p / (pa * pc)).ln();
    }
    Ok((2.0 * mi / (ha + hc)).clamp(0.0, 1.0))
}

/// Few-shot linear probe: per trial, `k_shots` labeled items per class train
/// a one-vs-rest max-margin classifier (hinge + L2, subgradient descent);
/// accuracy is measured on the remaining items and averaged over trials.
pub fn few_shot_eval(
    set: &EmbeddedSet,
    k_shots_list: &[usize],
    trials: usize,
    seed: u64,
) -> Result<BTreeMap<usize, f64>> {
    const LAMBDA: f64 = 1e-3;
    const STEPS: usize = 1000;
    let mut classes: Vec<usize> = set.class_ids.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() == 1 {
        eprintln!("warning: single-class few-shot set, accuracy trivially 1.0");
        return Ok(k_shots_list.iter().map(|&k| (k, 1.0)).collect());
    }
    let dim = set.vectors[0].len();
    let mut report = BTreeMap::new();
    for &k_shots in k_shots_list {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k_shots as u64).wrapping_mul(0x9e37));
        let mut acc_sum = 0.0;
        for _ in 0..trials {
            // sample the labeled support set
            let mut support: Vec<usize> = Vec::new();
            for &class in &classes {
                let members: Vec<usize> = (0..set.len())
                    .filter(|&i| set.class_ids[i] == class)
                    .collect();
                if members.len() <= k_shots {
                    return Err(VispeError::Config(format!(
                        "class {class} has {} items, needs > {k_shots} for {k_shots}-shot",
                        members.len()
                    )));
                }
                support.extend(members.choose_multiple(&mut rng, k_shots).copied());
            }
            let support_mask: std::collections::BTreeSet<usize> =
                support.iter().copied().collect();
            // one-vs-rest hinge classifiers, one weight vector per class
            let mut weights = vec![vec![0.0f64; dim + 1]; classes.len()];
            for step in 1..=STEPS {
                let lr = 0.1 / (step as f64).sqrt();
                for (ci, &class) in classes.iter().enumerate() {
                    let w = &mut weights[ci];
                    let mut grad = vec![0.0; dim + 1];
                    for &i in &support {
                        let y = if set.class_ids[i] == class { 1.0 } else { -1.0 };
                        let score: f64 = set.vectors[i]
                            .iter()
                            .zip(w.iter())
                            .map(|(x, wv)| x * wv)
                            .sum::<f64>()
                            + w[dim];
                        if y * score < 1.0 {
                            for (g, x) in grad.iter_mut().zip(&set.vectors[i]) {
                                *g -= y * x;
                            }
                            grad[dim] -= y;
                        }
                    }
                    let inv = 1.0 / support.len() as f64;
                    for (wv, g) in w.iter_mut().zip(&grad) {
                        *wv -= lr * (g * inv + 2.0 * LAMBDA * *wv);
                    }
                }
            }
            // evaluate on the held-out remainder
            let mut correct = 0usize;
            let mut total = 0usize;
            for i in 0..set.len() {
                if support_mask.contains(&i) {
                    continue;
                }
                let (best, _) = classes
                    .iter()
                    .enumerate()
                    .map(|(ci, _)| {
                        let w = &weights[ci];
                        let s: f64 = set.vectors[i]
                            .iter()
                            .zip(w.iter())
                            .map(|(x, wv)| x * wv)
                            .sum::<f64>()
                            + w[dim];
                        (ci, s)
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                if classes[best] == set.class_ids[i] {
                    correct += 1;
                }
                total += 1;
            }
            acc_sum += correct as f64 / total.max(1) as f64;
        }
        report.insert(k_shots, acc_sum / trials as f64);
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub knn_accuracy: f64,
    pub k_used: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub few_shot: BTreeMap<usize, f64>,
    pub few_shot_trials: usize,
    pub config: serde_json::Value,
}

/// Full evaluation protocol for one split.
///
/// KNN reference/queries are the split's train/test-tagged views; retrieval,
/// clustering and few-shot use every view in the split.
pub fn evaluate(
    params: &EmbedderParams,
    ds: &MultiviewDataset,
    unseen: bool,
    k_override: Option<usize>,
    config_echo: serde_json::Value,
    seed: u64,
) -> Result<EvalReport> {
    let ids: Vec<usize> = ds
        .objects
        .iter()
        .filter(|o| ds.is_seen_class(o.class_id) != unseen)
        .map(|o| o.object_id)
        .collect();
    if ids.is_empty() {
        return Err(VispeError::Config("requested split is empty".into()));
    }
    let set = embed_objects(params, ds, Some(&ids))?;
    let reference = set.filter(|i| set.partitions[i] == Partition::Train);
    let queries = set.filter(|i| set.partitions[i] == Partition::Test);
    let k = k_override.unwrap_or_else(|| default_k(&reference));
    let (_, knn_accuracy) = knn_classify(&reference, &queries, k)?;
    let recall = recall_at_k(&set, &[1, 2, 4, 8])?;
    let n_classes = {
        let mut c = set.class_ids.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    let assignments = kmeans(&set, n_classes, seed)?;
    let nmi_value = nmi(&assignments, &set.class_ids)?;
    let trials = 10;
    let few_shot = few_shot_eval(&set, &[1, 3, 5], trials, seed ^ 0xf5)?;
    Ok(EvalReport {
        split: if unseen { "unseen" } else { "seen" }.to_string(),
        knn_accuracy,
        k_used: k,
        recall_at: recall,
        nmi: nmi_value,
        few_shot,
        few_shot_trials: trials,
        config: config_echo,
    })
}

/// Unseen-class KNN accuracy only (the training-history eval hook).
pub fn unseen_knn_accuracy(params: &EmbedderParams, ds: &MultiviewDataset) -> Result<f64> {
    let ids: Vec<usize> = ds
        .objects
        .iter()
        .filter(|o| !ds.is_seen_class(o.class_id))
        .map(|o| o.object_id)
        .collect();
    let set = embed_objects(params, ds, Some(&ids))?;
    let reference = set.filter(|i| set.partitions[i] == Partition::Train);
    let queries = set.filter(|i| set.partitions[i] == Partition::Test);
    let k = default_k(&reference);
    let (_, acc) = knn_classify(&reference, &queries, k)?;
    Ok(acc)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportEntry {
    object_id: usize,
    class_id: usize,
    partition: Partition,
    view_count: usize,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportManifest {
    format_version: u32,
    dim: usize,
    objects: Vec<ExportEntry>,
}

/// Write all view embeddings in the dataset binary format (f32 rows) plus a
/// JSON manifest with labels.
pub fn export_embeddings(params: &EmbedderParams, ds: &MultiviewDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| VispeError::io(dir, e))?;
    let dim = params.arch.embed_dim;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(ds.objects.len());
    for o in &ds.objects {
        let byte_offset = blob.len() as u64;
        for view in &o.views {
            let e = embedder::embed(params, &embedder::view_to_f64(view))?;
            for v in e.v {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        entries.push(ExportEntry {
            object_id: o.object_id,
            class_id: o.class_id,
            partition: o.partition,
            view_count: o.n_views(),
            byte_offset,
        });
    }
    let manifest = ExportManifest {
        format_version: crate::dataio::FORMAT_VERSION,
        dim,
        objects: entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).map_err(|e| VispeError::Format(e.to_string()))?,
    )
    .map_err(|e| VispeError::io(&path, e))?;
    let bin = dir.join("embeddings.bin");
    let mut f = std::fs::File::create(&bin).map_err(|e| VispeError::io(&bin, e))?;
    f.write_all(&blob).map_err(|e| VispeError::io(&bin, e))?;
    Ok(())
}

/// Read back an embedding export (row per view, f32).
pub fn load_embeddings(dir: &Path) -> Result<(Vec<Vec<f32>>, Vec<usize>, Vec<usize>)> {
    let path = dir.join("manifest.json");
    let manifest: ExportManifest =
        serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| VispeError::io(&path, e))?)
            .map_err(|e| VispeError::Format(e.to_string()))?;
    let bin = dir.join("embeddings.bin");
    let mut blob = Vec::new();
    std::fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| VispeError::io(&bin, e))?;
    let total: usize = manifest.objects.iter().map(|o| o.view_count).sum();
    if blob.len() != total * manifest.dim * 4 {
        return Err(VispeError::Format("embeddings.bin size mismatch".into()));
    }
    let mut rows = Vec::with_capacity(total);
    let mut object_ids = Vec::with_capacity(total);
    let mut class_ids = Vec::with_capacity(total);
    for entry in &manifest.objects {
        let start = entry.byte_offset as usize;
        for v in 0..entry.view_count {
            let off = start + v * manifest.dim * 4;
            let row: Vec<f32> = blob[off..off + manifest.dim * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            rows.push(row);
            object_ids.push(entry.object_id);
            class_ids.push(entry.class_id);
        }
    }
    Ok((rows, object_ids, class_ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(vectors: Vec<Vec<f64>>, class_ids: Vec<usize>) -> EmbeddedSet {
        let n = vectors.len();
        EmbeddedSet {
            vectors,
            object_ids: (0..n).collect(),
            class_ids,
            partitions: vec![Partition::Train; n],
        }
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn knn_identical_query_k1() {
        let refs = set_from(
            vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
            vec![7, 9],
        );
        let queries = set_from(vec![unit(vec![0.0, 1.0])], vec![9]);
        let (preds, acc) = knn_classify(&refs, &queries, 1).unwrap();
        assert_eq!(preds, vec![9]);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let n = 6 + trial % 5;
            let refs = set_from(
                (0..n).map(|_| random_unit(4, &mut rng)).collect(),
                (0..n).map(|_| rng.gen_range(0..3)).collect(),
            );
            let queries = set_from(
                (0..4).map(|_| random_unit(4, &mut rng)).collect(),
                (0..4).map(|_| rng.gen_range(0..3)).collect(),
            );
            let k = 3;
            let (preds, _) = knn_classify(&refs, &queries, k).unwrap();
            for (qi, q) in queries.vectors.iter().enumerate() {
                // exhaustive oracle: all pair distances, full sort, manual vote
                let mut d: Vec<(f64, usize)> = refs
                    .vectors
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        (
                            1.0 - r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(),
                            refs.class_ids[i],
                        )
                    })
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
                for &(dist, class) in d.iter().take(k) {
                    let e = tally.entry(class).or_insert((0, 0.0));
                    e.0 += 1;
                    e.1 += dist;
                }
                let mut best: Option<(usize, usize, f64)> = None;
                for (&class, &(count, dist)) in &tally {
                    best = match best {
                        None => Some((class, count, dist)),
                        Some((bc, bn, bd)) => {
                            if count > bn
                                || (count == bn && dist < bd)
                                || (count == bn && dist == bd && class < bc)
                            {
                                Some((class, count, dist))
                            } else {
                                Some((bc, bn, bd))
                            }
                        }
                    };
                }
                assert_eq!(preds[qi], best.unwrap().0);
            }
        }
    }

    #[test]
    fn knn_k_too_large_errors() {
        let refs = set_from(vec![unit(vec![1.0, 0.0])], vec![0]);
        let queries = set_from(vec![unit(vec![1.0, 0.0])], vec![0]);
        assert!(knn_classify(&refs, &queries, 2).is_err());
    }

    #[test]
    fn knn_rotation_invariant() {
        // a global rotation preserves all cosine distances
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs = set_from(
            (0..10).map(|_| random_unit(3, &mut rng)).collect(),
            (0..10).map(|i| i % 3).collect(),
        );
        let queries = set_from(
            (0..5).map(|_| random_unit(3, &mut rng)).collect(),
            vec![0; 5],
        );
        let (p1, _) = knn_classify(&refs, &queries, 3).unwrap();
        // rotation about z by a fixed angle
        let th: f64 = 0.83;
        let rot = |v: &[f64]| {
            vec![
                v[0] * th.cos() - v[1] * th.sin(),
                v[0] * th.sin() + v[1] * th.cos(),
                v[2],
            ]
        };
        let refs_r = EmbeddedSet {
            vectors: refs.vectors.iter().map(|v| rot(v)).collect(),
            ..refs.clone()
        };
        let queries_r = EmbeddedSet {
            vectors: queries.vectors.iter().map(|v| rot(v)).collect(),
            ..queries.clone()
        };
        let (p2, _) = knn_classify(&refs_r, &queries_r, 3).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn recall_tight_clusters() {
        let mut vectors = Vec::new();
        let mut classes = Vec::new();
        for c in 0..3 {
            let base = match c {
                0 => vec![1.0, 0.0, 0.0],
                1 => vec![0.0, 1.0, 0.0],
                _ => vec![0.0, 0.0, 1.0],
            };
            for j in 0..4 {
                let mut v = base.clone();
                v[(c + 1) % 3] += 0.01 * j as f64;
                vectors.push(unit(v));
                classes.push(c);
            }
        }
        let set = set_from(vectors, classes);
        let r = recall_at_k(&set, &[1, 2, 4, 8]).unwrap();
        assert_eq!(r[&1], 1.0);
        // monotone
        assert!(r[&1] <= r[&2] && r[&2] <= r[&4] && r[&4] <= r[&8]);
    }

    #[test]
    fn recall_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 20;
            let set = set_from(
                (0..n).map(|_| random_unit(4, &mut rng)).collect(),
                (0..n).map(|_| rng.gen_range(0..4)).collect(),
            );
            let r = recall_at_k(&set, &[1, 2, 4, 8]).unwrap();
            for &k in &[1usize, 2, 4, 8] {
                let mut hits = 0;
                for i in 0..n {
                    let mut d: Vec<(f64, usize)> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| {
                            (
                                1.0 - set.vectors[i]
                                    .iter()
                                    .zip(&set.vectors[j])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>(),
                                j,
                            )
                        })
                        .collect();
                    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    if d[..k].iter().any(|&(_, j)| set.class_ids[j] == set.class_ids[i]) {
                        hits += 1;
                    }
                }
                assert_eq!(r[&k], hits as f64 / n as f64);
            }
            assert!(r[&1] <= r[&2] && r[&2] <= r[&4] && r[&4] <= r[&8]);
        }
    }

    #[test]
    fn kmeans_each_point_own_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = set_from(
            (0..6).map(|_| random_unit(3, &mut rng)).collect(),
            vec![0; 6],
        );
        let a = kmeans(&set, 6, 0).unwrap();
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
        assert!(kmeans_inertia(&set, &a, 6) < 1e-12);
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut vectors = Vec::new();
        let mut classes = Vec::new();
        for j in 0..5 {
            vectors.push(unit(vec![1.0, 0.01 * j as f64, 0.0]));
            classes.push(0);
            vectors.push(unit(vec![-1.0, 0.0, 0.01 * j as f64]));
            classes.push(1);
        }
        let set = set_from(vectors, classes.clone());
        let a = kmeans(&set, 2, 1).unwrap();
        // equal up to relabeling
        let nmi_val = nmi(&a, &classes).unwrap();
        assert_eq!(nmi_val, 1.0);
    }

    #[test]
    fn kmeans_beats_or_matches_exhaustive_n2() {
        // 12 points, n=2: compare against best over all 2^11 partitions
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = set_from(
            (0..12).map(|_| random_unit(3, &mut rng)).collect(),
            vec![0; 12],
        );
        let a = kmeans(&set, 2, 7).unwrap();
        let got = kmeans_inertia(&set, &a, 2);
        let mut best = f64::MAX;
        for mask in 0..(1u32 << 11) {
            let assign: Vec<usize> = (0..12)
                .map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize })
                .collect();
            if !assign.contains(&1) {
                continue;
            }
            best = best.min(kmeans_inertia(&set, &assign, 2));
        }
        // Lloyd's is a local optimum; on these tiny instances with k-means++
        // seeding it lands on the global one
        assert!(got <= best + 1e-9, "inertia {got} vs best {best}");
    }

    #[test]
    fn nmi_cases() {
        // identical up to permutation
        assert_eq!(nmi(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        // all one cluster with >= 2 true classes
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        // hand case: independent partitions
        let v = nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn nmi_relabel_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let a: Vec<usize> = (0..30).map(|_| rng.gen_range(0..4)).collect();
            let c: Vec<usize> = (0..30).map(|_| rng.gen_range(0..3)).collect();
            let v1 = nmi(&a, &c).unwrap();
            let relabeled: Vec<usize> = a.iter().map(|&x| (x + 2) % 4 + 10).collect();
            let v2 = nmi(&relabeled, &c).unwrap();
            assert!((v1 - v2).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&v1));
        }
    }

    #[test]
    fn few_shot_separable() {
        let mut vectors = Vec::new();
        let mut classes = Vec::new();
        for j in 0..8 {
            vectors.push(unit(vec![1.0, 0.02 * j as f64]));
            classes.push(0);
            vectors.push(unit(vec![-1.0, 0.02 * j as f64]));
            classes.push(1);
        }
        let set = set_from(vectors, classes);
        let acc = few_shot_eval(&set, &[1, 3], 3, 0).unwrap();
        assert_eq!(acc[&1], 1.0);
        assert_eq!(acc[&3], 1.0);
    }

    #[test]
    fn few_shot_single_class_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = set_from(
            (0..6).map(|_| random_unit(3, &mut rng)).collect(),
            vec![4; 6],
        );
        let acc = few_shot_eval(&set, &[1], 2, 0).unwrap();
        assert_eq!(acc[&1], 1.0);
    }

    #[test]
    fn few_shot_insufficient_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = set_from(
            (0..4).map(|_| random_unit(3, &mut rng)).collect(),
            vec![0, 0, 1, 1],
        );
        assert!(few_shot_eval(&set, &[2], 1, 0).is_err());
    }

    #[test]
    fn export_round_trip() {
        use crate::dataio::{generate, SyntheticSpec};
        let ds = generate(&SyntheticSpec {
            n_classes: 3,
            seen_classes: 1,
            objects_per_class: 2,
            views_min: 2,
            views_max: 3,
            latent_dim: 4,
            obs_dim: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let arch = crate::embedder::Arch::new(8, vec![6], 4);
        let params = crate::embedder::init(&arch, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_embeddings(&params, &ds, dir.path()).unwrap();
        let (rows, object_ids, _) = load_embeddings(dir.path()).unwrap();
        assert_eq!(rows.len(), ds.total_views());
        assert_eq!(object_ids.len(), rows.len());
        // rows equal the in-memory embeddings after f32 quantization, and
        // stay unit norm within f32 tolerance
        let mut r = 0;
        for o in &ds.objects {
            for view in &o.views {
                let e = embedder::embed(&params, &embedder::view_to_f64(view)).unwrap();
                for (got, want) in rows[r].iter().zip(&e.v) {
                    assert_eq!(*got, *want as f32);
                }
                let n: f32 = rows[r].iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
                r += 1;
            }
        }
    }
}
