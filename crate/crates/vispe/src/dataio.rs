//! Synthetic multiview dataset generation, persistence and subsampling.
//!
//! Each object is a point on a smooth one-parameter view manifold: a latent
//! vector is modulated by a view angle, pushed through a fixed random linear
//! map and a tanh nonlinearity, and observed with additive noise. Datasets
//! carry seen/unseen class tags and per-object train/test partition tags;
//! view angles are stored as generation metadata only and are never read by
//! training code.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::Uniform;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VispeError};

pub const FORMAT_VERSION: u32 = 1;

/// Fraction of each class's objects tagged as test at generation time.
const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub seen_classes: usize,
    pub objects_per_class: usize,
    pub views_min: usize,
    pub views_max: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub class_scale: f64,
    pub object_spread: f64,
    pub view_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Desk-scale default: 20 classes (12 seen), 15 objects per class,
    /// 6..=12 views per object, 16-dim latent, 64-dim observations. The
    /// scale/spread/noise ratios are chosen so class structure is present
    /// but not saturated; easier settings push every method to ceiling
    /// accuracy and mask differences between them.
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 20,
            seen_classes: 12,
            objects_per_class: 15,
            views_min: 6,
            views_max: 12,
            latent_dim: 16,
            obs_dim: 64,
            class_scale: 0.4,
            object_spread: 0.5,
            view_noise: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views_min < 1 {
            return Err(VispeError::Config("views_min must be >= 1".into()));
        }
        if self.views_max < self.views_min {
            return Err(VispeError::Config("views_max must be >= views_min".into()));
        }
        if self.seen_classes >= self.n_classes {
            return Err(VispeError::Config(
                "seen_classes must be < n_classes".into(),
            ));
        }
        if self.class_scale < 0.0 || self.object_spread < 0.0 || self.view_noise < 0.0 {
            return Err(VispeError::Config("std parameters must be >= 0".into()));
        }
        if self.latent_dim < 1 || self.obs_dim < 1 {
            return Err(VispeError::Config("dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub object_id: usize,
    pub class_id: usize,
    pub partition: Partition,
    /// Row-major views, each of length `obs_dim`.
    pub views: Vec<Vec<f32>>,
    /// Generation metadata in [0, 2π); contractually unread by training.
    pub view_angles: Vec<f64>,
}

impl ObjectRecord {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewDataset {
    pub objects: Vec<ObjectRecord>,
    pub obs_dim: usize,
    /// Sorted class ids present during self-supervised training.
    pub seen_classes: Vec<usize>,
    /// Echo of the generating spec, kept through subsampling.
    pub spec: SyntheticSpec,
}

impl MultiviewDataset {
    pub fn total_views(&self) -> usize {
        self.objects.iter().map(|o| o.n_views()).sum()
    }

    pub fn is_seen_class(&self, class_id: usize) -> bool {
        self.seen_classes.binary_search(&class_id).is_ok()
    }

    /// Object ids used for self-supervised training: seen classes, train tag.
    pub fn train_object_ids(&self) -> Vec<usize> {
        self.objects
            .iter()
            .filter(|o| o.partition == Partition::Train && self.is_seen_class(o.class_id))
            .map(|o| o.object_id)
            .collect()
    }

    pub fn n_unseen_classes(&self) -> usize {
        self.spec.n_classes - self.seen_classes.len()
    }
}

/// The fixed observation model drawn once per dataset seed.
pub struct GenModel {
    /// obs_dim x 3*latent_dim, row-major.
    pub proj: Vec<f64>,
    pub bias: Vec<f64>,
    pub latent_dim: usize,
    pub obs_dim: usize,
}

impl GenModel {
    pub fn draw(spec: &SyntheticSpec, rng: &mut impl Rng) -> Self {
        let d3 = 3 * spec.latent_dim;
        let scale = 1.0 / (d3 as f64).sqrt();
        let proj = (0..spec.obs_dim * d3)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..spec.obs_dim)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        GenModel {
            proj,
            bias,
            latent_dim: spec.latent_dim,
            obs_dim: spec.obs_dim,
        }
    }

    /// Noiseless observation of latent `u` at view angle `phi`.
    pub fn observe(&self, u: &[f64], phi: f64) -> Vec<f64> {
        let d = self.latent_dim;
        debug_assert_eq!(u.len(), d);
        let (s, c) = phi.sin_cos();
        let mut out = Vec::with_capacity(self.obs_dim);
        for row in 0..self.obs_dim {
            let w = &self.proj[row * 3 * d..(row + 1) * 3 * d];
            let mut acc = self.bias[row];
            for (j, &uj) in u.iter().enumerate() {
                acc += w[j] * uj + w[d + j] * uj * s + w[2 * d + j] * uj * c;
            }
            out.push(acc.tanh());
        }
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Generate a dataset from a spec. Deterministic given `spec.seed`; each
/// object uses a derived RNG stream so generation order is irrelevant.
pub fn generate(spec: &SyntheticSpec) -> Result<MultiviewDataset> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = GenModel::draw(spec, &mut master);

    let mut centers = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let z: Vec<f64> = (0..spec.latent_dim)
            .map(|_| spec.class_scale * master.sample::<f64, _>(StandardNormal))
            .collect();
        centers.push(z);
    }

    let opc = spec.objects_per_class;
    let test_count = if opc >= 2 {
        ((opc as f64 * TEST_FRACTION).round() as usize).max(1)
    } else {
        0
    };

    let n_objects = spec.n_classes * opc;
    let mut objects = Vec::with_capacity(n_objects);
    for object_id in 0..n_objects {
        let class_id = object_id / opc;
        let within = object_id % opc;
        let partition = if within >= opc - test_count {
            Partition::Test
        } else {
            Partition::Train
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ splitmix64(object_id as u64));
        let u: Vec<f64> = centers[class_id]
            .iter()
            .map(|&z| z + spec.object_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n_views = rng.sample(Uniform::new_inclusive(spec.views_min, spec.views_max));
        let mut views = Vec::with_capacity(n_views);
        let mut angles = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let phi: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let mut x = model.observe(&u, phi);
            for v in x.iter_mut() {
                *v += spec.view_noise * rng.sample::<f64, _>(StandardNormal);
            }
            views.push(x.into_iter().map(|v| v as f32).collect());
            angles.push(phi);
        }
        objects.push(ObjectRecord {
            object_id,
            class_id,
            partition,
            views,
            view_angles: angles,
        });
    }

    Ok(MultiviewDataset {
        objects,
        obs_dim: spec.obs_dim,
        seen_classes: (0..spec.seen_classes).collect(),
        spec: spec.clone(),
    })
}

/// Disjoint object-id partitions: (seen&train, seen&test, unseen).
pub fn split_seen_unseen(
    ds: &MultiviewDataset,
    seen_class_ids: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    for &c in seen_class_ids {
        if c >= ds.spec.n_classes {
            return Err(VispeError::Config(format!("unknown class id {c}")));
        }
    }
    let mut seen_sorted = seen_class_ids.to_vec();
    seen_sorted.sort_unstable();
    seen_sorted.dedup();
    let mut train = Vec::new();
    let mut seen_test = Vec::new();
    let mut unseen = Vec::new();
    for o in &ds.objects {
        if seen_sorted.binary_search(&o.class_id).is_ok() {
            match o.partition {
                Partition::Train => train.push(o.object_id),
                Partition::Test => seen_test.push(o.object_id),
            }
        } else {
            unseen.push(o.object_id);
        }
    }
    Ok((train, seen_test, unseen))
}

/// Uniform without-replacement subsample of objects per class and views per
/// object. Requested counts above what is available clamp with a warning.
pub fn subsample(
    ds: &MultiviewDataset,
    objects_per_class: usize,
    views_per_object: usize,
    seed: u64,
) -> MultiviewDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.spec.n_classes];
    for o in &ds.objects {
        by_class[o.class_id].push(o.object_id);
    }
    let mut kept_ids = Vec::new();
    for ids in by_class.iter() {
        if ids.is_empty() {
            continue;
        }
        let take = if objects_per_class > ids.len() {
            eprintln!(
                "warning: requested {} objects but class has {}; clamping",
                objects_per_class,
                ids.len()
            );
            ids.len()
        } else {
            objects_per_class
        };
        let mut chosen: Vec<usize> = ids.choose_multiple(&mut rng, take).copied().collect();
        chosen.sort_unstable();
        kept_ids.extend(chosen);
    }
    let mut objects = Vec::with_capacity(kept_ids.len());
    for (new_id, &old_id) in kept_ids.iter().enumerate() {
        let src = &ds.objects[old_id];
        let take = if views_per_object > src.n_views() {
            eprintln!(
                "warning: requested {} views but object {} has {}; clamping",
                views_per_object, old_id, src.n_views()
            );
            src.n_views()
        } else {
            views_per_object
        };
        let mut view_idx: Vec<usize> =
            (0..src.n_views()).choose_multiple(&mut rng, take);
        view_idx.sort_unstable();
        objects.push(ObjectRecord {
            object_id: new_id,
            class_id: src.class_id,
            partition: src.partition,
            views: view_idx.iter().map(|&j| src.views[j].clone()).collect(),
            view_angles: view_idx.iter().map(|&j| src.view_angles[j]).collect(),
        });
    }
    MultiviewDataset {
        objects,
        obs_dim: ds.obs_dim,
        seen_classes: ds.seen_classes.clone(),
        spec: ds.spec.clone(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestObject {
    object_id: usize,
    class_id: usize,
    partition: Partition,
    view_count: usize,
    angles: Vec<f64>,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    obs_dim: usize,
    spec: SyntheticSpec,
    seen_classes: Vec<usize>,
    objects: Vec<ManifestObject>,
}

/// Write `manifest.json` + `views.bin` (row-major little-endian f32).
pub fn save(ds: &MultiviewDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| VispeError::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::with_capacity(ds.total_views() * ds.obs_dim * 4);
    let mut manifest_objects = Vec::with_capacity(ds.objects.len());
    for o in &ds.objects {
        let byte_offset = blob.len() as u64;
        for view in &o.views {
            for &v in view {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        manifest_objects.push(ManifestObject {
            object_id: o.object_id,
            class_id: o.class_id,
            partition: o.partition,
            view_count: o.n_views(),
            angles: o.view_angles.clone(),
            byte_offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        obs_dim: ds.obs_dim,
        spec: ds.spec.clone(),
        seen_classes: ds.seen_classes.clone(),
        objects: manifest_objects,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| VispeError::Format(e.to_string()))?;
    std::fs::write(&manifest_path, json).map_err(|e| VispeError::io(&manifest_path, e))?;
    let bin_path = dir.join("views.bin");
    let mut f = std::fs::File::create(&bin_path).map_err(|e| VispeError::io(&bin_path, e))?;
    f.write_all(&blob).map_err(|e| VispeError::io(&bin_path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<MultiviewDataset> {
    let manifest_path = dir.join("manifest.json");
    let json =
        std::fs::read_to_string(&manifest_path).map_err(|e| VispeError::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| VispeError::Format(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(VispeError::Format(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let bin_path = dir.join("views.bin");
    let mut blob = Vec::new();
    std::fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| VispeError::io(&bin_path, e))?;
    let total_views: usize = manifest.objects.iter().map(|o| o.view_count).sum();
    let expected = total_views * manifest.obs_dim * 4;
    if blob.len() != expected {
        return Err(VispeError::Format(format!(
            "views.bin length {} does not match manifest ({} expected)",
            blob.len(),
            expected
        )));
    }
    let mut objects = Vec::with_capacity(manifest.objects.len());
    for (idx, mo) in manifest.objects.iter().enumerate() {
        if mo.object_id != idx {
            return Err(VispeError::Format(format!(
                "object ids must be contiguous from 0; found {} at position {}",
                mo.object_id, idx
            )));
        }
        if mo.angles.len() != mo.view_count {
            return Err(VispeError::Format(format!(
                "object {}: angle count {} != view_count {}",
                mo.object_id,
                mo.angles.len(),
                mo.view_count
            )));
        }
        let row = manifest.obs_dim * 4;
        let start = mo.byte_offset as usize;
        let end = start + mo.view_count * row;
        if end > blob.len() {
            return Err(VispeError::Format(format!(
                "object {}: byte range {}..{} out of bounds",
                mo.object_id, start, end
            )));
        }
        let mut views = Vec::with_capacity(mo.view_count);
        for v in 0..mo.view_count {
            let off = start + v * row;
            let view: Vec<f32> = blob[off..off + row]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            views.push(view);
        }
        objects.push(ObjectRecord {
            object_id: mo.object_id,
            class_id: mo.class_id,
            partition: mo.partition,
            views,
            view_angles: mo.angles.clone(),
        });
    }
    Ok(MultiviewDataset {
        objects,
        obs_dim: manifest.obs_dim,
        seen_classes: manifest.seen_classes,
        spec: manifest.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> SyntheticSpec {
        SyntheticSpec::default()
    }

    #[test]
    fn determinism_same_seed() {
        let spec = desk_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn desk_spec_counts() {
        let ds = generate(&desk_spec()).unwrap();
        assert_eq!(ds.objects.len(), 300);
        let total = ds.total_views();
        assert!((1800..=3600).contains(&total), "total views {total}");
    }

    #[test]
    fn noiseless_identical_latent_and_angle() {
        let spec = SyntheticSpec {
            view_noise: 0.0,
            ..desk_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = GenModel::draw(&spec, &mut rng);
        let u: Vec<f64> = (0..spec.latent_dim).map(|i| (i as f64) * 0.1 - 0.5).collect();
        let x1 = model.observe(&u, 1.25);
        let x2 = model.observe(&u, 1.25);
        assert_eq!(x1, x2);
    }

    #[test]
    fn angle_locality() {
        let spec = desk_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = GenModel::draw(&spec, &mut rng);
        let u: Vec<f64> = (0..spec.latent_dim).map(|i| ((i * 7 % 5) as f64) * 0.2 - 0.4).collect();
        let base = model.observe(&u, 2.0);
        let mut last = f64::MAX;
        for &delta in &[1e-1, 1e-2, 1e-3, 1e-4] {
            let other = model.observe(&u, 2.0 + delta);
            let dist: f64 = base
                .iter()
                .zip(&other)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist < last, "distance not shrinking at delta {delta}");
            last = dist;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn split_partition_law() {
        let ds = generate(&desk_spec()).unwrap();
        let seen: Vec<usize> = ds.seen_classes.clone();
        let (train, seen_test, unseen) = split_seen_unseen(&ds, &seen).unwrap();
        assert_eq!(train.len() + seen_test.len() + unseen.len(), ds.objects.len());
        // 8 unseen classes x 15 objects
        assert_eq!(unseen.len(), 120);
    }

    #[test]
    fn split_all_seen_empty_unseen() {
        let ds = generate(&desk_spec()).unwrap();
        let all: Vec<usize> = (0..ds.spec.n_classes).collect();
        let (_, _, unseen) = split_seen_unseen(&ds, &all).unwrap();
        assert!(unseen.is_empty());
    }

    #[test]
    fn split_unknown_class_errors() {
        let ds = generate(&desk_spec()).unwrap();
        assert!(split_seen_unseen(&ds, &[999]).is_err());
    }

    #[test]
    fn subsample_identity() {
        let ds = generate(&desk_spec()).unwrap();
        let sub = subsample(&ds, ds.spec.objects_per_class, ds.spec.views_max, 1);
        assert_eq!(sub.objects.len(), ds.objects.len());
        assert_eq!(sub.total_views(), ds.total_views());
    }

    #[test]
    fn subsample_counts() {
        let ds = generate(&desk_spec()).unwrap();
        let sub = subsample(&ds, 5, 1, 1);
        assert_eq!(sub.objects.len(), 5 * ds.spec.n_classes);
        for o in &sub.objects {
            assert_eq!(o.n_views(), 1);
        }
        // ids re-contiguous
        for (i, o) in sub.objects.iter().enumerate() {
            assert_eq!(o.object_id, i);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = generate(&SyntheticSpec {
            n_classes: 4,
            seen_classes: 2,
            objects_per_class: 3,
            ..desk_spec()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn truncated_blob_errors() {
        let ds = generate(&SyntheticSpec {
            n_classes: 3,
            seen_classes: 1,
            objects_per_class: 2,
            ..desk_spec()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let bin = dir.path().join("views.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&bin, bytes).unwrap();
        match load(dir.path()) {
            Err(VispeError::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_size_law() {
        let ds = generate(&SyntheticSpec {
            n_classes: 3,
            seen_classes: 1,
            objects_per_class: 2,
            ..desk_spec()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        let total: u64 = manifest["objects"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["view_count"].as_u64().unwrap())
            .sum();
        let bin_len = std::fs::metadata(dir.path().join("views.bin")).unwrap().len();
        assert_eq!(total * ds.obs_dim as u64 * 4, bin_len);
    }
}
