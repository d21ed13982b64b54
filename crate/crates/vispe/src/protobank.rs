//! Per-instance prototype view assignments, the randomization schedule, and
//! minibatch / prototype-set-pair sampling.
//!
//! The bank persistently stores which view of each object currently serves as
//! its prototype (the first set of each sampled pair); the second set of the
//! pair is a fresh independent draw every iteration. Prototype embeddings are
//! always recomputed from current parameters by the caller; only view
//! indices live here.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::MultiviewDataset;
use crate::error::{Result, VispeError};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// view_index[object_id] = current prototype view (0-based).
    pub view_index: Vec<usize>,
    pub threshold: f64,
    rng: ChaCha8Rng,
}

/// Serializable snapshot of a ChaCha stream (seed + word position).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankState {
    pub view_index: Vec<usize>,
    pub threshold: f64,
    pub rng: RngState,
}

impl PrototypeBank {
    pub fn to_state(&self) -> BankState {
        BankState {
            view_index: self.view_index.clone(),
            threshold: self.threshold,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_state(state: &BankState) -> Self {
        PrototypeBank {
            view_index: state.view_index.clone(),
            threshold: state.threshold,
            rng: state.rng.restore(),
        }
    }
}

/// One iteration's worth of sampling: m distinct instances, an anchor view
/// each, and the pair of prototype view indices defining s'_1 and s'_2.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchPlan {
    pub instance_ids: Vec<usize>,
    pub anchor_views: Vec<usize>,
    pub proto_views_1: Vec<usize>,
    pub proto_views_2: Vec<usize>,
}

impl MinibatchPlan {
    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }
}

/// Initialize ν_i ~ Uniform{0..V_i-1} for every object.
pub fn init_bank(ds: &MultiviewDataset, threshold: f64, seed: u64) -> Result<PrototypeBank> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(VispeError::Config("threshold must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view_index = ds
        .objects
        .iter()
        .map(|o| rng.gen_range(0..o.n_views()))
        .collect();
    Ok(PrototypeBank {
        view_index,
        threshold,
        rng,
    })
}

/// With probability `threshold`, independently per instance, draw a fresh
/// prototype view. Returns how many instances were resampled.
pub fn maybe_resample(bank: &mut PrototypeBank, ds: &MultiviewDataset) -> usize {
    let mut count = 0;
    for o in &ds.objects {
        let u: f64 = bank.rng.gen();
        if u < bank.threshold {
            bank.view_index[o.object_id] = bank.rng.gen_range(0..o.n_views());
            count += 1;
        }
    }
    count
}

/// Draw views for one instance slot: anchor view, s'_1 view from the bank,
/// and a fresh s'_2 view (distinct from s'_1 whenever V_i >= 2).
fn draw_views(
    n_views: usize,
    bank_view: usize,
    exclude_anchor_proto: bool,
    rng: &mut impl Rng,
) -> (usize, usize, usize) {
    let pv1 = bank_view;
    let pv2 = if n_views >= 2 {
        let mut v = rng.gen_range(0..n_views - 1);
        if v >= pv1 {
            v += 1;
        }
        v
    } else {
        0
    };
    let anchor = if exclude_anchor_proto && n_views >= 2 {
        loop {
            let j = rng.gen_range(0..n_views);
            if j != pv1 && j != pv2 {
                break j;
            }
            if n_views == 2 {
                // only two views and both are prototypes; fall back to uniform
                break rng.gen_range(0..n_views);
            }
        }
    } else {
        rng.gen_range(0..n_views)
    };
    (anchor, pv1, pv2)
}

/// Uniform without-replacement minibatch of `m` training instances.
pub fn sample_minibatch(
    ds: &MultiviewDataset,
    bank: &PrototypeBank,
    instance_pool: &[usize],
    m: usize,
    exclude_anchor_proto: bool,
    rng: &mut impl Rng,
) -> Result<MinibatchPlan> {
    if m > instance_pool.len() {
        return Err(VispeError::Config(format!(
            "minibatch size {m} exceeds {} training instances",
            instance_pool.len()
        )));
    }
    let ids: Vec<usize> = instance_pool.choose_multiple(rng, m).copied().collect();
    Ok(plan_for_ids(ds, bank, &ids, exclude_anchor_proto, rng))
}

/// Build a plan for a fixed set of instance ids (used by the epoch scheduler).
pub fn plan_for_ids(
    ds: &MultiviewDataset,
    bank: &PrototypeBank,
    ids: &[usize],
    exclude_anchor_proto: bool,
    rng: &mut impl Rng,
) -> MinibatchPlan {
    let mut anchor_views = Vec::with_capacity(ids.len());
    let mut proto_views_1 = Vec::with_capacity(ids.len());
    let mut proto_views_2 = Vec::with_capacity(ids.len());
    for &id in ids {
        let n_views = ds.objects[id].n_views();
        let (a, p1, p2) = draw_views(n_views, bank.view_index[id], exclude_anchor_proto, rng);
        anchor_views.push(a);
        proto_views_1.push(p1);
        proto_views_2.push(p2);
    }
    MinibatchPlan {
        instance_ids: ids.to_vec(),
        anchor_views,
        proto_views_1,
        proto_views_2,
    }
}

/// All prototype-set combinations over a subset of instances, i.e. the
/// cartesian product of each object's view indices. Errors if the product
/// exceeds `cap`.
pub fn enumerate_prototype_sets(
    ds: &MultiviewDataset,
    instance_subset: &[usize],
    cap: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut cardinality: usize = 1;
    for &id in instance_subset {
        cardinality = cardinality
            .checked_mul(ds.objects[id].n_views())
            .filter(|&c| c <= cap)
            .ok_or_else(|| {
                VispeError::Config(format!("prototype-set cardinality exceeds cap {cap}"))
            })?;
    }
    let mut sets = vec![Vec::new()];
    for &id in instance_subset {
        let n = ds.objects[id].n_views();
        let mut next = Vec::with_capacity(sets.len() * n);
        for s in &sets {
            for v in 0..n {
                let mut s2 = s.clone();
                s2.push(v);
                next.push(s2);
            }
        }
        sets = next;
    }
    Ok(sets)
}
