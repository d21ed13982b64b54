//! Embedding network: a small tanh MLP with a unit-norm output layer and
//! exact reverse-mode gradients for the loss family in [`crate::losses`].
//!
//! All arithmetic is f64 so central finite differences validate the analytic
//! gradients tightly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VispeError};
use crate::losses;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub norm_epsilon: f64,
}

impl Arch {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        Arch {
            input_dim,
            hidden_dims,
            embed_dim,
            norm_epsilon: 1e-12,
        }
    }

    /// Default desk-scale architecture for a given observation dimension.
    pub fn default_for(input_dim: usize) -> Self {
        Arch::new(input_dim, vec![128, 64], 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.embed_dim < 1 || self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(VispeError::Config("all dims must be >= 1".into()));
        }
        if self.norm_epsilon <= 0.0 {
            return Err(VispeError::Config("norm_epsilon must be > 0".into()));
        }
        Ok(())
    }

    /// Layer shapes as (rows, cols), input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// rows x cols, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
            rows,
            cols,
        }
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            out.push(acc);
        }
        out
    }

    fn n_params(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub arch: Arch,
    pub layers: Vec<Layer>,
}

/// Gradient accumulator with the same shape as [`EmbedderParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl EmbedderParams {
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn from_flat(arch: &Arch, flat: &[f64]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut off = 0;
        for (rows, cols) in arch.layer_shapes() {
            let n = rows * cols;
            if off + n + rows > flat.len() {
                return Err(VispeError::Format("flat parameter vector too short".into()));
            }
            layers.push(Layer {
                w: flat[off..off + n].to_vec(),
                b: flat[off + n..off + n + rows].to_vec(),
                rows,
                cols,
            });
            off += n + rows;
        }
        if off != flat.len() {
            return Err(VispeError::Format("flat parameter vector too long".into()));
        }
        Ok(EmbedderParams {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.rows, l.cols))
                .collect(),
        }
    }
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }
}

/// Xavier-uniform weights, zero biases.
pub fn init(arch: &Arch, seed: u64) -> Result<EmbedderParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Layer {
                w: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
                b: vec![0.0; rows],
                rows,
                cols,
            }
        })
        .collect();
    Ok(EmbedderParams {
        arch: arch.clone(),
        layers,
    })
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub v: Vec<f64>,
    /// Pre-norm output was exactly zero; `v` is the zero vector.
    pub degenerate: bool,
}

/// Per-input forward state kept for the backward pass.
pub struct ForwardCache {
    /// activations[0] = input, activations[l] = output of hidden layer l-1.
    activations: Vec<Vec<f64>>,
    pre_norm: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
    degenerate: bool,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn degenerate(&self) -> bool {
        self.degenerate
    }
}

pub fn forward_cached(params: &EmbedderParams, x: &[f64]) -> Result<ForwardCache> {
    if x.len() != params.arch.input_dim {
        return Err(VispeError::Config(format!(
            "input length {} != input_dim {}",
            x.len(),
            params.arch.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(VispeError::Numeric("non-finite embedding input".into()));
    }
    let n_hidden = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(n_hidden + 1);
    activations.push(x.to_vec());
    for l in 0..n_hidden {
        let z = params.layers[l].matvec(activations.last().unwrap());
        activations.push(z.into_iter().map(f64::tanh).collect());
    }
    let pre_norm = params.layers[n_hidden].matvec(activations.last().unwrap());
    let norm = pre_norm.iter().map(|v| v * v).sum::<f64>().sqrt();
    let degenerate = norm == 0.0;
    let output = if degenerate {
        vec![0.0; pre_norm.len()]
    } else {
        let denom = norm + params.arch.norm_epsilon;
        pre_norm.iter().map(|v| v / denom).collect()
    };
    Ok(ForwardCache {
        activations,
        pre_norm,
        norm,
        output,
        degenerate,
    })
}

pub fn embed(params: &EmbedderParams, x: &[f64]) -> Result<Embedding> {
    let cache = forward_cached(params, x)?;
    Ok(Embedding {
        v: cache.output,
        degenerate: cache.degenerate,
    })
}

pub fn embed_batch(params: &EmbedderParams, xs: &[Vec<f64>]) -> Result<Vec<Embedding>> {
    xs.iter().map(|x| embed(params, x)).collect()
}

/// Accumulate d(loss)/d(theta) into `grads` given d(loss)/d(output).
pub fn backward(params: &EmbedderParams, cache: &ForwardCache, g_out: &[f64], grads: &mut Gradients) {
    // Through the normalization layer: y = u / (||u|| + eps).
    let mut delta: Vec<f64> = if cache.degenerate {
        vec![0.0; cache.pre_norm.len()]
    } else {
        let denom = cache.norm + params.arch.norm_epsilon;
        let dot: f64 = cache.pre_norm.iter().zip(g_out).map(|(u, g)| u * g).sum();
        cache
            .pre_norm
            .iter()
            .zip(g_out)
            .map(|(u, g)| g / denom - u * dot / (cache.norm * denom * denom))
            .collect()
    };
    for l in (0..params.layers.len()).rev() {
        let input = &cache.activations[l];
        let gl = &mut grads.layers[l];
        for r in 0..gl.rows {
            let d = delta[r];
            gl.b[r] += d;
            let row = &mut gl.w[r * gl.cols..(r + 1) * gl.cols];
            for (gw, xv) in row.iter_mut().zip(input) {
                *gw += d * xv;
            }
        }
        if l > 0 {
            let layer = &params.layers[l];
            let mut prev = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let d = delta[r];
                let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            // input to layer l is tanh output; fold in its derivative
            for (p, h) in prev.iter_mut().zip(input.iter()) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
    }
}

/// Learnable linear head (instance classifier or supervised class head).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// rows x cols, row-major; one row per class/instance.
    pub w: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl LinearHead {
    pub fn init(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (rows + cols) as f64).sqrt();
        LinearHead {
            w: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
            rows,
            cols,
        }
    }

    pub fn zeros_like(&self) -> LinearHead {
        LinearHead {
            w: vec![0.0; self.w.len()],
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                self.w[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }
}

/// One minibatch worth of loss structure over raw observation vectors.
///
/// For `Prototype`, anchor `i`'s instance label is position `i`: the target
/// of each posterior is its own slot in the prototype lists.
pub enum LossGraph<'a> {
    Prototype {
        anchors: &'a [Vec<f64>],
        protos_1: &'a [Vec<f64>],
        protos_2: &'a [Vec<f64>],
        tau: f64,
        alpha: f64,
        stop_grad_protos: bool,
    },
    Instance {
        anchors: &'a [Vec<f64>],
        targets: &'a [usize],
        head: &'a LinearHead,
    },
    Supervised {
        anchors: &'a [Vec<f64>],
        labels: &'a [usize],
        head: &'a LinearHead,
    },
    Triplet {
        anchors: &'a [Vec<f64>],
        positives: &'a [Vec<f64>],
        negatives: &'a [Vec<f64>],
        margin: f64,
    },
}

/// Mean loss over the minibatch plus exact gradients w.r.t. theta (and the
/// head, when the graph has one).
pub fn loss_and_grads(
    params: &EmbedderParams,
    graph: &LossGraph,
) -> Result<(f64, Gradients, Option<LinearHead>)> {
    let mut grads = params.zero_grads();
    match graph {
        LossGraph::Prototype {
            anchors,
            protos_1,
            protos_2,
            tau,
            alpha,
            stop_grad_protos,
        } => {
            let m = anchors.len();
            if protos_1.len() != m || protos_2.len() != m {
                return Err(VispeError::Config(
                    "prototype lists must match anchor count".into(),
                ));
            }
            if *tau <= 0.0 {
                return Err(VispeError::Config("tau must be > 0".into()));
            }
            let a_caches: Vec<_> = anchors
                .iter()
                .map(|x| forward_cached(params, x))
                .collect::<Result<_>>()?;
            let p_caches: Vec<_> = protos_1
                .iter()
                .map(|x| forward_cached(params, x))
                .collect::<Result<_>>()?;
            let q_caches: Vec<_> = protos_2
                .iter()
                .map(|x| forward_cached(params, x))
                .collect::<Result<_>>()?;
            let k = params.arch.embed_dim;
            let scale = 1.0 / m as f64;
            let mut gp = vec![vec![0.0; k]; m];
            let mut gq = vec![vec![0.0; k]; m];
            let mut total = 0.0;
            for (i, ac) in a_caches.iter().enumerate() {
                let a = ac.output();
                let z: Vec<f64> = p_caches
                    .iter()
                    .map(|pc| dot(pc.output(), a) / tau)
                    .collect();
                let w: Vec<f64> = q_caches
                    .iter()
                    .map(|qc| dot(qc.output(), a) / tau)
                    .collect();
                let lp1 = losses::log_softmax(&z);
                let lp2 = losses::log_softmax(&w);
                let p1: Vec<f64> = lp1.iter().map(|v| v.exp()).collect();
                let p2: Vec<f64> = lp2.iter().map(|v| v.exp()).collect();
                let kl: f64 = p1
                    .iter()
                    .zip(lp1.iter().zip(&lp2))
                    .map(|(pk, (l1, l2))| pk * (l1 - l2))
                    .sum();
                let loss_i = -lp1[i] - lp2[i] + alpha * kl;
                if !loss_i.is_finite() {
                    return Err(VispeError::Numeric(format!(
                        "non-finite loss at anchor {i} (ce1={}, ce2={}, kl={kl})",
                        -lp1[i], -lp2[i]
                    )));
                }
                total += loss_i;
                // d(loss_i)/d(logits)
                let mut ga = vec![0.0; k];
                for r in 0..m {
                    let ind = if r == i { 1.0 } else { 0.0 };
                    let dz = (p1[r] - ind) + alpha * p1[r] * ((lp1[r] - lp2[r]) - kl);
                    let dw = (p2[r] - ind) + alpha * (p2[r] - p1[r]);
                    let pr = p_caches[r].output();
                    let qr = q_caches[r].output();
                    for j in 0..k {
                        ga[j] += (dz * pr[j] + dw * qr[j]) / tau;
                        gp[r][j] += dz * a[j] / tau;
                        gq[r][j] += dw * a[j] / tau;
                    }
                }
                for g in ga.iter_mut() {
                    *g *= scale;
                }
                backward(params, ac, &ga, &mut grads);
            }
            if !stop_grad_protos {
                for r in 0..m {
                    for g in gp[r].iter_mut() {
                        *g *= scale;
                    }
                    for g in gq[r].iter_mut() {
                        *g *= scale;
                    }
                    backward(params, &p_caches[r], &gp[r], &mut grads);
                    backward(params, &q_caches[r], &gq[r], &mut grads);
                }
            }
            Ok((total * scale, grads, None))
        }
        LossGraph::Instance {
            anchors,
            targets,
            head,
        }
        | LossGraph::Supervised {
            anchors,
            labels: targets,
            head,
        } => {
            if anchors.len() != targets.len() {
                return Err(VispeError::Config("targets must match anchor count".into()));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= head.rows) {
                return Err(VispeError::Config(format!(
                    "label {t} out of range for head with {} rows",
                    head.rows
                )));
            }
            let mut head_grads = head.zeros_like();
            let scale = 1.0 / anchors.len() as f64;
            let mut total = 0.0;
            for (x, &t) in anchors.iter().zip(targets.iter()) {
                let cache = forward_cached(params, x)?;
                let f = cache.output();
                let logits = head.logits(f);
                let lp = losses::log_softmax(&logits);
                total += -lp[t];
                let mut gf = vec![0.0; head.cols];
                for r in 0..head.rows {
                    let dlogit = (lp[r].exp() - if r == t { 1.0 } else { 0.0 }) * scale;
                    let row = &head.w[r * head.cols..(r + 1) * head.cols];
                    let grow = &mut head_grads.w[r * head.cols..(r + 1) * head.cols];
                    for j in 0..head.cols {
                        grow[j] += dlogit * f[j];
                        gf[j] += dlogit * row[j];
                    }
                }
                backward(params, &cache, &gf, &mut grads);
            }
            let total = total * scale;
            if !total.is_finite() {
                return Err(VispeError::Numeric("non-finite classifier loss".into()));
            }
            Ok((total, grads, Some(head_grads)))
        }
        LossGraph::Triplet {
            anchors,
            positives,
            negatives,
            margin,
        } => {
            if positives.len() != anchors.len() || negatives.len() != anchors.len() {
                return Err(VispeError::Config(
                    "triplet lists must match anchor count".into(),
                ));
            }
            let scale = 1.0 / anchors.len() as f64;
            let mut total = 0.0;
            for ((xa, xp), xn) in anchors.iter().zip(positives.iter()).zip(negatives.iter()) {
                let ca = forward_cached(params, xa)?;
                let cp = forward_cached(params, xp)?;
                let cn = forward_cached(params, xn)?;
                let (a, p, n) = (ca.output(), cp.output(), cn.output());
                let dp: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
                let dn: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
                let l = (dp - dn + margin).max(0.0);
                total += l;
                if l > 0.0 {
                    // d/da (|a-p|^2 - |a-n|^2) = 2(n - p); d/dp = 2(p - a); d/dn = 2(a - n)
                    let ga: Vec<f64> = p
                        .iter()
                        .zip(n)
                        .map(|(pv, nv)| 2.0 * (nv - pv) * scale)
                        .collect();
                    let gp: Vec<f64> = p
                        .iter()
                        .zip(a)
                        .map(|(pv, av)| 2.0 * (pv - av) * scale)
                        .collect();
                    let gn: Vec<f64> = a
                        .iter()
                        .zip(n)
                        .map(|(av, nv)| 2.0 * (av - nv) * scale)
                        .collect();
                    backward(params, &ca, &ga, &mut grads);
                    backward(params, &cp, &gp, &mut grads);
                    backward(params, &cn, &gn, &mut grads);
                }
            }
            let total = total * scale;
            if !total.is_finite() {
                return Err(VispeError::Numeric("non-finite triplet loss".into()));
            }
            Ok((total, grads, None))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max relative error between analytic and central-difference gradients over
/// up to `n_coords` sampled theta coordinates (plus all head coordinates when
/// a head is in play).
pub fn gradient_check(
    params: &EmbedderParams,
    build_graph: &dyn Fn(&LinearHead) -> LossGraphSpec,
    head: &LinearHead,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = build_graph(head);
    let (_, grads, head_grads) = loss_and_grads(params, &spec.as_graph(head))?;
    let flat_grads = grads.to_flat();
    let flat = params.to_flat();
    let n = flat.len();
    let mut max_err: f64 = 0.0;
    let coords: Vec<usize> = if n_coords >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, n, n_coords).into_vec()
    };
    for c in coords {
        let mut plus = flat.clone();
        plus[c] += eps;
        let mut minus = flat.clone();
        minus[c] -= eps;
        let lp = loss_at(&params.arch, &plus, &spec, head)?;
        let lm = loss_at(&params.arch, &minus, &spec, head)?;
        let fd = (lp - lm) / (2.0 * eps);
        max_err = max_err.max(rel_err(flat_grads[c], fd));
    }
    if let Some(hg) = head_grads {
        for c in 0..head.w.len() {
            let mut h2 = head.clone();
            h2.w[c] += eps;
            let lp = loss_at(&params.arch, &flat, &spec, &h2)?;
            h2.w[c] -= 2.0 * eps;
            let lm = loss_at(&params.arch, &flat, &spec, &h2)?;
            let fd = (lp - lm) / (2.0 * eps);
            max_err = max_err.max(rel_err(hg.w[c], fd));
        }
    }
    Ok(max_err)
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

fn loss_at(
    arch: &Arch,
    flat: &[f64],
    spec: &LossGraphSpec,
    head: &LinearHead,
) -> Result<f64> {
    let p = EmbedderParams::from_flat(arch, flat)?;
    let (loss, _, _) = loss_and_grads(&p, &spec.as_graph(head))?;
    Ok(loss)
}

/// Owned description of a loss graph, so gradient checking can re-evaluate it
/// under perturbed parameters.
#[derive(Debug, Clone)]
pub enum LossGraphSpec {
    Prototype {
        anchors: Vec<Vec<f64>>,
        protos_1: Vec<Vec<f64>>,
        protos_2: Vec<Vec<f64>>,
        tau: f64,
        alpha: f64,
        stop_grad_protos: bool,
    },
    Instance {
        anchors: Vec<Vec<f64>>,
        targets: Vec<usize>,
    },
    Supervised {
        anchors: Vec<Vec<f64>>,
        labels: Vec<usize>,
    },
    Triplet {
        anchors: Vec<Vec<f64>>,
        positives: Vec<Vec<f64>>,
        negatives: Vec<Vec<f64>>,
        margin: f64,
    },
}

impl LossGraphSpec {
    pub fn as_graph<'a>(&'a self, head: &'a LinearHead) -> LossGraph<'a> {
        match self {
            LossGraphSpec::Prototype {
                anchors,
                protos_1,
                protos_2,
                tau,
                alpha,
                stop_grad_protos,
            } => LossGraph::Prototype {
                anchors,
                protos_1,
                protos_2,
                tau: *tau,
                alpha: *alpha,
                stop_grad_protos: *stop_grad_protos,
            },
            LossGraphSpec::Instance { anchors, targets } => LossGraph::Instance {
                anchors,
                targets,
                head,
            },
            LossGraphSpec::Supervised { anchors, labels } => LossGraph::Supervised {
                anchors,
                labels,
                head,
            },
            LossGraphSpec::Triplet {
                anchors,
                positives,
                negatives,
                margin,
            } => LossGraph::Triplet {
                anchors,
                positives,
                negatives,
                margin: *margin,
            },
        }
    }
}

/// Convert a stored f32 view to the f64 working representation.
pub fn view_to_f64(view: &[f32]) -> Vec<f64> {
    view.iter().map(|&v| v as f64).collect()
}
