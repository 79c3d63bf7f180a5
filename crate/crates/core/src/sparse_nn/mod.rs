//! Differentiable sparse-feature engine: submanifold 3x3x3 convolution,
//! linear/PReLU/concat primitives, residual blocks, occupancy-code folding,
//! occupancy-pruned 8x feature upsampling, the 255-way prediction head, and
//! reverse-mode gradients with a decoupled-weight-decay Adam optimizer.
//!
//! Parameters are per octree level with no cross-scale sharing; the
//! registry keys them by "(level prefix).(block name)".

mod tape;
mod tensor;

pub use tape::{conv_forward_only, conv_forward_seq, Tape, ValId};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::octree::{self, Coord};
use crate::util::seeded_rng;
use rand::Rng;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// Node coordinates at one octree level with an aligned per-node feature
/// matrix living on a tape.
#[derive(Clone)]
pub struct SparseFeatureMap {
    pub level: u8,
    pub coords: Arc<Vec<Coord>>,
    pub feat: ValId,
}

// ---------------------------------------------------------------------------
// Parameter registry and optimizer

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zero,
    Constant(f64),
    /// Uniform in +-sqrt(1/fan_in).
    UniformFanIn(usize),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct ParamSet {
    pub entries: BTreeMap<String, Param>,
    pub step: u64,
    pub init_seed: u64,
}

impl ParamSet {
    pub fn new(init_seed: u64) -> Self {
        ParamSet {
            entries: BTreeMap::new(),
            step: 0,
            init_seed,
        }
    }

    /// Creates the parameter if missing. Initialization depends only on
    /// (seed, name), never on creation order.
    pub fn ensure(&mut self, name: &str, rows: usize, cols: usize, init: Init) {
        if self.entries.contains_key(name) {
            return;
        }
        let mut data = vec![0.0; rows * cols];
        match init {
            Init::Zero => {}
            Init::Constant(c) => data.iter_mut().for_each(|v| *v = c),
            Init::UniformFanIn(fan_in) => {
                let s = (1.0 / fan_in as f64).sqrt();
                let mut rng = seeded_rng(self.init_seed, name);
                data.iter_mut().for_each(|v| *v = rng.gen_range(-s..s));
            }
        }
        self.entries.insert(
            name.to_string(),
            Param {
                value: Tensor::from_vec(rows, cols, data),
                m: Tensor::zeros(rows, cols),
                v: Tensor::zeros(rows, cols),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    /// Checksum over names, shapes, and values; identifies the checkpoint
    /// a bitstream was produced with.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, p) in &self.entries {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(p.value.rows as u64).to_le_bytes());
            bytes.extend_from_slice(&(p.value.cols as u64).to_le_bytes());
            for v in &p.value.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::util::fnv1a64(&bytes)
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.value.data.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Rescales all gradients by max_norm/|g| when the global norm exceeds
/// max_norm. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().map(|g| g.sq_norm()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Decoupled-weight-decay Adam with bias correction.
pub fn adamw_step(params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, hp: &AdamW) {
    params.step += 1;
    let t = params.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    for (name, g) in grads {
        let p = match params.entries.get_mut(name) {
            Some(p) => p,
            None => continue,
        };
        debug_assert_eq!(p.value.data.len(), g.data.len());
        for i in 0..g.data.len() {
            p.m.data[i] = hp.beta1 * p.m.data[i] + (1.0 - hp.beta1) * g.data[i];
            p.v.data[i] = hp.beta2 * p.v.data[i] + (1.0 - hp.beta2) * g.data[i] * g.data[i];
            let m_hat = p.m.data[i] / bc1;
            let v_hat = p.v.data[i] / bc2;
            p.value.data[i] -=
                hp.lr * m_hat / (v_hat.sqrt() + hp.eps) + hp.lr * hp.weight_decay * p.value.data[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Block parameter specs (shared by registration and forward passes)

fn res_block_spec(prefix: &str, c_in: usize, c_out: usize) -> Vec<(String, usize, usize, Init)> {
    let mut v = vec![
        (
            format!("{prefix}.conv1.k"),
            27 * c_in,
            c_out,
            Init::UniformFanIn(27 * c_in),
        ),
        (format!("{prefix}.conv1.b"), 1, c_out, Init::Zero),
        (format!("{prefix}.act.s"), 1, c_out, Init::Constant(0.25)),
        (
            format!("{prefix}.conv2.k"),
            27 * c_out,
            c_out,
            Init::UniformFanIn(27 * c_out),
        ),
        (format!("{prefix}.conv2.b"), 1, c_out, Init::Zero),
    ];
    if c_in != c_out {
        v.push((
            format!("{prefix}.proj.w"),
            c_in,
            c_out,
            Init::UniformFanIn(c_in),
        ));
    }
    v
}

fn upsample_spec(prefix: &str, c_in: usize, c_out: usize) -> Vec<(String, usize, usize, Init)> {
    vec![
        (
            format!("{prefix}.up.w"),
            c_in,
            8 * c_out,
            Init::UniformFanIn(c_in),
        ),
        (format!("{prefix}.up.b"), 1, 8 * c_out, Init::Zero),
        (format!("{prefix}.up.s"), 1, 8 * c_out, Init::Constant(0.25)),
    ]
}

fn head_spec(prefix: &str, c_in: usize, hidden: usize) -> Vec<(String, usize, usize, Init)> {
    vec![
        (
            format!("{prefix}.fc1.w"),
            c_in,
            hidden,
            Init::UniformFanIn(c_in),
        ),
        (format!("{prefix}.fc1.b"), 1, hidden, Init::Zero),
        (format!("{prefix}.act.s"), 1, hidden, Init::Constant(0.25)),
        (
            format!("{prefix}.fc2.w"),
            hidden,
            255,
            Init::UniformFanIn(hidden),
        ),
        (format!("{prefix}.fc2.b"), 1, 255, Init::Zero),
    ]
}

fn register(params: &mut ParamSet, spec: &[(String, usize, usize, Init)]) {
    for (name, r, c, init) in spec {
        params.ensure(name, *r, *c, *init);
    }
}

pub fn register_res_block(params: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize) {
    register(params, &res_block_spec(prefix, c_in, c_out));
}

pub fn register_upsample(params: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize) {
    register(params, &upsample_spec(prefix, c_in, c_out));
}

pub fn register_head(params: &mut ParamSet, prefix: &str, c_in: usize, hidden: usize) {
    register(params, &head_spec(prefix, c_in, hidden));
}

// ---------------------------------------------------------------------------
// Forward pass builder

/// 27-offset neighbor lookup table for a sorted unique coordinate set.
/// Entry `i*27 + o` is the row of coords[i] + offset(o) - (1,1,1), or -1.
pub fn neighbor_table(coords: &[Coord]) -> Arc<Vec<i64>> {
    let index: HashMap<Coord, usize> = coords
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut nbr = vec![-1i64; coords.len() * 27];
    for (i, c) in coords.iter().enumerate() {
        let mut o = 0;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if q.iter().all(|&v| v >= 0) {
                        if let Some(&j) = index.get(&[q[0] as u32, q[1] as u32, q[2] as u32]) {
                            nbr[i * 27 + o] = j as i64;
                        }
                    }
                    o += 1;
                }
            }
        }
    }
    Arc::new(nbr)
}

/// Builds one forward pass over a tape, pulling parameter values from a
/// read-only registry. Each parameter may appear at most once per pass.
pub struct Forward<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Forward {
            tape: Tape::new(),
            params,
        }
    }

    pub fn p(&mut self, name: &str) -> Result<ValId> {
        let t = self.params.get(name)?.value.clone();
        Ok(self.tape.param(name, t))
    }

    pub fn leaf(&mut self, t: Tensor) -> ValId {
        self.tape.leaf(t)
    }

    /// conv3 -> PReLU -> conv3 plus skip; 1x1 projection when the channel
    /// width changes.
    pub fn res_block(
        &mut self,
        prefix: &str,
        x: ValId,
        nbr: &Arc<Vec<i64>>,
        c_in: usize,
        c_out: usize,
    ) -> Result<ValId> {
        let k1 = self.p(&format!("{prefix}.conv1.k"))?;
        let b1 = self.p(&format!("{prefix}.conv1.b"))?;
        let s = self.p(&format!("{prefix}.act.s"))?;
        let k2 = self.p(&format!("{prefix}.conv2.k"))?;
        let b2 = self.p(&format!("{prefix}.conv2.b"))?;
        let h = self.tape.conv(x, k1, b1, nbr.clone());
        let h = self.tape.prelu(h, s);
        let h = self.tape.conv(h, k2, b2, nbr.clone());
        let skip = if c_in == c_out {
            x
        } else {
            let w = self.p(&format!("{prefix}.proj.w"))?;
            self.tape.linear(x, w, None)
        };
        Ok(self.tape.add(skip, h))
    }

    /// One-channel code embedding, codes normalized by 255 into [0, 1].
    pub fn embed_codes(&mut self, codes: &[u8]) -> ValId {
        let data: Vec<f64> = codes.iter().map(|&c| c as f64 / 255.0).collect();
        self.leaf(Tensor::from_vec(codes.len(), 1, data))
    }

    /// Folds occupancy codes of nodes at some level l-1 into a feature map
    /// at the level `fold_depth` halvings above: 8^fold_depth channels,
    /// channel j of an ancestor holding code/255 of its descendant at
    /// relative Morton slot j (0 where unoccupied).
    pub fn oct_folding(
        &mut self,
        fine_coords: &[Coord],
        codes: &[u8],
        fold_depth: u8,
    ) -> Result<(Vec<Coord>, ValId)> {
        if fine_coords.len() != codes.len() {
            return Err(Error::Contract(format!(
                "{} coords but {} codes in oct_folding",
                fine_coords.len(),
                codes.len()
            )));
        }
        let v = fold_depth as u32;
        let mut target: Vec<Coord> = fine_coords.to_vec();
        for _ in 0..v {
            target = octree::downsample(&target)?;
        }
        let channels = 1usize << (3 * v);
        let mut feat = Tensor::zeros(target.len(), channels);
        let mask = (1u32 << v) - 1;
        let mut row = 0usize;
        for (c, &code) in fine_coords.iter().zip(codes) {
            let anc = [c[0] >> v, c[1] >> v, c[2] >> v];
            while row < target.len() && target[row] != anc {
                row += 1;
            }
            if row >= target.len() {
                return Err(Error::Contract(
                    "coordinate hierarchies are misaligned in oct_folding".into(),
                ));
            }
            let slot = octree::morton_encode([c[0] & mask, c[1] & mask, c[2] & mask], fold_depth.max(1) as u8)
                .map(|m| m.0 as usize)
                .unwrap_or(0);
            *feat.at_mut(row, slot) = code as f64 / 255.0;
        }
        Ok((target, self.leaf(feat)))
    }

    /// 8x channel expansion (linear + PReLU) followed by occupancy pruning:
    /// slot b of node i survives iff bit b of codes[i] is set. Returns the
    /// child coordinates aligned row-for-row with the output features.
    pub fn upsample_features(
        &mut self,
        prefix: &str,
        x: ValId,
        parent_coords: &[Coord],
        codes: &[u8],
        c_out: usize,
    ) -> Result<(Vec<Coord>, ValId)> {
        if parent_coords.len() != codes.len() {
            return Err(Error::Contract(format!(
                "{} parents but {} codes in upsample",
                parent_coords.len(),
                codes.len()
            )));
        }
        let w = self.p(&format!("{prefix}.up.w"))?;
        let b = self.p(&format!("{prefix}.up.b"))?;
        let s = self.p(&format!("{prefix}.up.s"))?;
        let h = self.tape.linear(x, w, Some(b));
        let h = self.tape.prelu(h, s);
        let mut rows = Vec::new();
        let mut offs = Vec::new();
        for (i, &code) in codes.iter().enumerate() {
            if code == 0 {
                return Err(Error::Contract("occupancy code 0 during upsample".into()));
            }
            for bit in 0..8u32 {
                if code & (1 << bit) != 0 {
                    rows.push(i as u32);
                    offs.push(bit * c_out as u32);
                }
            }
        }
        let out = self.tape.gather(h, Arc::new(rows), Arc::new(offs), c_out);
        let child_coords = octree::upsample_coords(parent_coords, codes)?;
        Ok((child_coords, out))
    }

    /// linear -> PReLU -> linear producing 255 logits per node.
    pub fn predict_head(&mut self, prefix: &str, x: ValId) -> Result<ValId> {
        let w1 = self.p(&format!("{prefix}.fc1.w"))?;
        let b1 = self.p(&format!("{prefix}.fc1.b"))?;
        let s = self.p(&format!("{prefix}.act.s"))?;
        let w2 = self.p(&format!("{prefix}.fc2.w"))?;
        let b2 = self.p(&format!("{prefix}.fc2.b"))?;
        let h = self.tape.linear(x, w1, Some(b1));
        let h = self.tape.prelu(h, s);
        Ok(self.tape.linear(h, w2, Some(b2)))
    }
}

// ---------------------------------------------------------------------------
// Distributions and loss

/// Per-node probability rows over occupancy symbols 1..=255 (column j is
/// the probability of code j+1).
#[derive(Clone, Debug)]
pub struct PredictedDistribution {
    pub probs: Tensor,
}

impl PredictedDistribution {
    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn len(&self) -> usize {
        self.probs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows == 0
    }
}

pub fn softmax_rows(logits: &Tensor) -> Result<PredictedDistribution> {
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut probs = logits.clone();
    for i in 0..probs.rows {
        let row = probs.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(PredictedDistribution { probs })
}

/// Mean negative log probability of the true occupancy codes, in
/// (nats, bits) per symbol. `truth` holds codes in 1..=255.
pub fn cross_entropy_loss(dist: &PredictedDistribution, truth: &[u8]) -> Result<(f64, f64)> {
    if dist.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} rows vs {} truth codes",
            dist.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut total = 0.0;
    for (i, &code) in truth.iter().enumerate() {
        if code == 0 {
            return Err(Error::Contract("truth code 0".into()));
        }
        total -= dist.row(i)[code as usize - 1].ln();
    }
    let nats = total / truth.len() as f64;
    Ok((nats, nats / std::f64::consts::LN_2))
}

/// Central finite difference of a scalar function with respect to one
/// parameter element. Backbone of the gradient-check tests.
pub fn numeric_grad<F>(params: &ParamSet, name: &str, idx: usize, eps: f64, f: F) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    let mut plus = params.clone();
    plus.entries.get_mut(name).unwrap().value.data[idx] += eps;
    let mut minus = params.clone();
    minus.entries.get_mut(name).unwrap().value.data[idx] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}
