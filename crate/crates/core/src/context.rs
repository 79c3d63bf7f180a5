//! Learned occupancy context models. Two cooperating mechanisms drive the
//! per-level code distributions:
//!
//! * re-densification: the finest already-coded occupancy level is folded
//!   back onto a coarser level (8^v channels for v halvings), run through a
//!   residual block, then expanded level by level back to the target
//!   resolution through occupancy-pruned upsampling;
//! * cross-scale propagation: feature maps flow upward from the coarsest
//!   level, with a persistent state kept at a decision level t. Levels at or
//!   below t chain features directly (shallow path); levels above t rebuild
//!   their features from the state at t plus the folded codes (deep path).
//!
//! Level indexing: the features F^m live on level-m nodes and predict the
//! occupancy codes of those nodes (i.e. which of their children at level
//! m+1 exist). All parameters are per level with no sharing.

use crate::error::{Error, Result};
use crate::octree::{Coord, OctreeLevels};
use crate::sparse_nn::{
    self as nn, adamw_step, clip_grad_norm, AdamW, Forward, ParamSet, PredictedDistribution,
    Tensor, ValId,
};
use std::sync::Arc;

/// Which context machinery a model uses. `GredOnly` codes levels at or
/// below t with the adaptive frequency model and uses re-densification
/// alone above it; `Full` adds cross-scale feature propagation everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    GredOnly,
    Full,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::GredOnly => 1,
            Variant::Full => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Variant::GredOnly),
            2 => Ok(Variant::Full),
            _ => Err(Error::Corrupt(format!("unknown model variant tag {tag}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextConfig {
    pub channel_width: usize,
    pub head_hidden: usize,
    pub t_offset: u8,
    pub min_level: u8,
    pub max_level: u8,
    pub variant: Variant,
}

pub const DEFAULT_T_OFFSET: u8 = 4;

impl ContextConfig {
    pub fn new(
        max_level: u8,
        min_level: u8,
        channel_width: usize,
        t_offset: u8,
        variant: Variant,
    ) -> Result<Self> {
        if t_offset < 1 {
            return Err(Error::Contract("t_offset must be at least 1".into()));
        }
        if max_level < min_level + 2 {
            return Err(Error::Contract(format!(
                "learned model needs max_level >= min_level + 2 (got {min_level}..{max_level})"
            )));
        }
        if channel_width == 0 {
            return Err(Error::Contract("channel_width must be positive".into()));
        }
        Ok(ContextConfig {
            channel_width,
            head_hidden: 2 * channel_width,
            t_offset,
            min_level,
            max_level,
            variant,
        })
    }

    /// Decision level, clamped so that min_level < t < max_level holds for
    /// any tree depth.
    pub fn t(&self) -> u8 {
        let raw = self.max_level as i32 - self.t_offset as i32;
        raw.clamp(self.min_level as i32 + 1, self.max_level as i32 - 1) as u8
    }

    /// True when the codes of level-m nodes are predicted by the learned
    /// model (otherwise the codec falls back to the frequency coder).
    pub fn uses_learned(&self, m: u8) -> bool {
        let lo = match self.variant {
            Variant::Full => self.min_level,
            Variant::GredOnly => self.t() + 1,
        };
        m >= lo && m < self.max_level
    }

    /// Registers every parameter of the model. Called once before training
    /// or coding so that forward passes never mutate the registry.
    pub fn init_all(&self, params: &mut ParamSet) {
        let w = self.channel_width;
        let t = self.t();
        if self.variant == Variant::Full {
            for l in self.min_level + 1..=t {
                nn::register_res_block(params, &format!("s{l}.res"), w, w);
                nn::register_upsample(params, &format!("s{l}"), w + 1, w);
            }
        }
        for m in self.min_level..self.max_level {
            if self.uses_learned(m) {
                nn::register_head(params, &format!("h{m}"), w, self.head_hidden);
            }
        }
        for l in t + 1..self.max_level {
            let fold_ch = 1usize << (3 * (l - 1 - t));
            let r_in = match self.variant {
                Variant::Full => w + fold_ch,
                Variant::GredOnly => fold_ch,
            };
            nn::register_res_block(params, &format!("d{l}.r{t}"), r_in, w);
            for k in t + 1..l {
                nn::register_res_block(params, &format!("d{l}.r{k}"), w, w);
            }
            let u_in = match self.variant {
                Variant::Full => w + 1,
                Variant::GredOnly => w,
            };
            for k in t..l {
                nn::register_upsample(params, &format!("d{l}.u{k}"), u_in, w);
            }
        }
    }
}

/// Shallow transition to level `l_next` (= level of the returned features):
/// residual block on F at l_next−1, concat with the code embedding, then
/// occupancy-pruned upsampling.
fn shallow_transition(
    fwd: &mut Forward,
    cfg: &ContextConfig,
    l_next: u8,
    f_prev: ValId,
    coords: &[Coord],
    codes: &[u8],
) -> Result<(Vec<Coord>, ValId)> {
    let w = cfg.channel_width;
    let nbr = nn::neighbor_table(coords);
    let s = fwd.res_block(&format!("s{l_next}.res"), f_prev, &nbr, w, w)?;
    let e = fwd.embed_codes(codes);
    let cat = fwd.tape.concat(s, e)?;
    fwd.upsample_features(&format!("s{l_next}"), cat, coords, codes, w)
}

/// Deep features for target level `l` (> t), rebuilt from the persistent
/// state at t (Full variant) and the already-coded levels t..l−1. `chain`
/// holds (coords, codes) of levels t, t+1, …, l−1 in order.
fn deep_features(
    fwd: &mut Forward,
    cfg: &ContextConfig,
    l: u8,
    f_t: Option<ValId>,
    chain: &[(&[Coord], &[u8])],
) -> Result<(Vec<Coord>, ValId)> {
    let t = cfg.t();
    let w = cfg.channel_width;
    if l <= t || chain.len() != (l - t) as usize {
        return Err(Error::Contract(format!(
            "deep chain for target {l} needs levels {t}..{} (got {})",
            l - 1,
            chain.len()
        )));
    }
    let (fine_coords, fine_codes) = chain[chain.len() - 1];
    let (g_coords, g) = fwd.oct_folding(fine_coords, fine_codes, l - 1 - t)?;
    if g_coords != chain[0].0 {
        return Err(Error::Contract(
            "folded coordinates disagree with the decision level".into(),
        ));
    }
    let fold_ch = 1usize << (3 * (l - 1 - t));
    let (x0, r_in) = match (cfg.variant, f_t) {
        (Variant::Full, Some(f)) => (fwd.tape.concat(f, g)?, w + fold_ch),
        (Variant::GredOnly, None) => (g, fold_ch),
        _ => {
            return Err(Error::Contract(
                "decision-level features inconsistent with variant".into(),
            ))
        }
    };
    let mut cur: Option<ValId> = None;
    let mut cur_coords: Vec<Coord> = Vec::new();
    for (i, &(coords, codes)) in chain.iter().enumerate() {
        let k = t + i as u8;
        let h = if i == 0 {
            let nbr = nn::neighbor_table(coords);
            fwd.res_block(&format!("d{l}.r{t}"), x0, &nbr, r_in, w)?
        } else {
            let nbr = nn::neighbor_table(coords);
            fwd.res_block(&format!("d{l}.r{k}"), cur.unwrap(), &nbr, w, w)?
        };
        let x = match cfg.variant {
            Variant::Full => {
                let e = fwd.embed_codes(codes);
                fwd.tape.concat(h, e)?
            }
            Variant::GredOnly => h,
        };
        let (nc, nf) = fwd.upsample_features(&format!("d{l}.u{k}"), x, coords, codes, w)?;
        cur = Some(nf);
        cur_coords = nc;
    }
    Ok((cur_coords, cur.unwrap()))
}

fn head_logits(fwd: &mut Forward, m: u8, f: ValId) -> Result<ValId> {
    fwd.predict_head(&format!("h{m}"), f)
}

/// Distribution over the 255 occupancy codes of each level-m node, given
/// that node's features.
pub fn predict_level(
    cfg: &ContextConfig,
    params: &ParamSet,
    m: u8,
    feat: &Tensor,
) -> Result<PredictedDistribution> {
    if !cfg.uses_learned(m) {
        return Err(Error::Contract(format!(
            "level {m} is not modeled by this variant"
        )));
    }
    let mut fwd = Forward::new(params);
    let x = fwd.leaf(feat.clone());
    let logits = head_logits(&mut fwd, m, x)?;
    nn::softmax_rows(fwd.tape.value(logits))
}

/// Incremental per-level predictor shared by the encoder and the decoder.
/// Both sides feed it the same code prefix, so its outputs (and therefore
/// the coded intervals) are bit-identical in lockstep.
pub struct Predictor<'p> {
    cfg: ContextConfig,
    params: &'p ParamSet,
    level: u8,
    coords: Vec<Coord>,
    feat: Option<Tensor>,
    f_t: Option<Tensor>,
    hist: Vec<(Vec<Coord>, Vec<u8>)>,
}

impl<'p> Predictor<'p> {
    pub fn new(cfg: ContextConfig, params: &'p ParamSet, min_coords: Vec<Coord>) -> Self {
        let feat = match cfg.variant {
            Variant::Full => Some(Tensor::zeros(min_coords.len(), cfg.channel_width)),
            Variant::GredOnly => None,
        };
        let f_t = if cfg.variant == Variant::Full && cfg.t() == cfg.min_level {
            feat.clone()
        } else {
            None
        };
        Predictor {
            cfg,
            params,
            level: cfg.min_level,
            coords: min_coords,
            feat,
            f_t,
        // History of (coords, codes) for levels >= t, feeding the deep path.
            hist: Vec::new(),
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    /// Predicted distributions for the codes of the current level's nodes,
    /// or None when this level is coded by the frequency model instead.
    pub fn distributions(&self) -> Result<Option<PredictedDistribution>> {
        if !self.cfg.uses_learned(self.level) {
            return Ok(None);
        }
        let f = self.feat.as_ref().ok_or_else(|| {
            Error::Contract(format!("features missing at level {}", self.level))
        })?;
        predict_level(&self.cfg, self.params, self.level, f).map(Some)
    }

    /// Consumes the (just encoded or decoded) codes of the current level and
    /// advances the state to the next level.
    pub fn advance(&mut self, codes: &[u8]) -> Result<()> {
        let m = self.level;
        if m >= self.cfg.max_level {
            return Err(Error::Contract("advanced past max_level".into()));
        }
        if codes.len() != self.coords.len() {
            return Err(Error::Contract(format!(
                "{} codes for {} nodes at level {m}",
                codes.len(),
                self.coords.len()
            )));
        }
        let t = self.cfg.t();
        let next = m + 1;
        let next_is_feature_level = next < self.cfg.max_level;

        if m >= t {
            self.hist.push((self.coords.clone(), codes.to_vec()));
        }

        if next <= t {
            match self.cfg.variant {
                Variant::Full => {
                    let mut fwd = Forward::new(self.params);
                    let f_prev = fwd.leaf(self.feat.take().unwrap());
                    let (nc, nf) =
                        shallow_transition(&mut fwd, &self.cfg, next, f_prev, &self.coords, codes)?;
                    let nf = fwd.tape.value(nf).clone();
                    if next == t {
                        self.f_t = Some(nf.clone());
                    }
                    self.coords = nc;
                    self.feat = Some(nf);
                }
                Variant::GredOnly => {
                    self.coords = crate::octree::upsample_coords(&self.coords, codes)?;
                }
            }
        } else if next_is_feature_level {
            let mut fwd = Forward::new(self.params);
            let f_t = match self.cfg.variant {
                Variant::Full => Some(fwd.leaf(self.f_t.clone().ok_or_else(|| {
                    Error::Contract("missing decision-level state".into())
                })?)),
                Variant::GredOnly => None,
            };
            let chain: Vec<(&[Coord], &[u8])> = self
                .hist
                .iter()
                .map(|(c, x)| (c.as_slice(), x.as_slice()))
                .collect();
            let (nc, nf) = deep_features(&mut fwd, &self.cfg, next, f_t, &chain)?;
            self.feat = Some(fwd.tape.value(nf).clone());
            self.coords = nc;
        } else {
            // Leaf level: only the coordinates are needed from here on.
            self.coords = crate::octree::upsample_coords(&self.coords, codes)?;
            self.feat = None;
        }
        self.level = next;
        Ok(())
    }
}

/// Per-level cross-entropy of a forward pass, in mean nats per node.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    pub level: u8,
    pub nodes: usize,
    pub nats: f64,
}

#[derive(Clone, Debug)]
pub struct StepLoss {
    pub per_level: Vec<LevelLoss>,
    pub total_nodes: usize,
    pub mean_nats: f64,
    pub mean_bits: f64,
}

impl StepLoss {
    fn from_levels(per_level: Vec<LevelLoss>) -> Self {
        let total_nodes: usize = per_level.iter().map(|l| l.nodes).sum();
        let total_nats: f64 = per_level.iter().map(|l| l.nats * l.nodes as f64).sum();
        let mean_nats = if total_nodes == 0 {
            0.0
        } else {
            total_nats / total_nodes as f64
        };
        StepLoss {
            per_level,
            total_nodes,
            mean_nats,
            mean_bits: mean_nats / std::f64::consts::LN_2,
        }
    }
}

/// Full training/evaluation forward pass over every modeled level of one
/// tree. Returns the per-level cross-entropy sums as tape values so the
/// caller can either just read them (evaluation) or differentiate.
fn build_losses(
    fwd: &mut Forward,
    cfg: &ContextConfig,
    levels: &OctreeLevels,
) -> Result<Vec<(u8, usize, ValId)>> {
    if levels.min_level != cfg.min_level || levels.max_level != cfg.max_level {
        return Err(Error::Contract(format!(
            "tree levels {}..{} do not match model config {}..{}",
            levels.min_level, levels.max_level, cfg.min_level, cfg.max_level
        )));
    }
    let t = cfg.t();
    let mut f_shallow: Option<ValId> = match cfg.variant {
        Variant::Full => Some(fwd.leaf(Tensor::zeros(
            levels.coords_at(cfg.min_level).len(),
            cfg.channel_width,
        ))),
        Variant::GredOnly => None,
    };
    let mut f_t: Option<ValId> = None;
    if cfg.variant == Variant::Full && t == cfg.min_level {
        f_t = f_shallow;
    }
    let mut hist: Vec<(&[Coord], &[u8])> = Vec::new();
    let mut out = Vec::new();

    for m in cfg.min_level..cfg.max_level {
        let coords = levels.coords_at(m);
        let codes = levels.codes_of(m);
        let f_m: Option<ValId> = if m <= t {
            f_shallow
        } else {
            let (nc, nf) = deep_features(fwd, cfg, m, f_t, &hist)?;
            if nc != coords {
                return Err(Error::Contract(format!(
                    "deep features misaligned at level {m}"
                )));
            }
            Some(nf)
        };
        if cfg.uses_learned(m) {
            let f = f_m.ok_or_else(|| Error::Contract(format!("no features at level {m}")))?;
            let logits = head_logits(fwd, m, f)?;
            let truth: Vec<u8> = codes.iter().map(|&c| c - 1).collect();
            let ce = fwd.tape.ce_sum(logits, Arc::new(truth))?;
            out.push((m, codes.len(), ce));
        }
        if m >= t {
            hist.push((coords, codes));
        }
        if cfg.variant == Variant::Full && m < t {
            let (nc, nf) =
                shallow_transition(fwd, cfg, m + 1, f_shallow.unwrap(), coords, codes)?;
            if nc != levels.coords_at(m + 1) {
                return Err(Error::Contract(format!(
                    "shallow features misaligned at level {}",
                    m + 1
                )));
            }
            f_shallow = Some(nf);
            if m + 1 == t {
                f_t = f_shallow;
            }
        }
    }
    Ok(out)
}

fn losses_to_step(fwd: &Forward, parts: &[(u8, usize, ValId)]) -> StepLoss {
    let per_level = parts
        .iter()
        .map(|&(level, nodes, ce)| LevelLoss {
            level,
            nodes,
            nats: fwd.tape.value(ce).scalar() / nodes.max(1) as f64,
        })
        .collect();
    StepLoss::from_levels(per_level)
}

/// Loss of the current parameters on one tree, without updating anything.
pub fn evaluate_loss(
    cfg: &ContextConfig,
    params: &ParamSet,
    levels: &OctreeLevels,
) -> Result<StepLoss> {
    let mut fwd = Forward::new(params);
    let parts = build_losses(&mut fwd, cfg, levels)?;
    Ok(losses_to_step(&fwd, &parts))
}

/// Node-averaged loss of one tree together with the gradients of that loss
/// with respect to every parameter.
pub fn loss_and_grads(
    cfg: &ContextConfig,
    params: &ParamSet,
    levels: &OctreeLevels,
) -> Result<(StepLoss, std::collections::BTreeMap<String, Tensor>)> {
    let mut fwd = Forward::new(params);
    let parts = build_losses(&mut fwd, cfg, levels)?;
    let total_nodes: usize = parts.iter().map(|&(_, n, _)| n).sum();
    let mut root: Option<ValId> = None;
    for &(_, _, ce) in &parts {
        root = Some(match root {
            None => ce,
            Some(r) => fwd.tape.add(r, ce),
        });
    }
    let root = fwd
        .tape
        .scale(root.ok_or_else(|| Error::Contract("no modeled levels".into()))?, 1.0 / total_nodes.max(1) as f64);
    let grads = fwd.tape.param_grads(&fwd.tape.backward(root));
    Ok((losses_to_step(&fwd, &parts), grads))
}

/// One optimizer step on a batch of trees: forward over all modeled levels,
/// node-averaged cross-entropy, gradient clipping to norm 1, then the Adam
/// update. Returns the losses measured before the update. A non-finite
/// forward aborts before touching the parameters.
pub fn train_step(
    cfg: &ContextConfig,
    params: &mut ParamSet,
    opt: &AdamW,
    batch: &[&OctreeLevels],
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut grand = std::collections::BTreeMap::new();
    let mut all_levels = Vec::new();
    let scale = 1.0 / batch.len() as f64;
    for levels in batch {
        let (loss, grads) = loss_and_grads(cfg, params, levels)?;
        for (name, g) in grads {
            let e = grand
                .entry(name)
                .or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            for i in 0..g.data.len() {
                e.data[i] += scale * g.data[i];
            }
        }
        all_levels.extend(loss.per_level);
    }
    if grand.values().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient; step aborted".into()));
    }
    clip_grad_norm(&mut grand, 1.0);
    adamw_step(params, &grand, opt);
    Ok(StepLoss::from_levels(all_levels))
}
