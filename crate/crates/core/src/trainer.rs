//! Training loop and checkpoint container.
//!
//! Checkpoint layout (little-endian; magic "OPCK", version 1):
//!
//! ```text
//! 4  magic "OPCK"
//! 1  version
//! 1  variant tag (1 re-densification only, 2 full)
//! 1  max_level     1  min_level     1  t_offset
//! 2  channel_width u16              2  head_hidden u16
//! 8  init seed u64                  8  optimizer step u64
//! 4  tensor count u32
//! per tensor: name (u16 length + UTF-8), rows u32, cols u32,
//!             then value, first moment, second moment as f64 runs
//! 8  FNV-1a64 of everything above (integrity check)
//! ```

use crate::context::{train_step, ContextConfig, StepLoss, Variant};
use crate::error::{Error, Result};
use crate::octree::{build_levels, OctreeLevels};
use crate::pcio::PointCloud;
use crate::sparse_nn::{AdamW, Param, ParamSet, Tensor};
use crate::synth;
use crate::util::fnv1a64;
use serde::{Deserialize, Serialize};

pub const CKPT_MAGIC: [u8; 4] = *b"OPCK";
pub const CKPT_VERSION: u8 = 1;

pub fn save_checkpoint(cfg: &ContextConfig, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(cfg.variant.tag());
    out.push(cfg.max_level);
    out.push(cfg.min_level);
    out.push(cfg.t_offset);
    out.extend_from_slice(&(cfg.channel_width as u16).to_le_bytes());
    out.extend_from_slice(&(cfg.head_hidden as u16).to_le_bytes());
    out.extend_from_slice(&params.init_seed.to_le_bytes());
    out.extend_from_slice(&params.step.to_le_bytes());
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for (name, p) in &params.entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
        for t in [&p.value, &p.m, &p.v] {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = fnv1a64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(ContextConfig, ParamSet)> {
    if bytes.len() < 12 + 8 {
        return Err(Error::Corrupt("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(Error::Corrupt("checkpoint integrity check failed".into()));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Corrupt("truncated checkpoint".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(Error::Corrupt("bad magic; not an OPCK checkpoint".into()));
    }
    let version = take(&mut pos, 1)?[0];
    if version != CKPT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let variant = Variant::from_tag(take(&mut pos, 1)?[0])?;
    let max_level = take(&mut pos, 1)?[0];
    let min_level = take(&mut pos, 1)?[0];
    let t_offset = take(&mut pos, 1)?[0];
    let width = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let hidden = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let init_seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());

    let mut cfg = ContextConfig::new(max_level, min_level, width, t_offset, variant)
        .map_err(|e| Error::Corrupt(format!("invalid checkpoint config: {e}")))?;
    cfg.head_hidden = hidden;

    let mut params = ParamSet::new(init_seed);
    params.step = step;
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, nlen)?)
            .map_err(|_| Error::Corrupt("non-UTF-8 tensor name".into()))?
            .to_string();
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let read_tensor = |pos: &mut usize| -> Result<Tensor> {
            let raw = take(pos, rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::from_vec(rows, cols, data))
        };
        let value = read_tensor(&mut pos)?;
        let m = read_tensor(&mut pos)?;
        let v = read_tensor(&mut pos)?;
        params.entries.insert(name, Param { value, m, v });
    }
    if pos != body.len() {
        return Err(Error::Corrupt("trailing bytes in checkpoint".into()));
    }
    Ok((cfg, params))
}

/// One synthetic scene of the built-in corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    /// "plane", "sphere", "rings", or "blob".
    pub kind: String,
    pub seed: u64,
    pub points: usize,
}

impl SceneSpec {
    pub fn generate(&self) -> Result<PointCloud> {
        Ok(match self.kind.as_str() {
            "plane" => synth::plane(self.seed, self.points, 30.0),
            "sphere" => synth::sphere(self.seed, self.points, [0.0; 3], 10.0),
            "rings" => synth::ring_scan(self.seed, 8, self.points / 8, 50.0),
            "blob" => synth::blob(self.seed, self.points, 30.0),
            k => {
                return Err(Error::Contract(format!(
                    "unknown scene kind {k:?} (expected plane|sphere|rings|blob)"
                )))
            }
        })
    }
}

fn default_batch() -> usize {
    1
}

fn default_lr() -> f64 {
    1e-4
}

/// Serializable training run description; a run is a pure function of this
/// config (and any out-of-band input files the CLI adds to the corpus).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u32,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub channel_width: usize,
    pub t_offset: u8,
    /// Octree depth the scenes are quantized to (= model max_level).
    pub depth: u8,
    /// Defaults to max(1, depth − 11).
    #[serde(default)]
    pub min_level: Option<u8>,
    /// "full" or "gred".
    pub variant: String,
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
    /// Emit a loss record every this many steps (0 = every step).
    #[serde(default)]
    pub log_every: u32,
}

impl TrainConfig {
    pub fn variant(&self) -> Result<Variant> {
        match self.variant.as_str() {
            "full" => Ok(Variant::Full),
            "gred" => Ok(Variant::GredOnly),
            v => Err(Error::Contract(format!(
                "unknown variant {v:?} (expected full|gred)"
            ))),
        }
    }

    pub fn context_config(&self) -> Result<ContextConfig> {
        let min = self
            .min_level
            .unwrap_or_else(|| crate::octree::default_min_level(self.depth).max(1));
        ContextConfig::new(self.depth, min, self.channel_width, self.t_offset, self.variant()?)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        serde_json::from_str(raw)
            .map_err(|e| Error::MalformedFile(format!("bad training config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub mean_bits: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub cfg: ContextConfig,
    pub params: ParamSet,
    pub log: Vec<StepRecord>,
    /// Step at which a non-finite loss aborted training, if any; `params`
    /// then holds the last state that produced finite losses.
    pub diverged_at: Option<u64>,
}

/// Builds octree level pyramids for a corpus of clouds.
pub fn corpus_trees(cfg: &ContextConfig, clouds: &[PointCloud]) -> Result<Vec<OctreeLevels>> {
    clouds
        .iter()
        .map(|pc| {
            let coords = synth::to_grid(pc, cfg.max_level);
            build_levels(&coords, cfg.max_level, cfg.min_level)
        })
        .collect()
}

/// Runs (or resumes) a training loop. Deterministic in (config, initial
/// params): batches are drawn round-robin from the corpus using the
/// optimizer step counter, so a resumed run replays the exact schedule of
/// an uninterrupted one.
pub fn train(
    cfg: &TrainConfig,
    initial: Option<(ContextConfig, ParamSet)>,
    extra_clouds: &[PointCloud],
    mut on_step: impl FnMut(u64, &StepLoss),
) -> Result<TrainOutcome> {
    let (ctx, mut params) = match initial {
        Some((ctx, params)) => {
            if ctx != cfg.context_config()? {
                return Err(Error::Contract(
                    "checkpoint config disagrees with training config".into(),
                ));
            }
            (ctx, params)
        }
        None => {
            let ctx = cfg.context_config()?;
            let mut params = ParamSet::new(cfg.seed);
            ctx.init_all(&mut params);
            (ctx, params)
        }
    };
    let mut clouds: Vec<PointCloud> = cfg
        .scenes
        .iter()
        .map(|s| s.generate())
        .collect::<Result<_>>()?;
    clouds.extend(extra_clouds.iter().cloned());
    if clouds.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let trees = corpus_trees(&ctx, &clouds)?;
    let opt = AdamW {
        lr: cfg.lr,
        ..AdamW::default()
    };
    let batch_size = cfg.batch_size.max(1);
    let mut log = Vec::new();
    let mut diverged_at = None;
    for _ in 0..cfg.steps {
        let start = (params.step as usize * batch_size) % trees.len();
        let batch: Vec<&OctreeLevels> = (0..batch_size)
            .map(|i| &trees[(start + i) % trees.len()])
            .collect();
        let step_no = params.step + 1;
        match train_step(&ctx, &mut params, &opt, &batch) {
            Ok(loss) => {
                if cfg.log_every <= 1 || step_no % cfg.log_every as u64 == 0 {
                    log.push(StepRecord {
                        step: step_no,
                        mean_bits: loss.mean_bits,
                    });
                }
                on_step(step_no, &loss);
            }
            Err(Error::Numeric(_)) => {
                diverged_at = Some(step_no);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        cfg: ctx,
        params,
        log,
        diverged_at,
    })
}

#[cfg(test)]
mod tests;
