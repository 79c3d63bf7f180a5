//! End-to-end bitstream codec: header, coarsest-level coordinate coding,
//! per-level predicted-distribution range coding, and the exact reverse on
//! decode. Lossless above quantization by construction.
//!
//! Byte-exact stream layout (all integers little-endian):
//!
//! ```text
//! offset size
//!      0    4  magic "OPCC"
//!      4    1  version (1)
//!      5    1  model tag: 0 frequency, 1 re-densification only, 2 full
//!      6    1  max_level
//!      7    1  min_level
//!      8    1  t_offset            (0 for the frequency model)
//!      9    2  channel_width u16   (0 for the frequency model)
//!     11    1  quant mode: 0 box16, 1 scale/posQ
//!           … box16:       box_size f64, center 3xf64, bit_depth u8
//!           … scale/posQ:  global_scale f64, pos_q u32, shift 3xi64
//!           8  source point count u64 (pre-dedup; BPP denominator)
//!           8  coarsest node count u64
//!           8  model checksum u64  (0 for the frequency model)
//!           …  range-coded payload until end of stream
//! ```
//!
//! The payload interleaves, in decode order: the min_level coordinates
//! (per-axis low/high bytes, six adaptive order-0 contexts), then the
//! occupancy codes of each level. Levels the model variant does not cover
//! share one adaptive order-0 model over the 255 code symbols.

use crate::context::{ContextConfig, Predictor, Variant};
use crate::entropy::{quantize_distribution, AdaptiveModel, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::octree::{self, build_levels, Coord};
use crate::pcio::{QuantConfig, QuantizedCloud};
use crate::sparse_nn::ParamSet;

pub const MAGIC: [u8; 4] = *b"OPCC";
pub const VERSION: u8 = 1;

/// The entropy model an encode/decode run codes against.
pub enum CodecModel<'p> {
    /// Context-free adaptive order-0 coding of every level (ablation
    /// baseline).
    Freq,
    Learned(ContextConfig, &'p ParamSet),
}

impl CodecModel<'_> {
    fn tag(&self) -> u8 {
        match self {
            CodecModel::Freq => 0,
            CodecModel::Learned(cfg, _) => cfg.variant.tag(),
        }
    }

    fn checksum(&self) -> u64 {
        match self {
            CodecModel::Freq => 0,
            CodecModel::Learned(_, p) => p.checksum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u8,
    pub model_tag: u8,
    pub max_level: u8,
    pub min_level: u8,
    pub t_offset: u8,
    pub channel_width: u16,
    pub quant: QuantConfig,
    pub source_points: u64,
    pub coarse_count: u64,
    pub checksum: u64,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Header {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.model_tag);
        out.push(self.max_level);
        out.push(self.min_level);
        out.push(self.t_offset);
        out.extend_from_slice(&self.channel_width.to_le_bytes());
        match &self.quant {
            QuantConfig::Box16 {
                box_size,
                center,
                bit_depth,
            } => {
                out.push(0);
                put_f64(&mut out, *box_size);
                for c in center {
                    put_f64(&mut out, *c);
                }
                out.push(*bit_depth);
            }
            QuantConfig::ScalePosq {
                global_scale,
                pos_q,
                shift,
            } => {
                out.push(1);
                put_f64(&mut out, *global_scale);
                out.extend_from_slice(&pos_q.to_le_bytes());
                for s in shift {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
        put_u64(&mut out, self.source_points);
        put_u64(&mut out, self.coarse_count);
        put_u64(&mut out, self.checksum);
        out
    }

    /// Parses a header and returns it with the payload offset.
    pub fn from_bytes(buf: &[u8]) -> Result<(Header, usize)> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic; not an OPCC stream".into()));
        }
        let version = c.u8()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let model_tag = c.u8()?;
        if model_tag > 2 {
            return Err(Error::Corrupt(format!("unknown model tag {model_tag}")));
        }
        let max_level = c.u8()?;
        let min_level = c.u8()?;
        let t_offset = c.u8()?;
        let channel_width = c.u16()?;
        let quant = match c.u8()? {
            0 => {
                let box_size = c.f64()?;
                let center = [c.f64()?, c.f64()?, c.f64()?];
                let bit_depth = c.u8()?;
                QuantConfig::box16(box_size, center, bit_depth)
                    .map_err(|e| Error::Corrupt(format!("bad quant params: {e}")))?
            }
            1 => {
                let global_scale = c.f64()?;
                let pos_q = c.u32()?;
                let shift = [c.i64()?, c.i64()?, c.i64()?];
                let mut q = QuantConfig::scale_posq(global_scale, pos_q)
                    .map_err(|e| Error::Corrupt(format!("bad quant params: {e}")))?;
                if let QuantConfig::ScalePosq { shift: s, .. } = &mut q {
                    *s = shift;
                }
                q
            }
            m => return Err(Error::Corrupt(format!("unknown quant mode {m}"))),
        };
        let source_points = c.u64()?;
        let coarse_count = c.u64()?;
        let checksum = c.u64()?;
        if max_level > 16 || min_level > max_level {
            return Err(Error::Corrupt("implausible level range".into()));
        }
        Ok((
            Header {
                version,
                model_tag,
                max_level,
                min_level,
                t_offset,
                channel_width,
                quant,
                source_points,
                coarse_count,
                checksum,
            },
            c.pos,
        ))
    }
}

/// Per-level coding cost under the model, alongside the measured stream.
#[derive(Clone, Debug)]
pub struct LevelBits {
    pub level: u8,
    pub nodes: usize,
    /// Ideal codelength against the quantized tables actually coded with.
    pub ideal_bits: f64,
    pub coder: &'static str,
}

#[derive(Clone, Debug)]
pub struct BppReport {
    pub total_bytes: usize,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    pub source_points: u64,
    pub bpp: f64,
    pub coarse_bits: f64,
    pub per_level: Vec<LevelBits>,
    pub ideal_total_bits: f64,
}

fn model_levels(model: &CodecModel, depth: u8) -> Result<(u8, u8, u16)> {
    match model {
        CodecModel::Freq => Ok((octree::default_min_level(depth), 0, 0)),
        CodecModel::Learned(cfg, _) => {
            if cfg.max_level != depth {
                return Err(Error::Contract(format!(
                    "model is configured for depth {} but the cloud has depth {depth}",
                    cfg.max_level
                )));
            }
            Ok((cfg.min_level, cfg.t_offset, cfg.channel_width as u16))
        }
    }
}

pub fn encode_with_stats(
    qc: &QuantizedCloud,
    model: &CodecModel,
) -> Result<(Vec<u8>, BppReport)> {
    let depth = qc.effective_depth;
    let (min_level, t_offset, width) = model_levels(model, depth)?;
    let mut header = Header {
        version: VERSION,
        model_tag: model.tag(),
        max_level: depth,
        min_level,
        t_offset,
        channel_width: width,
        quant: qc.config.clone(),
        source_points: qc.source_points,
        coarse_count: 0,
        checksum: model.checksum(),
    };

    if qc.coords.is_empty() {
        let bytes = header.to_bytes();
        let report = BppReport {
            total_bytes: bytes.len(),
            header_bytes: bytes.len(),
            payload_bytes: 0,
            source_points: qc.source_points,
            bpp: if qc.source_points == 0 {
                0.0
            } else {
                bytes.len() as f64 * 8.0 / qc.source_points as f64
            },
            coarse_bits: 0.0,
            per_level: Vec::new(),
            ideal_total_bits: 0.0,
        };
        return Ok((bytes, report));
    }

    let levels = build_levels(&qc.coords, depth, min_level)?;
    header.coarse_count = levels.node_count(min_level) as u64;

    let mut enc = RangeEncoder::new();
    let mut coarse_models: Vec<AdaptiveModel> =
        (0..6).map(|_| AdaptiveModel::new(256)).collect();
    let mut coarse_bits = 0.0;
    for &c in levels.coords_at(min_level) {
        for axis in 0..3 {
            for byte in 0..2 {
                let sym = ((c[axis] >> (8 * byte)) & 0xFF) as usize;
                let m = &mut coarse_models[axis * 2 + byte];
                coarse_bits += m.cost_bits(sym);
                m.encode(&mut enc, sym);
            }
        }
    }

    let mut freq_model = AdaptiveModel::new(255);
    let mut pred = match model {
        CodecModel::Freq => None,
        CodecModel::Learned(cfg, params) => Some(Predictor::new(
            *cfg,
            params,
            levels.coords_at(min_level).to_vec(),
        )),
    };
    let mut per_level = Vec::new();
    for m in min_level..depth {
        let codes = levels.codes_of(m);
        let dists = match &pred {
            Some(p) => p.distributions()?,
            None => None,
        };
        let mut ideal = 0.0;
        let coder = match dists {
            Some(d) => {
                for (i, &code) in codes.iter().enumerate() {
                    let table = quantize_distribution(d.row(i))?;
                    ideal += table.ideal_bits(code as usize - 1);
                    enc.encode_symbol(&table, code as usize - 1);
                }
                "learned"
            }
            None => {
                for &code in codes {
                    ideal += freq_model.cost_bits(code as usize - 1);
                    freq_model.encode(&mut enc, code as usize - 1);
                }
                "freq"
            }
        };
        per_level.push(LevelBits {
            level: m,
            nodes: codes.len(),
            ideal_bits: ideal,
            coder,
        });
        if let Some(p) = pred.as_mut() {
            p.advance(codes)?;
        }
    }

    let mut bytes = header.to_bytes();
    let header_bytes = bytes.len();
    let payload = enc.finish();
    bytes.extend_from_slice(&payload);
    let ideal_total_bits =
        coarse_bits + per_level.iter().map(|l| l.ideal_bits).sum::<f64>();
    let report = BppReport {
        total_bytes: bytes.len(),
        header_bytes,
        payload_bytes: payload.len(),
        source_points: qc.source_points,
        bpp: if qc.source_points == 0 {
            0.0
        } else {
            bytes.len() as f64 * 8.0 / qc.source_points as f64
        },
        coarse_bits,
        per_level,
        ideal_total_bits,
    };
    Ok((bytes, report))
}

pub fn encode(qc: &QuantizedCloud, model: &CodecModel) -> Result<Vec<u8>> {
    encode_with_stats(qc, model).map(|(b, _)| b)
}

/// Encodes and reports the bits-per-point breakdown: measured stream size
/// against the ideal codelength of the tables the coder actually used.
pub fn measure(qc: &QuantizedCloud, model: &CodecModel) -> Result<BppReport> {
    encode_with_stats(qc, model).map(|(_, r)| r)
}

/// Checks that a parsed header matches the model the caller supplied.
fn check_model(header: &Header, model: &CodecModel) -> Result<()> {
    if header.model_tag != model.tag() {
        return Err(Error::Corrupt(format!(
            "stream was coded with model tag {} but got tag {}",
            header.model_tag,
            model.tag()
        )));
    }
    if let CodecModel::Learned(cfg, _) = model {
        if header.checksum != model.checksum() {
            return Err(Error::Corrupt(
                "model checksum mismatch: wrong checkpoint for this stream".into(),
            ));
        }
        if header.max_level != cfg.max_level
            || header.min_level != cfg.min_level
            || header.t_offset != cfg.t_offset
            || header.channel_width != cfg.channel_width as u16
        {
            return Err(Error::Corrupt(
                "model configuration disagrees with the stream header".into(),
            ));
        }
        debug_assert!(Variant::from_tag(header.model_tag).is_ok());
    }
    Ok(())
}

pub fn decode(bytes: &[u8], model: &CodecModel) -> Result<QuantizedCloud> {
    let (header, payload_off) = Header::from_bytes(bytes)?;
    check_model(&header, model)?;
    if header.coarse_count == 0 {
        return Ok(QuantizedCloud {
            coords: Vec::new(),
            config: header.quant,
            effective_depth: header.max_level,
            source_points: header.source_points,
        });
    }

    let mut dec = RangeDecoder::new(&bytes[payload_off..])?;
    let mut coarse_models: Vec<AdaptiveModel> =
        (0..6).map(|_| AdaptiveModel::new(256)).collect();
    let mut coords: Vec<Coord> = Vec::with_capacity(header.coarse_count as usize);
    for _ in 0..header.coarse_count {
        let mut c = [0u32; 3];
        for axis in 0..3 {
            for byte in 0..2 {
                let sym = coarse_models[axis * 2 + byte].decode(&mut dec)? as u32;
                c[axis] |= sym << (8 * byte);
            }
        }
        coords.push(c);
    }
    if !octree::is_morton_sorted(&coords) {
        return Err(Error::Corrupt(
            "decoded coarse coordinates are not Morton-sorted".into(),
        ));
    }
    let limit = 1u64 << header.min_level.min(16);
    if coords
        .iter()
        .any(|c| c.iter().any(|&v| v as u64 >= limit))
    {
        return Err(Error::Corrupt(
            "decoded coarse coordinate exceeds the level extent".into(),
        ));
    }

    let mut freq_model = AdaptiveModel::new(255);
    let mut pred = match model {
        CodecModel::Freq => None,
        CodecModel::Learned(cfg, params) => {
            Some(Predictor::new(*cfg, params, coords.clone()))
        }
    };
    for _m in header.min_level..header.max_level {
        let n = match &pred {
            Some(p) => p.coords().len(),
            None => coords.len(),
        };
        let dists = match &pred {
            Some(p) => p.distributions()?,
            None => None,
        };
        let mut codes = Vec::with_capacity(n);
        match dists {
            Some(d) => {
                for i in 0..n {
                    let table = quantize_distribution(d.row(i))?;
                    codes.push(dec.decode_symbol(&table)? as u8 + 1);
                }
            }
            None => {
                for _ in 0..n {
                    codes.push(freq_model.decode(&mut dec)? as u8 + 1);
                }
            }
        }
        match pred.as_mut() {
            Some(p) => {
                p.advance(&codes)?;
                coords = p.coords().to_vec();
            }
            None => {
                coords = octree::upsample_coords(&coords, &codes)?;
            }
        }
    }

    Ok(QuantizedCloud {
        coords,
        config: header.quant,
        effective_depth: header.max_level,
        source_points: header.source_points,
    })
}

#[cfg(test)]
mod tests;
