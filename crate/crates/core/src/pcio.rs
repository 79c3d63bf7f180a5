//! Raw point-cloud I/O (KITTI .bin, PLY) and voxel quantization.
//!
//! Two quantization schemes are supported: `Box16` normalizes points into a
//! fixed bounding box and scales by `2^bit_depth` with floor rounding;
//! `ScalePosq` scales by a global factor, divides by `posQ`, rounds half
//! away from zero, and shifts per-axis minima to zero. The shift is recorded
//! in the config so the decoder can invert it exactly.

use crate::error::{Error, Result};
use crate::octree;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Legal `posQ` divisors for the scale/posQ scheme.
pub const POSQ_VALUES: [u32; 7] = [8, 16, 32, 64, 128, 256, 512];

#[derive(Clone, Debug, PartialEq)]
pub enum QuantConfig {
    Box16 {
        box_size: f64,
        center: [f64; 3],
        bit_depth: u8,
    },
    ScalePosq {
        global_scale: f64,
        pos_q: u32,
        /// Per-axis minimum subtracted after rounding; filled in by
        /// `quantize` and carried in the bitstream header for inversion.
        shift: [i64; 3],
    },
}

impl QuantConfig {
    pub fn box16(box_size: f64, center: [f64; 3], bit_depth: u8) -> Result<Self> {
        if !(box_size > 0.0) {
            return Err(Error::Contract(format!("box_size must be > 0, got {box_size}")));
        }
        if bit_depth == 0 || bit_depth > 16 {
            return Err(Error::Contract(format!("bit_depth must be in 1..=16, got {bit_depth}")));
        }
        Ok(QuantConfig::Box16 { box_size, center, bit_depth })
    }

    pub fn scale_posq(global_scale: f64, pos_q: u32) -> Result<Self> {
        if !POSQ_VALUES.contains(&pos_q) {
            return Err(Error::Contract(format!("posQ must be one of {POSQ_VALUES:?}, got {pos_q}")));
        }
        if !(global_scale > 0.0) {
            return Err(Error::Contract(format!("global_scale must be > 0, got {global_scale}")));
        }
        Ok(QuantConfig::ScalePosq { global_scale, pos_q, shift: [0; 3] })
    }

    /// Half a voxel width: the worst-case per-axis dequantization error.
    pub fn half_voxel(&self) -> f64 {
        match self {
            QuantConfig::Box16 { box_size, bit_depth, .. } => {
                box_size / (1u64 << (*bit_depth as u32 + 1)) as f64
            }
            QuantConfig::ScalePosq { global_scale, pos_q, .. } => {
                *pos_q as f64 / (2.0 * global_scale)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedCloud {
    /// Deduplicated voxel coordinates, Morton-sorted.
    pub coords: Vec<[u32; 3]>,
    pub config: QuantConfig,
    /// Smallest L with all components < 2^L.
    pub effective_depth: u8,
    /// Point count before deduplication; BPP divides by this.
    pub source_points: u64,
}

/// Parses the KITTI Velodyne on-disk convention: records of four f32
/// little-endian values (x, y, z, intensity); intensity is discarded.
pub fn read_kitti_bin(raw: &[u8]) -> Result<PointCloud> {
    if raw.len() % 16 != 0 {
        return Err(Error::MalformedFile(format!(
            "KITTI .bin length {} is not a multiple of 16",
            raw.len()
        )));
    }
    let mut points = Vec::with_capacity(raw.len() / 16);
    for rec in raw.chunks_exact(16) {
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(rec[8..12].try_into().unwrap());
        points.push([x as f64, y as f64, z as f64]);
    }
    Ok(PointCloud::new(points))
}

fn depth_for(coords: &[[u32; 3]]) -> u8 {
    let mut max = 0u32;
    for c in coords {
        max = max.max(c[0]).max(c[1]).max(c[2]);
    }
    let mut depth = 0u8;
    while (1u64 << depth) <= max as u64 {
        depth += 1;
    }
    depth.max(1)
}

/// Voxelizes a cloud. Points outside the box (Box16) are an error, not
/// clamped; silent clamping would corrupt rate-distortion measurement.
pub fn quantize(cloud: &PointCloud, cfg: &QuantConfig) -> Result<QuantizedCloud> {
    let source_points = cloud.len() as u64;
    if cloud.is_empty() {
        return Ok(QuantizedCloud {
            coords: Vec::new(),
            config: cfg.clone(),
            effective_depth: 0,
            source_points,
        });
    }
    for p in &cloud.points {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite point {p:?}")));
        }
    }
    match cfg {
        QuantConfig::Box16 { box_size, center, bit_depth } => {
            let scale = (1u64 << *bit_depth) as f64;
            let mut coords = Vec::with_capacity(cloud.len());
            for p in &cloud.points {
                let mut c = [0u32; 3];
                for a in 0..3 {
                    let u = (p[a] - center[a] + box_size / 2.0) / box_size;
                    if !(0.0..1.0).contains(&u) {
                        return Err(Error::OutOfRange(format!(
                            "point {p:?} lies outside the quantization box"
                        )));
                    }
                    c[a] = ((u * scale).floor() as u64).min((1u64 << *bit_depth) - 1) as u32;
                }
                coords.push(c);
            }
            let coords = octree::sort_dedup_morton(&coords, *bit_depth)?;
            Ok(QuantizedCloud {
                coords,
                config: cfg.clone(),
                effective_depth: *bit_depth,
                source_points,
            })
        }
        QuantConfig::ScalePosq { global_scale, pos_q, .. } => {
            let mut raw = Vec::with_capacity(cloud.len());
            for p in &cloud.points {
                let mut c = [0i64; 3];
                for a in 0..3 {
                    // round() is half-away-from-zero, the frozen rule.
                    c[a] = (p[a] * global_scale / *pos_q as f64).round() as i64;
                }
                raw.push(c);
            }
            let mut shift = [i64::MAX; 3];
            for c in &raw {
                for a in 0..3 {
                    shift[a] = shift[a].min(c[a]);
                }
            }
            let mut coords = Vec::with_capacity(raw.len());
            for c in &raw {
                let mut q = [0u32; 3];
                for a in 0..3 {
                    let v = c[a] - shift[a];
                    if v >= 1 << 16 {
                        return Err(Error::OutOfRange(format!(
                            "shifted coordinate {v} exceeds the 16-bit axis limit"
                        )));
                    }
                    q[a] = v as u32;
                }
                coords.push(q);
            }
            let depth = depth_for(&coords);
            let coords = octree::sort_dedup_morton(&coords, depth)?;
            Ok(QuantizedCloud {
                coords,
                config: QuantConfig::ScalePosq {
                    global_scale: *global_scale,
                    pos_q: *pos_q,
                    shift,
                },
                effective_depth: depth,
                source_points,
            })
        }
    }
}

/// Inverse map to voxel centers (Box16) or exact rounding representatives
/// (ScalePosq) for metric evaluation.
pub fn dequantize(qc: &QuantizedCloud) -> PointCloud {
    let mut points = Vec::with_capacity(qc.coords.len());
    match &qc.config {
        QuantConfig::Box16 { box_size, center, bit_depth } => {
            let scale = (1u64 << *bit_depth) as f64;
            for c in &qc.coords {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = (c[a] as f64 + 0.5) / scale * box_size - box_size / 2.0 + center[a];
                }
                points.push(p);
            }
        }
        QuantConfig::ScalePosq { global_scale, pos_q, shift } => {
            for c in &qc.coords {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = (c[a] as i64 + shift[a]) as f64 * *pos_q as f64 / global_scale;
                }
                points.push(p);
            }
        }
    }
    PointCloud::new(points)
}

// ---------------------------------------------------------------------------
// PLY

#[derive(Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy)]
enum PropType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PropType {
    fn parse(s: &str) -> Option<PropType> {
        Some(match s {
            "char" | "int8" => PropType::I8,
            "uchar" | "uint8" => PropType::U8,
            "short" | "int16" => PropType::I16,
            "ushort" | "uint16" => PropType::U16,
            "int" | "int32" => PropType::I32,
            "uint" | "uint32" => PropType::U32,
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::I8 | PropType::U8 => 1,
            PropType::I16 | PropType::U16 => 2,
            PropType::I32 | PropType::U32 | PropType::F32 => 4,
            PropType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            PropType::I8 => b[0] as i8 as f64,
            PropType::U8 => b[0] as f64,
            PropType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PropType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PropType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PropType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PropType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Reads a PLY vertex cloud (ascii or binary little-endian). The vertex
/// element must be the first element and must declare x, y and z.
pub fn read_ply(raw: &[u8]) -> Result<PointCloud> {
    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < raw.len() && raw[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= raw.len() {
            return Err(Error::MalformedFile("unterminated PLY header".into()));
        }
        let s = String::from_utf8_lossy(&raw[start..*pos]).trim_end_matches('\r').to_string();
        *pos += 1;
        Ok(s)
    };

    if line(&mut pos)? != "ply" {
        return Err(Error::MalformedFile("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<(PropType, String)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = line(&mut pos)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => {
                return Err(Error::MalformedFile(format!("unsupported PLY format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse().map_err(|_| {
                    Error::MalformedFile(format!("bad vertex count {n}"))
                })?);
                in_vertex = true;
            }
            ["element", ..] => {
                if vertex_count.is_none() {
                    return Err(Error::MalformedFile(
                        "vertex must be the first PLY element".into(),
                    ));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::MalformedFile("list property in vertex element".into()))
            }
            ["property", ty, name] if in_vertex => {
                let ty = PropType::parse(ty).ok_or_else(|| {
                    Error::MalformedFile(format!("unknown property type {ty}"))
                })?;
                props.push((ty, name.to_string()));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(Error::MalformedFile(format!("bad header line: {l}"))),
        }
    }
    let format = format.ok_or_else(|| Error::MalformedFile("missing format line".into()))?;
    let n = vertex_count.ok_or_else(|| Error::MalformedFile("missing vertex element".into()))?;

    let idx_of = |name: &str| props.iter().position(|(_, p)| p == name);
    let (ix, iy, iz) = match (idx_of("x"), idx_of("y"), idx_of("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::MalformedFile(
                "PLY vertex element lacks x/y/z properties".into(),
            ))
        }
    };

    let mut points = Vec::with_capacity(n);
    match format {
        PlyFormat::Ascii => {
            for _ in 0..n {
                let l = line(&mut pos)?;
                let vals: Vec<f64> = l
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::MalformedFile(format!("bad ascii vertex: {l}")))?;
                if vals.len() < props.len() {
                    return Err(Error::MalformedFile(format!("short ascii vertex: {l}")));
                }
                points.push([vals[ix], vals[iy], vals[iz]]);
            }
        }
        PlyFormat::BinaryLe => {
            let stride: usize = props.iter().map(|(t, _)| t.size()).sum();
            if raw.len() < pos + n * stride {
                return Err(Error::MalformedFile("truncated PLY payload".into()));
            }
            let offsets: Vec<usize> = {
                let mut o = 0;
                props
                    .iter()
                    .map(|(t, _)| {
                        let cur = o;
                        o += t.size();
                        cur
                    })
                    .collect()
            };
            for i in 0..n {
                let rec = &raw[pos + i * stride..pos + (i + 1) * stride];
                let read = |j: usize| props[j].0.read_le(&rec[offsets[j]..]);
                points.push([read(ix), read(iy), read(iz)]);
            }
        }
    }
    Ok(PointCloud::new(points))
}

/// Writes a cloud as PLY with double-precision x/y/z so a round trip
/// preserves coordinates exactly.
pub fn write_ply(cloud: &PointCloud, ascii: bool) -> Vec<u8> {
    let format = if ascii { "ascii" } else { "binary_little_endian" };
    let mut out = format!(
        "ply\nformat {} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        format,
        cloud.len()
    )
    .into_bytes();
    if ascii {
        for p in &cloud.points {
            out.extend_from_slice(format!("{} {} {}\n", p[0], p[1], p[2]).as_bytes());
        }
    } else {
        for p in &cloud.points {
            for a in 0..3 {
                out.extend_from_slice(&p[a].to_le_bytes());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_empty_and_single() {
        assert!(read_kitti_bin(&[]).unwrap().is_empty());
        let mut rec = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        let pc = read_kitti_bin(&rec).unwrap();
        assert_eq!(pc.points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn kitti_misaligned() {
        assert!(matches!(read_kitti_bin(&[0u8; 24]), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn box16_hand_arithmetic() {
        // floor(((p + 200) / 400) * 65536) per axis.
        let cfg = QuantConfig::box16(400.0, [0.0; 3], 16).unwrap();
        let pc = PointCloud::new(vec![[10.0, -5.0, 1.0]]);
        let qc = quantize(&pc, &cfg).unwrap();
        assert_eq!(qc.coords, vec![[34406, 31948, 32931]]);
        let back = dequantize(&qc);
        assert!((back.points[0][0] - 10.0).abs() <= 400.0 / 65536.0);
    }

    #[test]
    fn box16_out_of_range_is_error() {
        let cfg = QuantConfig::box16(400.0, [0.0; 3], 16).unwrap();
        let pc = PointCloud::new(vec![[250.0, 0.0, 0.0]]);
        assert!(matches!(quantize(&pc, &cfg), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn scale_posq_hand_arithmetic() {
        let cfg = QuantConfig::scale_posq(10000.0, 8).unwrap();
        let pc = PointCloud::new(vec![[10.0, 10.0, 10.0], [9.9, 9.9, 9.9]]);
        let qc = quantize(&pc, &cfg).unwrap();
        // round(100000/8) = 12500, round(99000/8) = 12375; min-shift by 12375.
        match qc.config {
            QuantConfig::ScalePosq { shift, .. } => assert_eq!(shift, [12375; 3]),
            _ => unreachable!(),
        }
        assert!(qc.coords.contains(&[12500 - 12375; 3]));
        assert!(qc.coords.contains(&[0, 0, 0]));
    }

    #[test]
    fn dedup_and_idempotence() {
        let cfg = QuantConfig::box16(10.0, [0.0; 3], 4).unwrap();
        let pc = PointCloud::new(vec![[1.0, 1.0, 1.0], [1.01, 1.01, 1.01], [-2.0, 0.0, 3.0]]);
        let qc = quantize(&pc, &cfg).unwrap();
        assert_eq!(qc.coords.len(), 2);
        assert_eq!(qc.source_points, 3);
        // quantize . dequantize . quantize is a projection.
        let qc2 = quantize(&dequantize(&qc), &qc.config).unwrap();
        assert_eq!(qc.coords, qc2.coords);
    }

    #[test]
    fn empty_quantize() {
        let cfg = QuantConfig::box16(400.0, [0.0; 3], 12).unwrap();
        let qc = quantize(&PointCloud::default(), &cfg).unwrap();
        assert!(qc.coords.is_empty());
        assert!(dequantize(&qc).is_empty());
    }

    #[test]
    fn ply_round_trip() {
        let pc = PointCloud::new(vec![[0.125, -3.5, 7.75], [1.0, 2.0, 3.0], [-0.001, 0.0, 9.0]]);
        for ascii in [false, true] {
            let bytes = write_ply(&pc, ascii);
            let back = read_ply(&bytes).unwrap();
            assert_eq!(pc, back, "ascii={ascii}");
        }
    }

    #[test]
    fn ply_empty_round_trip() {
        let bytes = write_ply(&PointCloud::default(), false);
        assert!(read_ply(&bytes).unwrap().is_empty());
    }

    #[test]
    fn ply_missing_z_is_error() {
        let hdr = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n";
        assert!(matches!(read_ply(hdr), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn ply_skips_extra_properties() {
        let hdr = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n1 2 3 255\n";
        let pc = read_ply(hdr).unwrap();
        assert_eq!(pc.points, vec![[1.0, 2.0, 3.0]]);
    }
}
