use super::*;
use crate::context::Variant;
use crate::pcio::{quantize, QuantConfig};
use crate::synth;
use rand::Rng;

fn quantized(seed: u64, n: usize, bit_depth: u8) -> QuantizedCloud {
    let pc = synth::ring_scan(seed, 6, n / 6, 40.0);
    let cfg = QuantConfig::box16(120.0, [0.0, 0.0, 0.0], bit_depth).unwrap();
    quantize(&pc, &cfg).unwrap()
}

fn learned_model(depth: u8, variant: Variant, seed: u64) -> (ContextConfig, ParamSet) {
    let cfg = ContextConfig::new(depth, octree::default_min_level(depth).max(1), 4, 3, variant)
        .unwrap();
    let mut params = ParamSet::new(seed);
    cfg.init_all(&mut params);
    (cfg, params)
}

#[test]
fn header_round_trips_both_quant_modes() {
    let mut h = Header {
        version: VERSION,
        model_tag: 2,
        max_level: 12,
        min_level: 2,
        t_offset: 4,
        channel_width: 32,
        quant: QuantConfig::box16(400.0, [1.0, -2.0, 3.0], 12).unwrap(),
        source_points: 123456,
        coarse_count: 17,
        checksum: 0xDEADBEEF,
    };
    let (back, off) = Header::from_bytes(&h.to_bytes()).unwrap();
    assert_eq!(back, h);
    assert_eq!(off, h.to_bytes().len());

    h.quant = QuantConfig::ScalePosq {
        global_scale: 0.7,
        pos_q: 64,
        shift: [-5, 0, 992],
    };
    let (back, _) = Header::from_bytes(&h.to_bytes()).unwrap();
    assert_eq!(back, h);
}

#[test]
fn empty_cloud_is_header_only() {
    let qc = QuantizedCloud {
        coords: Vec::new(),
        config: QuantConfig::box16(1.0, [0.0; 3], 8).unwrap(),
        effective_depth: 8,
        source_points: 0,
    };
    let bytes = encode(&qc, &CodecModel::Freq).unwrap();
    let (h, off) = Header::from_bytes(&bytes).unwrap();
    assert_eq!(off, bytes.len());
    assert_eq!(h.coarse_count, 0);
    let back = decode(&bytes, &CodecModel::Freq).unwrap();
    assert!(back.coords.is_empty());
}

#[test]
fn single_point_round_trips() {
    let qc = QuantizedCloud {
        coords: vec![[1000, 37, 511]],
        config: QuantConfig::box16(10.0, [0.0; 3], 10).unwrap(),
        effective_depth: 10,
        source_points: 1,
    };
    let bytes = encode(&qc, &CodecModel::Freq).unwrap();
    assert_eq!(decode(&bytes, &CodecModel::Freq).unwrap(), qc);
}

#[test]
fn freq_round_trips_across_bit_depths() {
    for depth in [4u8, 6, 8, 10, 12] {
        let qc = quantized(depth as u64, 300, depth);
        let bytes = encode(&qc, &CodecModel::Freq).unwrap();
        let back = decode(&bytes, &CodecModel::Freq).unwrap();
        assert_eq!(back, qc, "depth {depth}");
    }
}

#[test]
fn learned_round_trips_untrained_both_variants() {
    let qc = quantized(99, 400, 7);
    assert_eq!(qc.effective_depth, 7);
    for variant in [Variant::Full, Variant::GredOnly] {
        let (cfg, params) = learned_model(7, variant, 42);
        let model = CodecModel::Learned(cfg, &params);
        let bytes = encode(&qc, &model).unwrap();
        let back = decode(&bytes, &model).unwrap();
        assert_eq!(back, qc, "{variant:?}");
    }
}

#[test]
fn wrong_checkpoint_is_rejected() {
    let qc = quantized(7, 200, 7);
    let (cfg, params) = learned_model(7, Variant::Full, 1);
    let bytes = encode(&qc, &CodecModel::Learned(cfg, &params)).unwrap();
    let (_, other) = learned_model(7, Variant::Full, 2);
    let err = decode(&bytes, &CodecModel::Learned(cfg, &other)).unwrap_err();
    assert!(matches!(err, Error::Corrupt(_)), "{err}");
    // Different variant tag is also rejected.
    let (gcfg, gparams) = learned_model(7, Variant::GredOnly, 1);
    assert!(decode(&bytes, &CodecModel::Learned(gcfg, &gparams)).is_err());
    // And a frequency-model decode of a learned stream.
    assert!(decode(&bytes, &CodecModel::Freq).is_err());
}

#[test]
fn bad_magic_and_truncation_are_rejected() {
    let qc = quantized(8, 200, 6);
    let mut bytes = encode(&qc, &CodecModel::Freq).unwrap();
    let mut broken = bytes.clone();
    broken[0] = b'X';
    assert!(matches!(
        decode(&broken, &CodecModel::Freq),
        Err(Error::Corrupt(_))
    ));
    // Drop enough tail bytes that the coder runs dry.
    let n = bytes.len();
    bytes.truncate(n - n / 4);
    assert!(decode(&bytes, &CodecModel::Freq).is_err());
}

#[test]
fn tampering_never_silently_preserves_geometry() {
    // Property: a flipped payload bit is either detected (error) or visible
    // as a geometry difference. Flips that land in flush-slack bits may
    // decode identically, which is benign, but must be rare.
    let qc = quantized(9, 250, 8);
    let bytes = encode(&qc, &CodecModel::Freq).unwrap();
    let (_, payload_off) = Header::from_bytes(&bytes).unwrap();
    let mut rng = crate::util::seeded_rng(10, "tamper");
    let mut benign = 0;
    for _ in 0..40 {
        let mut bad = bytes.clone();
        let pos = rng.gen_range(payload_off..bad.len());
        bad[pos] ^= 1u8 << rng.gen_range(0..8);
        match decode(&bad, &CodecModel::Freq) {
            Err(_) => {}
            Ok(back) if back.coords != qc.coords => {}
            Ok(_) => benign += 1,
        }
    }
    assert!(benign <= 2, "{benign} tampered streams decoded unchanged");
}

#[test]
fn measured_size_close_to_ideal() {
    let qc = quantized(11, 600, 9);
    for model in [CodecModel::Freq] {
        let r = measure(&qc, &model).unwrap();
        let measured_bits = (r.total_bytes - r.header_bytes) as f64 * 8.0;
        assert!(measured_bits + 1e-9 >= r.ideal_total_bits, "coder beat its own ideal");
        let bound = r.ideal_total_bits * 1.002 + 128.0 * 8.0;
        assert!(measured_bits <= bound, "{measured_bits} vs {bound}");
        assert!(r.bpp > 0.0);
        assert_eq!(
            r.total_bytes,
            r.header_bytes + r.payload_bytes
        );
    }
}

#[test]
fn untrained_model_codes_near_uniform() {
    // Zeroed parameters give uniform rows; after table quantization each
    // code costs within [log2(65536/258), log2(65536/257)] bits.
    let qc = quantized(13, 300, 7);
    let (cfg, mut params) = learned_model(7, Variant::Full, 3);
    for p in params.entries.values_mut() {
        p.value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let r = measure(&qc, &CodecModel::Learned(cfg, &params)).unwrap();
    for lvl in &r.per_level {
        if lvl.coder == "learned" {
            let per_sym = lvl.ideal_bits / lvl.nodes as f64;
            assert!(
                (7.98..8.0).contains(&per_sym),
                "level {}: {per_sym}",
                lvl.level
            );
        }
    }
}

#[test]
fn level_bit_accounting_is_complete() {
    let qc = quantized(17, 400, 8);
    let r = measure(&qc, &CodecModel::Freq).unwrap();
    let levels: Vec<u8> = r.per_level.iter().map(|l| l.level).collect();
    let expect: Vec<u8> = (octree::default_min_level(8)..8).collect();
    assert_eq!(levels, expect);
    let total_nodes: usize = r.per_level.iter().map(|l| l.nodes).sum();
    assert!(total_nodes >= qc.coords.len());
}
