//! Batch front door for the codec: encode, decode, train, eval, profile,
//! and selfcheck. Exit codes: 0 success, 1 usage, 2 I/O, 3 corrupt stream
//! or model mismatch, 4 numeric failure.

use clap::{Args, Parser, Subcommand};
use opcc::codec::{self, CodecModel};
use opcc::context::{loss_and_grads, ContextConfig, Variant};
use opcc::error::{Error, Result};
use opcc::metrics::{self, RDPoint};
use opcc::octree::build_levels;
use opcc::pcio::{self, PointCloud, QuantConfig, QuantizedCloud};
use opcc::report::{self, RdRow};
use opcc::sparse_nn::{numeric_grad, ParamSet};
use opcc::synth;
use opcc::trainer::{self, load_checkpoint, save_checkpoint, TrainConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "opcc", version, about = "Lossless octree geometry codec for quantized LiDAR point clouds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize a point cloud and encode it to a bitstream.
    Encode(EncodeArgs),
    /// Decode a bitstream back to a PLY point cloud.
    Decode(DecodeArgs),
    /// Train a context model on synthetic scenes and/or supplied clouds.
    Train(TrainArgs),
    /// Decode labelled streams and report rate-distortion metrics.
    Eval(EvalArgs),
    /// Emit the per-level occupancy/neighbor sparsity profile of a cloud.
    Profile(ProfileArgs),
    /// Run the built-in invariant suite and report pass/fail.
    Selfcheck,
}

#[derive(Args)]
struct QuantArgs {
    /// Octree bit depth for box quantization (1-16).
    #[arg(long)]
    bits: Option<u8>,
    /// Bounding box edge length; defaults to the cloud's tight extent.
    #[arg(long = "box")]
    box_size: Option<f64>,
    /// Box center as "x,y,z" (default: cloud centroid of the tight box).
    #[arg(long)]
    center: Option<String>,
    /// Global scale for scale/posQ quantization (selects that scheme).
    #[arg(long)]
    scale: Option<f64>,
    /// posQ divisor (8..512, power of two); requires --scale.
    #[arg(long)]
    posq: Option<u32>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Input cloud: .ply (ascii or binary) or KITTI .bin.
    #[arg(long)]
    input: PathBuf,
    /// Output bitstream path.
    #[arg(long)]
    output: PathBuf,
    /// Checkpoint for the learned context model.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Force the context-free frequency model ("freq").
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    quant: QuantArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output PLY path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// Write ascii PLY instead of binary.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config (seed, steps, scenes, model shape).
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    output: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the per-step loss log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Extra corpus clouds (.ply or .bin) appended to the config scenes.
    #[arg(long)]
    corpus: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference cloud the decoded streams are compared against.
    #[arg(long)]
    reference: PathBuf,
    /// Labelled bitstream "label=path"; repeat to build RD curves.
    #[arg(long = "stream", value_parser = parse_labeled)]
    streams: Vec<(String, PathBuf)>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// PSNR peak value; defaults to the reference cloud's largest extent.
    #[arg(long)]
    peak: Option<f64>,
    /// Write the RD table to this path instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    input: PathBuf,
    /// Octree depth to voxelize at.
    #[arg(long)]
    bits: u8,
    /// Coarsest profiled level (default: max(1, bits - 11)).
    #[arg(long)]
    min_level: Option<u8>,
    /// Write the profile CSV to this path instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_labeled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => {
            Ok((label.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected label=path, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success, everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = match cli.cmd {
        Cmd::Encode(a) => cmd_encode(&a),
        Cmd::Decode(a) => cmd_decode(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Profile(a) => cmd_profile(&a),
        Cmd::Selfcheck => cmd_selfcheck(),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn load_cloud(path: &Path) -> Result<PointCloud> {
    let raw = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "bin") {
        pcio::read_kitti_bin(&raw)
    } else {
        pcio::read_ply(&raw)
    }
}

fn parse_center(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Contract(format!("bad --center {s:?}, expected x,y,z")))?;
    if parts.len() != 3 {
        return Err(Error::Contract(format!("--center needs 3 components, got {}", parts.len())));
    }
    Ok([parts[0], parts[1], parts[2]])
}

/// Tight bounding box grown just enough that every point quantizes in-range.
fn auto_box(cloud: &PointCloud) -> (f64, [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    let size = if extent > 0.0 { extent * (1.0 + 1e-9) } else { 1.0 };
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    (size, center)
}

fn quant_config(args: &QuantArgs, cloud: &PointCloud) -> Result<QuantConfig> {
    match (args.scale, args.posq) {
        (Some(scale), Some(posq)) => QuantConfig::scale_posq(scale, posq),
        (Some(_), None) | (None, Some(_)) => {
            Err(Error::Contract("--scale and --posq must be given together".into()))
        }
        (None, None) => {
            let bits = args.bits.ok_or_else(|| {
                Error::Contract("need either --bits (box mode) or --scale/--posq".into())
            })?;
            let (auto_size, auto_center) = auto_box(cloud);
            let size = args.box_size.unwrap_or(auto_size);
            let center = match &args.center {
                Some(s) => parse_center(s)?,
                None => {
                    if args.box_size.is_some() {
                        [0.0; 3]
                    } else {
                        auto_center
                    }
                }
            };
            QuantConfig::box16(size, center, bits)
        }
    }
}

/// Holds checkpoint parameters so `CodecModel::Learned` can borrow them.
enum ModelHolder {
    Freq,
    Learned(ContextConfig, ParamSet),
}

impl ModelHolder {
    fn from_flags(ckpt: &Option<PathBuf>, model: &Option<String>) -> Result<ModelHolder> {
        match model.as_deref() {
            Some("freq") => Ok(ModelHolder::Freq),
            Some(other) => Err(Error::Contract(format!(
                "unknown --model {other:?} (only \"freq\"; learned models come from --ckpt)"
            ))),
            None => match ckpt {
                Some(path) => {
                    let (cfg, params) = load_checkpoint(&std::fs::read(path)?)?;
                    Ok(ModelHolder::Learned(cfg, params))
                }
                None => Ok(ModelHolder::Freq),
            },
        }
    }

    fn model(&self) -> CodecModel<'_> {
        match self {
            ModelHolder::Freq => CodecModel::Freq,
            ModelHolder::Learned(cfg, params) => CodecModel::Learned(*cfg, params),
        }
    }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    let cloud = load_cloud(&args.input)?;
    let cfg = quant_config(&args.quant, &cloud)?;
    let holder = ModelHolder::from_flags(&args.ckpt, &args.model)?;
    let start = Instant::now();
    let qc = pcio::quantize(&cloud, &cfg)?;
    let (bytes, rep) = codec::encode_with_stats(&qc, &holder.model())?;
    let elapsed = start.elapsed();
    std::fs::write(&args.output, &bytes)?;
    println!(
        "encoded {} points ({} voxels, depth {}) -> {} bytes, {:.4} bpp, {:.1} ms",
        rep.source_points,
        qc.coords.len(),
        qc.effective_depth,
        rep.total_bytes,
        rep.bpp,
        elapsed.as_secs_f64() * 1e3
    );
    for l in &rep.per_level {
        println!(
            "  level {:>2}: {:>8} nodes, {:>12.1} ideal bits  [{}]",
            l.level, l.nodes, l.ideal_bits, l.coder
        );
    }
    Ok(())
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input)?;
    let holder = ModelHolder::from_flags(&args.ckpt, &args.model)?;
    let start = Instant::now();
    let qc = codec::decode(&bytes, &holder.model())?;
    let cloud = pcio::dequantize(&qc);
    let elapsed = start.elapsed();
    std::fs::write(&args.output, pcio::write_ply(&cloud, args.ascii))?;
    println!(
        "decoded {} voxels (depth {}) in {:.1} ms",
        qc.coords.len(),
        qc.effective_depth,
        elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::from_json(&std::fs::read_to_string(&args.config)?)?;
    let initial = match &args.resume {
        Some(path) => Some(load_checkpoint(&std::fs::read(path)?)?),
        None => None,
    };
    let extra: Vec<PointCloud> = args
        .corpus
        .iter()
        .map(|p| load_cloud(p))
        .collect::<Result<_>>()?;
    let log_every = cfg.log_every.max(1) as u64;
    let outcome = trainer::train(&cfg, initial, &extra, |step, loss| {
        if step % log_every == 0 {
            println!("step {:>6}: {:.4} bits/node", step, loss.mean_bits);
        }
    })?;
    std::fs::write(&args.output, save_checkpoint(&outcome.cfg, &outcome.params))?;
    if let Some(path) = &args.log {
        std::fs::write(path, report::loss_log_csv(&outcome.log))?;
    }
    println!(
        "checkpoint written: {} steps, checksum {:016x}",
        outcome.params.step,
        outcome.params.checksum()
    );
    if let Some(step) = outcome.diverged_at {
        return Err(Error::Numeric(format!(
            "training diverged at step {step}; checkpoint holds the last good state"
        )));
    }
    Ok(())
}

fn eval_stream(
    label: &str,
    path: &Path,
    holder: &ModelHolder,
    reference: &PointCloud,
    peak: f64,
) -> Result<RdRow> {
    let bytes = std::fs::read(path)?;
    // A stream coded with the frequency model decodes without a checkpoint
    // even when one was supplied for the learned streams.
    let qc: QuantizedCloud = match codec::decode(&bytes, &holder.model()) {
        Ok(qc) => qc,
        Err(first) => match holder {
            ModelHolder::Learned(..) => codec::decode(&bytes, &CodecModel::Freq).map_err(|_| first)?,
            ModelHolder::Freq => return Err(first),
        },
    };
    let decoded = pcio::dequantize(&qc);
    let bpp = bytes.len() as f64 * 8.0 / qc.source_points.max(1) as f64;
    let d1 = metrics::d1_psnr(reference, &decoded, peak)?;
    let d2 = match metrics::d2_psnr(reference, &decoded, peak) {
        Ok(r) => {
            if r.fallback_points > 0 {
                eprintln!(
                    "note: {label}: {} points used point-to-point fallback (degenerate normals)",
                    r.fallback_points
                );
            }
            r.psnr
        }
        Err(e) => {
            eprintln!("note: {label}: D2 unavailable ({e})");
            f64::NAN
        }
    };
    let chamfer = metrics::chamfer(reference, &decoded)?;
    Ok(RdRow {
        label: label.to_string(),
        point: RDPoint { bpp, d1_psnr: d1, d2_psnr: d2, chamfer },
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.streams.is_empty() {
        return Err(Error::Contract("eval needs at least one --stream label=path".into()));
    }
    let reference = load_cloud(&args.reference)?;
    let peak = match args.peak {
        Some(p) => p,
        None => auto_box(&reference).0,
    };
    let holder = ModelHolder::from_flags(&args.ckpt, &None)?;
    let mut rows = Vec::new();
    for (label, path) in &args.streams {
        rows.push(eval_stream(label, path, &holder, &reference, peak)?);
    }
    let text = if args.json {
        serde_json::to_string_pretty(&report::rd_table_json(&rows)).expect("json")
    } else {
        report::rd_table_csv(&rows)
    };
    match &args.output {
        Some(path) => std::fs::write(path, &text)?,
        None => print!("{text}"),
    }

    // Bjøntegaard deltas between labels with enough points for a curve.
    let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let curve = |label: &str| -> Vec<(f64, f64)> {
        rows.iter()
            .filter(|r| r.label == label && r.point.d1_psnr.is_finite())
            .map(|r| (r.point.bpp, r.point.d1_psnr))
            .collect()
    };
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let (a, b) = (labels[i], labels[j]);
            match (
                metrics::bd_rate(&curve(a), &curve(b)),
                metrics::bd_psnr(&curve(a), &curve(b)),
            ) {
                (Ok(rate), Ok(psnr)) => {
                    println!("bd {b} vs {a}: rate {rate:+.2}%  psnr {psnr:+.3} dB");
                }
                (Err(e), _) | (_, Err(e)) => {
                    eprintln!("note: bd {b} vs {a}: {e}");
                }
            }
        }
    }
    Ok(())
}

fn cmd_profile(args: &ProfileArgs) -> Result<()> {
    let cloud = load_cloud(&args.input)?;
    if cloud.is_empty() {
        return Err(Error::Contract("cannot profile an empty cloud".into()));
    }
    if args.bits == 0 || args.bits > 16 {
        return Err(Error::Contract(format!("--bits must be 1..=16, got {}", args.bits)));
    }
    let min_level = args
        .min_level
        .unwrap_or_else(|| opcc::octree::default_min_level(args.bits).max(1))
        .min(args.bits);
    let coords = synth::to_grid(&cloud, args.bits);
    let levels = build_levels(&coords, args.bits, min_level)?;
    let profile = metrics::hrcs_profile(&levels);
    let text = report::hrcs_csv(&profile);
    match &args.output {
        Some(path) => std::fs::write(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Selfcheck

fn check(name: &str, f: impl FnOnce() -> std::result::Result<(), String>, ok: &mut bool) {
    match f() {
        Ok(()) => println!("selfcheck: {name} ... ok"),
        Err(msg) => {
            println!("selfcheck: {name} ... FAIL: {msg}");
            *ok = false;
        }
    }
}

fn cmd_selfcheck() -> Result<()> {
    let mut ok = true;

    check("frequency codec round trip", || {
        for seed in 0..5u64 {
            let pc = synth::ring_scan(seed, 6, 80, 40.0);
            let cfg = QuantConfig::box16(auto_box(&pc).0, auto_box(&pc).1, 10)
                .map_err(|e| e.to_string())?;
            let qc = pcio::quantize(&pc, &cfg).map_err(|e| e.to_string())?;
            let bytes = codec::encode(&qc, &CodecModel::Freq).map_err(|e| e.to_string())?;
            let back = codec::decode(&bytes, &CodecModel::Freq).map_err(|e| e.to_string())?;
            if back.coords != qc.coords {
                return Err(format!("seed {seed}: geometry mismatch"));
            }
        }
        Ok(())
    }, &mut ok);

    check("learned codec round trip (fresh weights)", || {
        let ctx = ContextConfig::new(6, 1, 4, 4, Variant::Full).map_err(|e| e.to_string())?;
        let mut params = ParamSet::new(11);
        ctx.init_all(&mut params);
        let pc = synth::sphere(3, 400, [0.0; 3], 8.0);
        let coords = synth::to_grid(&pc, 6);
        let qc = QuantizedCloud {
            coords: coords.clone(),
            config: QuantConfig::box16(16.0, [0.0; 3], 6).map_err(|e| e.to_string())?,
            effective_depth: 6,
            source_points: 400,
        };
        let model = CodecModel::Learned(ctx, &params);
        let bytes = codec::encode(&qc, &model).map_err(|e| e.to_string())?;
        let back = codec::decode(&bytes, &model).map_err(|e| e.to_string())?;
        if back.coords != coords {
            return Err("geometry mismatch".into());
        }
        Ok(())
    }, &mut ok);

    check("payload within ideal codelength bound", || {
        let pc = synth::blob(7, 3000, 25.0);
        let cfg = QuantConfig::box16(auto_box(&pc).0, auto_box(&pc).1, 12)
            .map_err(|e| e.to_string())?;
        let qc = pcio::quantize(&pc, &cfg).map_err(|e| e.to_string())?;
        let rep = codec::measure(&qc, &CodecModel::Freq).map_err(|e| e.to_string())?;
        let measured = (rep.payload_bytes * 8) as f64;
        let bound = rep.ideal_total_bits + 32.0;
        if measured > bound {
            return Err(format!("payload {measured} bits > ideal bound {bound:.1}"));
        }
        Ok(())
    }, &mut ok);

    check("gradients match finite differences", || {
        let ctx = ContextConfig::new(5, 1, 4, 4, Variant::Full).map_err(|e| e.to_string())?;
        let mut params = ParamSet::new(23);
        ctx.init_all(&mut params);
        // Nudge every parameter off zero so no PReLU pre-activation sits
        // exactly on the kink, where a central difference is one-sided.
        {
            use opcc::util::seeded_rng;
            use rand::Rng;
            let mut rng = seeded_rng(23, "selfcheck-jitter");
            for p in params.entries.values_mut() {
                for v in &mut p.value.data {
                    *v += rng.gen_range(0.003..0.01);
                }
            }
        }
        let pc = synth::plane(5, 120, 20.0);
        let coords = synth::to_grid(&pc, 5);
        let levels = build_levels(&coords, 5, 1).map_err(|e| e.to_string())?;
        let (_, grads) = loss_and_grads(&ctx, &params, &levels).map_err(|e| e.to_string())?;
        let mut checked = 0;
        for (name, g) in &grads {
            if checked >= 6 {
                break;
            }
            let idx = g.data.iter().position(|v| v.abs() > 1e-4);
            let Some(idx) = idx else { continue };
            let num = numeric_grad(&params, name, idx, 1e-4, |p| {
                opcc::context::evaluate_loss(&ctx, p, &levels)
                    .map(|l| l.mean_nats)
                    .unwrap_or(f64::NAN)
            });
            let ana = g.data[idx];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-9);
            if rel > 1e-3 {
                return Err(format!("{name}[{idx}]: analytic {ana}, numeric {num}"));
            }
            checked += 1;
        }
        if checked == 0 {
            return Err("no nonzero gradients found".into());
        }
        Ok(())
    }, &mut ok);

    check("point-to-point PSNR worked example", || {
        let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        let got = metrics::d1_psnr(&a, &b, 1023.0).map_err(|e| e.to_string())?;
        if (got - 64.97).abs() > 0.01 {
            return Err(format!("expected ~64.97 dB, got {got}"));
        }
        Ok(())
    }, &mut ok);

    check("bitstream and checkpoint determinism", || {
        let pc = synth::ring_scan(9, 8, 100, 45.0);
        let cfg = QuantConfig::box16(auto_box(&pc).0, auto_box(&pc).1, 12)
            .map_err(|e| e.to_string())?;
        let qc = pcio::quantize(&pc, &cfg).map_err(|e| e.to_string())?;
        let a = codec::encode(&qc, &CodecModel::Freq).map_err(|e| e.to_string())?;
        let b = codec::encode(&qc, &CodecModel::Freq).map_err(|e| e.to_string())?;
        if a != b {
            return Err("repeated encode differs".into());
        }
        let ctx = ContextConfig::new(6, 1, 4, 4, Variant::GredOnly).map_err(|e| e.to_string())?;
        let mut p1 = ParamSet::new(5);
        ctx.init_all(&mut p1);
        let mut p2 = ParamSet::new(5);
        ctx.init_all(&mut p2);
        if save_checkpoint(&ctx, &p1) != save_checkpoint(&ctx, &p2) {
            return Err("checkpoint not deterministic".into());
        }
        Ok(())
    }, &mut ok);

    if ok {
        println!("selfcheck: all green");
        Ok(())
    } else {
        Err(Error::Contract("selfcheck failed".into()))
    }
}
