//! Plain-text emitters for evaluation artifacts: rate-distortion tables,
//! sparsity profiles, size breakdowns, and training logs, as CSV or JSON.

use crate::codec::BppReport;
use crate::metrics::{HRCSProfile, RDPoint};
use crate::trainer::StepRecord;
use serde_json::{json, Value};

/// One labelled rate-distortion measurement, e.g. a codec variant.
#[derive(Clone, Debug)]
pub struct RdRow {
    pub label: String,
    pub point: RDPoint,
}

pub fn rd_table_csv(rows: &[RdRow]) -> String {
    let mut out = String::from("label,bpp,d1_psnr_db,d2_psnr_db,chamfer\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.point.bpp, r.point.d1_psnr, r.point.d2_psnr, r.point.chamfer
        ));
    }
    out
}

pub fn rd_table_json(rows: &[RdRow]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "label": r.label,
                    "bpp": r.point.bpp,
                    "d1_psnr_db": r.point.d1_psnr,
                    "d2_psnr_db": r.point.d2_psnr,
                    "chamfer": r.point.chamfer,
                })
            })
            .collect(),
    )
}

pub fn hrcs_csv(profile: &HRCSProfile) -> String {
    let mut out = String::from("level,nodes,mean_neighbors\n");
    for r in &profile.rows {
        out.push_str(&format!("{},{},{}\n", r.level, r.nodes, r.mean_neighbors));
    }
    out
}

pub fn hrcs_json(profile: &HRCSProfile) -> Value {
    Value::Array(
        profile
            .rows
            .iter()
            .map(|r| {
                json!({
                    "level": r.level,
                    "nodes": r.nodes,
                    "mean_neighbors": r.mean_neighbors,
                })
            })
            .collect(),
    )
}

pub fn bpp_report_json(report: &BppReport) -> Value {
    json!({
        "total_bytes": report.total_bytes,
        "header_bytes": report.header_bytes,
        "payload_bytes": report.payload_bytes,
        "source_points": report.source_points,
        "bpp": report.bpp,
        "coarse_bits": report.coarse_bits,
        "ideal_total_bits": report.ideal_total_bits,
        "per_level": report.per_level.iter().map(|l| json!({
            "level": l.level,
            "nodes": l.nodes,
            "ideal_bits": l.ideal_bits,
            "coder": l.coder,
        })).collect::<Vec<_>>(),
    })
}

pub fn loss_log_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("step,mean_bits_per_node\n");
    for r in log {
        out.push_str(&format!("{},{}\n", r.step, r.mean_bits));
    }
    out
}
