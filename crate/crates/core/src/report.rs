//! Deterministic text outputs: CSV tables, reward-field records and SVG
//! heatmaps.
//!
//! CSV is comma-separated with one header row. Floats are written with 17
//! significant digits (`{:.16e}`), so they round-trip bit-exactly; missing
//! values are empty cells.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::causal::CausalReport;
use crate::compat::{CompatInstance, CompatMetrics, CompatSummary};
use crate::error::{Error, Result};
use crate::identities::{CheckReport, Summary};
use crate::reward::{Baseline, RewardContext, RewardField};
use crate::trainer::MetricsRow;
use crate::world::WorldSpec;

/// A float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(";")
}

fn join_usize(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn write_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub const CHECK_HEADER: [&str; 8] = ["name", "world", "context_hash", "lhs", "rhs", "residual", "pass", "context"];

pub fn checks_csv(reports: &[CheckReport]) -> Result<String> {
    write_table(
        &CHECK_HEADER,
        reports.iter().map(|r| {
            vec![
                r.name.to_string(),
                r.context.world.clone(),
                format!("{:016x}", r.context.hash()),
                fmt_f64(r.lhs),
                fmt_f64(r.rhs),
                fmt_f64(r.residual),
                r.passed.to_string(),
                r.context.to_string(),
            ]
        }),
    )
}

pub fn check_summary_csv(summaries: &[Summary]) -> Result<String> {
    write_table(
        &["name", "checks", "failures", "max_violation", "max_slack"],
        summaries.iter().map(|s| {
            vec![
                s.name.to_string(),
                s.checks.to_string(),
                s.failures.to_string(),
                fmt_f64(s.max_violation),
                fmt_opt(s.max_slack),
            ]
        }),
    )
}

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "train_success_rate",
    "mean_entropy",
    "mean_realized_advantage",
    "advantage_std",
    "mean_S",
    "mean_G",
    "mean_pmi",
];

/// Training log without wall time, which goes to [`timing_csv`].
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    write_table(
        &METRICS_HEADER,
        rows.iter().map(|m| {
            vec![
                m.step.to_string(),
                fmt_opt(m.train_success_rate),
                fmt_f64(m.mean_entropy),
                fmt_f64(m.mean_realized_advantage),
                fmt_f64(m.advantage_std),
                fmt_f64(m.mean_s),
                fmt_f64(m.mean_g),
                fmt_f64(m.mean_pmi),
            ]
        }),
    )
}

pub fn timing_csv(rows: &[MetricsRow]) -> Result<String> {
    write_table(&["step", "wall_time"], rows.iter().map(|m| vec![m.step.to_string(), fmt_f64(m.wall_time)]))
}

pub fn compat_csv(instances: &[CompatInstance], metrics: &[CompatMetrics]) -> Result<String> {
    if instances.len() != metrics.len() {
        return Err(Error::ShapeMismatch("one metrics row per instance".into()));
    }
    write_table(
        &[
            "instance",
            "residual",
            "uniform_baseline",
            "letter_mass",
            "fidelity",
            "self_consistent",
            "prerequisite_failed",
            "unique",
            "p_hat",
        ],
        instances.iter().zip(metrics).enumerate().map(|(i, (inst, m))| {
            let sol = inst.solution.as_ref();
            vec![
                i.to_string(),
                fmt_opt(sol.map(|s| s.residual)),
                fmt_f64(m.uniform_baseline),
                fmt_f64(m.letter_mass),
                m.fidelity.as_deref().map(join_f64).unwrap_or_default(),
                m.self_consistent.map(|c| c.to_string()).unwrap_or_default(),
                m.prerequisite_failed.to_string(),
                sol.map(|s| s.unique.to_string()).unwrap_or_default(),
                sol.map(|s| join_f64(&s.p_hat)).unwrap_or_default(),
            ]
        }),
    )
}

pub fn compat_summary_csv(summary: &CompatSummary) -> Result<String> {
    let mut rows: Vec<Vec<String>> = summary
        .residual_quantiles
        .iter()
        .map(|&(q, r)| vec![format!("residual_q{q}"), fmt_f64(r)])
        .collect();
    rows.push(vec!["count".into(), summary.count.to_string()]);
    rows.push(vec!["median_uniform_baseline".into(), fmt_f64(summary.median_uniform_baseline)]);
    rows.push(vec!["self_consistency_rate".into(), fmt_f64(summary.self_consistency_rate)]);
    rows.push(vec!["prerequisite_failures".into(), summary.prerequisite_failures.to_string()]);
    write_table(&["metric", "value"], rows)
}

/// Compat instances as CSV: one line per distribution, `row` is `s` for the
/// student or the feedback index of a teacher row.
pub fn instances_csv(instances: &[CompatInstance]) -> Result<String> {
    let letters = instances.first().map_or(0, |i| i.student.len());
    let mut header = vec!["instance".to_string(), "row".to_string()];
    header.extend((0..letters).map(|l| format!("p{l}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let mut line = vec![i.to_string(), "s".to_string()];
        line.extend(inst.student.iter().map(|&p| fmt_f64(p)));
        rows.push(line);
        for (z, t) in inst.teacher.iter().enumerate() {
            let mut line = vec![i.to_string(), z.to_string()];
            line.extend(t.iter().map(|&p| fmt_f64(p)));
            rows.push(line);
        }
    }
    write_table(&header, rows)
}

/// Inverse of [`instances_csv`]. Rows of one instance must be contiguous,
/// student first.
pub fn parse_instances(text: &str) -> Result<Vec<CompatInstance>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut current: Option<(String, Vec<f64>, Vec<Vec<f64>>)> = None;
    let finish = |c: Option<(String, Vec<f64>, Vec<Vec<f64>>)>, out: &mut Vec<CompatInstance>| -> Result<()> {
        if let Some((_, s, t)) = c {
            out.push(CompatInstance::new(s, t)?);
        }
        Ok(())
    };
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let bad = |msg: &str| Error::Parse(format!("instance csv line {}: {msg}", line + 2));
        if record.len() < 3 {
            return Err(bad("expected instance, row and at least one probability"));
        }
        let values = record
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad(&format!("bad number {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let id = record[0].to_string();
        if &record[1] == "s" {
            finish(current.take(), &mut out)?;
            current = Some((id, values, Vec::new()));
        } else {
            match &mut current {
                Some((cid, _, t)) if *cid == id => {
                    let z: usize = record[1].parse().map_err(|_| bad("row must be s or a feedback index"))?;
                    if z != t.len() {
                        return Err(bad("teacher rows must be listed in feedback order"));
                    }
                    t.push(values);
                }
                _ => return Err(bad("teacher row before its student row")),
            }
        }
    }
    finish(current, &mut out)?;
    Ok(out)
}

pub fn causal_csv(reports: &[CausalReport]) -> Result<String> {
    write_table(
        &["check", "world", "input", "prefix", "feedback", "status", "value"],
        reports.iter().map(|r| {
            vec![
                r.name.to_string(),
                r.world.clone(),
                r.input.to_string(),
                join_usize(&r.prefix),
                r.feedback.to_string(),
                r.status.name().to_string(),
                fmt_f64(r.value),
            ]
        }),
    )
}

/// One position of a serialized reward field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionRecord {
    pub position: usize,
    /// The realized token.
    pub token: usize,
    pub label: String,
    pub values: Vec<f64>,
    /// One `0`/`1` per candidate.
    pub mask: String,
    pub realized: f64,
    /// Realized `ΔV_t`, `S_t`, `G_t` and `Ŝ_t`, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_hat: Option<f64>,
}

/// Text form of a [`RewardField`]: one record per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldFile {
    pub world: String,
    pub engine: String,
    pub lambda: f64,
    pub input: usize,
    pub feedback: usize,
    pub contrastive_ids: Vec<usize>,
    pub labels: Vec<String>,
    pub position: Vec<PositionRecord>,
}

impl FieldFile {
    /// With a reward context, the realized decomposition is recorded too:
    /// `ΔV_t` (self-distillation), `S_t`/`G_t` over the full prior, and the
    /// sampled `Ŝ_t = ln q − Ĝ_t` when the field has contrastive inputs.
    pub fn from_field(world: &WorldSpec, field: &RewardField, ctx: Option<&RewardContext<'_>>) -> Result<Self> {
        let labels: Vec<String> = (0..field.vocab).map(|v| world.token_label(v)).collect();
        let mut position = Vec::with_capacity(field.horizon);
        for t in 0..field.horizon {
            let token = field.tokens[t];
            let prefix = &field.tokens[..t];
            let mut rec = PositionRecord {
                position: t,
                token,
                label: labels[token].clone(),
                values: field.row(t).to_vec(),
                mask: field.mask_row(t).iter().map(|&m| if m { '1' } else { '0' }).collect(),
                realized: field.realized(t),
                dv: None,
                s: None,
                g: None,
                s_hat: None,
            };
            if let Some(ctx) = ctx {
                let (x, z) = (field.input, field.feedback);
                let (s, g) = ctx.decompose_s_g(x, prefix, z, token)?;
                rec.dv = Some(ctx.sd_row(x, prefix, z)?[token]);
                rec.s = Some(s);
                rec.g = Some(g);
                if !field.contrastive_ids.is_empty() {
                    let baseline = Baseline::Sampled(field.contrastive_ids.clone());
                    rec.s_hat = Some(s + g - ctx.generic_baseline(x, prefix, z, &baseline)?[token]);
                }
            }
            position.push(rec);
        }
        Ok(FieldFile {
            world: world.name().to_string(),
            engine: field.engine.name().to_string(),
            lambda: field.lambda,
            input: field.input,
            feedback: field.feedback,
            contrastive_ids: field.contrastive_ids.clone(),
            labels,
            position,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("field files serialize")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: FieldFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        for p in &file.position {
            if p.values.len() != file.labels.len() || p.mask.len() != file.labels.len() {
                return Err(Error::ShapeMismatch(format!("position {} does not match the vocabulary", p.position)));
            }
            if p.token >= file.labels.len() {
                return Err(Error::IndexOutOfRange { what: "token", index: p.token, limit: file.labels.len() });
            }
        }
        Ok(file)
    }
}

/// Which realized quantity a heatmap row shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatField {
    /// Realized self-distillation reward `ΔV_t`.
    Dv,
    S,
    G,
    /// Realized contrastive signal `Ŝ_t = ln q(y_t | x) − Ĝ_t(y_t)`: the
    /// input-specific part CREDIT isolates. The full CREDIT advantage also
    /// carries `−ln π` and `(1 − λ)·ln q`, which are not input-specific.
    Credit,
}

impl HeatField {
    pub fn name(self) -> &'static str {
        match self {
            HeatField::Dv => "dv",
            HeatField::S => "s",
            HeatField::G => "g",
            HeatField::Credit => "credit",
        }
    }
}

impl std::str::FromStr for HeatField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dv" => Ok(HeatField::Dv),
            "s" => Ok(HeatField::S),
            "g" => Ok(HeatField::G),
            "credit" => Ok(HeatField::Credit),
            _ => Err(Error::arg(format!("unknown heatmap field {s:?}"))),
        }
    }
}

/// One labelled strip of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatRow {
    pub title: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl HeatRow {
    /// Pull a realized quantity out of a field file.
    pub fn from_file(file: &FieldFile, field: HeatField) -> Result<Self> {
        let missing = || Error::arg(format!("field file has no {} data", field.name()));
        let values = file
            .position
            .iter()
            .map(|p| match field {
                HeatField::Dv if file.engine == "sd" => Ok(p.realized),
                HeatField::Dv => p.dv.ok_or_else(missing),
                HeatField::S => p.s.ok_or_else(missing),
                HeatField::G => p.g.ok_or_else(missing),
                HeatField::Credit => p.s_hat.ok_or_else(missing),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HeatRow {
            title: field.name().to_string(),
            labels: file.position.iter().map(|p| p.label.clone()).collect(),
            values,
        })
    }
}

const CELL: usize = 64;
const GAP: usize = 8;
const TITLE: usize = 72;
const NEGATIVE: [f64; 3] = [214.0, 39.0, 40.0];
const POSITIVE: [f64; 3] = [31.0, 119.0, 180.0];

/// Diverging color: white at 0, blue for reinforce, red for suppress.
fn cell_color(value: f64, scale: f64) -> String {
    let t = if scale > 0.0 { (value / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t >= 0.0 { POSITIVE } else { NEGATIVE };
    let mix = |c: f64| (255.0 + (c - 255.0) * t.abs()).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(end[0]), mix(end[1]), mix(end[2]))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG with one strip per row and one cell per position. The color scale is
/// shared by all rows and normalized by the largest absolute value.
pub fn heatmap_svg(rows: &[HeatRow]) -> String {
    let scale = rows.iter().flat_map(|r| &r.values).fold(0.0_f64, |m, v| m.max(v.abs()));
    let cols = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let width = TITLE + cols * (CELL + GAP) + GAP;
    let height = rows.len() * (CELL + GAP) + GAP;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    for (i, row) in rows.iter().enumerate() {
        let y = GAP + i * (CELL + GAP);
        let _ = writeln!(
            svg,
            r#"<text x="{GAP}" y="{}" font-family="monospace" font-size="14">{}</text>"#,
            y + CELL / 2 + 5,
            escape(&row.title)
        );
        for (j, &v) in row.values.iter().enumerate() {
            let x = TITLE + j * (CELL + GAP);
            let label = row.labels.get(j).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#888888"><title>{}</title></rect>"##,
                cell_color(v, scale),
                fmt_f64(v)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-family="monospace" font-size="16" text-anchor="middle">{}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 6,
                escape(label)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
