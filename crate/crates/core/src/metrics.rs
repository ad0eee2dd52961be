//! ROC-based detection metrics and per-machine reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Anomalous,
            Label::Anomalous => Label::Normal,
        }
    }
}

/// One scored clip; higher scores mean more anomalous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub clip_id: String,
    pub machine_type: String,
    pub machine_id: String,
    pub label: Label,
    pub score: f64,
}

/// Per-threshold-group counts, highest score first.
struct Roc {
    /// `(negatives, positives)` sharing one score.
    groups: Vec<(u64, u64)>,
    negatives: u64,
    positives: u64,
}

fn roc(records: &[ScoreRecord]) -> Result<Roc> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::NumericDomain {
            op: "roc",
            detail: format!("clip {} has non-finite score {}", r.clip_id, r.score),
        });
    }
    let mut sorted: Vec<(f64, Label)> = records.iter().map(|r| (r.score, r.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for (score, label) in sorted {
        if last != Some(score) {
            groups.push((0, 0));
            last = Some(score);
        }
        let g = groups.last_mut().expect("group pushed above");
        match label {
            Label::Normal => g.0 += 1,
            Label::Anomalous => g.1 += 1,
        }
    }
    let negatives = groups.iter().map(|g| g.0).sum();
    let positives = groups.iter().map(|g| g.1).sum();
    if negatives == 0 || positives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both labels, got {negatives} normal and {positives} anomalous"
        )));
    }
    Ok(Roc {
        groups,
        negatives,
        positives,
    })
}

impl Roc {
    /// Twice the unnormalized ROC area up to `limit` false positives, walking
    /// the grouped ROC as a piecewise-linear curve. Whole segments are summed
    /// in integers; only a segment cut by the limit is interpolated.
    fn doubled_area(&self, limit: f64) -> f64 {
        let (mut fp, mut tp, mut whole, mut partial) = (0u64, 0u64, 0u128, 0.0);
        for &(dn, dp) in &self.groups {
            if (fp + dn) as f64 <= limit {
                whole += u128::from(dn) * u128::from(2 * tp + dp);
            } else {
                let width = limit - fp as f64;
                partial = width * (2.0 * tp as f64 + width / dn as f64 * dp as f64);
                break;
            }
            fp += dn;
            tp += dp;
        }
        whole as f64 + partial
    }

    fn pairs(&self) -> f64 {
        (2 * u128::from(self.negatives) * u128::from(self.positives)) as f64
    }
}

/// Mann–Whitney AUC: the fraction of (anomalous, normal) pairs ranked
/// correctly, ties counting one half.
pub fn auc(records: &[ScoreRecord]) -> Result<f64> {
    let roc = roc(records)?;
    Ok(roc.doubled_area(roc.negatives as f64) / roc.pairs())
}

/// Standardized partial AUC over false-positive rates `[0, p]`, divided by
/// `p` so a perfect detector scores 1.
pub fn pauc(records: &[ScoreRecord], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Contract(format!("pAUC range must lie in (0, 1], got {p}")));
    }
    let roc = roc(records)?;
    let limit = if p == 1.0 { roc.negatives as f64 } else { p * roc.negatives as f64 };
    let full = 2.0 * roc.positives as f64 * limit;
    Ok((roc.doubled_area(limit) / full).min(1.0))
}

/// Metrics of one `(machine_type, machine_id)` group; `None` when the group
/// lacks one of the labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineMetrics {
    pub machine_type: String,
    pub machine_id: String,
    pub auc: Option<f64>,
    pub pauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub machine_type: String,
    pub auc: f64,
    pub pauc: f64,
}

/// Per-machine metrics, per-type means over defined IDs and the average over
/// types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub machines: Vec<MachineMetrics>,
    pub types: Vec<TypeMetrics>,
    pub average_auc: Option<f64>,
    pub average_pauc: Option<f64>,
    pub p: f64,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MetricReport {
    /// Aggregates precomputed machine metrics; machines keep their given order
    /// and types appear in first-seen order.
    pub fn from_machines(machines: Vec<MachineMetrics>, p: f64) -> Self {
        let mut type_names: Vec<&str> = Vec::new();
        for m in &machines {
            if !type_names.contains(&m.machine_type.as_str()) {
                type_names.push(&m.machine_type);
            }
        }
        let types: Vec<TypeMetrics> = type_names
            .iter()
            .filter_map(|t| {
                let defined: Vec<&MachineMetrics> = machines
                    .iter()
                    .filter(|m| m.machine_type == *t && m.auc.is_some() && m.pauc.is_some())
                    .collect();
                Some(TypeMetrics {
                    machine_type: t.to_string(),
                    auc: mean(&defined.iter().filter_map(|m| m.auc).collect::<Vec<_>>())?,
                    pauc: mean(&defined.iter().filter_map(|m| m.pauc).collect::<Vec<_>>())?,
                })
            })
            .collect();
        Self {
            average_auc: mean(&types.iter().map(|t| t.auc).collect::<Vec<_>>()),
            average_pauc: mean(&types.iter().map(|t| t.pauc).collect::<Vec<_>>()),
            machines,
            types,
            p,
        }
    }

    /// Machines whose metrics are undefined.
    pub fn undefined(&self) -> impl Iterator<Item = &MachineMetrics> {
        self.machines.iter().filter(|m| m.auc.is_none())
    }

    /// CSV with one row per machine, per type (`machine_id` = `mean`) and one
    /// overall row (`machine_type` = `average`). Undefined cells are empty
    /// and flagged in the `status` column.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("machine_type,machine_id,auc,pauc,status\n");
        for m in &self.machines {
            let status = if m.auc.is_some() { "ok" } else { "undefined" };
            writeln!(out, "{},{},{},{},{status}", m.machine_type, m.machine_id, cell(m.auc), cell(m.pauc))
                .expect("write to String");
        }
        for t in &self.types {
            writeln!(out, "{},mean,{},{},ok", t.machine_type, t.auc, t.pauc).expect("write to String");
        }
        let status = if self.average_auc.is_some() { "ok" } else { "undefined" };
        writeln!(
            out,
            "average,,{},{},{status}",
            cell(self.average_auc),
            cell(self.average_pauc)
        )
        .expect("write to String");
        out
    }

    /// Aligned plain-text table with percentages.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "undef".into());
        let rows: Vec<[String; 4]> = self
            .machines
            .iter()
            .map(|m| [m.machine_type.clone(), m.machine_id.clone(), pct(m.auc), pct(m.pauc)])
            .chain(
                self.types
                    .iter()
                    .map(|t| [t.machine_type.clone(), "mean".into(), pct(Some(t.auc)), pct(Some(t.pauc))]),
            )
            .chain(std::iter::once([
                "Average".into(),
                String::new(),
                pct(self.average_auc),
                pct(self.average_pauc),
            ]))
            .collect();
        let header = [
            "type".to_string(),
            "id".to_string(),
            "AUC (%)".to_string(),
            format!("pAUC@{} (%)", self.p),
        ];
        let widths: Vec<usize> = (0..4)
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |r: &[String; 4]| {
            format!(
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}\n",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            )
        };
        let mut out = line(&header);
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 6));
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
        }
        for m in self.undefined() {
            writeln!(out, "note: {}/{} lacks normal or anomalous clips; excluded from means", m.machine_type, m.machine_id)
                .expect("write to String");
        }
        out
    }
}

/// Groups records by `(machine_type, machine_id)` in lexicographic order and
/// computes AUC and pAUC for each group.
pub fn report(records: &[ScoreRecord], p: f64) -> Result<MetricReport> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Contract(format!("pAUC range must lie in (0, 1], got {p}")));
    }
    let mut keys: Vec<(&str, &str)> = records
        .iter()
        .map(|r| (r.machine_type.as_str(), r.machine_id.as_str()))
        .collect();
    keys.sort();
    keys.dedup();
    let mut machines = Vec::with_capacity(keys.len());
    for (t, id) in keys {
        let group: Vec<ScoreRecord> = records
            .iter()
            .filter(|r| r.machine_type == t && r.machine_id == id)
            .cloned()
            .collect();
        let metric = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        machines.push(MachineMetrics {
            machine_type: t.to_string(),
            machine_id: id.to_string(),
            auc: metric(auc(&group))?,
            pauc: metric(pauc(&group, p))?,
        });
    }
    Ok(MetricReport::from_machines(machines, p))
}

pub const SCORE_HEADER: &str = "clip_id,machine_type,machine_id,label,score";

pub fn write_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(SCORE_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != SCORE_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected header `{SCORE_HEADER}`, found `{header}`"),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }
}
