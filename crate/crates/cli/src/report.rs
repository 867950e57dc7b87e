//! report.txt: a TOML document headed by a human-readable metrics table.

use aresunet::train::{Confusion, MetricReport};
use serde::{Deserialize, Serialize};

/// One row of a report: the five metrics and the counts they derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub dice: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specificity: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MetricRow {
    pub fn new(id: impl Into<String>, r: &MetricReport) -> Self {
        MetricRow {
            id: id.into(),
            dice: r.dice,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            specificity: r.specificity,
            tp: r.counts.tp,
            fp: r.counts.fp,
            tn: r.counts.tn,
            fn_: r.counts.fn_,
        }
    }

    pub fn counts(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
        }
    }

    /// The metrics recomputed from this row's counts.
    pub fn recompute(&self) -> aresunet::Result<MetricReport> {
        MetricReport::from_counts(self.counts())
    }
}

/// Metrics of a set of volumes, pooled over their confusion counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub aggregate: MetricRow,
    #[serde(default)]
    pub volumes: Vec<MetricRow>,
}

/// report.txt of `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `held_out`, `train` (nothing was held out) or `dataset` (eval).
    pub evaluated_on: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    pub metrics: EvalSection,
}

/// One arm of the ablation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSection {
    pub norm_kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    pub steps: u64,
    pub metrics: MetricRow,
}

/// report.txt of `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFile {
    pub evaluated_on: String,
    pub config_diff: Vec<String>,
    pub layer: ArmSection,
    pub batch: ArmSection,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// `# `-prefixed table with columns Dice ACC PRE REC SPE.
pub fn table<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> String {
    let rows: Vec<&MetricRow> = rows.into_iter().collect();
    let width = rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "# {:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "", "Dice", "ACC", "PRE", "REC", "SPE"
    );
    for r in rows {
        out += &format!(
            "# {:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            r.id,
            cell(Some(r.dice)),
            cell(Some(r.accuracy)),
            cell(r.precision),
            cell(r.recall),
            cell(r.specificity)
        );
    }
    out
}

fn document<T: Serialize>(header: String, body: &T) -> String {
    let toml = toml::to_string(body).expect("report serializes");
    format!("{header}\n{toml}")
}

impl RunReport {
    pub fn render(&self) -> String {
        let rows = self.metrics.volumes.iter().chain(std::iter::once(&self.metrics.aggregate));
        document(table(rows), self)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

impl AblationFile {
    pub fn render(&self) -> String {
        document(table([&self.layer.metrics, &self.batch.metrics]), self)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }
}
