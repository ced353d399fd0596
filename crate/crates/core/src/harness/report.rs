use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::Method;

pub const REPORT_FORMAT: &str = "stg-report";
pub const REPORT_VERSION: u32 = 1;

/// Final test metrics of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Metric name to value: `score`, `bleu`, `rouge_l`, `ppl`,
    /// `mean_select`, `t_plm`, and for slot tasks `delex_bleu` and `err`.
    pub metrics: BTreeMap<String, f64>,
    /// Score of the frozen base LM on the same test split.
    pub plm_score: f64,
    pub selector_precision: Option<f64>,
    pub selector_recall: Option<f64>,
    /// Learning-curve file, relative to the output directory.
    pub curve: Option<String>,
    pub generations: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub label: String,
    pub method: Method,
    pub c: Option<f64>,
    pub n_train: usize,
    pub decode: String,
    pub config_hash: String,
    /// SHA-256 of the frozen base checkpoint file every seed used.
    pub base_checkpoint: String,
    pub seeds: Vec<SeedReport>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub plm_mean: f64,
    /// Mean score minus mean PLM score.
    pub gain_vs_plm: f64,
}

/// Mean and sample standard deviation of every metric present in all seeds.
pub fn aggregate(seeds: &[SeedReport]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    let Some(first) = seeds.first() else {
        return (mean, std);
    };
    for key in first.metrics.keys() {
        let vals: Option<Vec<f64>> = seeds.iter().map(|s| s.metrics.get(key).copied()).collect();
        let Some(vals) = vals else { continue };
        let (m, s) = mean_std(&vals);
        mean.insert(key.clone(), m);
        std.insert(key.clone(), s);
    }
    (mean, std)
}

pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = vals.iter().sum::<f64>() / n as f64;
    let s = if n > 1 {
        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, s)
}

const COLUMNS: [&str; 8] = [
    "score",
    "bleu",
    "rouge_l",
    "delex_bleu",
    "err",
    "ppl",
    "mean_select",
    "t_plm",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
            return Err(Error::Config(format!(
                "unsupported report format {} v{}",
                r.format, r.version
            )));
        }
        Ok(r)
    }

    fn columns(&self) -> Vec<&'static str> {
        COLUMNS
            .into_iter()
            .filter(|c| self.mean.contains_key(*c))
            .collect()
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} (n_train {}, decode {}, config {}, base {})",
            self.label,
            self.n_train,
            self.decode,
            &self.config_hash[..12.min(self.config_hash.len())],
            &self.base_checkpoint[..12.min(self.base_checkpoint.len())]
        );
        let mut header = format!("{:<6}", "seed");
        for c in &cols {
            let _ = write!(header, " {c:>11}");
        }
        let _ = write!(header, " {:>11} {:>9}", "plm_score", "precision");
        let _ = writeln!(out, "{header}");
        for s in &self.seeds {
            let mut line = format!("{:<6}", s.seed);
            for c in &cols {
                let _ = write!(line, " {:>11}", cell(s.metrics.get(*c).copied()));
            }
            let _ = write!(
                line,
                " {:>11} {:>9}",
                cell(Some(s.plm_score)),
                cell(s.selector_precision)
            );
            let _ = writeln!(out, "{line}");
        }
        for (name, row) in [("mean", &self.mean), ("std", &self.std)] {
            let mut line = format!("{name:<6}");
            for c in &cols {
                let _ = write!(line, " {:>11}", cell(row.get(*c).copied()));
            }
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(
            out,
            "gain vs plm {:+.4} (plm mean {:.4})",
            self.gain_vs_plm, self.plm_mean
        );
        out
    }

    /// Writes `<stem>.json` and `<stem>.txt`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_file(&stem.with_extension("json"), &self.to_json()?)?;
        write_file(&stem.with_extension("txt"), &self.to_table())
    }
}

/// One line per report: label, mean and std of the score, gain.
pub fn summary_table(reports: &[RunReport]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>10} {:>10} {:>10} {:>8}\n",
        "label", "n_train", "score", "std", "gain", "pi_s(1)"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>10.4} {:>10.4} {:>+10.4} {:>8.4}",
            r.label,
            r.n_train,
            r.mean.get("score").copied().unwrap_or(0.0),
            r.std.get("score").copied().unwrap_or(0.0),
            r.gain_vs_plm,
            r.mean.get("mean_select").copied().unwrap_or(0.0)
        );
    }
    out
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })
}
