//! Experiment reports: per-run metrics as a long-format CSV
//! (`section,run,metric,value`) and a summary with one PASS/FAIL line per
//! acceptance criterion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// An observed quantity compared with a bound (`observed ≤ bound`).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    /// Name of the result the bound comes from.
    pub tag: String,
    pub quantity: String,
    pub observed: f64,
    pub bound: f64,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.observed <= self.bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: String,
    pub pass: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.id, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub section: String,
    pub run: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub name: String,
    pub config: Vec<(String, String)>,
    pub rows: Vec<MetricRow>,
    pub checks: Vec<BoundCheck>,
    pub criteria: Vec<CriterionResult>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    pub fn echo(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn row(&mut self, section: &str, run: impl ToString, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            section: section.to_string(),
            run: run.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Appends everything from `other`.
    pub fn merge(&mut self, other: ExperimentReport) {
        let name = other.name;
        self.config
            .extend(other.config.into_iter().map(|(k, v)| (format!("{name}.{k}"), v)));
        self.rows.extend(other.rows);
        self.checks.extend(other.checks);
        self.criteria.extend(other.criteria);
        self.notes.extend(other.notes);
    }

    pub fn check(&mut self, tag: &str, quantity: &str, observed: f64, bound: f64) -> bool {
        let c = BoundCheck {
            tag: tag.to_string(),
            quantity: quantity.to_string(),
            observed,
            bound,
        };
        let holds = c.holds();
        self.checks.push(c);
        holds
    }

    pub fn criterion(&mut self, id: &str, pass: bool, detail: impl Into<String>) {
        self.criteria.push(CriterionResult {
            id: id.to_string(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }

    pub fn criterion_result(&self, id: &str) -> Option<&CriterionResult> {
        self.criteria.iter().find(|c| c.id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,run,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:?}", r.section, r.run, r.metric, r.value);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "experiment {}", self.name);
        for (k, v) in &self.config {
            let _ = writeln!(out, "config {k} = {v}");
        }
        for c in &self.checks {
            let _ = writeln!(
                out,
                "bound [{}] {}: observed {:.6e} {} bound {:.6e}",
                c.tag,
                c.quantity,
                c.observed,
                if c.holds() { "<=" } else { ">" },
                c.bound
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note {n}");
        }
        for c in &self.criteria {
            let _ = writeln!(out, "{}", c.line());
        }
        out
    }

    /// Writes `report.csv` and `summary.txt` into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("summary.txt"), self.summary())
    }
}

/// Median of a nonempty sample; NaNs sort last.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_has_one_line_per_criterion() {
        let mut r = ExperimentReport::new("demo");
        r.echo("r", 64);
        r.row("main", 1, "loss", 0.5);
        assert!(r.check("gaussian-max", "E max", 1.5, 2.1));
        assert!(!r.check("gaussian-max", "E max", 2.5, 2.1));
        r.criterion("AC8", true, "ok");
        r.criterion("AC5", false, "too many failures");
        let s = r.summary();
        assert!(s.contains("PASS AC8: ok"));
        assert!(s.contains("FAIL AC5: too many failures"));
        assert!(s.contains("bound [gaussian-max]"));
        assert_eq!(r.to_csv(), "section,run,metric,value\nmain,1,loss,0.5\n");
        assert!(!r.all_pass());

        let dir = tempfile::tempdir().unwrap();
        r.write(&dir.path().join("out")).unwrap();
        assert!(dir.path().join("out/summary.txt").exists());
    }

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
