use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub cd_cm: f64,
    pub emd_cm: f64,
    pub fscore: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub avg: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary { avg: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let avg = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / n;
        Summary { avg, std: var.sqrt() }
    }
}

/// Per-sample CD / EMD / F-score with aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub tau_cm: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn new(tau_cm: f64, mut samples: Vec<SampleMetrics>) -> Self {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        Self { tau_cm, samples }
    }

    pub fn cd(&self) -> Summary {
        Summary::of(self.samples.iter().map(|s| s.cd_cm))
    }

    pub fn emd(&self) -> Summary {
        Summary::of(self.samples.iter().map(|s| s.emd_cm))
    }

    pub fn fscore(&self) -> Summary {
        Summary::of(self.samples.iter().map(|s| s.fscore))
    }

    /// Header describing the metric conventions.
    pub fn conventions(&self) -> String {
        format!(
            "# CD: symmetric mean of unsquared nearest-neighbor distances (cm); \
             EMD: mean matched distance under the optimal bijection (cm); \
             F-score: threshold tau = {} cm, reported x100",
            self.tau_cm
        )
    }

    /// One Table-I style row: `label | CD avg std | EMD avg std | F avg std`,
    /// F-score in units of 1e-2.
    pub fn table_row(&self, label: &str) -> String {
        let (c, e, f) = (self.cd(), self.emd(), self.fscore());
        format!(
            "{label:<18} | {:>8.2} {:>7.2} | {:>8.2} {:>7.2} | {:>8.2} {:>7.2}",
            c.avg,
            c.std,
            e.avg,
            e.std,
            f.avg * 100.0,
            f.std * 100.0
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<18} | {:>16} | {:>16} | {:>16}\n{:<18} | {:>8} {:>7} | {:>8} {:>7} | {:>8} {:>7}",
            "Method", "CD (cm)", "EMD (cm)", "F-score (1e-2)", "", "avg.", "std.", "avg.", "std.", "avg.", "std."
        )
    }

    /// Human-readable report: conventions, per-sample lines, summary row.
    pub fn to_text(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.conventions());
        for m in &self.samples {
            let _ = writeln!(
                s,
                "{:<24} cd={:.4} emd={:.4} f={:.4}",
                m.id, m.cd_cm, m.emd_cm, m.fscore
            );
        }
        let _ = writeln!(s, "{}", Self::table_header());
        let _ = writeln!(s, "{}", self.table_row(label));
        s
    }

    /// Delimited form: `sample_id,cd_cm,emd_cm,fscore` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,cd_cm,emd_cm,fscore\n");
        for m in &self.samples {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", m.id, m.cd_cm, m.emd_cm, m.fscore);
        }
        s
    }

    pub fn from_csv(text: &str, tau_cm: f64) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "sample_id,cd_cm,emd_cm,fscore")) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing metrics header".into(),
                })
            }
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("malformed metrics row '{line}'"),
            };
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            samples.push(SampleMetrics {
                id: f[0].to_string(),
                cd_cm: num(f[1])?,
                emd_cm: num(f[2])?,
                fscore: num(f[3])?,
            });
        }
        Ok(Self::new(tau_cm, samples))
    }
}
