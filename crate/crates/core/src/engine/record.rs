use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORD_FORMAT_VERSION: u32 = 1;
const RECORD_HEADER: &str = "# dtcsim-record format_version=1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSample {
    #[serde(rename = "N")]
    pub n: usize,
    pub t_seconds: f64,
    #[serde(rename = "Mz")]
    pub mz: f64,
    #[serde(rename = "Mz_stderr")]
    pub stderr: Option<f64>,
}

/// Stroboscopic magnetization `M_z(N)` together with the run parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionRecord {
    pub floquet_period: f64,
    /// Free-form run parameters (τ, θ, mode, method, seed, ...).
    pub meta: BTreeMap<String, String>,
    pub samples: Vec<RecordSample>,
}

impl EvolutionRecord {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.mz).collect()
    }

    pub fn sample(&self, n: usize) -> Option<&RecordSample> {
        self.samples.iter().find(|s| s.n == n)
    }

    pub fn stderrs(&self) -> Option<Vec<f64>> {
        self.samples.iter().map(|s| s.stderr).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(RECORD_HEADER);
        out.push('\n');
        out.push_str(&format!("# floquet_period={}\n", self.floquet_period));
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.samples {
            w.serialize(s).expect("serialize into memory");
        }
        let body = w.into_inner().expect("flush into memory");
        if self.samples.is_empty() {
            out.push_str("N,t_seconds,Mz,Mz_stderr\n");
        }
        out.push_str(std::str::from_utf8(&body).expect("csv is utf-8"));
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RECORD_HEADER) {
            return Err(Error::parse(1, format!("expected header `{RECORD_HEADER}`")));
        }
        let mut meta = BTreeMap::new();
        let mut body_start = 1;
        for (k, line) in text.lines().enumerate().skip(1) {
            let Some(rest) = line.strip_prefix('#') else {
                body_start = k;
                break;
            };
            body_start = k + 1;
            let (key, value) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::parse(k + 1, "metadata lines must be `# key=value`"))?;
            if meta.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::parse(k + 1, format!("duplicate metadata key `{key}`")));
            }
        }
        let floquet_period: f64 = meta
            .remove("floquet_period")
            .ok_or_else(|| Error::parse(2, "missing floquet_period"))?
            .parse()
            .map_err(|_| Error::parse(2, "floquet_period is not a number"))?;
        if !(floquet_period.is_finite() && floquet_period > 0.0) {
            return Err(Error::parse(2, "floquet_period must be positive"));
        }
        let body: String = text.lines().skip(body_start).flat_map(|l| [l, "\n"]).collect();
        let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(body_start + 1, e.to_string()))?
            .clone();
        for col in ["N", "t_seconds", "Mz"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::parse(body_start + 1, format!("missing column `{col}`")));
            }
        }
        let mut samples: Vec<RecordSample> = Vec::new();
        for (k, row) in reader.deserialize::<RecordSample>().enumerate() {
            let line = body_start + k + 2;
            let s = row.map_err(|e| Error::parse(line, e.to_string()))?;
            if !(s.mz.is_finite() && s.t_seconds.is_finite() && s.stderr.is_none_or(f64::is_finite)) {
                return Err(Error::parse(line, "non-finite value"));
            }
            if samples.last().is_some_and(|p| p.n >= s.n) {
                return Err(Error::parse(line, "samples must be strictly ordered by N"));
            }
            samples.push(s);
        }
        Ok(EvolutionRecord {
            floquet_period,
            meta,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(stderr: bool) -> EvolutionRecord {
        EvolutionRecord {
            floquet_period: 2e-5,
            meta: BTreeMap::from([("tau".into(), "0.0000125".into()), ("method".into(), "dense".into())]),
            samples: (0..4)
                .map(|n| RecordSample {
                    n,
                    t_seconds: n as f64 * 2e-5,
                    mz: (-1f64).powi(n as i32) * 0.9f64.powi(n as i32),
                    stderr: stderr.then_some(1e-3 * n as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn csv_layout() {
        let text = record(false).to_csv();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# dtcsim-record format_version=1");
        assert_eq!(lines[1], "# floquet_period=0.00002");
        assert_eq!(lines[4], "N,t_seconds,Mz,Mz_stderr");
        assert_eq!(lines[5], "0,0.0,1.0,");
    }

    #[test]
    fn csv_round_trip() {
        for e in [false, true] {
            let r = record(e);
            assert_eq!(EvolutionRecord::parse_csv(&r.to_csv()).unwrap(), r);
        }
    }

    #[test]
    fn csv_without_stderr_column() {
        let text = "# dtcsim-record format_version=1\n# floquet_period=1e-5\nN,t_seconds,Mz\n0,0,1\n1,1e-5,-1\n";
        let r = EvolutionRecord::parse_csv(text).unwrap();
        assert_eq!(r.values(), vec![1.0, -1.0]);
        assert!(r.stderrs().is_none());
    }

    #[test]
    fn csv_rejects_malformed() {
        let base = "# dtcsim-record format_version=1\n# floquet_period=1e-5\n";
        assert!(EvolutionRecord::parse_csv("N,Mz\n").is_err());
        assert!(EvolutionRecord::parse_csv(&format!("{base}N,t_seconds\n0,0\n")).is_err());
        assert!(EvolutionRecord::parse_csv(&format!("{base}N,t_seconds,Mz\n1,0,1\n0,0,1\n")).is_err());
        assert!(EvolutionRecord::parse_csv(&format!("{base}N,t_seconds,Mz\n0,0,abc\n")).is_err());
        assert!(EvolutionRecord::parse_csv(&format!("{base}N,t_seconds,Mz\n0,0,NaN\n")).is_err());
        assert!(EvolutionRecord::parse_csv("# dtcsim-record format_version=1\n# floquet_period=-1\nN,t_seconds,Mz\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_any(values in proptest::collection::vec(-1.0f64..1.0, 1..40), period in 1e-7f64..1e-2) {
            let r = EvolutionRecord {
                floquet_period: period,
                meta: BTreeMap::new(),
                samples: values.iter().enumerate().map(|(n, &mz)| RecordSample {
                    n, t_seconds: n as f64 * period, mz, stderr: None,
                }).collect(),
            };
            prop_assert_eq!(EvolutionRecord::parse_csv(&r.to_csv()).unwrap(), r);
        }
    }
}
