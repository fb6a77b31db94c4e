//! Recording and analysis of per-step pairwise gradient cosines: the
//! cosine distribution per task pair, its mean and sample standard
//! deviation, rolling-window deviation, first-epoch deviation, and
//! CSV/JSON export with exact round-trip.
//!
//! The recorder only ever sees detached cosine values; attaching it to a
//! training run must not change what the run computes.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub const HISTOGRAM_BINS: usize = 64;

/// One observed cosine for one task pair at one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineRecord {
    pub step: usize,
    pub epoch: usize,
    pub pair: (String, String),
    pub cosine: f64,
}

/// Distribution summary for one pair over a set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiSummary {
    pub pair: (String, String),
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct CosineRecorder {
    records: Vec<CosineRecord>,
}

fn check_task_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['|', ',', '\n', '\r', '"', '\\']) {
        return Err(Error::InvalidArgument(format!(
            "task id {id:?} is empty or contains a delimiter character"
        )));
    }
    Ok(())
}

fn sample_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

impl CosineRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append one step's pairwise cosines. An empty map is a no-op; a
    /// repeated pair within one step or a cosine outside [−1,1] is an error.
    pub fn record(
        &mut self,
        step: usize,
        epoch: usize,
        cosines: &[((String, String), f64)],
    ) -> Result<()> {
        for ((a, b), c) in cosines {
            check_task_id(a)?;
            check_task_id(b)?;
            if !c.is_finite() || !(-1.0..=1.0).contains(c) {
                return Err(Error::OutOfRange(format!(
                    "cosine {c} for pair {a}|{b} at step {step} outside [-1,1]"
                )));
            }
            let dup = self
                .records
                .iter()
                .rev()
                .take_while(|r| r.step == step)
                .any(|r| r.pair.0 == *a && r.pair.1 == *b);
            if dup {
                return Err(Error::InvalidArgument(format!(
                    "pair {a}|{b} recorded twice at step {step}"
                )));
            }
            self.records.push(CosineRecord {
                step,
                epoch,
                pair: (a.clone(), b.clone()),
                cosine: *c,
            });
        }
        Ok(())
    }

    pub fn records(&self) -> &[CosineRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct pairs in first-appearance order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.pair) {
                out.push(r.pair.clone());
            }
        }
        out
    }

    fn series(&self, pair: &(String, String)) -> Vec<&CosineRecord> {
        self.records.iter().filter(|r| &r.pair == pair).collect()
    }

    /// Mean, sample (n−1) standard deviation, and 64-bin histogram over
    /// [−1,1] for one pair, optionally restricted to steps in
    /// `range = [start, end)`. Needs at least two records.
    pub fn summarize(
        &self,
        pair: &(String, String),
        range: Option<(usize, usize)>,
    ) -> Result<PhiSummary> {
        let values: Vec<f64> = self
            .series(pair)
            .into_iter()
            .filter(|r| match range {
                Some((start, end)) => r.step >= start && r.step < end,
                None => true,
            })
            .map(|r| r.cosine)
            .collect();
        if values.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "pair {}|{} has {} record(s) in range, need at least 2",
                pair.0,
                pair.1,
                values.len()
            )));
        }
        let (mean, std) = sample_mean_std(&values);
        let mut histogram = vec![0usize; HISTOGRAM_BINS];
        for &c in &values {
            let bin = (((c + 1.0) / 2.0) * HISTOGRAM_BINS as f64) as usize;
            histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
        }
        Ok(PhiSummary {
            pair: pair.clone(),
            count: values.len(),
            mean,
            std,
            histogram,
        })
    }

    /// Sample std over each trailing window of exactly `window` records,
    /// emitted as (step of the window's last record, std) from the
    /// (window−1)-th record onward.
    pub fn rolling_std(
        &self,
        pair: &(String, String),
        window: usize,
    ) -> Result<Vec<(usize, f64)>> {
        if window < 2 {
            return Err(Error::InvalidArgument(format!(
                "rolling window must be at least 2, got {window}"
            )));
        }
        let series = self.series(pair);
        if series.len() < window {
            return Err(Error::InsufficientData(format!(
                "pair {}|{} has {} records, need at least the window length {}",
                pair.0,
                pair.1,
                series.len(),
                window
            )));
        }
        let values: Vec<f64> = series.iter().map(|r| r.cosine).collect();
        let mut out = Vec::with_capacity(values.len() - window + 1);
        for end in window..=values.len() {
            let (_, std) = sample_mean_std(&values[end - window..end]);
            out.push((series[end - 1].step, std));
        }
        Ok(out)
    }

    /// Sample std of a pair's cosines restricted to epoch 0.
    pub fn first_epoch_sigma(&self, pair: &(String, String)) -> Result<f64> {
        let values: Vec<f64> = self
            .series(pair)
            .into_iter()
            .filter(|r| r.epoch == 0)
            .map(|r| r.cosine)
            .collect();
        if values.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "pair {}|{} has {} epoch-0 record(s), need at least 2",
                pair.0,
                pair.1,
                values.len()
            )));
        }
        Ok(sample_mean_std(&values).1)
    }

    /// Write records (and, for JSON, per-pair summaries) to `path`.
    /// Reals are serialized with 17 significant digits so a re-import
    /// reproduces every value bit-exactly.
    pub fn export(&self, path: &Path, format: ExportFormat) -> Result<()> {
        let body = match format {
            ExportFormat::Csv => self.to_csv(),
            ExportFormat::Json => self.to_json(),
        };
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(body.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,pair,cosine\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{}|{},{:.16e}",
                r.step, r.epoch, r.pair.0, r.pair.1, r.cosine
            );
        }
        out
    }

    fn to_json(&self) -> String {
        let mut out = String::from("{\n\"records\": [\n");
        for (i, r) in self.records.iter().enumerate() {
            let sep = if i + 1 == self.records.len() { "" } else { "," };
            let _ = writeln!(
                out,
                "{{\"step\":{},\"epoch\":{},\"pair\":\"{}|{}\",\"cosine\":{:.16e}}}{}",
                r.step, r.epoch, r.pair.0, r.pair.1, r.cosine, sep
            );
        }
        out.push_str("],\n\"summaries\": [\n");
        let summaries: Vec<PhiSummary> = self
            .pairs()
            .iter()
            .filter_map(|p| self.summarize(p, None).ok())
            .collect();
        for (i, s) in summaries.iter().enumerate() {
            let sep = if i + 1 == summaries.len() { "" } else { "," };
            let _ = writeln!(
                out,
                "{{\"pair\":\"{}|{}\",\"count\":{},\"mean\":{:.16e},\"std\":{:.16e}}}{}",
                s.pair.0, s.pair.1, s.count, s.mean, s.std, sep
            );
        }
        out.push_str("]\n}\n");
        out
    }

    /// Parse a CSV export back into records.
    pub fn import_csv(path: &Path) -> Result<Vec<CosineRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("step,epoch,pair,cosine") => {}
            other => {
                return Err(Error::format(
                    path,
                    format!("bad CSV header {other:?}"),
                ));
            }
        }
        let mut out = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 4 fields, got {}", lineno + 2, fields.len()),
                ));
            }
            let parse_err = |what: &str| {
                Error::format(path, format!("line {}: bad {what}: {line:?}", lineno + 2))
            };
            let step: usize = fields[0].parse().map_err(|_| parse_err("step"))?;
            let epoch: usize = fields[1].parse().map_err(|_| parse_err("epoch"))?;
            let (a, b) = fields[2]
                .split_once('|')
                .ok_or_else(|| parse_err("pair"))?;
            let cosine: f64 = fields[3].parse().map_err(|_| parse_err("cosine"))?;
            out.push(CosineRecord {
                step,
                epoch,
                pair: (a.to_string(), b.to_string()),
                cosine,
            });
        }
        Ok(out)
    }

    /// Parse the records array of a JSON export.
    pub fn import_json(path: &Path) -> Result<Vec<CosineRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("invalid JSON: {e}")))?;
        let records = value
            .get("records")
            .and_then(|r| r.as_array())
            .ok_or_else(|| Error::format(path, "missing records array".to_string()))?;
        let mut out = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let field_err =
                |what: &str| Error::format(path, format!("record {i}: bad or missing {what}"));
            let step = rec
                .get("step")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| field_err("step"))? as usize;
            let epoch = rec
                .get("epoch")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| field_err("epoch"))? as usize;
            let pair = rec
                .get("pair")
                .and_then(|v| v.as_str())
                .ok_or_else(|| field_err("pair"))?;
            let (a, b) = pair.split_once('|').ok_or_else(|| field_err("pair"))?;
            let cosine = rec
                .get("cosine")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| field_err("cosine"))?;
            out.push(CosineRecord {
                step,
                epoch,
                pair: (a.to_string(), b.to_string()),
                cosine,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    fn rec_with(values: &[f64]) -> CosineRecorder {
        let mut r = CosineRecorder::new();
        for (i, &c) in values.iter().enumerate() {
            r.record(i, 0, &[(pair("a", "b"), c)]).unwrap();
        }
        r
    }

    #[test]
    fn n_steps_yield_n_records_per_pair() {
        let mut r = CosineRecorder::new();
        for step in 0..5 {
            r.record(
                step,
                0,
                &[(pair("a", "b"), 0.1), (pair("a", "c"), 0.2), (pair("b", "c"), 0.3)],
            )
            .unwrap();
        }
        assert_eq!(r.records().len(), 15);
        assert_eq!(r.pairs().len(), 3);
        for p in r.pairs() {
            assert_eq!(r.series(&p).len(), 5);
        }
        r.record(9, 1, &[]).unwrap();
        assert_eq!(r.records().len(), 15);
    }

    #[test]
    fn out_of_range_and_duplicate_rejected() {
        let mut r = CosineRecorder::new();
        assert!(matches!(
            r.record(0, 0, &[(pair("a", "b"), 1.5)]),
            Err(Error::OutOfRange(_))
        ));
        assert!(r.record(0, 0, &[(pair("a", "b"), f64::NAN)]).is_err());
        r.record(0, 0, &[(pair("a", "b"), 0.5)]).unwrap();
        assert!(r.record(0, 0, &[(pair("a", "b"), 0.5)]).is_err());
        assert!(r.record(1, 0, &[(pair("a|x", "b"), 0.5)]).is_err());
    }

    #[test]
    fn summarize_constant_series() {
        let r = rec_with(&[0.5, 0.5, 0.5]);
        let s = r.summarize(&pair("a", "b"), None).unwrap();
        assert_eq!(s.count, 3);
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.histogram.iter().sum::<usize>(), 3);
    }

    #[test]
    fn summarize_two_point_series() {
        // sample std of (1,−1): mean 0, Σ(x−μ)² = 2, /(n−1)=2, √2
        let r = rec_with(&[1.0, -1.0]);
        let s = r.summarize(&pair("a", "b"), None).unwrap();
        assert_eq!(s.mean, 0.0);
        assert!((s.std - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn summarize_alternating_series() {
        // ±1 alternating, length 100: μ=0, σ=√(n/(n−1))
        let values: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = rec_with(&values);
        let s = r.summarize(&pair("a", "b"), None).unwrap();
        assert_eq!(s.mean, 0.0);
        assert!((s.std - (100.0f64 / 99.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summarize_needs_two_records() {
        let r = rec_with(&[0.5]);
        assert!(matches!(
            r.summarize(&pair("a", "b"), None),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn summarize_range_counts_are_additive() {
        let r = rec_with(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let left = r.summarize(&pair("a", "b"), Some((0, 3))).unwrap();
        let right = r.summarize(&pair("a", "b"), Some((3, 6))).unwrap();
        let full = r.summarize(&pair("a", "b"), None).unwrap();
        assert_eq!(left.count + right.count, full.count);
    }

    #[test]
    fn histogram_bin_edges() {
        let r = rec_with(&[-1.0, 0.0, 1.0]);
        let s = r.summarize(&pair("a", "b"), None).unwrap();
        assert_eq!(s.histogram[0], 1);
        assert_eq!(s.histogram[HISTOGRAM_BINS / 2], 1);
        assert_eq!(s.histogram[HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn rolling_std_constant_and_full_window() {
        let r = rec_with(&[0.4; 10]);
        let roll = r.rolling_std(&pair("a", "b"), 4).unwrap();
        assert_eq!(roll.len(), 7);
        assert!(roll.iter().all(|&(_, s)| s == 0.0));
        assert_eq!(roll[0].0, 3);

        let r = rec_with(&[0.1, 0.9, -0.3, 0.5]);
        let roll = r.rolling_std(&pair("a", "b"), 4).unwrap();
        assert_eq!(roll.len(), 1);
        let full = r.summarize(&pair("a", "b"), None).unwrap();
        assert!((roll[0].1 - full.std).abs() < 1e-15);
    }

    #[test]
    fn rolling_std_matches_bruteforce() {
        let values: Vec<f64> = (0..40).map(|i| ((i * 37 % 19) as f64 / 9.5) - 1.0).collect();
        let r = rec_with(&values);
        let w = 7;
        let roll = r.rolling_std(&pair("a", "b"), w).unwrap();
        for (k, &(step, std)) in roll.iter().enumerate() {
            let window = &values[k..k + w];
            let mean = window.iter().sum::<f64>() / w as f64;
            let want =
                (window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (w - 1) as f64)
                    .sqrt();
            assert_eq!(step, k + w - 1);
            assert!((std - want).abs() < 1e-10);
        }
    }

    #[test]
    fn rolling_std_argument_errors() {
        let r = rec_with(&[0.1, 0.2, 0.3]);
        assert!(r.rolling_std(&pair("a", "b"), 1).is_err());
        assert!(matches!(
            r.rolling_std(&pair("a", "b"), 4),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn first_epoch_sigma_variants() {
        // single-epoch run: equals the full-run std
        let r = rec_with(&[0.2, 0.6, -0.1]);
        let full = r.summarize(&pair("a", "b"), None).unwrap();
        assert_eq!(r.first_epoch_sigma(&pair("a", "b")).unwrap(), full.std);

        // epoch 0 constant, epoch 1 wild: stays zero
        let mut r = CosineRecorder::new();
        for step in 0..3 {
            r.record(step, 0, &[(pair("a", "b"), 0.7)]).unwrap();
        }
        for step in 3..6 {
            r.record(step, 1, &[(pair("a", "b"), (step as f64) / 10.0 - 0.5)])
                .unwrap();
        }
        assert!(r.first_epoch_sigma(&pair("a", "b")).unwrap() < 1e-12);

        // two-phase series: epoch-0 std computed by hand
        let mut r = CosineRecorder::new();
        r.record(0, 0, &[(pair("a", "b"), 0.0)]).unwrap();
        r.record(1, 0, &[(pair("a", "b"), 1.0)]).unwrap();
        r.record(2, 1, &[(pair("a", "b"), -1.0)]).unwrap();
        let want = (0.5f64).sqrt();
        assert!((r.first_epoch_sigma(&pair("a", "b")).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn csv_roundtrip_and_empty_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cosines.csv");

        let empty = CosineRecorder::new();
        empty.export(&path, ExportFormat::Csv).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,epoch,pair,cosine\n"
        );

        let mut r = CosineRecorder::new();
        for step in 0..4 {
            let c = (step as f64).sin() * 0.9;
            r.record(
                step,
                step / 2,
                &[(pair("left", "right"), c), (pair("left", "mid"), -c / 3.0)],
            )
            .unwrap();
        }
        r.export(&path, ExportFormat::Csv).unwrap();
        let back = CosineRecorder::import_csv(&path).unwrap();
        assert_eq!(back, r.records());
        for (orig, re) in r.records().iter().zip(&back) {
            assert_eq!(orig.cosine.to_bits(), re.cosine.to_bits());
        }
    }

    #[test]
    fn json_roundtrip_with_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cosines.json");
        let mut r = CosineRecorder::new();
        for step in 0..6 {
            r.record(step, 0, &[(pair("a", "b"), (step as f64 / 7.0).cos() - 0.2)])
                .unwrap();
        }
        r.export(&path, ExportFormat::Json).unwrap();
        let back = CosineRecorder::import_json(&path).unwrap();
        assert_eq!(back, r.records());
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let summaries = value["summaries"].as_array().unwrap();
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0]["count"], 6);
    }

    #[test]
    fn csv_has_one_label_per_pair() {
        let mut r = CosineRecorder::new();
        r.record(
            0,
            0,
            &[(pair("a", "b"), 0.0), (pair("a", "c"), 0.1), (pair("b", "c"), 0.2)],
        )
        .unwrap();
        let csv = r.to_csv();
        for label in ["a|b", "a|c", "b|c"] {
            assert_eq!(csv.matches(label).count(), 1);
        }
    }

    #[test]
    fn import_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(
            CosineRecorder::import_csv(&path),
            Err(Error::Format { .. })
        ));
        std::fs::write(&path, "step,epoch,pair,cosine\n1,0,nodelim,0.5\n").unwrap();
        assert!(CosineRecorder::import_csv(&path).is_err());
        let missing = dir.path().join("absent.csv");
        assert!(matches!(
            CosineRecorder::import_csv(&missing),
            Err(Error::Io { .. })
        ));
    }
}
