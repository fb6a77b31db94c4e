//! Hyper-parameter sweeps and the rank correlation between first-epoch
//! cosine spread and final validation accuracy.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{train, Baseline, RunConfig, TrainOptions};

/// Cartesian grid over the swept axes. Every other [`RunConfig`] field
/// comes from `template` (its baseline, alpha, and seed are overridden per
/// point).
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub filters: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub baselines: Vec<Baseline>,
    pub seeds: Vec<u64>,
    pub template: RunConfig,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty()
            || self.batch_sizes.is_empty()
            || self.learning_rates.is_empty()
            || self.baselines.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::InvalidArgument(
                "every sweep axis needs at least one value".into(),
            ));
        }
        Ok(())
    }

    /// Expand in grid order: filters, then batch size, then learning rate,
    /// then baseline, with seeds innermost. The index counts configurations
    /// (seed excluded).
    pub fn expand(&self) -> Vec<(usize, RunConfig)> {
        let mut out = Vec::new();
        let mut config_index = 0;
        for &filters in &self.filters {
            for &batch_size in &self.batch_sizes {
                for &learning_rate in &self.learning_rates {
                    for &baseline in &self.baselines {
                        for &seed in &self.seeds {
                            let mut cfg = self.template.clone();
                            cfg.filters = filters;
                            cfg.batch_size = batch_size;
                            cfg.learning_rate = learning_rate;
                            cfg.baseline = baseline;
                            cfg.alpha = baseline.default_alpha();
                            cfg.seed = seed;
                            out.push((config_index, cfg));
                        }
                        config_index += 1;
                    }
                }
            }
        }
        out
    }
}

/// The two quantities the sweep analysis correlates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Mean first-epoch cosine standard deviation over all task pairs.
    pub first_epoch_sigma: f64,
    pub final_harmonic_accuracy: f64,
}

/// Outcome of one run. Failed runs keep their error text so the sweep
/// report can show them; they never enter aggregate statistics.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config_index: usize,
    pub config: RunConfig,
    pub outcome: std::result::Result<SweepPoint, String>,
}

fn run_one(cfg: &RunConfig, data: &Dataset) -> std::result::Result<SweepPoint, String> {
    let result = train(cfg, data, &TrainOptions::default()).map_err(|e| e.to_string())?;
    if result.first_epoch_sigma.is_empty() {
        return Err("run recorded no first-epoch cosine series".into());
    }
    let sigma = result.first_epoch_sigma.iter().map(|&(_, s)| s).sum::<f64>()
        / result.first_epoch_sigma.len() as f64;
    Ok(SweepPoint {
        first_epoch_sigma: sigma,
        final_harmonic_accuracy: result.final_harmonic_accuracy,
    })
}

/// Run every grid point, optionally bounded to `workers` threads. Runs
/// share nothing; the returned order is exactly [`SweepGrid::expand`]
/// order regardless of scheduling.
pub fn run_sweep(
    grid: &SweepGrid,
    data: &Dataset,
    workers: Option<usize>,
) -> Result<Vec<SweepEntry>> {
    grid.validate()?;
    let points = grid.expand();
    let execute = || -> Vec<SweepEntry> {
        points
            .par_iter()
            .map(|(config_index, cfg)| SweepEntry {
                config_index: *config_index,
                config: cfg.clone(),
                outcome: run_one(cfg, data),
            })
            .collect()
    };
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Train(format!("worker pool: {e}")))?;
            Ok(pool.install(execute))
        }
        None => Ok(execute()),
    }
}

/// Collect the `(first-epoch sigma, final harmonic accuracy)` pairs of all
/// successful runs.
pub fn successful_points(entries: &[SweepEntry]) -> Vec<(f64, f64)> {
    entries
        .iter()
        .filter_map(|e| e.outcome.as_ref().ok())
        .map(|p| (p.first_epoch_sigma, p.final_harmonic_accuracy))
        .collect()
}

/// Ranks in [1, n] with ties getting the average of the positions they
/// occupy.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut at = 0;
    while at < n {
        let mut hi = at + 1;
        while hi < n && values[order[hi]] == values[order[at]] {
            hi += 1;
        }
        let avg = (at + hi + 1) as f64 / 2.0;
        for &idx in &order[at..hi] {
            ranks[idx] = avg;
        }
        at = hi;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling: the Pearson
/// correlation of the two rank vectors.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(
            "spearman",
            format!("lengths differ: {} vs {}", xs.len(), ys.len()),
        ));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "rank correlation needs at least 2 points, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "rank correlation needs finite inputs".into(),
        ));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InsufficientData(
            "rank correlation is undefined for a constant input".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}
