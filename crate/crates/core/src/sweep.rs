//! Sparsity by lambda grid: score, prune, rewind, retrain and evaluate every
//! cell from one shared pretraining run and one dense trained model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::encoder::{EncoderWeights, MaskSet};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::io::write_atomic;
use crate::pipeline::{evaluate, score, Dataset};
use crate::pruner::{select_prune_set, SparsitySpec};
use crate::train::{rewind_and_retrain, RewindCheckpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub report: EvalReport,
    pub wallclock_s: f64,
}

/// Dense row first, then cells ordered by `(s, lambda)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

pub const REPORT_FILE: &str = "sweep.csv";
pub const SCATTER_FILE: &str = "alignment_uniformity.dat";

pub fn curve_file(lambda: f64) -> String {
    format!("curve_lambda_{lambda}.dat")
}

/// Sorted, deduplicated, with nonpositive sparsities dropped.
fn clean_grid(values: &[f64], what: &str, drop_zero: bool) -> Vec<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let before = v.len();
    v.dedup();
    if v.len() != before {
        warn!("duplicate {what} values requested; keeping one row each");
    }
    if drop_zero && v.first() == Some(&0.0) {
        warn!("sparsity 0 is the dense row and is always included");
        v.remove(0);
    }
    v
}

pub struct SweepInputs<'a> {
    pub config: &'a RunConfig,
    pub data: &'a Dataset,
    pub rewind: &'a RewindCheckpoint,
    /// Dense contrastively trained model the importance scores come from.
    pub trained: &'a EncoderWeights<f32>,
}

/// `jobs` bounds cell-level parallelism; results do not depend on it.
pub fn run_sweep(inputs: &SweepInputs, sparsities: &[f64], lambdas: &[f64], jobs: usize) -> Result<SweepReport> {
    let SweepInputs {
        config,
        data,
        rewind,
        trained,
    } = *inputs;
    let sparsities = clean_grid(sparsities, "sparsity", true);
    let lambdas = clean_grid(lambdas, "lambda", false);
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let specs = sparsities.iter().map(|&s| SparsitySpec::new(s)).collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let timed = |f: &dyn Fn() -> Result<EvalReport>| -> Result<SweepRow> {
        let t = Instant::now();
        let report = f()?;
        let wallclock_s = if config.sweep.record_wallclock { t.elapsed().as_secs_f64() } else { 0.0 };
        Ok(SweepRow { report, wallclock_s })
    };

    pool.install(|| {
        let tables = lambdas
            .par_iter()
            .map(|&l| score(config, data, trained, l))
            .collect::<Result<Vec<_>>>()?;
        let cells: Vec<(usize, usize)> = (0..specs.len())
            .flat_map(|i| (0..lambdas.len()).map(move |j| (i, j)))
            .collect();
        let dense = || {
            let masks = MaskSet::ones_for(trained);
            let (w, _) = rewind_and_retrain(&masks, rewind, &data.corpus, &config.model, &config.train)?;
            evaluate(config, data, &w, &masks, "dense", 0.0, None)
        };
        // Slot 0 is the dense row.
        let rows = (0..=cells.len())
            .into_par_iter()
            .map(|k| {
                if k == 0 {
                    return timed(&dense);
                }
                let (i, j) = cells[k - 1];
                let (s, l) = (specs[i], lambdas[j]);
                timed(&|| {
                    let decision = select_prune_set(&tables[j], s)?;
                    let (w, _) = rewind_and_retrain(&decision.masks, rewind, &data.corpus, &config.model, &config.train)?;
                    let r = evaluate(config, data, &w, &decision.masks, "sparse", s.value(), Some(l))?;
                    info!("cell s={} lambda={l}: spearman {:.4}", s.value(), r.spearman);
                    Ok(r)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepReport { rows })
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl SweepReport {
    pub fn dense(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.report.lambda.is_none())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter_map(|r| r.report.lambda).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// `(s, row)` for one lambda, the dense row standing in for `s = 0`.
    pub fn curve(&self, lambda: f64) -> Vec<(f64, &SweepRow)> {
        self.dense()
            .into_iter()
            .chain(self.rows.iter().filter(|r| r.report.lambda == Some(lambda)))
            .map(|r| (r.report.sparsity, r))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("s,lambda,spearman,alignment,uniformity,probe_accuracy,wallclock_s\n");
        for r in &self.rows {
            let e = &r.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.sparsity,
                opt(e.lambda),
                e.spearman,
                e.alignment,
                e.uniformity,
                opt(e.probe_accuracy),
                r.wallclock_s
            );
        }
        s
    }

    /// Two columns, `s spearman`, for plotting performance against sparsity.
    pub fn curve_dat(&self, lambda: f64) -> String {
        let mut s = format!("# lambda = {lambda}\n# s spearman\n");
        for (sp, r) in self.curve(lambda) {
            let _ = writeln!(s, "{sp} {}", r.report.spearman);
        }
        s
    }

    pub fn scatter_dat(&self) -> String {
        let mut s = String::from("# alignment uniformity s lambda\n");
        for r in &self.rows {
            let e = &r.report;
            let l = e.lambda.map_or("NaN".to_string(), |x| x.to_string());
            let _ = writeln!(s, "{} {} {} {l}", e.alignment, e.uniformity, e.sparsity);
        }
        s
    }

    /// Report CSV, one curve file per lambda and the scatter file.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![(dir.join(REPORT_FILE), self.to_csv()), (dir.join(SCATTER_FILE), self.scatter_dat())];
        for l in self.lambdas() {
            files.push((dir.join(curve_file(l)), self.curve_dat(l)));
        }
        for (p, body) in &files {
            write_atomic(p, body.as_bytes())?;
        }
        Ok(files.into_iter().map(|f| f.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(s: f64, lambda: Option<f64>, rho: f64) -> SweepRow {
        SweepRow {
            report: EvalReport {
                model: "m".into(),
                sparsity: s,
                lambda,
                spearman: rho,
                alignment: 0.5,
                uniformity: -2.0,
                probe_accuracy: None,
            },
            wallclock_s: 0.0,
        }
    }

    #[test]
    fn grid_cleaning() {
        assert_eq!(clean_grid(&[0.2, 0.0, 0.1, 0.2], "s", true), vec![0.1, 0.2]);
        assert_eq!(clean_grid(&[0.5, 0.25], "l", false), vec![0.25, 0.5]);
    }

    #[test]
    fn report_files() {
        let r = SweepReport {
            rows: vec![row(0.0, None, 0.3), row(0.1, Some(0.25), 0.4), row(0.1, Some(0.5), 0.2)],
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("s,lambda,spearman,alignment,uniformity,probe_accuracy,wallclock_s\n0,,0.3,"));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(r.lambdas(), vec![0.25, 0.5]);
        assert_eq!(r.curve_dat(0.25), "# lambda = 0.25\n# s spearman\n0 0.3\n0.1 0.4\n");
        assert!(r.scatter_dat().contains("0.5 -2 0 NaN"));
        assert_eq!(curve_file(0.25), "curve_lambda_0.25.dat");
    }
}
