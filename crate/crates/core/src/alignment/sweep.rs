//! Tie-tolerance (ν) sweep: weight-vs-margin curves plus an end-to-end
//! training run per ν, reported side by side. The report deliberately
//! draws no conclusion about which ν is best — it only lays out the
//! numbers so a human can compare them.

use crate::alignment::trainer::{run_alignment, TrainerConfig};
use crate::data::{Judge, Task};
use crate::policy::Policy;
use crate::preference::RaoKupper;
use crate::{Error, Result};

/// ν values swept by default.
pub const DEFAULT_SWEEP_NUS: [f64; 5] = [1.0, 2.0, 3.0, 5.0, 8.0];

/// One point of a weight-vs-margin curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightCurvePoint {
    pub nu: f64,
    pub margin: f64,
    pub weight: f64,
}

/// Outcome of one end-to-end run at a fixed ν.
#[derive(Debug, Clone, PartialEq)]
pub struct NuSweepPoint {
    pub nu: f64,
    pub initial_halluc_rate: f64,
    pub final_halluc_rate: f64,
    /// Mean loss over the last trained epoch.
    pub final_mean_loss: f64,
    /// Mean sample weight over the last trained epoch.
    pub final_mean_weight: f64,
    /// Pairs admitted in the last iteration.
    pub pairs: usize,
}

/// Curves and per-ν run outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct NuSweepReport {
    pub curve: Vec<WeightCurvePoint>,
    pub runs: Vec<NuSweepPoint>,
}

impl NuSweepReport {
    /// `weight_curve.csv`: long-form weight-vs-margin curves.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("nu,margin,weight\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{}\n", p.nu, p.margin, p.weight));
        }
        s
    }

    /// `nu_runs.csv`: one row per ν with its end-to-end metrics.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from(
            "nu,initial_halluc_rate,final_halluc_rate,final_mean_loss,final_mean_weight,pairs\n",
        );
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.nu,
                r.initial_halluc_rate,
                r.final_halluc_rate,
                r.final_mean_loss,
                r.final_mean_weight,
                r.pairs
            ));
        }
        s
    }
}

/// Sweeps ν over `nus`. For each ν the base configuration is rerun with
/// every iteration's weighting set to that ν (same seed, same task), and
/// the weight-vs-margin curve is tabulated over `margins`.
pub fn run_nu_sweep(
    initial: &Policy,
    task: &Task,
    judge: &Judge,
    base: &TrainerConfig,
    nus: &[f64],
    margins: &[f64],
) -> Result<NuSweepReport> {
    if nus.is_empty() {
        return Err(Error::InvalidArgument(
            "nu sweep needs at least one ν".into(),
        ));
    }
    if margins.is_empty() || margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidArgument(
            "margin grid must be non-empty and finite".into(),
        ));
    }

    let mut curve = Vec::with_capacity(nus.len() * margins.len());
    let mut runs = Vec::with_capacity(nus.len());
    for &nu in nus {
        let model = RaoKupper::new(nu)?;
        for &m in margins {
            curve.push(WeightCurvePoint {
                nu,
                margin: m,
                weight: model.sample_weight(m)?,
            });
        }

        let mut cfg = base.clone();
        for spec in &mut cfg.iterations {
            spec.nu = Some(nu);
        }
        let outcome = run_alignment(initial, task, judge, &cfg)?;
        let report = &outcome.report;
        let last_epoch = report
            .epochs
            .last()
            .expect("validated configs train at least one epoch");
        let last_iter = report
            .iterations
            .last()
            .expect("reports always carry the baseline row");
        runs.push(NuSweepPoint {
            nu,
            initial_halluc_rate: report.initial_halluc_rate,
            final_halluc_rate: last_iter.halluc_rate,
            final_mean_loss: last_epoch.mean_loss,
            final_mean_weight: last_epoch.mean_weight,
            pairs: last_iter.pairs,
        });
    }
    Ok(NuSweepReport { curve, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::trainer::{DataMode, IterationSpec, OptimizerKind, WeightRefresh};
    use crate::data::{generate_task, SamplingConfig, TaskConfig};
    use crate::seeds;

    fn margin_grid() -> Vec<f64> {
        (-32..=32).map(|i| i as f64 * 0.25).collect()
    }

    fn small_setup() -> (Policy, Task, Judge, TrainerConfig) {
        let task = generate_task(&TaskConfig::new(24, 16, 0.25, 7)).unwrap();
        let policy = Policy::seeded_init(16, 24, 3, seeds::derive(3, "features"), 3, 0.4).unwrap();
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let cfg = TrainerConfig {
            sampling: SamplingConfig {
                k: 4,
                temperature: 1.0,
                max_len: 6,
            },
            tau: 0.5,
            holdout_fraction: 0.2,
            batch_size: 8,
            retry_rounds: 3,
            m_easy: 2.0,
            m_hard: -2.0,
            optimizer: OptimizerKind::Sgd,
            seed: 11,
            iterations: vec![IterationSpec {
                data_mode: DataMode::OnPolicy,
                beta: 0.1,
                nu: None,
                eta: 0.5,
                epochs: 1,
                nll_weight: 0.0,
                weight_refresh: WeightRefresh::Step,
            }],
        };
        (policy, task, judge, cfg)
    }

    #[test]
    fn curves_match_the_closed_form() {
        let (policy, task, judge, cfg) = small_setup();
        let grid = margin_grid();
        let report = run_nu_sweep(&policy, &task, &judge, &cfg, &DEFAULT_SWEEP_NUS, &grid).unwrap();
        assert_eq!(report.curve.len(), DEFAULT_SWEEP_NUS.len() * grid.len());
        for p in &report.curve {
            // Independent closed form: tie probability plus twice the
            // tie-free win probability at zero margin.
            let x = (-p.margin.abs()).exp();
            let tie = (p.nu * p.nu - 1.0) * x / ((1.0 + p.nu * x) * (p.nu + x));
            let expected = tie + 2.0 / (p.nu + 1.0);
            assert!(
                (p.weight - expected).abs() <= 1e-9,
                "nu={} m={}: {} vs {}",
                p.nu,
                p.margin,
                p.weight,
                expected
            );
        }
    }

    #[test]
    fn nu_one_curve_is_identically_one() {
        let (policy, task, judge, cfg) = small_setup();
        let grid = margin_grid();
        let report = run_nu_sweep(&policy, &task, &judge, &cfg, &[1.0], &grid).unwrap();
        for p in &report.curve {
            assert_eq!(p.weight.to_bits(), 1.0f64.to_bits());
        }
    }

    #[test]
    fn one_run_per_nu_in_input_order() {
        let (policy, task, judge, cfg) = small_setup();
        let grid = [0.0, 1.0];
        let nus = [3.0, 1.0, 8.0];
        let report = run_nu_sweep(&policy, &task, &judge, &cfg, &nus, &grid).unwrap();
        assert_eq!(report.runs.len(), 3);
        for (r, &nu) in report.runs.iter().zip(&nus) {
            assert_eq!(r.nu, nu);
            assert!((0.0..=1.0).contains(&r.final_halluc_rate));
            assert!((0.0..=1.0).contains(&r.initial_halluc_rate));
            assert!(r.final_mean_loss.is_finite());
            assert!(r.pairs > 0);
        }
        // All runs start from the same policy and task, so the baseline
        // rate is shared.
        assert_eq!(
            report.runs[0].initial_halluc_rate,
            report.runs[1].initial_halluc_rate
        );
        // Sweep is deterministic end to end.
        let again = run_nu_sweep(&policy, &task, &judge, &cfg, &nus, &grid).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn csv_layout() {
        let (policy, task, judge, cfg) = small_setup();
        let report = run_nu_sweep(&policy, &task, &judge, &cfg, &[2.0], &[0.0]).unwrap();
        assert!(report.curve_csv().starts_with("nu,margin,weight\n"));
        assert!(report.runs_csv().starts_with(
            "nu,initial_halluc_rate,final_halluc_rate,final_mean_loss,final_mean_weight,pairs\n"
        ));
        assert_eq!(report.curve_csv().lines().count(), 2);
        assert_eq!(report.runs_csv().lines().count(), 2);
    }

    #[test]
    fn invalid_sweeps_are_rejected() {
        let (policy, task, judge, cfg) = small_setup();
        assert!(run_nu_sweep(&policy, &task, &judge, &cfg, &[], &[0.0]).is_err());
        assert!(run_nu_sweep(&policy, &task, &judge, &cfg, &[0.5], &[0.0]).is_err());
        assert!(run_nu_sweep(&policy, &task, &judge, &cfg, &[2.0], &[]).is_err());
        assert!(run_nu_sweep(&policy, &task, &judge, &cfg, &[2.0], &[f64::NAN]).is_err());
    }
}
