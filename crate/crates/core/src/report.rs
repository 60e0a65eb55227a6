//! Run summary aggregation: joins the pipeline's on-disk artifacts
//! (prompts, rollouts, annotations, admitted pairs, training CSVs) into
//! plot-ready tables without modifying any input.
//!
//! Fixed column orders (stable contract, suitable for golden-file
//! comparison):
//!
//! * pair rows: `prompt_id,rollouts,hallucinated,halluc_rate,p_chosen,
//!   p_rejected,chosen_len,rejected_len` — one row per admitted pair, in
//!   pair-file order; `halluc_rate` is recomputed here from the
//!   annotations alone (hallucinated-labeled share of the prompt's
//!   annotated responses), so it can be checked by an independent recount.
//! * summary: `prompts,rollouts,annotations,hallucinated,halluc_rate,
//!   pairs` — one row of totals.
//! * iteration rates: `iteration,data_mode,halluc_rate` — extracted from a
//!   training report's per-iteration table.
//!
//! Annotations carrying the ground-truth sentinel response id (u32::MAX)
//! describe external reference answers, not sampled responses, and are
//! excluded from every recount.

use std::collections::BTreeMap;

use crate::data::{AnnotationRecord, Label, PairRecord, PromptRecord, RolloutRecord};
use crate::policy::PromptId;
use crate::{Error, Result};

/// Sentinel response id marking a judged ground-truth answer.
pub const GT_RESPONSE_ID: u32 = u32::MAX;

/// One admitted pair joined with its prompt's rollout statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub prompt_id: PromptId,
    /// Sampled rollouts recorded for this prompt.
    pub rollouts: usize,
    /// Annotations labeled hallucinated for this prompt.
    pub hallucinated: usize,
    /// hallucinated / annotated for this prompt.
    pub halluc_rate: f64,
    pub p_chosen: f64,
    pub p_rejected: f64,
    pub chosen_len: usize,
    pub rejected_len: usize,
}

/// Whole-run totals.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub prompts: usize,
    pub rollouts: usize,
    pub annotations: usize,
    pub hallucinated: usize,
    /// hallucinated / annotations (0 when nothing is annotated).
    pub halluc_rate: f64,
    pub pairs: usize,
}

/// The joined report.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedReport {
    pub rows: Vec<PairRow>,
    pub summary: SummaryRow,
}

#[derive(Default)]
struct PromptTally {
    rollouts: usize,
    annotated: usize,
    hallucinated: usize,
}

/// Joins the four pipeline artifacts. Inputs are read-only; inconsistent
/// references (unknown prompt ids, duplicate annotations, pairs for
/// unannotated prompts) are errors.
pub fn join_report(
    prompts: &[PromptRecord],
    rollouts: &[RolloutRecord],
    annotations: &[AnnotationRecord],
    pairs: &[PairRecord],
) -> Result<JoinedReport> {
    let mut tallies: BTreeMap<PromptId, PromptTally> = BTreeMap::new();
    for p in prompts {
        if tallies.insert(p.id, PromptTally::default()).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate prompt id {} in prompts file",
                p.id
            )));
        }
    }
    for r in rollouts {
        let tally = tallies.get_mut(&r.prompt_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "rollout references unknown prompt id {}",
                r.prompt_id
            ))
        })?;
        tally.rollouts += 1;
    }
    let mut seen = std::collections::HashSet::new();
    for a in annotations {
        if a.response_id == GT_RESPONSE_ID {
            continue;
        }
        let tally = tallies.get_mut(&a.prompt_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "annotation references unknown prompt id {}",
                a.prompt_id
            ))
        })?;
        if !seen.insert((a.prompt_id, a.response_id)) {
            return Err(Error::InvalidArgument(format!(
                "duplicate annotation for prompt {} response {}",
                a.prompt_id, a.response_id
            )));
        }
        tally.annotated += 1;
        if a.label == Label::Hallucinated {
            tally.hallucinated += 1;
        }
    }

    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let tally = tallies.get(&pair.prompt_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "pair references unknown prompt id {}",
                pair.prompt_id
            ))
        })?;
        if tally.annotated == 0 {
            return Err(Error::InvalidArgument(format!(
                "pair for prompt {} but no annotations for it",
                pair.prompt_id
            )));
        }
        rows.push(PairRow {
            prompt_id: pair.prompt_id,
            rollouts: tally.rollouts,
            hallucinated: tally.hallucinated,
            halluc_rate: tally.hallucinated as f64 / tally.annotated as f64,
            p_chosen: pair.p_chosen,
            p_rejected: pair.p_rejected,
            chosen_len: pair.chosen.len(),
            rejected_len: pair.rejected.len(),
        });
    }

    let total_rollouts: usize = tallies.values().map(|t| t.rollouts).sum();
    let total_annotated: usize = tallies.values().map(|t| t.annotated).sum();
    let total_halluc: usize = tallies.values().map(|t| t.hallucinated).sum();
    let summary = SummaryRow {
        prompts: prompts.len(),
        rollouts: total_rollouts,
        annotations: total_annotated,
        hallucinated: total_halluc,
        halluc_rate: if total_annotated == 0 {
            0.0
        } else {
            total_halluc as f64 / total_annotated as f64
        },
        pairs: rows.len(),
    };
    Ok(JoinedReport { rows, summary })
}

/// Per-pair table (see module docs for the column contract).
pub fn pair_rows_csv(report: &JoinedReport) -> String {
    let mut s = String::from(
        "prompt_id,rollouts,hallucinated,halluc_rate,p_chosen,p_rejected,chosen_len,rejected_len\n",
    );
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.prompt_id,
            r.rollouts,
            r.hallucinated,
            r.halluc_rate,
            r.p_chosen,
            r.p_rejected,
            r.chosen_len,
            r.rejected_len
        ));
    }
    s
}

/// One-row totals table.
pub fn summary_csv(report: &JoinedReport) -> String {
    let s = &report.summary;
    format!(
        "prompts,rollouts,annotations,hallucinated,halluc_rate,pairs\n{},{},{},{},{},{}\n",
        s.prompts, s.rollouts, s.annotations, s.hallucinated, s.halluc_rate, s.pairs
    )
}

/// Extracts `iteration,data_mode,halluc_rate` from a training report's
/// per-iteration CSV (as emitted by the trainer). The input text is
/// validated against that table's header.
pub fn iteration_rates_csv(iterations_csv: &str) -> Result<String> {
    const HEADER: &str =
        "iteration,data_mode,beta,nu,eta,epochs,nll_weight,pairs,filtered_clean,filtered_halluc,filtered_other,halluc_rate";
    let mut lines = iterations_csv.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "unexpected per-iteration table header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut out = String::from("iteration,data_mode,halluc_rate\n");
    for (ix, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Config(format!(
                "per-iteration table row {}: expected 12 fields, got {}",
                ix + 2,
                fields.len()
            )));
        }
        out.push_str(&format!("{},{},{}\n", fields[0], fields[1], fields[11]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{run_alignment, TrainerConfig};
    use crate::data::{
        annotate_records, generate_task, group_annotated, sample_rollout_records, select_pair,
        Judge, SamplingConfig, Selection, TaskConfig, DEFAULT_TAU,
    };
    use crate::policy::Policy;
    use crate::seeds;

    struct Artifacts {
        prompts: Vec<PromptRecord>,
        rollouts: Vec<RolloutRecord>,
        annotations: Vec<AnnotationRecord>,
        pairs: Vec<PairRecord>,
    }

    fn small_pipeline(seed: u64) -> Artifacts {
        let task = generate_task(&TaskConfig::new(12, 16, 0.25, seed)).unwrap();
        let policy =
            Policy::seeded_init(16, 24, 3, seeds::derive(seed, "features"), seed, 0.4).unwrap();
        let sampling = SamplingConfig {
            k: 4,
            temperature: 1.0,
            max_len: 8,
        };
        let rollouts = sample_rollout_records(&policy, &task, &sampling, seed, 0).unwrap();
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let annotations = annotate_records(&judge, &task, &rollouts).unwrap();
        let sets = group_annotated(&rollouts, &annotations).unwrap();
        let pairs = sets
            .iter()
            .filter_map(|set| match select_pair(set, DEFAULT_TAU).unwrap() {
                Selection::Admitted(pair) => Some(PairRecord {
                    prompt_id: pair.prompt,
                    chosen: pair.chosen.tokens,
                    rejected: pair.rejected.tokens,
                    p_chosen: pair.p_chosen,
                    p_rejected: pair.p_rejected,
                }),
                _ => None,
            })
            .collect();
        Artifacts {
            prompts: task.prompts().to_vec(),
            rollouts,
            annotations,
            pairs,
        }
    }

    #[test]
    fn joins_pairs_with_recountable_rates() {
        let a = small_pipeline(11);
        assert!(!a.pairs.is_empty(), "pipeline should admit some pairs");
        let report = join_report(&a.prompts, &a.rollouts, &a.annotations, &a.pairs).unwrap();
        assert_eq!(report.rows.len(), a.pairs.len());
        for row in &report.rows {
            // Independent recount straight from the annotation records.
            let annotated = a
                .annotations
                .iter()
                .filter(|x| x.prompt_id == row.prompt_id)
                .count();
            let halluc = a
                .annotations
                .iter()
                .filter(|x| x.prompt_id == row.prompt_id && x.label == Label::Hallucinated)
                .count();
            assert_eq!(row.hallucinated, halluc);
            assert_eq!(row.halluc_rate, halluc as f64 / annotated as f64);
            assert_eq!(row.rollouts, 4);
            assert!(row.p_chosen < DEFAULT_TAU && row.p_rejected >= DEFAULT_TAU);
        }
        let total_halluc = a
            .annotations
            .iter()
            .filter(|x| x.label == Label::Hallucinated)
            .count();
        assert_eq!(report.summary.hallucinated, total_halluc);
        assert_eq!(report.summary.rollouts, a.rollouts.len());
        assert_eq!(report.summary.prompts, 12);
        assert_eq!(report.summary.pairs, report.rows.len());
    }

    #[test]
    fn csv_layout_is_fixed() {
        let a = small_pipeline(11);
        let report = join_report(&a.prompts, &a.rollouts, &a.annotations, &a.pairs).unwrap();
        let csv = pair_rows_csv(&report);
        assert!(csv.starts_with(
            "prompt_id,rollouts,hallucinated,halluc_rate,p_chosen,p_rejected,chosen_len,rejected_len\n"
        ));
        assert_eq!(csv.lines().count(), 1 + report.rows.len());
        let summary = summary_csv(&report);
        assert!(
            summary.starts_with("prompts,rollouts,annotations,hallucinated,halluc_rate,pairs\n")
        );
        assert_eq!(summary.lines().count(), 2);
        // Byte-stable across recomputation.
        let again = join_report(&a.prompts, &a.rollouts, &a.annotations, &a.pairs).unwrap();
        assert_eq!(pair_rows_csv(&again), csv);
    }

    #[test]
    fn empty_pairs_yield_a_header_only_table() {
        let a = small_pipeline(11);
        let report = join_report(&a.prompts, &a.rollouts, &a.annotations, &[]).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.summary.pairs, 0);
        let csv = pair_rows_csv(&report);
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn inconsistent_inputs_are_rejected() {
        let a = small_pipeline(11);
        // Pair for an unknown prompt.
        let mut bad_pair = a.pairs[0].clone();
        bad_pair.prompt_id = 999;
        assert!(join_report(
            &a.prompts,
            &a.rollouts,
            &a.annotations,
            std::slice::from_ref(&bad_pair)
        )
        .is_err());
        // Duplicate annotation.
        let mut dup = a.annotations.clone();
        dup.push(dup[0].clone());
        assert!(join_report(&a.prompts, &a.rollouts, &dup, &a.pairs).is_err());
        // Rollout for an unknown prompt.
        let mut bad_roll = a.rollouts.clone();
        bad_roll[0].prompt_id = 999;
        assert!(join_report(&a.prompts, &bad_roll, &a.annotations, &a.pairs).is_err());
        // Pair for a prompt with no annotations at all.
        let only_other: Vec<AnnotationRecord> = a
            .annotations
            .iter()
            .filter(|x| x.prompt_id != a.pairs[0].prompt_id)
            .cloned()
            .collect();
        let no_rolls: Vec<RolloutRecord> = a
            .rollouts
            .iter()
            .filter(|r| r.prompt_id != a.pairs[0].prompt_id)
            .cloned()
            .collect();
        assert!(join_report(&a.prompts, &no_rolls, &only_other, &a.pairs).is_err());
    }

    #[test]
    fn ground_truth_sentinel_is_excluded_from_recounts() {
        let a = small_pipeline(11);
        let mut with_gt = a.annotations.clone();
        with_gt.push(AnnotationRecord {
            prompt_id: a.prompts[0].id,
            response_id: GT_RESPONSE_ID,
            p_halluc: 1.0,
            label: Label::Hallucinated,
        });
        let base = join_report(&a.prompts, &a.rollouts, &a.annotations, &a.pairs).unwrap();
        let with_sentinel = join_report(&a.prompts, &a.rollouts, &with_gt, &a.pairs).unwrap();
        assert_eq!(base, with_sentinel);
    }

    #[test]
    fn iteration_rates_come_from_the_training_table() {
        let task = generate_task(&TaskConfig::new(32, 16, 0.25, 5)).unwrap();
        let policy = Policy::seeded_init(16, 24, 3, seeds::derive(5, "features"), 5, 0.4).unwrap();
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let outcome =
            run_alignment(&policy, &task, &judge, &TrainerConfig::preset_paper(5)).unwrap();
        let table = outcome.report.iterations_csv();
        let rates = iteration_rates_csv(&table).unwrap();
        let mut lines = rates.lines();
        assert_eq!(lines.next().unwrap(), "iteration,data_mode,halluc_rate");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), outcome.report.iterations.len());
        for (row, iter_row) in rows.iter().zip(&outcome.report.iterations) {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields[0], iter_row.iteration.to_string());
            assert_eq!(fields[1], iter_row.data_mode);
            assert_eq!(fields[2], format!("{}", iter_row.halluc_rate));
        }
        assert!(iteration_rates_csv("bogus\n1,2\n").is_err());
    }
}
