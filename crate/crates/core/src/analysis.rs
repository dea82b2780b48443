//! Covariate balance diagnostics and treatment-effect estimates on matched
//! groups: absolute standardised mean differences (shared pre-match pooled
//! denominator), control-variance reduction, and naive vs matched ATE.

use std::collections::HashSet;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::FeatureMatrix;
use crate::matching::MatchedPairs;
use crate::stats::{mean, sample_sd, sample_variance};

/// |mean_t − mean_c| / sqrt((s_t² + s_c²)/2) per covariate. The pooled
/// denominator always comes from the full pre-match groups so before/after
/// values are comparable. With `matched` given, means are restricted to
/// units appearing in the pairs. Zero pooled SD flags the covariate
/// degenerate (None).
pub fn asmd(features: &FeatureMatrix, matched: Option<&MatchedPairs>) -> Result<Vec<Option<f64>>> {
    let subset: Option<HashSet<&str>> = matched.map(|pairs| {
        pairs
            .control_ids()
            .chain(pairs.treated_ids())
            .collect()
    });
    let in_subset = |unit: &str| subset.as_ref().is_none_or(|s| s.contains(unit));

    let mut out = Vec::with_capacity(features.n_covariates());
    for j in 0..features.n_covariates() {
        let full_t: Vec<f64> = features
            .rows
            .iter()
            .filter(|r| r.group == 1)
            .map(|r| r.covariates[j])
            .collect();
        let full_c: Vec<f64> = features
            .rows
            .iter()
            .filter(|r| r.group == 0)
            .map(|r| r.covariates[j])
            .collect();
        if full_t.is_empty() || full_c.is_empty() {
            return Err(Error::SingleClass);
        }
        let pooled_sd =
            ((sample_variance(&full_t) + sample_variance(&full_c)) / 2.0).sqrt();
        if pooled_sd == 0.0 {
            out.push(None);
            continue;
        }
        let sub_t: Vec<f64> = features
            .rows
            .iter()
            .filter(|r| r.group == 1 && in_subset(&r.unit_id))
            .map(|r| r.covariates[j])
            .collect();
        let sub_c: Vec<f64> = features
            .rows
            .iter()
            .filter(|r| r.group == 0 && in_subset(&r.unit_id))
            .map(|r| r.covariates[j])
            .collect();
        if sub_t.is_empty() || sub_c.is_empty() {
            return Err(Error::EmptyPairs);
        }
        out.push(Some((mean(&sub_t) - mean(&sub_c)).abs() / pooled_sd));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReduction {
    /// Percent reduction per covariate; None where the full-control
    /// variance is zero.
    pub per_covariate: Vec<Option<f64>>,
    /// Average over non-degenerate covariates.
    pub average: Option<f64>,
}

/// 100·(var(control, all) − var(control, matched)) / var(control, all) per
/// covariate. Negative values (balance worsened) are reported as such.
pub fn variance_reduction(
    features: &FeatureMatrix,
    pairs: &MatchedPairs,
) -> Result<VarianceReduction> {
    if pairs.n_pairs() == 0 {
        return Err(Error::EmptyPairs);
    }
    let matched_controls: HashSet<&str> = pairs.control_ids().collect();
    let mut per = Vec::with_capacity(features.n_covariates());
    for j in 0..features.n_covariates() {
        let all: Vec<f64> = features
            .rows
            .iter()
            .filter(|r| r.group == 0)
            .map(|r| r.covariates[j])
            .collect();
        let matched: Vec<f64> = features
            .rows
            .iter()
            .filter(|r| r.group == 0 && matched_controls.contains(r.unit_id.as_str()))
            .map(|r| r.covariates[j])
            .collect();
        let var_all = sample_variance(&all);
        if var_all == 0.0 {
            per.push(None);
        } else {
            per.push(Some(100.0 * (var_all - sample_variance(&matched)) / var_all));
        }
    }
    let usable: Vec<f64> = per.iter().flatten().copied().collect();
    let average = if usable.is_empty() { None } else { Some(mean(&usable)) };
    Ok(VarianceReduction { per_covariate: per, average })
}

/// Difference of mean target between treatment and control over all units
/// (treated minus control, so an improvement that lowers the target is
/// negative).
pub fn ate_naive(targets: &[f64], groups: &[u8]) -> Result<f64> {
    assert_eq!(targets.len(), groups.len());
    let treated: Vec<f64> =
        targets.iter().zip(groups).filter(|(_, g)| **g == 1).map(|(t, _)| *t).collect();
    let control: Vec<f64> =
        targets.iter().zip(groups).filter(|(_, g)| **g == 0).map(|(t, _)| *t).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok(mean(&treated) - mean(&control))
}

/// Mean over pairs of (treated target − matched-control target).
pub fn ate_matched(features: &FeatureMatrix, pairs: &MatchedPairs) -> Result<f64> {
    if pairs.n_pairs() == 0 {
        return Err(Error::EmptyPairs);
    }
    let target_of = |id: &str| -> Result<f64> {
        features
            .rows
            .iter()
            .find(|r| r.unit_id == id)
            .map(|r| r.target)
            .ok_or_else(|| Error::InvalidConfig(format!("unit `{id}` not in feature matrix")))
    };
    let mut acc = 0.0;
    for p in &pairs.pairs {
        acc += target_of(&p.treated_id)? - target_of(&p.control_id)?;
    }
    Ok(acc / pairs.n_pairs() as f64)
}

/// Group mean/sd of one covariate before and after matching.
#[derive(Debug, Clone, Serialize)]
pub struct CovariateBalance {
    pub name: String,
    pub asmd_before: Option<f64>,
    pub asmd_after: Option<f64>,
    pub mean_control_before: f64,
    pub sd_control_before: f64,
    pub mean_treated_before: f64,
    pub sd_treated_before: f64,
    pub mean_control_after: Option<f64>,
    pub sd_control_after: Option<f64>,
    pub mean_treated_after: Option<f64>,
    pub sd_treated_after: Option<f64>,
    pub var_control_before: f64,
    pub var_control_after: Option<f64>,
    pub variance_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub covariates: Vec<CovariateBalance>,
    pub avg_asmd_before: Option<f64>,
    pub avg_asmd_after: Option<f64>,
    pub avg_variance_reduction: Option<f64>,
    pub n_pairs: usize,
}

pub fn balance_report(features: &FeatureMatrix, pairs: &MatchedPairs) -> Result<BalanceReport> {
    let before = asmd(features, None)?;
    let after = asmd(features, Some(pairs))?;
    let vr = variance_reduction(features, pairs)?;
    let names = features.covariate_names();

    let matched_controls: HashSet<&str> = pairs.control_ids().collect();
    let matched_treated: HashSet<&str> = pairs.treated_ids().collect();

    let mut covariates = Vec::with_capacity(names.len());
    for j in 0..names.len() {
        let col_group = |group: u8, subset: Option<&HashSet<&str>>| -> Vec<f64> {
            features
                .rows
                .iter()
                .filter(|r| {
                    r.group == group && subset.is_none_or(|s| s.contains(r.unit_id.as_str()))
                })
                .map(|r| r.covariates[j])
                .collect()
        };
        let c_before = col_group(0, None);
        let t_before = col_group(1, None);
        let c_after = col_group(0, Some(&matched_controls));
        let t_after = col_group(1, Some(&matched_treated));
        let opt = |xs: &[f64], f: fn(&[f64]) -> f64| if xs.is_empty() { None } else { Some(f(xs)) };
        covariates.push(CovariateBalance {
            name: names[j].clone(),
            asmd_before: before[j],
            asmd_after: after[j],
            mean_control_before: mean(&c_before),
            sd_control_before: sample_sd(&c_before),
            mean_treated_before: mean(&t_before),
            sd_treated_before: sample_sd(&t_before),
            mean_control_after: opt(&c_after, mean),
            sd_control_after: opt(&c_after, sample_sd),
            mean_treated_after: opt(&t_after, mean),
            sd_treated_after: opt(&t_after, sample_sd),
            var_control_before: sample_variance(&c_before),
            var_control_after: opt(&c_after, sample_variance),
            variance_reduction_pct: vr.per_covariate[j],
        });
    }

    let avg = |values: &[Option<f64>]| {
        let usable: Vec<f64> = values.iter().flatten().copied().collect();
        if usable.is_empty() {
            None
        } else {
            Some(mean(&usable))
        }
    };
    Ok(BalanceReport {
        avg_asmd_before: avg(&before),
        avg_asmd_after: avg(&after),
        avg_variance_reduction: vr.average,
        n_pairs: pairs.n_pairs(),
        covariates,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectReport {
    pub ate_naive: f64,
    /// None when no pairs were formed.
    pub ate_matched: Option<f64>,
    pub mean_target_control_all: f64,
    pub mean_target_treated_all: f64,
    pub mean_target_control_matched: Option<f64>,
    pub mean_target_treated_matched: Option<f64>,
    pub n_pairs: usize,
    pub n_control: usize,
    pub n_treated: usize,
}

pub fn effect_report(features: &FeatureMatrix, pairs: &MatchedPairs) -> Result<EffectReport> {
    let targets = features.targets();
    let groups = features.groups();
    let naive = ate_naive(&targets, &groups)?;
    let (n_control, n_treated) = features.group_counts();

    let matched_controls: HashSet<&str> = pairs.control_ids().collect();
    let matched_treated: HashSet<&str> = pairs.treated_ids().collect();
    let group_mean = |group: u8, subset: Option<&HashSet<&str>>| -> Option<f64> {
        let xs: Vec<f64> = features
            .rows
            .iter()
            .filter(|r| r.group == group && subset.is_none_or(|s| s.contains(r.unit_id.as_str())))
            .map(|r| r.target)
            .collect();
        if xs.is_empty() {
            None
        } else {
            Some(mean(&xs))
        }
    };

    Ok(EffectReport {
        ate_naive: naive,
        ate_matched: if pairs.n_pairs() == 0 { None } else { Some(ate_matched(features, pairs)?) },
        mean_target_control_all: group_mean(0, None).expect("control group present"),
        mean_target_treated_all: group_mean(1, None).expect("treatment group present"),
        mean_target_control_matched: group_mean(0, Some(&matched_controls)),
        mean_target_treated_matched: group_mean(1, Some(&matched_treated)),
        n_pairs: pairs.n_pairs(),
        n_control,
        n_treated,
    })
}

/// Flat per-covariate CSV mirroring the balance table: one row per
/// (variable, group) with mean/sd before and after matching. The target
/// variable is the first block.
pub fn write_balance_table_csv<W: Write>(
    features: &FeatureMatrix,
    pairs: &MatchedPairs,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "group", "mean_before", "sd_before", "mean_after", "sd_after"])?;
    let matched_controls: HashSet<&str> = pairs.control_ids().collect();
    let matched_treated: HashSet<&str> = pairs.treated_ids().collect();

    let mut write_block = |name: &str, values: &dyn Fn(&crate::ingest::UnitFeatureRow) -> f64| -> Result<()> {
        for (group, label, subset) in
            [(0u8, "control", &matched_controls), (1u8, "treatment", &matched_treated)]
        {
            let before: Vec<f64> = features
                .rows
                .iter()
                .filter(|r| r.group == group)
                .map(|r| values(r))
                .collect();
            let after: Vec<f64> = features
                .rows
                .iter()
                .filter(|r| r.group == group && subset.contains(r.unit_id.as_str()))
                .map(|r| values(r))
                .collect();
            let fmt = |xs: &[f64], f: fn(&[f64]) -> f64| {
                if xs.is_empty() {
                    String::new()
                } else {
                    format!("{}", f(xs))
                }
            };
            w.write_record([
                name,
                label,
                &fmt(&before, mean),
                &fmt(&before, sample_sd),
                &fmt(&after, mean),
                &fmt(&after, sample_sd),
            ])?;
        }
        Ok(())
    };

    write_block(crate::ingest::TARGET_NAME, &|r| r.target)?;
    for (j, name) in features.covariate_names().iter().enumerate() {
        write_block(name, &move |r| r.covariates[j])?;
    }
    w.flush()?;
    Ok(())
}
