//! Propensity scores from posterior draws: point estimates from the
//! posterior mean parameters, uncertainty bands from randomly selected
//! parameter draws.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::FeatureMatrix;
use crate::matrix::Matrix;
use crate::model::{propensity, ParamVector};
use crate::sampler::PosteriorDraws;
use crate::stats::{mean, sample_sd};

/// Per-unit propensity scores, aligned with the feature matrix row order.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub unit_ids: Vec<String>,
    pub groups: Vec<u8>,
    /// Score at the posterior-mean parameters.
    pub point_score: Vec<f64>,
    /// Optional K×N matrix of per-draw scores.
    pub draw_scores: Option<Matrix>,
    /// Mean over per-draw scores; differs from `point_score` (Jensen).
    pub draw_mean_score: Option<Vec<f64>>,
}

/// Mean/sd of scores by group, the headline statistic of a fit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GroupScoreStats {
    pub control_mean: f64,
    pub control_sd: f64,
    pub treated_mean: f64,
    pub treated_sd: f64,
}

impl ScoreTable {
    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn group_stats(&self) -> GroupScoreStats {
        self.group_stats_of(&self.point_score)
    }

    fn group_stats_of(&self, scores: &[f64]) -> GroupScoreStats {
        let control: Vec<f64> = scores
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == 0)
            .map(|(s, _)| *s)
            .collect();
        let treated: Vec<f64> = scores
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == 1)
            .map(|(s, _)| *s)
            .collect();
        GroupScoreStats {
            control_mean: mean(&control),
            control_sd: sample_sd(&control),
            treated_mean: mean(&treated),
            treated_sd: sample_sd(&treated),
        }
    }

    /// CSV schema: `unit_id,group,point_score`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit_id", "group", "point_score"])?;
        for i in 0..self.n_units() {
            w.write_record([
                self.unit_ids[i].as_str(),
                &self.groups[i].to_string(),
                &format!("{}", self.point_score[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = csv_reader.headers()?.clone();
        if headers.iter().take(3).collect::<Vec<_>>() != vec!["unit_id", "group", "point_score"] {
            return Err(Error::MalformedFeatures(
                "expected header unit_id,group,point_score".into(),
            ));
        }
        let mut unit_ids = Vec::new();
        let mut groups = Vec::new();
        let mut point_score = Vec::new();
        for row in csv_reader.records() {
            let row = row?;
            unit_ids.push(row[0].to_string());
            groups.push(
                row[1]
                    .parse::<u8>()
                    .map_err(|_| Error::MalformedFeatures(format!("bad group `{}`", &row[1])))?,
            );
            point_score.push(
                row[2]
                    .parse::<f64>()
                    .map_err(|_| Error::MalformedFeatures(format!("bad score `{}`", &row[2])))?,
            );
        }
        Ok(Self { unit_ids, groups, point_score, draw_scores: None, draw_mean_score: None })
    }

    /// Wide CSV of per-draw scores: `draw,<unit ids...>`.
    pub fn write_draw_scores_csv<W: Write>(&self, writer: W) -> Result<()> {
        let Some(draw_scores) = &self.draw_scores else {
            return Err(Error::InvalidConfig("no draw scores computed".into()));
        };
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["draw".to_string()];
        header.extend(self.unit_ids.iter().cloned());
        w.write_record(&header)?;
        for k in 0..draw_scores.rows() {
            let mut rec = vec![k.to_string()];
            rec.extend(draw_scores.row(k).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Posterior-mean parameters: column means of the draws.
pub fn point_estimate(draws: &PosteriorDraws) -> ParamVector {
    assert!(draws.n_draws() > 0, "point_estimate needs at least one draw");
    ParamVector::from_slice(&draws.draws.column_means())
}

/// Scores every unit at fixed parameters. The features must be scaled:
/// scores are only meaningful in the space the model was fit in.
pub fn score_all(params: &ParamVector, features: &FeatureMatrix) -> Result<ScoreTable> {
    if !features.is_scaled() {
        return Err(Error::Unscaled { op: "scoring" });
    }
    if features.n_covariates() != params.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: params.beta.len(),
            got: features.n_covariates(),
        });
    }
    let point_score = features.rows.iter().map(|r| propensity(params, &r.covariates)).collect();
    Ok(ScoreTable {
        unit_ids: features.unit_ids(),
        groups: features.groups(),
        point_score,
        draw_scores: None,
        draw_mean_score: None,
    })
}

/// Scores all units under `k` parameter draws sampled uniformly without
/// replacement (seeded), one row per selected draw.
pub fn score_uncertainty(
    draws: &PosteriorDraws,
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
) -> Result<Matrix> {
    if !features.is_scaled() {
        return Err(Error::Unscaled { op: "scoring" });
    }
    if k > draws.n_draws() {
        return Err(Error::NotEnoughDraws { k, available: draws.n_draws() });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let selected = rand::seq::index::sample(&mut rng, draws.n_draws(), k);
    let n = features.n_units();
    let mut out = Matrix::zeros(k, n);
    for (row, draw_idx) in selected.into_iter().enumerate() {
        let params = ParamVector::from_slice(draws.draws.row(draw_idx));
        for (col, unit) in features.rows.iter().enumerate() {
            out.set(row, col, propensity(&params, &unit.covariates));
        }
    }
    Ok(out)
}

/// Attaches per-draw scores and their per-unit mean to a score table.
pub fn with_uncertainty(
    mut table: ScoreTable,
    draws: &PosteriorDraws,
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
) -> Result<ScoreTable> {
    let scores = score_uncertainty(draws, features, k, seed)?;
    let n = table.n_units();
    let mut means = vec![0.0; n];
    for row in 0..scores.rows() {
        for (m, v) in means.iter_mut().zip(scores.row(row)) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= scores.rows() as f64;
    }
    table.draw_scores = Some(scores);
    table.draw_mean_score = Some(means);
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::UnitFeatureRow;
    use crate::matrix::Matrix;
    use approx::assert_abs_diff_eq;

    fn scaled_features(rows: Vec<(&str, u8, Vec<f64>)>) -> FeatureMatrix {
        FeatureMatrix {
            rows: rows
                .into_iter()
                .map(|(id, group, covariates)| UnitFeatureRow {
                    unit_id: id.to_string(),
                    group,
                    target: 0.5,
                    covariates,
                })
                .collect(),
            scaling_params: None,
            scaled: true,
        }
    }

    fn draws_from(rows: &[Vec<f64>]) -> PosteriorDraws {
        PosteriorDraws::from_single_chain(Matrix::from_rows(rows))
    }

    #[test]
    fn point_estimate_single_row_is_identity() {
        let draws = draws_from(&[vec![0.3, -1.0, 0.4]]);
        let p = point_estimate(&draws);
        assert_eq!(p.alpha, 0.3);
        assert_eq!(p.beta, vec![-1.0, 0.4]);
    }

    #[test]
    fn point_estimate_symmetric_draws_vanish() {
        let draws = draws_from(&[vec![1.0, -2.0], vec![-1.0, 2.0]]);
        let p = point_estimate(&draws);
        assert_abs_diff_eq!(p.alpha, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.beta[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn point_estimate_hand_computed_means() {
        let draws = draws_from(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 9.0]]);
        let p = point_estimate(&draws);
        assert_abs_diff_eq!(p.alpha, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.beta[0], 6.0, epsilon = 1e-15);
    }

    #[test]
    fn score_all_zero_params_gives_half() {
        let features = scaled_features(vec![
            ("a", 0, vec![0.2]),
            ("b", 1, vec![0.9]),
            ("c", 0, vec![0.5]),
        ]);
        let table = score_all(&ParamVector::zeros(1), &features).unwrap();
        assert!(table.point_score.iter().all(|s| (s - 0.5).abs() < 1e-15));
        let stats = table.group_stats();
        assert_abs_diff_eq!(stats.control_mean, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.treated_mean, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn score_all_logistic_reference_value() {
        let features = scaled_features(vec![("a", 0, vec![0.5])]);
        let params = ParamVector { alpha: 0.0, beta: vec![1.0] };
        let table = score_all(&params, &features).unwrap();
        assert_abs_diff_eq!(table.point_score[0], 0.622459, epsilon = 1e-6);
    }

    #[test]
    fn score_all_matches_per_unit_propensity() {
        let features = scaled_features(vec![
            ("a", 0, vec![0.2, 0.8]),
            ("b", 1, vec![0.9, 0.4]),
            ("c", 0, vec![0.5, 0.1]),
            ("d", 1, vec![0.3, 0.3]),
        ]);
        let params = ParamVector { alpha: -0.4, beta: vec![1.2, -0.6] };
        let table = score_all(&params, &features).unwrap();
        for (row, score) in features.rows.iter().zip(&table.point_score) {
            assert_eq!(*score, propensity(&params, &row.covariates));
        }
    }

    #[test]
    fn score_all_rejects_unscaled_features() {
        let mut features = scaled_features(vec![("a", 0, vec![0.2]), ("b", 1, vec![0.5])]);
        features.scaled = false;
        assert!(matches!(
            score_all(&ParamVector::zeros(1), &features),
            Err(Error::Unscaled { .. })
        ));
    }

    #[test]
    fn scores_stay_strictly_inside_unit_interval() {
        let features = scaled_features(vec![("a", 0, vec![1.0]), ("b", 1, vec![0.0])]);
        let params = ParamVector { alpha: -40.0, beta: vec![80.0] };
        let table = score_all(&params, &features).unwrap();
        for s in &table.point_score {
            assert!(*s > 0.0 && *s < 1.0, "score {s}");
        }
    }

    #[test]
    fn monotone_in_positive_coefficient() {
        let params = ParamVector { alpha: 0.1, beta: vec![2.0] };
        let lo = propensity(&params, &[0.2]);
        let hi = propensity(&params, &[0.8]);
        assert!(hi > lo);
    }

    #[test]
    fn uncertainty_with_all_draws_is_a_permutation() {
        let rows = vec![vec![0.0, 1.0], vec![0.5, -1.0], vec![-0.5, 0.7]];
        let draws = draws_from(&rows);
        let features = scaled_features(vec![("a", 0, vec![0.4]), ("b", 1, vec![0.6])]);
        let scores = score_uncertainty(&draws, &features, 3, 9).unwrap();
        // every draw appears exactly once
        let mut seen: Vec<f64> = (0..3).map(|k| scores.get(k, 0)).collect();
        let mut expected: Vec<f64> = rows
            .iter()
            .map(|r| propensity(&ParamVector::from_slice(r), &[0.4]))
            .collect();
        seen.sort_by(f64::total_cmp);
        expected.sort_by(f64::total_cmp);
        assert_eq!(seen, expected);
    }

    #[test]
    fn uncertainty_single_draw_matches_score_all() {
        let rows = vec![vec![0.2, 0.5]];
        let draws = draws_from(&rows);
        let features = scaled_features(vec![("a", 0, vec![0.4]), ("b", 1, vec![0.6])]);
        let scores = score_uncertainty(&draws, &features, 1, 1).unwrap();
        let table =
            score_all(&ParamVector::from_slice(&rows[0]), &features).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(scores.get(0, i), table.point_score[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn uncertainty_same_seed_same_selection() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1, 0.0]).collect();
        let draws = draws_from(&rows);
        let features = scaled_features(vec![("a", 0, vec![0.4])]);
        let a = score_uncertainty(&draws, &features, 5, 7).unwrap();
        let b = score_uncertainty(&draws, &features, 5, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uncertainty_rejects_excessive_k() {
        let draws = draws_from(&[vec![0.0, 0.0]]);
        let features = scaled_features(vec![("a", 0, vec![0.4])]);
        assert!(matches!(
            score_uncertainty(&draws, &features, 2, 1),
            Err(Error::NotEnoughDraws { k: 2, available: 1 })
        ));
    }

    #[test]
    fn draw_mean_differs_from_point_score() {
        // Jensen: the sigmoid of the mean is not the mean of sigmoids
        let rows = vec![vec![-4.0, 0.0], vec![2.0, 0.0]];
        let draws = draws_from(&rows);
        let features = scaled_features(vec![("a", 0, vec![0.5]), ("b", 1, vec![0.5])]);
        let table = score_all(&point_estimate(&draws), &features).unwrap();
        let table = with_uncertainty(table, &draws, &features, 2, 3).unwrap();
        let point = table.point_score[0];
        let draw_mean = table.draw_mean_score.as_ref().unwrap()[0];
        assert_abs_diff_eq!(point, crate::model::sigmoid(-1.0), epsilon = 1e-12);
        assert!((draw_mean - point).abs() > 1e-3);
    }
}
