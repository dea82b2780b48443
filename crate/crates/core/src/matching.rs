//! Greedy matching of treated to control units on propensity score
//! distance, without replacement: caliper matching (nearest within a fixed
//! width, treated may stay unmatched) and 1:1 nearest neighbour (every
//! treated gets a control). All tie-breaking is lexicographic on unit id,
//! so results are deterministic without any RNG.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreTable;
use crate::stats::{mean, sample_sd};

/// |p_control − p_treated| (Eq. of the propensity distance).
pub fn score_distance(p_control: f64, p_treated: f64) -> f64 {
    (p_control - p_treated).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MatchOrder {
    /// Hardest-to-match first: treated by descending score, ties by id.
    #[default]
    DescendingScore,
    InputOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum MatchMethod {
    Caliper { width: f64 },
    Nn1,
}

/// Which per-unit score the matcher consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    /// Score at the posterior-mean parameters (the default).
    #[default]
    Point,
    /// Mean of per-draw scores.
    DrawMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchConfig {
    pub method: MatchMethod,
    #[serde(default)]
    pub order: MatchOrder,
    #[serde(default)]
    pub score_source: ScoreSource,
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if let MatchMethod::Caliper { width } = self.method {
            if width <= 0.0 {
                return Err(Error::InvalidConfig("caliper width must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            method: MatchMethod::Caliper { width: 0.05 },
            order: MatchOrder::default(),
            score_source: ScoreSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPair {
    pub treated_id: String,
    pub control_id: String,
    pub delta_p: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MatchedPairs {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_treated: Vec<String>,
}

impl MatchedPairs {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn control_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.control_id.as_str())
    }

    pub fn treated_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.treated_id.as_str())
    }

    /// CSV schema: `treated_id,control_id,delta_p`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["treated_id", "control_id", "delta_p"])?;
        for p in &self.pairs {
            w.write_record([&p.treated_id, &p.control_id, &format!("{}", p.delta_p)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = csv_reader.headers()?.clone();
        if headers.iter().take(3).collect::<Vec<_>>() != vec!["treated_id", "control_id", "delta_p"]
        {
            return Err(Error::MalformedFeatures(
                "expected header treated_id,control_id,delta_p".into(),
            ));
        }
        let mut pairs = Vec::new();
        for row in csv_reader.records() {
            let row = row?;
            pairs.push(MatchedPair {
                treated_id: row[0].to_string(),
                control_id: row[1].to_string(),
                delta_p: row[2]
                    .parse()
                    .map_err(|_| Error::MalformedFeatures(format!("bad delta_p `{}`", &row[2])))?,
            });
        }
        Ok(Self { pairs, unmatched_treated: vec![] })
    }

    pub fn write_unmatched_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["treated_id"])?;
        for id in &self.unmatched_treated {
            w.write_record([id])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Candidate<'a> {
    id: &'a str,
    score: f64,
    used: bool,
}

fn split_groups<'a>(
    scores: &'a ScoreTable,
    source: ScoreSource,
) -> Result<(Vec<Candidate<'a>>, Vec<Candidate<'a>>)> {
    let values: &[f64] = match source {
        ScoreSource::Point => &scores.point_score,
        ScoreSource::DrawMean => scores
            .draw_mean_score
            .as_deref()
            .ok_or(Error::InvalidConfig("draw-mean scores not computed".into()))?,
    };
    let mut controls = Vec::new();
    let mut treated = Vec::new();
    for i in 0..scores.n_units() {
        let c = Candidate { id: &scores.unit_ids[i], score: values[i], used: false };
        if scores.groups[i] == 1 {
            treated.push(c);
        } else {
            controls.push(c);
        }
    }
    Ok((controls, treated))
}

fn order_treated(treated: &mut [Candidate], order: MatchOrder) {
    if order == MatchOrder::DescendingScore {
        treated.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).expect("NaN score").then_with(|| a.id.cmp(b.id))
        });
    }
}

/// Nearest unmatched control; exact distance ties go to the higher-scored
/// control (under descending treated order the remaining treated all score
/// lower, so the lower control is the one worth saving), then to the
/// lexicographically smaller id. Deterministic, no RNG.
fn nearest_free(controls: &[Candidate], score: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, c) in controls.iter().enumerate() {
        if c.used {
            continue;
        }
        let d = score_distance(c.score, score);
        best = match best {
            None => Some((idx, d)),
            Some((bidx, bd)) => {
                let better = d < bd
                    || (d == bd && c.score > controls[bidx].score)
                    || (d == bd && c.score == controls[bidx].score && c.id < controls[bidx].id);
                if better {
                    Some((idx, d))
                } else {
                    Some((bidx, bd))
                }
            }
        };
    }
    best
}

fn greedy(
    scores: &ScoreTable,
    width: Option<f64>,
    order: MatchOrder,
    source: ScoreSource,
) -> Result<MatchedPairs> {
    let (mut controls, mut treated) = split_groups(scores, source)?;
    order_treated(&mut treated, order);
    let mut out = MatchedPairs::default();
    for t in &treated {
        match nearest_free(&controls, t.score) {
            Some((idx, d)) if width.is_none_or(|w| d <= w) => {
                controls[idx].used = true;
                out.pairs.push(MatchedPair {
                    treated_id: t.id.to_string(),
                    control_id: controls[idx].id.to_string(),
                    delta_p: d,
                });
            }
            _ => out.unmatched_treated.push(t.id.to_string()),
        }
    }
    Ok(out)
}

/// Caliper matching: each treated unit takes the nearest still-unmatched
/// control within `width`, or stays unmatched.
pub fn caliper_match(scores: &ScoreTable, width: f64) -> MatchedPairs {
    assert!(width > 0.0, "caliper width must be positive");
    greedy(scores, Some(width), MatchOrder::default(), ScoreSource::Point)
        .expect("point scores always present")
}

/// 1:1 nearest-neighbour matching: every treated unit takes the nearest
/// still-unmatched control, whatever the distance. Needs at least as many
/// controls as treated.
pub fn nn1_match(scores: &ScoreTable) -> Result<MatchedPairs> {
    let n_treated = scores.groups.iter().filter(|g| **g == 1).count();
    let n_control = scores.n_units() - n_treated;
    if n_control < n_treated {
        return Err(Error::MatchInfeasible { n_control, n_treated });
    }
    greedy(scores, None, MatchOrder::default(), ScoreSource::Point)
}

/// Dispatcher honouring the full configuration.
pub fn match_units(scores: &ScoreTable, config: &MatchConfig) -> Result<MatchedPairs> {
    config.validate()?;
    match config.method {
        MatchMethod::Caliper { width } => greedy(scores, Some(width), config.order, config.score_source),
        MatchMethod::Nn1 => {
            let n_treated = scores.groups.iter().filter(|g| **g == 1).count();
            let n_control = scores.n_units() - n_treated;
            if n_control < n_treated {
                return Err(Error::MatchInfeasible { n_control, n_treated });
            }
            greedy(scores, None, config.order, config.score_source)
        }
    }
}

/// Summary of a matching run. Means are None when no pairs exist.
#[derive(Debug, Clone, Serialize)]
pub struct MatchSummary {
    pub n_pairs: usize,
    pub n_treated: usize,
    pub n_unmatched_treated: usize,
    /// pairs / treated units.
    pub match_rate: f64,
    pub mean_delta_p: Option<f64>,
    pub sd_delta_p: Option<f64>,
    pub matched_control_mean: Option<f64>,
    pub matched_control_sd: Option<f64>,
    pub matched_treated_mean: Option<f64>,
    pub matched_treated_sd: Option<f64>,
}

pub fn match_summary(pairs: &MatchedPairs, scores: &ScoreTable) -> MatchSummary {
    let n_treated = scores.groups.iter().filter(|g| **g == 1).count();
    let n_pairs = pairs.n_pairs();
    let score_of = |id: &str| {
        let idx = scores.unit_ids.iter().position(|u| u == id).expect("id in score table");
        scores.point_score[idx]
    };
    let (control_scores, treated_scores): (Vec<f64>, Vec<f64>) = (
        pairs.control_ids().map(score_of).collect(),
        pairs.treated_ids().map(score_of).collect(),
    );
    let deltas: Vec<f64> = pairs.pairs.iter().map(|p| p.delta_p).collect();
    let stat = |xs: &[f64], f: fn(&[f64]) -> f64| if xs.is_empty() { None } else { Some(f(xs)) };
    MatchSummary {
        n_pairs,
        n_treated,
        n_unmatched_treated: pairs.unmatched_treated.len(),
        match_rate: if n_treated == 0 { 0.0 } else { n_pairs as f64 / n_treated as f64 },
        mean_delta_p: stat(&deltas, mean),
        sd_delta_p: stat(&deltas, sample_sd),
        matched_control_mean: stat(&control_scores, mean),
        matched_control_sd: stat(&control_scores, sample_sd),
        matched_treated_mean: stat(&treated_scores, mean),
        matched_treated_sd: stat(&treated_scores, sample_sd),
    }
}
