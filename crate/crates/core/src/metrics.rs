//! Word pass rate (WPR) and response pass rate (RPR).
//!
//! WPR pools words over all responses: passing words over counted words,
//! with excluded words in neither. RPR is the share of responses without a
//! single confused word. A response whose words were all excluded still
//! counts as a passing response; such responses are listed for audit.

use serde::{Deserialize, Serialize};

use crate::detector::{ConfusionReport, WordClass};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub word_pass: usize,
    pub word_total: usize,
    pub response_pass: usize,
    pub response_total: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            word_pass: self.word_pass + o.word_pass,
            word_total: self.word_total + o.word_total,
            response_pass: self.response_pass + o.response_pass,
            response_total: self.response_total + o.response_total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub wpr: f64,
    pub rpr: f64,
    pub counts: Counts,
    /// Indices of responses with no counted words.
    pub empty_responses: Vec<usize>,
}

fn counts_of(r: &ConfusionReport) -> Counts {
    let pass = r.count(WordClass::Pass);
    let confused = r.count(WordClass::Confused);
    Counts {
        word_pass: pass,
        word_total: pass + confused,
        response_pass: usize::from(confused == 0),
        response_total: 1,
    }
}

pub fn compute_metrics(reports: &[ConfusionReport]) -> Result<MetricResult> {
    compute_metrics_with(ExecMode::Sequential, reports)
}

pub fn compute_metrics_with(mode: ExecMode, reports: &[ConfusionReport]) -> Result<MetricResult> {
    if reports.is_empty() {
        return Err(Error::UndefinedMetric("no responses".into()));
    }
    let per = par::map(mode, reports, |_, r| counts_of(r));
    let counts = per.iter().copied().fold(Counts::default(), |a, b| a + b);
    if counts.word_total == 0 {
        return Err(Error::UndefinedMetric(
            "no countable words in any response".into(),
        ));
    }
    let empty_responses = per
        .iter()
        .enumerate()
        .filter(|(_, c)| c.word_total == 0)
        .map(|(i, _)| i)
        .collect();
    Ok(MetricResult {
        wpr: counts.word_pass as f64 / counts.word_total as f64,
        rpr: counts.response_pass as f64 / counts.response_total as f64,
        counts,
        empty_responses,
    })
}
