//! Four-stage break detection and estimation.
//!
//! 1. Breaks in each first-stage equation (least squares + sequential F).
//! 2. Sequential sup-Wald breaks in the structural equation within each
//!    stable first-stage segment.
//! 3. Common-change Wald tests at first-stage breaks.
//! 4. TSGMM around every structural break inside a stable first-stage
//!    segment, full-segment GMM elsewhere.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::changepoint::{
    bp_critical_values, bp_ols_breaks_with, common_change_wald, sequential_sf_steps, sup_wald_critical_values,
};
use crate::covariance::HacConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{gmm_full, ols, tsgmm, EstimateResult};
use crate::serde_mat;

/// Bonferroni fixed-point iterations before the last level is accepted.
const BONFERRONI_ITERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct PipelineConfig {
    /// Trimming of the structural-equation tests.
    pub trimming: f64,
    /// Trimming of the first-stage multiple-break search.
    pub first_stage_trimming: f64,
    pub level: f64,
    /// Maximum number of breaks per first-stage equation.
    pub max_breaks: usize,
    pub hac: HacConfig,
    pub bonferroni: bool,
    /// First-stage breaks closer than this are merged into the earlier one;
    /// `None` uses `⌈εT⌉` with the first-stage trimming.
    pub merge_radius: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            trimming: 0.15,
            first_stage_trimming: 0.2,
            level: 0.05,
            max_breaks: 3,
            hac: HacConfig::default(),
            bonferroni: false,
            merge_radius: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("trimming", self.trimming), ("firstStageTrimming", self.first_stage_trimming)] {
            if !(e > 0.0 && e < 0.5) {
                return Err(Error::InvalidConfig(format!("{name} {e} outside (0, 0.5)")));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!("level {} outside (0, 1)", self.level)));
        }
        if self.max_breaks == 0 {
            return Err(Error::InvalidConfig("maxBreaks must be at least 1".into()));
        }
        Ok(())
    }
}

/// One test performed by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionEntry {
    pub stage: u8,
    pub test: String,
    /// 0-based half-open row range.
    pub segment: (usize, usize),
    pub statistic: Option<f64>,
    pub critical_value: Option<f64>,
    pub p_value: Option<f64>,
    pub level: f64,
    pub rejected: bool,
    /// 1-based break tested or placed.
    pub break_idx: Option<usize>,
    pub note: Option<String>,
}

impl DecisionEntry {
    fn counts_as_test(&self) -> bool {
        self.statistic.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FinalEstimate {
    /// Stable first-stage segment containing the window.
    pub segment: (usize, usize),
    /// Rows used by the estimator.
    pub window: (usize, usize),
    /// Absolute structural break inside the window, for TSGMM.
    pub break_idx: Option<usize>,
    pub estimator: String,
    pub result: EstimateResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineReport {
    /// B_S1: breaks in the first stage.
    pub first_stage_breaks: Vec<usize>,
    /// B_S2,NC: structural breaks found inside stable first-stage segments.
    pub second_stage_breaks: Vec<usize>,
    /// B_S2,C: first-stage breaks at which the structural equation also changes.
    pub common_breaks: Vec<usize>,
    /// B_S2 = B_S2,NC ∪ B_S2,C.
    pub structural_breaks: Vec<usize>,
    /// OLS first stage per stable first-stage segment.
    #[serde(with = "serde_mat::matrices")]
    pub first_stage_pi: Vec<DMatrix<f64>>,
    pub final_estimates: Vec<FinalEstimate>,
    pub decisions_log: Vec<DecisionEntry>,
    /// Level applied to each test (after any Bonferroni division).
    pub test_level: f64,
    pub n_tests: usize,
    pub notes: Vec<String>,
}

fn ranges_of(breaks: &[usize], t: usize) -> Vec<Range<usize>> {
    let mut b = vec![0];
    b.extend(breaks.iter().copied());
    b.push(t);
    b.windows(2).map(|w| w[0]..w[1]).collect()
}

/// Sorted union with breaks closer than `radius` to the previous kept one dropped.
pub fn merge_breaks(all: impl IntoIterator<Item = usize>, radius: usize) -> Vec<usize> {
    let sorted: BTreeSet<usize> = all.into_iter().collect();
    let mut out: Vec<usize> = Vec::new();
    for b in sorted {
        if out.last().is_none_or(|&l| b - l >= radius) {
            out.push(b);
        }
    }
    out
}

struct Detection {
    b_s1: Vec<usize>,
    b_s2nc: Vec<usize>,
    b_s2c: Vec<usize>,
    log: Vec<DecisionEntry>,
    notes: Vec<String>,
}

fn stage1(data: &Dataset, cfg: &PipelineConfig, level: f64, log: &mut Vec<DecisionEntry>) -> Result<Vec<usize>> {
    let t = data.t();
    let radius = cfg
        .merge_radius
        .unwrap_or_else(|| (cfg.first_stage_trimming * t as f64).ceil() as usize);
    let tables = bp_critical_values(data.q(), cfg.first_stage_trimming, cfg.max_breaks)?;
    let mut all = Vec::new();
    for j in 0..data.p2() {
        let name = &data.names().x[j];
        let xj = data.x().column(j).into_owned();
        match bp_ols_breaks_with(&xj, data.z(), cfg.max_breaks, cfg.first_stage_trimming, level, &tables) {
            Ok(r) => {
                for (l, (&f, &cv)) in r.f_stats.iter().zip(&r.critical_values).enumerate() {
                    log.push(DecisionEntry {
                        stage: 1,
                        test: format!("F({}|{}) first stage {name}", l + 1, l),
                        segment: (0, t),
                        statistic: Some(f),
                        critical_value: Some(cv),
                        p_value: None,
                        level,
                        rejected: f > cv,
                        break_idx: None,
                        note: (f > cv && l + 1 == r.n_breaks).then(|| format!("breaks {:?}", r.breaks)),
                    });
                }
                all.extend(r.breaks);
            }
            Err(e) => log.push(DecisionEntry {
                stage: 1,
                test: format!("first-stage breaks {name}"),
                segment: (0, t),
                statistic: None,
                critical_value: None,
                p_value: None,
                level,
                rejected: false,
                break_idx: None,
                note: Some(format!("not tested, treated as stable: {e}")),
            }),
        }
    }
    Ok(merge_breaks(all, radius))
}

fn stage2(
    data: &Dataset,
    cfg: &PipelineConfig,
    level: f64,
    b_s1: &[usize],
    log: &mut Vec<DecisionEntry>,
    notes: &mut Vec<String>,
) -> Result<Vec<usize>> {
    let table = sup_wald_critical_values(data.p(), cfg.trimming)?;
    let mut found = Vec::new();
    for r in ranges_of(b_s1, data.t()) {
        let (breaks, steps) = sequential_sf_steps(data, r.clone(), cfg.trimming, level, &table, &cfg.hac)?;
        let multi = breaks.len() > 1;
        for s in steps {
            log.push(DecisionEntry {
                stage: 2,
                test: "sup-Wald structural equation".into(),
                segment: s.segment,
                statistic: s.skipped.is_none().then_some(s.statistic),
                critical_value: Some(s.critical_value),
                p_value: None,
                level,
                rejected: s.rejected,
                break_idx: s.break_idx,
                note: match (&s.skipped, multi) {
                    (Some(why), _) => Some(format!("segment not tested: {why}")),
                    (None, true) => Some("multiple breaks by sequential testing (conjectured validity)".into()),
                    _ => None,
                },
            });
        }
        if multi {
            notes.push(format!(
                "segment [{}, {}): {} structural breaks from sequential sup-Wald tests, whose validity for \
                 multiple breaks is conjectured",
                r.start,
                r.end,
                breaks.len()
            ));
        }
        found.extend(breaks);
    }
    found.sort_unstable();
    Ok(found)
}

fn stage3(
    data: &Dataset,
    cfg: &PipelineConfig,
    level: f64,
    b_s1: &[usize],
    b_s2nc: &[usize],
    log: &mut Vec<DecisionEntry>,
) -> Vec<usize> {
    let context: BTreeSet<usize> = b_s1.iter().chain(b_s2nc).copied().collect();
    let mut common = Vec::new();
    for &b in b_s1 {
        let lo = context.range(..b).next_back().copied().unwrap_or(0);
        let hi = context.range(b + 1..).next().copied().unwrap_or(data.t());
        let mut entry = DecisionEntry {
            stage: 3,
            test: "common-change Wald".into(),
            segment: (lo, hi),
            statistic: None,
            critical_value: None,
            p_value: None,
            level,
            rejected: false,
            break_idx: Some(b),
            note: None,
        };
        if b_s2nc.contains(&b) {
            entry.note = Some("already a structural break; not tested".into());
            log.push(entry);
            continue;
        }
        match data.slice(lo..hi).and_then(|sub| common_change_wald(&sub, b - lo, &cfg.hac)) {
            Ok(rep) => {
                entry.statistic = Some(rep.statistic);
                entry.p_value = rep.p_value;
                entry.rejected = rep.rejects(level);
                if entry.rejected {
                    common.push(b);
                }
            }
            Err(e) => entry.note = Some(format!("not tested, treated as no common change: {e}")),
        }
        log.push(entry);
    }
    common
}

fn detect(data: &Dataset, cfg: &PipelineConfig, level: f64) -> Result<Detection> {
    let mut log = Vec::new();
    let mut notes = Vec::new();
    let b_s1 = stage1(data, cfg, level, &mut log)?;
    let b_s2nc = stage2(data, cfg, level, &b_s1, &mut log, &mut notes)?;
    let b_s2c = stage3(data, cfg, level, &b_s1, &b_s2nc, &mut log);
    Ok(Detection { b_s1, b_s2nc, b_s2c, log, notes })
}

fn estimate(data: &Dataset, cfg: &PipelineConfig, det: &Detection, log: &mut Vec<DecisionEntry>) -> Result<Vec<FinalEstimate>> {
    let mut out = Vec::new();
    for seg in ranges_of(&det.b_s1, data.t()) {
        let inner: Vec<usize> = det.b_s2nc.iter().copied().filter(|&b| b > seg.start && b < seg.end).collect();
        let mut note = |window: (usize, usize), est: &str, b: Option<usize>| {
            log.push(DecisionEntry {
                stage: 4,
                test: "estimator choice".into(),
                segment: window,
                statistic: None,
                critical_value: None,
                p_value: None,
                level: 0.0,
                rejected: b.is_some(),
                break_idx: b,
                note: Some(est.to_string()),
            })
        };
        if inner.is_empty() {
            let sub = data.slice(seg.clone())?;
            note((seg.start, seg.end), "GMM", None);
            out.push(FinalEstimate {
                segment: (seg.start, seg.end),
                window: (seg.start, seg.end),
                break_idx: None,
                estimator: "GMM".into(),
                result: gmm_full(&sub, &cfg.hac)?,
            });
            continue;
        }
        for (k, &b) in inner.iter().enumerate() {
            let lo = if k == 0 { seg.start } else { inner[k - 1] };
            let hi = inner.get(k + 1).copied().unwrap_or(seg.end);
            let sub = data.slice(lo..hi)?;
            note((lo, hi), "TSGMM", Some(b));
            out.push(FinalEstimate {
                segment: (seg.start, seg.end),
                window: (lo, hi),
                break_idx: Some(b),
                estimator: "TSGMM".into(),
                result: tsgmm(&sub, b - lo, &cfg.hac)?,
            });
        }
    }
    Ok(out)
}

fn first_stage_pi(data: &Dataset, b_s1: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    ranges_of(b_s1, data.t())
        .into_iter()
        .map(|r| {
            let z = data.z().rows(r.start, r.len());
            let x = data.x().rows(r.start, r.len());
            ols(z, x, "segment Z'Z")
        })
        .collect()
}

/// Runs the four stages on `data`.
///
/// With `bonferroni`, every test uses `level / n` where `n` is the number of
/// tests actually performed; `n` is found by rerunning detection until the
/// count is stable (at most five passes, keeping the last).
pub fn run_four_stage(data: &Dataset, cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let mut level = cfg.level;
    let mut det = detect(data, cfg, level)?;
    let mut notes = Vec::new();
    if cfg.bonferroni {
        let mut n = 1;
        for _ in 0..BONFERRONI_ITERS {
            let realized = det.log.iter().filter(|e| e.counts_as_test()).count().max(1);
            if realized == n {
                break;
            }
            n = realized;
            level = cfg.level / n as f64;
            det = detect(data, cfg, level)?;
        }
        notes.push(format!("Bonferroni: level {} divided by {n} tests", cfg.level));
    }
    let mut log = std::mem::take(&mut det.log);
    let final_estimates = estimate(data, cfg, &det, &mut log)?;
    let n_tests = log.iter().filter(|e| e.counts_as_test()).count();
    notes.extend(det.notes.iter().cloned());
    let structural: BTreeSet<usize> = det.b_s2nc.iter().chain(&det.b_s2c).copied().collect();
    Ok(PipelineReport {
        first_stage_pi: first_stage_pi(data, &det.b_s1)?,
        first_stage_breaks: det.b_s1,
        second_stage_breaks: det.b_s2nc,
        common_breaks: det.b_s2c,
        structural_breaks: structural.into_iter().collect(),
        final_estimates,
        decisions_log: log,
        test_level: level,
        n_tests,
        notes,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

impl PipelineReport {
    /// Plain-text summary.
    pub fn to_text(&self, data: &Dataset) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "First-stage breaks:            {:?}", self.first_stage_breaks);
        let _ = writeln!(s, "Structural breaks (not common): {:?}", self.second_stage_breaks);
        let _ = writeln!(s, "Common breaks:                 {:?}", self.common_breaks);
        let _ = writeln!(s, "Test level: {} over {} tests", self.test_level, self.n_tests);
        for n in &self.notes {
            let _ = writeln!(s, "Note: {n}");
        }
        let _ = writeln!(s, "\nDecisions:");
        for e in &self.decisions_log {
            let _ = writeln!(
                s,
                "  [{}] {} on [{}, {}) stat {} cv {} p {} -> {}{}{}",
                e.stage,
                e.test,
                e.segment.0,
                e.segment.1,
                fmt_opt(e.statistic),
                fmt_opt(e.critical_value),
                fmt_opt(e.p_value),
                if e.rejected { "reject" } else { "no reject" },
                e.break_idx.map(|b| format!(" at {b}")).unwrap_or_default(),
                e.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default(),
            );
        }
        let labels = data.names().coefficient_labels();
        let _ = writeln!(s, "\nEstimates:");
        for f in &self.final_estimates {
            let _ = writeln!(
                s,
                "  {} on [{}, {}){}",
                f.estimator,
                f.window.0,
                f.window.1,
                f.break_idx.map(|b| format!(", break at {b}")).unwrap_or_default()
            );
            for (i, th) in f.result.params.theta.iter().enumerate() {
                let se = f.result.regime_std_errors(i);
                for (j, l) in labels.iter().enumerate() {
                    let _ = writeln!(s, "    regime {} {:<12} {:>12.6} ({:.6})", i + 1, l, th[j], se[j]);
                }
            }
        }
        s
    }
}
