//! Monte Carlo designs for the break estimators and tests, with the
//! bias / std / RMSE / coverage summaries used to compare them.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::changepoint::{estimate_break_2sls, sup_wald_critical_values, sup_wald_scan, CriticalValueTable};
use crate::covariance::HacConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate_all, gmm_full, tsls_full, EstimateResult, EstimatorKind};

/// Fraction of failed replications above which a report is flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.01;

const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrScheme {
    Hom,
    Het1,
    Het2,
}

impl ErrScheme {
    pub fn label(&self) -> &'static str {
        match self {
            ErrScheme::Hom => "HOM",
            ErrScheme::Het1 => "HET1",
            ErrScheme::Het2 => "HET2",
        }
    }

    pub fn all() -> [ErrScheme; 3] {
        [ErrScheme::Hom, ErrScheme::Het1, ErrScheme::Het2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    KnownBreak,
    EstimatedBreak,
    NoBreakEstimated,
    PreTest,
}

impl Scenario {
    pub fn label(&self) -> &'static str {
        match self {
            Scenario::KnownBreak => "known break",
            Scenario::EstimatedBreak => "estimated break",
            Scenario::NoBreakEstimated => "estimated break, no break in DGP",
            Scenario::PreTest => "pre-test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct McConfig {
    pub t: usize,
    pub n_iv: usize,
    pub rho: f64,
    /// Break fraction; `None` gives a stable structural equation.
    pub lambda0: Option<f64>,
    /// Common shift `θ_2 - θ_1` of every structural coefficient.
    pub change_size: f64,
    pub err_scheme: ErrScheme,
    pub n_reps: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub trimming: f64,
    pub level: f64,
    pub hac: HacConfig,
    /// First-stage break fraction (none by default).
    pub pi_break: Option<f64>,
    /// Common shift of every first-stage coefficient at `pi_break`.
    pub pi_shift: f64,
    /// Sets `u = v = 0`; used to check the degenerate case.
    pub zero_noise: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            t: 400,
            n_iv: 1,
            rho: -0.5,
            lambda0: Some(0.4),
            change_size: 1.0,
            err_scheme: ErrScheme::Hom,
            n_reps: 1000,
            seed: 7,
            scenario: Scenario::KnownBreak,
            trimming: 0.15,
            level: 0.05,
            hac: HacConfig::default(),
            pi_break: None,
            pi_shift: 0.0,
            zero_noise: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_iv == 0 {
            return bad("nIV must be at least 1".into());
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho {} outside (-1, 1)", self.rho));
        }
        for (name, l) in [("lambda0", self.lambda0), ("piBreak", self.pi_break)] {
            if let Some(l) = l {
                if !(l > 0.0 && l < 1.0) {
                    return bad(format!("{name} {l} outside (0, 1)"));
                }
            }
        }
        if self.n_reps == 0 {
            return bad("nReps must be positive".into());
        }
        if !(self.trimming > 0.0 && self.trimming < 0.5) {
            return bad(format!("trimming {} outside (0, 0.5)", self.trimming));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} outside (0, 1)", self.level));
        }
        if !self.change_size.is_finite() || !self.pi_shift.is_finite() {
            return bad("non-finite shift".into());
        }
        if self.scenario == Scenario::KnownBreak && self.true_break().is_none() {
            return bad("known-break scenario needs lambda0".into());
        }
        let need = 2 * (self.n_iv + 2) + 2;
        if self.t < need {
            return bad(format!("T = {} below the minimum {need}", self.t));
        }
        Ok(())
    }

    /// GARCH burn-in length: `T/4` (100 at `T = 400`, 200 at `T = 800`).
    pub fn burn_in(&self) -> usize {
        match self.err_scheme {
            ErrScheme::Het2 => self.t / 4,
            _ => 0,
        }
    }

    /// Planted structural break `⌊Tλ⁰⌋`, absent for stable designs.
    pub fn true_break(&self) -> Option<usize> {
        if self.scenario == Scenario::NoBreakEstimated {
            return None;
        }
        self.lambda0.map(|l| (l * self.t as f64).floor() as usize)
    }

    fn pi_break_idx(&self) -> Option<usize> {
        self.pi_break.map(|l| (l * self.t as f64).floor() as usize)
    }

    /// `(θ_1, θ_2)` as `(θ_z, θ_x)` pairs.
    pub fn true_thetas(&self) -> (DVector<f64>, DVector<f64>) {
        let th1 = DVector::zeros(2);
        let shift = if self.true_break().is_some() { self.change_size } else { 0.0 };
        let th2 = th1.add_scalar(shift);
        (th1, th2)
    }
}

/// Simulated dataset for replication `rep`.
///
/// `Z = [1, z]` with `z` i.i.d. standard normal, `X = ZΠ + v`,
/// `y = θ_z + Xθ_x + σ_t u`, `(u, v)` standard bivariate normal with
/// correlation `ρ`, `Π = 1` (shifted by `pi_shift` after `pi_break`).
pub fn generate_dgp(cfg: &McConfig, rep: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep);
    let (t, n_iv) = (cfg.t, cfg.n_iv);
    let s = (1.0 - cfg.rho * cfg.rho).sqrt();
    let noise = if cfg.zero_noise { 0.0 } else { 1.0 };

    let draw_uv = |rng: &mut ChaCha8Rng| {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        (noise * e1, noise * (cfg.rho * e1 + s * e2))
    };

    // GARCH state (ε_{t-1}, σ²_{t-1}), started at (0, 1) and run through the burn-in.
    let (mut eps_prev, mut s2_prev) = (0.0f64, 1.0f64);
    for _ in 0..cfg.burn_in() {
        let (u, _) = draw_uv(&mut rng);
        let s2 = 0.1 + 0.6 * eps_prev * eps_prev + 0.3 * s2_prev;
        eps_prev = s2.sqrt() * u;
        s2_prev = s2;
    }

    let brk = cfg.true_break().unwrap_or(t);
    let pbrk = cfg.pi_break_idx().unwrap_or(t);
    let (th1, th2) = cfg.true_thetas();
    let mut ziv = DMatrix::<f64>::zeros(t, n_iv);
    let mut x = DMatrix::<f64>::zeros(t, 1);
    let mut y = DVector::zeros(t);
    for i in 0..t {
        for j in 0..n_iv {
            ziv[(i, j)] = rng.sample(StandardNormal);
        }
        let (u, v) = draw_uv(&mut rng);
        let sigma = match cfg.err_scheme {
            ErrScheme::Hom => 1.0,
            ErrScheme::Het1 => ((1.0 + ziv[(i, 0)] * ziv[(i, 0)]) / 2.0).sqrt(),
            ErrScheme::Het2 => {
                let s2 = 0.1 + 0.6 * eps_prev * eps_prev + 0.3 * s2_prev;
                eps_prev = s2.sqrt() * u;
                s2_prev = s2;
                s2.sqrt()
            }
        };
        let pi = if i < pbrk { 1.0 } else { 1.0 + cfg.pi_shift };
        let zpi = pi * (1.0 + (0..n_iv).map(|j| ziv[(i, j)]).sum::<f64>());
        x[(i, 0)] = zpi + v;
        let th = if i < brk { &th1 } else { &th2 };
        y[i] = th[0] + x[(i, 0)] * th[1] + sigma * u;
    }
    Dataset::from_parts(y, x, DMatrix::from_element(t, 1, 1.0), ziv)
}

/// Summary of one estimator's endogenous coefficient in one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricRow {
    pub estimator: String,
    pub regime: usize,
    pub bias: f64,
    pub mc_std: f64,
    pub asy_std: f64,
    /// `sqrt(bias² + asyStd²)`.
    pub rmse: f64,
    pub ci_length: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct McReport {
    pub config: McConfig,
    pub rows: Vec<MetricRow>,
    pub mean_estimated_break: Option<f64>,
    /// Sup-Wald rejection frequency (pre-test scenario).
    pub detection_prob: Option<f64>,
    pub n_ok: usize,
    pub n_failures: usize,
    /// More than 1% of replications failed.
    pub flagged: bool,
    pub notes: Vec<String>,
}

impl McReport {
    pub fn row(&self, estimator: EstimatorKind, regime: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == estimator.label() && r.regime == regime)
    }
}

struct RepOutcome {
    /// `[estimator][regime] -> (θ̂_x, se)`.
    est: [[(f64, f64); 2]; 3],
    break_idx: Option<usize>,
    rejected: Option<bool>,
}

fn endogenous(r: &EstimateResult, regime: usize, p1: usize) -> (f64, f64) {
    let i = regime.min(r.params.theta.len() - 1);
    (r.params.theta[i][p1], r.regime_std_errors(i)[p1])
}

fn from_results(res: &[EstimateResult; 3], p1: usize) -> [[(f64, f64); 2]; 3] {
    std::array::from_fn(|e| [endogenous(&res[e], 0, p1), endogenous(&res[e], 1, p1)])
}

fn sup_wald_table(cfg: &McConfig) -> Result<CriticalValueTable> {
    // p = 2: intercept and endogenous slope.
    sup_wald_critical_values(2, cfg.trimming)
}

fn replicate(cfg: &McConfig, rep: u64, table: Option<&CriticalValueTable>) -> Result<RepOutcome> {
    let data = generate_dgp(cfg, rep)?;
    let p1 = data.p1();
    match cfg.scenario {
        Scenario::KnownBreak => {
            let brk = cfg.true_break().expect("validated");
            let res = estimate_all(&data, brk, &cfg.hac)?;
            Ok(RepOutcome { est: from_results(&res, p1), break_idx: Some(brk), rejected: None })
        }
        Scenario::EstimatedBreak | Scenario::NoBreakEstimated => {
            let brk = estimate_break_2sls(&data, cfg.trimming)?.break_idx;
            let res = estimate_all(&data, brk, &cfg.hac)?;
            Ok(RepOutcome { est: from_results(&res, p1), break_idx: Some(brk), rejected: None })
        }
        Scenario::PreTest => {
            let table = table.expect("pre-test table");
            let scan = sup_wald_scan(&data, cfg.trimming, &cfg.hac)?;
            if scan.sup_stat > table.critical_value(cfg.level) {
                let brk = estimate_break_2sls(&data, cfg.trimming)?.break_idx;
                let res = estimate_all(&data, brk, &cfg.hac)?;
                Ok(RepOutcome { est: from_results(&res, p1), break_idx: Some(brk), rejected: Some(true) })
            } else {
                let g = gmm_full(&data, &cfg.hac)?;
                let s = tsls_full(&data, &cfg.hac)?;
                let res = [g.clone(), s, g];
                Ok(RepOutcome { est: from_results(&res, p1), break_idx: None, rejected: Some(false) })
            }
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn metric_row(estimator: &str, regime: usize, truth: f64, draws: &[(f64, f64)]) -> MetricRow {
    let est: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let se: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let bias = mean(&est) - truth;
    let asy_std = mean(&se);
    // A zero standard error covers only an exact fit, up to rounding.
    let slack = 1e-9 * (1.0 + truth.abs());
    let covered = draws.iter().filter(|(e, s)| (e - truth).abs() <= Z_975 * s + slack).count();
    MetricRow {
        estimator: estimator.to_string(),
        regime,
        bias,
        mc_std: sample_std(&est),
        asy_std,
        rmse: (bias * bias + asy_std * asy_std).sqrt(),
        ci_length: 2.0 * Z_975 * asy_std,
        coverage: covered as f64 / draws.len() as f64,
    }
}

fn run_reps(cfg: &McConfig, table: Option<&CriticalValueTable>) -> Vec<Result<RepOutcome>> {
    (0..cfg.n_reps as u64).into_par_iter().map(|rep| replicate(cfg, rep, table)).collect()
}

fn failure_summary(n_ok: usize, n_fail: usize) -> (bool, Option<String>) {
    let total = n_ok + n_fail;
    let flagged = n_fail as f64 > FAILURE_FLAG_RATE * total as f64;
    let note = (n_fail > 0).then(|| format!("{n_fail} of {total} replications failed and were excluded"));
    (flagged, note)
}

fn scheme_note(cfg: &McConfig) -> Option<String> {
    (cfg.err_scheme == ErrScheme::Het1)
        .then(|| "HET1 uses sigma_t^2 = (1 + z_t^2)/2 with z_t the first external instrument".to_string())
}

/// Runs every replication of `cfg` and aggregates the endogenous-coefficient metrics.
pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let table = match cfg.scenario {
        Scenario::PreTest => Some(sup_wald_table(cfg)?),
        _ => None,
    };
    let outcomes = run_reps(cfg, table.as_ref());
    let mut ok = Vec::new();
    let mut n_failures = 0;
    for o in outcomes {
        match o {
            Ok(o) => ok.push(o),
            Err(e) if e.is_numerical() || matches!(e, Error::NoCandidates(_) | Error::SegmentTooShort { .. }) => {
                n_failures += 1
            }
            Err(e) => return Err(e),
        }
    }
    if ok.is_empty() {
        return Err(Error::InvalidConfig("every replication failed".into()));
    }
    let (th1, th2) = cfg.true_thetas();
    let truths = [th1[1], th2[1]];
    let kinds = [EstimatorKind::SplitGmm, EstimatorKind::Ts2sls, EstimatorKind::Tsgmm];
    let mut rows = Vec::new();
    for (e, kind) in kinds.iter().enumerate() {
        for (regime, &truth) in truths.iter().enumerate() {
            let draws: Vec<(f64, f64)> = ok.iter().map(|o| o.est[e][regime]).collect();
            rows.push(metric_row(kind.label(), regime + 1, truth, &draws));
        }
    }
    let breaks: Vec<f64> = ok.iter().filter_map(|o| o.break_idx.map(|b| b as f64)).collect();
    let mean_estimated_break = match cfg.scenario {
        Scenario::KnownBreak => None,
        _ if breaks.is_empty() => None,
        _ => Some(mean(&breaks)),
    };
    let rejections: Vec<bool> = ok.iter().filter_map(|o| o.rejected).collect();
    let detection_prob =
        (!rejections.is_empty()).then(|| rejections.iter().filter(|&&r| r).count() as f64 / rejections.len() as f64);
    let (flagged, fail_note) = failure_summary(ok.len(), n_failures);
    let mut notes: Vec<String> = fail_note.into_iter().chain(scheme_note(cfg)).collect();
    if cfg.scenario == Scenario::PreTest {
        notes.push(
            "metrics average over both pre-test outcomes, weighted by their frequency; \
             without rejection GMM and TSGMM use full-sample GMM and TS2SLS uses full-sample 2SLS"
                .into(),
        );
    }
    Ok(McReport {
        config: cfg.clone(),
        rows,
        mean_estimated_break,
        detection_prob,
        n_ok: ok.len(),
        n_failures,
        flagged,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectionRow {
    pub err_scheme: ErrScheme,
    pub change_size: f64,
    pub detection_prob: f64,
    pub mean_estimated_break: f64,
    pub n_ok: usize,
    pub n_failures: usize,
}

/// Sup-Wald rejection frequency at `cfg.level` and mean least-squares break
/// location over all replications, for each change size.
pub fn detection_experiment(cfg: &McConfig, change_sizes: &[f64]) -> Result<Vec<DetectionRow>> {
    let table = sup_wald_table(cfg)?;
    let cv = table.critical_value(cfg.level);
    let mut out = Vec::with_capacity(change_sizes.len());
    for &size in change_sizes {
        let c = McConfig { change_size: size, scenario: Scenario::EstimatedBreak, ..cfg.clone() };
        c.validate()?;
        let res: Vec<Result<(bool, usize)>> = (0..c.n_reps as u64)
            .into_par_iter()
            .map(|rep| {
                let data = generate_dgp(&c, rep)?;
                let scan = sup_wald_scan(&data, c.trimming, &c.hac)?;
                let brk = estimate_break_2sls(&data, c.trimming)?.break_idx;
                Ok((scan.sup_stat > cv, brk))
            })
            .collect();
        let mut hits = 0usize;
        let mut locs = Vec::new();
        let mut n_failures = 0;
        for r in res {
            match r {
                Ok((rej, b)) => {
                    hits += rej as usize;
                    locs.push(b as f64);
                }
                Err(e) if e.is_numerical() || matches!(e, Error::NoCandidates(_)) => n_failures += 1,
                Err(e) => return Err(e),
            }
        }
        if locs.is_empty() {
            return Err(Error::InvalidConfig("every replication failed".into()));
        }
        out.push(DetectionRow {
            err_scheme: c.err_scheme,
            change_size: size,
            detection_prob: hits as f64 / locs.len() as f64,
            mean_estimated_break: mean(&locs),
            n_ok: locs.len(),
            n_failures,
        });
    }
    Ok(out)
}

/// Change sizes of the detection table.
pub const DETECTION_SIZES: [f64; 4] = [1.0, 0.5, 0.3, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum TableOutput {
    Cells { table: u32, reports: Vec<McReport> },
    Detection { table: u32, rows: Vec<DetectionRow>, critical_values: Vec<CriticalValueTable> },
}

/// Configurations of a numbered experiment table, in display order.
///
/// 1–3: known break under HOM/HET1/HET2 over `T ∈ {400, 800}` × `nIV ∈ {1, 4}`;
/// 4–6: the same with an estimated break; 7: no break in the DGP, break
/// estimated; 8: detection (see [`run_table`]); 9: pre-test.
pub fn table_preset(table: u32, n_reps: usize, seed: u64) -> Result<Vec<McConfig>> {
    let base = McConfig { n_reps, seed, ..McConfig::default() };
    let grid = |scheme: ErrScheme, scenario: Scenario| -> Vec<McConfig> {
        [(400, 1), (400, 4), (800, 1), (800, 4)]
            .into_iter()
            .map(|(t, n_iv)| McConfig { t, n_iv, err_scheme: scheme, scenario, ..base.clone() })
            .collect()
    };
    let schemes = |scenario: Scenario, t: usize, n_iv: usize| -> Vec<McConfig> {
        ErrScheme::all()
            .into_iter()
            .map(|err_scheme| McConfig { t, n_iv, err_scheme, scenario, ..base.clone() })
            .collect()
    };
    Ok(match table {
        1..=3 => grid(ErrScheme::all()[table as usize - 1], Scenario::KnownBreak),
        4..=6 => grid(ErrScheme::all()[table as usize - 4], Scenario::EstimatedBreak),
        7 => schemes(Scenario::NoBreakEstimated, 400, 4),
        8 => schemes(Scenario::EstimatedBreak, 400, 1),
        9 => schemes(Scenario::PreTest, 400, 4),
        _ => return Err(Error::InvalidConfig(format!("unknown table {table}; expected 1-9"))),
    })
}

/// Runs a numbered experiment table.
pub fn run_table(table: u32, n_reps: usize, seed: u64) -> Result<TableOutput> {
    let cfgs = table_preset(table, n_reps, seed)?;
    if table == 8 {
        let mut rows = Vec::new();
        for c in &cfgs {
            rows.extend(detection_experiment(c, &DETECTION_SIZES)?);
        }
        let critical_values = vec![sup_wald_table(&cfgs[0])?];
        return Ok(TableOutput::Detection { table, rows, critical_values });
    }
    let reports = cfgs.iter().map(run_mc).collect::<Result<Vec<_>>>()?;
    Ok(TableOutput::Cells { table, reports })
}

fn cell_title(c: &McConfig) -> String {
    format!("{} | {} | T = {} | nIV = {} | N = {}", c.err_scheme.label(), c.scenario.label(), c.t, c.n_iv, c.n_reps)
}

/// Markdown rendering of a report: one row per estimator and regime.
pub fn report_markdown(r: &McReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "### {}\n", cell_title(&r.config));
    for n in &r.notes {
        let _ = writeln!(s, "> {n}\n");
    }
    if r.flagged {
        let _ = writeln!(s, "> WARNING: failure rate above 1%\n");
    }
    let _ = writeln!(s, "| Estimator | Bias | MC Std | As. Std. | RMSE | Length | Coverage |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "| {}{} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            row.estimator, row.regime, row.bias, row.mc_std, row.asy_std, row.rmse, row.ci_length, row.coverage
        );
    }
    if let Some(b) = r.mean_estimated_break {
        let _ = writeln!(s, "\nMean estimated break: {b:.3}");
    }
    if let Some(p) = r.detection_prob {
        let _ = writeln!(s, "Pre-test rejection frequency: {p:.3}");
    }
    s
}

pub fn table_markdown(out: &TableOutput) -> String {
    match out {
        TableOutput::Cells { table, reports } => {
            let mut s = format!("## Table {table}\n\n");
            for r in reports {
                s.push_str(&report_markdown(r));
                s.push('\n');
            }
            s
        }
        TableOutput::Detection { table, rows, critical_values } => {
            let mut s = format!("## Table {table}\n\n");
            for t in critical_values {
                let _ = writeln!(
                    s,
                    "Sup-Wald critical values (p = {}, trimming {}): 10% {:.3}, 5% {:.3}, 1% {:.3}\n",
                    t.p, t.trimming, t.cv10, t.cv05, t.cv01
                );
            }
            let _ = writeln!(s, "| Scheme | Change size | Probability | Mean location |");
            let _ = writeln!(s, "|---|---|---|---|");
            for r in rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.3} | {:.3} |",
                    r.err_scheme.label(),
                    r.change_size,
                    r.detection_prob,
                    r.mean_estimated_break
                );
            }
            s
        }
    }
}

/// CSV with one line per estimator × regime × cell (or per detection row).
pub fn write_table_csv<W: Write>(out: &TableOutput, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    match out {
        TableOutput::Cells { reports, .. } => {
            wr.write_record([
                "scheme", "scenario", "T", "nIV", "nReps", "estimator", "regime", "bias", "mcStd", "asyStd", "rmse",
                "length", "coverage", "meanEstimatedBreak", "nFailures",
            ])?;
            for r in reports {
                let c = &r.config;
                for row in &r.rows {
                    wr.write_record([
                        c.err_scheme.label().to_string(),
                        format!("{:?}", c.scenario),
                        c.t.to_string(),
                        c.n_iv.to_string(),
                        c.n_reps.to_string(),
                        row.estimator.clone(),
                        row.regime.to_string(),
                        row.bias.to_string(),
                        row.mc_std.to_string(),
                        row.asy_std.to_string(),
                        row.rmse.to_string(),
                        row.ci_length.to_string(),
                        row.coverage.to_string(),
                        r.mean_estimated_break.map(|b| b.to_string()).unwrap_or_default(),
                        r.n_failures.to_string(),
                    ])?;
                }
            }
        }
        TableOutput::Detection { rows, .. } => {
            wr.write_record(["scheme", "changeSize", "detectionProb", "meanEstimatedBreak", "nOk", "nFailures"])?;
            for r in rows {
                wr.write_record([
                    r.err_scheme.label().to_string(),
                    r.change_size.to_string(),
                    r.detection_prob.to_string(),
                    r.mean_estimated_break.to_string(),
                    r.n_ok.to_string(),
                    r.n_failures.to_string(),
                ])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scheme: ErrScheme) -> McConfig {
        McConfig { t: 200, n_reps: 20, err_scheme: scheme, ..McConfig::default() }
    }

    #[test]
    fn same_seed_and_rep_give_identical_data() {
        for s in ErrScheme::all() {
            let a = generate_dgp(&small(s), 3).unwrap();
            let b = generate_dgp(&small(s), 3).unwrap();
            assert_eq!(a, b);
            let c = generate_dgp(&small(s), 4).unwrap();
            assert_ne!(a.y(), c.y());
        }
    }

    #[test]
    fn generator_moments_match_design() {
        let cfg = McConfig { t: 100_000, ..McConfig::default() };
        let d = generate_dgp(&cfg, 0).unwrap();
        let t = d.t();
        let brk = cfg.true_break().unwrap();
        // Recover u and v from the known coefficients.
        let mut u = Vec::with_capacity(t);
        let mut v = Vec::with_capacity(t);
        for i in 0..t {
            let zpi = 1.0 + d.z()[(i, 1)];
            let vi = d.x()[(i, 0)] - zpi;
            let th = if i < brk { 0.0 } else { 1.0 };
            u.push(d.y()[i] - th - th * d.x()[(i, 0)]);
            v.push(vi);
        }
        let var = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>() / t as f64;
        let cov = u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / t as f64;
        assert!((var(&u) - 1.0).abs() < 0.02);
        assert!((cov / (var(&u) * var(&v)).sqrt() + 0.5).abs() < 0.02);
    }

    #[test]
    fn garch_errors_have_unit_variance() {
        let cfg = McConfig { t: 100_000, err_scheme: ErrScheme::Het2, lambda0: None, scenario: Scenario::EstimatedBreak, ..McConfig::default() };
        let d = generate_dgp(&cfg, 1).unwrap();
        let e: Vec<f64> = (0..d.t()).map(|i| d.y()[i]).collect();
        let m = e.iter().sum::<f64>() / e.len() as f64;
        let v = e.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / e.len() as f64;
        // theta = 0, so y is the error: unconditional variance 0.1 / (1 - 0.9) = 1.
        // The fourth moment is infinite, so the sample variance converges slowly.
        assert!((v - 1.0).abs() < 0.25, "variance {v}");
    }

    #[test]
    fn zero_noise_gives_exact_estimates() {
        let cfg = McConfig { t: 100, n_reps: 5, zero_noise: true, ..McConfig::default() };
        let r = run_mc(&cfg).unwrap();
        assert_eq!(r.n_failures, 0);
        for row in &r.rows {
            assert!(row.bias.abs() < 1e-10, "{row:?}");
            assert_eq!(row.coverage, 1.0);
        }
    }

    #[test]
    fn rmse_identity_and_coverage_range() {
        let r = run_mc(&small(ErrScheme::Hom)).unwrap();
        for row in &r.rows {
            assert_eq!(row.rmse, (row.bias * row.bias + row.asy_std * row.asy_std).sqrt());
            assert!((0.0..=1.0).contains(&row.coverage));
        }
        assert_eq!(r.rows.len(), 6);
    }

    #[test]
    fn presets_cover_all_tables() {
        for t in 1..=9 {
            let cfgs = table_preset(t, 10, 1).unwrap();
            assert!(!cfgs.is_empty());
            for c in cfgs {
                c.validate().unwrap();
            }
        }
        assert!(table_preset(10, 10, 1).is_err());
        assert_eq!(McConfig { t: 800, err_scheme: ErrScheme::Het2, ..McConfig::default() }.burn_in(), 200);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(McConfig { rho: 1.0, ..McConfig::default() }.validate().is_err());
        assert!(McConfig { n_iv: 0, ..McConfig::default() }.validate().is_err());
        assert!(McConfig { lambda0: None, ..McConfig::default() }.validate().is_err());
    }
}
