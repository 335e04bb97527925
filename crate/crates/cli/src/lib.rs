//! Command implementations behind the `breakiv` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use breakiv::changepoint::{
    cached_sup_wald_critvals, common_change_wald, estimate_break_2sls, sup_wald_critical_values, sup_wald_scan,
    BreakEstimate, BreakTestReport, CriticalValueTable, WaldScan, DEFAULT_GRID, DEFAULT_PATHS, DEFAULT_SEED,
};
use breakiv::covariance::{Bandwidth, HacConfig, Kernel};
use breakiv::data::{load_csv, save_csv};
use breakiv::estimators::{estimate_all, split_sample_gmm, ts2sls, tsgmm, EstimateResult};
use breakiv::linalg::sym_eigenvalues;
use breakiv::montecarlo::{
    generate_dgp, report_markdown, run_mc, run_table, table_markdown, write_table_csv, ErrScheme, McConfig,
    McReport, Scenario, TableOutput,
};
use breakiv::pipeline::{run_four_stage, PipelineConfig, PipelineReport};
use breakiv::{Dataset, Error, Schema};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "breakiv", version, about = "Change-point estimation and inference in linear IV regressions")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Output format written to stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Md)]
    pub format: Format,
    /// Directory receiving CSV and JSON artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// JSON run configuration; its entries override flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Md,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorArg {
    Gmm,
    Ts2sls,
    Tsgmm,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    /// Equal weights up to the bandwidth (bandwidth 0 is White).
    Truncated,
    Bartlett,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Hom,
    Het1,
    Het2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Known,
    Estimated,
    NoBreak,
    Pretest,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON column-role mapping; default infers roles from `y`, `x*`, `z1_*`, `ziv_*`.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Prepends a constant column to the exogenous regressors.
    #[arg(long)]
    pub add_intercept: bool,
}

#[derive(Debug, Clone, Args)]
pub struct HacArgs {
    /// Long-run variance kernel.
    #[arg(long, value_enum, default_value_t = KernelArg::Truncated)]
    pub hac: KernelArg,
    /// Bandwidth: a lag count or `auto`.
    #[arg(long)]
    pub bw: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the structural equation with a known or estimated break.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hac: HacArgs,
        /// Break index (last row of the first regime, 1-based).
        #[arg(long = "break")]
        break_idx: Option<usize>,
        /// Estimate the break by least squares instead of giving it.
        #[arg(long)]
        scan: bool,
        #[arg(long, value_enum, default_value_t = EstimatorArg::All)]
        estimator: EstimatorArg,
        #[arg(long, default_value_t = 0.15)]
        trim: f64,
    },
    /// Sup-Wald test for a break in the structural equation.
    Breaktest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hac: HacArgs,
        #[arg(long, default_value_t = 0.15)]
        trim: f64,
    },
    /// Wald test that the structural equation changes at a first-stage break.
    Commontest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hac: HacArgs,
        #[arg(long = "break")]
        break_idx: usize,
    },
    /// Four-stage detection and estimation.
    Pipeline {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hac: HacArgs,
        #[arg(long, default_value_t = 0.15)]
        trim: f64,
        /// Trimming of the first-stage multiple-break search.
        #[arg(long, default_value_t = 0.2)]
        first_stage_trim: f64,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        #[arg(long, default_value_t = 3)]
        max_breaks: usize,
        #[arg(long)]
        bonferroni: bool,
        /// Merge first-stage breaks closer than this many rows.
        #[arg(long)]
        merge_radius: Option<usize>,
    },
    /// Monte Carlo experiments: a numbered table preset or a single design.
    Mc {
        /// Table preset 1-9.
        #[arg(long)]
        table: Option<u32>,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        t: usize,
        #[arg(long, default_value_t = 1)]
        n_iv: usize,
        #[arg(long, value_enum, default_value_t = SchemeArg::Hom)]
        scheme: SchemeArg,
        #[arg(long, value_enum, default_value_t = ScenarioArg::Known)]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 1.0)]
        change_size: f64,
        #[arg(long, default_value_t = 0.4)]
        lambda0: f64,
    },
    /// Simulated critical values of the sup-Wald statistic.
    Critvals {
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 0.15)]
        trim: f64,
        #[arg(long, default_value_t = DEFAULT_PATHS)]
        paths: usize,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Write one simulated dataset as CSV.
    Simulate {
        #[arg(long, default_value_t = 400)]
        t: usize,
        #[arg(long, default_value_t = 1)]
        n_iv: usize,
        #[arg(long, value_enum, default_value_t = SchemeArg::Hom)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 1.0)]
        change_size: f64,
        /// Break fraction; omit `--lambda0` together with `--stable` for no break.
        #[arg(long, default_value_t = 0.4)]
        lambda0: f64,
        #[arg(long)]
        stable: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        rep: u64,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

/// JSON run configuration. Every present entry overrides the matching flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct RunConfig {
    pub hac: Option<HacConfig>,
    pub trimming: Option<f64>,
    pub level: Option<f64>,
    pub estimator: Option<EstimatorArg>,
    pub pipeline: Option<PipelineConfig>,
    pub mc: Option<McConfig>,
    pub output_dir: Option<PathBuf>,
    pub format: Option<Format>,
}

impl RunConfig {
    pub fn load(path: &Path) -> breakiv::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        if let Some(t) = cfg.trimming {
            if !(t > 0.0 && t < 0.5) {
                return Err(Error::InvalidConfig(format!("trimming {t} outside (0, 0.5)")));
            }
        }
        if let Some(l) = cfg.level {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::InvalidConfig(format!("level {l} outside (0, 1)")));
            }
        }
        if let Some(p) = &cfg.pipeline {
            p.validate()?;
        }
        if let Some(m) = &cfg.mc {
            m.validate()?;
        }
        Ok(cfg)
    }
}

/// Rendered command output.
pub struct Output {
    pub name: &'static str,
    pub markdown: String,
    pub csv: Option<String>,
    pub json: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdDifference {
    pub pair: String,
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub break_idx: usize,
    pub break_estimated: bool,
    pub labels: Vec<String>,
    pub estimates: Vec<EstimateResult>,
    pub psd_differences: Vec<PsdDifference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakTestOutput {
    pub scan: WaldScan,
    pub test: BreakTestReport,
    pub break_estimate: BreakEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOutput {
    pub table: Option<TableOutput>,
    pub report: Option<McReport>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION };
        Failure { code, message: format!("error: {e}") }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_VALIDATION, message: format!("error: {}", msg.into()) }
}

fn hac_config(a: &HacArgs) -> Result<HacConfig, Failure> {
    let bw = match a.bw.as_deref() {
        None => None,
        Some("auto") => Some(Bandwidth::NeweyWestAuto),
        Some(s) => Some(Bandwidth::Fixed(s.parse().map_err(|_| usage(format!("bad bandwidth {s:?}")))?)),
    };
    Ok(match a.hac {
        KernelArg::White => HacConfig::white(),
        KernelArg::Truncated => HacConfig { kernel: Kernel::Truncated, bandwidth: bw.unwrap_or(Bandwidth::Fixed(0)) },
        KernelArg::Bartlett => HacConfig { kernel: Kernel::Bartlett, bandwidth: bw.unwrap_or(Bandwidth::NeweyWestAuto) },
    })
}

fn load_data(a: &DataArgs) -> Result<Dataset, Failure> {
    let schema = a.schema.as_ref().map(Schema::load).transpose()?;
    let d = load_csv(&a.data, schema.as_ref())?;
    Ok(if a.add_intercept { d.with_intercept()? } else { d })
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value, Failure> {
    serde_json::to_value(v).map_err(|e| usage(e.to_string()))
}

fn fmt_stat(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

/// Runs the parsed command.
pub fn run(cli: Cli) -> Result<Output, Failure> {
    let rc = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Estimate { data, hac, break_idx, scan, estimator, trim } => {
            let d = load_data(&data)?;
            let hac = rc.hac.unwrap_or(hac_config(&hac)?);
            let trim = rc.trimming.unwrap_or(trim);
            let estimator = rc.estimator.unwrap_or(estimator);
            cmd_estimate(&d, break_idx, scan, estimator, trim, &hac)
        }
        Command::Breaktest { data, hac, trim } => {
            let d = load_data(&data)?;
            let hac = rc.hac.unwrap_or(hac_config(&hac)?);
            cmd_breaktest(&d, rc.trimming.unwrap_or(trim), &hac)
        }
        Command::Commontest { data, hac, break_idx } => {
            let d = load_data(&data)?;
            let hac = rc.hac.unwrap_or(hac_config(&hac)?);
            let rep = common_change_wald(&d, break_idx, &hac)?;
            let mut md = String::from("## Common-change Wald test\n\n");
            let _ = writeln!(md, "Break: {break_idx}  ");
            let _ = writeln!(md, "Statistic: {} (chi-square, {} df)  ", fmt_stat(rep.statistic), d.p());
            let _ = writeln!(md, "p-value: {:.4}\n", rep.p_value.unwrap_or(f64::NAN));
            md.push_str(&decision_table(&rep));
            let csv = format!("statistic,p_value,df\n{},{},{}\n", rep.statistic, rep.p_value.unwrap_or(f64::NAN), d.p());
            Ok(Output { name: "commontest", markdown: md, csv: Some(csv), json: to_json(&rep)? })
        }
        Command::Pipeline { data, hac, trim, first_stage_trim, level, max_breaks, bonferroni, merge_radius } => {
            let d = load_data(&data)?;
            let cfg = match rc.pipeline {
                Some(p) => p,
                None => PipelineConfig {
                    trimming: rc.trimming.unwrap_or(trim),
                    first_stage_trimming: first_stage_trim,
                    level: rc.level.unwrap_or(level),
                    max_breaks,
                    hac: rc.hac.unwrap_or(hac_config(&hac)?),
                    bonferroni,
                    merge_radius,
                },
            };
            let rep = run_four_stage(&d, &cfg)?;
            Ok(Output {
                name: "pipeline",
                markdown: format!("## Four-stage procedure\n\n```text\n{}```\n", rep.to_text(&d)),
                csv: Some(decisions_csv(&rep)),
                json: to_json(&rep)?,
            })
        }
        Command::Mc { table, reps, seed, t, n_iv, scheme, scenario, change_size, lambda0 } => {
            if let Some(k) = table {
                let out = run_table(k, reps, seed)?;
                let mut csv = Vec::new();
                write_table_csv(&out, &mut csv)?;
                let md = table_markdown(&out);
                return Ok(Output {
                    name: "mc",
                    markdown: md,
                    csv: Some(String::from_utf8_lossy(&csv).into_owned()),
                    json: to_json(&McOutput { table: Some(out), report: None })?,
                });
            }
            let cfg = match rc.mc {
                Some(m) => m,
                None => McConfig {
                    t,
                    n_iv,
                    err_scheme: scheme_of(scheme),
                    scenario: match scenario {
                        ScenarioArg::Known => Scenario::KnownBreak,
                        ScenarioArg::Estimated => Scenario::EstimatedBreak,
                        ScenarioArg::NoBreak => Scenario::NoBreakEstimated,
                        ScenarioArg::Pretest => Scenario::PreTest,
                    },
                    change_size,
                    lambda0: Some(lambda0),
                    n_reps: reps,
                    seed,
                    trimming: rc.trimming.unwrap_or(0.15),
                    level: rc.level.unwrap_or(0.05),
                    hac: rc.hac.unwrap_or_default(),
                    ..McConfig::default()
                },
            };
            let rep = run_mc(&cfg)?;
            let out = TableOutput::Cells { table: 0, reports: vec![rep.clone()] };
            let mut csv = Vec::new();
            write_table_csv(&out, &mut csv)?;
            Ok(Output {
                name: "mc",
                markdown: report_markdown(&rep),
                csv: Some(String::from_utf8_lossy(&csv).into_owned()),
                json: to_json(&McOutput { table: None, report: Some(rep) })?,
            })
        }
        Command::Critvals { p, trim, paths, grid, seed } => {
            let t = cached_sup_wald_critvals(p, rc.trimming.unwrap_or(trim), paths, grid, seed)?;
            let md = format!(
                "## Sup-Wald critical values\n\np = {}, trimming {}, {} paths, grid {}, seed {}\n\n\
                 | 10% | 5% | 1% |\n|---|---|---|\n| {:.3} | {:.3} | {:.3} |\n",
                t.p, t.trimming, paths, grid, seed, t.cv10, t.cv05, t.cv01
            );
            let csv = format!("p,trimming,cv10,cv05,cv01\n{},{},{},{},{}\n", t.p, t.trimming, t.cv10, t.cv05, t.cv01);
            let mut slim = t.clone();
            slim.grid = None;
            Ok(Output { name: "critvals", markdown: md, csv: Some(csv), json: to_json(&slim)? })
        }
        Command::Simulate { t, n_iv, scheme, change_size, lambda0, stable, seed, rep, out } => {
            let cfg = McConfig {
                t,
                n_iv,
                err_scheme: scheme_of(scheme),
                change_size,
                lambda0: (!stable).then_some(lambda0),
                scenario: Scenario::EstimatedBreak,
                seed,
                n_reps: 1,
                ..McConfig::default()
            };
            let d = generate_dgp(&cfg, rep)?;
            save_csv(&d, &out)?;
            let msg = format!("wrote {} rows to {}\n", d.t(), out.display());
            Ok(Output { name: "simulate", markdown: msg, csv: None, json: to_json(&cfg)? })
        }
    }
}

fn scheme_of(s: SchemeArg) -> ErrScheme {
    match s {
        SchemeArg::Hom => ErrScheme::Hom,
        SchemeArg::Het1 => ErrScheme::Het1,
        SchemeArg::Het2 => ErrScheme::Het2,
    }
}

fn decision_table(rep: &BreakTestReport) -> String {
    let mut s = String::from("| Level | Reject |\n|---|---|\n");
    for (l, r) in &rep.decision_at {
        let _ = writeln!(s, "| {l} | {} |", if *r { "yes" } else { "no" });
    }
    s
}

fn decisions_csv(rep: &PipelineReport) -> String {
    let mut s = String::from("stage,test,segment_start,segment_end,statistic,critical_value,p_value,level,rejected,break,note\n");
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &rep.decisions_log {
        let _ = writeln!(
            s,
            "{},\"{}\",{},{},{},{},{},{},{},{},\"{}\"",
            e.stage,
            e.test,
            e.segment.0,
            e.segment.1,
            o(e.statistic),
            o(e.critical_value),
            o(e.p_value),
            e.level,
            e.rejected,
            e.break_idx.map(|b| b.to_string()).unwrap_or_default(),
            e.note.clone().unwrap_or_default().replace('"', "'")
        );
    }
    s
}

pub fn cmd_estimate(
    d: &Dataset,
    break_idx: Option<usize>,
    scan: bool,
    estimator: EstimatorArg,
    trim: f64,
    hac: &HacConfig,
) -> Result<Output, Failure> {
    let (brk, estimated) = match (break_idx, scan) {
        (Some(b), false) => (b, false),
        (None, true) => (estimate_break_2sls(d, trim)?.break_idx, true),
        (Some(_), true) => return Err(usage("--break and --scan are mutually exclusive")),
        (None, false) => return Err(usage("either --break or --scan is required")),
    };
    let estimates: Vec<EstimateResult> = match estimator {
        EstimatorArg::Gmm => vec![split_sample_gmm(d, brk, hac)?],
        EstimatorArg::Ts2sls => vec![ts2sls(d, brk, hac)?],
        EstimatorArg::Tsgmm => vec![tsgmm(d, brk, hac)?],
        EstimatorArg::All => estimate_all(d, brk, hac)?.to_vec(),
    };
    let mut psd_differences = Vec::new();
    if estimates.len() == 3 {
        for (a, b) in [(0, 2), (1, 2), (0, 1)] {
            let ev = sym_eigenvalues(&(&estimates[a].avar_theta - &estimates[b].avar_theta));
            psd_differences.push(PsdDifference {
                pair: format!("{} - {}", estimates[a].kind.label(), estimates[b].kind.label()),
                min_eigenvalue: ev[0],
                eigenvalues: ev,
            });
        }
    }
    let rep = EstimateReport {
        break_idx: brk,
        break_estimated: estimated,
        labels: d.names().coefficient_labels(),
        estimates,
        psd_differences,
    };
    let (md, csv) = estimate_tables(&rep);
    Ok(Output { name: "estimate", markdown: md, csv: Some(csv), json: to_json(&rep)? })
}

const Z_975: f64 = 1.959_963_984_540_054;

fn estimate_tables(rep: &EstimateReport) -> (String, String) {
    let mut md = format!(
        "## Estimates with break at {}{}\n\n",
        rep.break_idx,
        if rep.break_estimated { " (estimated)" } else { "" }
    );
    let mut csv = String::from("estimator,regime,coefficient,estimate,std_error,ci_low,ci_high\n");
    for e in &rep.estimates {
        let _ = writeln!(md, "### {}\n", e.kind.label());
        let _ = writeln!(md, "| Regime | Coefficient | Estimate | Std. error | 95% CI |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for (i, th) in e.params.theta.iter().enumerate() {
            let se = e.regime_std_errors(i);
            for (j, l) in rep.labels.iter().enumerate() {
                let (lo, hi) = (th[j] - Z_975 * se[j], th[j] + Z_975 * se[j]);
                let _ = writeln!(md, "| {} | {l} | {:.6} | {:.6} | [{lo:.6}, {hi:.6}] |", i + 1, th[j], se[j]);
                let _ = writeln!(csv, "{},{},{l},{},{},{lo},{hi}", e.kind.label(), i + 1, th[j], se[j]);
            }
        }
        md.push('\n');
    }
    if !rep.psd_differences.is_empty() {
        let _ = writeln!(md, "### Variance differences\n\n| Difference | Min eigenvalue | Max eigenvalue |\n|---|---|---|");
        for p in &rep.psd_differences {
            let _ = writeln!(
                md,
                "| {} | {:.3e} | {:.3e} |",
                p.pair,
                p.min_eigenvalue,
                p.eigenvalues.last().copied().unwrap_or(0.0)
            );
        }
    }
    (md, csv)
}

pub fn cmd_breaktest(d: &Dataset, trim: f64, hac: &HacConfig) -> Result<Output, Failure> {
    let scan = sup_wald_scan(d, trim, hac)?;
    let table: CriticalValueTable = sup_wald_critical_values(d.p(), trim)?;
    let est = estimate_break_2sls(d, trim)?;
    let test = BreakTestReport::from_table(scan.sup_stat, &table, Some(est.break_idx));
    let mut md = String::from("## Sup-Wald test\n\n");
    let _ = writeln!(md, "Sup-Wald: {} at {}  ", fmt_stat(scan.sup_stat), scan.argmax_idx);
    let _ = writeln!(md, "Least-squares break: {} (fraction {:.4})  ", est.break_idx, est.lambda_hat);
    let _ = writeln!(
        md,
        "Critical values (p = {}, trimming {}): 10% {:.3}, 5% {:.3}, 1% {:.3}\n",
        table.p, table.trimming, table.cv10, table.cv05, table.cv01
    );
    md.push_str(&decision_table(&test));
    let mut csv = String::from("candidate,wald\n");
    for (k, w) in scan.candidates.iter().zip(&scan.wald_values) {
        let _ = writeln!(csv, "{k},{w}");
    }
    let mut slim = test.clone();
    if let breakiv::changepoint::CriticalRef::Table(t) = &mut slim.critical_values {
        t.grid = None;
    }
    let out = BreakTestOutput { scan, test: slim, break_estimate: est };
    Ok(Output { name: "breaktest", markdown: md, csv: Some(csv), json: to_json(&out)? })
}

/// Prints `out` in `format` and writes artifacts under `out_dir`.
pub fn emit(out: &Output, format: Format, out_dir: Option<&Path>) -> Result<String, Failure> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        let write = |ext: &str, body: &str| {
            let p = dir.join(format!("{}.{ext}", out.name));
            std::fs::write(&p, body).map_err(|e| usage(format!("{}: {e}", p.display())))
        };
        if let Some(csv) = &out.csv {
            write("csv", csv)?;
        }
        write("json", &serde_json::to_string_pretty(&out.json).expect("json value"))?;
        write("md", &out.markdown)?;
    }
    Ok(match format {
        Format::Md => out.markdown.clone(),
        Format::Csv => out.csv.clone().unwrap_or_default(),
        Format::Json => serde_json::to_string_pretty(&out.json).expect("json value") + "\n",
    })
}

/// Parses arguments, runs, prints; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    if let Some(n) = cli.global.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let global = cli.global.clone();
    let rc_format = global
        .config
        .as_ref()
        .and_then(|p| RunConfig::load(p).ok())
        .map(|c| (c.format, c.output_dir));
    let (format, out_dir) = match rc_format {
        Some((f, d)) => (f.unwrap_or(global.format), d.or(global.out_dir.clone())),
        None => (global.format, global.out_dir.clone()),
    };
    match run(cli).and_then(|o| emit(&o, format, out_dir.as_deref())) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(f) => {
            eprintln!("{}", f.message);
            f.code
        }
    }
}
