//! Result files: `trace.csv`, `summary.json`, `diagnostics.csv` and
//! `curves.svg`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{ExperimentResult, RegretTrace};
use super::summary::{Band, Summary};
use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 4] = ["rep", "round", "avg_regret_cum", "weak_regret_cum"];
const DIAGNOSTICS_HEADER: [&str; 6] = [
    "rep",
    "round",
    "log_det",
    "effective_dim",
    "coverage_violations",
    "coverage_events",
];

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config: ExperimentConfig,
    pub reps: usize,
    pub rounds: usize,
    pub average: Band,
    pub weak: Band,
    pub diagnostics: DiagnosticsSummary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    /// Final training loss of each repetition, when the policy trains.
    pub final_train_loss: Vec<Option<f64>>,
    /// Effective-dimension values at retrain rounds, per repetition.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub effective_dimension: Vec<Vec<(usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage_violation_rate: Option<f64>,
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub trace: PathBuf,
    pub summary: PathBuf,
    pub diagnostics: Option<PathBuf>,
    pub curves: Option<PathBuf>,
}

/// Serialises traces in the `trace.csv` layout.
pub fn trace_csv(traces: &[RegretTrace]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let to_parse = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(TRACE_HEADER).map_err(to_parse)?;
    for t in traces {
        for (i, (a, wk)) in t.avg_regret_cum.iter().zip(&t.weak_regret_cum).enumerate() {
            w.write_record([
                t.rep.to_string(),
                (i + 1).to_string(),
                a.to_string(),
                wk.to_string(),
            ])
            .map_err(to_parse)?;
        }
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

/// Parses a `trace.csv` document back into traces. Rows of each repetition
/// must be contiguous with rounds `1, 2, …`.
pub fn parse_trace_csv(data: &[u8]) -> Result<Vec<RegretTrace>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(data);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse(format!("trace header: {e}")))?
        .clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::Parse(format!(
            "trace header must be '{}', got '{}'",
            TRACE_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut traces: Vec<RegretTrace> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("trace row {}: {e}", line + 1)))?;
        if record.len() != 4 {
            return Err(Error::Parse(format!(
                "trace row {} has {} fields",
                line + 1,
                record.len()
            )));
        }
        let int = |i: usize| -> Result<usize> {
            record[i]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("trace row {} field {}: {e}", line + 1, TRACE_HEADER[i])))
        };
        let real = |i: usize| -> Result<f64> {
            let v = record[i].parse::<f64>().map_err(|e| {
                Error::Parse(format!("trace row {} field {}: {e}", line + 1, TRACE_HEADER[i]))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse(format!("trace row {}: non-finite regret", line + 1)))
            }
        };
        let (rep, round, avg, weak) = (int(0)?, int(1)?, real(2)?, real(3)?);
        let continues = traces.last().is_some_and(|t| t.rep == rep);
        if !continues {
            if traces.iter().any(|t| t.rep == rep) {
                return Err(Error::Parse(format!("repetition {rep} is not contiguous")));
            }
            traces.push(RegretTrace {
                rep,
                seed: 0,
                avg_regret_cum: Vec::new(),
                weak_regret_cum: Vec::new(),
            });
        }
        let t = traces.last_mut().expect("just pushed");
        if round != t.len() + 1 {
            return Err(Error::Parse(format!(
                "repetition {rep}: expected round {}, got {round}",
                t.len() + 1
            )));
        }
        t.avg_regret_cum.push(avg);
        t.weak_regret_cum.push(weak);
    }
    Ok(traces)
}

fn diagnostics_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let to_parse = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(DIAGNOSTICS_HEADER).map_err(to_parse)?;
    for r in &result.repetitions {
        for d in &r.diagnostics.rounds {
            w.write_record([
                r.trace.rep.to_string(),
                d.round.to_string(),
                d.log_det.to_string(),
                d.effective_dim.map(|v| v.to_string()).unwrap_or_default(),
                d.coverage_violations.to_string(),
                d.coverage_events.to_string(),
            ])
            .map_err(to_parse)?;
        }
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn summary_file(result: &ExperimentResult, summary: &Summary) -> SummaryFile {
    let reps = &result.repetitions;
    let with_diag = result.config.diagnostics;
    let effective_dimension = if with_diag {
        reps.iter()
            .map(|r| {
                r.diagnostics
                    .rounds
                    .iter()
                    .filter_map(|d| d.effective_dim.map(|v| (d.round, v)))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let coverage_violation_rate = if with_diag {
        let (bad, events) = reps
            .iter()
            .flat_map(|r| &r.diagnostics.rounds)
            .fold((0, 0), |acc, d| {
                (acc.0 + d.coverage_violations, acc.1 + d.coverage_events)
            });
        (events > 0).then(|| bad as f64 / events as f64)
    } else {
        None
    };
    SummaryFile {
        config: result.config.clone(),
        reps: summary.reps,
        rounds: summary.rounds,
        average: summary.average.clone(),
        weak: summary.weak.clone(),
        diagnostics: DiagnosticsSummary {
            final_train_loss: reps.iter().map(|r| r.diagnostics.final_train_loss).collect(),
            effective_dimension,
            coverage_violation_rate,
        },
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `trace.csv` and `summary.json` into `dir` (created if missing),
/// plus `diagnostics.csv` when diagnostics were collected and `curves.svg`
/// when `plot` is set. Every trace is checked for monotonicity first.
pub fn write_outputs(
    result: &ExperimentResult,
    summary: &Summary,
    dir: &Path,
    plot: bool,
) -> Result<OutputFiles> {
    if result.repetitions.is_empty() || result.repetitions.iter().any(|r| r.trace.is_empty()) {
        return Err(Error::Input("refusing to write empty traces".into()));
    }
    for r in &result.repetitions {
        r.trace.check()?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let traces = result.traces();

    let trace = dir.join("trace.csv");
    write_file(&trace, &trace_csv(&traces)?)?;

    let summary_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary_file(result, summary))
        .map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&summary_path, format!("{json}\n").as_bytes())?;

    let diagnostics = if result.config.diagnostics {
        let p = dir.join("diagnostics.csv");
        write_file(&p, &diagnostics_csv(result)?)?;
        Some(p)
    } else {
        None
    };

    let curves = if plot {
        let p = dir.join("curves.svg");
        write_file(
            &p,
            curves_svg(summary, &result.config.policy.to_string()).as_bytes(),
        )?;
        Some(p)
    } else {
        None
    };

    Ok(OutputFiles {
        trace,
        summary: summary_path,
        diagnostics,
        curves,
    })
}

pub fn read_summary(path: &Path) -> Result<SummaryFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn read_trace(path: &Path) -> Result<Vec<RegretTrace>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(&bytes).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Static line chart of both mean curves with their 95% bands.
pub fn curves_svg(summary: &Summary, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let n = summary.rounds.max(1);
    let top = summary
        .average
        .mean
        .iter()
        .zip(&summary.average.half_width)
        .map(|(m, h)| m + h)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * (i as f64 + 1.0) / n as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v / top);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{:.3}</text>"#,
        4.0, PAD, top
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">T = {n}</text>"#,
        W - PAD,
        H - PAD + 16.0
    );
    for (band, colour, label) in [
        (&summary.average, "#1f77b4", "average"),
        (&summary.weak, "#d62728", "weak"),
    ] {
        let mut area = String::new();
        for i in 0..n {
            let _ = write!(area, "{:.2},{:.2} ", x(i), y(band.mean[i] + band.half_width[i]));
        }
        for i in (0..n).rev() {
            let _ = write!(
                area,
                "{:.2},{:.2} ",
                x(i),
                y((band.mean[i] - band.half_width[i]).max(0.0))
            );
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#,
            area.trim_end()
        );
        let mut line = String::new();
        for i in 0..n {
            let _ = write!(line, "{:.2},{:.2} ", x(i), y(band.mean[i]));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"><title>{label}</title></polyline>"#,
            line.trim_end()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::run_experiment;
    use crate::harness::summary::aggregate;
    use crate::policy::PolicyKind;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            policy: PolicyKind::LinDbUcb,
            rounds: 25,
            reps: 3,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_reproduces_summary() {
        let dir = tempfile::tempdir().unwrap();
        let result = run_experiment(&tiny()).unwrap();
        let summary = aggregate(&result.traces()).unwrap();
        let files = write_outputs(&result, &summary, dir.path(), true).unwrap();
        let traces = read_trace(&files.trace).unwrap();
        assert_eq!(
            traces.len() * 25,
            fs::read_to_string(&files.trace).unwrap().lines().count() - 1
        );
        let again = aggregate(&traces).unwrap();
        let stored = read_summary(&files.summary).unwrap();
        for (a, b) in again.average.mean.iter().zip(&stored.average.mean) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in again.weak.half_width.iter().zip(&stored.weak.half_width) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(stored.config, tiny());
        assert!(fs::read_to_string(files.curves.unwrap())
            .unwrap()
            .starts_with("<svg"));
        assert!(fs::read_to_string(&files.trace)
            .unwrap()
            .starts_with("rep,round,avg_regret_cum,weak_regret_cum\n"));
    }

    #[test]
    fn refuses_empty_and_broken_traces() {
        let dir = tempfile::tempdir().unwrap();
        let mut result = run_experiment(&tiny()).unwrap();
        let summary = aggregate(&result.traces()).unwrap();
        result.repetitions[0].trace.avg_regret_cum[3] = -1.0;
        assert!(write_outputs(&result, &summary, dir.path(), false).is_err());
        result.repetitions.clear();
        assert!(matches!(
            write_outputs(&result, &summary, dir.path(), false),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn parser_rejects_malformed() {
        assert!(parse_trace_csv(b"a,b,c,d\n").is_err());
        assert!(parse_trace_csv(b"rep,round,avg_regret_cum,weak_regret_cum\n0,2,1,1\n").is_err());
        assert!(parse_trace_csv(b"rep,round,avg_regret_cum,weak_regret_cum\n0,1,x,1\n").is_err());
        assert!(
            parse_trace_csv(b"rep,round,avg_regret_cum,weak_regret_cum\n0,1,1,1\n1,1,1,1\n0,2,1,1\n")
                .is_err()
        );
        assert!(parse_trace_csv(b"rep,round,avg_regret_cum,weak_regret_cum\n0,1,NaN,1\n").is_err());
        let ok =
            parse_trace_csv(b"rep,round,avg_regret_cum,weak_regret_cum\n0,1,0.5,0.25\n0,2,1,0.5\n").unwrap();
        assert_eq!(ok[0].avg_regret_cum, vec![0.5, 1.0]);
        assert!(parse_trace_csv(b"").is_err());
    }
}
