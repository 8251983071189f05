//! Plain-text comparison of plain KD and the pipeline variants.

use std::fmt::Write as _;
use std::path::Path;

use sparse_teacher::pipeline::PipelineReport;
use sparse_teacher::Error;

use crate::{Failure, Outcome};

/// One table row: method, teacher sparsity, student dev metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: &'static str,
    pub sparsity: Option<f64>,
    pub metric: f64,
}

/// Rows in display order from whichever pipeline reports exist. The plain KD
/// row is the trial student, which every variant shares.
pub fn rows(
    grid: Option<&PipelineReport>,
    random: Option<&PipelineReport>,
    auto: Option<&PipelineReport>,
) -> Vec<Row> {
    let mut out = Vec::new();
    if let Some(r) = grid.or(random).or(auto) {
        out.push(Row {
            method: "KD",
            sparsity: None,
            metric: r.trial_dev_metric,
        });
    }
    for (method, r) in [("StarK", grid), ("StarK-Rand", random), ("StarK-Auto", auto)] {
        if let Some(r) = r {
            out.push(Row {
                method,
                sparsity: Some(r.chosen_sparsity),
                metric: r.final_dev_metric,
            });
        }
    }
    out
}

pub fn render(rows: &[Row]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>7}", "Method", "Sparsity", "Dev", "Δ KD");
    let base = rows.iter().find(|r| r.method == "KD").map(|r| r.metric);
    for r in rows {
        let sparsity = r.sparsity.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let delta = match (base, r.method) {
            (_, "KD") | (None, _) => "-".to_string(),
            (Some(b), _) => format!("{:+.2}", 100.0 * (r.metric - b)),
        };
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>9.2} {:>7}",
            r.method,
            sparsity,
            100.0 * r.metric,
            delta
        );
    }
    s
}

fn load(dir: &Path, tag: &str) -> Outcome<Option<PipelineReport>> {
    let path = dir.join(format!("pipeline-{tag}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(Some(serde_json::from_str(&text).map_err(Error::from)?))
}

pub fn run(dir: &Path) -> Outcome<()> {
    let grid = load(dir, "grid")?;
    let random = load(dir, "random")?;
    let auto = load(dir, "auto")?;
    let rows = rows(grid.as_ref(), random.as_ref(), auto.as_ref());
    if rows.is_empty() {
        return Err(Failure::Missing(format!(
            "no pipeline reports in {}; run `stark` or `auto` first",
            dir.display()
        )));
    }
    let table = render(&rows);
    print!("{table}");
    std::fs::write(dir.join("report.txt"), &table).map_err(|e| Error::Io {
        path: dir.join("report.txt"),
        source: e,
    })?;
    Ok(())
}
