//! `pcpo plot-data`: merge per-run metrics CSVs into per-metric summary
//! tables (mean/std/min/max across runs, by epoch).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{CliError, PlotArgs};

struct RunTable {
    /// Column name -> per-epoch values (`None` for empty cells).
    columns: Vec<(String, Vec<Option<f64>>)>,
    rows: usize,
}

fn parse_metrics_csv(path: &Path) -> Result<RunTable, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    let mut columns: Vec<(String, Vec<Option<f64>>)> =
        names.iter().map(|n| (n.clone(), Vec::new())).collect();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(CliError::Config(format!(
                "{} line {}: expected {} cells, got {}",
                path.display(),
                lineno + 2,
                names.len(),
                cells.len()
            )));
        }
        for (col, cell) in columns.iter_mut().zip(cells) {
            let value = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|e| {
                    CliError::Config(format!(
                        "{} line {}: bad number {cell:?}: {e}",
                        path.display(),
                        lineno + 2
                    ))
                })?)
            };
            col.1.push(value);
        }
        rows += 1;
    }
    Ok(RunTable { columns, rows })
}

pub fn run(args: PlotArgs) -> Result<(), CliError> {
    if args.inputs.is_empty() {
        return Err(CliError::Config("no input metrics files given".into()));
    }
    let tables: Vec<RunTable> = args
        .inputs
        .iter()
        .map(|p| parse_metrics_csv(p))
        .collect::<Result<_, _>>()?;

    let epochs = tables.iter().map(|t| t.rows).min().unwrap_or(0);
    if tables.iter().any(|t| t.rows != epochs) {
        log::warn!(
            "runs have different epoch counts; truncating to the shortest ({epochs} epochs)"
        );
    }
    if epochs == 0 {
        return Err(CliError::Config("inputs contain no metric rows".into()));
    }

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(e.into()))?;
    let metric_names: Vec<&str> = tables[0]
        .columns
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| *n != "epoch")
        .collect();

    for name in metric_names {
        let mut out_rows = Vec::with_capacity(epochs);
        let mut any = false;
        for e in 0..epochs {
            let values: Vec<f64> = tables
                .iter()
                .filter_map(|t| {
                    t.columns
                        .iter()
                        .find(|(n, _)| n == name)
                        .and_then(|(_, v)| v[e])
                })
                .collect();
            if values.is_empty() {
                out_rows.push(format!("{},,,,", e + 1));
                continue;
            }
            any = true;
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out_rows.push(format!("{},{mean},{std},{min},{max}", e + 1));
        }
        if !any {
            continue;
        }
        let f = File::create(args.out.join(format!("{name}.csv")))
            .map_err(|e| CliError::Runtime(e.into()))?;
        let mut w = BufWriter::new(f);
        (|| -> std::io::Result<()> {
            writeln!(w, "epoch,mean,std,min,max")?;
            for row in &out_rows {
                writeln!(w, "{row}")?;
            }
            w.flush()
        })()
        .map_err(|e| CliError::Runtime(e.into()))?;
    }
    println!(
        "merged {} runs over {epochs} epochs -> {}",
        tables.len(),
        args.out.display()
    );
    Ok(())
}
