use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use freqmamba::verify::{gradient_suite, Method};

use crate::fail::Exit;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

pub fn run(out: Option<&Path>) -> Result<()> {
    let mut table = String::new();
    writeln!(table, "{:<26} {:<12} {:>12}  result", "case", "method", "rel. error").unwrap();
    print!("{table}");
    let mut failed = Vec::new();
    for case in gradient_suite() {
        let method = match case.method {
            Method::Coordinates => "coordinates",
            Method::Directional { .. } => "directional",
        };
        let line = match case.run(STEP) {
            Ok(err) if err < TOLERANCE => format!("{:<26} {method:<12} {err:>12.3e}  pass", case.name),
            Ok(err) => {
                failed.push(case.name);
                format!("{:<26} {method:<12} {err:>12.3e}  FAIL", case.name)
            }
            Err(e) => {
                failed.push(case.name);
                format!("{:<26} {method:<12} {:>12}  FAIL ({e})", case.name, "-")
            }
        };
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    if let Some(path) = out {
        std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    if !failed.is_empty() {
        bail!(anyhow::anyhow!("{} case(s) above {TOLERANCE:e}: {}", failed.len(), failed.join(", ")).context(Exit::GradCheck));
    }
    println!("all cases below {TOLERANCE:e} (h = {STEP:e})");
    Ok(())
}
