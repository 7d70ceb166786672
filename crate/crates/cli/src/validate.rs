use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pedcross::eval::{PlotData, ACCEPTANCE_HEADER, CDF_HEADER, DISPERSION_HEADER, PLOT_SCHEMA_VERSION, TRIALS_HEADER};
use pedcross::fitting::{VariantRow, FIT_HEADER, HUMAN_HEADER, VARIANT_HEADER};
use pedcross::model::Model;
use pedcross::trainer::LOG_HEADER;

use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::run::{SUMMARY_HEADER, TRUTH_HEADER};

/// A file that does not match its artifact schema. `line` is 1-based; 0
/// means the whole file.
#[derive(Debug)]
pub struct SchemaError {
    pub path: PathBuf,
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.path.display(), self.line, self.message)
    }
}

impl std::error::Error for SchemaError {}

#[derive(Debug, Clone, Copy)]
enum Col {
    Int,
    Float,
    OptFloat,
    Bool,
    Text,
    OptText,
}

struct CsvSchema {
    name: &'static str,
    columns: Vec<(&'static str, Col)>,
}

fn schemas() -> Vec<CsvSchema> {
    use Col::*;
    let zip = |name, header: &[&'static str], cols: &[Col]| CsvSchema {
        name,
        columns: header.iter().copied().zip(cols.iter().copied()).collect(),
    };
    vec![
        zip("trials", &TRIALS_HEADER, &[Int, Float, OptFloat, Bool, Bool, Text, OptText]),
        zip("acceptance", &ACCEPTANCE_HEADER, &[Int, Float, Text, Int, Int, Float, Float, Float]),
        zip("cit_cdf", &CDF_HEADER, &[Int, Float, Text, Float, Float, Int]),
        zip("tta_dispersion", &DISPERSION_HEADER, &[Int, Float, Int, Int, Float, Float, Float, Float]),
        zip("training log", &LOG_HEADER, &[Int, Int, OptFloat, Float, Text, OptFloat, Float]),
        zip("human data", &HUMAN_HEADER, &[Text, Float, Float, Float]),
        zip("fits", &FIT_HEADER, &[Text, Text, Float, Float, Int]),
        zip("variants", &VARIANT_HEADER, &[Text, Int, Float, Float, Bool]),
        zip("training summary", &SUMMARY_HEADER, &[Text, Text, OptFloat, Int, Int, Bool, Int]),
        zip("synthetic truth", &TRUTH_HEADER, &[Text, Float]),
    ]
}

fn schema_error(path: &Path, line: u64, message: impl Into<String>) -> anyhow::Error {
    SchemaError { path: path.to_path_buf(), line, message: message.into() }.into()
}

fn check_cell(col: Col, value: &str) -> bool {
    match col {
        Col::Int => value.parse::<i128>().is_ok(),
        Col::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Col::OptFloat => value.is_empty() || value.parse::<f64>().is_ok_and(f64::is_finite),
        Col::Bool => value == "true" || value == "false",
        Col::Text => !value.is_empty(),
        Col::OptText => true,
    }
}

fn validate_csv(path: &Path) -> Result<&'static str> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| schema_error(path, 1, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let schema = schemas()
        .into_iter()
        .find(|s| s.columns.iter().map(|c| c.0).eq(header.iter().map(String::as_str)))
        .ok_or_else(|| schema_error(path, 1, format!("unrecognized header {header:?}")))?;
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| schema_error(path, line, e.to_string()))?;
        for ((name, col), value) in schema.columns.iter().zip(row.iter()) {
            if !check_cell(*col, value) {
                return Err(schema_error(path, line, format!("column {name}: invalid value {value:?}")));
            }
        }
    }
    Ok(schema.name)
}

fn validate_json(path: &Path) -> Result<&'static str> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let fail = |e: serde_json::Error| schema_error(path, e.line() as u64, e.to_string());
    match name {
        MANIFEST_FILE => {
            serde_json::from_str::<Manifest>(&text).map_err(fail)?;
            Ok("manifest")
        }
        "plot_data.json" => {
            let plot: PlotData = serde_json::from_str(&text).map_err(fail)?;
            if plot.schema_version != PLOT_SCHEMA_VERSION {
                return Err(schema_error(path, 1, format!("unsupported schema_version {}", plot.schema_version)));
            }
            Ok("plot data")
        }
        "variants.json" => {
            serde_json::from_str::<Vec<VariantRow>>(&text).map_err(fail)?;
            Ok("variants")
        }
        _ => Err(schema_error(path, 1, "unrecognized JSON file")),
    }
}

fn validate_file(path: &Path) -> Result<&'static str> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pxqn") => {
            Model::load(path).map_err(|e| schema_error(path, 0, e.to_string()))?;
            Ok("checkpoint")
        }
        Some("csv") => validate_csv(path),
        Some("json") => validate_json(path),
        _ => Err(schema_error(path, 0, "unrecognized file type")),
    }
}

fn collect(path: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect(&e, files)?;
        }
    } else {
        files.push(path.to_path_buf());
    }
    Ok(())
}

/// Checks every file and reports all failures; the first one becomes the
/// returned error.
pub fn run(paths: &[PathBuf]) -> Result<()> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", p.display())).into());
        }
        collect(p, &mut files)?;
    }
    let mut first_error = None;
    for f in &files {
        match validate_file(f) {
            Ok(kind) => println!("ok    {} ({kind})", f.display()),
            Err(e) => {
                println!("FAIL  {e:#}");
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells() {
        assert!(check_cell(Col::Int, "3"));
        assert!(!check_cell(Col::Int, "3.5"));
        assert!(check_cell(Col::OptFloat, ""));
        assert!(!check_cell(Col::Float, ""));
        assert!(!check_cell(Col::Float, "NaN"));
        assert!(check_cell(Col::Bool, "false"));
        assert!(!check_cell(Col::Bool, "1"));
    }

    #[test]
    fn headers_are_distinct() {
        let all = schemas();
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                assert!(!a.columns.iter().map(|c| c.0).eq(b.columns.iter().map(|c| c.0)), "{} vs {}", a.name, b.name);
            }
        }
    }
}
