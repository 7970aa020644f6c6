//! CSV export of generated data. Model-visible columns and hidden truth go
//! to separate files.

use std::path::Path;

use crate::error::Result;
use crate::harness::write_atomic;

/// Writes a header row and numeric rows.
fn write_table<R: AsRef<[f64]>>(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = R>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.as_ref().iter().map(|v| format!("{v}")))?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    write_atomic(path, &bytes)
}

/// Observed columns; `stage` is 1 or 2 for training rows and 0 for
/// held-out rows.
pub fn write_dataset_csv<R: AsRef<[f64]>>(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = R>,
) -> Result<()> {
    write_table(path, header, rows)
}

/// Hidden quantities (structural values, noise draws) aligned row by row
/// with the dataset file.
pub fn write_truth_csv<R: AsRef<[f64]>>(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = R>,
) -> Result<()> {
    write_table(path, header, rows)
}
