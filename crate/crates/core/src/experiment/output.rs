use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::report::csv_line;

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Writes a CSV whose first line names the tool, version and schema, e.g.
/// `# dpnash 0.1.0 schema=privacy_runs/v1`, followed by the header row.
pub fn write_csv<I>(path: &Path, schema: &str, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "# dpnash {} schema={schema}/v{CSV_SCHEMA_VERSION}",
        super::TOOL_VERSION
    )?;
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", csv_line(row))?;
    }
    w.flush()?;
    Ok(())
}
