//! CSV reading and writing shared by every tabular output.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Serializes `rows` with a header row, after an optional `# ...` line.
pub(crate) fn write_rows<T: Serialize>(
    preamble: Option<&str>,
    rows: impl IntoIterator<Item = T>,
) -> Result<String> {
    let mut out = Vec::new();
    if let Some(p) = preamble {
        out.extend_from_slice(format!("# {p}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Parses rows whose header must equal `header`; `#` lines are skipped.
pub(crate) fn read_rows<T: DeserializeOwned>(text: &str, header: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(Error::Parse(format!(
            "expected header `{header}`, found `{found}`"
        )));
    }
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?)
}
