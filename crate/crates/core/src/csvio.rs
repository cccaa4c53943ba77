//! Shared CSV conventions: every file starts with one `#` metadata line
//! carrying `key=value` pairs, followed by a header row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaLine {
    pub kind: String,
    pub fields: BTreeMap<String, String>,
}

impl MetaLine {
    pub fn new(kind: &str) -> Self {
        MetaLine {
            kind: kind.to_string(),
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut line = format!("# teachnet {}", self.kind);
        for (k, v) in &self.fields {
            let _ = write!(line, " {k}={v}");
        }
        line
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", self.render())?;
        Ok(())
    }

    pub fn parse(line: &str) -> Result<Self> {
        let rest = line
            .strip_prefix("# teachnet ")
            .ok_or_else(|| Error::Parse(format!("missing metadata line: {line:?}")))?;
        let mut parts = rest.split_whitespace();
        let kind = parts
            .next()
            .ok_or_else(|| Error::Parse("empty metadata line".into()))?
            .to_string();
        let mut fields = BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad metadata field {p:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        Ok(MetaLine { kind, fields })
    }
}

/// Splits a CSV document into its metadata line and the remaining body.
pub fn split_meta(text: &str) -> Result<(MetaLine, &str)> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    Ok((MetaLine::parse(first.trim_end())?, body))
}

/// Renders rows with a metadata line and header into a string.
pub fn render_table(meta: &MetaLine, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut buf = Vec::new();
    meta.write_to(&mut buf)?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}
