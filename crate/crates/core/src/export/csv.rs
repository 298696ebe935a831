use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("row {row} has {got} fields, header has {expected}")]
pub struct WidthMismatch {
    pub row: usize,
    pub expected: usize,
    pub got: usize,
}

fn needs_quotes(field: &str) -> bool {
    field.contains([',', '"', '\r', '\n'])
}

fn push_field(out: &mut Vec<u8>, field: &str) {
    if needs_quotes(field) {
        out.push(b'"');
        out.extend_from_slice(field.replace('"', "\"\"").as_bytes());
        out.push(b'"');
    } else {
        out.extend_from_slice(field.as_bytes());
    }
}

fn push_record<S: AsRef<str>>(out: &mut Vec<u8>, fields: &[S]) {
    // a lone empty field would otherwise be a blank line, which readers skip
    if let [only] = fields {
        if only.as_ref().is_empty() {
            out.extend_from_slice(b"\"\"\r\n");
            return;
        }
    }
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        push_field(out, f.as_ref());
    }
    out.extend_from_slice(b"\r\n");
}

/// RFC 4180 encoding with CRLF record terminators. Fields are quoted only
/// when they contain a comma, quote, CR or LF.
pub fn csv_encode<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>, WidthMismatch> {
    if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != header.len()) {
        return Err(WidthMismatch { row, expected: header.len(), got: r.len() });
    }
    let mut out = Vec::new();
    push_record(&mut out, header);
    for r in rows {
        push_record(&mut out, r);
    }
    Ok(out)
}
