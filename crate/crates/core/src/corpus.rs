//! Column corpus format: one `char<TAB>label` line per character, a blank
//! line after each sentence.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::tagger::Sentence;
use crate::tagspace::{LabelScheme, LabelSequence};
use crate::{Error, Result};

/// A sentence with string labels, before they are checked against a scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    pub chars: Vec<char>,
    pub labels: Vec<String>,
    /// 1-based line number of the first character.
    pub line: usize,
}

pub fn read_raw(reader: impl BufRead, source_name: &str) -> Result<Vec<RawSentence>> {
    let mut out = Vec::new();
    let mut cur = RawSentence {
        chars: Vec::new(),
        labels: Vec::new(),
        line: 0,
    };
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::format(source_name, lineno, e.to_string()))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            if !cur.chars.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    RawSentence {
                        chars: Vec::new(),
                        labels: Vec::new(),
                        line: 0,
                    },
                ));
            }
            continue;
        }
        let (ch, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(source_name, lineno, "expected char<TAB>label"))?;
        let mut chars = ch.chars();
        let c = match (chars.next(), chars.next()) {
            (Some(c), None) => c,
            _ => {
                return Err(Error::format(
                    source_name,
                    lineno,
                    format!("expected exactly one character, found {ch:?}"),
                ))
            }
        };
        if label.is_empty() || label.contains('\t') {
            return Err(Error::format(source_name, lineno, "malformed label column"));
        }
        if cur.chars.is_empty() {
            cur.line = lineno;
        }
        cur.chars.push(c);
        cur.labels.push(label.to_string());
    }
    if !cur.chars.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

/// Parses labels against `scheme`; unknown labels are a scheme mismatch,
/// illegal BIESO sequences a format error.
pub fn resolve(
    raw: Vec<RawSentence>,
    scheme: &LabelScheme,
    source_name: &str,
) -> Result<Vec<(Sentence, LabelSequence)>> {
    raw.into_iter()
        .map(|r| {
            let labels = scheme
                .parse_sequence(&r.labels)
                .map_err(|e| Error::SchemeMismatch(format!("{source_name}:{}: {e}", r.line)))?;
            scheme
                .check_legal(&labels)
                .map_err(|e| Error::format(source_name, r.line, e.to_string()))?;
            Ok((Sentence::new(r.chars)?, labels))
        })
        .collect()
}

pub fn read_file(path: &Path, scheme: &LabelScheme) -> Result<Vec<(Sentence, LabelSequence)>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path)?;
    resolve(read_raw(std::io::BufReader::new(file), &name)?, scheme, &name)
}

pub fn write(
    mut w: impl Write,
    scheme: &LabelScheme,
    data: impl IntoIterator<Item = (impl AsRef<[char]>, impl AsRef<[crate::tagspace::LabelId]>)>,
) -> Result<()> {
    for (chars, labels) in data {
        let (chars, labels) = (chars.as_ref(), labels.as_ref());
        if chars.len() != labels.len() {
            return Err(Error::InvalidArgument("characters and labels differ in length".into()));
        }
        for (c, &l) in chars.iter().zip(labels) {
            writeln!(w, "{c}\t{}", scheme.label_name(l)?)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_file(path: &Path, scheme: &LabelScheme, data: &[(Sentence, LabelSequence)]) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, scheme, data.iter().map(|(x, l)| (x.chars(), &l[..])))?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_and_write() {
        let text = "张\tB-PER\n三\tE-PER\n来\tO\n\n\n好\tO\n";
        let raw = read_raw(text.as_bytes(), "c.tsv").unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw[1].line, 6);
        let scheme = LabelScheme::new(["PER"]).unwrap();
        let data = resolve(raw, &scheme, "c.tsv").unwrap();
        let mut out = Vec::new();
        write(&mut out, &scheme, data.iter().map(|(x, l)| (x.chars(), &l[..]))).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "张\tB-PER\n三\tE-PER\n来\tO\n\n好\tO\n\n");
    }

    #[test]
    fn errors_cite_lines() {
        let err = read_raw("a\tO\nbc\tO\n".as_bytes(), "x.tsv").unwrap_err();
        assert!(err.to_string().starts_with("x.tsv:2:"), "{err}");
        let err = read_raw("a\tO\nb O\n".as_bytes(), "x.tsv").unwrap_err();
        assert!(err.to_string().starts_with("x.tsv:2:"), "{err}");

        let scheme = LabelScheme::new(["PER"]).unwrap();
        let raw = read_raw("a\tB-LOC\nb\tE-LOC\n".as_bytes(), "y.tsv").unwrap();
        assert!(matches!(resolve(raw, &scheme, "y.tsv"), Err(Error::SchemeMismatch(_))));
        let raw = read_raw("a\tB-PER\nb\tO\n".as_bytes(), "y.tsv").unwrap();
        assert!(matches!(resolve(raw, &scheme, "y.tsv"), Err(Error::Format { line: 1, .. })));
    }
}
