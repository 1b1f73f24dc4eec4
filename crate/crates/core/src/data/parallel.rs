use std::path::Path;

use crate::error::{Error, Result};

/// One aligned sentence pair; `id` is the 1-based line number it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub id: usize,
    pub src: String,
    pub tgt: String,
}

/// Parses `src\ttgt` lines. Each line needs exactly one tab.
pub fn parse_parallel_tsv(text: &str, path: &Path) -> Result<Vec<ParallelPair>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 1;
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(src), Some(tgt), None) => Ok(ParallelPair { id: line_no, src: src.to_string(), tgt: tgt.to_string() }),
                (_, None, _) => Err(Error::Parse { path: path.to_path_buf(), line: line_no, message: "missing tab separator".into() }),
                _ => Err(Error::Parse { path: path.to_path_buf(), line: line_no, message: "more than one tab separator".into() }),
            }
        })
        .collect()
}

pub fn load_parallel_tsv(path: &Path) -> Result<Vec<ParallelPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_parallel_tsv(&text, path)
}

pub fn write_parallel_tsv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (a, b) in pairs {
        if a.contains(['\t', '\n']) || b.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument("sentences may not contain tabs or newlines".into()));
        }
        out.push_str(a);
        out.push('\t');
        out.push_str(b);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_well_formed_lines() {
        let pairs = parse_parallel_tsv("a b\tc d\nx\ty\n", Path::new("p.tsv")).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1], ParallelPair { id: 2, src: "x".into(), tgt: "y".into() });
    }

    #[test]
    fn missing_tab_names_the_line() {
        let err = parse_parallel_tsv("a\tb\nno tab here\n", Path::new("p.tsv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_line(parse_parallel_tsv("a\tb\tc", Path::new("p.tsv"))) == Some(1));
    }

    fn err_line<T>(r: Result<T>) -> Option<usize> {
        match r {
            Err(Error::Parse { line, .. }) => Some(line),
            _ => None,
        }
    }
}
