use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{LabelDict, LabeledExample, TaskKind, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Range for rows not covered by the vector file.
pub const OOV_INIT_RANGE: f64 = 0.1;

/// Reads a GloVe-style text file (`token v1 ... vE` per line) into a
/// `V x E` table indexed by `vocab`.
///
/// Rows for tokens found in the file are copied; an exact match wins over a
/// case-folded one. The `[PAD]` row is zero. Every other row is drawn from
/// uniform(-0.1, 0.1) using a generator derived from `(seed, row id)`, so a
/// row's value does not depend on the file contents. A leading word2vec
/// header line (`count dim`) is skipped.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, seed: u64, expected_dim: Option<usize>) -> Result<Tensor> {
    let origin = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut dim = expected_dim;
    // 0 = unset, 1 = case-folded match, 2 = exact match
    let mut quality = vec![0u8; vocab.len()];
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let mut fields = trimmed.split(' ').filter(|f| !f.is_empty());
        let token = fields.next().expect("non-empty line");
        let values: Vec<&str> = fields.collect();
        if lineno == 1 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        let parsed: Vec<f64> = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(&origin, Some(lineno), format!("bad number: {e}")))?;
        match dim {
            None => {
                if parsed.is_empty() {
                    return Err(Error::format(&origin, Some(lineno), "line has no vector values"));
                }
                dim = Some(parsed.len());
            }
            Some(d) if d != parsed.len() => {
                return Err(Error::format(
                    &origin,
                    Some(lineno),
                    format!("expected {d} values, found {}", parsed.len()),
                ));
            }
            _ => {}
        }
        if parsed.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(&origin, Some(lineno), "non-finite vector value"));
        }
        let (id, q) = match vocab.get(token) {
            Some(id) => (id, 2),
            None => match vocab.get(&token.to_lowercase()) {
                Some(id) => (id, 1),
                None => continue,
            },
        };
        if id == PAD_ID {
            continue;
        }
        if q > quality[id as usize] {
            quality[id as usize] = q;
            rows[id as usize] = Some(parsed);
        }
    }
    let dim = dim.ok_or_else(|| Error::format(&origin, None, "no vectors in file"))?;
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    for (id, row) in rows.into_iter().enumerate() {
        if id as u32 == PAD_ID {
            continue;
        }
        let dst = table.row_mut(id);
        match row {
            Some(values) => dst.copy_from_slice(&values),
            None => {
                let mut rng = Rng::derive(seed, id as u64);
                dst.iter_mut()
                    .for_each(|v| *v = rng.uniform(-OOV_INIT_RANGE, OOV_INIT_RANGE));
            }
        }
    }
    Ok(table)
}

/// Examples plus the label dictionary they were mapped through.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub examples: Vec<LabeledExample>,
    pub labels: Option<LabelDict>,
}

struct RawRow {
    line: usize,
    label: String,
    a: String,
    b: Option<String>,
}

fn read_rows(path: &Path, kind: TaskKind, has_header: bool) -> Result<Vec<RawRow>> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let want = match kind {
        TaskKind::Single => 2,
        TaskKind::Pair => 3,
    };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != want {
            return Err(Error::format(
                &origin,
                Some(idx + 1),
                format!("expected {want} tab-separated columns, found {}", cols.len()),
            ));
        }
        rows.push(RawRow {
            line: idx + 1,
            label: cols[0].trim().to_string(),
            a: cols[1].to_string(),
            b: (want == 3).then(|| cols[2].to_string()),
        });
    }
    Ok(rows)
}

/// Reads `label\ttext` (single) or `label\ttext_a\ttext_b` (pair) rows.
/// Labels are mapped through a dictionary built from the file; rows with an
/// empty label column are unlabeled.
pub fn read_tsv(path: &Path, kind: TaskKind, has_header: bool) -> Result<Dataset> {
    let rows = read_rows(path, kind, has_header)?;
    let observed: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).filter(|l| !l.is_empty()).collect();
    let labels = if observed.is_empty() {
        None
    } else {
        Some(LabelDict::from_observed(observed)?)
    };
    finish(path, kind, rows, labels)
}

/// Like [`read_tsv`] but maps labels through an existing dictionary, e.g.
/// the one stored with a training run. Unknown labels are format errors.
pub fn read_tsv_with_labels(path: &Path, kind: TaskKind, has_header: bool, labels: &LabelDict) -> Result<Dataset> {
    let rows = read_rows(path, kind, has_header)?;
    finish(path, kind, rows, Some(labels.clone()))
}

fn finish(path: &Path, kind: TaskKind, rows: Vec<RawRow>, labels: Option<LabelDict>) -> Result<Dataset> {
    let origin = path.display().to_string();
    let examples = rows
        .into_iter()
        .map(|r| {
            let label = if r.label.is_empty() {
                None
            } else {
                let dict = labels.as_ref().expect("labels exist when any row is labeled");
                Some(dict.id(&r.label).ok_or_else(|| {
                    Error::format(&origin, Some(r.line), format!("label {:?} not in label dictionary", r.label))
                })?)
            };
            Ok(LabeledExample {
                text_a: r.a,
                text_b: r.b,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { kind, examples, labels })
}

/// Writes examples in the layout [`read_tsv`] accepts.
pub fn write_tsv(path: &Path, examples: &[LabeledExample], labels: Option<&LabelDict>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let label = match (ex.label, labels) {
            (Some(id), Some(dict)) => dict.label(id).unwrap_or_default().to_string(),
            (Some(id), None) => id.to_string(),
            (None, _) => String::new(),
        };
        let clean = |s: &str| s.replace(['\t', '\n', '\r'], " ");
        match &ex.text_b {
            Some(b) => writeln!(out, "{label}\t{}\t{}", clean(&ex.text_a), clean(b))?,
            None => writeln!(out, "{label}\t{}", clean(&ex.text_a))?,
        }
    }
    out.flush()?;
    Ok(())
}

/// One pre-segmented sentence per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn word_vectors_copy_covered_rows() {
        let vocab = Vocabulary::from_tokens(["cat", "dog"]).unwrap();
        let f = file("cat 1.0 0.0\nbird 0.5 0.5\n");
        let table = load_word_vectors(f.path(), &vocab, 3, None).unwrap();
        assert_eq!(table.shape(), &[5, 2]);
        assert_eq!(table.row(3), &[1.0, 0.0]);
        assert_eq!(table.row(0), &[0.0, 0.0]);
        assert!(table.row(4).iter().all(|v| v.abs() < OOV_INIT_RANGE));
    }

    #[test]
    fn uncovered_rows_are_deterministic_per_seed() {
        let vocab = Vocabulary::from_tokens(["cat", "dog"]).unwrap();
        let a = load_word_vectors(file("cat 1 2\n").path(), &vocab, 9, None).unwrap();
        let b = load_word_vectors(file("cat 3 4\nfish 0 0\n").path(), &vocab, 9, None).unwrap();
        assert_eq!(a.row(4), b.row(4));
        assert_eq!(a.row(1), b.row(1));
        let c = load_word_vectors(file("cat 1 2\n").path(), &vocab, 10, None).unwrap();
        assert_ne!(a.row(4), c.row(4));
    }

    #[test]
    fn short_line_is_a_format_error_with_line_number() {
        let vocab = Vocabulary::from_tokens(["cat"]).unwrap();
        let f = file("cat 1.0 0.0\ndog 1.0\n");
        match load_word_vectors(f.path(), &vocab, 1, None) {
            Err(Error::Format { line: Some(2), .. }) => {}
            other => panic!("expected format error at line 2, got {other:?}"),
        }
        let f = file("cat 1.0 0.0\n");
        assert!(matches!(load_word_vectors(f.path(), &vocab, 1, Some(3)), Err(Error::Format { line: Some(1), .. })));
    }

    #[test]
    fn exact_case_beats_folded_case() {
        let vocab = Vocabulary::from_tokens(["paris"]).unwrap();
        let f = file("Paris 1 1\nparis 2 2\nPARIS 3 3\n");
        let t = load_word_vectors(f.path(), &vocab, 1, None).unwrap();
        assert_eq!(t.row(3), &[2.0, 2.0]);
    }

    #[test]
    fn word2vec_header_is_skipped() {
        let vocab = Vocabulary::from_tokens(["cat"]).unwrap();
        let t = load_word_vectors(file("2 2\ncat 1 0\ndog 0 1\n").path(), &vocab, 1, None).unwrap();
        assert_eq!(t.row(3), &[1.0, 0.0]);
    }

    #[test]
    fn tsv_single_and_pair() {
        let d = read_tsv(file("1\tgood movie\n0\tbad film\n").path(), TaskKind::Single, false).unwrap();
        assert_eq!(d.examples[0].label, Some(1));
        assert_eq!(d.examples[0].text_a, "good movie");
        assert!(d.examples[0].text_b.is_none());
        let d = read_tsv(file("label\ta\tb\n0\ta\tb\n").path(), TaskKind::Pair, true).unwrap();
        assert_eq!(d.examples.len(), 1);
        assert_eq!(d.examples[0].text_a, "a");
        assert_eq!(d.examples[0].text_b.as_deref(), Some("b"));
    }

    #[test]
    fn tsv_wrong_column_count_names_line() {
        let f = file("0\ta\tb\n1\tonly one\n");
        match read_tsv(f.path(), TaskKind::Pair, false) {
            Err(Error::Format { line: Some(2), .. }) => {}
            other => panic!("expected format error at line 2, got {other:?}"),
        }
    }

    #[test]
    fn tsv_with_existing_labels_rejects_unknown() {
        let dict = LabelDict::from_observed(["pos", "neg"]).unwrap();
        let f = file("pos\tx\nmaybe\ty\n");
        assert!(matches!(
            read_tsv_with_labels(f.path(), TaskKind::Single, false, &dict),
            Err(Error::Format { line: Some(2), .. })
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let examples = vec![
            LabeledExample::pair("a b", "c", Some(1)),
            LabeledExample::pair("d", "e f", Some(0)),
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_tsv(f.path(), &examples, None).unwrap();
        let back = read_tsv(f.path(), TaskKind::Pair, false).unwrap();
        assert_eq!(back.examples, examples);
    }

    #[test]
    fn corpus_skips_blank_lines() {
        let c = read_corpus(file("one\n\n  two  \n").path()).unwrap();
        assert_eq!(c, vec!["one".to_string(), "two".to_string()]);
    }
}
