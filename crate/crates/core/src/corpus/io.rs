//! Corpus persistence.
//!
//! A corpus directory holds `vocab.tsv` (one `word<TAB>set_id` line per token
//! id, `-1` for specials) and one `<split>.tsv` per split (space-separated
//! word strings, a tab, then the integer label).

use super::{Corpus, Example, Vocabulary, CLS, PAD};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const SPLIT_FILES: [(&str, super::Split); 3] = [
    ("train.tsv", super::Split::Train),
    ("dev.tsv", super::Split::Dev),
    ("test.tsv", super::Split::Test),
];

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut vocab_lines = String::new();
    for (word, set) in corpus.vocab.entries() {
        let set_id = set.map_or(-1i64, |s| s as i64);
        vocab_lines.push_str(word);
        vocab_lines.push('\t');
        vocab_lines.push_str(&set_id.to_string());
        vocab_lines.push('\n');
    }
    fs::write(dir.join("vocab.tsv"), vocab_lines)?;

    for (file, split) in SPLIT_FILES {
        let mut lines = String::new();
        for e in corpus.split(split) {
            lines.push_str(&e.words(&corpus.vocab).join(" "));
            lines.push('\t');
            lines.push_str(&e.label.to_string());
            lines.push('\n');
        }
        fs::write(dir.join(file), lines)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab_path = dir.join("vocab.tsv");
    let vocab_text = fs::read_to_string(&vocab_path)?;
    let mut entries = Vec::new();
    for (i, line) in vocab_text.lines().enumerate() {
        let mut parts = line.splitn(2, '\t');
        let word = parts.next().unwrap_or("");
        let set_field = parts.next().ok_or_else(|| malformed(&vocab_path, i, "missing set_id field"))?;
        let set_id: i64 = set_field
            .trim()
            .parse()
            .map_err(|_| malformed(&vocab_path, i, "set_id is not an integer"))?;
        if word.is_empty() {
            return Err(malformed(&vocab_path, i, "empty word"));
        }
        entries.push((
            word.to_string(),
            if set_id < 0 { None } else { Some(set_id as usize) },
        ));
    }
    let vocab = Vocabulary::from_entries(entries)?;

    let mut splits: Vec<Vec<Example>> = Vec::new();
    for (file, _) in SPLIT_FILES {
        let path = dir.join(file);
        let text = fs::read_to_string(&path)?;
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.splitn(2, '\t');
            let tokens_field = parts.next().unwrap_or("");
            let label_field = parts
                .next()
                .ok_or_else(|| malformed(&path, i, "missing label field"))?;
            let label: usize = label_field
                .trim()
                .parse()
                .map_err(|_| malformed(&path, i, "label is not a nonnegative integer"))?;
            let mut token_ids = vec![CLS];
            for w in tokens_field.split(' ').filter(|w| !w.is_empty()) {
                let id = vocab
                    .id_of(w)
                    .ok_or_else(|| malformed(&path, i, &format!("unknown word {w:?}")))?;
                token_ids.push(id);
            }
            if token_ids.len() == 1 {
                return Err(malformed(&path, i, "empty token list"));
            }
            let n = token_ids.len() - 1;
            examples.push(Example {
                token_ids,
                label,
                n,
            });
        }
        splits.push(examples);
    }

    let pad_len = splits
        .iter()
        .flatten()
        .map(|e| e.n + 1)
        .max()
        .unwrap_or(1);
    for split in &mut splits {
        for e in split.iter_mut() {
            e.token_ids.resize(pad_len, PAD);
        }
    }
    let mut it = splits.into_iter();
    Ok(Corpus {
        vocab,
        train: it.next().unwrap(),
        dev: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

fn malformed(path: &Path, line_index: usize, reason: &str) -> Error {
    Error::MalformedRecord {
        path: path.display().to_string(),
        line: line_index + 1,
        reason: reason.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use tempfile::tempdir;

    fn cfg() -> CorpusConfig {
        CorpusConfig {
            num_sets: 8,
            set_size: 3,
            num_classes: 2,
            indicator_sets: 4,
            indicators_per_example: 1,
            train_n: 40,
            dev_n: 10,
            test_n: 10,
            min_tokens: 4,
            max_tokens: 7,
            embed_dim: 8,
            epsilon: 0.1,
            member_skew: 1.0,
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let corpus = generate_corpus(&cfg(), 5).unwrap();
        let dir = tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn truncated_record_names_line() {
        let corpus = generate_corpus(&cfg(), 6).unwrap();
        let dir = tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        // Drop the label field of the second line.
        let path = dir.path().join("train.tsv");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = lines[1].split('\t').next().unwrap();
        lines[1] = cut;
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        match err {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("expected MalformedRecord, got {other}"),
        }
    }

    #[test]
    fn empty_split_file_is_an_empty_split() {
        let corpus = generate_corpus(&cfg(), 7).unwrap();
        let dir = tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        std::fs::write(dir.path().join("dev.tsv"), "").unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert!(back.dev.is_empty());
        assert_eq!(back.train.len(), corpus.train.len());
    }
}
