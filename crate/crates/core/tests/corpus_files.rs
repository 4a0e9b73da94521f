use std::path::{Path, PathBuf};

use seqtransfer::corpus::{parse_column_file, serialize_column, Domain, LabelScheme};

fn data_files() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    files
}

#[test]
fn every_shipped_file_round_trips() {
    let files = data_files();
    assert!(files.len() >= 4);
    for path in files {
        let text = std::fs::read_to_string(&path).unwrap();
        let sents = parse_column_file(&text, Domain::Target).unwrap();
        assert!(!sents.is_empty(), "{}", path.display());
        let again = serialize_column(&sents);
        assert_eq!(
            parse_column_file(&again, Domain::Target).unwrap(),
            sents,
            "{}",
            path.display()
        );
        assert_eq!(
            serialize_column(&parse_column_file(&again, Domain::Target).unwrap()),
            again
        );
    }
}

#[test]
fn canonical_files_are_byte_identical() {
    for name in ["clinical_source.txt", "clinical_target.txt", "tweets.txt"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
        let text = std::fs::read_to_string(&path).unwrap();
        let sents = parse_column_file(&text, Domain::Source).unwrap();
        assert_eq!(serialize_column(&sents), text, "{name}");
    }
}

#[test]
fn annotated_file_skips_markup() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/annotated.txt");
    let sents = parse_column_file(&std::fs::read_to_string(path).unwrap(), Domain::Target).unwrap();
    let lens: Vec<usize> = sents.iter().map(|s| s.len()).collect();
    assert_eq!(lens, vec![4, 2, 2]);
    assert_eq!(sents[1].tokens, ["Peter", "Blackburn"]);
}

#[test]
fn clinical_pair_shares_a_scheme() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let read = |n: &str| parse_column_file(&std::fs::read_to_string(dir.join(n)).unwrap(), Domain::Source).unwrap();
    let (s, t) = (read("clinical_source.txt"), read("clinical_target.txt"));
    let scheme =
        |c: &[seqtransfer::corpus::LabeledSentence]| LabelScheme::infer(c.iter().map(|s| s.labels.as_slice())).unwrap();
    assert_eq!(scheme(&s).entity_types(), ["Disease", "Drug", "Symptom", "Test"]);
    assert_eq!(scheme(&s), scheme(&t));
}
