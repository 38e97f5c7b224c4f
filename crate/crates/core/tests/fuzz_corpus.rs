//! Replays the checked-in fuzz corpus through the shared decoders.

use std::path::PathBuf;

use boots_core::decode::{check, Decoder};

#[test]
fn corpus_seeds_decode_as_labelled() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    for d in Decoder::ALL {
        let dir = root.join(d.name());
        let mut seen = 0;
        for entry in std::fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
            let path = entry.unwrap().path();
            let data = std::fs::read(&path).unwrap();
            let bad = path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("bad_");
            assert_eq!(check(d, &data), !bad, "{}", path.display());
            seen += 1;
        }
        assert!(seen >= 2, "{} has {seen} seeds", d.name());
    }
}

#[test]
fn truncated_seeds_never_panic() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    for d in Decoder::ALL {
        for entry in std::fs::read_dir(root.join(d.name())).unwrap() {
            let data = std::fs::read(entry.unwrap().path()).unwrap();
            for cut in (0..data.len()).step_by(7) {
                check(d, &data[..cut]);
            }
        }
    }
}
