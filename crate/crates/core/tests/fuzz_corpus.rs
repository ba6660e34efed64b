//! The checked-in fuzz seeds must stay valid inputs for their decoders.

use std::fs;
use std::path::{Path, PathBuf};

use hypercut::diffcore::{decode_checkpoint, encode_checkpoint};
use hypercut::hypercut::Hyperplane;
use hypercut::scenes::{decode_sample, encode_sample, Manifest};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn b2v_seeds_round_trip() {
    for (path, bytes) in seeds("b2v_decode") {
        let s = decode_sample(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(encode_sample(&s), bytes);
    }
}

#[test]
fn checkpoint_seeds_round_trip() {
    for (path, bytes) in seeds("checkpoint_decode") {
        let p = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(encode_checkpoint(&p), bytes);
    }
}

#[test]
fn hyperplane_seeds_decode() {
    for (path, bytes) in seeds("hyperplane_decode") {
        let h = Hyperplane::decode(&bytes, 0).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(h.encode(), bytes);
    }
}

#[test]
fn manifest_seeds_parse() {
    for (path, bytes) in seeds("manifest_parse") {
        let text = String::from_utf8(bytes).unwrap();
        let parsed = Manifest::parse(&text);
        if path.file_name().unwrap() == "empty.json" {
            assert!(parsed.is_err());
        } else {
            parsed.unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
}

#[test]
fn decoders_reject_truncation() {
    for (_, bytes) in seeds("b2v_decode") {
        for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_sample(&bytes[..cut]).is_err());
        }
    }
    for (_, bytes) in seeds("checkpoint_decode") {
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
    assert!(Hyperplane::decode(&[0, 0, 128], 0).is_err());
    assert!(Hyperplane::decode(&0.5f32.to_le_bytes(), 0).is_err());
}
