use std::fs;
use std::path::PathBuf;

use msc::fuzzing;
use msc::geometry::AttentionGeometry;
use msc::io::{decode_manifest, decode_pbm, decode_video, decode_video_manifest, decode_weights};
use msc::model::ModelConfig;
use msc::train::RunConfig;
use proptest::prelude::*;

type Harness = fn(&[u8]);

const TARGETS: [(&str, Harness); 8] = [
    ("model_config", fuzzing::model_config),
    ("run_config", fuzzing::run_config),
    ("geometry", fuzzing::geometry),
    ("cost_inputs", fuzzing::cost_inputs),
    ("checkpoint_manifest", fuzzing::checkpoint_manifest),
    ("weights", fuzzing::weights),
    ("video", fuzzing::video),
    ("pbm", fuzzing::pbm),
];

fn corpus_dir(target: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(corpus_dir(target))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn seed(target: &str, name: &str) -> Vec<u8> {
    seeds(target).into_iter().find(|(n, _)| n == name).unwrap().1
}

#[test]
fn every_target_has_seeds_and_accepts_them() {
    for (target, harness) in TARGETS {
        let s = seeds(target);
        assert!(!s.is_empty(), "{target}");
        for (_, bytes) in s {
            harness(&bytes);
        }
    }
}

#[test]
fn valid_seeds_decode() {
    ModelConfig::from_json(&seed("model_config", "tiny.json")).unwrap();
    RunConfig::from_json(&seed("run_config", "tiny.json")).unwrap();
    RunConfig::from_json(&seed("run_config", "minimal.json")).unwrap();
    AttentionGeometry::from_json(&seed("geometry", "high.json")).unwrap();
    decode_pbm(&seed("pbm", "comments.pbm")).unwrap();
    for (target, name) in [("weights", "tiny.bin"), ("weights", "short.bin")] {
        let bytes = seed(target, name);
        let (h, p) = fuzzing::split_framed(&bytes).unwrap();
        decode_weights(&decode_manifest(h).unwrap(), p).unwrap();
    }
    let bytes = seed("video", "clip.bin");
    let (h, p) = fuzzing::split_framed(&bytes).unwrap();
    assert_eq!(decode_video(&decode_video_manifest(h).unwrap(), p).unwrap().shape(), &[2, 4, 4, 1]);
}

#[test]
fn hostile_seeds_are_rejected() {
    assert!(AttentionGeometry::from_json(&seed("geometry", "zero_stride.json")).is_err());
    assert!(decode_manifest(&seed("checkpoint_manifest", "overflow.json")).is_err());
    assert!(ModelConfig::from_json(&seed("model_config", "empty.json")).is_err());
}

#[test]
fn framing_round_trips() {
    let f = fuzzing::frame(b"head", b"payload");
    assert_eq!(fuzzing::split_framed(&f), Some((&b"head"[..], &b"payload"[..])));
    assert_eq!(fuzzing::split_framed(&[5, 0, 1]), None);
    assert_eq!(fuzzing::split_framed(&[1]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn arbitrary_bytes_never_panic(target in 0usize..TARGETS.len(), bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        (TARGETS[target].1)(&bytes);
    }

    #[test]
    fn mutated_seeds_never_panic(
        target in 0usize..TARGETS.len(),
        pick in any::<usize>(),
        edits in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..8),
        cut in any::<usize>(),
    ) {
        let (name, harness) = TARGETS[target];
        let all = seeds(name);
        let mut bytes = all[pick % all.len()].1.clone();
        for (pos, val) in edits {
            if !bytes.is_empty() {
                let i = pos % bytes.len();
                bytes[i] = val;
            }
        }
        if !bytes.is_empty() && cut % 4 == 0 {
            bytes.truncate(cut % bytes.len());
        }
        harness(&bytes);
    }
}
