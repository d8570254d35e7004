//! Entry points shared by the fuzz targets and the decoder robustness tests.
//! Each accepts arbitrary bytes, must never panic, and checks that whatever
//! decodes successfully survives a round trip.

use crate::cost::{compare, CostInputs};
use crate::geometry::AttentionGeometry;
use crate::io::{decode_manifest, decode_pbm, decode_video, decode_video_manifest, decode_weights, encode_f32, encode_pbm};
use crate::model::ModelConfig;
use crate::train::RunConfig;

/// Largest grid the cost harness enumerates.
const COST_TOKEN_LIMIT: usize = 4096;

/// Splits `[len: u16 LE][header; len][payload]`.
pub fn split_framed(data: &[u8]) -> Option<(&[u8], &[u8])> {
    let (len, rest) = data.split_first_chunk::<2>()?;
    let len = u16::from_le_bytes(*len) as usize;
    (rest.len() >= len).then(|| rest.split_at(len))
}

pub fn frame(header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u16).to_le_bytes().to_vec();
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

pub fn model_config(data: &[u8]) {
    if let Ok(cfg) = ModelConfig::from_json(data) {
        let again = ModelConfig::from_json(&serde_json::to_vec(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}

pub fn run_config(data: &[u8]) {
    if let Ok(run) = RunConfig::from_json(data) {
        let again = RunConfig::from_json(&serde_json::to_vec(&run).unwrap()).unwrap();
        assert_eq!(run, again);
    }
}

pub fn geometry(data: &[u8]) {
    if let Ok(g) = AttentionGeometry::from_json(data) {
        if g.tokens() <= 64 {
            let mask = g.build_dense_mask().unwrap();
            assert_eq!(mask.count_true(), g.pair_count());
            assert!(g.pair_count() <= g.pair_bound());
        }
    }
}

pub fn cost_inputs(data: &[u8]) {
    let Ok(mut inputs) = serde_json::from_slice::<CostInputs>(data) else {
        return;
    };
    if inputs.grid.is_some_and(|g| g.validate().is_err() || g.tokens() > COST_TOKEN_LIMIT) {
        inputs.grid = None;
    }
    if let Ok(report) = compare(&inputs) {
        assert!(!report.discrepancy_notes.is_empty());
    }
}

pub fn checkpoint_manifest(data: &[u8]) {
    if let Ok(m) = decode_manifest(data) {
        let bytes = m.total_bytes().unwrap();
        let again = decode_manifest(&serde_json::to_vec(&m).unwrap()).unwrap();
        assert_eq!(again.total_bytes().unwrap(), bytes);
    }
}

pub fn weights(data: &[u8]) {
    let Some((header, payload)) = split_framed(data) else {
        return;
    };
    let Ok(m) = decode_manifest(header) else {
        return;
    };
    if let Ok(named) = decode_weights(&m, payload) {
        let tensors: Vec<_> = named.into_iter().map(|(_, t)| t).collect();
        assert_eq!(encode_f32(&tensors), payload);
    }
}

pub fn video(data: &[u8]) {
    let Some((header, payload)) = split_framed(data) else {
        return;
    };
    let Ok(m) = decode_video_manifest(header) else {
        return;
    };
    if let Ok(v) = decode_video(&m, payload) {
        assert_eq!(v.shape(), m.shape.as_slice());
        assert_eq!(encode_f32(std::slice::from_ref(&v)), payload);
    }
}

pub fn pbm(data: &[u8]) {
    if let Ok(mask) = decode_pbm(data) {
        let text = encode_pbm(&mask).unwrap();
        assert_eq!(decode_pbm(text.as_bytes()).unwrap(), mask);
    }
}
