//! On-disk formats: checkpoints (`manifest.json` + `weights.bin`), videos
//! (`manifest.json` + `frames.bin`), plain PBM masks and binary PGM frames.
//!
//! Every format has a byte-level `decode_*` that never touches the
//! filesystem.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Mask, Tensor};

pub const DTYPE_F32: &str = "f32";
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const MOMENTUM: &str = "momentum.bin";
pub const CONFIG: &str = "config.json";
pub const FRAMES: &str = "frames.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl TensorEntry {
    fn numel(&self) -> Result<usize> {
        self.shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(format!("shape of {} overflows", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Whether `momentum.bin` holds optimizer state in the same layout.
    #[serde(default)]
    pub momentum: bool,
}

impl Manifest {
    fn validate(&self) -> Result<()> {
        for t in &self.tensors {
            if t.dtype != DTYPE_F32 {
                return Err(Error::format(format!("tensor {} has dtype {}, want f32", t.name, t.dtype)));
            }
            t.numel()?;
        }
        self.total_bytes()?;
        Ok(())
    }

    /// Length of `weights.bin` implied by the manifest.
    pub fn total_bytes(&self) -> Result<usize> {
        let mut total = 0usize;
        for t in &self.tensors {
            total = t
                .numel()?
                .checked_mul(4)
                .and_then(|n| total.checked_add(n))
                .ok_or_else(|| Error::format("manifest size overflows"))?;
        }
        Ok(total)
    }
}

pub fn decode_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes)?;
    m.validate()?;
    Ok(m)
}

pub fn encode_f32(tensors: &[Tensor<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.numel() * 4).sum());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Splits a little-endian f32 blob into the tensors listed in `manifest`.
pub fn decode_weights(manifest: &Manifest, bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    manifest.validate()?;
    let want = manifest.total_bytes()?;
    if bytes.len() != want {
        return Err(Error::format(format!("weights are {} bytes, manifest implies {want}", bytes.len())));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = t.numel()? * 4;
        let data = f32s(&bytes[offset..offset + n]);
        offset += n;
        out.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub momentum: Option<Vec<Tensor<f32>>>,
    pub step: u64,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    create_dir(dir)?;
    let tensors = ckpt
        .params
        .named()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE_F32.into(),
        })
        .collect();
    let manifest = Manifest {
        step: ckpt.step,
        tensors,
        momentum: ckpt.momentum.is_some(),
    };
    write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    write(&dir.join(WEIGHTS), &encode_f32(ckpt.params.tensors()))?;
    if let Some(m) = &ckpt.momentum {
        if m.len() != ckpt.params.len() || m.iter().zip(ckpt.params.tensors()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("momentum buffers do not match parameters"));
        }
        write(&dir.join(MOMENTUM), &encode_f32(m))?;
    }
    write(&dir.join(CONFIG), &serde_json::to_vec_pretty(&ckpt.config)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config = ModelConfig::from_json(&read(&dir.join(CONFIG))?)?;
    let manifest = decode_manifest(&read(&dir.join(MANIFEST))?)?;
    let named = decode_weights(&manifest, &read(&dir.join(WEIGHTS))?)?;
    let params = ModelParams::from_named(&config, named)?;
    let momentum = if manifest.momentum {
        let named = decode_weights(&manifest, &read(&dir.join(MOMENTUM))?)?;
        Some(named.into_iter().map(|(_, t)| t).collect())
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        params,
        momentum,
        step: manifest.step,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    /// `[T, H, W, C]`.
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub fn decode_video_manifest(bytes: &[u8]) -> Result<VideoManifest> {
    let m: VideoManifest = serde_json::from_slice(bytes)?;
    if m.dtype != DTYPE_F32 {
        return Err(Error::format(format!("video dtype {}, want f32", m.dtype)));
    }
    if m.shape.len() != 4 {
        return Err(Error::format(format!("video shape must be [T, H, W, C], got {:?}", m.shape)));
    }
    Ok(m)
}

pub fn decode_video(manifest: &VideoManifest, bytes: &[u8]) -> Result<Tensor<f32>> {
    let entry = TensorEntry {
        name: "video".into(),
        shape: manifest.shape.clone(),
        dtype: manifest.dtype.clone(),
    };
    let m = Manifest {
        step: 0,
        tensors: vec![entry],
        momentum: false,
    };
    let mut tensors = decode_weights(&m, bytes)?;
    Ok(tensors.remove(0).1)
}

pub fn save_video(dir: &Path, video: &Tensor<f32>) -> Result<()> {
    if video.rank() != 4 {
        return Err(Error::shape(format!("video must be [T, H, W, C], got {:?}", video.shape())));
    }
    create_dir(dir)?;
    let manifest = VideoManifest {
        shape: video.shape().to_vec(),
        dtype: DTYPE_F32.into(),
    };
    write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    write(&dir.join(FRAMES), &encode_f32(std::slice::from_ref(video)))
}

pub fn load_video(dir: &Path) -> Result<Tensor<f32>> {
    let manifest = decode_video_manifest(&read(&dir.join(MANIFEST))?)?;
    decode_video(&manifest, &read(&dir.join(FRAMES))?)
}

/// Plain (`P1`) bitmap of a 2-D mask; `1` is an allowed pair.
pub fn encode_pbm(mask: &Mask) -> Result<String> {
    let &[rows, cols] = mask.shape() else {
        return Err(Error::shape(format!("PBM needs a 2-D mask, got {:?}", mask.shape())));
    };
    let mut out = format!("P1\n{cols} {rows}\n");
    for r in 0..rows {
        let line: Vec<&str> = (0..cols).map(|c| if mask.at(r, c) { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn skip_space_and_comments(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
        } else if bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            break;
        }
    }
    i
}

fn header_number(bytes: &[u8], i: usize) -> Result<(usize, usize)> {
    let i = skip_space_and_comments(bytes, i);
    let end = bytes[i..].iter().position(|b| !b.is_ascii_digit()).map_or(bytes.len(), |p| i + p);
    let text = std::str::from_utf8(&bytes[i..end]).map_err(|_| Error::format("non-ASCII PBM header"))?;
    let n = text
        .parse::<usize>()
        .map_err(|_| Error::format(format!("bad PBM header number {text:?}")))?;
    Ok((n, end))
}

/// Parses a plain (`P1`) bitmap into a `[rows, cols]` mask.
pub fn decode_pbm(bytes: &[u8]) -> Result<Mask> {
    if !bytes.starts_with(b"P1") {
        return Err(Error::format("not a plain PBM (missing P1)"));
    }
    let (cols, i) = header_number(bytes, 2)?;
    let (rows, i) = header_number(bytes, i)?;
    let expected = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("PBM dimensions overflow"))?;
    let mut bits = Vec::new();
    let mut i = i;
    while i < bytes.len() {
        i = skip_space_and_comments(bytes, i);
        if i >= bytes.len() {
            break;
        }
        match bytes[i] {
            b'0' => bits.push(false),
            b'1' => bits.push(true),
            other => return Err(Error::format(format!("unexpected PBM byte {other:#04x}"))),
        }
        if bits.len() > expected {
            return Err(Error::format("PBM has more pixels than its header declares"));
        }
        i += 1;
    }
    if bits.len() != expected {
        return Err(Error::format(format!("PBM has {} pixels, header declares {expected}", bits.len())));
    }
    Mask::new([rows, cols], bits)
}

/// Binary (`P5`) greymap of `[H, W]` values mapped linearly from
/// `[lo, hi]` to `0..=255`.
pub fn encode_pgm(values: &[f32], height: usize, width: usize, lo: f32, hi: f32) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::shape(format!("{} values for a {height}x{width} image", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|&v| {
        let x = ((v - lo) / span * 255.0).round();
        x.clamp(0.0, 255.0) as u8
    }));
    Ok(out)
}

/// One greymap per frame of `video[T, H, W, C]`, showing the channel mean
/// on a scale shared by all frames.
pub fn render_frames(video: &Tensor<f32>) -> Result<Vec<Vec<u8>>> {
    let &[t, h, w, c] = video.shape() else {
        return Err(Error::shape(format!("video must be [T, H, W, C], got {:?}", video.shape())));
    };
    let means: Vec<f32> = video.data().chunks(c).map(|px| px.iter().sum::<f32>() / c as f32).collect();
    let lo = means.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = means.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    (0..t)
        .map(|f| encode_pgm(&means[f * h * w..(f + 1) * h * w], h, w, lo, hi))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pbm_round_trip_and_example() {
        let m = Mask::new([2, 2], vec![true, false, true, true]).unwrap();
        let text = encode_pbm(&m).unwrap();
        assert_eq!(text, "P1\n2 2\n1 0\n1 1\n");
        assert_eq!(decode_pbm(text.as_bytes()).unwrap(), m);
        let packed = b"P1 # comment\n3 1\n101";
        assert_eq!(decode_pbm(packed).unwrap().data(), &[true, false, true]);
    }

    #[test]
    fn pbm_rejects_malformed_input() {
        for bad in [&b"P2\n1 1\n1"[..], b"P1\n2 2\n1 0 1", b"P1\n1 1\n1 1", b"P1\nx 1\n1", b"P1\n1 1\n2", b"P1\n99999999999999999999 2\n"] {
            assert!(decode_pbm(bad).is_err(), "{:?}", String::from_utf8_lossy(bad));
        }
    }

    #[test]
    fn pgm_header_and_scaling() {
        let img = encode_pgm(&[0.0, 0.5, 1.0, 2.0], 2, 2, 0.0, 1.0).unwrap();
        assert!(img.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&img[img.len() - 4..], &[0, 128, 255, 255]);
    }

    #[test]
    fn weights_must_match_manifest_length() {
        let m = Manifest {
            step: 0,
            tensors: vec![TensorEntry {
                name: "a".into(),
                shape: vec![2, 1],
                dtype: "f32".into(),
            }],
            momentum: false,
        };
        let blob = encode_f32(&[Tensor::new([2, 1], vec![1.5f32, -2.0]).unwrap()]);
        assert_eq!(decode_weights(&m, &blob).unwrap()[0].1.data(), &[1.5, -2.0]);
        assert!(decode_weights(&m, &blob[..7]).is_err());
        let mut huge = m.clone();
        huge.tensors[0].shape = vec![usize::MAX, 2];
        assert!(decode_weights(&huge, &blob).is_err());
        let mut f16 = m;
        f16.tensors[0].dtype = "f16".into();
        assert!(decode_weights(&f16, &blob).is_err());
    }

    #[test]
    fn manifest_json_is_strict() {
        assert!(decode_manifest(br#"{"step":1,"tensors":[]}"#).is_ok());
        assert!(decode_manifest(br#"{"step":1,"tensors":[],"extra":0}"#).is_err());
        assert!(decode_manifest(b"not json").is_err());
    }
}
