//! Checkpoint container:
//!
//! ```text
//! "MPKT1" | header length (u32 LE) | JSON header | f32 LE parameters | SHA-256 of everything before
//! ```
//!
//! Parameters are stored convolution by convolution, weights then biases.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{InpainterModel, ToyInpainter, ToyInpainterConfig};
use crate::error::{Error, Result};
use crate::imaging::RngSeed;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MPKT1";
const MAGIC_FAMILY: &[u8; 4] = b"MPKT";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    identifier: String,
    architecture: String,
    config: ToyInpainterConfig,
    parameter_count: usize,
    toolkit_version: String,
}

pub fn save_model(model: &ToyInpainter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        identifier: model.identifier().to_string(),
        architecture: "toy-unet".into(),
        config: *model.config(),
        parameter_count: model.parameter_count(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(9 + header.len() + 4 * model.parameter_count() + DIGEST_LEN);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for conv in model.convs() {
        for v in conv.weight.iter().chain(&conv.bias) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ToyInpainter> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::CorruptCheckpoint(msg) => {
            Error::CorruptCheckpoint(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<ToyInpainter> {
    let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
    if bytes.len() < 5 || &bytes[..4] != MAGIC_FAMILY {
        return Err(corrupt("missing MPKT magic"));
    }
    if &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[..5]).into_owned(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        });
    }
    if bytes.len() < 9 + DIGEST_LEN {
        return Err(corrupt("truncated header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let header_len = u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")) as usize;
    let header_end = 9usize
        .checked_add(header_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[9..header_end])
        .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    let params = &body[header_end..];
    if params.len() != 4 * header.parameter_count {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} parameters, found {} bytes",
            header.parameter_count,
            params.len()
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }

    let mut model = ToyInpainter::new(header.identifier, header.config, RngSeed(0))?;
    if model.parameter_count() != header.parameter_count {
        return Err(corrupt("parameter count disagrees with the architecture"));
    }
    let mut values = params
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for conv in model.convs_mut() {
        for v in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{random_rect_mask, Image};
    use crate::inpaint::inpaint;

    fn model() -> ToyInpainter {
        ToyInpainter::new("ckpt-test", ToyInpainterConfig { base_channels: 3, depth: 2 }, RngSeed(4)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mpkt");
        let m = model();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.identifier(), "ckpt-test");
        let img = Image::filled(8, 8, 0.3).unwrap();
        let mask = random_rect_mask(8, 8, 0.2, RngSeed(1)).unwrap();
        assert_eq!(inpaint(&back, &img, &mask).unwrap(), inpaint(&m, &img, &mask).unwrap());
        assert_eq!(&std::fs::read(&path).unwrap()[..5], b"MPKT1");
    }

    #[test]
    fn damaged_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mpkt");
        save_model(&model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptCheckpoint(_))));

        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptCheckpoint(_))));

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 0x10;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptCheckpoint(_))));

        let mut v2 = bytes.clone();
        v2[4] = b'2';
        std::fs::write(&path, &v2).unwrap();
        assert!(matches!(load_model(&path), Err(Error::VersionMismatch { .. })));

        assert!(matches!(load_model(dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
