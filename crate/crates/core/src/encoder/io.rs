//! Parameter file: `"PCPRW"` | u32 version | u32 config length | JSON config
//! | flattened f64 parameters, all little-endian.

use std::fs;
use std::path::Path;

use super::{EncoderConfig, EncoderError, EncoderParams};

pub const PARAMS_MAGIC: &[u8; 5] = b"PCPRW";
pub const PARAMS_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> EncoderError {
    EncoderError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn encode_params(params: &EncoderParams) -> Vec<u8> {
    let config = serde_json::to_vec(params.config()).expect("config serializes");
    let mut buf = Vec::with_capacity(13 + config.len() + 8 * params.len());
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    for v in params.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<EncoderParams, EncoderError> {
    if bytes.len() < 13 || &bytes[..5] != PARAMS_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(5);
    if version != PARAMS_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let config_len = word(9) as usize;
    let body = 13 + config_len;
    if bytes.len() < body {
        return Err(format_err(path, "truncated config header"));
    }
    let config: EncoderConfig = serde_json::from_slice(&bytes[13..body])
        .map_err(|e| format_err(path, format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| format_err(path, e.to_string()))?;
    let rest = &bytes[body..];
    if rest.len() != 8 * config.param_count() {
        return Err(format_err(
            path,
            format!(
                "expected {} parameter bytes, found {}",
                8 * config.param_count(),
                rest.len()
            ),
        ));
    }
    let values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EncoderParams::from_flat(&config, values)
}

pub fn save_params(params: &EncoderParams, path: &Path) -> Result<(), EncoderError> {
    fs::write(path, encode_params(params)).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a parameter file. With `expected`, the stored architecture must
/// match it.
pub fn load_params(path: &Path, expected: Option<&EncoderConfig>) -> Result<EncoderParams, EncoderError> {
    let bytes = fs::read(path).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let params = decode_params(&bytes, path)?;
    if let Some(cfg) = expected {
        if !cfg.same_shape(params.config()) {
            return Err(EncoderError::ConfigMismatch {
                found: format!("{:?} -> {}", params.config().hidden_dims, params.config().descriptor_dim),
                expected: format!("{:?} -> {}", cfg.hidden_dims, cfg.descriptor_dim),
            });
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let p = EncoderParams::init(&EncoderConfig { seed: 9, ..EncoderConfig::default() }).unwrap();
        save_params(&p, &path).unwrap();
        let q = load_params(&path, Some(p.config())).unwrap();
        assert_eq!(p, q);
        assert!(p.flat().iter().zip(q.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn wrong_shape_is_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_params(&EncoderParams::init(&EncoderConfig::default()).unwrap(), &path).unwrap();
        let other = EncoderConfig {
            hidden_dims: vec![16, 64],
            ..EncoderConfig::default()
        };
        assert!(matches!(
            load_params(&path, Some(&other)),
            Err(EncoderError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut bytes = encode_params(&EncoderParams::init(&EncoderConfig::default()).unwrap());
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_params(&path, None), Err(EncoderError::Format { .. })));
        bytes[0] = b'P';
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_params(&path, None), Err(EncoderError::Format { .. })));
    }
}
