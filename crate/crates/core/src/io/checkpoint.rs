//! Network checkpoints.
//!
//! Layout: the 8-byte magic `DDISTNET`, a little-endian `u32` header length,
//! a UTF-8 `key=value` header (one pair per line), then every parameter as a
//! little-endian `f64`, layer by layer, weights before biases.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Architecture, Network, Params};
use crate::softmax::Temperature;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDISTNET";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(net: &Network) -> Vec<u8> {
    let arch = net.architecture();
    let header = format!(
        "format_version={CHECKPOINT_VERSION}\narchitecture={arch}\ntraining_temperature={}\nrng_seed={}\nparam_count={}\n",
        net.training_temperature().value(),
        net.rng_seed(),
        arch.param_count(),
    );
    let mut out = Vec::with_capacity(12 + header.len() + 8 * arch.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for p in net.params().iter().flatten() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a network checkpoint (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(Error::Corruption(format!(
            "header claims {header_len} bytes, only {} present",
            body.len()
        )));
    }
    let header = std::str::from_utf8(&body[..header_len])
        .map_err(|_| Error::Corruption("header is not UTF-8".into()))?;
    let payload = &body[header_len..];

    let field = |key: &str| -> Result<&str> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))
    };

    let version = field("format_version")?;
    if version.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version.to_string(),
        });
    }
    let temperature = field("training_temperature")?
        .parse::<f64>()
        .map_err(|_| Error::Format("bad training_temperature".into()))
        .and_then(Temperature::new)?;
    let seed = field("rng_seed")?
        .parse::<u64>()
        .map_err(|_| Error::Format("bad rng_seed".into()))?;
    let declared = field("param_count")?
        .parse::<usize>()
        .map_err(|_| Error::Format("bad param_count".into()))?;

    let arch: Architecture = field("architecture")?
        .parse()
        .map_err(|e| Error::Consistency(format!("architecture line: {e}")))?;
    arch.validate()
        .map_err(|e| Error::Consistency(format!("architecture line: {e}")))?;
    if arch.param_count() != declared {
        return Err(Error::Consistency(format!(
            "architecture has {} parameters but header declares {declared}",
            arch.param_count()
        )));
    }
    if Some(payload.len()) != declared.checked_mul(8) {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            declared.saturating_mul(8)
        )));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |shape: Vec<usize>| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, values.by_ref().take(n).collect())
    };
    let params = arch
        .layers
        .iter()
        .map(|spec| {
            spec.param_shapes()
                .map(|(w, b)| {
                    Ok(Params {
                        weight: take(w)?,
                        bias: take(b)?,
                    })
                })
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Network::from_parts(arch, params, temperature, seed)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &write_checkpoint(net))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    read_checkpoint(&super::read_bytes(path.as_ref())?)
}
