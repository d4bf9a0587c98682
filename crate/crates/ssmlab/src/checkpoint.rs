//! Binary weight checkpoints. Single little-endian file: magic "SSMB1",
//! config fields as 64-bit ints (arch tag first), then named tensors as
//! {name-length, utf-8 name, rank, dims, f64 payload}. Round-trips are
//! bit-exact; the decoder is bounds-checked and never panics on hostile
//! input.

use std::path::Path;

use crate::error::{Result, SsmError};
use crate::ssm::{Arch, Model, ModelConfig};

pub const MAGIC: &[u8; 5] = b"SSMB1";
/// Decoder guards against absurd allocations from corrupt headers.
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;

fn arch_tag(arch: Arch) -> u64 {
    match arch {
        Arch::Vanilla => 0,
        Arch::Stable => 1,
    }
}

fn arch_from_tag(tag: u64) -> Result<Arch> {
    match tag {
        0 => Ok(Arch::Vanilla),
        1 => Ok(Arch::Stable),
        other => Err(SsmError::Checkpoint(format!("unknown arch tag {other}"))),
    }
}

/// Serializes a model to the checkpoint byte format.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        arch_tag(model.arch()),
        c.vocab_size as u64,
        c.d_model as u64,
        c.d_inner as u64,
        c.d_state as u64,
        c.d_conv as u64,
        c.n_layers as u64,
        c.seed,
        params.len() as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Lower bound on the number of f64 parameter elements a model with this
/// config holds (exact for the vanilla architecture, conservative for the
/// stable one). Overflow-free via u128.
fn min_param_elements(config: &ModelConfig, arch: Arch) -> u128 {
    let v = config.vocab_size as u128;
    let dm = config.d_model as u128;
    let di = config.d_inner as u128;
    let ds = config.d_state as u128;
    let dc = config.d_conv as u128;
    let nl = config.n_layers as u128;
    let dtr = config.dt_rank() as u128;
    let embed_head = 2 * v * dm;
    let per_layer = match arch {
        Arch::Vanilla => {
            // a_log, d_skip, w_in, conv_w, conv_b, w_x, dt_w, dt_b, w_out
            di * ds
                + di
                + dm * 2 * di
                + dc * di
                + di
                + di * (dtr + 2 * ds)
                + dtr * di
                + di
                + di * dm
        }
        // every stable block carries at least the compression MLP
        // (d_model × d_model/4) and two gate projections (d_model²)
        Arch::Stable => dm * (dm / 4) + 2 * dm * dm,
    };
    embed_head + nl * per_layer
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| SsmError::Checkpoint("length overflow".into()))?;
        if end > self.bytes.len() {
            return Err(SsmError::Checkpoint(format!(
                "truncated: need {end} bytes, have {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a checkpoint. Every model parameter must appear exactly once with
/// the shape the config implies; extra, missing, or misshapen tensors are
/// errors, as is any truncation.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(SsmError::Checkpoint("bad magic".into()));
    }
    let arch = arch_from_tag(cur.u64()?)?;
    let mut field = |label: &str| -> Result<usize> {
        let v = cur.u64()?;
        usize::try_from(v)
            .map_err(|_| SsmError::Checkpoint(format!("{label} {v} out of range")))
    };
    let config = ModelConfig {
        vocab_size: field("vocab_size")?,
        d_model: field("d_model")?,
        d_inner: field("d_inner")?,
        d_state: field("d_state")?,
        d_conv: field("d_conv")?,
        n_layers: field("n_layers")?,
        seed: cur.u64()?,
    };
    config
        .validate()
        .map_err(|e| SsmError::Checkpoint(format!("invalid config: {e}")))?;
    let n_tensors = cur.u64()?;

    // A parseable checkpoint must contain every parameter's f64 payload, so
    // the file length bounds the model size. Rejecting here keeps hostile
    // headers from forcing huge allocations in model construction.
    let budget = (bytes.len() / 8) as u128;
    if min_param_elements(&config, arch) > budget {
        return Err(SsmError::Checkpoint(
            "file too small for the declared model dimensions".into(),
        ));
    }

    let mut model = Model::new(config, arch)
        .map_err(|e| SsmError::Checkpoint(format!("model construction: {e}")))?;
    let expected: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    if n_tensors != expected.len() as u64 {
        return Err(SsmError::Checkpoint(format!(
            "tensor count {n_tensors} does not match the {} model parameters",
            expected.len()
        )));
    }

    let mut filled = vec![false; expected.len()];
    for _ in 0..expected.len() {
        let name_len = cur.u64()?;
        if name_len > MAX_NAME_LEN {
            return Err(SsmError::Checkpoint(format!(
                "name length {name_len} exceeds limit {MAX_NAME_LEN}"
            )));
        }
        let name = std::str::from_utf8(cur.take(name_len as usize)?)
            .map_err(|_| SsmError::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = cur.u64()?;
        if rank > MAX_RANK {
            return Err(SsmError::Checkpoint(format!(
                "rank {rank} exceeds limit {MAX_RANK}"
            )));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = cur.u64()?;
            let d = usize::try_from(d)
                .map_err(|_| SsmError::Checkpoint(format!("dimension {d} out of range")))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| SsmError::Checkpoint("element count overflow".into()))?;
            shape.push(d);
        }
        let payload_len = count
            .checked_mul(8)
            .ok_or_else(|| SsmError::Checkpoint("payload size overflow".into()))?;
        let payload = cur.take(payload_len)?;

        let idx = expected
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| SsmError::Checkpoint(format!("unknown tensor {name:?}")))?;
        if filled[idx] {
            return Err(SsmError::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        filled[idx] = true;

        let mut params = model.named_params_mut();
        let (_, target) = &mut params[idx];
        if target.shape != shape {
            return Err(SsmError::Checkpoint(format!(
                "tensor {name:?} has shape {shape:?}, expected {:?}",
                target.shape
            )));
        }
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            target.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(SsmError::Checkpoint(format!(
            "{} trailing bytes after final tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(arch: Arch, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                vocab_size: 8,
                d_model: 8,
                d_inner: 8,
                d_state: 3,
                d_conv: 2,
                n_layers: if arch == Arch::Stable { 8 } else { 2 },
                seed,
            },
            arch,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_for_both_archs() {
        for arch in [Arch::Vanilla, Arch::Stable] {
            let m = model(arch, 3);
            let bytes = to_bytes(&m);
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(m.config, back.config);
            assert_eq!(m.arch(), back.arch());
            for ((na, pa), (nb, pb)) in
                m.named_params().iter().zip(back.named_params().iter())
            {
                assert_eq!(na, nb);
                let a_bits: Vec<u64> = pa.data.iter().map(|v| v.to_bits()).collect();
                let b_bits: Vec<u64> = pb.data.iter().map(|v| v.to_bits()).collect();
                assert_eq!(a_bits, b_bits, "tensor {na}");
            }
            // and the re-serialization is byte-identical
            assert_eq!(bytes, to_bytes(&back));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssmb");
        let m = model(Arch::Vanilla, 4);
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(to_bytes(&m), to_bytes(&back));
    }

    #[test]
    fn rejects_malformed_headers() {
        let m = model(Arch::Vanilla, 5);
        let good = to_bytes(&m);

        assert!(from_bytes(b"").is_err());
        assert!(from_bytes(b"SSMB").is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());

        let mut bad_arch = good.clone();
        bad_arch[5] = 9;
        assert!(from_bytes(&bad_arch).is_err());

        // zero vocab fails config validation
        let mut bad_config = good.clone();
        for b in &mut bad_config[13..21] {
            *b = 0;
        }
        assert!(from_bytes(&bad_config).is_err());

        // truncation anywhere fails cleanly
        for cut in [10, 80, good.len() - 1] {
            assert!(from_bytes(&good[..cut]).is_err());
        }
        // trailing garbage is rejected
        let mut extended = good.clone();
        extended.push(0);
        assert!(from_bytes(&extended).is_err());
    }

    #[test]
    fn rejects_tensor_tampering() {
        let m = model(Arch::Vanilla, 6);
        let good = to_bytes(&m);
        let header_len = 5 + 9 * 8;

        // corrupt the first tensor's name
        let mut bad_name = good.clone();
        bad_name[header_len + 8] ^= 0xff;
        assert!(from_bytes(&bad_name).is_err());

        // absurd name length
        let mut bad_len = good.clone();
        bad_len[header_len..header_len + 8]
            .copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(from_bytes(&bad_len).is_err());
    }

    #[test]
    fn special_float_bits_survive() {
        let mut m = model(Arch::Vanilla, 7);
        m.embed.data[0] = f64::NAN;
        m.embed.data[1] = f64::NEG_INFINITY;
        m.embed.data[2] = -0.0;
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(m.embed.data[0].to_bits(), back.embed.data[0].to_bits());
        assert_eq!(m.embed.data[1].to_bits(), back.embed.data[1].to_bits());
        assert_eq!(m.embed.data[2].to_bits(), back.embed.data[2].to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_models_round_trip(seed in any::<u64>(), stable in any::<bool>()) {
            let arch = if stable { Arch::Stable } else { Arch::Vanilla };
            let m = model(arch, seed);
            let bytes = to_bytes(&m);
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(bytes, to_bytes(&back));
        }

        #[test]
        fn decoder_never_panics_on_noise(bytes in proptest::collection::vec(any::<u8>(), 0..2048)) {
            let _ = from_bytes(&bytes);
        }

        #[test]
        fn decoder_never_panics_on_mutated_checkpoints(
            seed in 0u64..16,
            flips in proptest::collection::vec((any::<u16>(), any::<u8>()), 1..8),
            cut in any::<u16>(),
        ) {
            let m = model(Arch::Vanilla, seed);
            let mut bytes = to_bytes(&m);
            for (pos, mask) in flips {
                let i = pos as usize % bytes.len();
                bytes[i] ^= mask;
            }
            let len = (cut as usize % bytes.len()).max(1);
            let _ = from_bytes(&bytes[..len]);
            let _ = from_bytes(&bytes);
        }
    }
}
