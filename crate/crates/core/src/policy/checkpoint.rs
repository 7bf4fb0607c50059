//! Versioned binary checkpoint for the toy policy.
//!
//! Layout: magic + format version, bucket count, vocabulary (ordered,
//! length-prefixed UTF-8), then the four weight tensors as little-endian
//! f64. Weights round-trip bit for bit, and identical policies serialize to
//! identical bytes.

use std::io::{Read, Write};

use super::{ParamSet, PolicyError, ToyTutorPolicy, Vocab, N_ACTION, N_EVAL, N_GROUPS, N_SUBSTATE};

const MAGIC: &[u8; 8] = b"TUTRPOL\0";
const VERSION: u32 = 1;

pub fn save_checkpoint<W: Write>(policy: &ToyTutorPolicy, mut w: W) -> Result<(), PolicyError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(policy.n_buckets as u64).to_le_bytes())?;
    w.write_all(&(policy.vocab.len() as u64).to_le_bytes())?;
    for tok in policy.vocab.tokens() {
        let bytes = tok.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    for tensor in policy.weights.tensors() {
        for &value in tensor {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<ToyTutorPolicy, PolicyError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PolicyError::BadCheckpoint("unrecognized file magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(PolicyError::BadCheckpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_buckets = read_u64(&mut r)? as usize;
    if n_buckets == 0 {
        return Err(PolicyError::BadCheckpoint("bucket count must be positive".into()));
    }
    let vocab_len = read_u64(&mut r)? as usize;
    let mut tokens = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        tokens.push(String::from_utf8(buf).map_err(|e| {
            PolicyError::BadCheckpoint(format!("vocabulary token is not UTF-8: {e}"))
        })?);
    }
    let vocab = Vocab::from_tokens(tokens)?;

    let mut weights = ParamSet::zeros(n_buckets, vocab.len());
    for (tensor, expect) in weights.tensors_mut().into_iter().zip([
        n_buckets * N_EVAL,
        n_buckets * N_ACTION,
        n_buckets * N_SUBSTATE,
        N_GROUPS * vocab.len() * vocab.len(),
    ]) {
        debug_assert_eq!(tensor.len(), expect);
        for value in tensor.iter_mut() {
            *value = read_f64(&mut r)?;
        }
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(PolicyError::BadCheckpoint("trailing bytes after weights".into()));
    }
    Ok(ToyTutorPolicy { n_buckets, vocab, weights })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PolicyError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, PolicyError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, PolicyError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
