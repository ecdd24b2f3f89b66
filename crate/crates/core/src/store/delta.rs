//! Block-based binary differencing: rolling-hash matching over 4 KB base
//! blocks, copy ops extended forward byte-wise, literals in between.

use thiserror::Error;

use crate::util::{read_varint, write_varint};

pub const BLOCK_SIZE: usize = 4096;

const OP_LITERAL: u8 = 0;
const OP_COPY: u8 = 1;

#[derive(Debug, Error)]
pub enum DeltaError {
    #[error("corrupt delta: {0}")]
    Corrupt(String),
}

/// Adler-style weak rolling hash over a fixed window.
#[derive(Clone, Copy)]
struct Rolling {
    a: u32,
    b: u32,
    window: usize,
}

impl Rolling {
    fn init(data: &[u8]) -> Self {
        let mut a = 0u32;
        let mut b = 0u32;
        for (i, &x) in data.iter().enumerate() {
            a = a.wrapping_add(x as u32);
            b = b.wrapping_add(((data.len() - i) as u32).wrapping_mul(x as u32));
        }
        Rolling {
            a,
            b,
            window: data.len(),
        }
    }

    fn roll(&mut self, out: u8, incoming: u8) {
        self.a = self.a.wrapping_sub(out as u32).wrapping_add(incoming as u32);
        self.b = self
            .b
            .wrapping_sub((self.window as u32).wrapping_mul(out as u32))
            .wrapping_add(self.a);
    }

    fn digest(&self) -> u32 {
        (self.a & 0xffff) | (self.b << 16)
    }
}

/// Computes a delta whose application to `base` reproduces `target`
/// byte-exactly. The stream starts with the target length.
pub fn make_delta(base: &[u8], target: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    write_varint(target.len() as u64, &mut out);

    if base.len() < BLOCK_SIZE || target.len() < BLOCK_SIZE {
        emit_literal(&mut out, target);
        return out;
    }

    // Index non-overlapping base blocks by weak hash.
    let mut index: std::collections::HashMap<u32, Vec<usize>> = std::collections::HashMap::new();
    let mut off = 0;
    while off + BLOCK_SIZE <= base.len() {
        let h = Rolling::init(&base[off..off + BLOCK_SIZE]).digest();
        index.entry(h).or_default().push(off);
        off += BLOCK_SIZE;
    }

    let mut pos = 0usize;
    let mut literal_start = 0usize;
    let mut rolling = Rolling::init(&target[0..BLOCK_SIZE]);
    loop {
        if pos + BLOCK_SIZE > target.len() {
            break;
        }
        let mut matched: Option<(usize, usize)> = None; // (base offset, length)
        if let Some(candidates) = index.get(&rolling.digest()) {
            for &boff in candidates {
                if base[boff..boff + BLOCK_SIZE] == target[pos..pos + BLOCK_SIZE] {
                    let mut len = BLOCK_SIZE;
                    while boff + len < base.len()
                        && pos + len < target.len()
                        && base[boff + len] == target[pos + len]
                    {
                        len += 1;
                    }
                    matched = Some((boff, len));
                    break;
                }
            }
        }
        match matched {
            Some((boff, len)) => {
                emit_literal(&mut out, &target[literal_start..pos]);
                out.push(OP_COPY);
                write_varint(boff as u64, &mut out);
                write_varint(len as u64, &mut out);
                pos += len;
                literal_start = pos;
                if pos + BLOCK_SIZE <= target.len() {
                    rolling = Rolling::init(&target[pos..pos + BLOCK_SIZE]);
                }
            }
            None => {
                if pos + BLOCK_SIZE < target.len() {
                    rolling.roll(target[pos], target[pos + BLOCK_SIZE]);
                }
                pos += 1;
            }
        }
    }
    emit_literal(&mut out, &target[literal_start..]);
    out
}

fn emit_literal(out: &mut Vec<u8>, bytes: &[u8]) {
    if bytes.is_empty() {
        return;
    }
    out.push(OP_LITERAL);
    write_varint(bytes.len() as u64, out);
    out.extend_from_slice(bytes);
}

/// Applies a delta stream to its base.
pub fn apply_delta(base: &[u8], delta: &[u8]) -> Result<Vec<u8>, DeltaError> {
    let mut pos = 0usize;
    let target_len = read_varint(delta, &mut pos)
        .ok_or_else(|| DeltaError::Corrupt("missing target length".into()))?
        as usize;
    let mut out = Vec::with_capacity(target_len);
    while pos < delta.len() {
        let op = delta[pos];
        pos += 1;
        match op {
            OP_LITERAL => {
                let len = read_varint(delta, &mut pos)
                    .ok_or_else(|| DeltaError::Corrupt("bad literal length".into()))?
                    as usize;
                if pos + len > delta.len() {
                    return Err(DeltaError::Corrupt("literal overruns stream".into()));
                }
                out.extend_from_slice(&delta[pos..pos + len]);
                pos += len;
            }
            OP_COPY => {
                let off = read_varint(delta, &mut pos)
                    .ok_or_else(|| DeltaError::Corrupt("bad copy offset".into()))?
                    as usize;
                let len = read_varint(delta, &mut pos)
                    .ok_or_else(|| DeltaError::Corrupt("bad copy length".into()))?
                    as usize;
                if off + len > base.len() {
                    return Err(DeltaError::Corrupt("copy overruns base".into()));
                }
                out.extend_from_slice(&base[off..off + len]);
            }
            other => return Err(DeltaError::Corrupt(format!("unknown op {other}"))),
        }
    }
    if out.len() != target_len {
        return Err(DeltaError::Corrupt(format!(
            "reconstructed {} bytes, expected {target_len}",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_bytes(rng: &mut StdRng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.random::<u8>()).collect()
    }

    #[test]
    fn round_trip_small_edit() {
        let mut rng = StdRng::seed_from_u64(1);
        let base = random_bytes(&mut rng, 1 << 20); // 1 MB
        let mut target = base.clone();
        // Overwrite 1 KB in the middle.
        for i in 0..1024 {
            target[500_000 + i] ^= 0xa5;
        }
        let delta = make_delta(&base, &target);
        assert!(
            delta.len() < 50 * 1024,
            "delta {} bytes, expected well under 50 KB",
            delta.len()
        );
        assert_eq!(apply_delta(&base, &delta).unwrap(), target);
    }

    #[test]
    fn round_trip_insertion() {
        let mut rng = StdRng::seed_from_u64(2);
        let base = random_bytes(&mut rng, 64 * 1024);
        let mut target = base[..30_000].to_vec();
        target.extend_from_slice(b"wholly new middle section");
        target.extend_from_slice(&base[30_000..]);
        let delta = make_delta(&base, &target);
        assert!(delta.len() < target.len() / 2);
        assert_eq!(apply_delta(&base, &delta).unwrap(), target);
    }

    #[test]
    fn unrelated_content_degrades_to_literal() {
        let mut rng = StdRng::seed_from_u64(3);
        let base = random_bytes(&mut rng, 8192);
        let target = random_bytes(&mut rng, 8192);
        let delta = make_delta(&base, &target);
        assert_eq!(apply_delta(&base, &delta).unwrap(), target);
    }

    #[test]
    fn tiny_inputs() {
        let delta = make_delta(b"abc", b"abcdef");
        assert_eq!(apply_delta(b"abc", &delta).unwrap(), b"abcdef");
        let delta = make_delta(b"", b"");
        assert_eq!(apply_delta(b"", &delta).unwrap(), b"");
    }

    #[test]
    fn corrupt_streams_rejected() {
        let base = vec![0u8; 8192];
        let target = vec![1u8; 8192];
        let delta = make_delta(&base, &target);
        assert!(apply_delta(&base, &delta[..delta.len() - 3]).is_err());
        let mut bad = delta.clone();
        bad[0] = 0xff; // implausible target length
        assert!(apply_delta(&base, &bad).is_err());
    }
}
