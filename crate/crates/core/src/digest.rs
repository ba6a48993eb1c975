//! Content digests and the canonical byte encoding used for hashing,
//! signatures, and golden serializations.
//!
//! Every protocol object encodes as length-prefixed fields in declaration
//! order, prefixed with a one-byte type tag for domain separation. The same
//! bytes feed SHA-256 digests and the pinned hex dumps, so the encoding is
//! part of the wire contract: field order and widths must not change.

use sha2::{Digest as _, Sha256};
use std::fmt;

/// 256-bit content digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    /// All-zero sentinel; used as the merkle root of an empty leaf set and
    /// as the parent hash of genesis blocks.
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        let mut h = Sha256::new();
        h.update(bytes);
        Digest(h.finalize().into())
    }

    /// Digest of two concatenated digests; interior merkle node.
    pub fn pair(left: &Digest, right: &Digest) -> Digest {
        let mut h = Sha256::new();
        h.update([0x02u8]);
        h.update(left.0);
        h.update(right.0);
        Digest(h.finalize().into())
    }

    pub fn hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// First 8 hex chars; used in trace lines and debug output.
    pub fn short(&self) -> String {
        self.hex()[..8].to_string()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

impl serde::Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.hex())
    }
}

impl<'de> serde::Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        if s.len() != 64 {
            return Err(serde::de::Error::custom("digest hex must be 64 chars"));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(serde::de::Error::custom)?;
        }
        Ok(Digest(out))
    }
}

/// Incremental canonical encoder. Integers are little-endian fixed width;
/// variable-length content is u32-length-prefixed.
#[derive(Default)]
pub struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    pub fn tagged(tag: u8) -> Enc {
        Enc { buf: vec![tag] }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(&d.0);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    /// Length-prefixed list of canonical items.
    pub fn list<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.u32(items.len() as u32);
        for it in items {
            let b = it.canonical_bytes();
            self.bytes(&b);
        }
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

/// Canonical byte encoding shared by hashing and golden serialization.
pub trait Canonical {
    fn canonical_bytes(&self) -> Vec<u8>;

    fn content_digest(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_hex_roundtrips() {
        let d = Digest::of(b"abc");
        // SHA-256("abc"), a fixed reference value.
        assert_eq!(
            d.hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let json = serde_json::to_string(&d).unwrap();
        let back: Digest = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn enc_is_order_and_width_sensitive() {
        let mut a = Enc::tagged(1);
        a.u32(7).u64(9);
        let mut b = Enc::tagged(1);
        b.u64(9).u32(7);
        assert_ne!(a.finish(), b.finish());
    }

    #[test]
    fn pair_depends_on_side() {
        let l = Digest::of(b"l");
        let r = Digest::of(b"r");
        assert_ne!(Digest::pair(&l, &r), Digest::pair(&r, &l));
    }
}
