use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Rows in the hashed embedding table.
pub const TEXT_VOCAB: usize = 4096;
pub const D_TEXT: usize = 64;
pub const DEFAULT_TEXT_LEN: usize = 128;
const TABLE_SEED: u64 = 0x7465_7874_7461_626c;

fn table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
        (0..TEXT_VOCAB * D_TEXT).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect()
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `len x D_TEXT` token embeddings. Positions at or past `valid` hold the
/// null (all-zero) embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens {
    pub len: usize,
    pub valid: usize,
    pub tokens: Vec<f64>,
}

impl TextTokens {
    pub fn null(len: usize) -> Self {
        Self {
            len,
            valid: 0,
            tokens: vec![0.0; len * D_TEXT],
        }
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * D_TEXT..(i + 1) * D_TEXT]
    }

    /// Mean embedding over the non-null positions; zero when there are none.
    pub fn mean_valid(&self) -> Vec<f64> {
        let mut out = vec![0.0; D_TEXT];
        if self.valid == 0 {
            return out;
        }
        for i in 0..self.valid {
            for (o, v) in out.iter_mut().zip(self.token(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.valid as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Hashed bag-of-tokens text stub with `DEFAULT_TEXT_LEN` positions.
pub fn encode_text(instruction: &str) -> TextTokens {
    encode_text_len(instruction, DEFAULT_TEXT_LEN)
}

/// Lowercases, splits on whitespace and looks every token up by FNV-1a
/// hash; padded with null tokens or truncated to `len`.
pub fn encode_text_len(instruction: &str, len: usize) -> TextTokens {
    let mut out = TextTokens::null(len);
    let table = table();
    let lower = instruction.to_lowercase();
    for (i, word) in lower.split_whitespace().take(len).enumerate() {
        let row = (fnv1a(word.as_bytes()) % TEXT_VOCAB as u64) as usize;
        out.tokens[i * D_TEXT..(i + 1) * D_TEXT].copy_from_slice(&table[row * D_TEXT..(row + 1) * D_TEXT]);
        out.valid = i + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_string_is_null() {
        assert_eq!(encode_text(""), TextTokens::null(DEFAULT_TEXT_LEN));
        assert_eq!(encode_text("  \t ").valid, 0);
    }

    #[test]
    fn encoding_is_deterministic_and_case_blind() {
        assert_eq!(encode_text("Fold the garment"), encode_text("fold  the garment"));
    }

    #[test]
    fn shared_prefix_shares_embeddings() {
        let a = encode_text("fold the garment");
        let b = encode_text("fold the garment in half");
        assert_eq!((a.valid, b.valid), (3, 5));
        for i in 0..3 {
            assert_eq!(a.token(i), b.token(i));
        }
        assert_ne!(b.token(3), b.token(4));
        assert!(a.token(3).iter().all(|v| *v == 0.0));
        // Hash-row oracle for the first token.
        let row = (fnv1a(b"fold") % TEXT_VOCAB as u64) as usize;
        assert_eq!(a.token(0), &table()[row * D_TEXT..(row + 1) * D_TEXT]);
    }

    #[test]
    fn long_input_is_truncated() {
        let words = vec!["go"; 300].join(" ");
        let t = encode_text_len(&words, 16);
        assert_eq!((t.len, t.valid, t.tokens.len()), (16, 16, 16 * D_TEXT));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
