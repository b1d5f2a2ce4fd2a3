/// Reserved id prepended when a BOS marker is configured.
pub const BOS_ID: u32 = 256;

/// Byte-level tokenizer: one token per byte, optionally preceded by BOS.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer {
    pub bos: bool,
}

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        if self.bos {
            257
        } else {
            256
        }
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() + self.bos as usize);
        if self.bos {
            out.push(BOS_ID);
        }
        out.extend(text.iter().map(|&b| b as u32));
        out
    }

    /// Inverse of `encode`; ids outside the byte range are dropped.
    pub fn decode(&self, tokens: &[u32]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect()
    }
}

pub fn byte_tokenize(text: &[u8]) -> Vec<u32> {
    ByteTokenizer::default().encode(text)
}

pub fn byte_detokenize(tokens: &[u32]) -> Vec<u8> {
    ByteTokenizer::default().decode(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abc_round_trip() {
        let t = byte_tokenize(b"abc");
        assert_eq!(t, vec![97, 98, 99]);
        assert_eq!(byte_detokenize(&t), b"abc");
    }

    #[test]
    fn empty_text() {
        assert!(byte_tokenize(b"").is_empty());
    }

    #[test]
    fn every_byte_round_trips() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(byte_detokenize(&byte_tokenize(&all)), all);
    }

    #[test]
    fn bos_is_prepended_and_stripped() {
        let tok = ByteTokenizer { bos: true };
        assert_eq!(tok.vocab_size(), 257);
        let t = tok.encode(b"hi");
        assert_eq!(t, vec![BOS_ID, 104, 105]);
        assert_eq!(tok.decode(&t), b"hi");
    }
}
