//! Symbol vocabulary with [BOS]/[EOS]/[PAD] bookkeeping and label encoding.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Ordered symbol set. Class symbols occupy ids `0..n`; the specials follow.
/// In the 96-way charset, [PAD] shares the [BOS] id (BOS never appears as a
/// supervision target, so masking stays unambiguous) which keeps the total at
/// exactly 96.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<char>,
    by_char: HashMap<char, usize>,
    eos: usize,
    bos: usize,
    pad: usize,
    size: usize,
}

impl Vocabulary {
    /// Desk vocabulary: the given class symbols plus distinct EOS/BOS/PAD.
    pub fn new(symbols: &[char]) -> Vocabulary {
        let by_char: HashMap<char, usize> =
            symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        assert_eq!(by_char.len(), symbols.len(), "duplicate vocabulary symbol");
        let n = symbols.len();
        Vocabulary {
            symbols: symbols.to_vec(),
            by_char,
            eos: n,
            bos: n + 1,
            pad: n + 2,
            size: n + 3,
        }
    }

    /// The 96-symbol charset: the 94 printable ASCII characters (mixed-case
    /// alphanumerics plus punctuation) with EOS and BOS appended; PAD aliases
    /// BOS so the table stays at 96 rows.
    pub fn charset_96() -> Vocabulary {
        let symbols: Vec<char> = (0x21u8..=0x7e).map(|b| b as char).collect();
        debug_assert_eq!(symbols.len(), 94);
        let by_char: HashMap<char, usize> =
            symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Vocabulary {
            symbols,
            by_char,
            eos: 94,
            bos: 95,
            pad: 95,
            size: 96,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }
    pub fn eos_id(&self) -> usize {
        self.eos
    }
    pub fn bos_id(&self) -> usize {
        self.bos
    }
    pub fn pad_id(&self) -> usize {
        self.pad
    }
    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn id_of(&self, c: char) -> Result<usize> {
        self.by_char.get(&c).copied().ok_or(Error::UnknownSymbol(c))
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    /// Symbol ids plus [EOS], padded with [PAD] to exactly `max_len`.
    /// The label must leave room for the terminator.
    pub fn encode_label(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() + 1 > max_len {
            return Err(Error::Input(format!(
                "label {:?} (len {}) does not fit max_len {max_len} with its terminator",
                text,
                chars.len()
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        for c in chars {
            ids.push(self.id_of(c)?);
        }
        ids.push(self.eos);
        ids.resize(max_len, self.pad);
        Ok(ids)
    }

    /// Inverse of `encode_label`: symbols up to (excluding) the first EOS.
    pub fn decode_ids(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == self.eos || id == self.pad || id == self.bos {
                break;
            }
            if let Some(c) = self.char_of(id) {
                s.push(c);
            }
        }
        s
    }
}

/// 36-class evaluation folding: lowercase, then keep alphanumerics only.
/// Applied to predictions and labels before exact matching when enabled.
pub fn fold_case_36(s: &str) -> String {
    s.chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_vocab() -> Vocabulary {
        Vocabulary::new(&['a', 'b', 'c'])
    }

    #[test]
    fn encode_empty_is_eos_then_pads() {
        let v = desk_vocab();
        let ids = v.encode_label("", 5).unwrap();
        assert_eq!(ids, vec![v.eos_id(), v.pad_id(), v.pad_id(), v.pad_id(), v.pad_id()]);
    }

    #[test]
    fn encode_pads_to_t() {
        let v = desk_vocab();
        let ids = v.encode_label("abc", 25).unwrap();
        assert_eq!(&ids[..4], &[0, 1, 2, v.eos_id()]);
        assert_eq!(ids.len(), 25);
        assert!(ids[4..].iter().all(|&id| id == v.pad_id()));
    }

    #[test]
    fn boundary_label_exactly_fills() {
        let v = desk_vocab();
        let ids = v.encode_label("abca", 5).unwrap();
        assert_eq!(ids, vec![0, 1, 2, 0, v.eos_id()]);
        assert!(v.encode_label("abcab", 5).is_err());
    }

    #[test]
    fn unknown_symbol_is_vocab_error() {
        let v = desk_vocab();
        assert!(matches!(v.encode_label("axe", 9), Err(Error::UnknownSymbol('x'))));
    }

    #[test]
    fn round_trip() {
        let v = desk_vocab();
        for s in ["", "a", "cba", "abcc"] {
            let ids = v.encode_label(s, 8).unwrap();
            assert_eq!(v.decode_ids(&ids), s);
        }
    }

    #[test]
    fn charset_96_layout() {
        let v = Vocabulary::charset_96();
        assert_eq!(v.size(), 96);
        assert_eq!(v.num_symbols(), 94);
        assert_eq!(v.pad_id(), v.bos_id());
        assert_eq!(v.id_of('!').unwrap(), 0);
        assert_eq!(v.id_of('~').unwrap(), 93);
    }

    #[test]
    fn folding_lowercases_and_drops_punctuation() {
        assert_eq!(fold_case_36("AbC-12!"), "abc12");
        assert_eq!(fold_case_36("HELLO"), "hello");
    }
}
