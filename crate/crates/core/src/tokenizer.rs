//! Single-nucleotide tokenizer and the token-shard file format.
//!
//! Shard layout: one ASCII header line
//!
//! ```text
//! GENELM-TOKENS v1 vocab=PAD,UNK,A,C,G,T window_len=<L> n_windows=<N>\n
//! ```
//!
//! followed by `N * L` raw `u8` token ids, window after window.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u8;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const VOCAB_SIZE: usize = 6;
pub const SYMBOLS: [&str; VOCAB_SIZE] = ["PAD", "UNK", "A", "C", "G", "T"];

pub const SHARD_MAGIC: &str = "GENELM-TOKENS v1";

/// Fixed vocabulary `[PAD, UNK, A, C, G, T]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn symbols(&self) -> &'static [&'static str] {
        &SYMBOLS
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        SYMBOLS.iter().position(|s| *s == symbol).map(|i| i as TokenId)
    }

    /// Targets that never contribute to the loss.
    pub fn is_scored(id: TokenId) -> bool {
        id != PAD && id != UNK
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Optional (record, start) source coordinates.
    pub origin: Option<(usize, usize)>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids, origin: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[inline]
fn encode_byte(b: u8) -> TokenId {
    match b {
        b'A' => 2,
        b'C' => 3,
        b'G' => 4,
        b'T' => 5,
        _ => UNK,
    }
}

/// One token per letter; A/C/G/T map to their ids, other letters to UNK.
pub fn encode(dna: &str) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(dna.len());
    for (i, b) in dna.bytes().enumerate() {
        if !b.is_ascii_alphabetic() {
            return Err(Error::InvalidInput(format!(
                "non-letter byte 0x{b:02x} at offset {i}"
            )));
        }
        ids.push(encode_byte(b.to_ascii_uppercase()));
    }
    Ok(TokenSequence::new(ids))
}

/// Inverse of [`encode`] on ACGT; UNK becomes `N` and PAD is dropped.
pub fn decode(ids: &[TokenId]) -> Result<String> {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        match id {
            PAD => {}
            UNK => out.push('N'),
            2 => out.push('A'),
            3 => out.push('C'),
            4 => out.push('G'),
            5 => out.push('T'),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "token id {id} outside vocabulary of size {VOCAB_SIZE}"
                )))
            }
        }
    }
    Ok(out)
}

/// A shard in memory: `n_windows` windows of `window_len` ids each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenShard {
    pub window_len: usize,
    pub data: Vec<TokenId>,
}

impl TokenShard {
    pub fn from_windows<S: AsRef<str>>(windows: &[S], window_len: usize) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::invalid_arg("window_len must be at least 1"));
        }
        let mut data = Vec::with_capacity(windows.len() * window_len);
        for w in windows {
            let w = w.as_ref();
            if w.len() != window_len {
                return Err(Error::invalid_arg(format!(
                    "window of length {} in a shard of window_len {window_len}",
                    w.len()
                )));
            }
            data.extend(encode(w)?.ids);
        }
        Ok(TokenShard { window_len, data })
    }

    pub fn n_windows(&self) -> usize {
        self.data.len() / self.window_len
    }

    pub fn window(&self, i: usize) -> &[TokenId] {
        &self.data[i * self.window_len..(i + 1) * self.window_len]
    }

    pub fn windows(&self) -> impl Iterator<Item = &[TokenId]> {
        self.data.chunks_exact(self.window_len)
    }

    /// Re-cuts the shard into shorter windows by splitting each stored window.
    pub fn rewindow(&self, new_len: usize) -> Result<TokenShard> {
        if new_len == 0 || new_len > self.window_len {
            return Err(Error::DataConfig(format!(
                "cannot re-window shard of window_len {} into windows of {new_len}",
                self.window_len
            )));
        }
        let mut data = Vec::new();
        for w in self.windows() {
            for c in w.chunks_exact(new_len) {
                data.extend_from_slice(c);
            }
        }
        Ok(TokenShard {
            window_len: new_len,
            data,
        })
    }

    pub fn header_line(&self) -> String {
        format!(
            "{SHARD_MAGIC} vocab={} window_len={} n_windows={}\n",
            SYMBOLS.join(","),
            self.window_len,
            self.n_windows()
        )
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.header_line().as_bytes())?;
        out.write_all(&self.data)?;
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: BufRead>(mut input: R) -> Result<TokenShard> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let fmt_err = |m: &str| Error::MalformedInput {
            line: 1,
            message: m.to_string(),
        };
        let rest = header
            .strip_suffix('\n')
            .and_then(|h| h.strip_prefix(SHARD_MAGIC))
            .ok_or_else(|| fmt_err("missing GENELM-TOKENS v1 header"))?;
        let mut window_len = None;
        let mut n_windows = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("vocab", v)) if v == SYMBOLS.join(",") => {}
                Some(("vocab", v)) => return Err(fmt_err(&format!("unsupported vocabulary {v}"))),
                Some(("window_len", v)) => window_len = v.parse::<usize>().ok(),
                Some(("n_windows", v)) => n_windows = v.parse::<usize>().ok(),
                _ => return Err(fmt_err(&format!("unknown header field {field}"))),
            }
        }
        let (window_len, n_windows) = match (window_len, n_windows) {
            (Some(w), Some(n)) if w > 0 => (w, n),
            _ => return Err(fmt_err("header lacks window_len/n_windows")),
        };
        let mut data = Vec::with_capacity(window_len * n_windows);
        input.read_to_end(&mut data)?;
        if data.len() != window_len * n_windows {
            return Err(Error::InvalidInput(format!(
                "shard payload has {} bytes, header declares {}",
                data.len(),
                window_len * n_windows
            )));
        }
        if let Some(bad) = data.iter().find(|&&b| b as usize >= VOCAB_SIZE) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
        }
        Ok(TokenShard { window_len, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TokenShard> {
        TokenShard::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_table() {
        assert_eq!(encode("ACGT").unwrap().ids, vec![2, 3, 4, 5]);
        assert_eq!(encode("ACGN").unwrap().ids, vec![2, 3, 4, 1]);
    }

    #[test]
    fn encode_rejects_non_letters() {
        assert!(matches!(encode("AC GT"), Err(Error::InvalidInput(_))));
        assert!(encode("AC1").is_err());
    }

    #[test]
    fn decode_table() {
        assert_eq!(decode(&[2, 3, 4, 5]).unwrap(), "ACGT");
        assert_eq!(decode(&[1]).unwrap(), "N");
        assert_eq!(decode(&[0, 2]).unwrap(), "A");
        assert!(decode(&[6]).is_err());
    }

    #[test]
    fn vocabulary_is_contiguous() {
        let v = Vocabulary;
        for (i, s) in v.symbols().iter().enumerate() {
            assert_eq!(v.id_of(s), Some(i as u8));
        }
        assert_eq!(v.size(), 6);
    }

    #[test]
    fn shard_bytes_are_exact() {
        let shard = TokenShard::from_windows(&["ACGT", "TTNA"], 4).unwrap();
        let mut buf = Vec::new();
        shard.write_to(&mut buf).unwrap();
        let mut expected =
            b"GENELM-TOKENS v1 vocab=PAD,UNK,A,C,G,T window_len=4 n_windows=2\n".to_vec();
        expected.extend_from_slice(&[2, 3, 4, 5, 5, 5, 1, 2]);
        assert_eq!(buf, expected);
        assert_eq!(TokenShard::read_from(&buf[..]).unwrap(), shard);
    }

    #[test]
    fn truncated_shard_rejected() {
        let shard = TokenShard::from_windows(&["ACGT"], 4).unwrap();
        let mut buf = Vec::new();
        shard.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(TokenShard::read_from(&buf[..]).is_err());
    }

    #[test]
    fn rewindow_splits_windows() {
        let shard = TokenShard::from_windows(&["ACGTACG", "TTTTCCC"], 7).unwrap();
        let short = shard.rewindow(3).unwrap();
        assert_eq!(short.n_windows(), 4);
        assert_eq!(decode(short.window(2)).unwrap(), "TTT");
    }

    proptest! {
        #[test]
        fn round_trip_over_acgt(s in "[ACGT]{0,200}") {
            let enc = encode(&s).unwrap();
            prop_assert_eq!(enc.len(), s.len());
            prop_assert_eq!(decode(&enc.ids).unwrap(), s);
        }

        #[test]
        fn ids_stay_in_vocab(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let letters: String = bytes.into_iter().filter(u8::is_ascii_alphabetic).map(char::from).collect();
            let enc = encode(&letters).unwrap();
            prop_assert_eq!(enc.len(), letters.len());
            prop_assert!(enc.ids.iter().all(|&id| (id as usize) < VOCAB_SIZE));
        }
    }
}
