use serde::{Deserialize, Serialize};

use crate::diff::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_SYMBOLS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Plate symbols plus one trailing pad class; `V = symbols + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::new(DEFAULT_SYMBOLS).expect("default alphabet")
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> Self {
        a.symbols.iter().collect()
    }
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Argument("alphabet has no symbols".into()));
        }
        let mut sorted = symbols.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("alphabet repeats a symbol".into()));
        }
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Vocabulary size including the pad class.
    pub fn vocab(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.symbols.len()
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// Class indices of `text` padded to length `l`.
    pub fn encode(&self, text: &str, l: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(l);
        for c in text.chars() {
            out.push(self.index(c).ok_or_else(|| Error::Argument(format!("symbol {c:?} not in alphabet")))?);
        }
        if out.len() > l {
            return Err(Error::Argument(format!("{text:?} is longer than {l} symbols")));
        }
        out.resize(l, self.pad());
        Ok(out)
    }

    /// One-hot `l×V` grid for `text`.
    pub fn one_hot<T: Real>(&self, text: &str, l: usize) -> Result<Tensor<T>> {
        let idx = self.encode(text, l)?;
        let v = self.vocab();
        let mut t = Tensor::zeros(vec![l, v]);
        for (row, &k) in idx.iter().enumerate() {
            t.data_mut()[row * v + k] = T::one();
        }
        Ok(t)
    }
}

/// Per-position argmax (lowest index wins ties) with pad symbols removed.
pub fn decode<T: Real>(probs: &Tensor<T>, alphabet: &Alphabet) -> String {
    let v = probs.shape()[probs.shape().len() - 1];
    assert_eq!(v, alphabet.vocab(), "probability grid width must equal the vocabulary size");
    probs
        .data()
        .chunks(v)
        .filter_map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            alphabet.symbols().get(best).copied()
        })
        .collect()
}
