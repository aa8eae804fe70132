//! Byte-level corpus with a deterministic train/validation split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Batch;
use crate::diffcore::RngState;
use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const VOCAB_SIZE: usize = 259;

/// Suggested minimum corpus size; smaller inputs train but overfit quickly.
pub const RECOMMENDED_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Prose,
    Code,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    bytes: Vec<u8>,
    /// `bytes[..split]` is training data, the rest validation.
    split: usize,
}

impl Corpus {
    /// Holds out the trailing `validation_fraction` of the bytes.
    pub fn from_bytes(bytes: Vec<u8>, validation_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!("validation fraction {validation_fraction} not in [0, 1)")));
        }
        let split = bytes.len() - (bytes.len() as f64 * validation_fraction).round() as usize;
        Ok(Self { bytes, split })
    }

    pub fn from_file(path: &Path, validation_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if std::str::from_utf8(&bytes).is_err() {
            return Err(Error::Config(format!("{} is not UTF-8 text", path.display())));
        }
        Self::from_bytes(bytes, validation_fraction)
    }

    pub fn synthetic(kind: SyntheticKind, n_bytes: usize, seed: u64, validation_fraction: f64) -> Result<Self> {
        Self::from_bytes(synthetic_text(kind, n_bytes, seed).into_bytes(), validation_fraction)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn is_small(&self) -> bool {
        self.bytes.len() < RECOMMENDED_BYTES
    }

    pub fn part(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.bytes[..self.split],
            Split::Validation => &self.bytes[self.split..],
        }
    }

    /// `batch` windows of `len` tokens at uniformly drawn offsets.
    pub fn sample_batch(&self, split: Split, batch: usize, len: usize, rng: &mut RngState) -> Result<Batch> {
        let data = self.part(split);
        if batch == 0 {
            return Err(Error::EmptyBatch("batch size 0".into()));
        }
        if data.len() < len {
            return Err(Error::Config(format!("{split:?} split has {} bytes, window needs {len}", data.len())));
        }
        let span = data.len() - len + 1;
        let tokens = (0..batch)
            .map(|_| {
                let o = rng.below(span);
                data[o..o + len].iter().map(|&b| b as usize).collect()
            })
            .collect();
        Batch::new(tokens)
    }

    /// Consecutive non-overlapping windows from the start of `split`.
    pub fn windows(&self, split: Split, len: usize, max: usize) -> Vec<Vec<usize>> {
        self.part(split).chunks_exact(len).take(max).map(|w| w.iter().map(|&b| b as usize).collect()).collect()
    }
}

const NOUNS: [&str; 24] = [
    "river", "garden", "letter", "window", "village", "lantern", "horse", "winter", "bridge", "sailor", "forest",
    "mother", "king", "road", "candle", "harbor", "valley", "clock", "stone", "bird", "captain", "house", "field",
    "ship",
];
const ADJS: [&str; 16] = [
    "old", "quiet", "bright", "cold", "small", "distant", "golden", "heavy", "young", "silent", "narrow", "green",
    "broken", "gentle", "dark", "long",
];
const VERBS: [&str; 16] = [
    "watched",
    "carried",
    "found",
    "followed",
    "crossed",
    "remembered",
    "opened",
    "kept",
    "saw",
    "left",
    "reached",
    "held",
    "passed",
    "painted",
    "lost",
    "called",
];
const IDENTS: [&str; 12] =
    ["count", "total", "index", "value", "buffer", "node", "left", "right", "key", "item", "size", "acc"];
const FUNCS: [&str; 8] = ["push", "len", "get", "insert", "min", "max", "parse", "step"];

/// Templated English-like prose or C-like code, deterministic in `seed`.
pub fn synthetic_text(kind: SyntheticKind, n_bytes: usize, seed: u64) -> String {
    let mut rng = RngState::new(seed);
    let mut out = String::with_capacity(n_bytes + 128);
    let pick = |rng: &mut RngState, xs: &[&'static str]| xs[rng.below(xs.len())];
    while out.len() < n_bytes {
        match kind {
            SyntheticKind::Prose => {
                let n1 = pick(&mut rng, &NOUNS);
                let n2 = pick(&mut rng, &NOUNS);
                let s = match rng.below(4) {
                    0 => format!("The {} {} {} the {}. ", pick(&mut rng, &ADJS), n1, pick(&mut rng, &VERBS), n2),
                    1 => format!(
                        "In the {} {}, the {} {} slowly. ",
                        pick(&mut rng, &ADJS),
                        n1,
                        n2,
                        pick(&mut rng, &VERBS)
                    ),
                    2 => format!(
                        "A {} {} and a {} {} the {}. ",
                        n1,
                        pick(&mut rng, &VERBS),
                        n2,
                        pick(&mut rng, &VERBS),
                        pick(&mut rng, &NOUNS)
                    ),
                    _ => format!("Nobody {} the {} {} again.\n", pick(&mut rng, &VERBS), pick(&mut rng, &ADJS), n1),
                };
                out.push_str(&s);
            }
            SyntheticKind::Code => {
                let depth = rng.below(3);
                let indent = "    ".repeat(depth);
                let a = pick(&mut rng, &IDENTS);
                let b = pick(&mut rng, &IDENTS);
                let s = match rng.below(5) {
                    0 => format!("{indent}let {a} = {b}.{}({});\n", pick(&mut rng, &FUNCS), rng.below(100)),
                    1 => format!("{indent}if {a} < {b} {{\n{indent}    {a} += {};\n{indent}}}\n", rng.below(10)),
                    2 => format!(
                        "{indent}for {a} in 0..{} {{\n{indent}    {b}.{}({a});\n{indent}}}\n",
                        rng.below(64),
                        pick(&mut rng, &FUNCS)
                    ),
                    3 => format!("{indent}// {} the {}\n", pick(&mut rng, &FUNCS), a),
                    _ => format!("{indent}return {a} * {} + {b};\n", rng.below(16)),
                };
                out.push_str(&s);
            }
        }
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_complete() {
        let c = Corpus::synthetic(SyntheticKind::Prose, 10_000, 1, 0.1).unwrap();
        assert_eq!(c.part(Split::Train).len() + c.part(Split::Validation).len(), 10_000);
        assert_eq!(c.part(Split::Validation).len(), 1000);
    }

    #[test]
    fn batches_are_deterministic() {
        let c = Corpus::synthetic(SyntheticKind::Code, 5000, 2, 0.1).unwrap();
        let a = c.sample_batch(Split::Train, 4, 16, &mut RngState::new(3)).unwrap();
        let b = c.sample_batch(Split::Train, 4, 16, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.iter().flatten().all(|&t| t < 256));
    }

    #[test]
    fn errors() {
        assert!(Corpus::from_bytes(Vec::new(), 0.1).is_err());
        let c = Corpus::from_bytes(b"abc".to_vec(), 0.0).unwrap();
        assert!(c.sample_batch(Split::Train, 1, 8, &mut RngState::new(0)).is_err());
        assert!(c.is_small());
    }

    #[test]
    fn synthetic_text_is_ascii_and_sized() {
        for kind in [SyntheticKind::Prose, SyntheticKind::Code] {
            let t = synthetic_text(kind, 3000, 9);
            assert_eq!(t.len(), 3000);
            assert!(t.is_ascii());
            assert_eq!(t, synthetic_text(kind, 3000, 9));
        }
    }
}
