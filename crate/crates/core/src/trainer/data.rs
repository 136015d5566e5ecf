use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level tokenizer: every byte is its own id, id 0 doubles as eos.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const EOS: u32 = 0;
    pub const VOCAB: usize = 256;

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Lossy inverse of [`encode`](Self::encode); ids outside the byte range are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
}

/// Tokenizes documents, keeps those with `min_len..=max_len` tokens,
/// appends eos and shuffles under `seed`.
pub fn prepare_corpus(
    docs: &[String],
    tokenizer: &ByteTokenizer,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    let mut out: Vec<TrainExample> = docs
        .iter()
        .map(|d| tokenizer.encode(d))
        .filter(|t| (min_len..=max_len).contains(&t.len()))
        .map(|mut tokens| {
            tokens.push(ByteTokenizer::EOS);
            TrainExample { tokens }
        })
        .collect();
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no document among {} has a length in [{min_len}, {max_len}]",
            docs.len()
        )));
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Reads documents from a directory of text files (sorted by name) or from
/// a file with one document per line.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        files.iter().map(|f| Ok(fs::read_to_string(f)?)).collect()
    } else {
        Ok(fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    }
}
