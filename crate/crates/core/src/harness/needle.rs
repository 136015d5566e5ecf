//! Synthetic key/value retrieval over byte-level haystacks.
//!
//! A needle is `#` followed by a key letter and a value digit, the question
//! is `?` plus the key, and the answer is the value. Filler, keys and values
//! come from disjoint byte ranges, so a value byte occurs in a haystack
//! exactly where it was planted.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

pub const NEEDLE_MARK: u8 = b'#';
pub const QUESTION_MARK: u8 = b'?';
pub const FILLER: std::ops::RangeInclusive<u8> = b'g'..=b'v';
pub const KEYS: std::ops::RangeInclusive<u8> = b'A'..=b'P';
pub const VALUES: &[u8; 16] = b"0123456789abcdef";
pub const NEEDLE_LEN: usize = 3;

/// Probability of guessing a value uniformly at random.
pub fn chance() -> f64 {
    1.0 / VALUES.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    pub key: char,
    pub value: char,
    /// Requested depth as a fraction of the context.
    pub depth: f64,
    /// Offset of the `#` mark in the context.
    pub position: usize,
}

impl Needle {
    pub fn text(&self) -> String {
        format!("{}{}{}", NEEDLE_MARK as char, self.key, self.value)
    }

    pub fn question(&self) -> String {
        format!("{}{}", QUESTION_MARK as char, self.key)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleTask {
    pub id: usize,
    pub context_len: usize,
    /// Depth of the first needle; the grid coordinate of this case.
    pub depth: f64,
    pub context: String,
    pub needles: Vec<Needle>,
}

impl NeedleTask {
    /// One question per needle, in planting order.
    pub fn questions(&self) -> Vec<(String, String)> {
        self.needles
            .iter()
            .map(|n| (n.question(), n.value.to_string()))
            .collect()
    }
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(FILLER)).collect()
}

fn distinct<T: Copy>(rng: &mut ChaCha8Rng, pool: &[T], n: usize) -> Vec<T> {
    pool.choose_multiple(rng, n).copied().collect()
}

/// Plants `needles` (key, value, depth) into `context_len` bytes of filler.
/// Depth 0 puts a needle at the very start, depth 1 at the very end.
fn plant(
    rng: &mut ChaCha8Rng,
    context_len: usize,
    needles: &[(u8, u8, f64)],
) -> Result<(String, Vec<Needle>)> {
    let slots = context_len
        .checked_sub(NEEDLE_LEN * needles.len())
        .ok_or_else(|| {
            Error::Usage(format!(
                "context of {context_len} cannot hold {} needles",
                needles.len()
            ))
        })?;
    let mut order: Vec<usize> = (0..needles.len()).collect();
    order.sort_by(|&a, &b| needles[a].2.total_cmp(&needles[b].2));
    let hay = filler(rng, slots);
    let mut out = Vec::with_capacity(context_len);
    let mut placed = vec![None; needles.len()];
    let mut cursor = 0;
    for &i in &order {
        let (key, value, depth) = needles[i];
        let at = ((depth.clamp(0.0, 1.0) * slots as f64).round() as usize).max(cursor);
        out.extend_from_slice(&hay[cursor..at]);
        cursor = at;
        placed[i] = Some(Needle {
            key: key as char,
            value: value as char,
            depth,
            position: out.len(),
        });
        out.extend_from_slice(&[NEEDLE_MARK, key, value]);
    }
    out.extend_from_slice(&hay[cursor..]);
    let text = String::from_utf8(out).expect("ascii");
    Ok((
        text,
        placed
            .into_iter()
            .map(|p| p.expect("every needle placed"))
            .collect(),
    ))
}

/// Evaluation cases: `cases` per depth, each with one needle (or three
/// when `multi`) inside `context_len` bytes.
pub fn gen_needle_tasks(
    seed: u64,
    context_len: usize,
    chunk_size: usize,
    depths: &[f64],
    cases: usize,
    multi: bool,
) -> Result<Vec<NeedleTask>> {
    if context_len < 2 * chunk_size {
        return Err(Error::Usage(format!(
            "context length {context_len} is shorter than two chunks of {chunk_size}"
        )));
    }
    if let Some(d) = depths.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Usage(format!("depth {d} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<u8> = KEYS.collect();
    let mut tasks = Vec::with_capacity(depths.len() * cases);
    for &depth in depths {
        for _ in 0..cases {
            let count = if multi { 3 } else { 1 };
            let ks = distinct(&mut rng, &keys, count);
            let vs = distinct(&mut rng, VALUES, count);
            let mut spec = vec![(ks[0], vs[0], depth)];
            for j in 1..count {
                spec.push((ks[j], vs[j], rng.gen_range(0.0..=1.0)));
            }
            let (context, needles) = plant(&mut rng, context_len, &spec)?;
            tasks.push(NeedleTask {
                id: tasks.len(),
                context_len,
                depth,
                context,
                needles,
            });
        }
    }
    Ok(tasks)
}

/// Training documents for the base model: a short haystack with up to four
/// needles, then questions and answers about them until the window of `len`
/// bytes is full. Sparse questions carry too little signal for a small model
/// to pick up copying, so most of each window is question and answer.
pub fn base_corpus(seed: u64, docs: usize, len: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<u8> = KEYS.collect();
    let hay = ((len / 6).max(1), (len * 5 / 8).max(1));
    (0..docs)
        .map(|_| {
            let count = rng.gen_range(1..=4);
            let ks = distinct(&mut rng, &keys, count);
            let vs = distinct(&mut rng, VALUES, count);
            let ctx_len = rng.gen_range(hay.0..=hay.1).max(count * NEEDLE_LEN);
            let spec: Vec<_> = (0..count)
                .map(|j| (ks[j], vs[j], rng.gen_range(0.0..=1.0)))
                .collect();
            let (mut text, _) = plant(&mut rng, ctx_len, &spec).expect("fits");
            loop {
                let j = rng.gen_range(0..count);
                text.push(QUESTION_MARK as char);
                text.push(ks[j] as char);
                text.push(vs[j] as char);
                if text.len() + NEEDLE_LEN > len {
                    break;
                }
            }
            text
        })
        .collect()
}

/// Questions asked after each beacon-corpus haystack, in bytes.
pub const QA_TAIL: usize = 63;

/// Training documents for the beacon weights: a haystack of between a
/// quarter and all of `context_len` bytes with up to four needles, then
/// [`QA_TAIL`] bytes of questions and answers cycling over the needles.
/// Answers are the only bytes that depend on the compressed context, so the
/// tail is kept dense.
pub fn beacon_corpus(seed: u64, docs: usize, context_len: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<u8> = KEYS.collect();
    let min_len = (context_len / 4).max(4 * NEEDLE_LEN);
    (0..docs)
        .map(|_| {
            let count = rng.gen_range(1..=4);
            let ks = distinct(&mut rng, &keys, count);
            let vs = distinct(&mut rng, VALUES, count);
            let len = rng.gen_range(min_len..=context_len.max(min_len));
            let spec: Vec<_> = (0..count)
                .map(|j| (ks[j], vs[j], rng.gen_range(0.0..=1.0)))
                .collect();
            let (mut text, _) = plant(&mut rng, len, &spec).expect("fits");
            let mut order: Vec<usize> = (0..count).collect();
            while text.len() + NEEDLE_LEN <= len + QA_TAIL {
                order.shuffle(&mut rng);
                for &j in order.iter().take((len + QA_TAIL - text.len()) / NEEDLE_LEN) {
                    text.push(QUESTION_MARK as char);
                    text.push(ks[j] as char);
                    text.push(vs[j] as char);
                }
            }
            text
        })
        .collect()
}

pub fn write_tasks(tasks: &[NeedleTask], out: &mut impl Write) -> Result<()> {
    for t in tasks {
        writeln!(
            out,
            "{}",
            serde_json::to_string(t).map_err(|e| Error::Format(e.to_string()))?
        )?;
    }
    Ok(())
}

pub fn read_tasks(input: impl BufRead) -> Result<Vec<NeedleTask>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(|e| Error::Format(format!("task line: {e}"))))
        .collect()
}

/// 1 if the expected value occurs verbatim in the output.
pub fn score_answer(output: &str, answer: &str) -> u32 {
    u32::from(!answer.is_empty() && output.contains(answer))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub context_len: usize,
    pub depth: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleReport {
    pub cells: Vec<Cell>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub chance: f64,
    /// One-sided binomial probability of at least `correct` hits by chance.
    pub p_value: f64,
}

/// P(X >= k) for X ~ Binomial(n, p).
pub fn binomial_tail(k: usize, n: usize, p: f64) -> Result<f64> {
    if k == 0 {
        return Ok(1.0);
    }
    let b = Binomial::new(p, n as u64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(b.sf(k as u64 - 1))
}

/// Scores `outputs[i][j]`, the answer to question `j` of task `i`, and
/// groups the results by (context length, depth).
pub fn score_needle(outputs: &[Vec<String>], tasks: &[NeedleTask]) -> Result<NeedleReport> {
    if outputs.len() != tasks.len() {
        return Err(Error::Usage(format!(
            "{} outputs for {} tasks",
            outputs.len(),
            tasks.len()
        )));
    }
    let mut grid: BTreeMap<(usize, u64), (f64, usize, usize)> = BTreeMap::new();
    let (mut correct, mut total) = (0, 0);
    for (task, outs) in tasks.iter().zip(outputs) {
        let qs = task.questions();
        if outs.len() != qs.len() {
            return Err(Error::Usage(format!(
                "task {}: {} outputs for {} questions",
                task.id,
                outs.len(),
                qs.len()
            )));
        }
        let cell = grid
            .entry((task.context_len, task.depth.to_bits()))
            .or_insert((task.depth, 0, 0));
        for (out, (_, answer)) in outs.iter().zip(&qs) {
            let s = score_answer(out, answer) as usize;
            cell.1 += s;
            cell.2 += 1;
            correct += s;
            total += 1;
        }
    }
    let mut cells: Vec<Cell> = grid
        .into_iter()
        .map(|((context_len, _), (depth, c, t))| Cell {
            context_len,
            depth,
            correct: c,
            total: t,
            accuracy: c as f64 / t.max(1) as f64,
        })
        .collect();
    cells.sort_by(|a, b| {
        a.context_len
            .cmp(&b.context_len)
            .then(a.depth.total_cmp(&b.depth))
    });
    Ok(NeedleReport {
        cells,
        correct,
        total,
        accuracy: correct as f64 / total.max(1) as f64,
        chance: chance(),
        p_value: binomial_tail(correct, total, chance())?,
    })
}
