use std::collections::HashMap;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::MetricError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlgScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

fn check_aligned(cands: &[&str], refs: &[&str]) -> Result<(), MetricError> {
    if cands.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if cands.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            candidates: cands.len(),
            references: refs.len(),
        });
    }
    Ok(())
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU with one reference per candidate.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus before taking the geometric mean of precisions 1..=max_n. The
/// brevity penalty `exp(1 − r/c)` applies when the total candidate length c is
/// below the total reference length r. With `smooth`, orders n ≥ 2 use
/// add-one precision `(m + 1)/(t + 1)`.
pub fn bleu(cands: &[&str], refs: &[&str], max_n: usize, smooth: bool) -> Result<f64, MetricError> {
    check_aligned(cands, refs)?;
    if max_n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);

    for (c, r) in cands.iter().zip(refs) {
        let ct = tokenize(c);
        let rt = tokenize(r);
        c_len += ct.len();
        r_len += rt.len();
        for n in 1..=max_n {
            let rc = ngrams(&rt, n);
            for (gram, count) in ngrams(&ct, n) {
                total[n - 1] += count;
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }

    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        let (m, t) = if smooth && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_p += (m as f64 / t as f64).ln();
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_p / max_n as f64).exp())
}

pub fn bleu_sentence(cand: &str, reference: &str, max_n: usize) -> Result<f64, MetricError> {
    bleu(&[cand], &[reference], max_n, false)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(cand: &str, reference: &str) -> Result<f64, MetricError> {
    let c = tokenize(cand);
    let r = tokenize(reference);
    if r.is_empty() {
        return Err(MetricError::EmptyReference(0));
    }
    let l = lcs_len(&c, &r);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    Ok(2.0 * p * rec / (p + rec))
}

/// Mean sentence ROUGE-L over aligned pairs.
pub fn rouge_l_corpus(cands: &[&str], refs: &[&str]) -> Result<f64, MetricError> {
    check_aligned(cands, refs)?;
    let mut sum = 0.0;
    for (i, (c, r)) in cands.iter().zip(refs).enumerate() {
        sum += rouge_l(c, r).map_err(|_| MetricError::EmptyReference(i))?;
    }
    Ok(sum / cands.len() as f64)
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: i32 = 3;
const METEOR_GAMMA: f64 = 0.5;
// Leaf budget per alignment stage; past it the best alignment found so far is kept.
const ALIGN_BUDGET: usize = 200_000;

type Pair = (usize, usize);

fn chunks(pairs: &[Pair]) -> usize {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .enumerate()
        .filter(|&(k, &(i, j))| k == 0 || sorted[k - 1] != (i.wrapping_sub(1), j.wrapping_sub(1)))
        .count()
}

struct StageSearch<'a> {
    ck: &'a [String],
    rk: &'a [String],
    fixed: &'a [Pair],
    free_c: Vec<usize>,
    used_r: Vec<bool>,
    skips: HashMap<&'a str, usize>,
    best: Option<(usize, Vec<Pair>)>,
    leaves: usize,
}

impl<'a> StageSearch<'a> {
    fn new(ck: &'a [String], rk: &'a [String], fixed: &'a [Pair]) -> Self {
        let mut used_r = vec![false; rk.len()];
        let mut used_c = vec![false; ck.len()];
        for &(i, j) in fixed {
            used_c[i] = true;
            used_r[j] = true;
        }
        let free_c: Vec<usize> = (0..ck.len()).filter(|&i| !used_c[i]).collect();
        let mut c_count: HashMap<&str, usize> = HashMap::new();
        for &i in &free_c {
            *c_count.entry(ck[i].as_str()).or_insert(0) += 1;
        }
        let mut r_count: HashMap<&str, usize> = HashMap::new();
        for j in (0..rk.len()).filter(|&j| !used_r[j]) {
            *r_count.entry(rk[j].as_str()).or_insert(0) += 1;
        }
        let skips = c_count
            .iter()
            .map(|(&k, &n)| (k, n - n.min(r_count.get(k).copied().unwrap_or(0))))
            .collect();
        StageSearch {
            ck,
            rk,
            fixed,
            free_c,
            used_r,
            skips,
            best: None,
            leaves: 0,
        }
    }

    fn run(mut self) -> Vec<Pair> {
        let mut current = Vec::new();
        self.dfs(0, &mut current);
        self.best.map(|(_, a)| a).unwrap_or_default()
    }

    fn dfs(&mut self, pos: usize, current: &mut Vec<Pair>) {
        if self.leaves >= ALIGN_BUDGET {
            return;
        }
        if pos == self.free_c.len() {
            self.leaves += 1;
            let mut sorted = current.clone();
            sorted.sort_unstable();
            let mut union = self.fixed.to_vec();
            union.extend_from_slice(&sorted);
            let c = chunks(&union);
            let better = match &self.best {
                None => true,
                Some((bc, ba)) => c < *bc || (c == *bc && sorted < *ba),
            };
            if better {
                self.best = Some((c, sorted));
            }
            return;
        }
        let i = self.free_c[pos];
        let key = self.ck[i].as_str();
        let rk = self.rk;
        for j in 0..rk.len() {
            if !self.used_r[j] && rk[j] == key {
                self.used_r[j] = true;
                current.push((i, j));
                self.dfs(pos + 1, current);
                current.pop();
                self.used_r[j] = false;
            }
        }
        let budget = self.skips.get(key).copied().unwrap_or(0);
        if budget > 0 {
            self.skips.insert(key, budget - 1);
            self.dfs(pos + 1, current);
            self.skips.insert(key, budget);
        }
    }
}

/// Unigram alignment: exact matches first, then Porter-stem matches among
/// the remaining tokens. Each stage keeps the maximum number of matches and,
/// among those, the fewest chunks (ties: lexicographically smallest pairs).
fn align(c: &[String], r: &[String]) -> Vec<Pair> {
    let exact = StageSearch::new(c, r, &[]).run();
    let stemmer = Stemmer::create(Algorithm::English);
    let cs: Vec<String> = c.iter().map(|t| stemmer.stem(t).into_owned()).collect();
    let rs: Vec<String> = r.iter().map(|t| stemmer.stem(t).into_owned()).collect();
    let stemmed = StageSearch::new(&cs, &rs, &exact).run();
    let mut all = exact;
    all.extend(stemmed);
    all
}

/// METEOR without the synonym stage.
///
/// `Fmean = P·R / (α·P + (1−α)·R)` with α = 0.9, fragmentation penalty
/// `γ·(chunks/m)^β` with γ = 0.5 and β = 3.
pub fn meteor(cand: &str, reference: &str) -> f64 {
    let c = tokenize(cand);
    let r = tokenize(reference);
    let pairs = align(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
    let penalty = METEOR_GAMMA * (chunks(&pairs) as f64 / m as f64).powi(METEOR_BETA);
    fmean * (1.0 - penalty)
}

pub fn meteor_corpus(cands: &[&str], refs: &[&str]) -> Result<f64, MetricError> {
    check_aligned(cands, refs)?;
    Ok(cands.iter().zip(refs).map(|(c, r)| meteor(c, r)).sum::<f64>() / cands.len() as f64)
}

/// Corpus BLEU-1/BLEU-4 and mean ROUGE-L/METEOR.
pub fn nlg_scores(cands: &[&str], refs: &[&str]) -> Result<NlgScores, MetricError> {
    Ok(NlgScores {
        bleu1: bleu(cands, refs, 1, false)?,
        bleu4: bleu(cands, refs, 4, false)?,
        rouge_l: rouge_l_corpus(cands, refs)?,
        meteor: meteor_corpus(cands, refs)?,
    })
}
