//! Brute-force reference implementations used to freeze expected metric
//! values. Deliberately naive and independent of `renalct::metrics`.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rust_stemmers::{Algorithm, Stemmer};

/// Lowercase; every punctuation character is its own token, except `.` and
/// `,` with a digit on both sides.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for i in 0..chars.len() {
        let ch = chars[i];
        let numeric_sep = (ch == '.' || ch == ',')
            && i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_ascii_digit()
            && chars[i + 1].is_ascii_digit();
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if !numeric_sep && (ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii())) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for start in 0..=(tokens.len() - n) {
            let key = tokens[start..start + n].join("\u{1}");
            *m.entry(key).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU, single reference per candidate, no smoothing.
pub fn bleu(cands: &[&str], refs: &[&str], max_n: usize) -> f64 {
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    let mut matched = vec![0usize; max_n + 1];
    let mut total = vec![0usize; max_n + 1];
    for (c, r) in cands.iter().zip(refs) {
        let ct = tokenize(c);
        let rt = tokenize(r);
        c_len += ct.len();
        r_len += rt.len();
        for n in 1..=max_n {
            let cc = ngram_counts(&ct, n);
            let rc = ngram_counts(&rt, n);
            for (g, k) in &cc {
                total[n] += k;
                let allowed = rc.get(g).copied().unwrap_or(0);
                matched[n] += if *k < allowed { *k } else { allowed };
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if matched[n] == 0 || total[n] == 0 {
            return 0.0;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let geo = (log_sum / max_n as f64).exp();
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    geo * bp
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// ROUGE-L F1 via exhaustive subsequence enumeration of the candidate.
pub fn rouge_l(cand: &str, reference: &str) -> f64 {
    let c = tokenize(cand);
    let r = tokenize(reference);
    assert!(c.len() <= 20, "oracle only handles short candidates");
    let mut best = 0usize;
    for mask in 0u32..(1u32 << c.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<&String> = (0..c.len()).filter(|i| mask & (1 << i) != 0).map(|i| &c[i]).collect();
        if is_subsequence(&sub, &r) {
            best = len;
        }
    }
    if best == 0 {
        return 0.0;
    }
    let p = best as f64 / c.len() as f64;
    let rr = best as f64 / r.len() as f64;
    2.0 * p * rr / (p + rr)
}

fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let mut chunks = 0;
    for k in 0..sorted.len() {
        if k == 0 || sorted[k].0 != sorted[k - 1].0 + 1 || sorted[k].1 != sorted[k - 1].1 + 1 {
            chunks += 1;
        }
    }
    chunks
}

// Every maximal-cardinality matching between unaligned candidate and
// reference positions with equal keys, given already fixed pairs.
fn enumerate(
    ck: &[String],
    rk: &[String],
    free_c: &[usize],
    pos: usize,
    used_r: &mut Vec<bool>,
    current: &mut Vec<(usize, usize)>,
    out: &mut Vec<Vec<(usize, usize)>>,
) {
    if pos == free_c.len() {
        out.push(current.clone());
        return;
    }
    let i = free_c[pos];
    enumerate(ck, rk, free_c, pos + 1, used_r, current, out);
    for j in 0..rk.len() {
        if !used_r[j] && rk[j] == ck[i] {
            used_r[j] = true;
            current.push((i, j));
            enumerate(ck, rk, free_c, pos + 1, used_r, current, out);
            current.pop();
            used_r[j] = false;
        }
    }
}

fn stage(ck: &[String], rk: &[String], fixed: &[(usize, usize)], c_ok: &[bool], r_ok: &[bool]) -> Vec<(usize, usize)> {
    let free_c: Vec<usize> = (0..ck.len()).filter(|&i| c_ok[i]).collect();
    let mut used_r: Vec<bool> = r_ok.iter().map(|ok| !ok).collect();
    let mut all = Vec::new();
    enumerate(ck, rk, &free_c, 0, &mut used_r, &mut Vec::new(), &mut all);
    let max = all.iter().map(|a| a.len()).max().unwrap_or(0);
    let mut best: Option<(usize, Vec<(usize, usize)>)> = None;
    for mut a in all.into_iter().filter(|a| a.len() == max) {
        a.sort();
        let mut union = fixed.to_vec();
        union.extend_from_slice(&a);
        let ch = chunk_count(&union);
        let better = match &best {
            None => true,
            Some((bc, ba)) => ch < *bc || (ch == *bc && a < *ba),
        };
        if better {
            best = Some((ch, a));
        }
    }
    best.map(|(_, a)| a).unwrap_or_default()
}

/// METEOR with exact then stem stages, exhaustive alignment search.
pub fn meteor(cand: &str, reference: &str) -> f64 {
    let c = tokenize(cand);
    let r = tokenize(reference);
    let stemmer = Stemmer::create(Algorithm::English);
    let cs: Vec<String> = c.iter().map(|t| stemmer.stem(t).into_owned()).collect();
    let rs: Vec<String> = r.iter().map(|t| stemmer.stem(t).into_owned()).collect();

    let exact = stage(&c, &r, &[], &vec![true; c.len()], &vec![true; r.len()]);
    let mut c_ok = vec![true; c.len()];
    let mut r_ok = vec![true; r.len()];
    for &(i, j) in &exact {
        c_ok[i] = false;
        r_ok[j] = false;
    }
    let stem = stage(&cs, &rs, &exact, &c_ok, &r_ok);
    let mut all = exact;
    all.extend(stem);
    let m = all.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rr = m as f64 / r.len() as f64;
    let fmean = p * rr / (0.9 * p + 0.1 * rr);
    let frag = chunk_count(&all) as f64 / m as f64;
    fmean * (1.0 - 0.5 * frag.powi(3))
}

/// Mann–Whitney AUC from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut e = k;
        while e + 1 < n && scores[idx[e + 1]] == scores[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for t in k..=e {
            ranks[idx[t]] = avg;
        }
        k = e + 1;
    }
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let q = n as f64 - p;
    let rank_sum: f64 = (0..n).filter(|&i| labels[i]).map(|i| ranks[i]).sum();
    (rank_sum - p * (p + 1.0) / 2.0) / (p * q)
}

/// Macro P/R/F1 and accuracy from an explicit confusion matrix. `None`
/// predictions are wrong and count as false negatives only. The class
/// divisor is the set of classes present in the truth.
pub fn macro_prf(truth: &[&str], pred: &[Option<&str>]) -> (f64, f64, f64, f64) {
    let mut present: Vec<&str> = truth.to_vec();
    present.sort();
    present.dedup();
    let mut conf: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (t, p) in truth.iter().zip(pred) {
        *conf.entry((t, p.unwrap_or("<unknown>"))).or_insert(0) += 1;
    }
    let correct: usize = truth.iter().zip(pred).filter(|(t, p)| Some(**t) == **p).count();
    let accuracy = correct as f64 / truth.len() as f64;
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for &c in &present {
        let tp = conf.get(&(c, c)).copied().unwrap_or(0) as f64;
        let predicted_c: usize = conf.iter().filter(|((_, p), _)| *p == c).map(|(_, v)| *v).sum();
        let actual_c: usize = conf.iter().filter(|((t, _), _)| *t == c).map(|(_, v)| *v).sum();
        let p = if predicted_c == 0 { 0.0 } else { tp / predicted_c as f64 };
        let r = tp / actual_c as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        ps += p;
        rs += r;
        fs += f;
    }
    let k = present.len() as f64;
    (accuracy, ps / k, rs / k, fs / k)
}
