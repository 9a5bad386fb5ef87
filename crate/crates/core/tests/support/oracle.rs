//! Brute-force reference for ROUGE-1/2/L on short token sequences.
//!
//! Shared by the core integration tests and the acceptance harness.

use std::collections::HashSet;

use soapopt_core::metrics::{rouge_l, rouge_n, Prf, TokenSeq};

const ALPHABET: [&str; 3] = ["a", "b", "c"];

fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(sym);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Every pair with combined length at most 6 (7,108 pairs), plus 3,000
/// pseudo-random pairs with each side up to length 6.
pub fn sweep_pairs() -> Vec<(Vec<u8>, Vec<u8>)> {
    let seqs = all_sequences(6);
    let mut pairs = Vec::new();
    for a in &seqs {
        for b in &seqs {
            if a.len() + b.len() <= 6 {
                pairs.push((a.clone(), b.clone()));
            }
        }
    }
    let mut state: u64 = 0x2545_F491_4F6C_DD1D;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    for _ in 0..3000 {
        let a = seqs[(next() % seqs.len() as u64) as usize].clone();
        let b = seqs[(next() % seqs.len() as u64) as usize].clone();
        pairs.push((a, b));
    }
    pairs
}

fn n_grams(s: &[u8], n: usize) -> Vec<&[u8]> {
    if s.len() < n {
        Vec::new()
    } else {
        (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
    }
}

/// Clipped match count by pairing each candidate n-gram with an unused
/// equal reference n-gram.
fn ngram_matches(c: &[u8], r: &[u8], n: usize) -> (u64, u64, u64) {
    let cg = n_grams(c, n);
    let rg = n_grams(r, n);
    let mut used = vec![false; rg.len()];
    let mut m = 0;
    for g in &cg {
        if let Some(j) = (0..rg.len()).find(|&j| !used[j] && rg[j] == *g) {
            used[j] = true;
            m += 1;
        }
    }
    (m, cg.len() as u64, rg.len() as u64)
}

fn subsequences(s: &[u8]) -> HashSet<Vec<u8>> {
    (0u32..1 << s.len())
        .map(|mask| (0..s.len()).filter(|i| mask & (1 << i) != 0).map(|i| s[i]).collect())
        .collect()
}

/// Longest sequence found among the common subsequences of both inputs.
fn lcs_by_enumeration(c: &[u8], r: &[u8]) -> u64 {
    let rs = subsequences(r);
    subsequences(c).into_iter().filter(|s| rs.contains(s)).map(|s| s.len() as u64).max().unwrap_or(0)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// P, R and F1 as exact fractions rendered to f64 (F1 = 2m / (|c| + |r|)).
fn exact(m: u64, ct: u64, rt: u64) -> [f64; 3] {
    let f1 = if m == 0 { 0.0 } else { (2 * m) as f64 / (ct + rt) as f64 };
    [ratio(m, ct), ratio(m, rt), f1]
}

fn close(got: Prf, want: [f64; 3]) -> bool {
    [got.precision, got.recall, got.f1]
        .iter()
        .zip(want)
        .all(|(g, w)| (g - w).abs() <= 1e-12)
}

fn tokens(s: &[u8]) -> TokenSeq {
    TokenSeq::from_tokens(s.iter().map(|&i| ALPHABET[i as usize]))
}

/// Checks every sweep pair; returns the number of pairs or the first
/// disagreement.
pub fn run_sweep() -> Result<usize, String> {
    let pairs = sweep_pairs();
    for (c, r) in &pairs {
        let (tc, tr) = (tokens(c), tokens(r));
        for n in [1, 2] {
            let (m, ct, rt) = ngram_matches(c, r, n);
            let got = rouge_n(&tc, &tr, n);
            if !close(got, exact(m, ct, rt)) {
                return Err(format!("rouge_{n} {:?} vs {:?}: {got:?}", tc.source, tr.source));
            }
        }
        let l = lcs_by_enumeration(c, r);
        let got = rouge_l(&tc, &tr);
        if !close(got, exact(l, c.len() as u64, r.len() as u64)) {
            return Err(format!("rouge_l {:?} vs {:?}: {got:?}", tc.source, tr.source));
        }
    }
    Ok(pairs.len())
}
