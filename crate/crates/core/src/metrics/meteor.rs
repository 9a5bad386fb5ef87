use super::{porter, Prf, TokenSeq};

const FRAG_GAMMA: f64 = 0.5;
const FRAG_BETA: i32 = 3;

/// Word alignment between candidate and reference: `(cand_idx, ref_idx)`
/// pairs sorted by candidate position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Alignment {
    pub fn matches(&self) -> usize {
        self.pairs.len()
    }

    /// Maximal runs that are contiguous in both sequences.
    pub fn chunks(&self) -> usize {
        let mut chunks = 0;
        let mut prev: Option<(usize, usize)> = None;
        for &(c, r) in &self.pairs {
            match prev {
                Some((pc, pr)) if c == pc + 1 && r == pr + 1 => {}
                _ => chunks += 1,
            }
            prev = Some((c, r));
        }
        chunks
    }
}

/// Greedy one-to-one alignment: exact matches first, then Porter-stem
/// matches among the tokens left over. Each candidate token, scanned left to
/// right, takes the first still-unmatched reference token that qualifies.
pub fn align(candidate: &TokenSeq, reference: &TokenSeq) -> Alignment {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_match: Vec<Option<usize>> = vec![None; candidate.len()];

    for (i, tok) in candidate.tokens.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && reference.tokens[j] == *tok) {
            ref_used[j] = true;
            cand_match[i] = Some(j);
        }
    }

    let ref_stems: Vec<String> = reference.tokens.iter().map(|t| porter::stem(t)).collect();
    for (i, tok) in candidate.tokens.iter().enumerate() {
        if cand_match[i].is_some() {
            continue;
        }
        let stem = porter::stem(tok);
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_stems[j] == stem) {
            ref_used[j] = true;
            cand_match[i] = Some(j);
        }
    }

    Alignment {
        pairs: cand_match
            .into_iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|j| (i, j)))
            .collect(),
    }
}

/// METEOR-style score over exact and stem matches.
///
/// `f1` holds the final score; `precision` and `recall` are the unigram
/// match ratios it was computed from.
pub fn meteor_lite(candidate: &TokenSeq, reference: &TokenSeq) -> Prf {
    let alignment = align(candidate, reference);
    let m = alignment.matches();
    if m == 0 {
        return Prf::zero();
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = alignment.chunks() as f64 / m as f64;
    let penalty = FRAG_GAMMA * frag.powi(FRAG_BETA);
    Prf {
        precision: p,
        recall: r,
        f1: f_mean * (1.0 - penalty),
    }
}
