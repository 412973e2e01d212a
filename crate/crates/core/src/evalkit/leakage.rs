//! Detection of retrieved passages that copy an evaluation question.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Words compared by the audit: lowercased with ASCII punctuation removed.
pub fn audit_tokens<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    words
        .iter()
        .map(|w| {
            w.as_ref()
                .to_lowercase()
                .chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Length of the longest run of tokens that occurs contiguously in both
/// sequences.
pub fn longest_common_run<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                0
            };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Flagging rule: the overlap covers at least three quarters of the question.
pub fn leaks(overlap: usize, question_len: usize) -> bool {
    question_len > 0 && 4 * overlap >= 3 * question_len
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    pub flagged: bool,
    /// Longest overlap over all passages.
    pub overlap: usize,
    pub question_len: usize,
    pub per_passage: Vec<usize>,
}

impl LeakageReport {
    pub fn passage_flags(&self) -> Vec<bool> {
        self.per_passage
            .iter()
            .map(|o| leaks(*o, self.question_len))
            .collect()
    }
}

/// Audits one question (without its answer options) against its retrieved
/// passages, all given as whitespace-split words.
pub fn leakage_audit<S: AsRef<str>, P: AsRef<[String]> + Sync>(
    question: &[S],
    passages: &[P],
) -> Result<LeakageReport> {
    let q = audit_tokens(question);
    if q.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per_passage: Vec<usize> = passages
        .par_iter()
        .map(|p| longest_common_run(&q, &audit_tokens(p.as_ref())))
        .collect();
    let overlap = per_passage.iter().copied().max().unwrap_or(0);
    Ok(LeakageReport {
        flagged: leaks(overlap, q.len()),
        overlap,
        question_len: q.len(),
        per_passage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerunReport {
    pub original: f64,
    pub filtered: f64,
    /// `filtered - original`.
    pub delta: f64,
}

/// Re-scores an evaluation with flagged passages dropped from every
/// retrieval set. `metric` sees one example and its (possibly empty)
/// retrieval set; the report holds means over examples.
pub fn filtered_rerun<T, P, F>(examples: &[(T, Vec<(P, bool)>)], metric: F) -> RerunReport
where
    T: Sync,
    P: Sync,
    F: Fn(&T, &[&P]) -> f64 + Sync,
{
    if examples.is_empty() {
        return RerunReport {
            original: 0.0,
            filtered: 0.0,
            delta: 0.0,
        };
    }
    let (orig, filt): (Vec<f64>, Vec<f64>) = examples
        .par_iter()
        .map(|(ex, retrieved)| {
            let all: Vec<&P> = retrieved.iter().map(|(p, _)| p).collect();
            let kept: Vec<&P> = retrieved
                .iter()
                .filter(|(_, f)| !f)
                .map(|(p, _)| p)
                .collect();
            let original = metric(ex, &all);
            let filtered = if kept.len() == all.len() {
                original
            } else {
                metric(ex, &kept)
            };
            (original, filtered)
        })
        .unzip();
    let n = examples.len() as f64;
    let original = orig.iter().sum::<f64>() / n;
    let filtered = filt.iter().sum::<f64>() / n;
    RerunReport {
        original,
        filtered,
        delta: filtered - original,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn verbatim_question_is_flagged() {
        let q = words("Who wrote the opera Carmen?");
        let p = words("Trivia: who wrote the opera carmen ? Bizet did.");
        let r = leakage_audit(&q, &[p]).unwrap();
        assert!(r.flagged);
        assert_eq!(r.overlap, 5);
        assert_eq!(r.question_len, 5);
    }

    #[test]
    fn disjoint_passage_is_clean() {
        let r = leakage_audit(&words("alpha beta"), &[words("gamma delta")]).unwrap();
        assert!(!r.flagged);
        assert_eq!(r.overlap, 0);
    }

    #[test]
    fn threshold_arithmetic() {
        let q: Vec<String> = (0..12).map(|i| format!("q{i}")).collect();
        let mut p = words("x y");
        p.extend(q[2..11].iter().cloned());
        let r = leakage_audit(&q, &[p.clone()]).unwrap();
        assert_eq!(r.overlap, 9);
        assert!(r.flagged);
        p.remove(2);
        let r = leakage_audit(&q, &[p]).unwrap();
        assert_eq!(r.overlap, 8);
        assert!(!r.flagged);
        assert!(leakage_audit(&[] as &[String], &[words("a")]).is_err());
    }

    #[test]
    fn rerun_examples() {
        let ex = vec![
            ("q1", vec![("leak", true), ("other", false)]),
            ("q2", vec![("clean", false)]),
        ];
        let hit = |_: &&str, ps: &[&&str]| f64::from(u8::from(ps.iter().any(|p| **p == "leak")));
        let r = filtered_rerun(&ex, hit);
        assert_eq!((r.original, r.filtered, r.delta), (0.5, 0.0, -0.5));

        let none = vec![("q", vec![("a", false)])];
        assert_eq!(filtered_rerun(&none, |_, _| 0.7).delta, 0.0);

        let all = vec![("q", vec![("a", true), ("b", true)])];
        let r = filtered_rerun(&all, |_, ps: &[&&str]| ps.len() as f64);
        assert_eq!((r.original, r.filtered), (2.0, 0.0));
    }

    proptest! {
        #[test]
        fn extending_the_shared_run_never_lowers_overlap(
            q in proptest::collection::vec("[a-e]", 1..12),
            pre in proptest::collection::vec("[a-e]", 0..6),
            start in 0usize..12,
            len in 0usize..12,
        ) {
            let start = start % q.len();
            let end = (start + len).min(q.len());
            let mut p = pre.clone();
            p.extend(q[start..end].iter().cloned());
            let base = longest_common_run(&q, &p);
            prop_assert!(base >= end - start);
            if end < q.len() {
                let mut longer = pre;
                longer.extend(q[start..end + 1].iter().cloned());
                prop_assert!(longest_common_run(&q, &longer) >= base);
            }
        }

        #[test]
        fn run_is_symmetric(a in proptest::collection::vec("[a-c]", 0..10), b in proptest::collection::vec("[a-c]", 0..10)) {
            prop_assert_eq!(longest_common_run(&a, &b), longest_common_run(&b, &a));
        }
    }
}
