use std::collections::HashMap;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions up to `max_n`, add-one
/// smoothing for n ≥ 2, and the usual brevity penalty. An empty hypothesis
/// scores 0.
pub fn smoothed_sentence_bleu(hyp: &[usize], reference: &[usize], max_n: usize) -> f64 {
    if hyp.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        let total = hyp.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (h, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if h < r { 1.0 - r / h } else { 0.0 };
    (bp + log_sum / max_n as f64).exp()
}
