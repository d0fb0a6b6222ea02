//! Answer extraction, normalisation and scoring.

/// The answer part of a raw continuation: everything before the first
/// newline, full stop or question mark, trimmed.
pub fn extract_answer(raw: &str) -> &str {
    let end = raw.find(['\n', '.', '?']).unwrap_or(raw.len());
    raw[..end].trim()
}

/// Lowercase, punctuation to spaces, whitespace collapsed.
pub fn normalize(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize(prediction) == normalize(gold)
}

/// Harmonic mean of token precision and recall after normalisation, with
/// multiset overlap. Two empty strings score 1.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize(prediction);
    let g = normalize(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let mut g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let (np, ng) = (p.len() as f64, g.len() as f64);
    let mut common = 0usize;
    for t in &p {
        if let Some(i) = g.iter().position(|x| x == t) {
            g.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / np;
    let recall = common as f64 / ng;
    2.0 * precision * recall / (precision + recall)
}

/// Reads a predicted order out of free text. Labels are ranked by their
/// first occurrence; labels that never occur are appended in reverse
/// chronological order, the completion that scores worst against the truth.
///
/// `labels` must be given in true chronological order. The result holds
/// indices into `labels`.
pub fn parse_order(text: &str, labels: &[String]) -> Vec<usize> {
    let lower = text.to_lowercase();
    let mut found: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| lower.find(&l.to_lowercase()).map(|p| (p, i)))
        .collect();
    found.sort_unstable();
    let mut order: Vec<usize> = found.into_iter().map(|(_, i)| i).collect();
    for i in (0..labels.len()).rev() {
        if !order.contains(&i) {
            order.push(i);
        }
    }
    order
}

/// Fraction of pairs whose relative order in `predicted` agrees with
/// ascending index order. `predicted` must be a permutation of `0..n`;
/// a single item scores 1.
pub fn pairwise_order_score(predicted: &[usize]) -> f64 {
    let n = predicted.len();
    if n < 2 {
        return 1.0;
    }
    let mut rank = vec![0; n];
    for (pos, &item) in predicted.iter().enumerate() {
        rank[item] = pos;
    }
    let mut concordant = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            if rank[a] < rank[b] {
                concordant += 1;
            }
        }
    }
    concordant as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_stops_at_terminators() {
        assert_eq!(extract_answer("7Q2. the river"), "7Q2");
        assert_eq!(extract_answer(" ab\ncd"), "ab");
        assert_eq!(extract_answer("x?y"), "x");
        assert_eq!(extract_answer("open"), "open");
    }

    #[test]
    fn normalisation_and_matching() {
        assert_eq!(normalize("  The, CODE!  is "), "the code is");
        assert!(exact_match("7q2", "7Q2"));
        assert!(!exact_match("7Q", "7Q2"));
        assert_eq!(token_f1("a b", "a b"), 1.0);
        assert_eq!(token_f1("a", "b"), 0.0);
        assert!((token_f1("a b c", "a b") - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("", ""), 1.0);
    }

    #[test]
    fn order_scores() {
        assert_eq!(pairwise_order_score(&[0, 1, 2, 3]), 1.0);
        assert_eq!(pairwise_order_score(&[3, 2, 1, 0]), 0.0);
        assert!((pairwise_order_score(&[1, 0, 2, 3]) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(pairwise_order_score(&[0]), 1.0);
    }

    #[test]
    fn order_parsing() {
        let labels: Vec<String> = ["flood", "fire", "siege"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_order("the fire, then the flood, the siege", &labels), vec![1, 0, 2]);
        assert_eq!(parse_order("siege", &labels), vec![2, 1, 0]);
        assert_eq!(parse_order("", &labels), vec![2, 1, 0]);
        assert_eq!(parse_order("FLOOD fire", &labels), vec![0, 1, 2]);
    }
}
