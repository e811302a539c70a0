use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    // rank is 1-based
    ((rank + 1) as f64).log2()
}

/// nDCG@k of `ranking` against one query's judgments, gain `2^rel − 1`.
/// `None` judgments mean the query is absent from the qrels.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], rels: Option<&BTreeMap<String, u32>>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("nDCG cutoff k must be at least 1".into()));
    }
    let rels = rels.ok_or_else(|| Error::UndefinedQuery("query has no relevance judgments".into()))?;
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(rels.get(d.as_ref()).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = rels.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain(r) / discount(i + 1))
        .sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rels(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(d, r)| (d.to_string(), *r)).collect()
    }

    #[test]
    fn hand_cases() {
        let r = rels(&[("a", 1)]);
        assert_eq!(ndcg_at_k(&["a", "b", "c"], Some(&r), 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&["b", "c", "a"], Some(&r), 10).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&["b", "c", "a"], Some(&r), 2).unwrap(), 0.0);
        assert!(matches!(ndcg_at_k(&["a"], None, 10), Err(Error::UndefinedQuery(_))));
        assert!(ndcg_at_k(&["a"], Some(&r), 0).is_err());
    }

    #[test]
    fn graded_relevance() {
        let r = rels(&[("a", 2), ("b", 1)]);
        // ideal: 3/1 + 1/log2(3)
        let ideal = 3.0 + 1.0 / 3f64.log2();
        let swapped = ndcg_at_k(&["b", "a"], Some(&r), 10).unwrap();
        assert!((swapped - (1.0 + 3.0 / 3f64.log2()) / ideal).abs() < 1e-15);
    }
}
