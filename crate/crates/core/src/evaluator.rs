//! Leave-one-out ranking metrics over sampled candidate lists.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use crate::corpus::InteractionCorpus;
use crate::error::{Error, Result};

/// 1-indexed rank of `scores[target]`, counting every tie against it.
pub fn rank_of(scores: &[f64], target: usize) -> Result<usize> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("candidate score {i}")));
    }
    let t = *scores.get(target).ok_or_else(|| Error::InvalidArgument(format!("target {target} outside {} scores", scores.len())))?;
    let ahead = scores.iter().enumerate().filter(|&(i, &s)| i != target && s >= t).count();
    Ok(ahead + 1)
}

/// Scores `candidates` for `user` and returns the rank of `test_item`.
pub fn rank_candidates<F>(score: F, user: u32, candidates: &[u32], test_item: u32) -> Result<usize>
where
    F: FnOnce(u32, &[u32]) -> Result<Vec<f64>>,
{
    let target = candidates
        .iter()
        .position(|&n| n == test_item)
        .ok_or_else(|| Error::InvalidArgument(format!("test item {test_item} not among candidates")))?;
    let scores = score(user, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Shape(format!("{} scores for {} candidates", scores.len(), candidates.len())));
    }
    rank_of(&scores, target)
}

/// `(HR@k, NDCG@k)` averaged over users.
pub fn metrics_at_k(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::Empty("no ranked users"));
    }
    let (mut hits, mut gain) = (0.0, 0.0);
    for &r in ranks {
        if r == 0 {
            return Err(Error::InvalidArgument("ranks are 1-indexed".into()));
        }
        if r <= k {
            hits += 1.0;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hits / n, gain / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtK {
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub at: BTreeMap<usize, AtK>,
    /// `(user, rank)` per evaluated user.
    pub ranks: Vec<(u32, usize)>,
    pub users_evaluated: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn from_ranks(ranks: Vec<(u32, usize)>, ks: &[usize], seed: u64) -> Result<Self> {
        let plain: Vec<usize> = ranks.iter().map(|&(_, r)| r).collect();
        let mut at = BTreeMap::new();
        for &k in ks {
            let (hr, ndcg) = metrics_at_k(&plain, k)?;
            at.insert(k, AtK { hr, ndcg });
        }
        Ok(MetricReport { at, users_evaluated: ranks.len(), ranks, seed })
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.at.get(&k).map(|m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at.get(&k).map(|m| m.ndcg)
    }

    /// `{"10": {"hr": .., "ndcg": ..}, .., "users_evaluated": n, "seed": s}`
    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        for (k, m) in &self.at {
            obj.insert(k.to_string(), json!({ "hr": m.hr, "ndcg": m.ndcg }));
        }
        obj.insert("users_evaluated".into(), json!(self.users_evaluated));
        obj.insert("seed".into(), json!(self.seed));
        Value::Object(obj)
    }
}

/// Ranks every evaluable test user's candidates with `score`.
pub fn evaluate<F>(corpus: &InteractionCorpus, mut score: F, ks: &[usize], seed: u64) -> Result<MetricReport>
where
    F: FnMut(u32, &[u32]) -> Result<Vec<f64>>,
{
    let mut ranks = Vec::with_capacity(corpus.candidates.len());
    for (&user, list) in &corpus.candidates {
        let test_item = corpus.test_item(user).expect("candidate lists exist only for test users");
        ranks.push((user, rank_candidates(&mut score, user, list, test_item)?));
    }
    MetricReport::from_ranks(ranks, ks, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_maximum_ranks_first() {
        let mut s = vec![0.0; 100];
        s[42] = 1.0;
        assert_eq!(rank_of(&s, 42).unwrap(), 1);
    }

    #[test]
    fn ties_rank_pessimistically() {
        assert_eq!(rank_of(&[0.3; 100], 0).unwrap(), 100);
        assert_eq!(rank_of(&[0.5, 0.9, 0.5, 0.1], 2).unwrap(), 3);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(rank_of(&[0.0, f64::NAN], 0).is_err());
    }

    #[test]
    fn metric_units() {
        assert_eq!(metrics_at_k(&[1], 10).unwrap(), (1.0, 1.0));
        assert_eq!(metrics_at_k(&[3], 10).unwrap(), (1.0, 0.5));
        assert_eq!(metrics_at_k(&[11], 10).unwrap(), (0.0, 0.0));
        assert!(metrics_at_k(&[], 10).is_err());
    }

    #[test]
    fn rank_candidates_locates_test_item() {
        let r = rank_candidates(|_, c| Ok(c.iter().map(|&n| n as f64).collect()), 0, &[5, 9, 2], 5).unwrap();
        assert_eq!(r, 2);
        assert!(rank_candidates(|_, _| Ok(vec![0.0; 3]), 0, &[5, 9, 2], 7).is_err());
    }

    #[test]
    fn report_json_shape() {
        let r = MetricReport::from_ranks(vec![(0, 1), (1, 3)], &[10, 20], 7).unwrap();
        let v = r.to_json();
        assert_eq!(v["10"]["hr"], 1.0);
        assert_eq!(v["20"]["ndcg"], 0.75);
        assert_eq!(v["users_evaluated"], 2);
        assert_eq!(v["seed"], 7);
    }
}
