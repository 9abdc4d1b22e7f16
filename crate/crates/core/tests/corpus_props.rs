use std::collections::{HashMap, HashSet};
use std::io::Cursor;

use proptest::prelude::*;

use textgraph_rec::corpus::{build_corpus, parse_reviews, ReviewRecord, EVAL_NEGATIVES};

fn reviews_strategy() -> impl Strategy<Value = Vec<ReviewRecord>> {
    prop::collection::vec((0u8..15, 0u8..140, 0u64..30), 1..400).prop_map(|rows| {
        rows.into_iter()
            .map(|(u, i, t)| ReviewRecord {
                user_key: format!("u{u}"),
                item_key: format!("i{i}"),
                rating: 5.0,
                comment_text: String::new(),
                timestamp: t,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_invariants(reviews in reviews_strategy(), seed in any::<u64>()) {
        let c = build_corpus(&reviews, seed).unwrap();
        let distinct: HashSet<(&str, &str)> = reviews.iter().map(|r| (r.user_key.as_str(), r.item_key.as_str())).collect();
        // train and test partition the distinct pairs
        prop_assert_eq!(c.train.len() + c.test.len(), distinct.len());
        prop_assert_eq!(c.total_interactions(), distinct.len());
        let train: HashSet<(u32, u32)> = c.train.iter().map(|x| (x.user, x.item)).collect();
        prop_assert_eq!(train.len(), c.train.len());

        let mut per_user: HashMap<u32, usize> = HashMap::new();
        for x in c.train.iter().chain(&c.test) {
            *per_user.entry(x.user).or_default() += 1;
        }
        let mut test_users = HashSet::new();
        for t in &c.test {
            prop_assert!(test_users.insert(t.user), "one test pair per user");
            prop_assert!(!train.contains(&(t.user, t.item)));
            prop_assert!(per_user[&t.user] >= 2);
            // the held-out pair is the latest of that user
            for x in c.train.iter().filter(|x| x.user == t.user) {
                prop_assert!(x.timestamp <= t.timestamp);
            }
        }
        for (&u, &n) in &per_user {
            prop_assert_eq!(test_users.contains(&u), n >= 2);
        }

        for (&u, list) in &c.candidates {
            prop_assert_eq!(list.len(), EVAL_NEGATIVES + 1);
            prop_assert_eq!(Some(*list.last().unwrap()), c.test_item(u));
            let unique: HashSet<_> = list.iter().collect();
            prop_assert_eq!(unique.len(), list.len());
            for &n in &list[..EVAL_NEGATIVES] {
                prop_assert!(!c.interacted(u, n));
            }
        }
        prop_assert_eq!(c.candidates.len() + c.excluded_users.len(), c.test.len());
        for &u in &c.excluded_users {
            prop_assert!(c.num_items() - c.user_items(u).len() < EVAL_NEGATIVES);
        }

        let again = build_corpus(&reviews, seed).unwrap();
        prop_assert_eq!(again.split_manifest(), c.split_manifest());
    }
}

#[test]
fn hundred_item_catalogue_has_no_evaluable_user() {
    // every test user has at least two interactions, leaving at most 98
    // never-interacted items out of 100
    let reviews: Vec<ReviewRecord> = (0..20)
        .flat_map(|u| {
            (0..3).map(move |k| ReviewRecord {
                user_key: format!("u{u}"),
                item_key: format!("i{}", (u * 5 + k * 31) % 100),
                rating: 4.0,
                comment_text: String::new(),
                timestamp: k as u64,
            })
        })
        .chain((0..100).map(|i| ReviewRecord {
            user_key: "catalogue".into(),
            item_key: format!("i{i}"),
            rating: 4.0,
            comment_text: String::new(),
            timestamp: 0,
        }))
        .collect();
    let c = build_corpus(&reviews, 1).unwrap();
    assert_eq!(c.num_items(), 100);
    assert!(c.candidates.is_empty());
    assert_eq!(c.excluded_users.len(), c.test.len());
}

fn lines(good: usize, bad: usize) -> String {
    let mut s = String::new();
    for i in 0..good {
        s.push_str(&format!("{{\"reviewerID\":\"u{i}\",\"asin\":\"a\",\"overall\":5.0,\"unixReviewTime\":{i}}}\n"));
    }
    for _ in 0..bad {
        s.push_str("{not json\n");
    }
    s
}

#[test]
fn malformed_share_threshold() {
    let ok = parse_reviews(Cursor::new(lines(198, 2))).unwrap();
    assert_eq!((ok.records.len(), ok.errors.len(), ok.lines), (198, 2, 200));
    assert!(parse_reviews(Cursor::new(lines(197, 3))).is_err());
    assert!(parse_reviews(Cursor::new(lines(0, 1))).is_err());
}
