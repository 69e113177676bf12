//! Stratified review selection for item descriptions.
//!
//! When an item has more reviews than the budget `p`, slots are apportioned to
//! rating strata by largest remainder: every stratum gets the floor of its exact
//! proportional share, and the leftover slots go to the largest fractional
//! remainders, ties resolved towards the lower rating so that scarce negative
//! reviews survive. Reviews are then drawn uniformly without replacement inside
//! each stratum from a seeded stream, and trimmed to their first 50 words.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{ItemId, ItemRecord, Rating};

pub const DEFAULT_REVIEW_BUDGET: usize = 10;
pub const REVIEW_WORD_LIMIT: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewSample {
    pub item_id: ItemId,
    /// Selected reviews in their original order, trimmed.
    pub selected: Vec<(Rating, String)>,
    /// Slots per star rating (1..=5); sums to `selected.len()`.
    pub allocation: BTreeMap<u8, usize>,
}

/// First `limit` whitespace-delimited words, rejoined with single spaces.
pub fn trim_words(text: &str, limit: usize) -> String {
    text.split_whitespace().take(limit).collect::<Vec<_>>().join(" ")
}

/// Largest-remainder apportionment of `budget` slots over `sizes`.
///
/// Remainder ties go to the earlier index, so callers order strata by
/// priority. Allocations never exceed stratum sizes; slots that cannot be
/// placed cascade to the next stratum in remainder order.
pub fn apportion(sizes: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total <= budget {
        return sizes.to_vec();
    }
    // exact share of stratum i is budget * sizes[i] / total; keep numerators as integers
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| budget * s / total).collect();
    let remainder: Vec<usize> = sizes.iter().map(|&s| budget * s % total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| remainder[b].cmp(&remainder[a]).then(a.cmp(&b)));

    let mut left = budget - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    debug_assert_eq!(left, 0);
    alloc
}

fn item_seed(seed: u64, item_id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(item_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Selects up to `p` reviews of `item`, preserving its rating distribution.
pub fn select_reviews(item: &ItemRecord, p: usize, seed: u64) -> ReviewSample {
    let reviews = &item.reviews;
    let mut allocation = BTreeMap::new();

    // strata ordered lowest rating first: that order breaks remainder ties
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); 5];
    for (idx, r) in reviews.iter().enumerate() {
        strata[r.rating.value() as usize - 1].push(idx);
    }

    let chosen: Vec<usize> = if reviews.len() <= p {
        (0..reviews.len()).collect()
    } else {
        let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
        let alloc = apportion(&sizes, p);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, &item.item_id));
        let mut picked = Vec::with_capacity(p);
        for (stratum, &take) in strata.iter().zip(&alloc) {
            picked.extend(index::sample(&mut rng, stratum.len(), take).into_iter().map(|j| stratum[j]));
        }
        picked.sort_unstable();
        picked
    };

    for &idx in &chosen {
        *allocation.entry(reviews[idx].rating.value()).or_insert(0) += 1;
    }
    ReviewSample {
        item_id: item.item_id.clone(),
        selected: chosen
            .into_iter()
            .map(|idx| (reviews[idx].rating, trim_words(&reviews[idx].text, REVIEW_WORD_LIMIT)))
            .collect(),
        allocation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Review;
    use proptest::prelude::*;

    fn item_with(counts: &[(u8, usize)]) -> ItemRecord {
        let mut item = ItemRecord::bare("I");
        let mut n = 0;
        for &(rating, count) in counts {
            for _ in 0..count {
                item.reviews.push(Review {
                    rating: Rating::new(rating as i64).unwrap(),
                    text: format!("review {n} rated {rating}"),
                    user_id: format!("u{n}"),
                });
                n += 1;
            }
        }
        item
    }

    #[test]
    fn trim_examples() {
        assert_eq!(trim_words("a b c", 50), "a b c");
        assert_eq!(trim_words("a b c", 2), "a b");
        assert_eq!(trim_words("", 50), "");
        assert_eq!(trim_words("  a\t\nb  ", 5), "a b");
    }

    #[test]
    fn sixty_words_trimmed_to_fifty() {
        let words: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let mut item = ItemRecord::bare("I");
        item.reviews.push(Review {
            rating: Rating::new(4).unwrap(),
            text: words.join(" "),
            user_id: "u".into(),
        });
        let sample = select_reviews(&item, 10, 0);
        assert_eq!(sample.selected[0].1, words[..50].join(" "));
    }

    #[test]
    fn at_budget_selects_everything() {
        let item = item_with(&[(5, 4), (2, 6)]);
        let sample = select_reviews(&item, 10, 1);
        assert_eq!(sample.selected.len(), 10);
        assert_eq!(sample.allocation[&5], 4);
        assert_eq!(sample.allocation[&2], 6);
    }

    #[test]
    fn twenty_reviews_apportioned() {
        // exact shares 5, 2.5, 1.5, 0.5, 0.5: floors {5,2,1,0,0}, two leftover
        // slots on tied remainders go to ratings 1 and 2
        let item = item_with(&[(5, 10), (4, 5), (3, 3), (2, 1), (1, 1)]);
        let sample = select_reviews(&item, 10, 42);
        let expected: BTreeMap<u8, usize> = [(5, 5), (4, 2), (3, 1), (2, 1), (1, 1)].into_iter().collect();
        assert_eq!(sample.allocation, expected);
        assert_eq!(sample.selected.len(), 10);
    }

    #[test]
    fn empty_item_gives_empty_sample() {
        let sample = select_reviews(&ItemRecord::bare("I"), 10, 0);
        assert!(sample.selected.is_empty());
        assert!(sample.allocation.is_empty());
    }

    proptest! {
        #[test]
        fn sampling_is_deterministic_and_faithful(
            counts in proptest::collection::vec(0usize..15, 5),
            p in 1usize..15,
            seed in any::<u64>(),
        ) {
            let spec: Vec<(u8, usize)> = counts.iter().enumerate().map(|(i, &c)| (i as u8 + 1, c)).collect();
            let item = item_with(&spec);
            let a = select_reviews(&item, p, seed);
            let b = select_reviews(&item, p, seed);
            prop_assert_eq!(&a, &b);
            let total: usize = counts.iter().sum();
            prop_assert_eq!(a.selected.len(), total.min(p));
            prop_assert_eq!(a.allocation.values().sum::<usize>(), a.selected.len());
            for (rating, n) in &a.allocation {
                prop_assert!(*n <= counts[*rating as usize - 1]);
            }
            for (rating, text) in &a.selected {
                prop_assert!(item.reviews.iter().any(|r| r.rating == *rating && r.text.starts_with(text.as_str())));
            }
        }
    }
}
