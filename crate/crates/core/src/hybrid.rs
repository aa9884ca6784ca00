//! Rank-interleaving hybrid: `[A1, B1, A2, B2, …]`.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::ranking::{RankedItem, RankedList, Source};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridSpec {
    /// Target list length.
    pub n: usize,
    /// Engine that fills slot 1.
    pub first: Source,
    /// Engine that fills the last slot when `n` is odd.
    pub odd_slot: Source,
}

impl HybridSpec {
    /// Content first, odd slot from content.
    pub fn new(n: usize) -> Result<Self> {
        let s = HybridSpec {
            n,
            first: Source::Content,
            odd_slot: Source::Content,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("hybrid list length must be at least 1"));
        }
        Ok(())
    }

    /// Source of 0-based slot `i` before any backfilling.
    pub fn slot_source(&self, i: usize) -> Source {
        if self.n % 2 == 1 && i == self.n - 1 {
            self.odd_slot
        } else if i % 2 == 0 {
            self.first
        } else {
            self.first.other()
        }
    }
}

struct Cursor<'a, T> {
    items: &'a [RankedItem<T>],
    pos: usize,
}

impl<'a, T> Cursor<'a, T> {
    /// Next item whose hotel has not been placed yet.
    fn next_fresh(&mut self, placed: &HashSet<&str>) -> Option<&'a RankedItem<T>> {
        while let Some(item) = self.items.get(self.pos) {
            self.pos += 1;
            if !placed.contains(item.hotel_code.as_str()) {
                return Some(item);
            }
        }
        None
    }
}

/// Merges the content list and the CF list slot by slot.
///
/// A hotel already placed is skipped and the same engine's next item fills
/// the slot; when that engine runs dry the other engine fills it. Output
/// length is `min(n, distinct hotels available)` and each item keeps the
/// source and score it had in its engine's list.
pub fn interleave<T: Scalar>(content: &RankedList<T>, cf: &RankedList<T>, spec: &HybridSpec) -> Result<RankedList<T>> {
    spec.validate()?;
    let user_id = if content.user_id.is_empty() {
        cf.user_id.clone()
    } else {
        content.user_id.clone()
    };
    let mut content_cur = Cursor {
        items: &content.items,
        pos: 0,
    };
    let mut cf_cur = Cursor {
        items: &cf.items,
        pos: 0,
    };
    let mut placed: HashSet<&str> = HashSet::new();
    let mut items = Vec::with_capacity(spec.n);
    for slot in 0..spec.n {
        let (primary, secondary) = match spec.slot_source(slot) {
            Source::Content => (&mut content_cur, &mut cf_cur),
            Source::Cf => (&mut cf_cur, &mut content_cur),
        };
        let Some(item) = primary.next_fresh(&placed).or_else(|| secondary.next_fresh(&placed)) else {
            break;
        };
        placed.insert(item.hotel_code.as_str());
        items.push(item.clone());
    }
    Ok(RankedList { user_id, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(source: Source, codes: &[&str]) -> RankedList<f64> {
        RankedList {
            user_id: "u".into(),
            items: codes
                .iter()
                .enumerate()
                .map(|(i, c)| RankedItem {
                    hotel_code: c.to_string(),
                    score: -(i as f64),
                    source,
                })
                .collect(),
        }
    }

    fn codes(l: &RankedList<f64>) -> Vec<&str> {
        l.codes().collect()
    }

    #[test]
    fn alternates_a_then_b() {
        let a = list(Source::Content, &["a1", "a2", "a3"]);
        let b = list(Source::Cf, &["b1", "b2", "b3"]);
        let m = interleave(&a, &b, &HybridSpec::new(6).unwrap()).unwrap();
        assert_eq!(codes(&m), vec!["a1", "b1", "a2", "b2", "a3", "b3"]);
        let sources: Vec<Source> = m.items.iter().map(|i| i.source).collect();
        assert_eq!(sources, [Source::Content, Source::Cf].repeat(3));
    }

    #[test]
    fn duplicate_is_skipped_and_backfilled_from_same_source() {
        let a = list(Source::Content, &["x", "a2"]);
        let b = list(Source::Cf, &["x", "b2"]);
        let m = interleave(&a, &b, &HybridSpec::new(4).unwrap()).unwrap();
        assert_eq!(codes(&m), vec!["x", "b2", "a2"]);
        assert_eq!(m.items[1].source, Source::Cf);
    }

    #[test]
    fn odd_length_takes_last_slot_from_configured_source() {
        let a = list(Source::Content, &["a1", "a2", "a3"]);
        let b = list(Source::Cf, &["b1", "b2", "b3"]);
        let m = interleave(&a, &b, &HybridSpec::new(5).unwrap()).unwrap();
        assert_eq!(codes(&m), vec!["a1", "b1", "a2", "b2", "a3"]);
        assert_eq!(m.items[4].source, Source::Content);

        let cf_first = HybridSpec { n: 5, first: Source::Cf, odd_slot: Source::Content };
        let m = interleave(&a, &b, &cf_first).unwrap();
        assert_eq!(codes(&m), vec!["b1", "a1", "b2", "a2", "a3"]);

        let odd_cf = HybridSpec { n: 3, first: Source::Content, odd_slot: Source::Cf };
        assert_eq!(codes(&interleave(&a, &b, &odd_cf).unwrap()), vec!["a1", "b1", "b2"]);
    }

    #[test]
    fn exhausted_source_is_covered_by_the_other() {
        let a = list(Source::Content, &["a1"]);
        let b = list(Source::Cf, &["b1", "b2", "b3"]);
        let m = interleave(&a, &b, &HybridSpec::new(4).unwrap()).unwrap();
        assert_eq!(codes(&m), vec!["a1", "b1", "b2", "b3"]);
    }

    #[test]
    fn empty_inputs_give_empty_output() {
        let e = list(Source::Content, &[]);
        assert!(interleave(&e, &e, &HybridSpec::new(10).unwrap()).unwrap().is_empty());
        assert!(HybridSpec::new(0).is_err());
    }

    fn arb_list(prefix: &'static str) -> impl Strategy<Value = Vec<String>> {
        proptest::sample::subsequence((0..12).collect::<Vec<u8>>(), 0..12)
            .prop_shuffle()
            .prop_map(move |v| v.into_iter().map(|i| format!("{prefix}{i}")).collect())
    }

    proptest! {
        #[test]
        fn interleave_invariants(
            a in arb_list("h"),
            b in arb_list("h"),
            n in 1usize..20,
            first_cf in any::<bool>(),
            odd_cf in any::<bool>(),
        ) {
            let src = |cf: bool| if cf { Source::Cf } else { Source::Content };
            let spec = HybridSpec { n, first: src(first_cf), odd_slot: src(odd_cf) };
            let la = list(Source::Content, &a.iter().map(String::as_str).collect::<Vec<_>>());
            let lb = list(Source::Cf, &b.iter().map(String::as_str).collect::<Vec<_>>());
            let m = interleave(&la, &lb, &spec).unwrap();

            let out = codes(&m);
            let uniq: HashSet<&str> = out.iter().copied().collect();
            prop_assert_eq!(uniq.len(), out.len());

            let distinct: HashSet<&String> = a.iter().chain(&b).collect();
            prop_assert_eq!(out.len(), n.min(distinct.len()));

            // per-source order preserved
            for (source, original) in [(Source::Content, &a), (Source::Cf, &b)] {
                let picked: Vec<&str> = m.items.iter().filter(|i| i.source == source).map(|i| i.hotel_code.as_str()).collect();
                let positions: Vec<usize> = picked.iter().map(|c| original.iter().position(|o| o == c).unwrap()).collect();
                prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn self_merge_collapses(a in arb_list("h"), n in 1usize..20) {
            let la = list(Source::Content, &a.iter().map(String::as_str).collect::<Vec<_>>());
            let m = interleave(&la, &la, &HybridSpec::new(n).unwrap()).unwrap();
            let expect: Vec<&str> = a.iter().take(n).map(String::as_str).collect();
            prop_assert_eq!(codes(&m), expect);
        }

        #[test]
        fn disjoint_even_gives_exact_pattern(k in 1usize..6, extra in 0usize..3) {
            let a: Vec<String> = (0..k + extra).map(|i| format!("a{i}")).collect();
            let b: Vec<String> = (0..k).map(|i| format!("b{i}")).collect();
            let n = 2 * k;
            let la = list(Source::Content, &a.iter().map(String::as_str).collect::<Vec<_>>());
            let lb = list(Source::Cf, &b.iter().map(String::as_str).collect::<Vec<_>>());
            let m = interleave(&la, &lb, &HybridSpec::new(n).unwrap()).unwrap();
            let expect: Vec<String> = (0..k).flat_map(|i| [a[i].clone(), b[i].clone()]).collect();
            prop_assert_eq!(codes(&m), expect.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }
}
