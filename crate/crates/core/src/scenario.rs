//! Train/test splits: per-user reservation-count filters and leave-last-out.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::catalog::ReservationRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestRule {
    /// Each user's date-maximal reservation is held out.
    LastPerUser,
    /// Reuse the test set of an earlier scenario.
    BorrowTestFrom(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub min_res: usize,
    pub max_res: usize,
    pub test_rule: TestRule,
}

impl ScenarioSpec {
    /// The five standard scenarios.
    ///
    /// | id | reservations | test set               |
    /// |----|--------------|------------------------|
    /// | 1  | 3–10         | last per user          |
    /// | 2  | 2–10         | last per user          |
    /// | 3  | 2–10         | scenario 1's test set  |
    /// | 4  | 3–5          | last per user          |
    /// | 5  | 8–10         | last per user          |
    pub fn standard(id: u8) -> Result<Self> {
        let (min_res, max_res, test_rule) = match id {
            1 => (3, 10, TestRule::LastPerUser),
            2 => (2, 10, TestRule::LastPerUser),
            3 => (2, 10, TestRule::BorrowTestFrom(1)),
            4 => (3, 5, TestRule::LastPerUser),
            5 => (8, 10, TestRule::LastPerUser),
            _ => return Err(Error::invalid(format!("scenario id must be 1..5, got {id}"))),
        };
        Ok(ScenarioSpec {
            id,
            min_res,
            max_res,
            test_rule,
        })
    }

    pub fn all_standard() -> Vec<ScenarioSpec> {
        (1..=5).map(|id| Self::standard(id).expect("standard id")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_res < 2 || self.min_res > self.max_res {
            return Err(Error::invalid(format!(
                "scenario {}: need 2 <= min_res <= max_res, got {}..{}",
                self.id, self.min_res, self.max_res
            )));
        }
        if let TestRule::BorrowTestFrom(src) = self.test_rule {
            if src >= self.id {
                return Err(Error::invalid(format!(
                    "scenario {} may only borrow the test set of an earlier scenario, not {src}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Size summary of a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub hotels: usize,
    pub train_records: usize,
    pub train_users: usize,
    pub test_records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub scenario_id: u8,
    pub train: Vec<ReservationRecord>,
    pub test: Vec<ReservationRecord>,
    pub stats: SplitStats,
}

impl SplitDataset {
    pub fn new(scenario_id: u8, train: Vec<ReservationRecord>, test: Vec<ReservationRecord>) -> Self {
        let stats = compute_stats(&train, &test);
        SplitDataset {
            scenario_id,
            train,
            test,
            stats,
        }
    }
}

fn compute_stats(train: &[ReservationRecord], test: &[ReservationRecord]) -> SplitStats {
    let hotels: HashSet<&str> = train
        .iter()
        .chain(test)
        .map(|r| r.hotel_code.as_str())
        .collect();
    let users: HashSet<&str> = train.iter().map(|r| r.user_id.as_str()).collect();
    SplitStats {
        hotels: hotels.len(),
        train_records: train.len(),
        train_users: users.len(),
        test_records: test.len(),
    }
}

fn counts_per_user(records: &[ReservationRecord]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for r in records {
        *counts.entry(r.user_id.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Keeps the records of users whose total reservation count lies in
/// `min_res..=max_res`, in input order.
pub fn filter_by_count(
    records: &[ReservationRecord],
    min_res: usize,
    max_res: usize,
) -> Result<Vec<ReservationRecord>> {
    if min_res < 2 {
        return Err(Error::invalid(format!("min_res must be >= 2, got {min_res}")));
    }
    if min_res > max_res {
        return Err(Error::invalid(format!("empty range {min_res}..{max_res}")));
    }
    let counts = counts_per_user(records);
    let kept: Vec<ReservationRecord> = records
        .iter()
        .filter(|r| (min_res..=max_res).contains(&counts[r.user_id.as_str()]))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::data(format!(
            "no users with {min_res}..={max_res} reservations"
        )));
    }
    Ok(kept)
}

/// Holds out each user's latest reservation; on a date tie the record that
/// comes later in the input wins. Train keeps input order, test is ordered
/// by the held-out records' input positions.
pub fn leave_last_out(records: &[ReservationRecord]) -> Result<(Vec<ReservationRecord>, Vec<ReservationRecord>)> {
    let mut last: HashMap<&str, usize> = HashMap::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (pos, r) in records.iter().enumerate() {
        *counts.entry(r.user_id.as_str()).or_insert(0) += 1;
        last.entry(r.user_id.as_str())
            .and_modify(|best| {
                if r.date >= records[*best].date {
                    *best = pos;
                }
            })
            .or_insert(pos);
    }
    if let Some((user, _)) = counts.iter().filter(|(_, &c)| c < 2).min() {
        return Err(Error::data(format!(
            "user '{user}' has a single reservation; leave-last-out needs at least two"
        )));
    }
    let held: HashSet<usize> = last.into_values().collect();
    let mut train = Vec::with_capacity(records.len() - held.len());
    let mut test = Vec::with_capacity(held.len());
    for (pos, r) in records.iter().enumerate() {
        if held.contains(&pos) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Multiset difference `records − remove`, preserving the order of `records`.
fn multiset_minus(records: &[ReservationRecord], remove: &[ReservationRecord]) -> Result<Vec<ReservationRecord>> {
    let mut pending: HashMap<&ReservationRecord, usize> = HashMap::new();
    for r in remove {
        *pending.entry(r).or_insert(0) += 1;
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match pending.get_mut(r) {
            Some(n) if *n > 0 => *n -= 1,
            _ => out.push(r.clone()),
        }
    }
    if pending.values().any(|&n| n > 0) {
        return Err(Error::data(
            "borrowed test set contains records absent from this scenario's filtered data",
        ));
    }
    Ok(out)
}

/// Builds one scenario's split. `prior` must be the materialized scenario
/// named by a `BorrowTestFrom` rule and is ignored otherwise.
pub fn materialize_scenario(
    spec: &ScenarioSpec,
    records: &[ReservationRecord],
    prior: Option<&SplitDataset>,
) -> Result<SplitDataset> {
    spec.validate()?;
    let filtered = filter_by_count(records, spec.min_res, spec.max_res)?;
    match spec.test_rule {
        TestRule::LastPerUser => {
            let (train, test) = leave_last_out(&filtered)?;
            Ok(SplitDataset::new(spec.id, train, test))
        }
        TestRule::BorrowTestFrom(src) => {
            let prior = prior.filter(|p| p.scenario_id == src).ok_or_else(|| {
                Error::data(format!(
                    "scenario {} borrows scenario {src}'s test set; materialize scenario {src} first",
                    spec.id
                ))
            })?;
            let train = multiset_minus(&filtered, &prior.test)?;
            Ok(SplitDataset::new(spec.id, train, prior.test.clone()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn rec(u: &str, h: &str, month: u32, day: u32) -> ReservationRecord {
        ReservationRecord::new(u, h, NaiveDate::from_ymd_opt(2018, month, day).unwrap()).unwrap()
    }

    fn users_with_counts(counts: &[(&str, usize)]) -> Vec<ReservationRecord> {
        let mut out = Vec::new();
        for &(u, n) in counts {
            for k in 0..n {
                out.push(rec(u, &format!("h{k}"), 1 + (k as u32 % 12), 1 + k as u32));
            }
        }
        out
    }

    fn users_of(records: &[ReservationRecord]) -> Vec<String> {
        let mut u: Vec<String> = records.iter().map(|r| r.user_id.clone()).collect();
        u.sort();
        u.dedup();
        u
    }

    #[test]
    fn filter_keeps_users_in_range() {
        let records = users_with_counts(&[("u1", 2), ("u2", 5), ("u3", 12)]);
        assert_eq!(users_of(&filter_by_count(&records, 3, 10).unwrap()), vec!["u2"]);
        assert_eq!(users_of(&filter_by_count(&records, 2, 10).unwrap()), vec!["u1", "u2"]);
    }

    #[test]
    fn filter_rejects_bad_ranges_and_empty_results() {
        let records = users_with_counts(&[("u1", 2)]);
        assert!(matches!(filter_by_count(&records, 1, 10), Err(Error::InvalidArgument(_))));
        assert!(matches!(filter_by_count(&records, 3, 10), Err(Error::Data(_))));
    }

    #[test]
    fn leave_last_out_takes_max_date() {
        let records = vec![rec("u1", "hA", 1, 10), rec("u1", "hB", 3, 10)];
        let (train, test) = leave_last_out(&records).unwrap();
        assert_eq!(train, vec![records[0].clone()]);
        assert_eq!(test, vec![records[1].clone()]);
    }

    #[test]
    fn leave_last_out_ties_go_to_later_input_row() {
        let records = vec![rec("u1", "hA", 3, 1), rec("u1", "hB", 3, 1)];
        let (_, test) = leave_last_out(&records).unwrap();
        assert_eq!(test[0].hotel_code, "hB");
    }

    #[test]
    fn leave_last_out_is_not_fooled_by_input_order() {
        let records = vec![rec("u1", "hLate", 9, 1), rec("u1", "hEarly", 1, 1)];
        let (_, test) = leave_last_out(&records).unwrap();
        assert_eq!(test[0].hotel_code, "hLate");
    }

    #[test]
    fn single_record_user_is_fatal() {
        let records = vec![rec("u1", "hA", 1, 1), rec("u2", "hA", 1, 1), rec("u2", "hB", 2, 1)];
        assert!(matches!(leave_last_out(&records), Err(Error::Data(_))));
    }

    #[test]
    fn standard_scenarios_have_expected_bounds() {
        let s1 = ScenarioSpec::standard(1).unwrap();
        assert_eq!((s1.min_res, s1.max_res, s1.test_rule), (3, 10, TestRule::LastPerUser));
        let s3 = ScenarioSpec::standard(3).unwrap();
        assert_eq!((s3.min_res, s3.max_res, s3.test_rule), (2, 10, TestRule::BorrowTestFrom(1)));
        assert_eq!(ScenarioSpec::standard(4).unwrap().max_res, 5);
        assert_eq!(ScenarioSpec::standard(5).unwrap().min_res, 8);
        assert!(ScenarioSpec::standard(6).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = ScenarioSpec::standard(1).unwrap();
        s.min_res = 1;
        assert!(s.validate().is_err());
        let bad_borrow = ScenarioSpec {
            id: 2,
            min_res: 2,
            max_res: 3,
            test_rule: TestRule::BorrowTestFrom(4),
        };
        assert!(bad_borrow.validate().is_err());
    }

    #[test]
    fn scenario_three_borrows_scenario_one_test() {
        let records = users_with_counts(&[("a", 2), ("b", 3), ("c", 4), ("d", 11)]);
        let s1 = materialize_scenario(&ScenarioSpec::standard(1).unwrap(), &records, None).unwrap();
        assert_eq!(s1.stats.test_records, 2);
        let s3 = materialize_scenario(&ScenarioSpec::standard(3).unwrap(), &records, Some(&s1)).unwrap();
        assert_eq!(s3.test, s1.test);
        // train covers the 2..10 users: a(2) + b(3-1) + c(4-1)
        assert_eq!(s3.train.len(), 2 + 2 + 3);
        assert_eq!(s3.stats.train_users, 3);
    }

    #[test]
    fn scenario_three_without_prior_fails() {
        let records = users_with_counts(&[("a", 3)]);
        let s3 = ScenarioSpec::standard(3).unwrap();
        assert!(materialize_scenario(&s3, &records, None).is_err());
        let s2 = materialize_scenario(&ScenarioSpec::standard(2).unwrap(), &records, None).unwrap();
        assert!(materialize_scenario(&s3, &records, Some(&s2)).is_err());
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<ReservationRecord>> {
        proptest::collection::vec((0u8..15, 0u8..6, 1u32..12, 1u32..4), 0..120).prop_map(|v| {
            v.into_iter()
                .map(|(u, h, m, d)| rec(&format!("u{u:02}"), &format!("h{h}"), m, d))
                .collect()
        })
    }

    fn sorted(mut v: Vec<ReservationRecord>) -> Vec<ReservationRecord> {
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn split_reconstructs_filtered_multiset(records in arb_corpus(), id in 1u8..=5) {
            let spec = ScenarioSpec::standard(id).unwrap();
            let prior = if id == 3 {
                match materialize_scenario(&ScenarioSpec::standard(1).unwrap(), &records, None) {
                    Ok(p) => Some(p),
                    Err(_) => return Ok(()),
                }
            } else {
                None
            };
            let Ok(split) = materialize_scenario(&spec, &records, prior.as_ref()) else { return Ok(()); };
            let filtered = filter_by_count(&records, spec.min_res, spec.max_res).unwrap();
            let mut joined = split.train.clone();
            joined.extend(split.test.iter().cloned());
            prop_assert_eq!(sorted(joined), sorted(filtered));

            let test_users = users_of(&split.test);
            prop_assert_eq!(test_users.len(), split.test.len());
            let train_counts = counts_per_user(&split.train);
            for t in &split.test {
                prop_assert!(train_counts.get(t.user_id.as_str()).copied().unwrap_or(0) >= spec.min_res - 1);
                if id != 3 {
                    // held-out record is date-maximal for its user
                    prop_assert!(split.train.iter().filter(|r| r.user_id == t.user_id).all(|r| r.date <= t.date));
                }
            }
        }

        #[test]
        fn widening_range_keeps_users(records in arb_corpus(), lo in 2usize..5, hi in 5usize..9, widen in 0usize..3) {
            if let Ok(narrow) = filter_by_count(&records, lo + widen, hi) {
                let wide = filter_by_count(&records, lo, hi + widen).unwrap();
                let wide_users: HashSet<String> = users_of(&wide).into_iter().collect();
                prop_assert!(users_of(&narrow).iter().all(|u| wide_users.contains(u)));
            }
        }
    }
}
