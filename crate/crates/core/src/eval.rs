//! Recall@N over leave-last-out test sets.
//!
//! Each test user has one held-out hotel, so recall is the share of test
//! users whose held-out hotel appears in their top-N list. Users without a
//! list are misses and are additionally tallied as skipped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::catalog::ReservationRecord;
use crate::engines::{Engine, TrainedEngines};
use crate::error::{Error, Result};
use crate::ranking::RankedList;
use crate::scalar::Scalar;
use crate::scenario::SplitDataset;

pub const DEFAULT_NS: [usize; 3] = [5, 10, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    /// The engine produced no list (unknown or cold-start user).
    NoList,
    /// The held-out hotel was visited in training and is therefore excluded
    /// from every candidate list.
    RepeatVisitExcluded,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::NoList => "no-list",
            SkipReason::RepeatVisitExcluded => "repeat-visit-excluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UserOutcome<T> {
    Ranked(RankedList<T>),
    Skipped(SkipReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOut {
    pub user_id: String,
    pub hotel_code: String,
}

impl From<&ReservationRecord> for HeldOut {
    fn from(r: &ReservationRecord) -> Self {
        HeldOut {
            user_id: r.user_id.clone(),
            hotel_code: r.hotel_code.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallOutcome {
    pub n: usize,
    pub hits: usize,
    pub misses: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
}

impl RecallOutcome {
    pub fn total(&self) -> usize {
        self.hits + self.misses + self.skipped_total()
    }

    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }

    /// `100 · hits / test users`.
    pub fn percent(&self) -> f64 {
        100.0 * self.hits as f64 / self.total() as f64
    }
}

/// Recall@`n` in percent. Users absent from `lists` count as skipped
/// ([`SkipReason::NoList`]).
pub fn recall_at_n<T: Scalar>(
    lists: &HashMap<String, UserOutcome<T>>,
    test: &[HeldOut],
    n: usize,
) -> Result<RecallOutcome> {
    if test.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let mut seen = HashSet::with_capacity(test.len());
    if let Some(dup) = test.iter().find(|t| !seen.insert(t.user_id.as_str())) {
        return Err(Error::data(format!(
            "user '{}' has more than one held-out record",
            dup.user_id
        )));
    }
    let mut out = RecallOutcome {
        n,
        hits: 0,
        misses: 0,
        skipped: BTreeMap::new(),
    };
    for t in test {
        match lists.get(&t.user_id) {
            Some(UserOutcome::Ranked(list)) => {
                if list.position_within(&t.hotel_code, n).is_some() {
                    out.hits += 1;
                } else {
                    out.misses += 1;
                }
            }
            Some(UserOutcome::Skipped(reason)) => *out.skipped.entry(*reason).or_insert(0) += 1,
            None => *out.skipped.entry(SkipReason::NoList).or_insert(0) += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scenario: u8,
    pub engine: Engine,
    /// N → recall percentage.
    pub recall_at: BTreeMap<usize, f64>,
    pub users: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
}

impl EvalReport {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }
}

/// Recall of every engine at every N on one split. Exclusion sets are each
/// user's training hotels; users whose held-out hotel is among them are
/// skipped as [`SkipReason::RepeatVisitExcluded`].
pub fn evaluate_scenario<T: Scalar>(
    split: &SplitDataset,
    engines: &TrainedEngines<T>,
    ns: &[usize],
) -> Result<Vec<EvalReport>> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::invalid("list lengths must be a non-empty set of positive integers"));
    }
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let max_n = *ns.last().expect("non-empty");
    let test: Vec<HeldOut> = split.test.iter().map(HeldOut::from).collect();

    type PerUser<T> = (String, BTreeMap<Engine, Vec<UserOutcome<T>>>);
    let per_user: Vec<PerUser<T>> = test
        .par_iter()
        .map(|t| {
            let mut outcomes = BTreeMap::new();
            if engines.visited(&t.user_id, &t.hotel_code) {
                for e in Engine::ALL {
                    outcomes.insert(e, vec![UserOutcome::Skipped(SkipReason::RepeatVisitExcluded); ns.len()]);
                }
                return (t.user_id.clone(), outcomes);
            }
            let base = engines.base_lists(&t.user_id, max_n);
            let single = |r: &std::result::Result<RankedList<T>, String>| match r {
                Ok(l) => UserOutcome::Ranked(l.clone()),
                Err(_) => UserOutcome::Skipped(SkipReason::NoList),
            };
            outcomes.insert(Engine::ContentFull, vec![single(&base.content_full)]);
            outcomes.insert(Engine::ContentClustered, vec![single(&base.content_cluster)]);
            outcomes.insert(Engine::Cf, vec![single(&base.cf)]);
            for (engine, content) in [
                (Engine::HybridFull, &base.content_full),
                (Engine::HybridClustered, &base.content_cluster),
            ] {
                let per_n = ns
                    .iter()
                    .map(|&n| match engines.hybrid_from(&t.user_id, content, &base.cf, n) {
                        Ok(l) => UserOutcome::Ranked(l),
                        Err(_) => UserOutcome::Skipped(SkipReason::NoList),
                    })
                    .collect();
                outcomes.insert(engine, per_n);
            }
            (t.user_id.clone(), outcomes)
        })
        .collect();

    let mut reports = Vec::new();
    for engine in Engine::ALL {
        let mut recall_at = BTreeMap::new();
        let mut skipped = BTreeMap::new();
        for (k, &n) in ns.iter().enumerate() {
            // Hybrid lists are built per N; single-engine lists are prefixes.
            let slot = if engine.is_hybrid() { k } else { 0 };
            let lists: HashMap<String, UserOutcome<T>> = per_user
                .iter()
                .map(|(u, o)| (u.clone(), o[&engine][slot].clone()))
                .collect();
            let r = recall_at_n(&lists, &test, n)?;
            recall_at.insert(n, r.percent());
            skipped = r.skipped;
        }
        reports.push(EvalReport {
            scenario: split.scenario_id,
            engine,
            recall_at,
            users: test.len(),
            skipped,
        });
    }
    Ok(reports)
}

/// Rows of `report.csv`: `scenario,engine,n,recall_pct,users,skipped`.
pub fn report_csv(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to emit"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "engine", "n", "recall_pct", "users", "skipped"])?;
    for r in reports {
        for (n, pct) in &r.recall_at {
            w.write_record([
                r.scenario.to_string(),
                r.engine.to_string(),
                n.to_string(),
                format!("{pct:.2}"),
                r.users.to_string(),
                r.skipped_total().to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One table per engine, scenarios as rows and Top-N as columns.
pub fn report_markdown(reports: &[EvalReport]) -> String {
    let mut ns: Vec<usize> = reports.iter().flat_map(|r| r.recall_at.keys().copied()).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut out = String::from("# Recall (%)\n");
    for engine in Engine::ALL {
        let rows: Vec<&EvalReport> = reports.iter().filter(|r| r.engine == engine).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = write!(out, "\n## {engine}\n\n| Scenario |");
        for n in &ns {
            let _ = write!(out, " Top{n} |");
        }
        out.push_str(" Users | Skipped |\n|---|");
        for _ in &ns {
            out.push_str("---:|");
        }
        out.push_str("---:|---:|\n");
        for r in rows {
            let _ = write!(out, "| {} |", r.scenario);
            for n in &ns {
                match r.recall_at.get(n) {
                    Some(p) => {
                        let _ = write!(out, " {p:.2} |");
                    }
                    None => out.push_str(" - |"),
                }
            }
            let _ = writeln!(out, " {} | {} |", r.users, r.skipped_total());
        }
    }
    out
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn emit_report(reports: &[EvalReport], dir: &Path) -> Result<()> {
    let csv = report_csv(reports)?;
    let md = report_markdown(reports);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let md_path = dir.join("report.md");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{RankedItem, Source};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ranked(user: &str, codes: &[String]) -> UserOutcome<f64> {
        UserOutcome::Ranked(RankedList {
            user_id: user.into(),
            items: codes
                .iter()
                .map(|c| RankedItem { hotel_code: c.clone(), score: 0.0, source: Source::Cf })
                .collect(),
        })
    }

    fn held(u: &str, h: &str) -> HeldOut {
        HeldOut { user_id: u.into(), hotel_code: h.into() }
    }

    fn codes(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_hit_at_rank_three() {
        let lists = HashMap::from([("u".to_string(), ranked("u", &codes(&["a", "b", "h", "c", "d"])))]);
        let r = recall_at_n(&lists, &[held("u", "h")], 5).unwrap();
        assert_eq!(r.percent(), 100.0);
        assert_eq!(recall_at_n(&lists, &[held("u", "h")], 2).unwrap().percent(), 0.0);
    }

    #[test]
    fn quarter_of_users_hit() {
        let mut lists = HashMap::new();
        let test: Vec<HeldOut> = (0..4).map(|i| held(&format!("u{i}"), "target")).collect();
        lists.insert("u0".into(), ranked("u0", &codes(&["target"])));
        for i in 1..4 {
            let u = format!("u{i}");
            lists.insert(u.clone(), ranked(&u, &codes(&["x", "y"])));
        }
        let r = recall_at_n(&lists, &test, 5).unwrap();
        assert_eq!(r.percent(), 25.0);
        assert_eq!((r.hits, r.misses, r.skipped_total()), (1, 3, 0));
    }

    #[test]
    fn missing_lists_are_skipped_misses() {
        let mut lists = HashMap::new();
        lists.insert("a".to_string(), ranked("a", &codes(&["h"])));
        lists.insert("b".to_string(), UserOutcome::Skipped(SkipReason::RepeatVisitExcluded));
        let test = vec![held("a", "h"), held("b", "h"), held("c", "h")];
        let r = recall_at_n(&lists, &test, 10).unwrap();
        assert_eq!(r.hits, 1);
        assert_eq!(r.skipped[&SkipReason::RepeatVisitExcluded], 1);
        assert_eq!(r.skipped[&SkipReason::NoList], 1);
        assert_eq!(r.total(), 3);
        assert!((r.percent() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_test_and_duplicate_users_rejected() {
        let lists: HashMap<String, UserOutcome<f64>> = HashMap::new();
        assert!(recall_at_n(&lists, &[], 5).is_err());
        assert!(recall_at_n(&lists, &[held("a", "x"), held("a", "y")], 5).is_err());
    }

    /// Exhaustive membership scan used as an independent oracle.
    fn brute_hits(lists: &HashMap<String, UserOutcome<f64>>, test: &[HeldOut], n: usize) -> usize {
        let mut hits = 0;
        for t in test {
            if let Some(UserOutcome::Ranked(l)) = lists.get(&t.user_id) {
                for k in 0..n.min(l.items.len()) {
                    if l.items[k].hotel_code == t.hotel_code {
                        hits += 1;
                    }
                }
            }
        }
        hits
    }

    #[test]
    fn random_ranking_recall_matches_uniform_expectation() {
        // Uniform permutation over u hotels: P(hit@N) = N/u.
        let u = 400;
        let users = 4000;
        let hotels: Vec<String> = (0..u).map(|j| format!("h{j}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut lists = HashMap::new();
        let mut test = Vec::new();
        for i in 0..users {
            let user = format!("u{i}");
            let mut perm = hotels.clone();
            perm.shuffle(&mut rng);
            test.push(held(&user, &hotels[i % u]));
            lists.insert(user.clone(), ranked(&user, &perm));
        }
        let n = 100;
        let r = recall_at_n(&lists, &test, n).unwrap();
        let p = n as f64 / u as f64;
        let sigma = 100.0 * (p * (1.0 - p) / users as f64).sqrt();
        assert!((r.percent() - 100.0 * p).abs() < 4.0 * sigma, "{} vs {}", r.percent(), 100.0 * p);
        assert_eq!(r.hits, brute_hits(&lists, &test, n));
    }

    #[test]
    fn recall_is_monotone_in_n_and_relabeling_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hotels: Vec<String> = (0..50).map(|j| format!("h{j}")).collect();
        let mut lists = HashMap::new();
        let mut relabeled = HashMap::new();
        let mut test = Vec::new();
        let mut test2 = Vec::new();
        let rename = |s: &str| format!("z{}", s.chars().rev().collect::<String>());
        for i in 0..100 {
            let user = format!("u{i}");
            let mut perm = hotels.clone();
            perm.shuffle(&mut rng);
            let target = hotels.choose(&mut rng).unwrap().clone();
            test.push(held(&user, &target));
            test2.push(held(&rename(&user), &rename(&target)));
            let renamed: Vec<String> = perm.iter().map(|h| rename(h)).collect();
            relabeled.insert(rename(&user), ranked(&rename(&user), &renamed));
            lists.insert(user.clone(), ranked(&user, &perm));
        }
        let mut prev = 0.0;
        for n in [1, 5, 10, 25, 50] {
            let r = recall_at_n(&lists, &test, n).unwrap();
            assert!(r.percent() >= prev);
            prev = r.percent();
            assert_eq!(r.hits, brute_hits(&lists, &test, n));
            assert_eq!(r, recall_at_n(&relabeled, &test2, n).unwrap());
        }
    }

    fn report(scenario: u8, engine: Engine, pcts: &[(usize, f64)]) -> EvalReport {
        EvalReport {
            scenario,
            engine,
            recall_at: pcts.iter().copied().collect(),
            users: 10,
            skipped: BTreeMap::from([(SkipReason::NoList, 2)]),
        }
    }

    #[test]
    fn csv_row_format() {
        let csv = report_csv(&[report(1, Engine::Cf, &[(5, 7.42)])]).unwrap();
        assert_eq!(csv, "scenario,engine,n,recall_pct,users,skipped\n1,cf,5,7.42,10,2\n");
        assert!(report_csv(&[]).is_err());
    }

    #[test]
    fn fifteen_rows_per_engine_and_deterministic_files() {
        let reports: Vec<EvalReport> = (1..=5)
            .map(|s| report(s, Engine::HybridFull, &[(5, 1.0), (10, 2.0), (100, 30.0)]))
            .collect();
        let csv = report_csv(&reports).unwrap();
        assert_eq!(csv.lines().count(), 1 + 15);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&reports, dir.path()).unwrap();
        let first = fs::read(dir.path().join("report.csv")).unwrap();
        let md_first = fs::read(dir.path().join("report.md")).unwrap();
        emit_report(&reports, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("report.csv")).unwrap());
        assert_eq!(md_first, fs::read(dir.path().join("report.md")).unwrap());
        let md = String::from_utf8(md_first).unwrap();
        assert!(md.contains("| 3 | 1.00 | 2.00 | 30.00 | 10 | 2 |"));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not-a-dir");
        fs::write(&file, "x").unwrap();
        assert!(emit_report(&[report(1, Engine::Cf, &[(5, 1.0)])], &file).is_err());
    }
}
