//! Input tables: reservations, hotel feature vectors, the feature catalog,
//! and the sparse user × hotel visit-count matrix.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const RESERVATION_HEADER: [&str; 3] = ["user_id", "hotel_code", "date"];
pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// One stay: a user at a hotel on a date.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReservationRecord {
    pub user_id: String,
    pub hotel_code: String,
    pub date: NaiveDate,
}

impl ReservationRecord {
    pub fn new(
        user_id: impl Into<String>,
        hotel_code: impl Into<String>,
        date: NaiveDate,
    ) -> Result<Self> {
        let user_id = user_id.into();
        let hotel_code = hotel_code.into();
        if user_id.is_empty() {
            return Err(Error::data("empty user_id"));
        }
        if hotel_code.is_empty() {
            return Err(Error::data("empty hotel_code"));
        }
        Ok(ReservationRecord {
            user_id,
            hotel_code,
            date,
        })
    }
}

/// A malformed input row, reported instead of aborting the parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedReservations {
    pub records: Vec<ReservationRecord>,
    pub rejects: Vec<Reject>,
}

/// Parses `user_id,hotel_code,date` CSV. Bad rows become [`Reject`]s; a
/// missing or wrong header and I/O failures are fatal.
pub fn parse_reservations<R: Read>(source: R) -> Result<ParsedReservations> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != RESERVATION_HEADER {
        return Err(Error::data(format!(
            "reservations header must be '{}', found '{}'",
            RESERVATION_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut out = ParsedReservations::default();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line() + 1;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                match parse_reservation_row(&record) {
                    Ok(r) => out.records.push(r),
                    Err(reason) => out.rejects.push(Reject { line, reason }),
                }
            }
            Err(e) => match e.kind() {
                csv::ErrorKind::Utf8 { pos, .. } => out.rejects.push(Reject {
                    line: pos.as_ref().map_or(line, |p| p.line()),
                    reason: "invalid UTF-8".into(),
                }),
                _ => return Err(e.into()),
            },
        }
    }
    Ok(out)
}

fn parse_reservation_row(row: &csv::StringRecord) -> std::result::Result<ReservationRecord, String> {
    if row.len() != 3 {
        return Err(format!("expected 3 fields, found {}", row.len()));
    }
    let (user, hotel, date) = (&row[0], &row[1], &row[2]);
    if user.is_empty() {
        return Err("empty user_id".into());
    }
    if hotel.is_empty() {
        return Err("empty hotel_code".into());
    }
    let date = NaiveDate::parse_from_str(date, DATE_FORMAT)
        .map_err(|e| format!("invalid date '{date}': {e}"))?;
    Ok(ReservationRecord {
        user_id: user.to_string(),
        hotel_code: hotel.to_string(),
        date,
    })
}

pub fn write_reservations<W: Write>(sink: W, records: &[ReservationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(RESERVATION_HEADER)?;
    for r in records {
        let date = r.date.format(DATE_FORMAT).to_string();
        w.write_record([r.user_id.as_str(), r.hotel_code.as_str(), date.as_str()])?;
    }
    w.flush().map_err(|e| Error::io("<csv sink>", e))?;
    Ok(())
}

pub fn write_rejects<W: Write>(sink: W, rejects: &[Reject]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["line", "reason"])?;
    for r in rejects {
        w.write_record([r.line.to_string(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<csv sink>", e))?;
    Ok(())
}

/// A hotel's attribute row. Before cleaning, `NaN` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HotelFeatureVector<T> {
    pub hotel_code: String,
    pub features: Vec<T>,
}

impl<T: Scalar> HotelFeatureVector<T> {
    pub fn new(hotel_code: impl Into<String>, features: Vec<T>) -> Self {
        HotelFeatureVector {
            hotel_code: hotel_code.into(),
            features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// 0/1 amenity flag; never rescaled.
    Binary,
    /// Quantity in native units; z-scored before distances are taken.
    Quantity,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Binary => "binary",
            FeatureKind::Quantity => "quantity",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(FeatureKind::Binary),
            "quantity" => Ok(FeatureKind::Quantity),
            other => Err(Error::data(format!("unknown feature kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams<T> {
    pub mean: T,
    pub stddev: T,
}

/// A plausibility rule on one feature, written `>0`, `>=1`, `<5` or `<=5`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound<T> {
    Greater(T),
    GreaterEq(T),
    Less(T),
    LessEq(T),
}

impl<T: Scalar> Bound<T> {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (ctor, rest): (fn(T) -> Bound<T>, &str) = if let Some(r) = s.strip_prefix(">=") {
            (Bound::GreaterEq, r)
        } else if let Some(r) = s.strip_prefix("<=") {
            (Bound::LessEq, r)
        } else if let Some(r) = s.strip_prefix('>') {
            (Bound::Greater, r)
        } else if let Some(r) = s.strip_prefix('<') {
            (Bound::Less, r)
        } else {
            return Err(Error::invalid(format!("bound '{s}' must start with >, >=, < or <=")));
        };
        let v: f64 = rest
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bound '{s}' has a non-numeric limit")))?;
        if !v.is_finite() {
            return Err(Error::invalid(format!("bound '{s}' has a non-finite limit")));
        }
        Ok(ctor(T::lit(v)))
    }

    pub fn admits(&self, x: T) -> bool {
        match *self {
            Bound::Greater(b) => x > b,
            Bound::GreaterEq(b) => x >= b,
            Bound::Less(b) => x < b,
            Bound::LessEq(b) => x <= b,
        }
    }
}

/// Names, kinds, plausibility bounds and (once fitted) z-score parameters
/// of the hotel feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCatalog<T> {
    names: Vec<String>,
    kinds: Vec<FeatureKind>,
    bounds: Vec<Vec<Bound<T>>>,
    scale_params: Option<Vec<ScaleParams<T>>>,
}

impl<T: Scalar> FeatureCatalog<T> {
    pub fn new(names: Vec<String>, kinds: Vec<FeatureKind>) -> Result<Self> {
        if names.len() != kinds.len() {
            return Err(Error::invalid("feature names and kinds differ in length"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::data("empty feature name"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::data(format!("duplicate feature name '{n}'")));
            }
        }
        let bounds = vec![Vec::new(); names.len()];
        Ok(FeatureCatalog {
            names,
            kinds,
            bounds,
            scale_params: None,
        })
    }

    /// Columns whose present values are all 0 or 1 are binary; the rest are
    /// quantities.
    pub fn infer(names: Vec<String>, hotels: &[HotelFeatureVector<T>]) -> Result<Self> {
        let kinds = (0..names.len())
            .map(|j| {
                let mut present = hotels
                    .iter()
                    .filter_map(|h| h.features.get(j).copied())
                    .filter(|x| x.is_finite())
                    .peekable();
                if present.peek().is_none() {
                    return FeatureKind::Quantity;
                }
                if present.all(|x| x == T::zero() || x == T::one()) {
                    FeatureKind::Binary
                } else {
                    FeatureKind::Quantity
                }
            })
            .collect();
        Self::new(names, kinds)
    }

    pub fn with_bound(mut self, feature: &str, bound: Bound<T>) -> Result<Self> {
        let j = self
            .index_of(feature)
            .ok_or_else(|| Error::invalid(format!("bound on unknown feature '{feature}'")))?;
        self.bounds[j].push(bound);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    pub fn bounds(&self, j: usize) -> &[Bound<T>] {
        &self.bounds[j]
    }

    pub fn scale_params(&self) -> Option<&[ScaleParams<T>]> {
        self.scale_params.as_deref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Builds a fitted catalog directly from stored parameters.
    pub fn from_fitted(
        names: Vec<String>,
        kinds: Vec<FeatureKind>,
        params: Vec<ScaleParams<T>>,
    ) -> Result<Self> {
        if params.len() != names.len() {
            return Err(Error::data("scale parameters do not align with feature names"));
        }
        if let Some(bad) = params.iter().position(|p| !(p.stddev > T::zero()) || !p.mean.is_finite()) {
            return Err(Error::data(format!(
                "feature '{}' has a non-positive or non-finite scale",
                names[bad]
            )));
        }
        let mut c = Self::new(names, kinds)?;
        c.scale_params = Some(params);
        Ok(c)
    }

    /// Fits per-column mean and population standard deviation on cleaned
    /// training hotels. Constant columns are dropped first; the returned
    /// hotels carry only the kept columns.
    pub fn fit_scaling(
        &self,
        hotels: &[HotelFeatureVector<T>],
    ) -> Result<(FeatureCatalog<T>, Vec<HotelFeatureVector<T>>)> {
        if hotels.is_empty() {
            return Err(Error::data("cannot fit scaling on an empty hotel list"));
        }
        check_widths(self, hotels)?;
        let n = T::from_count(hotels.len());
        let mut keep = Vec::new();
        let mut params = Vec::new();
        for j in 0..self.len() {
            let col = hotels.iter().map(|h| h.features[j]);
            if col.clone().any(|x| !x.is_finite()) {
                return Err(Error::data(format!(
                    "feature '{}' has missing values; clean hotels before fitting",
                    self.names[j]
                )));
            }
            let mean = col.clone().sum::<T>() / n;
            let var = col.map(|x| (x - mean) * (x - mean)).sum::<T>() / n;
            let stddev = var.sqrt();
            if stddev > T::zero() {
                keep.push(j);
                params.push(ScaleParams { mean, stddev });
            }
        }
        if keep.is_empty() {
            return Err(Error::data("every feature column is constant"));
        }
        let fitted = FeatureCatalog {
            names: keep.iter().map(|&j| self.names[j].clone()).collect(),
            kinds: keep.iter().map(|&j| self.kinds[j]).collect(),
            bounds: keep.iter().map(|&j| self.bounds[j].clone()).collect(),
            scale_params: Some(params),
        };
        let reduced = hotels
            .iter()
            .map(|h| HotelFeatureVector {
                hotel_code: h.hotel_code.clone(),
                features: keep.iter().map(|&j| h.features[j]).collect(),
            })
            .collect();
        Ok((fitted, reduced))
    }

    /// Selects this catalog's columns, by name, out of hotels laid out in
    /// `source`'s column order.
    pub fn align(
        &self,
        source: &FeatureCatalog<T>,
        hotels: &[HotelFeatureVector<T>],
    ) -> Result<Vec<HotelFeatureVector<T>>> {
        let cols = self
            .names
            .iter()
            .map(|n| {
                source
                    .index_of(n)
                    .ok_or_else(|| Error::data(format!("feature '{n}' missing from hotel table")))
            })
            .collect::<Result<Vec<_>>>()?;
        check_widths(source, hotels)?;
        Ok(hotels
            .iter()
            .map(|h| HotelFeatureVector {
                hotel_code: h.hotel_code.clone(),
                features: cols.iter().map(|&j| h.features[j]).collect(),
            })
            .collect())
    }
}

fn check_widths<T: Scalar>(catalog: &FeatureCatalog<T>, hotels: &[HotelFeatureVector<T>]) -> Result<()> {
    match hotels.iter().find(|h| h.features.len() != catalog.len()) {
        Some(h) => Err(Error::data(format!(
            "hotel '{}' has {} features, catalog has {}",
            h.hotel_code,
            h.features.len(),
            catalog.len()
        ))),
        None => Ok(()),
    }
}

/// Drops hotels whose present values violate a plausibility bound, then
/// imputes missing (or non-finite) cells with the column mean of the
/// surviving hotels. A column with no present value among the survivors
/// has nothing to impute from and is reported as a data error.
pub fn clean_hotels<T: Scalar>(
    raw: &[HotelFeatureVector<T>],
    catalog: &FeatureCatalog<T>,
) -> Result<Vec<HotelFeatureVector<T>>> {
    check_widths(catalog, raw)?;
    let mut kept: Vec<HotelFeatureVector<T>> = raw
        .iter()
        .filter(|h| {
            h.features.iter().enumerate().all(|(j, &x)| {
                !x.is_finite() || catalog.bounds[j].iter().all(|b| b.admits(x))
            })
        })
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::data("every hotel was dropped by cleaning"));
    }
    for j in 0..catalog.len() {
        let (sum, count) = kept
            .iter()
            .map(|h| h.features[j])
            .filter(|x| x.is_finite())
            .fold((T::zero(), 0usize), |(s, c), x| (s + x, c + 1));
        if count == 0 {
            return Err(Error::data(format!(
                "feature '{}' has no values after cleaning",
                catalog.names[j]
            )));
        }
        let fill = sum / T::from_count(count);
        for h in kept.iter_mut() {
            if !h.features[j].is_finite() {
                h.features[j] = fill;
            }
        }
    }
    Ok(kept)
}

/// A parsed `hotels.csv`: column names plus raw rows (`NaN` = empty cell).
#[derive(Debug, Clone)]
pub struct HotelTable<T> {
    pub feature_names: Vec<String>,
    pub hotels: Vec<HotelFeatureVector<T>>,
}

pub fn parse_hotels<T: Scalar, R: Read>(source: R) -> Result<HotelTable<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    if header.get(0) != Some("hotel_code") {
        return Err(Error::data("hotels header must start with 'hotel_code'"));
    }
    let feature_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if feature_names.is_empty() {
        return Err(Error::data("hotels table has no feature columns"));
    }
    let mut seen = HashSet::new();
    let mut hotels = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let code = &row[0];
        if code.is_empty() {
            return Err(Error::data(format!("line {line}: empty hotel_code")));
        }
        if !seen.insert(code.to_string()) {
            return Err(Error::data(format!("line {line}: duplicate hotel '{code}'")));
        }
        let features = row
            .iter()
            .skip(1)
            .map(|cell| {
                if cell.is_empty() {
                    Ok(T::nan())
                } else {
                    cell.parse::<f64>()
                        .map(T::lit)
                        .map_err(|_| Error::data(format!("line {line}: non-numeric cell '{cell}'")))
                }
            })
            .collect::<Result<Vec<T>>>()?;
        hotels.push(HotelFeatureVector::new(code, features));
    }
    Ok(HotelTable {
        feature_names,
        hotels,
    })
}

pub fn write_hotels<T: Scalar, W: Write>(
    sink: W,
    feature_names: &[String],
    hotels: &[HotelFeatureVector<T>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(std::iter::once("hotel_code").chain(feature_names.iter().map(String::as_str)))?;
    for h in hotels {
        let cells = h.features.iter().map(|x| {
            if x.is_finite() {
                x.as_f64().to_string()
            } else {
                String::new()
            }
        });
        w.write_record(std::iter::once(h.hotel_code.clone()).chain(cells))?;
    }
    w.flush().map_err(|e| Error::io("<csv sink>", e))?;
    Ok(())
}

/// Sparse user × hotel matrix of visit counts, stored both row-major (per
/// user) and column-major (per hotel).
///
/// Users and hotels are indexed in lexicographic id order, so the matrix
/// does not depend on the order of the input records.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    user_ids: Vec<String>,
    hotel_codes: Vec<String>,
    user_index: HashMap<String, usize>,
    hotel_index: HashMap<String, usize>,
    row_ptr: Vec<usize>,
    row_hotels: Vec<usize>,
    row_counts: Vec<u32>,
    col_ptr: Vec<usize>,
    col_users: Vec<usize>,
    col_counts: Vec<u32>,
}

/// Counts stays per (user, hotel). Repeated stays, including identical
/// (user, hotel, date) rows, accumulate.
pub fn build_interactions(records: &[ReservationRecord]) -> Result<InteractionMatrix> {
    build_interactions_over(records, &[])
}

/// Like [`build_interactions`] but also indexes `extra_hotels`, giving
/// them empty columns when nobody in `records` stayed there.
pub fn build_interactions_over(
    records: &[ReservationRecord],
    extra_hotels: &[String],
) -> Result<InteractionMatrix> {
    if records.is_empty() {
        return Err(Error::data("no reservation records to build interactions from"));
    }
    let users: BTreeSet<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
    let hotels: BTreeSet<&str> = records
        .iter()
        .map(|r| r.hotel_code.as_str())
        .chain(extra_hotels.iter().map(String::as_str))
        .collect();
    let user_ids: Vec<String> = users.into_iter().map(str::to_string).collect();
    let hotel_codes: Vec<String> = hotels.into_iter().map(str::to_string).collect();
    let user_index: HashMap<String, usize> =
        user_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
    let hotel_index: HashMap<String, usize> =
        hotel_codes.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();

    let tally = records
        .par_chunks(4096)
        .fold(HashMap::<(usize, usize), u32>::new, |mut acc, chunk| {
            for r in chunk {
                let key = (user_index[&r.user_id], hotel_index[&r.hotel_code]);
                *acc.entry(key).or_insert(0) += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });
    let mut entries: Vec<(usize, usize, u32)> = tally.into_iter().map(|((u, h), c)| (u, h, c)).collect();
    entries.sort_unstable();
    Ok(InteractionMatrix::assemble(
        user_ids,
        hotel_codes,
        user_index,
        hotel_index,
        entries,
    ))
}

impl InteractionMatrix {
    fn assemble(
        user_ids: Vec<String>,
        hotel_codes: Vec<String>,
        user_index: HashMap<String, usize>,
        hotel_index: HashMap<String, usize>,
        entries: Vec<(usize, usize, u32)>,
    ) -> Self {
        let (m, u) = (user_ids.len(), hotel_codes.len());
        let mut row_ptr = vec![0usize; m + 1];
        let mut col_ptr = vec![0usize; u + 1];
        for &(i, j, _) in &entries {
            row_ptr[i + 1] += 1;
            col_ptr[j + 1] += 1;
        }
        for i in 0..m {
            row_ptr[i + 1] += row_ptr[i];
        }
        for j in 0..u {
            col_ptr[j + 1] += col_ptr[j];
        }
        let row_hotels = entries.iter().map(|e| e.1).collect();
        let row_counts = entries.iter().map(|e| e.2).collect();
        let mut col_users = vec![0usize; entries.len()];
        let mut col_counts = vec![0u32; entries.len()];
        let mut cursor = col_ptr.clone();
        for &(i, j, c) in &entries {
            col_users[cursor[j]] = i;
            col_counts[cursor[j]] = c;
            cursor[j] += 1;
        }
        InteractionMatrix {
            user_ids,
            hotel_codes,
            user_index,
            hotel_index,
            row_ptr,
            row_hotels,
            row_counts,
            col_ptr,
            col_users,
            col_counts,
        }
    }

    /// Number of users (`m`).
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    /// Number of hotels (`u`).
    pub fn n_hotels(&self) -> usize {
        self.hotel_codes.len()
    }

    pub fn nnz(&self) -> usize {
        self.row_hotels.len()
    }

    pub fn total_count(&self) -> u64 {
        self.row_counts.iter().map(|&c| c as u64).sum()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn hotel_codes(&self) -> &[String] {
        &self.hotel_codes
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    pub fn hotel_index(&self, hotel_code: &str) -> Option<usize> {
        self.hotel_index.get(hotel_code).copied()
    }

    /// Hotels visited by user `i` (ascending) and their counts.
    pub fn user_row(&self, i: usize) -> (&[usize], &[u32]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.row_hotels[r.clone()], &self.row_counts[r])
    }

    /// Users who visited hotel `j` (ascending) and their counts.
    pub fn hotel_column(&self, j: usize) -> (&[usize], &[u32]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.col_users[r.clone()], &self.col_counts[r])
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        let (hotels, counts) = self.user_row(i);
        hotels.binary_search(&j).map_or(0, |p| counts[p])
    }

    /// Count for an id pair; 0 when either id is unknown.
    pub fn get_by_id(&self, user_id: &str, hotel_code: &str) -> u32 {
        match (self.user_index(user_id), self.hotel_index(hotel_code)) {
            (Some(i), Some(j)) => self.get(i, j),
            _ => 0,
        }
    }

    /// All stored `(user, hotel, count)` entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.n_users()).flat_map(move |i| {
            let (h, c) = self.user_row(i);
            h.iter().zip(c).map(move |(&j, &c)| (i, j, c))
        })
    }
}
