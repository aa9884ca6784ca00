//! Deterministic synthetic corpora with planted structure.
//!
//! Hotels are drawn around `cluster_count` planted centroids, so k-means
//! has a known target. Users and hotels get nonnegative planted latent
//! vectors, and each user's stays are sampled with probability
//! proportional to the latent dot product, so ALS has a known target too.
//! A hotel's latent vector leans towards a per-cluster base vector, which
//! ties the two structures together the way real tastes and attributes do.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{write_hotels, write_reservations, HotelFeatureVector, ReservationRecord};
use crate::error::{Error, Result};
use crate::scalar::dot;

/// Every third column (`j % 3 == 2`) is a 0/1 amenity flag.
const BINARY_EVERY: usize = 3;
/// Quantity noise around a centroid, as a fraction of the column scale.
const FEATURE_NOISE: f64 = 0.6;
/// Weight of the cluster base vector in a hotel's latent vector.
const CLUSTER_PULL: f64 = 0.6;
/// Gamma shape of planted latent entries. Shapes below 1 give sparse,
/// peaked tastes, so each user concentrates on a few hotels.
const LATENT_SHAPE: f64 = 0.3;

/// Stream ids for [`derive_seed`].
pub mod stream {
    pub const CENTROIDS: u64 = 1;
    pub const HOTELS: u64 = 2;
    pub const LATENT: u64 = 3;
    pub const USERS: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const ALS: u64 = 6;
}

/// SplitMix64 mix of a root seed and a stream id.
///
/// Every random component draws from its own derived seed, so adding or
/// reordering components never shifts another component's draws, and
/// per-user streams (`stream::USERS` mixed with the user index) make the
/// output independent of thread scheduling.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthSpec {
    pub users: usize,
    pub hotels: usize,
    pub feature_dim: usize,
    pub latent_rank: usize,
    /// Inclusive bounds on stays per user.
    pub reservations_per_user: (usize, usize),
    pub cluster_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 1000,
            hotels: 300,
            feature_dim: 24,
            latent_rank: 8,
            reservations_per_user: (2, 10),
            cluster_count: 8,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.reservations_per_user;
        let fail = |m: String| Err(Error::invalid(m));
        if self.users == 0 || self.hotels == 0 {
            return fail("users and hotels must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be at least 1".into());
        }
        if self.latent_rank == 0 || self.latent_rank > self.users.min(self.hotels) {
            return fail(format!(
                "latent_rank must be in 1..={}, got {}",
                self.users.min(self.hotels),
                self.latent_rank
            ));
        }
        if self.cluster_count == 0 || self.cluster_count > self.hotels {
            return fail(format!("cluster_count must be in 1..={}, got {}", self.hotels, self.cluster_count));
        }
        if lo < 2 || lo > hi {
            return fail(format!("reservations per user must satisfy 2 <= min <= max, got {lo}..{hi}"));
        }
        Ok(())
    }
}

/// The structure the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedTruth {
    /// `cluster_count × feature_dim`, in raw feature units.
    pub centroids: Vec<Vec<f64>>,
    /// Planted cluster of each hotel, in hotel order.
    pub hotel_cluster: Vec<usize>,
    /// `users × latent_rank`, nonnegative.
    pub user_factors: Vec<Vec<f64>>,
    /// `hotels × latent_rank`, nonnegative.
    pub hotel_factors: Vec<Vec<f64>>,
}

impl PlantedTruth {
    /// Planted affinity of user `i` for hotel `j`.
    pub fn affinity(&self, i: usize, j: usize) -> f64 {
        dot(&self.user_factors[i], &self.hotel_factors[j])
    }

    /// Hotel indices ordered by decreasing affinity for user `i`, ties by
    /// index.
    pub fn affinity_ranking(&self, i: usize) -> Vec<usize> {
        let scores: Vec<f64> = (0..self.hotel_factors.len()).map(|j| self.affinity(i, j)).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    /// Grouped by user, dates strictly increasing within a user.
    pub reservations: Vec<ReservationRecord>,
    pub feature_names: Vec<String>,
    pub hotels: Vec<HotelFeatureVector<f64>>,
    pub truth: PlantedTruth,
}

pub fn user_id(i: usize) -> String {
    format!("u{i:06}")
}

pub fn hotel_code(j: usize) -> String {
    format!("h{j:05}")
}

fn is_binary(j: usize) -> bool {
    j % BINARY_EVERY == BINARY_EVERY - 1
}

/// Column scales cycle through 1, 10, 100 so raw features are on
/// deliberately different scales.
fn column_scale(j: usize) -> f64 {
    [1.0, 10.0, 100.0][j % 3]
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let gamma = Gamma::new(LATENT_SHAPE, 1.0).map_err(|e| Error::numerical(e.to_string()))?;

    let feature_names: Vec<String> = (0..spec.feature_dim)
        .map(|j| if is_binary(j) { format!("flag_{j:02}") } else { format!("attr_{j:02}") })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream::CENTROIDS));
    let centroids: Vec<Vec<f64>> = (0..spec.cluster_count)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|j| {
                    if is_binary(j) {
                        rng.gen_range(0.05..0.95)
                    } else {
                        rng.gen_range(0.0..10.0) * column_scale(j)
                    }
                })
                .collect()
        })
        .collect();

    let hotel_cluster: Vec<usize> = (0..spec.hotels).map(|j| j % spec.cluster_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream::HOTELS));
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::numerical(e.to_string()))?;
    let hotels: Vec<HotelFeatureVector<f64>> = hotel_cluster
        .iter()
        .enumerate()
        .map(|(h, &c)| {
            let features = (0..spec.feature_dim)
                .map(|j| {
                    let center = centroids[c][j];
                    if is_binary(j) {
                        f64::from(u8::from(rng.gen_bool(center)))
                    } else {
                        center + FEATURE_NOISE * column_scale(j) * unit.sample(&mut rng)
                    }
                })
                .collect();
            HotelFeatureVector::new(hotel_code(h), features)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream::LATENT));
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| gamma.sample(&mut rng)).collect() };
    let cluster_base: Vec<Vec<f64>> = (0..spec.cluster_count).map(|_| draw(spec.latent_rank)).collect();
    let hotel_factors: Vec<Vec<f64>> = hotel_cluster
        .iter()
        .map(|&c| {
            draw(spec.latent_rank)
                .into_iter()
                .zip(&cluster_base[c])
                .map(|(own, base)| CLUSTER_PULL * base + (1.0 - CLUSTER_PULL) * own)
                .collect()
        })
        .collect();
    let user_factors: Vec<Vec<f64>> = (0..spec.users).map(|_| draw(spec.latent_rank)).collect();

    let (lo, hi) = spec.reservations_per_user;
    let start = NaiveDate::from_ymd_opt(2012, 1, 1).expect("valid date");
    let per_user: Vec<Vec<ReservationRecord>> = (0..spec.users)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(spec.seed, stream::USERS), i as u64));
            // A tiny floor keeps the distribution valid if every affinity
            // underflows to zero.
            let weights = hotel_factors.iter().map(|q| dot(&user_factors[i], q) + 1e-12);
            let pick = WeightedIndex::new(weights).map_err(|e| Error::numerical(e.to_string()))?;
            let stays = Uniform::new_inclusive(lo, hi).sample(&mut rng);
            let mut date = start + Days::new(rng.gen_range(0..365));
            let mut out = Vec::with_capacity(stays);
            for _ in 0..stays {
                let j = pick.sample(&mut rng);
                out.push(ReservationRecord::new(user_id(i), hotel_code(j), date)?);
                date = date + Days::new(rng.gen_range(1..=90));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(SynthCorpus {
        spec: spec.clone(),
        reservations: per_user.into_iter().flatten().collect(),
        feature_names,
        hotels,
        truth: PlantedTruth {
            centroids,
            hotel_cluster,
            user_factors,
            hotel_factors,
        },
    })
}

#[derive(Serialize)]
struct TruthFile<'a> {
    spec: &'a SynthSpec,
    feature_names: &'a [String],
    truth: &'a PlantedTruth,
}

impl SynthCorpus {
    /// Writes `reservations.csv`, `hotels.csv` and `truth.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
        };
        write_reservations(create("reservations.csv")?, &self.reservations)?;
        write_hotels(create("hotels.csv")?, &self.feature_names, &self.hotels)?;
        let truth = TruthFile {
            spec: &self.spec,
            feature_names: &self.feature_names,
            truth: &self.truth,
        };
        serde_json::to_writer_pretty(create("truth.json")?, &truth)?;
        Ok(())
    }
}
