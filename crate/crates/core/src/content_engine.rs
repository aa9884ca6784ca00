//! Content-based engine: feature normalization, PCA, user profiles,
//! k-means hotel clusters and nearest-hotel retrieval.

use std::collections::HashSet;
use std::ops::{Add, Div};

use num_traits::{One, Zero};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::catalog::{FeatureCatalog, FeatureKind, HotelFeatureVector};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::ranking::{top_n, RankedItem, RankedList, Source};
use crate::scalar::{squared_distance, Scalar};

impl<T> AsRef<[T]> for HotelFeatureVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.features
    }
}

/// Z-scores quantity columns with the catalog's fitted parameters; binary
/// columns pass through.
pub fn normalize_features<T: Scalar>(
    hotels: &[HotelFeatureVector<T>],
    catalog: &FeatureCatalog<T>,
) -> Result<Vec<HotelFeatureVector<T>>> {
    let params = catalog
        .scale_params()
        .ok_or_else(|| Error::invalid("feature catalog has no fitted scale parameters"))?;
    hotels
        .iter()
        .map(|h| {
            if h.features.len() != catalog.len() {
                return Err(Error::data(format!(
                    "hotel '{}' has {} features, catalog has {}",
                    h.hotel_code,
                    h.features.len(),
                    catalog.len()
                )));
            }
            let features = h
                .features
                .iter()
                .zip(catalog.kinds())
                .zip(params)
                .map(|((&x, kind), p)| match kind {
                    FeatureKind::Binary => x,
                    FeatureKind::Quantity => (x - p.mean) / p.stddev,
                })
                .collect();
            Ok(HotelFeatureVector {
                hotel_code: h.hotel_code.clone(),
                features,
            })
        })
        .collect()
}

/// Principal components of the hotel feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    /// `input_dim × out_dim`, orthonormal columns ordered by variance.
    pub components: Matrix<T>,
    pub explained_variance: Vec<T>,
    pub input_mean: Vec<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn input_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.components.cols()
    }

    /// `componentsᵀ · (vector − mean)`.
    pub fn project(&self, vector: &[T]) -> Result<Vec<T>> {
        if vector.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "vector of length {} does not match PCA input dimension {}",
                vector.len(),
                self.input_dim()
            )));
        }
        let centered: Vec<T> = vector.iter().zip(&self.input_mean).map(|(&x, &m)| x - m).collect();
        Ok((0..self.out_dim())
            .map(|c| (0..self.input_dim()).map(|i| self.components[(i, c)] * centered[i]).sum())
            .collect())
    }

    /// `mean + components · reduced`.
    pub fn reconstruct(&self, reduced: &[T]) -> Result<Vec<T>> {
        if reduced.len() != self.out_dim() {
            return Err(Error::invalid("reduced vector length does not match PCA output"));
        }
        Ok((0..self.input_dim())
            .map(|i| {
                self.input_mean[i]
                    + (0..self.out_dim())
                        .map(|c| self.components[(i, c)] * reduced[c])
                        .sum::<T>()
            })
            .collect())
    }
}

/// Sample covariance (n − 1 denominator) eigen-decomposition, keeping the
/// `out_dim` leading eigenvectors.
pub fn fit_pca<T: Scalar, V: AsRef<[T]>>(vectors: &[V], out_dim: usize) -> Result<PcaModel<T>> {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, |v| v.as_ref().len());
    if out_dim == 0 {
        return Err(Error::invalid("PCA output dimension must be at least 1"));
    }
    if out_dim > dim {
        return Err(Error::invalid(format!(
            "PCA output dimension {out_dim} exceeds input dimension {dim}"
        )));
    }
    if n < out_dim + 1 {
        return Err(Error::data(format!(
            "PCA with {out_dim} components needs at least {} vectors, got {n}",
            out_dim + 1
        )));
    }
    if vectors.iter().any(|v| v.as_ref().len() != dim) {
        return Err(Error::data("PCA input vectors differ in length"));
    }

    let nf = T::from_count(n);
    let mut mean = vec![T::zero(); dim];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v.as_ref()) {
            *m = *m + x;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / nf;
    }
    let mut cov: Matrix<T> = Matrix::zeros(dim, dim);
    for v in vectors {
        let c: Vec<T> = v.as_ref().iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] = cov[(i, j)] + c[i] * c[j];
            }
        }
    }
    let denom = T::from_count(n - 1);
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = symmetric_eigen(&cov)?;
    let components = Matrix::from_fn(dim, out_dim, |i, c| eig.vectors[(i, c)]);
    // Covariance is PSD; tiny negative eigenvalues are round-off.
    let explained_variance = eig.values[..out_dim].iter().map(|&v| v.max(T::zero())).collect();
    Ok(PcaModel {
        components,
        explained_variance,
        input_mean: mean,
    })
}

pub fn project<T: Scalar>(model: &PcaModel<T>, vector: &[T]) -> Result<Vec<T>> {
    model.project(vector)
}

/// A user represented by the mean feature vector of the hotels they visited.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile<T> {
    pub user_id: String,
    pub profile: Vec<T>,
}

/// Arithmetic mean of the visited hotels' vectors.
///
/// Only field arithmetic is required, so exact number types work too.
pub fn build_profile<T, V>(user_id: impl Into<String>, user_hotels: &[V]) -> Result<UserProfile<T>>
where
    T: Clone + Zero + One + Add<Output = T> + Div<Output = T>,
    V: AsRef<[T]>,
{
    let user_id = user_id.into();
    let Some(first) = user_hotels.first() else {
        return Err(Error::data(format!("user '{user_id}' has no visited hotels with features")));
    };
    let dim = first.as_ref().len();
    let mut sum = vec![T::zero(); dim];
    let mut count = T::zero();
    for v in user_hotels {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::data("profile inputs differ in length"));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s = s.clone() + x.clone();
        }
        count = count + T::one();
    }
    let profile = sum.into_iter().map(|s| s / count.clone()).collect();
    Ok(UserProfile { user_id, profile })
}

/// Hotels grouped by Lloyd's k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel<T> {
    pub centroids: Vec<Vec<T>>,
    /// Hotel index → cluster id.
    pub assignment: Vec<usize>,
    /// Objective (sum of squared distances to the assigned centroid) after
    /// each assignment step.
    pub objective_trace: Vec<T>,
    members: Vec<Vec<usize>>,
}

impl<T: Scalar> ClusterModel<T> {
    /// Rebuilds a model from stored centroids and assignment.
    pub fn from_parts(centroids: Vec<Vec<T>>, assignment: Vec<usize>) -> Result<Self> {
        let k = centroids.len();
        if k == 0 {
            return Err(Error::data("cluster model has no centroids"));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= k) {
            return Err(Error::data(format!("assignment refers to cluster {bad} of {k}")));
        }
        let members = group_members(&assignment, k);
        Ok(ClusterModel {
            centroids,
            assignment,
            objective_trace: Vec::new(),
            members,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Hotel indices in cluster `c`, ascending.
    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    /// Closest centroid; the lowest id wins ties.
    pub fn nearest_centroid(&self, v: &[T]) -> usize {
        nearest(&self.centroids, v).0
    }

    pub fn objective<V: AsRef<[T]>>(&self, vectors: &[V]) -> T {
        objective(&self.centroids, &self.assignment, vectors)
    }
}

fn group_members(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }
    members
}

fn nearest<T: Scalar>(centroids: &[Vec<T>], v: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(centroid, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn objective<T: Scalar, V: AsRef<[T]>>(centroids: &[Vec<T>], assignment: &[usize], vectors: &[V]) -> T {
    vectors
        .iter()
        .zip(assignment)
        .map(|(v, &c)| squared_distance(&centroids[c], v.as_ref()))
        .sum()
}

fn assign<T: Scalar, V: AsRef<[T]> + Sync>(centroids: &[Vec<T>], vectors: &[V]) -> (Vec<usize>, T) {
    let nearest: Vec<(usize, T)> = vectors.par_iter().map(|v| nearest(centroids, v.as_ref())).collect();
    let obj = nearest.iter().map(|p| p.1).sum();
    (nearest.into_iter().map(|p| p.0).collect(), obj)
}

/// Means of each cluster's members; an empty cluster keeps its centroid.
fn update<T: Scalar, V: AsRef<[T]>>(previous: &[Vec<T>], assignment: &[usize], vectors: &[V]) -> Vec<Vec<T>> {
    let dim = previous[0].len();
    let mut sums = vec![vec![T::zero(); dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (v, &c) in vectors.iter().zip(assignment) {
        counts[c] += 1;
        for (s, &x) in sums[c].iter_mut().zip(v.as_ref()) {
            *s = *s + x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                let nf = T::from_count(n);
                s.into_iter().map(|x| x / nf).collect()
            }
        })
        .collect()
}

/// Lloyd iterations from `k` distinct hotels sampled with `seed`, until the
/// assignment stops changing or `max_iter` updates have run.
pub fn fit_kmeans<T: Scalar, V: AsRef<[T]> + Sync>(
    vectors: &[V],
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<ClusterModel<T>> {
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if k > vectors.len() {
        return Err(Error::invalid(format!(
            "k-means with k = {k} but only {} hotels",
            vectors.len()
        )));
    }
    let dim = vectors[0].as_ref().len();
    if vectors.iter().any(|v| v.as_ref().len() != dim) {
        return Err(Error::data("k-means input vectors differ in length"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, vectors.len(), k).into_vec();
    picks.sort_unstable();
    let mut centroids: Vec<Vec<T>> = picks.iter().map(|&i| vectors[i].as_ref().to_vec()).collect();

    let (mut assignment, obj) = assign(&centroids, vectors);
    let mut trace = vec![obj];
    let mut converged = false;
    for _ in 0..max_iter {
        centroids = update(&centroids, &assignment, vectors);
        let (next, obj) = assign(&centroids, vectors);
        trace.push(obj);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    if !converged {
        centroids = update(&centroids, &assignment, vectors);
    }
    if trace.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("k-means objective became non-finite"));
    }
    let members = group_members(&assignment, k);
    Ok(ClusterModel {
        centroids,
        assignment,
        objective_trace: trace,
        members,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum RetrievalMode<'a, T> {
    FullScan,
    Clustered(&'a ClusterModel<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentRecommendation<T> {
    pub list: RankedList<T>,
    /// Fewer than `n` candidates were available.
    pub truncated: bool,
    /// Cluster searched in clustered mode.
    pub cluster: Option<usize>,
}

/// Nearest hotels to a profile by Euclidean distance, score = −distance,
/// ties broken by hotel index.
pub fn recommend_content<T: Scalar>(
    profile: &UserProfile<T>,
    hotels: &[HotelFeatureVector<T>],
    mode: RetrievalMode<'_, T>,
    exclude: &HashSet<usize>,
    n: usize,
) -> Result<ContentRecommendation<T>> {
    let dim = profile.profile.len();
    let score = |i: usize| -> Result<(usize, T)> {
        let h = &hotels[i].features;
        if h.len() != dim {
            return Err(Error::invalid(format!(
                "hotel '{}' has dimension {}, profile has {dim}",
                hotels[i].hotel_code,
                h.len()
            )));
        }
        Ok((i, -squared_distance(&profile.profile, h).sqrt()))
    };
    let (candidates, cluster) = match mode {
        RetrievalMode::FullScan => (
            (0..hotels.len())
                .filter(|i| !exclude.contains(i))
                .map(score)
                .collect::<Result<Vec<_>>>()?,
            None,
        ),
        RetrievalMode::Clustered(model) => {
            if model.assignment.len() != hotels.len() {
                return Err(Error::invalid("cluster model was fitted on a different hotel set"));
            }
            if model.centroids[0].len() != dim {
                return Err(Error::invalid("cluster centroids and profile differ in dimension"));
            }
            let c = model.nearest_centroid(&profile.profile);
            (
                model
                    .members(c)
                    .iter()
                    .copied()
                    .filter(|i| !exclude.contains(i))
                    .map(score)
                    .collect::<Result<Vec<_>>>()?,
                Some(c),
            )
        }
    };
    let truncated = candidates.len() < n;
    let items = top_n(candidates, n)
        .into_iter()
        .map(|(i, s)| RankedItem {
            hotel_code: hotels[i].hotel_code.clone(),
            score: s,
            source: Source::Content,
        })
        .collect();
    Ok(ContentRecommendation {
        list: RankedList {
            user_id: profile.user_id.clone(),
            items,
        },
        truncated,
        cluster,
    })
}
