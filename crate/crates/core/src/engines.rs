//! Trained content, CF and hybrid engines behind one recommendation API.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::catalog::{build_interactions_over, FeatureCatalog, HotelFeatureVector, InteractionMatrix, ReservationRecord};
use crate::cf_engine::{self, AlsConfig, FactorModel, LossPoint, RatingMatrix};
use crate::content_engine::{
    build_profile, fit_kmeans, fit_pca, normalize_features, recommend_content, ClusterModel, PcaModel,
    RetrievalMode,
};
use crate::error::{Error, Result};
use crate::hybrid::{interleave, HybridSpec};
use crate::ranking::{RankedList, Source};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Engine {
    ContentFull,
    ContentClustered,
    Cf,
    HybridFull,
    HybridClustered,
}

impl Engine {
    pub const ALL: [Engine; 5] = [
        Engine::ContentFull,
        Engine::ContentClustered,
        Engine::Cf,
        Engine::HybridFull,
        Engine::HybridClustered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Engine::ContentFull => "content-full",
            Engine::ContentClustered => "content-cluster",
            Engine::Cf => "cf",
            Engine::HybridFull => "hybrid-full",
            Engine::HybridClustered => "hybrid-cluster",
        }
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Engine::HybridFull | Engine::HybridClustered)
    }

    fn content_mode(self) -> Option<ContentMode> {
        match self {
            Engine::ContentFull | Engine::HybridFull => Some(ContentMode::Full),
            Engine::ContentClustered | Engine::HybridClustered => Some(ContentMode::Cluster),
            Engine::Cf => None,
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Engine::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown engine '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentMode {
    Full,
    Cluster,
}

impl FromStr for ContentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ContentMode::Full),
            "cluster" => Ok(ContentMode::Cluster),
            other => Err(Error::invalid(format!("content mode must be full or cluster, got '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentConfig {
    pub pca_dims: usize,
    pub kmeans_k: usize,
    pub kmeans_max_iter: usize,
    pub mode: ContentMode,
    pub seed: u64,
}

impl Default for ContentConfig {
    fn default() -> Self {
        ContentConfig {
            pca_dims: 11,
            kmeans_k: 50,
            kmeans_max_iter: 100,
            mode: ContentMode::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig<T> {
    pub content: ContentConfig,
    pub cf: AlsConfig<T>,
    pub hybrid_first: Source,
    pub hybrid_odd_slot: Source,
}

impl<T: Scalar> Default for EngineConfig<T> {
    fn default() -> Self {
        EngineConfig {
            content: ContentConfig::default(),
            cf: AlsConfig::default(),
            hybrid_first: Source::Content,
            hybrid_odd_slot: Source::Content,
        }
    }
}

/// Fitted content-side artifacts.
#[derive(Debug, Clone)]
pub struct ContentModel<T> {
    /// Fitted catalog (constant columns dropped, scale parameters set).
    pub catalog: FeatureCatalog<T>,
    pub pca: PcaModel<T>,
    pub clusters: ClusterModel<T>,
    /// Hotels in PCA space, in catalog order.
    pub reduced: Vec<HotelFeatureVector<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ContentModel<T> {
    /// Normalizes, projects and clusters cleaned hotels.
    pub fn fit(raw_catalog: &FeatureCatalog<T>, hotels: &[HotelFeatureVector<T>], config: &ContentConfig) -> Result<Self> {
        let (catalog, kept) = raw_catalog.fit_scaling(hotels)?;
        let normalized = normalize_features(&kept, &catalog)?;
        let pca = fit_pca(&normalized, config.pca_dims)?;
        let reduced = project_all(&pca, &normalized)?;
        let clusters = fit_kmeans(&reduced, config.kmeans_k, config.kmeans_max_iter, config.seed)?;
        Ok(Self::from_parts(catalog, pca, clusters, reduced))
    }

    /// Reassembles a model from stored artifacts and cleaned hotels laid
    /// out in `raw_catalog` order.
    pub fn restore(
        catalog: FeatureCatalog<T>,
        pca: PcaModel<T>,
        clusters: ClusterModel<T>,
        raw_catalog: &FeatureCatalog<T>,
        hotels: &[HotelFeatureVector<T>],
    ) -> Result<Self> {
        let aligned = catalog.align(raw_catalog, hotels)?;
        let normalized = normalize_features(&aligned, &catalog)?;
        let reduced = project_all(&pca, &normalized)?;
        if clusters.assignment.len() != reduced.len() {
            return Err(Error::data(format!(
                "cluster model covers {} hotels, catalog has {}",
                clusters.assignment.len(),
                reduced.len()
            )));
        }
        Ok(Self::from_parts(catalog, pca, clusters, reduced))
    }

    fn from_parts(catalog: FeatureCatalog<T>, pca: PcaModel<T>, clusters: ClusterModel<T>, reduced: Vec<HotelFeatureVector<T>>) -> Self {
        let index = reduced.iter().enumerate().map(|(i, h)| (h.hotel_code.clone(), i)).collect();
        ContentModel {
            catalog,
            pca,
            clusters,
            reduced,
            index,
        }
    }

    pub fn hotel_index(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn hotel_codes(&self) -> impl Iterator<Item = &str> {
        self.reduced.iter().map(|h| h.hotel_code.as_str())
    }
}

fn project_all<T: Scalar>(pca: &PcaModel<T>, hotels: &[HotelFeatureVector<T>]) -> Result<Vec<HotelFeatureVector<T>>> {
    hotels
        .iter()
        .map(|h| {
            Ok(HotelFeatureVector {
                hotel_code: h.hotel_code.clone(),
                features: pca.project(&h.features)?,
            })
        })
        .collect()
}

/// Fitted CF side: the training interaction matrix and its factors.
#[derive(Debug, Clone)]
pub struct CfModel<T> {
    pub interactions: InteractionMatrix,
    pub factors: FactorModel<T>,
    pub trace: Vec<LossPoint<T>>,
}

impl<T: Scalar> CfModel<T> {
    /// Factorizes the training visits; `hotel_universe` adds catalog hotels
    /// nobody stayed at in training.
    pub fn fit(train: &[ReservationRecord], hotel_universe: &[String], config: &AlsConfig<T>) -> Result<Self> {
        let interactions = build_interactions_over(train, hotel_universe)?;
        let ratings = RatingMatrix::from_interactions(&interactions);
        let fit = cf_engine::fit(&ratings, config)?;
        Ok(CfModel {
            interactions,
            factors: fit.model,
            trace: fit.trace,
        })
    }

    pub fn restore(train: &[ReservationRecord], hotel_universe: &[String], factors: FactorModel<T>) -> Result<Self> {
        let interactions = build_interactions_over(train, hotel_universe)?;
        if factors.n_users() != interactions.n_users() || factors.n_hotels() != interactions.n_hotels() {
            return Err(Error::data(format!(
                "factor model is {}x{} but the training split gives {}x{}",
                factors.n_users(),
                factors.n_hotels(),
                interactions.n_users(),
                interactions.n_hotels()
            )));
        }
        Ok(CfModel {
            interactions,
            factors,
            trace: Vec::new(),
        })
    }
}

/// Both engines trained on one training split.
#[derive(Debug, Clone)]
pub struct TrainedEngines<T> {
    pub content: ContentModel<T>,
    pub cf: CfModel<T>,
    pub hybrid_first: Source,
    pub hybrid_odd_slot: Source,
    visits: HashMap<String, Vec<String>>,
}

/// Single-engine lists for one user, each of length up to `n`.
#[derive(Debug, Clone)]
pub struct BaseLists<T> {
    pub content_full: Result<RankedList<T>, String>,
    pub content_cluster: Result<RankedList<T>, String>,
    pub cf: Result<RankedList<T>, String>,
}

impl<T: Scalar> TrainedEngines<T> {
    pub fn train(
        train: &[ReservationRecord],
        raw_catalog: &FeatureCatalog<T>,
        hotels: &[HotelFeatureVector<T>],
        config: &EngineConfig<T>,
    ) -> Result<Self> {
        let content = ContentModel::fit(raw_catalog, hotels, &config.content)?;
        let universe: Vec<String> = content.hotel_codes().map(str::to_string).collect();
        let cf = CfModel::fit(train, &universe, &config.cf)?;
        Ok(Self::assemble(content, cf, train, config.hybrid_first, config.hybrid_odd_slot))
    }

    pub fn assemble(
        content: ContentModel<T>,
        cf: CfModel<T>,
        train: &[ReservationRecord],
        hybrid_first: Source,
        hybrid_odd_slot: Source,
    ) -> Self {
        let mut visits: HashMap<String, Vec<String>> = HashMap::new();
        for r in train {
            visits.entry(r.user_id.clone()).or_default().push(r.hotel_code.clone());
        }
        TrainedEngines {
            content,
            cf,
            hybrid_first,
            hybrid_odd_slot,
            visits,
        }
    }

    /// Training users in id order.
    pub fn users(&self) -> &[String] {
        self.cf.interactions.user_ids()
    }

    /// Whether `user_id` stayed at `hotel_code` in the training split.
    pub fn visited(&self, user_id: &str, hotel_code: &str) -> bool {
        self.visits
            .get(user_id)
            .is_some_and(|v| v.iter().any(|h| h == hotel_code))
    }

    fn content_list(&self, user_id: &str, mode: ContentMode, n: usize) -> Result<RankedList<T>> {
        let visits = self
            .visits
            .get(user_id)
            .ok_or_else(|| Error::data(format!("unknown user '{user_id}'")))?;
        let idx: Vec<usize> = visits.iter().filter_map(|h| self.content.hotel_index(h)).collect();
        let vectors: Vec<&[T]> = idx.iter().map(|&i| self.content.reduced[i].features.as_slice()).collect();
        let profile = build_profile(user_id, &vectors)?;
        let exclude: HashSet<usize> = idx.into_iter().collect();
        let mode = match mode {
            ContentMode::Full => RetrievalMode::FullScan,
            ContentMode::Cluster => RetrievalMode::Clustered(&self.content.clusters),
        };
        Ok(recommend_content(&profile, &self.content.reduced, mode, &exclude, n)?.list)
    }

    fn cf_list(&self, user_id: &str, n: usize) -> Result<RankedList<T>> {
        let ids = &self.cf.interactions;
        let i = ids
            .user_index(user_id)
            .ok_or_else(|| Error::data(format!("unknown user '{user_id}'")))?;
        let exclude: HashSet<usize> = ids.user_row(i).0.iter().copied().collect();
        cf_engine::recommend_cf(&self.cf.factors, ids, user_id, &exclude, n)
    }

    pub fn base_lists(&self, user_id: &str, n: usize) -> BaseLists<T> {
        let e = |r: Result<RankedList<T>>| r.map_err(|e| e.to_string());
        BaseLists {
            content_full: e(self.content_list(user_id, ContentMode::Full, n)),
            content_cluster: e(self.content_list(user_id, ContentMode::Cluster, n)),
            cf: e(self.cf_list(user_id, n)),
        }
    }

    /// Interleaves the top `n` of each engine's list. If one engine has no
    /// list for the user, the other's list fills every slot.
    pub fn hybrid_from(
        &self,
        user_id: &str,
        content: &Result<RankedList<T>, String>,
        cf: &Result<RankedList<T>, String>,
        n: usize,
    ) -> Result<RankedList<T>> {
        let prefix = |l: &RankedList<T>| RankedList {
            user_id: l.user_id.clone(),
            items: l.items.iter().take(n).cloned().collect(),
        };
        let (a, b) = match (content, cf) {
            (Err(ea), Err(eb)) => return Err(Error::data(format!("no hybrid inputs: {ea}; {eb}"))),
            (a, b) => (
                a.as_ref().map_or_else(|_| RankedList::empty(user_id), prefix),
                b.as_ref().map_or_else(|_| RankedList::empty(user_id), prefix),
            ),
        };
        let spec = HybridSpec {
            n,
            first: self.hybrid_first,
            odd_slot: self.hybrid_odd_slot,
        };
        interleave(&a, &b, &spec)
    }

    /// Top-`n` list from one engine, excluding the user's training hotels.
    pub fn recommend(&self, user_id: &str, engine: Engine, n: usize) -> Result<RankedList<T>> {
        match engine {
            Engine::Cf => self.cf_list(user_id, n),
            Engine::ContentFull | Engine::ContentClustered => {
                self.content_list(user_id, engine.content_mode().expect("content engine"), n)
            }
            Engine::HybridFull | Engine::HybridClustered => {
                let mode = engine.content_mode().expect("hybrid engine");
                let content = self.content_list(user_id, mode, n).map_err(|e| e.to_string());
                let cf = self.cf_list(user_id, n).map_err(|e| e.to_string());
                self.hybrid_from(user_id, &content, &cf, n)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn small() -> (Vec<ReservationRecord>, FeatureCatalog<f64>, Vec<HotelFeatureVector<f64>>) {
        let spec = SynthSpec {
            users: 60,
            hotels: 40,
            feature_dim: 14,
            latent_rank: 3,
            reservations_per_user: (3, 6),
            cluster_count: 4,
            seed: 5,
        };
        let corpus = generate(&spec).unwrap();
        let cat = FeatureCatalog::infer(corpus.feature_names.clone(), &corpus.hotels).unwrap();
        (corpus.reservations, cat, corpus.hotels)
    }

    fn config() -> EngineConfig<f64> {
        EngineConfig {
            content: ContentConfig { pca_dims: 5, kmeans_k: 4, ..ContentConfig::default() },
            cf: AlsConfig { latent_dim: 3, ..AlsConfig::default() },
            ..EngineConfig::default()
        }
    }

    #[test]
    fn engine_names_round_trip() {
        for e in Engine::ALL {
            assert_eq!(e.as_str().parse::<Engine>().unwrap(), e);
        }
        assert!("hybrid".parse::<Engine>().is_err());
    }

    #[test]
    fn every_engine_excludes_training_hotels() {
        let (records, cat, hotels) = small();
        let engines = TrainedEngines::train(&records, &cat, &hotels, &config()).unwrap();
        let user = engines.users()[7].clone();
        for e in Engine::ALL {
            let list = engines.recommend(&user, e, 10).unwrap();
            assert!(!list.is_empty());
            assert!(list.codes().all(|h| !engines.visited(&user, h)), "{e}");
            let uniq: HashSet<&str> = list.codes().collect();
            assert_eq!(uniq.len(), list.len());
        }
    }

    #[test]
    fn hybrid_alternates_sources() {
        let (records, cat, hotels) = small();
        let engines = TrainedEngines::train(&records, &cat, &hotels, &config()).unwrap();
        let user = engines.users()[0].clone();
        let list = engines.recommend(&user, Engine::HybridFull, 10).unwrap();
        assert_eq!(list.len(), 10);
        assert_eq!(list.items[0].source, Source::Content);
        assert!(list.items.iter().any(|i| i.source == Source::Cf));
    }

    #[test]
    fn unknown_user_errors_but_hybrid_needs_one_side() {
        let (records, cat, hotels) = small();
        let engines = TrainedEngines::train(&records, &cat, &hotels, &config()).unwrap();
        assert!(engines.recommend("ghost", Engine::Cf, 5).is_err());
        assert!(engines.recommend("ghost", Engine::HybridFull, 5).is_err());
        let ok: Result<RankedList<f64>, String> = engines.recommend(&engines.users()[0], Engine::Cf, 5).map_err(|e| e.to_string());
        let hybrid = engines.hybrid_from("x", &Err("cold".into()), &ok, 5).unwrap();
        assert!(hybrid.items.iter().all(|i| i.source == Source::Cf));
    }
}
