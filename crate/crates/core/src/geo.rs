//! Location graph construction: population- and distance-based edge weights
//! thresholded into an undirected adjacency with self-loops.

use crate::error::{Error, Result};
use lfnet_autodiff::EdgeIndex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct SpatialFeatures {
    #[serde(rename = "location_id")]
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub population: f64,
    pub hospitals: f64,
    pub icu_beds: f64,
    pub income: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
pub struct GraphConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,
}

/// Edge threshold calibrated on the default synthetic corpus (seed 42,
/// N = 1015) to land near 2.7 neighbors per node.
pub const DEFAULT_OMEGA: f64 = 70.0;

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            alpha: 0.35,
            beta: 0.37,
            gamma: 30.0,
            omega: DEFAULT_OMEGA,
        }
    }
}

pub const EARTH_RADIUS_KM: f64 = 6371.0;

pub fn great_circle_distance(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for &(lat, lon) in &[a, b] {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::BadCoordinate {
                id: "<point>".into(),
                lat,
                lon,
            });
        }
    }
    if a == b {
        return Ok(0.0);
    }
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let s_lat = ((lat2 - lat1) / 2.0).sin();
    let s_lon = ((lon2 - lon1) / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// Pairwise similarity `w_ij = p_i^alpha * p_j^beta * exp(-d_ij / gamma)`.
pub fn edge_weight(p_i: f64, p_j: f64, d_ij: f64, alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    if p_i <= 0.0 || p_j <= 0.0 {
        return Err(Error::BadGraphParam(format!(
            "populations must be positive, got {} and {}",
            p_i, p_j
        )));
    }
    if gamma <= 0.0 {
        return Err(Error::BadGraphParam(format!("gamma must be positive, got {}", gamma)));
    }
    if d_ij < 0.0 {
        return Err(Error::BadGraphParam(format!("distance must be nonnegative, got {}", d_ij)));
    }
    Ok(p_i.powf(alpha) * p_j.powf(beta) * (-d_ij / gamma).exp())
}

pub struct LocationGraph {
    pub n: usize,
    /// Row-major `n x n` directed weights; the diagonal holds `w_ii`.
    pub weights: Vec<f64>,
    /// Row-major symmetric adjacency with a full diagonal.
    pub adjacency: Vec<u8>,
    /// Sorted, self-inclusive neighbor list per node.
    pub neighbors: Vec<Vec<usize>>,
    pub config: GraphConfig,
}

impl LocationGraph {
    pub fn build(features: &[SpatialFeatures], config: &GraphConfig) -> Result<Self> {
        Self::build_inner(features, config, None)
    }

    /// Build with an explicit undirected edge list instead of thresholded
    /// weights. Weights are still computed for reporting.
    pub fn build_with_edges(
        features: &[SpatialFeatures],
        config: &GraphConfig,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        Self::build_inner(features, config, Some(edges))
    }

    fn build_inner(
        features: &[SpatialFeatures],
        config: &GraphConfig,
        explicit: Option<&[(usize, usize)]>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::BadGraphParam("no locations".into()));
        }
        if config.omega <= 0.0 {
            return Err(Error::BadGraphParam(format!(
                "omega must be positive, got {}",
                config.omega
            )));
        }
        let mut seen = BTreeMap::new();
        for f in features {
            if seen.insert(f.id.as_str(), ()).is_some() {
                return Err(Error::DuplicateLocation(f.id.clone()));
            }
            if !(-90.0..=90.0).contains(&f.latitude) || !(-180.0..=180.0).contains(&f.longitude) {
                return Err(Error::BadCoordinate {
                    id: f.id.clone(),
                    lat: f.latitude,
                    lon: f.longitude,
                });
            }
            if f.population <= 0.0 {
                return Err(Error::BadPopulation {
                    id: f.id.clone(),
                    value: f.population,
                });
            }
        }

        let n = features.len();
        let mut weights = vec![0.0; n * n];
        let mut adjacency = vec![0u8; n * n];
        for i in 0..n {
            adjacency[i * n + i] = 1;
            weights[i * n + i] = edge_weight(
                features[i].population,
                features[i].population,
                0.0,
                config.alpha,
                config.beta,
                config.gamma,
            )?;
            for j in (i + 1)..n {
                let d = great_circle_distance(
                    (features[i].latitude, features[i].longitude),
                    (features[j].latitude, features[j].longitude),
                )?;
                let w_ij = edge_weight(
                    features[i].population,
                    features[j].population,
                    d,
                    config.alpha,
                    config.beta,
                    config.gamma,
                )?;
                let w_ji = edge_weight(
                    features[j].population,
                    features[i].population,
                    d,
                    config.alpha,
                    config.beta,
                    config.gamma,
                )?;
                weights[i * n + j] = w_ij;
                weights[j * n + i] = w_ji;
                if explicit.is_none() && w_ij.max(w_ji) >= config.omega {
                    adjacency[i * n + j] = 1;
                    adjacency[j * n + i] = 1;
                }
            }
        }
        if let Some(edges) = explicit {
            for &(a, b) in edges {
                if a >= n || b >= n {
                    return Err(Error::BadGraphParam(format!(
                        "edge ({}, {}) out of range for {} nodes",
                        a, b, n
                    )));
                }
                adjacency[a * n + b] = 1;
                adjacency[b * n + a] = 1;
            }
        }

        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency[i * n + j] == 1).collect())
            .collect();
        Ok(LocationGraph {
            n,
            weights,
            adjacency,
            neighbors,
            config: *config,
        })
    }

    /// Self-loops plus each undirected edge counted once.
    pub fn edge_count(&self) -> usize {
        let mut above = 0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                above += self.adjacency[i * self.n + j] as usize;
            }
        }
        above + self.n
    }

    /// Mean neighbor count excluding the self-loop.
    pub fn mean_degree(&self) -> f64 {
        let total: usize = self.neighbors.iter().map(|l| l.len() - 1).sum();
        total as f64 / self.n as f64
    }

    pub fn degree_range(&self) -> (usize, usize) {
        let degrees = self.neighbors.iter().map(|l| l.len() - 1);
        (degrees.clone().min().unwrap_or(0), degrees.max().unwrap_or(0))
    }

    pub fn edge_index(&self) -> EdgeIndex {
        EdgeIndex::from_neighbor_lists(&self.neighbors)
    }
}

pub fn load_locations_csv(path: &Path) -> Result<Vec<SpatialFeatures>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in reader.deserialize() {
        let f: SpatialFeatures = record?;
        out.push(f);
    }
    if out.is_empty() {
        return Err(Error::BadSchema {
            file: path.display().to_string(),
            msg: "no locations".into(),
        });
    }
    Ok(out)
}

/// Optional adjacency override: undirected `src,dst` pairs by location id,
/// deduplicated.
pub fn load_graph_csv(path: &Path, index: &BTreeMap<String, usize>) -> Result<Vec<(usize, usize)>> {
    #[derive(Deserialize)]
    struct Row {
        src: String,
        dst: String,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut edges = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for record in reader.deserialize() {
        let row: Row = record?;
        let a = *index
            .get(&row.src)
            .ok_or_else(|| Error::UnknownLocation(row.src.clone()))?;
        let b = *index
            .get(&row.dst)
            .ok_or_else(|| Error::UnknownLocation(row.dst.clone()))?;
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            edges.push(key);
        }
    }
    Ok(edges)
}

pub fn id_index(features: &[SpatialFeatures]) -> BTreeMap<String, usize> {
    features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.id.clone(), i))
        .collect()
}
