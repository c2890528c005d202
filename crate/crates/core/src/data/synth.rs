//! Deterministic synthetic corpus: seasonal per-location base series,
//! neighbor aggregation over the location graph, temporal resampling,
//! Gaussian noise, and fixed-interval revisions.

use super::{Array2, Array3, Dataset};
use crate::error::{Error, Result};
use crate::geo::{GraphConfig, LocationGraph, SpatialFeatures};
use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct SynthConfig {
    pub n: usize,
    pub t: usize,
    pub f: usize,
    /// Revisions for week `w` are released at the next multiple of this
    /// interval; releases past the end of the window never arrive.
    pub latency_interval: usize,
    /// Noise scale in units of each series' own standard deviation.
    pub noise_sigma: f64,
    pub neighbor_min: usize,
    pub neighbor_max: usize,
    /// Resampling window upper bound; 1 disables resampling.
    pub resample_max: usize,
    pub graph: GraphConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1015,
            t: 63,
            f: 22,
            latency_interval: 7,
            noise_sigma: 1.0,
            neighbor_min: 1,
            neighbor_max: 5,
            resample_max: 3,
            graph: GraphConfig::default(),
        }
    }
}

/// Level of the target-feature base process, calibrated so the default
/// corpus averages about 1098.7 cases per location-week.
const TARGET_BASE_SCALE: f64 = 210.25;

const TAG_PLACE: u64 = 1;
const TAG_FEATURE_SCALE: u64 = 2;
const TAG_BASE: u64 = 3;
const TAG_AGGREGATE: u64 = 4;
const TAG_REALTIME: u64 = 5;
const TAG_REVISION: u64 = 6;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent generator per (seed, purpose, index) so per-location work
/// never shares a stream.
fn substream(seed: u64, tag: u64, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(tag ^ mix(idx))))
}

pub struct SynthData {
    pub dataset: Dataset,
    /// Release week of each (location, week) revision, if it arrived within
    /// the data window.
    pub released: Vec<Option<usize>>,
    pub graph: LocationGraph,
}

struct BaseProcess {
    level: f64,
    amp: f64,
    phase: f64,
    slope: f64,
    t_len: f64,
}

impl BaseProcess {
    fn draw(rng: &mut ChaCha8Rng, scale: f64, pop_factor: f64, t_len: usize) -> Self {
        let jitter = LogNormal::new(0.0, 0.5).unwrap().sample(rng);
        BaseProcess {
            level: scale * pop_factor * jitter,
            amp: rng.gen_range(0.2..0.6),
            phase: rng.gen_range(0.0..52.0),
            slope: rng.gen_range(-0.3..0.5),
            t_len: t_len as f64,
        }
    }

    fn value(&self, t: usize) -> f64 {
        let season = 1.0 + self.amp * (std::f64::consts::TAU * (t as f64 + self.phase) / 52.0).sin();
        let trend = 1.0 + self.slope * t as f64 / self.t_len;
        self.level * season * trend
    }
}

pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<SynthData> {
    generate_threaded(seed, cfg, 1)
}

/// Same output as [`generate`] bit for bit; the per-location stream
/// synthesis (the only expensive part) is fanned out over `threads`.
pub fn generate_threaded(seed: u64, cfg: &SynthConfig, threads: usize) -> Result<SynthData> {
    if cfg.n < 10 || cfg.t < 20 {
        return Err(Error::Synth(format!(
            "need at least 10 locations and 20 weeks, got {}x{}",
            cfg.n, cfg.t
        )));
    }
    if cfg.f == 0
        || cfg.latency_interval == 0
        || cfg.resample_max == 0
        || cfg.neighbor_min == 0
        || cfg.neighbor_min > cfg.neighbor_max
        || cfg.noise_sigma < 0.0
    {
        return Err(Error::Synth("degenerate generator settings".into()));
    }
    let (n, t_len, f_dim) = (cfg.n, cfg.t, cfg.f);

    // Region box scaled with sqrt(N) to keep spatial density constant.
    let s = (n as f64 / 1015.0).sqrt();
    let (lat_half, lon_half) = ((11.0 * s).min(50.0), (25.0 * s).min(80.0));
    let width = (n as f64 - 1.0).log10().floor() as usize + 1;
    let pop_dist = LogNormal::new((25000.0f64).ln(), 1.0).unwrap();
    let mut locations = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, TAG_PLACE, i as u64);
        let population = pop_dist.sample(&mut rng).max(50.0);
        let hospitals = (population / 30000.0 * rng.gen_range(0.7..1.4)).round().max(1.0);
        let icu_beds = (hospitals * rng.gen_range(6.0..24.0)).round();
        let income: f64 = 30000.0 * LogNormal::new(0.0, 0.35).unwrap().sample(&mut rng);
        locations.push(SpatialFeatures {
            id: format!("L{:0width$}", i, width = width),
            latitude: 39.0 + rng.gen_range(-lat_half..lat_half),
            longitude: -98.0 + rng.gen_range(-lon_half..lon_half),
            population,
            hospitals,
            icu_beds,
            income: Some(income.round()),
        });
    }
    let graph = LocationGraph::build(&locations, &cfg.graph)?;

    // Per-feature global scale; feature 0 is the prediction target.
    let mut feature_scale = vec![TARGET_BASE_SCALE; f_dim];
    for (k, scale) in feature_scale.iter_mut().enumerate().skip(1) {
        let mut rng = substream(seed, TAG_FEATURE_SCALE, k as u64);
        *scale = TARGET_BASE_SCALE * LogNormal::new(0.0, 0.8).unwrap().sample(&mut rng);
    }

    // Base processes, then neighbor-aggregated series per location.
    let mut base = vec![0.0; n * f_dim * t_len];
    for i in 0..n {
        let pop_factor = (locations[i].population / 25000.0).powf(0.75);
        for k in 0..f_dim {
            let mut rng = substream(seed, TAG_BASE, (i * f_dim + k) as u64);
            let process = BaseProcess::draw(&mut rng, feature_scale[k], pop_factor, t_len);
            for w in 0..t_len {
                base[(i * f_dim + k) * t_len + w] = process.value(w);
            }
        }
    }

    let mut members: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, TAG_AGGREGATE, i as u64);
        let mut pool: Vec<usize> = graph.neighbors[i].iter().copied().filter(|&j| j != i).collect();
        let want = rng.gen_range(cfg.neighbor_min..=cfg.neighbor_max).min(pool.len());
        let mut set = vec![i];
        for pick in 0..want {
            let j = rng.gen_range(pick..pool.len());
            pool.swap(pick, j);
            set.push(pool[pick]);
        }
        members.push(set);
    }

    let aggregate = |i: usize, k: usize, w: usize| -> f64 {
        members[i].iter().map(|&a| base[(a * f_dim + k) * t_len + w]).sum()
    };

    // Noise is scaled by each aggregated series' own deviation so that
    // sigma reads in normalized units.
    let mut noise_scale = vec![0.0; n * f_dim];
    for i in 0..n {
        for k in 0..f_dim {
            let mean = (0..t_len).map(|w| aggregate(i, k, w)).sum::<f64>() / t_len as f64;
            let var = (0..t_len)
                .map(|w| (aggregate(i, k, w) - mean).powi(2))
                .sum::<f64>()
                / t_len as f64;
            noise_scale[i * f_dim + k] = var.sqrt();
        }
    }

    let noise = Normal::new(0.0, 1.0).unwrap();
    // Writes one location's `[t, f]` block; blocks are disjoint and each
    // location has its own substream, so the fan-out below cannot change
    // the output.
    let sample_block = |tag: u64, i: usize, block: &mut [f64]| {
        let mut rng = substream(seed, tag, i as u64);
        for w in 0..t_len {
            let window = rng.gen_range(1..=cfg.resample_max);
            let start = (w + 1).saturating_sub(window);
            for k in 0..f_dim {
                let mean = (start..=w).map(|v| aggregate(i, k, v)).sum::<f64>() / (w + 1 - start) as f64;
                let eps = noise.sample(&mut rng) * cfg.noise_sigma * noise_scale[i * f_dim + k];
                block[w * f_dim + k] = (mean + eps).max(0.0);
            }
        }
    };
    let fill_stream = |tag: u64, out: &mut Array3| {
        let block = t_len * f_dim;
        if threads <= 1 {
            for (i, chunk) in out.data.chunks_mut(block).enumerate() {
                sample_block(tag, i, chunk);
            }
        } else {
            let per = n.div_ceil(threads.min(n));
            std::thread::scope(|scope| {
                for (slab_idx, slab) in out.data.chunks_mut(per * block).enumerate() {
                    let sample_block = &sample_block;
                    scope.spawn(move || {
                        for (off, chunk) in slab.chunks_mut(block).enumerate() {
                            sample_block(tag, slab_idx * per + off, chunk);
                        }
                    });
                }
            });
        }
    };

    let mut x = Array3::zeros(n, t_len, f_dim);
    let mut u = Array3::zeros(n, t_len, f_dim);
    fill_stream(TAG_REALTIME, &mut x);
    fill_stream(TAG_REVISION, &mut u);

    // Fixed-interval release schedule; unreleased revisions fall back to the
    // real-time values.
    let mut released = vec![None; n * t_len];
    let mut delta_t = Array2::zeros(n, t_len);
    let mut revised = vec![false; n * t_len * f_dim];
    for i in 0..n {
        for w in 0..t_len {
            let release = w.div_ceil(cfg.latency_interval) * cfg.latency_interval;
            if release < t_len {
                released[i * t_len + w] = Some(release);
                delta_t.set(i, w, (release - w) as f64);
                for k in 0..f_dim {
                    revised[(i * t_len + w) * f_dim + k] = true;
                }
            } else {
                for k in 0..f_dim {
                    u.set(i, w, k, x.at(i, w, k));
                }
            }
        }
    }

    let mut y = Array2::zeros(n, t_len);
    for i in 0..n {
        for w in 0..t_len {
            y.set(i, w, aggregate(i, 0, w));
        }
    }

    Ok(SynthData {
        dataset: Dataset {
            locations,
            x,
            u,
            delta_t,
            revised,
            y,
        },
        released,
        graph,
    })
}

// ── writers ─────────────────────────────────────────────────────────────

#[derive(Debug, Deserialize, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    /// SHA-256 per written file.
    pub checksums: BTreeMap<String, String>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Write the corpus in the loader's schemas plus a manifest with checksums.
pub fn write_dataset(dir: &Path, data: &SynthData, seed: u64, cfg: &SynthConfig) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let ds = &data.dataset;
    let (t_len, f_dim) = (ds.t(), ds.f());

    let mut w = csv::Writer::from_path(dir.join("locations.csv"))?;
    for loc in &ds.locations {
        w.serialize(loc)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("realtime.csv"))?;
    w.write_record(["location_id", "week", "feature", "value"])?;
    for (i, loc) in ds.locations.iter().enumerate() {
        for week in 0..t_len {
            for k in 0..f_dim {
                w.write_record(&[
                    loc.id.clone(),
                    week.to_string(),
                    k.to_string(),
                    ds.x.at(i, week, k).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("updates.csv"))?;
    w.write_record(["location_id", "target_week", "received_week", "feature", "value"])?;
    for (i, loc) in ds.locations.iter().enumerate() {
        for week in 0..t_len {
            if let Some(release) = data.released[i * t_len + week] {
                for k in 0..f_dim {
                    w.write_record(&[
                        loc.id.clone(),
                        week.to_string(),
                        release.to_string(),
                        k.to_string(),
                        ds.u.at(i, week, k).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("targets.csv"))?;
    w.write_record(["location_id", "week", "value"])?;
    for (i, loc) in ds.locations.iter().enumerate() {
        for week in 0..t_len {
            w.write_record(&[loc.id.clone(), week.to_string(), ds.y.at(i, week).to_string()])?;
        }
    }
    w.flush()?;

    let mut checksums = BTreeMap::new();
    for name in ["locations.csv", "realtime.csv", "updates.csv", "targets.csv"] {
        checksums.insert(name.to_string(), sha256_hex(&dir.join(name))?);
    }
    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        checksums,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
