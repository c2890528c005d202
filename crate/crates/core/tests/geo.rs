//! Graph construction against closed-form values and a brute-force oracle.

use std::io::Write;

use lfnet::geo::{
    edge_weight, great_circle_distance, id_index, load_graph_csv, load_locations_csv,
    GraphConfig, LocationGraph, SpatialFeatures, DEFAULT_OMEGA, EARTH_RADIUS_KM,
};
use lfnet::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loc(id: &str, lat: f64, lon: f64, pop: f64) -> SpatialFeatures {
    SpatialFeatures {
        id: id.to_string(),
        latitude: lat,
        longitude: lon,
        population: pop,
        hospitals: 3.0,
        icu_beds: 10.0,
        income: Some(30_000.0),
    }
}

// ── distances ───────────────────────────────────────────────────────────

#[test]
fn one_degree_of_longitude_at_the_equator() {
    let d = great_circle_distance((0.0, 0.0), (0.0, 1.0)).unwrap();
    // Along the equator the great circle is the parallel itself.
    let arc = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    assert!((d - arc).abs() < 1e-9, "{d} vs {arc}");
    assert!((d - 111.19).abs() < 5e-3);
}

#[test]
fn identical_points_have_zero_distance() {
    assert_eq!(great_circle_distance((41.3, -87.2), (41.3, -87.2)).unwrap(), 0.0);
}

#[test]
fn antipodal_points_reach_half_the_circumference() {
    let d = great_circle_distance((0.0, 0.0), (0.0, 180.0)).unwrap();
    assert!((d - EARTH_RADIUS_KM * std::f64::consts::PI).abs() < 1e-6);
}

#[test]
fn coordinates_are_range_checked() {
    assert!(great_circle_distance((90.5, 0.0), (0.0, 0.0)).is_err());
    assert!(great_circle_distance((0.0, 0.0), (0.0, -180.5)).is_err());
    assert!(great_circle_distance((f64::NAN, 0.0), (0.0, 0.0)).is_err());
}

proptest! {
    #[test]
    fn distance_is_symmetric_and_nonnegative(
        lat1 in -90.0f64..90.0, lon1 in -180.0f64..180.0,
        lat2 in -90.0f64..90.0, lon2 in -180.0f64..180.0,
    ) {
        let ab = great_circle_distance((lat1, lon1), (lat2, lon2)).unwrap();
        let ba = great_circle_distance((lat2, lon2), (lat1, lon1)).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
    }
}

// ── edge weights ────────────────────────────────────────────────────────

#[test]
fn unit_populations_at_zero_distance_weigh_one() {
    assert_eq!(edge_weight(1.0, 1.0, 0.0, 0.35, 0.37, 30.0).unwrap(), 1.0);
}

#[test]
fn published_hyperparameters_give_the_closed_form_value() {
    // 10^5^0.35 * 10^5^0.37 / e^(30/30) = 10^3.6 / e, evaluated separately.
    let w = edge_weight(1e5, 1e5, 30.0, 0.35, 0.37, 30.0).unwrap();
    let expect = 10f64.powf(3.6) / std::f64::consts::E;
    assert!((w - expect).abs() / expect < 1e-12, "{w} vs {expect}");
}

#[test]
fn weight_decays_in_distance_and_grows_in_population() {
    let mut prev = f64::MAX;
    for d in [0.0, 5.0, 50.0, 500.0, 5000.0] {
        let w = edge_weight(2e4, 3e4, d, 0.35, 0.37, 30.0).unwrap();
        assert!(w > 0.0 && w < prev);
        prev = w;
    }
    let small = edge_weight(1e4, 1e4, 10.0, 0.35, 0.37, 30.0).unwrap();
    let big = edge_weight(5e4, 1e4, 10.0, 0.35, 0.37, 30.0).unwrap();
    assert!(big > small);
}

#[test]
fn degenerate_weight_parameters_error() {
    assert!(edge_weight(0.0, 1.0, 1.0, 0.35, 0.37, 30.0).is_err());
    assert!(edge_weight(1.0, -2.0, 1.0, 0.35, 0.37, 30.0).is_err());
    assert!(edge_weight(1.0, 1.0, 1.0, 0.35, 0.37, 0.0).is_err());
    assert!(edge_weight(1.0, 1.0, -0.5, 0.35, 0.37, 30.0).is_err());
}

proptest! {
    #[test]
    fn rescaling_distance_and_gamma_together_changes_nothing(
        d in 0.1f64..2000.0,
        gamma in 10.0f64..200.0,
        lambda in 0.05f64..20.0,
    ) {
        let a = edge_weight(2e4, 7e4, d, 0.35, 0.37, gamma).unwrap();
        let b = edge_weight(2e4, 7e4, lambda * d, 0.35, 0.37, lambda * gamma).unwrap();
        prop_assert!((a - b).abs() / a < 1e-12);
    }
}

// ── graph construction ──────────────────────────────────────────────────

#[test]
fn boundary_weight_keeps_the_edge() {
    let a = loc("a", 0.0, 0.0, 1e4);
    let b = loc("b", 0.0, 0.3, 2e4);
    let cfg = GraphConfig {
        alpha: 0.35,
        beta: 0.37,
        gamma: 30.0,
        omega: 0.0, // placeholder, set below
    };
    let d = great_circle_distance((0.0, 0.0), (0.0, 0.3)).unwrap();
    let w_ab = edge_weight(1e4, 2e4, d, 0.35, 0.37, 30.0).unwrap();
    let w_ba = edge_weight(2e4, 1e4, d, 0.35, 0.37, 30.0).unwrap();
    let exact = GraphConfig { omega: w_ab.max(w_ba), ..cfg };
    let g = LocationGraph::build(&[a.clone(), b.clone()], &exact).unwrap();
    assert_eq!(g.adjacency, vec![1, 1, 1, 1], "weight equal to omega is an edge");

    let above = GraphConfig { omega: w_ab.max(w_ba) * (1.0 + 1e-12), ..cfg };
    let g = LocationGraph::build(&[a, b], &above).unwrap();
    assert_eq!(g.adjacency, vec![1, 0, 0, 1]);
}

#[test]
fn huge_threshold_leaves_only_self_loops() {
    let features: Vec<_> = (0..6)
        .map(|i| loc(&format!("n{i}"), 30.0 + i as f64, -100.0, 5e4))
        .collect();
    let cfg = GraphConfig { omega: 1e18, ..GraphConfig::default() };
    let g = LocationGraph::build(&features, &cfg).unwrap();
    assert_eq!(g.edge_count(), 6);
    assert_eq!(g.mean_degree(), 0.0);
    assert_eq!(g.degree_range(), (0, 0));
    for i in 0..6 {
        assert_eq!(g.neighbors[i], vec![i], "self-loop survives thresholding");
    }
}

#[test]
fn fifty_node_instance_matches_the_brute_force_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let features: Vec<_> = (0..50)
        .map(|i| {
            loc(
                &format!("n{i:02}"),
                rng.gen_range(25.0..49.0),
                rng.gen_range(-124.0..-67.0),
                (rng.gen_range(8.0f64..13.0)).exp(),
            )
        })
        .collect();
    let cfg = GraphConfig::default();
    let g = LocationGraph::build(&features, &cfg).unwrap();

    // Independent distance oracle: spherical law of cosines.
    let dist = |a: &SpatialFeatures, b: &SpatialFeatures| -> f64 {
        let (p1, l1) = (a.latitude.to_radians(), a.longitude.to_radians());
        let (p2, l2) = (b.latitude.to_radians(), b.longitude.to_radians());
        let c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * (l1 - l2).cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_KM * c.acos()
    };
    let mut expected = vec![0u8; 50 * 50];
    for i in 0..50 {
        expected[i * 50 + i] = 1;
        for j in (i + 1)..50 {
            let d = dist(&features[i], &features[j]);
            let w_ij = features[i].population.powf(cfg.alpha)
                * features[j].population.powf(cfg.beta)
                * (-d / cfg.gamma).exp();
            let w_ji = features[j].population.powf(cfg.alpha)
                * features[i].population.powf(cfg.beta)
                * (-d / cfg.gamma).exp();
            if w_ij.max(w_ji) >= cfg.omega {
                expected[i * 50 + j] = 1;
                expected[j * 50 + i] = 1;
            }
            let got = g.weights[i * 50 + j];
            assert!((got - w_ij).abs() / w_ij.max(1e-12) < 1e-9);
        }
    }
    assert_eq!(g.adjacency, expected);
    assert!(g.edge_count() > 50, "the default threshold should connect something");
}

#[test]
fn adjacency_is_symmetric_with_self_loops_and_consistent_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let features: Vec<_> = (0..20)
        .map(|i| {
            loc(
                &format!("n{i:02}"),
                rng.gen_range(30.0..45.0),
                rng.gen_range(-110.0..-80.0),
                (rng.gen_range(9.0f64..12.0)).exp(),
            )
        })
        .collect();
    let g = LocationGraph::build(&features, &GraphConfig::default()).unwrap();
    for i in 0..g.n {
        assert_eq!(g.adjacency[i * g.n + i], 1);
        for j in 0..g.n {
            assert_eq!(g.adjacency[i * g.n + j], g.adjacency[j * g.n + i]);
        }
        let from_matrix: Vec<usize> =
            (0..g.n).filter(|&j| g.adjacency[i * g.n + j] == 1).collect();
        assert_eq!(g.neighbors[i], from_matrix);
    }
    let above: usize = (0..g.n)
        .flat_map(|i| ((i + 1)..g.n).map(move |j| (i, j)))
        .filter(|&(i, j)| g.adjacency[i * g.n + j] == 1)
        .count();
    assert_eq!(g.edge_count(), above + g.n);
}

#[test]
fn build_validation_errors() {
    assert!(matches!(
        LocationGraph::build(&[], &GraphConfig::default()),
        Err(Error::BadGraphParam(_))
    ));
    let dup = vec![loc("same", 30.0, -100.0, 1e4), loc("same", 31.0, -99.0, 2e4)];
    assert!(matches!(
        LocationGraph::build(&dup, &GraphConfig::default()),
        Err(Error::DuplicateLocation(id)) if id == "same"
    ));
    let bad_lat = vec![loc("x", 91.0, 0.0, 1e4)];
    assert!(matches!(
        LocationGraph::build(&bad_lat, &GraphConfig::default()),
        Err(Error::BadCoordinate { .. })
    ));
    let bad_pop = vec![loc("x", 10.0, 0.0, 0.0)];
    assert!(matches!(
        LocationGraph::build(&bad_pop, &GraphConfig::default()),
        Err(Error::BadPopulation { .. })
    ));
    let cfg = GraphConfig { omega: 0.0, ..GraphConfig::default() };
    assert!(LocationGraph::build(&[loc("x", 10.0, 0.0, 1e4)], &cfg).is_err());
}

#[test]
fn explicit_edge_list_overrides_thresholding() {
    let features = vec![
        loc("a", 30.0, -100.0, 1e4),
        loc("b", 45.0, -70.0, 1e4),
        loc("c", 25.0, -120.0, 1e4),
    ];
    let cfg = GraphConfig { omega: 1e18, ..GraphConfig::default() };
    let g = LocationGraph::build_with_edges(&features, &cfg, &[(0, 2)]).unwrap();
    assert_eq!(g.neighbors[0], vec![0, 2]);
    assert_eq!(g.neighbors[1], vec![1]);
    assert_eq!(g.neighbors[2], vec![0, 2]);
    assert!(LocationGraph::build_with_edges(&features, &cfg, &[(0, 7)]).is_err());
}

#[test]
fn edge_index_matches_neighbor_lists() {
    let features = vec![
        loc("a", 30.0, -100.0, 1e5),
        loc("b", 30.1, -100.1, 1e5),
        loc("c", 10.0, -60.0, 1e3),
    ];
    let g = LocationGraph::build(&features, &GraphConfig::default()).unwrap();
    let idx = g.edge_index();
    assert_eq!(idx.num_nodes(), 3);
    let mut edges = 0;
    for i in 0..3 {
        for e in idx.segment(i) {
            assert_eq!(idx.dst[e], i);
            assert!(g.neighbors[i].contains(&idx.src[e]));
            edges += 1;
        }
        assert_eq!(idx.segment(i).len(), g.neighbors[i].len());
    }
    assert_eq!(edges, idx.num_edges());
}

// ── CSV interfaces ──────────────────────────────────────────────────────

#[test]
fn csv_loaders_roundtrip_locations_and_edges() {
    let dir = tempfile::tempdir().unwrap();
    let loc_path = dir.path().join("locations.csv");
    let mut f = std::fs::File::create(&loc_path).unwrap();
    writeln!(f, "location_id,latitude,longitude,population,hospitals,icu_beds,income").unwrap();
    writeln!(f, "A01,40.5,-88.25,125000,4,18,41000").unwrap();
    writeln!(f, "A02,41.0,-87.75,98000,2,9,").unwrap();
    drop(f);

    let features = load_locations_csv(&loc_path).unwrap();
    assert_eq!(features.len(), 2);
    assert_eq!(features[0].id, "A01");
    assert_eq!(features[0].income, Some(41_000.0));
    assert_eq!(features[1].income, None);
    assert_eq!(features[1].population, 98_000.0);

    let graph_path = dir.path().join("graph.csv");
    let mut f = std::fs::File::create(&graph_path).unwrap();
    writeln!(f, "src,dst").unwrap();
    writeln!(f, "A01,A02").unwrap();
    writeln!(f, "A02,A01").unwrap();
    drop(f);
    let edges = load_graph_csv(&graph_path, &id_index(&features)).unwrap();
    assert_eq!(edges, vec![(0, 1)], "reversed duplicates collapse");

    let mut f = std::fs::File::create(&graph_path).unwrap();
    writeln!(f, "src,dst").unwrap();
    writeln!(f, "A01,NOPE").unwrap();
    drop(f);
    assert!(matches!(
        load_graph_csv(&graph_path, &id_index(&features)),
        Err(Error::UnknownLocation(id)) if id == "NOPE"
    ));

    let empty = dir.path().join("empty.csv");
    let mut f = std::fs::File::create(&empty).unwrap();
    writeln!(f, "location_id,latitude,longitude,population,hospitals,icu_beds,income").unwrap();
    drop(f);
    assert!(load_locations_csv(&empty).is_err());
}

#[test]
fn default_threshold_is_the_synthetic_calibration() {
    assert_eq!(GraphConfig::default().omega, DEFAULT_OMEGA);
    let d = GraphConfig::default();
    assert_eq!((d.alpha, d.beta, d.gamma), (0.35, 0.37, 30.0));
}
