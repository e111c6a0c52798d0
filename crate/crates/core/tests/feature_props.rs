use btc_anomaly::features::{
    extract_transaction_features, extract_user_features, normalize, signed_log1p,
};
use btc_anomaly::graphs::{build_transaction_graph, build_user_graph};
use btc_anomaly::synth::{generate, SynthConfig};
use btc_anomaly::{default_schema, Feature, FeatureMatrix, FeatureSchema, GraphKind, Matrix};
use proptest::prelude::*;

fn config(seed: u64) -> SynthConfig {
    SynthConfig {
        user_count: 40,
        tx_count: 400,
        seed,
        funnel_thefts: 2,
        funnel_sources: 8,
        burst_senders: 1,
        burst_length: 5,
        dormant_users: 1,
        ..Default::default()
    }
}

fn all_features(kind: GraphKind) -> FeatureSchema {
    FeatureSchema::new(kind, Feature::CANONICAL.to_vec()).unwrap()
}

fn raw(values: Vec<Vec<f64>>) -> FeatureMatrix {
    let n = values[0].len();
    let schema = FeatureSchema::new(GraphKind::User, Feature::CANONICAL[..n].to_vec()).unwrap();
    FeatureMatrix {
        entity_ids: (0..values.len()).map(|i| i.to_string()).collect(),
        values: Matrix::from_rows(&values).unwrap(),
        schema,
        normalized: false,
    }
}

fn check_ranges(fm: &FeatureMatrix) {
    let idx = |f: Feature| fm.schema.features().iter().position(|&g| g == f).unwrap();
    for row in fm.values.iter_rows() {
        for f in [
            Feature::InDegree,
            Feature::OutDegree,
            Feature::UniqueInDegree,
            Feature::UniqueOutDegree,
        ] {
            let v = row[idx(f)];
            assert!(v >= 0.0 && v.fract() == 0.0, "{f:?} = {v}");
        }
        let c = row[idx(Feature::ClusteringCoefficient)];
        assert!((0.0..=1.0).contains(&c), "clustering {c}");
        assert!(row[idx(Feature::ActiveDuration)] >= 0.0);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn feature_ranges_on_synthetic_ledgers(seed in any::<u64>()) {
        let l = generate(&config(seed)).unwrap();
        let ug = build_user_graph(&l.records, &l.user_map).unwrap();
        check_ranges(&extract_user_features(&ug, &all_features(GraphKind::User)).unwrap());
        let tg = build_transaction_graph(&l.records);
        check_ranges(
            &extract_transaction_features(&tg, &l.records, &all_features(GraphKind::Transaction)).unwrap(),
        );
    }

    #[test]
    fn balances_conserve_coinbase(seed in any::<u64>()) {
        let l = generate(&config(seed)).unwrap();
        let g = build_user_graph(&l.records, &l.user_map).unwrap();
        let total: i64 = g.flows.values().map(|f| f.balance()).sum();
        let minted: u64 = l
            .records
            .iter()
            .filter(|r| r.is_coinbase())
            .map(|r| r.total_output().0)
            .sum();
        prop_assert_eq!(total, minted as i64);
    }

    #[test]
    fn signed_log_is_odd_and_increasing(a in -1e12f64..1e12, b in -1e12f64..1e12) {
        prop_assert_eq!(signed_log1p(-a), -signed_log1p(a));
        if a < b {
            prop_assert!(signed_log1p(a) < signed_log1p(b));
        }
    }

    #[test]
    fn log_transform_preserves_single_feature_ranking(col in prop::collection::vec(-1e9f64..1e9, 2..50)) {
        let mut by_raw: Vec<usize> = (0..col.len()).collect();
        by_raw.sort_by(|&i, &j| col[i].total_cmp(&col[j]).then(i.cmp(&j)));
        let logged: Vec<f64> = col.iter().map(|&v| signed_log1p(v)).collect();
        // the raw order is still sorted after the transform
        for w in by_raw.windows(2) {
            prop_assert!(logged[w[0]] <= logged[w[1]]);
        }
    }

    #[test]
    fn normalized_columns_are_standardized(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 2..60)) {
        let fm = raw(rows);
        let z = normalize(&fm).unwrap();
        prop_assert!(z.normalized);
        prop_assert!(normalize(&z).is_err());
        let m = z.rows() as f64;
        for j in 0..z.cols() {
            let col = z.values.column(j);
            let mean = col.iter().sum::<f64>() / m;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var.abs() < 1e-12 || (var - 1.0).abs() < 1e-9, "var {}", var);
        }
    }
}

#[test]
fn default_schemas() {
    assert_eq!(
        default_schema(GraphKind::User).names(),
        [
            "in_degree",
            "out_degree",
            "avg_in_transaction",
            "avg_out_transaction",
            "mean_time_interval",
            "clustering_coefficient"
        ]
    );
    assert_eq!(
        default_schema(GraphKind::Transaction).names(),
        ["in_degree", "out_degree", "total_amount"]
    );
}

#[test]
fn constant_column_normalizes_to_zero() {
    let z = normalize(&raw(vec![vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]])).unwrap();
    assert_eq!(z.values.column(0), vec![0.0; 3]);
}
