use zsl_core::attention::{attention_forward, train_attention, TrainConfig};
use zsl_core::prototypes::{build_prototype_set, Method, PrototypeParams};
use zsl_core::synthetic::{planted_visual_tokens, SyntheticConfig, SyntheticDataset};
use zsl_core::visualness::build_visualness_table;
use zsl_core::WeightReport;

fn planted_hits(reports: &[WeightReport], ds: &SyntheticDataset) -> usize {
    reports
        .iter()
        .zip(&ds.planted)
        .filter(|(r, p)| {
            let best = r.weights.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            Some(&best.0) == p.as_ref()
        })
        .count()
}

#[test]
fn attention_recovers_planted_words() {
    for seed in 0..3 {
        let ds = planted_visual_tokens(&SyntheticConfig { seed, ..Default::default() }).unwrap();
        let model = train_attention(&ds.train, &ds.catalog, &ds.embeddings, &TrainConfig::new(1e-3)).unwrap();
        assert!(model.training_log.windows(2).all(|w| w[1] <= w[0]));
        let (_, reports) = attention_forward(&model.theta, &ds.catalog, &ds.embeddings).unwrap();
        assert_eq!(reports.len(), ds.catalog.len());
        let hits = planted_hits(&reports, &ds);
        assert!(hits * 10 >= reports.len() * 9, "seed {seed}: {hits}/{}", reports.len());
    }
}

#[test]
fn visualness_weights_favor_planted_words() {
    let ds = planted_visual_tokens(&SyntheticConfig::default()).unwrap();
    let vis = build_visualness_table(&ds.bundles).unwrap();
    let params = PrototypeParams {
        tau: Some(0.1),
        ..Default::default()
    };
    let (_, reports) = build_prototype_set(&ds.catalog, &ds.embeddings, Method::DefVisualness, &params, Some(&vis)).unwrap();
    assert_eq!(planted_hits(&reports, &ds), ds.catalog.len());
}
