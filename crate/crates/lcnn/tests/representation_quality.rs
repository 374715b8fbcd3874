//! Directional properties of trained representations: the transformed
//! embeddings cluster by class, and supervised neurons concentrate their
//! activation on the owning class compared to an identically initialized
//! baseline.

use lcnn::analysis::neuron_profiles;
use lcnn::classify::embed;
use lcnn::config::{build_model, RunConfig};
use lcnn::data::{gen_synthetic_clusters, Split};
use lcnn::optim::{train, Mode};

fn setup() -> (
    lcnn::Network,
    lcnn::LabelConsistencyHead,
    lcnn::data::Dataset,
    RunConfig,
) {
    let data = gen_synthetic_clusters(4, 8, 40, 0.35, 5).unwrap();
    let cfg = RunConfig {
        layers: vec![24, 16],
        lr: 0.1,
        epochs: 20,
        seed: 5,
        ..RunConfig::default()
    };
    let (net, head) = build_model(&cfg, &data).unwrap();
    (net, head, data, cfg)
}

#[test]
fn trained_embeddings_cluster_by_class() {
    let (net, head, data, cfg) = setup();
    let mut tc = cfg.train_config().unwrap();
    tc.mode = Mode::Lcnn2;
    let (net, head, _) = train(net, head, &data, &tc).unwrap();

    let test_x = data.split_features(Split::Test);
    let test_y = data.split_labels(Split::Test);
    let e = embed(&net, &head, &test_x).unwrap();

    let mut within = (0.0, 0usize);
    let mut between = (0.0, 0usize);
    for a in 0..test_y.len() {
        for b in (a + 1)..test_y.len() {
            let d: f64 = e
                .column_vec(a)
                .iter()
                .zip(e.column_vec(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if test_y[a] == test_y[b] {
                within = (within.0 + d, within.1 + 1);
            } else {
                between = (between.0 + d, between.1 + 1);
            }
        }
    }
    let within = within.0 / within.1 as f64;
    let between = between.0 / between.1 as f64;
    assert!(
        within < between,
        "mean within-class distance {within:.4} vs between {between:.4}"
    );
}

#[test]
fn supervision_raises_mean_neuron_peakedness() {
    let (net, head, data, cfg) = setup();
    let mut base_tc = cfg.train_config().unwrap();
    base_tc.mode = Mode::Baseline;
    let (bnet, bhead, _) = train(net.clone(), head.clone(), &data, &base_tc).unwrap();
    let mut lcnn_tc = cfg.train_config().unwrap();
    lcnn_tc.mode = Mode::Lcnn2;
    let (lnet, lhead, _) = train(net, head, &data, &lcnn_tc).unwrap();

    let test_x = data.split_features(Split::Test);
    let test_y = data.split_labels(Split::Test);

    let mean_peak = |net: &lcnn::Network, head: &lcnn::LabelConsistencyHead| -> f64 {
        let trace = net.forward(&test_x).unwrap();
        let reps = trace.activation(head.attach_layer());
        let profiles = neuron_profiles(reps, &test_y, head.allocation()).unwrap();
        let live: Vec<f64> = profiles
            .iter()
            .filter(|p| !p.dead)
            .map(|p| p.peakedness)
            .collect();
        live.iter().sum::<f64>() / live.len() as f64
    };

    let baseline = mean_peak(&bnet, &bhead);
    let lcnn = mean_peak(&lnet, &lhead);
    assert!(
        lcnn > baseline,
        "mean peakedness {lcnn:.4} not above baseline {baseline:.4}"
    );
}
