mod oracles;

use compresskit::data::{make_synthetic, split, SyntheticKind};
use compresskit::nn::{ArchTag, Dense, Layer, Network};
use compresskit::prune::{
    apply_prune, prune_retrain, remove_dead_neurons, select_smallest, sensitivity_scan, LayerFilter, PruneConfig,
    ScanScope,
};
use compresskit::train::{StopRule, TrainConfig};
use oracles::{rng, smallest_by_sort};
use proptest::prelude::*;
use rand::Rng;

fn single_dense(weights: &[f64], rows: usize) -> Network {
    let mut d = Dense::new(weights.len() / rows, rows);
    d.weight.value.data_mut().copy_from_slice(weights);
    Network::new(ArchTag::Custom, &[weights.len() / rows], vec![Layer::Dense(d)]).unwrap()
}

fn mask(net: &Network) -> Vec<bool> {
    net.params()[0].mask.as_ref().unwrap().as_slice().to_vec()
}

fn random_weights(n: usize, r: &mut impl Rng) -> Vec<f64> {
    // coarse values so magnitude ties are common
    (0..n).map(|_| (r.random_range(-20i32..=20) as f64) / 8.0).collect()
}

#[test]
fn apply_prune_masks_exactly_the_sorted_prefix() {
    let mut r = rng(21);
    for case in 0..50 {
        let rows = r.random_range(1..=8);
        let n = rows * r.random_range(1..=40);
        let w = random_weights(n, &mut r);
        for tenths in 1..=9u32 {
            let s = tenths as f64 / 10.0;
            let mut net = single_dense(&w, rows);
            apply_prune(&mut net, s, &LayerFilter::All).unwrap();
            let k = (tenths as usize * n) / 10;
            let want = smallest_by_sort(&w, &vec![true; n], k);
            let got: std::collections::BTreeSet<usize> = mask(&net)
                .iter()
                .enumerate()
                .filter(|(_, k)| !**k)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(got, want, "case {case}, s = {s}");
            for &i in &got {
                assert_eq!(net.params()[0].value.data()[i], 0.0);
            }
        }
    }
}

#[test]
fn cumulative_pruning_follows_integer_recurrence() {
    let mut r = rng(22);
    for _ in 0..50 {
        let n = r.random_range(1..=500);
        let tenths = r.random_range(1..=9usize);
        let mut net = single_dense(&random_weights(n, &mut r), 1);
        let mut alive = n;
        for _ in 0..6 {
            let k = tenths * alive / 10;
            if k >= alive && alive > 0 {
                break;
            }
            assert_eq!(
                apply_prune(&mut net, tenths as f64 / 10.0, &LayerFilter::All).unwrap(),
                k
            );
            alive -= k;
            assert_eq!(net.param_count(), alive + 1, "weights left plus the bias");
        }
    }
}

fn trained_net() -> (Network, compresskit::data::Dataset, compresskit::data::Dataset) {
    let all = make_synthetic(SyntheticKind::StripedImages, 300, 3, 4).unwrap();
    let (train, val, _) = split(&all, [0.7, 0.3, 0.0], 4).unwrap();
    let mut net = Network::build(ArchTag::MiniAlexnet, train.sample_shape(), 3, 1, 5).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        ..Default::default()
    };
    compresskit::train::fit(&mut net, &train, &val, &cfg, StopRule::FixedEpochs(2)).unwrap();
    (net, train, val)
}

#[test]
fn fine_tuning_never_resurrects_a_weight() {
    let (mut net, train, val) = trained_net();
    let cfg = PruneConfig {
        sensitivity: 0.4,
        iterations: 3,
        retrain: TrainConfig {
            max_epochs: 1,
            ..Default::default()
        },
        retrain_stop: StopRule::FixedEpochs(1),
        ..Default::default()
    };
    let masks_before: Vec<Vec<bool>> = net
        .params()
        .iter()
        .filter_map(|p| p.mask.as_ref().map(|m| m.as_slice().to_vec()))
        .collect();
    let reports = prune_retrain(&mut net, &train, &val, &cfg).unwrap();
    assert_eq!(reports.len(), 3);
    for (p, before) in net.params().iter().filter(|p| p.mask.is_some()).zip(&masks_before) {
        let after = p.mask.as_ref().unwrap().as_slice();
        for (i, (&a, &b)) in after.iter().zip(before).enumerate() {
            assert!(b || !a, "entry {i} came back");
            if !a {
                assert_eq!(p.value.data()[i], 0.0);
            }
        }
    }
    let total: usize = net.params().iter().map(|p| p.value.len()).sum();
    let zero_bits: usize = net
        .params()
        .iter()
        .filter_map(|p| p.mask.as_ref())
        .map(|m| m.as_slice().iter().filter(|k| !**k).count())
        .sum();
    assert_eq!(net.param_count(), total - zero_bits);
}

#[test]
fn scan_leaves_the_input_network_untouched() {
    let (net, train, val) = trained_net();
    let before = compresskit::nn::format::encode(&net);
    let quick = TrainConfig {
        max_epochs: 1,
        patience: 1,
        ..Default::default()
    };
    let report = sensitivity_scan(
        &net,
        &train,
        &val,
        &[0.0, 0.5, 0.9],
        &quick,
        ScanScope::PerLayer,
        &LayerFilter::All,
    )
    .unwrap();
    assert_eq!(compresskit::nn::format::encode(&net), before);
    // three conv layers and two dense layers
    assert_eq!(report.rows.len(), 3 * 5);
    let reference = compresskit::train::evaluate(&net, &val).unwrap().accuracy;
    for row in report.rows.iter().filter(|r| r.sparsity == 0.0) {
        assert_eq!(row.val_accuracy, reference, "{}", row.scope);
    }
}

#[test]
fn empty_grid_is_rejected() {
    let (net, train, val) = trained_net();
    let r = sensitivity_scan(
        &net,
        &train,
        &val,
        &[],
        &TrainConfig::default(),
        ScanScope::Global,
        &LayerFilter::All,
    );
    assert!(r.is_err());
}

fn dense_chain(sizes: &[usize], seed: u64) -> Network {
    let layers = sizes
        .windows(2)
        .flat_map(|w| [Layer::Dense(Dense::new(w[0], w[1])), Layer::Relu])
        .collect::<Vec<_>>();
    let mut net = Network::new(ArchTag::Custom, &[sizes[0]], layers[..layers.len() - 1].to_vec()).unwrap();
    net.initialize(&mut rng(seed));
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_matches_full_sort(
        values in prop::collection::vec(-8i32..=8, 1..200),
        keep in prop::collection::vec(any::<bool>(), 200),
        frac in 0.0f64..1.0,
    ) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let eligible = &keep[..values.len()];
        let k = (frac * eligible.iter().filter(|e| **e).count() as f64) as usize;
        let got = select_smallest(&values, Some(eligible), k).unwrap();
        let want: Vec<usize> = smallest_by_sort(&values, eligible, k).into_iter().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn dead_neuron_removal_is_idempotent(
        sizes in prop::collection::vec(1usize..6, 2..5),
        s in 0.0f64..0.95,
        seed: u64,
    ) {
        let mut net = dense_chain(&sizes, seed);
        apply_prune(&mut net, s, &LayerFilter::All).unwrap();
        remove_dead_neurons(&mut net);
        let once = net.clone();
        prop_assert_eq!(remove_dead_neurons(&mut net), 0);
        prop_assert_eq!(net, once);
    }
}
