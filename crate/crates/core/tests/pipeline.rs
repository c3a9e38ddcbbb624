mod common;

use std::collections::BTreeSet;

use common::*;
use infoprune::costs::{count_costs, evaluate_plan_costs};
use infoprune::manifest::LayerKind;
use infoprune::planner::RemovalAxis;
use infoprune::refnet::{forward, forward_trace, masked_equivalence, random_inputs, Activation, ChannelMask};
use infoprune::scoring::LayerScores;
use infoprune::*;
use infoprune::Strategy;
use proptest::prelude::*;
use serde_json::json;

fn conv_json(id: &str, input: &str, cin: usize, cout: usize, k: usize, prunable: bool) -> serde_json::Value {
    json!({"id": id, "kind": "conv2d", "inputs": [input], "prunable": prunable,
        "params": {"out_channels": cout, "in_channels": cin, "kernel": k, "stride": 1, "padding": k / 2,
                   "has_bias": true, "weight": format!("{id}.w"), "bias": format!("{id}.b")}})
}

/// Score table whose combined scores are given directly.
fn fixed_scores(model: &Model, rows: &[(&str, Vec<f64>)]) -> ScoreTable {
    ScoreTable {
        archive_fingerprint: model.fingerprint(),
        config: ScoringConfig::default(),
        layers: rows
            .iter()
            .map(|(id, combined)| {
                let kind = model.manifest.layer(id).unwrap().kind();
                let mut s = LayerScores::from_raw(*id, kind, vec![0.0; combined.len()], vec![0.0; combined.len()], 0.8);
                s.combined = combined.clone();
                s
            })
            .collect(),
    }
}

fn options(rates: PruningRates) -> PlanOptions {
    PlanOptions {
        rates,
        ..Default::default()
    }
}

fn plan_for(model: &Model, rate: f64, strategy: Strategy, seed: u64) -> PruningPlan {
    let scores = score_model(model, &ScoringConfig::default()).unwrap();
    let opts = PlanOptions {
        rates: PruningRates::uniform(rate),
        strategy,
        seed,
        extra_protected: vec![],
    };
    build_plan(&model.manifest, &scores, &opts).unwrap()
}

#[test]
fn chain_propagates_kept_channels_to_consumer() {
    let m = manifest_from(json!({
        "input_shape": [3, 6, 6],
        "layers": [conv_json("conv1", "input", 3, 8, 3, true),
                   {"id": "relu", "kind": "relu", "inputs": ["conv1"]},
                   conv_json("conv2", "relu", 8, 4, 3, true)]
    }));
    let model = with_random_tensors(m, 1);
    let scores = score_model(&model, &ScoringConfig::default()).unwrap();
    let mut rates = PruningRates::uniform(0.0);
    rates.layers.insert("conv1".into(), 0.5);
    let plan = build_plan(&model.manifest, &scores, &options(rates)).unwrap();
    let p1 = plan.layer("conv1").unwrap();
    assert_eq!(p1.keep, 4);
    let d = plan.derived_for("conv2").unwrap();
    assert_eq!(d.axis, RemovalAxis::InChannels);
    assert_eq!(d.kept, p1.kept_out_indices);
    assert_eq!(plan.layer("conv2").unwrap().keep, 4);
}

#[test]
fn residual_group_shares_one_keep_set() {
    let model = zoo::random_residual(9).unwrap();
    let plan = plan_for(&model, 0.25, Strategy::LeastImportant, 0);
    for group in &model.manifest.coupling_groups {
        let sets: Vec<&Vec<usize>> = group.layer_ids.iter().map(|id| &plan.layer(id).unwrap().kept_out_indices).collect();
        assert!(sets.windows(2).all(|w| w[0] == w[1]));
        let n = plan.layer(&group.layer_ids[0]).unwrap().original;
        assert_eq!(sets[0].len(), keep_count(0.25, n).unwrap());
    }
    // the add consumer of the stem branch sees the same channels via its BN input
    let stem = &plan.layer("stem").unwrap().kept_out_indices;
    assert_eq!(&plan.derived_for("block1.conv1").unwrap().kept, stem);
}

#[test]
fn group_scores_are_summed_before_selection() {
    let m = manifest_from(json!({
        "input_shape": [2, 4, 4],
        "layers": [conv_json("a", "input", 2, 4, 1, true),
                   conv_json("b", "a", 4, 4, 1, true),
                   {"id": "sum", "kind": "add", "inputs": ["a", "b"]}],
        "coupling_groups": [{"layer_ids": ["a", "b"]}]
    }));
    let model = with_random_tensors(m, 3);
    // sums: [1.0, 0.9, 1.2, 0.3]
    let scores = fixed_scores(&model, &[("a", vec![0.9, 0.0, 0.2, 0.3]), ("b", vec![0.1, 0.9, 1.0, 0.0])]);
    let plan = build_plan(&model.manifest, &scores, &options(PruningRates::uniform(0.5))).unwrap();
    assert_eq!(plan.layer("a").unwrap().kept_out_indices, vec![0, 2]);
    assert_eq!(plan.layer("b").unwrap().kept_out_indices, vec![0, 2]);
    let pruned = apply_plan(&model, &plan).unwrap();
    let xs = random_inputs(&model.manifest, 4, 0);
    assert!(masked_equivalence(&model, &plan, &pruned.model, &xs).unwrap() <= 1e-5);
}

#[test]
fn conflicting_group_rates_are_rejected() {
    let model = zoo::random_residual(1).unwrap();
    let mut rates = PruningRates::uniform(0.5);
    rates.layers.insert("stem".into(), 0.25);
    rates.layers.insert("block1.conv2".into(), 0.5);
    let scores = score_model(&model, &ScoringConfig::default()).unwrap();
    let err = build_plan(&model.manifest, &scores, &options(rates)).unwrap_err();
    assert!(matches!(err, Error::RateConflict { .. }), "{err}");
}

#[test]
fn missing_rate_and_score_rows_are_errors() {
    let model = zoo::toy_chain(0).unwrap();
    let scores = score_model(&model, &ScoringConfig::default()).unwrap();
    assert!(matches!(
        build_plan(&model.manifest, &scores, &options(PruningRates::default())).unwrap_err(),
        Error::MissingRate(_)
    ));
    let mut partial = scores.clone();
    partial.layers.retain(|l| l.layer_id != "conv2");
    assert!(matches!(
        build_plan(&model.manifest, &partial, &options(PruningRates::uniform(0.5))).unwrap_err(),
        Error::MissingScores(_)
    ));
    let mut bad = PruningRates::uniform(0.5);
    bad.layers.insert("conv1".into(), 1.0);
    assert!(matches!(build_plan(&model.manifest, &scores, &options(bad)).unwrap_err(), Error::InvalidRate { .. }));
}

#[test]
fn final_classifier_is_protected_by_default() {
    let model = zoo::toy_chain(0).unwrap();
    let plan = plan_for(&model, 0.5, Strategy::LeastImportant, 0);
    let fc = plan.layer("fc").unwrap();
    assert!(fc.protected);
    assert_eq!(fc.keep, 10);
    assert_eq!(plan.config.protected, vec!["fc".to_string()]);

    let scores = score_model(&model, &ScoringConfig::default()).unwrap();
    let mut rates = PruningRates::uniform(0.5);
    rates.protected = Some(vec!["conv1".into()]);
    let plan = build_plan(&model.manifest, &scores, &options(rates)).unwrap();
    assert_eq!(plan.layer("conv1").unwrap().keep, 8);
    assert_eq!(plan.layer("fc").unwrap().keep, 5);
}

#[test]
fn flatten_boundary_removes_column_blocks() {
    let m = manifest_from(json!({
        "input_shape": [2, 4, 4],
        "layers": [conv_json("conv", "input", 2, 3, 3, true),
                   {"id": "flat", "kind": "flatten", "inputs": ["conv"], "params": {"height": 4, "width": 4}},
                   {"id": "fc", "kind": "linear", "inputs": ["flat"], "params":
                       {"out_features": 5, "in_features": 48, "has_bias": true, "weight": "fc.w", "bias": "fc.b"}}]
    }));
    let model = with_random_tensors(m, 7);
    let scores = fixed_scores(&model, &[("conv", vec![0.9, 0.1, 0.8]), ("fc", vec![0.0; 5])]);
    let mut rates = PruningRates::uniform(0.0);
    rates.layers.insert("conv".into(), 0.4);
    let plan = build_plan(&model.manifest, &scores, &options(rates)).unwrap();
    assert_eq!(plan.layer("conv").unwrap().kept_out_indices, vec![0, 2]);
    let d = plan.derived_for("fc").unwrap();
    assert_eq!(d.axis, RemovalAxis::InFeatures);
    let want: Vec<usize> = (0..16).chain(32..48).collect();
    assert_eq!(d.kept, want);

    let pruned = apply_plan(&model, &plan).unwrap();
    let w = pruned.model.tensor("fc.w");
    assert_eq!(w.shape, vec![5, 32]);
    let orig = model.tensor("fc.w");
    for o in 0..5 {
        assert_eq!(&w.row(o)[..16], &orig.row(o)[..16]);
        assert_eq!(&w.row(o)[16..], &orig.row(o)[32..]);
    }
    let xs = random_inputs(&model.manifest, 10, 5);
    let dev = masked_equivalence(&model, &plan, &pruned.model, &xs).unwrap();
    assert!(dev <= 1e-4, "{dev}");
}

#[test]
fn applier_slices_rows_and_columns() {
    let m = manifest_from(json!({
        "input_shape": [3, 5, 5],
        "layers": [conv_json("a", "input", 3, 4, 3, true),
                   conv_json("b", "a", 4, 8, 3, false)]
    }));
    let model = with_random_tensors(m, 2);
    let scores = fixed_scores(&model, &[("a", vec![0.9, 0.1, 0.8, 0.2])]);
    let plan = build_plan(&model.manifest, &scores, &options(PruningRates::uniform(0.5))).unwrap();
    assert_eq!(plan.layer("a").unwrap().kept_out_indices, vec![0, 2]);
    let pruned = apply_plan(&model, &plan).unwrap().model;

    let (wa, orig_a) = (pruned.tensor("a.w"), model.tensor("a.w"));
    assert_eq!(wa.shape, vec![2, 3, 3, 3]);
    assert_eq!(wa.row(0), orig_a.row(0));
    assert_eq!(wa.row(1), orig_a.row(2));
    assert_eq!(pruned.tensor("a.b").data, vec![model.tensor("a.b").data[0], model.tensor("a.b").data[2]]);

    let (wb, orig_b) = (pruned.tensor("b.w"), model.tensor("b.w"));
    assert_eq!(wb.shape, vec![8, 2, 3, 3]);
    for o in 0..8 {
        assert_eq!(&wb.row(o)[..9], &orig_b.row(o)[..9]);
        assert_eq!(&wb.row(o)[9..], &orig_b.row(o)[18..27]);
    }
    assert_eq!(pruned.tensor("b.b"), model.tensor("b.b"));
}

#[test]
fn identity_plan_reproduces_archive() {
    let model = zoo::random_residual(5).unwrap();
    let plan = plan_for(&model, 0.0, Strategy::LeastImportant, 0);
    let pruned = apply_plan(&model, &plan).unwrap();
    assert_eq!(pruned.model, model);
    assert_eq!(pruned.provenance.pruned_fingerprint, model.fingerprint());
    let report = evaluate_plan_costs(&model.manifest, &plan).unwrap();
    assert_eq!((report.flops_pr, report.params_pr), (0.0, 0.0));
}

#[test]
fn plan_is_rejected_on_other_archives() {
    let model = zoo::toy_chain(1).unwrap();
    let plan = plan_for(&model, 0.5, Strategy::LeastImportant, 0);
    let pruned = apply_plan(&model, &plan).unwrap();
    let err = apply_plan(&pruned.model, &plan).unwrap_err();
    assert!(err.to_string().contains("plan/archive mismatch"), "{err}");

    let mut stale = plan.clone();
    stale.layers[0].kept_out_indices = vec![0, 1, 2, 99];
    assert!(matches!(apply_plan(&model, &stale).unwrap_err(), Error::IndexOutOfRange { .. }));
}

#[test]
fn pruned_parameter_count_matches_cost_prediction() {
    for seed in 0..6 {
        let model = if seed % 2 == 0 { zoo::random_chain(seed) } else { zoo::random_residual(seed) }.unwrap();
        let plan = plan_for(&model, 0.5, Strategy::LeastImportant, 0);
        let predicted = evaluate_plan_costs(&model.manifest, &plan).unwrap();
        let pruned = apply_plan(&model, &plan).unwrap().model;
        let actual_weights: u64 = pruned.tensors.values().filter(|t| !t.name.ends_with("mean") && !t.name.ends_with("var")).map(|t| t.numel() as u64).sum();
        assert_eq!(actual_weights, predicted.pruned.total_params);
        assert_eq!(count_costs(&pruned.manifest).unwrap(), predicted.pruned);
    }
}

#[test]
fn plan_costs_examples() {
    let single = with_random_tensors(
        manifest_from(json!({"input_shape": [3, 6, 6], "layers": [conv_json("c", "input", 3, 8, 3, true)]})),
        0,
    );
    let plan = plan_for(&single, 0.5, Strategy::LeastImportant, 0);
    let r = evaluate_plan_costs(&single.manifest, &plan).unwrap();
    assert_eq!(r.flops_pr, 50.0);

    let chain = with_random_tensors(
        manifest_from(json!({"input_shape": [3, 6, 6], "layers": [
            conv_json("c1", "input", 3, 8, 3, true),
            conv_json("c2", "c1", 8, 8, 3, true),
            conv_json("c3", "c2", 8, 4, 3, false)]})),
        0,
    );
    let plan = plan_for(&chain, 0.5, Strategy::LeastImportant, 0);
    let r = evaluate_plan_costs(&chain.manifest, &plan).unwrap();
    let (b, p) = (r.baseline.layer("c2").unwrap(), r.pruned.layer("c2").unwrap());
    assert_eq!(infoprune::costs::pruning_ratio(b.flops, p.flops), 75.0);
    // c1 loses outputs only, c3 loses inputs only
    assert_eq!(r.pruned.layer("c1").unwrap().flops * 2, r.baseline.layer("c1").unwrap().flops);
    assert_eq!(r.pruned.layer("c3").unwrap().flops * 2, r.baseline.layer("c3").unwrap().flops);
    assert_eq!(r.pruned.total_flops, r.pruned.layers.iter().map(|l| l.flops).sum::<u64>());
}

#[test]
fn masking_a_whole_layer_silences_it_downstream() {
    let m = manifest_from(json!({
        "input_shape": [2, 5, 5],
        "layers": [conv_json("a", "input", 2, 3, 3, true),
                   {"id": "r", "kind": "relu", "inputs": ["a"]},
                   conv_json("b", "r", 3, 2, 3, false)]
    }));
    let model = with_random_tensors(m, 4);
    let x = random_inputs(&model.manifest, 1, 1).remove(0);
    let mut mask = ChannelMask::default();
    mask.layers.insert("a".into(), vec![false; 3]);
    let y = forward(&model, &x, Some(&mask)).unwrap();
    let bias = &model.tensor("b.b").data;
    for (c, plane) in y.data.chunks(25).enumerate() {
        assert!(plane.iter().all(|&v| v == bias[c]));
    }
}

#[test]
fn conv_output_is_additive_in_input_channels() {
    let m = manifest_from(json!({
        "input_shape": [4, 6, 6],
        "layers": [conv_json("a", "input", 4, 3, 3, false)]
    }));
    let mut model = with_random_tensors(m, 8);
    model.tensors.get_mut("a.b").unwrap().data.fill(0.0);
    let x = random_inputs(&model.manifest, 1, 2).remove(0);
    let only = |chans: &[usize]| {
        let mut d = x.data.clone();
        for c in 0..4 {
            if !chans.contains(&c) {
                d[c * 36..(c + 1) * 36].fill(0.0);
            }
        }
        forward(&model, &Activation::spatial(4, 6, 6, d).unwrap(), None).unwrap()
    };
    let full = only(&[0, 1, 2, 3]);
    let kept = only(&[0, 2]);
    let dropped = only(&[1, 3]);
    for i in 0..full.data.len() {
        assert!((full.data[i] - dropped.data[i] - kept.data[i]).abs() <= 1e-5);
    }
}

#[test]
fn forward_is_deterministic() {
    let model = zoo::random_residual(2).unwrap();
    let xs = random_inputs(&model.manifest, 3, 9);
    for x in &xs {
        let a = forward_trace(&model, x, None).unwrap();
        let b = forward_trace(&model, x, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn feature_map_capture() {
    use infoprune::diagnostics::capture_feature_maps;
    let m = manifest_from(json!({
        "input_shape": [2, 4, 4],
        "layers": [conv_json("a", "input", 2, 3, 3, false)]
    }));
    let mut model = with_random_tensors(m, 0);
    model.tensors.get_mut("a.w").unwrap().data.fill(0.5);
    let constant = vec![Activation::spatial(2, 4, 4, vec![1.0; 32]).unwrap(); 3];
    let maps = capture_feature_maps(&model, &constant, "a").unwrap();
    assert_eq!(maps.len(), 3);
    // border pixels see fewer taps, so check interior ones
    for m in &maps {
        for s in 0..3 {
            let v = m.map(s);
            assert_eq!(v[5], v[6]);
            assert_eq!(v[5], v[10]);
        }
    }
    let err = capture_feature_maps(&model, &constant[..1], "a").unwrap_err();
    assert!(err.to_string().contains("s ≥ 2 required"), "{err}");
    assert!(matches!(capture_feature_maps(&model, &constant, "nope").unwrap_err(), Error::UnknownLayer(_)));

    let toy = zoo::toy_chain(0).unwrap();
    let xs = random_inputs(&toy.manifest, 8, 0);
    let maps = capture_feature_maps(&toy, &xs, "conv2").unwrap();
    assert_eq!(maps.len(), 4);
    assert!(maps.iter().all(|m| (m.samples, m.height, m.width) == (8, 8, 8) && m.values.len() == 8 * 64));
}

fn least_kept(scores: &[f64], rate: f64) -> BTreeSet<usize> {
    select_filters(scores, keep_count(rate, scores.len()).unwrap(), Strategy::LeastImportant, 0, 0)
        .into_iter()
        .collect()
}

proptest! {
    #[test]
    fn higher_rates_keep_nested_subsets(scores in prop::collection::vec(0.0f64..1.0, 1..64), p in 0.0f64..0.95, dp in 0.0f64..0.5) {
        let q = (p + dp).min(0.99);
        prop_assert!(least_kept(&scores, q).is_subset(&least_kept(&scores, p)));
    }

    #[test]
    fn least_and_most_are_dual(mut scores in prop::collection::vec(0.0f64..1.0, 2..40), r in 1usize..40) {
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        let n = scores.len();
        prop_assume!(n >= 2);
        let r = r % n;
        prop_assume!(r >= 1);
        // reorder deterministically so indices are not sorted by score
        let shuffled: Vec<f64> = (0..n).map(|i| scores[(i * 7 + 3) % n]).collect();
        prop_assume!((0..n).map(|i| (i * 7 + 3) % n).collect::<BTreeSet<_>>().len() == n);
        let kept_least: BTreeSet<usize> = select_filters(&shuffled, n - r, Strategy::LeastImportant, 0, 0).into_iter().collect();
        let removed: BTreeSet<usize> = (0..n).filter(|i| !kept_least.contains(i)).collect();
        let kept_most: BTreeSet<usize> = select_filters(&shuffled, r, Strategy::MostImportant, 0, 0).into_iter().collect();
        prop_assert_eq!(removed, kept_most);
    }

    #[test]
    fn random_plans_keep_groups_coherent(seed in 0u64..200, rate in 0.0f64..0.9) {
        let model = zoo::random_residual(seed).unwrap();
        let plan = plan_for(&model, rate, Strategy::Random, seed);
        for g in &model.manifest.coupling_groups {
            let first = &plan.layer(&g.layer_ids[0]).unwrap().kept_out_indices;
            for id in &g.layer_ids {
                prop_assert_eq!(&plan.layer(id).unwrap().kept_out_indices, first);
            }
        }
        prop_assert_eq!(plan_for(&model, rate, Strategy::Random, seed), plan);
    }
}

#[test]
fn score_kinds_are_recorded() {
    let model = zoo::toy_chain(3).unwrap();
    let scores = score_model(&model, &ScoringConfig::default()).unwrap();
    assert_eq!(scores.layer("fc").unwrap().kind, LayerKind::Linear);
    assert_eq!(scores.layer("conv1").unwrap().kind, LayerKind::Conv2d);
}
