use std::collections::BTreeMap;

use tep_core::data::{generate_synthetic, Channel, Dataset, GenConfig, Split, Windows};
use tep_core::fusion::{fit, Checkpoint, MultimodalSpec, Regime, RegimeSchedule, TrainConfig};
use tep_core::interpret::*;
use tep_core::nets::{NetConfig, TcnConfig, TepConfig};

fn setup(net: NetConfig) -> (Dataset, Split, Checkpoint) {
    let cfg = GenConfig { firms: 80, observation_quarters: 4, pricing_days: 30, ..GenConfig::default() };
    let g = generate_synthetic(&cfg, 2).unwrap();
    let ds = Dataset::assemble(&g.raw, Windows { quarters: 12, pricing_days: 20 }).unwrap();
    let ds = ds.without_channel(Channel::Market).without_channel(Channel::Pricing);
    let split = Split::holdout(&ds, 2).unwrap();
    let spec = MultimodalSpec::for_dataset(&ds, 8, &BTreeMap::from([(Channel::Fundamental, net)])).unwrap();
    let schedule = RegimeSchedule::preset(Regime::R2, &ds.channels, 2).unwrap();
    let ck = fit(&ds, &split, spec, &schedule, &TrainConfig::default(), 2).unwrap();
    (ds, split, ck)
}

fn two_layer_tep() -> NetConfig {
    NetConfig::Tep(TepConfig { model_size: 8, layers: 2, heads: 4, ff_size: Some(16), ..TepConfig::default() })
}

#[test]
fn maps_are_row_stochastic_and_leave_predictions_alone() {
    let (ds, split, ck) = setup(two_layer_tep());
    let before = ck.predict(&ds, &split.test, false).unwrap();
    let set = extract_attention(&ck, &ds, &split.test, Channel::Fundamental, DEFAULT_GROUP_HORIZON).unwrap();
    let after = ck.predict(&ds, &split.test, false).unwrap();
    assert_eq!(before, after);
    for g in [Group::Defaulted, Group::NonDefaulted] {
        let maps: Vec<_> = set.group(g).collect();
        assert_eq!(maps.len(), 8);
        for m in maps {
            assert_eq!(m.size, 12);
            assert!(m.max_row_error() < 1e-9);
            assert!(m.weights.iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn single_observation_group_is_that_observation() {
    let (ds, split, ck) = setup(two_layer_tep());
    let i = split.test[0];
    let one = extract_attention(&ck, &ds, &[i], Channel::Fundamental, 5).unwrap();
    let pair = extract_attention(&ck, &ds, &[i, i], Channel::Fundamental, 5).unwrap();
    assert_eq!(one.maps.len(), 8);
    for (a, b) in one.maps.iter().zip(&pair.maps) {
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn csv_round_trip_and_layout() {
    let (ds, split, ck) = setup(two_layer_tep());
    let set = extract_attention(&ck, &ds, &split.test, Channel::Fundamental, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_heatmap(&set, dir.path()).unwrap();
    let csvs: Vec<_> = files.iter().filter(|p| p.extension().unwrap() == "csv").collect();
    assert_eq!(csvs.len(), set.maps.len());
    let text = std::fs::read_to_string(csvs[0]).unwrap();
    assert!(text.starts_with("out_pos,in_t-11,in_t-10,"));
    assert!(text.lines().next().unwrap().ends_with(",in_t-1,in_t"));
    for (m, path) in set.maps.iter().zip(&csvs) {
        let (size, data) = read_heatmap_csv(path).unwrap();
        assert_eq!(size, m.size);
        for (a, b) in data.iter().zip(&m.weights) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
    assert!(files.iter().any(|p| p.extension().unwrap() == "svg"));
}

#[test]
fn uniform_attention_gives_flat_heatmap() {
    let (ds, split, mut ck) = setup(two_layer_tep());
    for name in ck.params.names().cloned().collect::<Vec<_>>() {
        if name.contains(".attn.q.") || name.contains(".attn.k.") {
            ck.params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }
    let set = extract_attention(&ck, &ds, &split.test, Channel::Fundamental, 5).unwrap();
    for m in &set.maps {
        assert!(m.weights.iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-15));
    }
    let svg = heatmap_svg(&set, Group::NonDefaulted);
    let fills: std::collections::BTreeSet<&str> = svg.split("fill=\"").skip(1).map(|s| &s[..7]).collect();
    assert_eq!(fills.len(), 1);
}

#[test]
fn non_tep_models_are_rejected() {
    let (ds, split, ck) = setup(NetConfig::Tcn(TcnConfig { filters: 8, levels: 2, ..TcnConfig::default() }));
    assert!(extract_attention(&ck, &ds, &split.test, Channel::Fundamental, 5).is_err());
}
