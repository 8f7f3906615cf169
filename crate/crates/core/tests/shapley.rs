use std::collections::BTreeMap;

use rand::Rng as _;
use tep_core::data::{generate_synthetic, Channel, Dataset, GenConfig, Split, Windows};
use tep_core::fusion::{fit, MultimodalSpec, Regime, RegimeSchedule, TrainConfig};
use tep_core::metrics::evaluate;
use tep_core::nets::{NetConfig, TepConfig};
use tep_core::rng::named_rng;
use tep_core::shapley::*;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

fn random_game(seed: u64) -> ShapleyGame {
    let mut rng = named_rng(seed, "game");
    let g = rng.random_range(1..=5);
    ShapleyGame::from_fn(names(g), |_| rng.random::<f64>()).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force(game: &ShapleyGame) -> Vec<f64> {
    let n = game.players();
    let perms = permutations(n);
    let mut v = vec![0.0; n];
    for p in &perms {
        let mut mask = 0u32;
        for &i in p {
            let before = game.score(mask).unwrap();
            mask |= 1 << i;
            v[i] += game.score(mask).unwrap() - before;
        }
    }
    v.iter().map(|x| x / perms.len() as f64).collect()
}

#[test]
fn matches_permutation_oracle_and_axioms() {
    for seed in 0..100 {
        let game = random_game(seed);
        let r = shapley_values(&game).unwrap();
        for (a, b) in r.values.iter().zip(brute_force(&game)) {
            assert!((a - b).abs() < 1e-12, "seed {seed}");
        }
        // Efficiency.
        let total: f64 = r.values.iter().sum();
        assert!((total - (game.score(game.full()).unwrap() - game.score(0).unwrap())).abs() < 1e-10);
        // Linearity.
        let other = random_game(seed + 1000);
        if other.players() == game.players() {
            let sum = ShapleyGame::from_fn(names(game.players()), |m| game.score(m).unwrap() + 2.0 * other.score(m).unwrap()).unwrap();
            let (rs, ro) = (shapley_values(&sum).unwrap(), shapley_values(&other).unwrap());
            for i in 0..game.players() {
                assert!((rs.values[i] - r.values[i] - 2.0 * ro.values[i]).abs() < 1e-12);
            }
        }
        // Dummy: add a player contributing nothing.
        let g = game.players();
        let dummy = ShapleyGame::from_fn(names(g + 1), |m| game.score(m & game.full()).unwrap()).unwrap();
        let rd = shapley_values(&dummy).unwrap();
        assert!(rd.values[g].abs() < 1e-12);
        // Symmetry: players 0 and 1 made interchangeable.
        if g >= 2 {
            let sym = ShapleyGame::from_fn(names(g), |m| {
                let (a, b) = (m & 1, m >> 1 & 1);
                let swapped = (m & !3) | (b) | (a << 1);
                game.score(m).unwrap() + game.score(swapped).unwrap()
            })
            .unwrap();
            let rs = shapley_values(&sym).unwrap();
            assert!((rs.values[0] - rs.values[1]).abs() < 1e-12);
        }
    }
}

#[test]
fn marginals_match_table_lookup() {
    let game = ShapleyGame::from_fn(names(3), |m| f64::from(m * m) / 49.0).unwrap();
    for p in 0..8u32 {
        for i in 0..3 {
            if p >> i & 1 == 0 {
                let direct = f64::from((p | 1 << i) * (p | 1 << i)) / 49.0 - f64::from(p * p) / 49.0;
                assert_eq!(marginal(&game, p, i).unwrap(), direct);
            }
        }
    }
}

fn tiny_net() -> NetConfig {
    NetConfig::Tep(TepConfig { model_size: 8, layers: 1, heads: 2, ff_size: Some(16), ..TepConfig::default() })
}

fn dataset(seed: u64, windows: Windows) -> Dataset {
    let cfg = GenConfig { firms: 120, observation_quarters: 6, pricing_days: 60, ..GenConfig::default() };
    Dataset::assemble(&generate_synthetic(&cfg, seed).unwrap().raw, windows).unwrap()
}

fn config(ds: &Dataset) -> ImportanceConfig {
    ImportanceConfig {
        hidden: 8,
        nets: ds.channels.iter().map(|&c| (c, tiny_net())).collect::<BTreeMap<_, _>>(),
        max_epochs: 2,
        train: TrainConfig::default(),
    }
}

#[test]
fn channel_importance_shares_prefixes_exactly() {
    let ds = dataset(1, Windows { quarters: 8, pricing_days: 40 });
    let cfg = config(&ds);
    let imp = channel_importance(&ds, &cfg, 3).unwrap();
    assert_eq!(imp.profiles.len(), 7);
    assert!(imp.profiles.iter().all(|p| (0.0..=1.0).contains(&p.score)));
    let total: f64 = imp.result.values.iter().sum();
    assert!((total - imp.result.grand).abs() < 1e-10);
    assert_eq!(imp.per_horizon.len(), 6);
    assert_eq!(imp.to_csv().lines().count(), 5);
    assert!(imp.bar_chart_svg().starts_with("<svg"));

    // A profile trained on its own reproduces the tree-trained score.
    let profile = [Channel::Market, Channel::Pricing];
    let split = Split::holdout(&ds, 3).unwrap();
    let spec = MultimodalSpec::for_dataset(&ds, cfg.hidden, &cfg.nets).unwrap();
    let schedule = RegimeSchedule::preset(Regime::R3, &profile, cfg.max_epochs).unwrap();
    let ck = fit(&ds, &split, spec, &schedule, &cfg.train, 3).unwrap();
    let direct = evaluate(&ck, &ds, &split.test).unwrap();
    let from_tree = imp.profiles.iter().find(|p| p.channels == profile).unwrap();
    assert_eq!(from_tree.report, direct);
}

#[test]
fn temporal_importance_layout() {
    let ds = dataset(2, Windows { quarters: 12, pricing_days: 260 });
    let ds = ds.without_channel(Channel::Market);
    let mut cfg = config(&ds);
    cfg.max_epochs = 1;
    let t = temporal_importance(&ds, &cfg, 1).unwrap();
    assert_eq!(t.rows.len(), 2);
    for r in &t.rows {
        assert_eq!(r.game.score(0).unwrap(), 0.0);
        let total: f64 = r.result.values.iter().sum();
        assert!((total - r.result.grand).abs() < 1e-10);
    }
    assert!(t.to_csv().starts_with("channel,Past year,Previous 2 years\nfundamental,"));
}

#[test]
fn temporal_groups_need_long_windows() {
    assert!(temporal_groups(Channel::Fundamental, 11).is_err());
    assert_eq!(temporal_groups(Channel::Fundamental, 12).unwrap(), [8..12, 0..8]);
    assert!(temporal_groups(Channel::Pricing, 252).is_err());
    assert_eq!(temporal_groups(Channel::Pricing, 504).unwrap(), [252..504, 0..252]);
    let ds = dataset(2, Windows { quarters: 8, pricing_days: 40 });
    assert!(temporal_importance(&ds, &config(&ds), 1).is_err());
}
