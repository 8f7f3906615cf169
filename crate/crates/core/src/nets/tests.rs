use super::*;
use crate::rng::named_rng;

fn panel(w: usize, f: usize, seed: u64) -> Tensor {
    Tensor::randn(&[w, f], &mut named_rng(seed, "panel"))
}

fn model(config: NetConfig, w: usize, f: usize) -> ModelParams {
    let net = Net::new(config, w, f).unwrap();
    ModelParams::init(net, &mut named_rng(1, "init")).unwrap()
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let f = x.shape()[1];
    let mut data = Vec::with_capacity(x.numel());
    for &r in perm {
        data.extend_from_slice(&x.data()[r * f..(r + 1) * f]);
    }
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

#[test]
fn tep_shapes() {
    let m = model(NetConfig::Tep(TepConfig::default()), 12, 20);
    let (rep, logits) = tep_forward(&panel(12, 20, 0), &m, Mode::Eval).unwrap();
    assert_eq!(rep.shape(), &[12, 72]);
    assert_eq!(logits.shape(), &[6]);
}

#[test]
fn tep_rejects_wrong_feature_count() {
    let m = model(NetConfig::Tep(TepConfig::default()), 12, 20);
    assert!(matches!(tep_forward(&panel(12, 19, 0), &m, Mode::Eval), Err(Error::Shape { .. })));
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut m = model(NetConfig::Tep(TepConfig { model_size: 16, ..TepConfig::default() }), 8, 5);
    for name in ["head.w", "head.b"] {
        m.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let (_, logits) = tep_forward(&panel(8, 5, 3), &m, Mode::Eval).unwrap();
    assert_eq!(logits.data(), &[0.0; 6]);
}

#[test]
fn tep_permutation_invariance_without_position() {
    let cfg = TepConfig { model_size: 16, positional_encoding: false, conv_kernel: 1, ..TepConfig::default() };
    let m = model(NetConfig::Tep(cfg), 7, 4);
    let x = panel(7, 4, 5);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let (_, a) = tep_forward(&x, &m, Mode::Eval).unwrap();
    let (_, b) = tep_forward(&permute_rows(&x, &perm), &m, Mode::Eval).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12, "{u} vs {v}");
    }
}

#[test]
fn tep_position_breaks_permutation_invariance() {
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let x = panel(7, 4, 5);
    let configs = [
        TepConfig { model_size: 16, positional_encoding: true, conv_kernel: 1, ..TepConfig::default() },
        TepConfig { model_size: 16, positional_encoding: false, conv_kernel: 3, ..TepConfig::default() },
    ];
    for cfg in configs {
        let m = model(NetConfig::Tep(cfg), 7, 4);
        let (_, a) = tep_forward(&x, &m, Mode::Eval).unwrap();
        let (_, b) = tep_forward(&permute_rows(&x, &perm), &m, Mode::Eval).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).sum();
        assert!(diff > 1e-9);
    }
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
    let m = model(NetConfig::Tep(TepConfig { model_size: 16, dropout: 0.5, ..TepConfig::default() }), 6, 3);
    let x = panel(6, 3, 2);
    let a = tep_forward(&x, &m, Mode::Eval).unwrap();
    let b = tep_forward(&x, &m, Mode::Eval).unwrap();
    assert_eq!(a.1, b.1);
    let c = tep_forward(&x, &m, Mode::Train(&mut named_rng(0, "dropout"))).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn heads_preset_and_validation() {
    let c = TepConfig::heads_from_layers(72, 2);
    assert_eq!(c.heads, 36);
    assert!(c.validate().is_ok());
    assert!(TepConfig { heads: 5, ..TepConfig::default() }.validate().is_err());
    assert!(TepConfig { conv_kernel: 2, ..TepConfig::default() }.validate().is_err());
    assert!(TepConfig { dropout: 1.0, ..TepConfig::default() }.validate().is_err());
}

#[test]
fn tcn_shapes() {
    let m = model(NetConfig::Tcn(TcnConfig::default()), 504, 3);
    let (rep, logits) = tcn_forward(&panel(504, 3, 0), &m, Mode::Eval).unwrap();
    assert_eq!(rep.shape(), &[504, 32]);
    assert_eq!(logits.shape(), &[6]);
}

#[test]
fn tcn_is_causal() {
    let cfg = TcnConfig { filters: 8, kernel_size: 3, levels: 2, dropout: 0.0, ..TcnConfig::default() };
    let m = model(NetConfig::Tcn(cfg), 20, 2);
    let x = panel(20, 2, 9);
    let (base, _) = tcn_forward(&x, &m, Mode::Eval).unwrap();
    for t in [0, 7, 19] {
        let mut y = x.clone();
        y.data_mut()[t * 2] += 1.0;
        let (rep, _) = tcn_forward(&y, &m, Mode::Eval).unwrap();
        for s in 0..t {
            for c in 0..8 {
                assert_eq!(rep.get(&[s, c]), base.get(&[s, c]), "step {s} moved after perturbing {t}");
            }
        }
    }
}

#[test]
fn tcn_receptive_field_arithmetic() {
    let c = TcnConfig { kernel_size: 3, levels: 3, ..TcnConfig::default() };
    assert_eq!(c.receptive_field(), 29);
}

#[test]
fn lstm_shapes() {
    let m = model(NetConfig::Lstm(LstmConfig { hidden: 16, layers: 1, dropout: 0.0 }), 12, 20);
    let (rep, logits) = baseline_forward(&panel(12, 20, 0), &m, Mode::Eval).unwrap();
    assert_eq!(rep.shape(), &[12, 16]);
    assert_eq!(logits.shape(), &[6]);
}

#[test]
fn nn_parameter_count() {
    let m = model(NetConfig::Nn(NnConfig { hidden1: 100, hidden2: 30, dropout: 0.0 }), 12, 20);
    assert_eq!(m.params.numel(), 27_316);
}

#[test]
fn zero_logistic_gives_half() {
    let mut m = model(NetConfig::Logistic, 12, 20);
    m.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let (rep, logits) = baseline_forward(&panel(12, 20, 1), &m, Mode::Eval).unwrap();
    assert_eq!(rep.shape(), &[1, 240]);
    assert_eq!(logits.data(), &[0.0; 6]);
    assert!(logits.data().iter().all(|&z| 1.0 / (1.0 + (-z).exp()) == 0.5));
}

#[test]
fn wrappers_check_model_kind() {
    let m = model(NetConfig::Logistic, 4, 2);
    assert!(tep_forward(&panel(4, 2, 0), &m, Mode::Eval).is_err());
    assert!(tcn_forward(&panel(4, 2, 0), &m, Mode::Eval).is_err());
}

#[test]
fn config_serde_roundtrip() {
    let c = NetConfig::Tep(TepConfig::default());
    let s = serde_json::to_string(&c).unwrap();
    assert!(s.contains("\"kind\":\"tep\""));
    assert_eq!(serde_json::from_str::<NetConfig>(&s).unwrap(), c);
}
