//! Training loop, checkpoint resume and the command-line harness.

use std::path::Path;
use std::process::Command;

use cfpnet::config::{KeyValues, NetworkConfig, PyramidVariant, TrainConfig};
use cfpnet::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use cfpnet::data::{generate_sample, SyntheticSpec};
use cfpnet::nn::Mode;
use cfpnet::objective;
use cfpnet::train::{from_checkpoint, stream_sample, to_checkpoint, train, TrainState};
use cfpnet::{Graph, Network};

fn small() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        block_counts: [1, 1, 1],
        stage_channels: [4, 8, 8],
        branch_channels: 4,
        pyramid_hidden: 8,
        fusion_channels: 4,
        matcher_channels: [4, 4, 4, 4],
        d_max: 16,
        ..NetworkConfig::default()
    }
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        seed: 21,
        ..TrainConfig::default()
    }
}

fn run(net: &Network, cfg: &TrainConfig, state: &mut TrainState) -> Vec<f32> {
    let d_max = net.config().d_max;
    train(net, cfg, state, |i| stream_sample(cfg, d_max, i), |_, _| Ok(())).unwrap()
}

#[test]
fn training_is_deterministic() {
    let net = Network::new(small()).unwrap();
    let cfg = train_cfg(3);
    let mut a = TrainState::new(&net, &cfg);
    let mut b = TrainState::new(&net, &cfg);
    let la = run(&net, &cfg, &mut a);
    let lb = run(&net, &cfg, &mut b);
    assert_eq!(la.len(), 3);
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a, b);
    assert_ne!(a.model, TrainState::new(&net, &cfg).model);
    let bytes = |s: &TrainState| encode_checkpoint(&to_checkpoint(&net, &cfg, s)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let net = Network::new(small()).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..train_cfg(2)
    };
    let mut state = TrainState::new(&net, &cfg);
    let before = state.model.params.clone();
    let losses = run(&net, &cfg, &mut state);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert_eq!(state.model.params, before);
    assert_eq!(state.step, 2);
}

#[test]
fn empty_stages_leave_stem_pyramid_and_matcher() {
    let cfg = NetworkConfig {
        block_counts: [0, 0, 0],
        ..small()
    };
    let net = Network::new(cfg).unwrap();
    let s = net.summary();
    assert_eq!(s.main_path_convs, 1);
    let lfe: Vec<_> = net.registry().params().iter().filter(|p| p.name.starts_with("lfe.")).map(|p| p.name.as_str()).collect();
    assert!(lfe.iter().all(|n| n.starts_with("lfe.conv0")), "{lfe:?}");
    assert!(s.total() < Network::new(small()).unwrap().summary().total());
}

fn median(v: &[f32]) -> f32 {
    let mut v = v.to_vec();
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

#[test]
fn overfit_loss_does_not_rise_between_windows() {
    let net = Network::new(NetworkConfig::desk()).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        learning_rate: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let sample = generate_sample(&SyntheticSpec::random(64, 32, 16, 1)).unwrap();
    let mut state = TrainState::new(&net, &cfg);
    let losses = train(&net, &cfg, &mut state, |_| Ok(sample.clone()), |_, _| Ok(())).unwrap();
    let medians: Vec<f32> = losses[50..].chunks(50).map(median).collect();
    for w in medians.windows(2) {
        assert!(w[1] <= w[0], "window medians {medians:?}");
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let net = Network::new(small()).unwrap();
    let cfg = train_cfg(4);
    let mut straight = TrainState::new(&net, &cfg);
    let all = run(&net, &cfg, &mut straight);

    let half = TrainConfig { steps: 2, ..cfg.clone() };
    let mut first = TrainState::new(&net, &half);
    let head = run(&net, &half, &mut first);
    let bytes = encode_checkpoint(&to_checkpoint(&net, &cfg, &first)).unwrap();
    let (net2, cfg2, mut resumed) = from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(net2.config(), net.config());
    assert_eq!(cfg2, cfg);
    assert_eq!(resumed, first);
    let tail = run(&net2, &cfg2, &mut resumed);
    assert_eq!([head, tail].concat(), all);
    assert_eq!(resumed, straight);
}

#[test]
fn every_counted_parameter_receives_a_gradient() {
    for variant in ["cfspp", "spp", "aspp", "plain_lfe", "plain_3d"] {
        let cfg = NetworkConfig {
            pyramid_variant: variant.parse::<PyramidVariant>().unwrap(),
            ..small()
        };
        let net = Network::new(cfg).unwrap();
        let state = net.init::<f32>(2);
        let sample = stream_sample(&train_cfg(1), 16, 0).unwrap();
        let (left, right) = sample.batch::<f32>().unwrap();
        let gt = sample.gt.clone().reshape(vec![1, sample.height(), sample.width()]).unwrap();
        let mut g = Graph::new();
        let mut ctx = net.bind(&mut g, &state, Mode::Train, true);
        let pred = net.forward(&mut ctx, &left, &right).unwrap();
        let vars = ctx.param_vars().to_vec();
        let loss = objective::loss(&mut g, pred, &gt, &sample.training_mask(16)).unwrap();
        let grads = g.backward(loss).unwrap();
        // A tensor behind dead ReLUs may get an all-zero gradient, but it
        // must still be reached.
        let mut reached = 0;
        let mut live = 0;
        for (i, (v, p)) in vars.iter().zip(net.registry().params()).enumerate() {
            let gr = grads.get(*v).unwrap_or_else(|| panic!("{variant}: no gradient for {}", p.name));
            assert_eq!(gr.shape(), state.params[i].shape(), "{}", p.name);
            reached += gr.numel();
            live += usize::from(gr.data().iter().any(|&x| x != 0.0));
        }
        assert_eq!(reached, net.summary().total(), "{variant}");
        assert!(live * 10 >= vars.len() * 9, "{variant}: {live} of {} tensors moved", vars.len());
    }
}

fn cli(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cfpnet")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.success(), text)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_generates_evaluates_trains_and_infers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (ok, text) = cli(&["gen-data", "--out", path(&data), "--count", "1", "--seed", "3"]);
    assert!(ok, "{text}");
    let sample = data.join("0000");
    let pfm = sample.join("disp.pfm");
    let png = sample.join("disp.png");

    let (ok, text) = cli(&["eval", "--pred", path(&pfm), "--gt", path(&pfm)]);
    assert!(ok && text.contains("epe = 0\n"), "{text}");
    // KITTI quantization moves each value by at most half a step.
    let (ok, text) = cli(&["eval", "--pred", path(&pfm), "--gt", path(&png)]);
    assert!(ok && text.contains("bad_1 = 0\n"), "{text}");
    let (ok, _) = cli(&["eval", "--pred", path(&pfm), "--gt", path(&sample.join("left.png"))]);
    assert!(!ok);

    let mut kv = KeyValues::default();
    small().write_into(&mut kv);
    TrainConfig {
        steps: 2,
        checkpoint_every: 1,
        log_every: 1,
        ..TrainConfig::default()
    }
    .write_into(&mut kv);
    let config = dir.path().join("small.cfg");
    std::fs::write(&config, kv.to_text()).unwrap();
    let (ok, text) = cli(&["summary", "--config", path(&config)]);
    let total = Network::new(small()).unwrap().summary().total();
    assert!(ok && text.contains(&format!("total = {total}\n")), "{text}");

    let out = dir.path().join("run");
    let (ok, text) = cli(&["train", "--config", path(&config), "--out", path(&out)]);
    assert!(ok, "{text}");
    let log = std::fs::read_to_string(out.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(out.join("step_000001.ckpt").exists() && out.join("final.ckpt").exists());

    let pred = dir.path().join("pred.pfm");
    let (ok, text) = cli(&[
        "infer",
        "--checkpoint",
        path(&out.join("final.ckpt")),
        "--left",
        path(&sample.join("left.png")),
        "--right",
        path(&sample.join("right.png")),
        "--out",
        path(&pred),
    ]);
    assert!(ok, "{text}");
    assert!(pred.with_extension("png").exists());
    let (ok, text) = cli(&["eval", "--pred", path(&pred), "--gt", path(&pfm)]);
    assert!(ok && text.contains("epe = "), "{text}");
}

#[test]
fn cli_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "d_max = 16\nlearning_rat = 0.001\n").unwrap();
    let (ok, text) = cli(&["summary", "--config", path(&config)]);
    assert!(!ok && text.contains("learning_rat"), "{text}");
}

#[test]
fn cli_gradcheck_passes_on_a_sample_of_elements() {
    let (ok, text) = cli(&["gradcheck", "--max-elements", "2"]);
    assert!(ok, "{text}");
    assert!(!text.contains("FAIL"), "{text}");
    assert!(text.contains("PASS network batchnorm=true"), "{text}");
}
