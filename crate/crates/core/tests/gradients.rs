mod oracles;

use compresskit::conv::ConvSpec;
use compresskit::nn::{ArchTag, BatchNorm, Conv, Dense, Layer, Mode, Network};
use compresskit::Tensor;
use oracles::{layer_gradcheck, random_layer, rel_err, rng, spaced, LAYER_KINDS};

const EPS: f64 = 1e-5;
const MAX_REL: f64 = 1e-4;

#[test]
fn every_layer_kind_matches_central_differences() {
    for (ki, kind) in LAYER_KINDS.iter().enumerate() {
        for case in 0..20u64 {
            let seed = (ki as u64) << 32 | case;
            let mut r = rng(seed);
            let (layer, shape, mode) = random_layer(kind, &mut r);
            let x = spaced(&shape, &mut r);
            let err = layer_gradcheck(&layer, &x, mode, seed, EPS);
            assert!(err < MAX_REL, "{kind} case {case}: rel err {err:e}");
        }
    }
}

#[test]
fn eval_mode_batch_norm_is_checked_too() {
    for case in 0..20u64 {
        let mut r = rng(900 + case);
        let mut bn = BatchNorm::new(3);
        bn.running_mean = vec![0.1, -0.2, 0.3];
        bn.running_var = vec![0.5, 1.5, 2.0];
        let x = spaced(&[2, 3, 2, 2], &mut r);
        let err = layer_gradcheck(&Layer::BatchNorm(bn), &x, Mode::Eval, case, EPS);
        assert!(err < MAX_REL, "case {case}: {err:e}");
    }
}

/// Whole-network gradient of the mean cross-entropy against central
/// differences, with part of the first layer masked.
#[test]
fn network_gradients_respect_masks() {
    let conv = Conv::new(ConvSpec::new(1, 2, 3, 4, 4).with_padding(1)).unwrap();
    let layers = vec![
        Layer::Conv(conv),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        Layer::Flatten,
        Layer::Dense(Dense::new(8, 3)),
    ];
    let mut net = Network::new(ArchTag::Custom, &[1, 4, 4], layers).unwrap();
    net.initialize(&mut rng(7));
    if let Layer::Conv(c) = &mut net.layers[0] {
        let mask = c.weight.mask.as_mut().unwrap();
        for i in (0..18).step_by(3) {
            mask.prune(i);
        }
    }
    net.apply_masks();
    let x = spaced(&[3, 1, 4, 4], &mut rng(8));
    let labels = [0, 2, 1];
    let g = net.gradients(&x, &labels, Mode::Train, &mut rng(0)).unwrap();
    let loss = |n: &Network| n.gradients(&x, &labels, Mode::Train, &mut rng(0)).unwrap().loss;

    let n_params = net.params().len();
    for pi in 0..n_params {
        let masked: Vec<bool> = match &net.params()[pi].mask {
            Some(m) => m.as_slice().iter().map(|k| !k).collect(),
            None => vec![false; net.params()[pi].value.len()],
        };
        for (j, &dead) in masked.iter().enumerate() {
            if dead {
                assert_eq!(g.grads[pi].data()[j], 0.0);
                continue;
            }
            let (mut p, mut m) = (net.clone(), net.clone());
            p.params_mut()[pi].value.data_mut()[j] += EPS;
            m.params_mut()[pi].value.data_mut()[j] -= EPS;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * EPS);
            let err = rel_err(g.grads[pi].data()[j], numeric);
            assert!(err < MAX_REL, "param {pi}[{j}]: {err:e}");
        }
    }
}

#[test]
fn strip_regularisation_preserves_eval_outputs() {
    let mut net = Network::build(ArchTag::MiniMobilenet, &[3, 8, 8], 4, 1, 3).unwrap();
    // non-trivial running statistics
    let x = Tensor::from_fn(&[6, 3, 8, 8], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
    for _ in 0..3 {
        let pass = net.forward(&x, Mode::Train, &mut rng(1)).unwrap();
        net.update_running_stats(&pass.caches);
    }
    let stripped = net.strip_regularisation().unwrap();
    let a = net.predict(&x).unwrap();
    let b = stripped.predict(&x).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-10, "{}", a.max_abs_diff(&b));
    fn has_regularisation(layers: &[Layer]) -> bool {
        layers.iter().any(|l| match l {
            Layer::Residual(body) => has_regularisation(body),
            l => l.is_regularisation(),
        })
    }
    assert!(has_regularisation(&net.layers));
    assert!(!has_regularisation(&stripped.layers));
}
