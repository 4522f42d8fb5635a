//! Whole-network properties on the tiny preset.

use std::sync::Arc;

use mscloudcam::config::ModelConfig;
use mscloudcam::decoder::{supervised_loss, LossWeights};
use mscloudcam::model::{argmax_classes, load_checkpoint, save_checkpoint, Checkpoint, MsCloudCam};
use mscloudcam::numerics::{Graph, Tensor};
use mscloudcam::params::ParamStore;
use mscloudcam::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> MsCloudCam {
    let mut c = ModelConfig::tiny(13);
    c.seed = seed;
    MsCloudCam::new(&c).unwrap()
}

fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 13, h, w], |_| rng.gen_range(0.0..2.0))
}

#[test]
fn intermediate_shapes_follow_the_input() {
    let net = tiny(0);
    let params = net.init_params::<f64>();
    for (h, w) in [(32, 32), (36, 40), (45, 33)] {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let x = g.constant(image(2, h, w, 1));
        let t = net.forward_trace(&mut g, &p, x).unwrap();
        let sizes = net.encoder.level_sizes(h, w);
        let ch = net.config.encoder.channels();
        for (i, v) in t.pyramid.levels.iter().enumerate() {
            assert_eq!(g.shape(*v), &[2, ch[i], sizes[i].0, sizes[i].1]);
        }
        let (h3, w3) = sizes[2];
        let q = net.config.query_channels();
        assert_eq!(g.shape(t.x_cat), &[2, q, h3, w3]);
        assert_eq!(g.shape(t.fused), &[2, q, h3, w3]);
        assert_eq!(g.shape(t.z_prime), g.shape(t.z));
        for head in [t.outputs.logits, t.outputs.aux1, t.outputs.aux2] {
            assert_eq!(g.shape(head), &[2, 4, h, w]);
        }
    }
}

#[test]
fn too_small_and_wrong_band_inputs_are_rejected() {
    let net = tiny(0);
    let params = net.init_params::<f64>();
    let err = net
        .predict_logits(&params, image(1, 24, 40, 0))
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eleven = Tensor::from_fn(&[1, 11, 32, 32], |_| rng.gen_range(0.0..1.0));
    assert!(net.predict_logits(&params, eleven).is_err());
}

#[test]
fn batch_items_do_not_interact() {
    let net = tiny(3);
    let params = net.init_params::<f64>();
    let batch = image(3, 36, 32, 7);
    let joint = net.predict_logits(&params, batch.clone()).unwrap();
    for i in 0..3 {
        let single = net
            .predict_logits(&params, batch.batch_item(i).unwrap())
            .unwrap();
        let diff = joint.batch_item(i).unwrap().max_abs_diff(&single);
        assert!(diff < 1e-10, "item {i}: {diff}");
    }
}

#[test]
fn permuting_the_batch_permutes_the_pyramid() {
    let net = tiny(4);
    let params = net.init_params::<f64>();
    let batch = image(3, 32, 40, 8);
    let order = [2, 0, 1];
    let permuted = Tensor::stack_batch(&order.map(|i| batch.batch_item(i).unwrap())).unwrap();
    let levels = |x: Tensor<f64>| {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let x = g.constant(x);
        let pyr = net.encoder.forward(&mut g, &p, x).unwrap();
        pyr.levels.map(|v| g.value(v).clone())
    };
    let (a, b) = (levels(batch), levels(permuted));
    for (la, lb) in a.iter().zip(&b) {
        for (j, &i) in order.iter().enumerate() {
            assert!(
                la.batch_item(i)
                    .unwrap()
                    .max_abs_diff(&lb.batch_item(j).unwrap())
                    < 1e-10
            );
        }
    }
}

#[test]
fn same_seed_same_network() {
    let a = tiny(11);
    let b = tiny(11);
    let pa = a.init_params::<f32>();
    assert_eq!(pa.values(), b.init_params::<f32>().values());
    assert_ne!(pa.values(), tiny(12).init_params::<f32>().values());
    let x = image(1, 32, 32, 2).cast::<f32>();
    let la = a.predict_logits(&pa, x.clone()).unwrap();
    let lb = b.predict_logits(&pa, x).unwrap();
    assert_eq!(la.data(), lb.data());
}

#[test]
fn every_parameter_receives_a_gradient() {
    let net = tiny(5);
    let params = net.init_params::<f64>();
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(image(2, 32, 32, 4));
    let out = net.forward(&mut g, &p, x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<u8> = (0..2 * 32 * 32).map(|_| rng.gen_range(0..4)).collect();
    let loss = supervised_loss(&mut g, &out, Arc::new(labels), &LossWeights::default()).unwrap();
    g.backward(loss.total).unwrap();
    for (i, grad) in params.collect_grads(&g, &p).iter().enumerate() {
        let grad = grad
            .as_ref()
            .unwrap_or_else(|| panic!("{} has no gradient", params.name(i)));
        assert!(grad.is_finite(), "{}", params.name(i));
        assert!(
            grad.data().iter().any(|v| *v != 0.0),
            "{} gradient is all zero",
            params.name(i)
        );
    }
}

#[test]
fn argmax_breaks_ties_toward_the_lowest_class() {
    // pixel 0: all tied; pixel 1: thick and shadow tied; pixel 2: thin wins
    let logits = Tensor::new(
        &[1, 4, 1, 3],
        vec![
            0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 3.0, 0.0, 2.0, 0.0f64,
        ],
    )
    .unwrap();
    assert_eq!(argmax_classes(&logits).unwrap(), vec![0, 1, 2]);

    let mut thin = vec![0.0f64; 4 * 6];
    thin[2 * 6..3 * 6].fill(1.0);
    let t = Tensor::new(&[1, 4, 2, 3], thin).unwrap();
    assert_eq!(argmax_classes(&t).unwrap(), vec![2; 6]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = tiny(1);
    let mut params = net.init_params::<f32>();
    params.value_mut(0).data_mut()[0] = f32::from_bits(0x3f80_0001);
    let ckpt = Checkpoint::capture(&net.config, &params, 17, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.msck");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let restored: ParamStore<f32> = back.restore(&net).unwrap();
    for (a, b) in params.values().iter().zip(restored.values()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn checkpoint_corruption_and_mismatch_are_named() {
    let net = tiny(1);
    let ckpt = Checkpoint::capture(&net.config, &net.init_params(), 0, None);
    let bytes = ckpt.to_bytes();
    let path = std::path::Path::new("x.msck");

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let err = Checkpoint::from_bytes(&flipped, path).unwrap_err();
    assert!(
        matches!(err, Error::Checkpoint(_)) && err.to_string().contains("checksum"),
        "{err}"
    );
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9], path).is_err());

    let mut other = ModelConfig::tiny(13);
    other.encoder.embed_dim = 8;
    let err = ckpt.restore(&MsCloudCam::new(&other).unwrap()).unwrap_err();
    assert!(err.to_string().contains("embed_dim"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn argmax_matches_a_max_scan(values in proptest::collection::vec(-3i8..3, 4 * 5)) {
        let logits = Tensor::from_fn(&[1, 4, 1, 5], |i| values[i] as f64);
        let got = argmax_classes(&logits).unwrap();
        for (p, &c) in got.iter().enumerate() {
            let col: Vec<i8> = (0..4).map(|k| values[k * 5 + p]).collect();
            let best = *col.iter().max().unwrap();
            prop_assert_eq!(c as usize, col.iter().position(|&v| v == best).unwrap());
        }
    }
}
