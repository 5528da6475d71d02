use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Parameterized;
use crate::volume::UnitSpec;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
}

fn spec(arch: Architecture) -> ModelSpec {
    let mut s = ModelSpec {
        architecture: arch,
        ..Default::default()
    };
    match arch {
        Architecture::FilmUnet => {
            s.film_metadata_key = Some("contrast".into());
            s.film_input_dim = 3;
        }
        Architecture::HemisUnet => {
            s.in_channels = 2;
            s.n_modalities = 2;
        }
        _ => {}
    }
    s
}

const ALL: [Architecture; 5] = [
    Architecture::Unet2d,
    Architecture::Unet3d,
    Architecture::FilmUnet,
    Architecture::AttentionUnet,
    Architecture::HemisUnet,
];

#[test]
fn parameter_count_matches_closed_form() {
    // Two 3×3 convs with bias and two affine norms per block; transposed
    // 2×2 up-convs with bias; 1×1 head.
    let k = 9usize;
    let block = |ci: usize, co: usize| k * ci * co + co + 2 * co + k * co * co + co + 2 * co;
    let (base, depth) = (8usize, 3usize);
    let c = |l: usize| base * 2usize.pow(l as u32);
    let mut want = 0;
    for l in 0..depth {
        want += block(if l == 0 { 1 } else { c(l - 1) }, c(l));
        want += c(l + 1) * c(l) * 4 + c(l);
        want += block(2 * c(l), c(l));
    }
    want += block(c(depth - 1), c(depth));
    want += c(0) + 1;
    let mut m = build_model(&spec(Architecture::Unet2d), 1).unwrap();
    assert_eq!(m.net.param_count(), want);
    assert_eq!(want, 121_385);
}

#[test]
fn shape_contract_and_sigmoid_range() {
    for arch in ALL {
        let mut s = spec(arch);
        s.depth = 2;
        let mut m = build_model(&s, 3).unwrap();
        let shape = if s.dims() == 2 { [1, s.in_channels, 1, 64, 64] } else { [1, s.in_channels, 8, 8, 8] };
        let x = Tensor::zeros(shape);
        let ctx = m.net.neutral_ctx(1);
        let y = m.net.forward(&x, &ctx, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y.spatial(), x.spatial(), "{arch:?}");
        assert_eq!(y.c(), 1);
        assert!(y.data.iter().all(|v| *v > 0.0 && *v < 1.0));
        let bad = if s.dims() == 2 { [1, s.in_channels, 1, 6, 8] } else { [1, s.in_channels, 8, 6, 8] };
        assert!(m.net.forward(&Tensor::zeros(bad), &ctx, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

#[test]
fn two_forward_passes_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = build_model(&spec(Architecture::AttentionUnet), 2).unwrap();
    let x = rand_tensor(&mut rng, [2, 1, 1, 16, 16]);
    let ctx = m.net.neutral_ctx(2);
    let a = m.net.forward(&x, &ctx, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = m.net.forward(&x, &ctx, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn film_identity_equals_plain_unet() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut plain = build_model(&spec(Architecture::Unet2d), 11).unwrap();
    let mut fs = spec(Architecture::FilmUnet);
    fs.film_layers = vec![true; 7];
    let mut film = build_model(&fs, 12).unwrap();
    let copied = copy_params(&mut plain.net, &mut film.net);
    assert_eq!(copied, {
        let mut n = 0;
        plain.net.visit_params("", &mut |_, _| n += 1);
        n
    });
    film.net.force_identity_film = true;
    for _ in 0..3 {
        let x = rand_tensor(&mut rng, [1, 1, 1, 32, 32]);
        let a = plain.net.forward(&x, &plain.net.neutral_ctx(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = film.net.forward(&x, &film.net.neutral_ctx(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let diff = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "{diff}");
    }
}

#[test]
fn hemis_model_is_modality_permutation_invariant_only_through_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = build_model(&spec(Architecture::HemisUnet), 3).unwrap();
    let x = rand_tensor(&mut rng, [1, 2, 1, 16, 16]);
    let only_first = ForwardCtx {
        availability: Some(vec![vec![true, false]]),
        ..Default::default()
    };
    let y1 = m.net.forward(&x, &only_first, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // changing the missing modality's content must not change the output
    let mut x2 = x.clone();
    let v = x.voxels();
    x2.data[v..].iter_mut().for_each(|t| *t = 5.0);
    let y2 = m.net.forward(&x2, &only_first, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(y1, y2);
    let none = ForwardCtx {
        availability: Some(vec![vec![false, false]]),
        ..Default::default()
    };
    assert!(m.net.forward(&x, &none, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

/// Compares analytic parameter gradients to central differences of
/// `Σ w·y` on a tiny network.
fn check_network_gradients(arch: Architecture) {
    let mut s = spec(arch);
    s.depth = 1;
    s.base_filters = 2;
    s.dropout_rate = 0.0;
    if arch == Architecture::FilmUnet {
        s.film_layers = vec![true; 3];
    }
    let mut m = build_model(&s, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let shape = if s.dims() == 2 { [2, s.in_channels, 1, 4, 4] } else { [1, s.in_channels, 2, 2, 4] };
    let x = rand_tensor(&mut rng, shape);
    let mut ctx = m.net.neutral_ctx(shape[0]);
    if let Some(f) = ctx.film_input.as_mut() {
        f.iter_mut().for_each(|v| *v = rng.random::<f32>());
    }
    let w = rand_tensor(&mut rng, [shape[0], 1, shape[2], shape[3], shape[4]]);
    let objective = |net: &mut SegNet| -> f64 {
        let y = net.forward(&x, &ctx, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        y.data.iter().zip(&w.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    };
    m.net.zero_grad();
    m.net.forward_train(&x, &ctx, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.net.backward(w.clone());
    let mut grads: Vec<(String, Vec<f32>)> = Vec::new();
    m.net.visit_params("", &mut |n, p| grads.push((n.to_string(), p.grad.clone())));
    let h = 2e-3f32;
    let mut checked = 0;
    for (pi, (name, g)) in grads.iter().enumerate() {
        for k in [0, g.len() / 2, g.len() - 1] {
            let perturb = |net: &mut SegNet, delta: f32| {
                let mut idx = 0;
                net.visit_params("", &mut |_, p| {
                    if idx == pi {
                        p.value[k] += delta;
                    }
                    idx += 1;
                });
            };
            // a step can straddle a ReLU or max-pool kink, so the best of
            // several step sizes is compared
            let an = g[k] as f64;
            let err = [h, h / 2.0, h / 4.0, h / 8.0, h / 16.0]
                .map(|h| {
                    let mut plus = m.net.clone();
                    perturb(&mut plus, h);
                    let mut minus = m.net.clone();
                    perturb(&mut minus, -h);
                    let fd = (objective(&mut plus) - objective(&mut minus)) / (2.0 * h as f64);
                    (fd - an).abs() / (fd.abs().max(an.abs()) + 0.1)
                })
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            assert!(err <= 2e-2, "{arch:?} {name}[{k}]: relative error {err} (analytic {an})");
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn network_gradients_plain_and_3d() {
    check_network_gradients(Architecture::Unet2d);
    check_network_gradients(Architecture::Unet3d);
}

#[test]
fn network_gradients_film_attention_hemis() {
    check_network_gradients(Architecture::FilmUnet);
    check_network_gradients(Architecture::AttentionUnet);
    check_network_gradients(Architecture::HemisUnet);
}

#[test]
fn save_load_round_trip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&spec(Architecture::FilmUnet), 7).unwrap();
    let a = MetaValue::Text("T1w".into());
    m.vocabulary = Some(MetadataVocabulary::fit("contrast", [Some(&a)]));
    m.net.spec.film_input_dim = 2;
    let mut m = Model {
        net: SegNet::new(&m.net.spec, 7).unwrap(),
        ..m
    };
    m.save(dir.path()).unwrap();
    let mut back = Model::load(dir.path()).unwrap();
    assert_eq!(params_to_bytes(&mut back.net), params_to_bytes(&mut m.net));
    assert_eq!(back.vocabulary, m.vocabulary);
    std::fs::write(dir.path().join("format"), "segkit-model 99\n").unwrap();
    assert!(matches!(Model::load(dir.path()), Err(ModelError::UnknownVersion(_))));
}

use crate::meta::MetaValue;

fn constant_model(bias: f32) -> Model {
    let mut s = spec(Architecture::Unet2d);
    s.depth = 1;
    s.base_filters = 2;
    let mut m = build_model(&s, 1).unwrap();
    m.net.head.weight.value.iter_mut().for_each(|w| *w = 0.0);
    m.net.head.bias.as_mut().unwrap().value[0] = bias;
    m
}

#[test]
fn predict_volume_pads_odd_shapes_and_keeps_geometry() {
    let data = ndarray::Array4::from_shape_fn((1, 5, 7, 3), |(_, x, y, z)| (x + y + z) as f32);
    let vol = Volume::from_array(data, [1.0, 2.0, 1.5]).unwrap();
    let mut m = constant_model(3.0);
    let out = m
        .predict_volume(&vol, &UnitSpec::slices(2), &Default::default(), false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(out.shape3(), vol.shape3());
    assert_eq!(out.affine, vol.affine);
    let want = 1.0 / (1.0 + (-3.0f32).exp());
    assert!(out.data.iter().all(|v| (*v - want).abs() < 1e-6));
}

#[test]
fn cascade_degenerate_and_fallback_paths() {
    let data = ndarray::Array4::from_shape_fn((1, 8, 8, 4), |(_, x, y, _)| ((x * 7 + y * 3) % 5) as f32);
    let vol = Volume::from_array(data, [1.0, 1.0, 1.0]).unwrap();
    let mut seg = build_model(
        &ModelSpec {
            depth: 1,
            base_filters: 2,
            ..Default::default()
        },
        9,
    )
    .unwrap();
    let units = UnitSpec::slices(2);
    let meta = Default::default();
    let single = seg.predict_volume(&vol, &units, &meta, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let mut full = constant_model(50.0);
    let out = cascade_predict(&vol, &mut full, &units, &mut seg, &units, 2, &meta, 0.5).unwrap();
    assert_eq!(out.bbox.unwrap().min, [0, 0, 0]);
    assert_eq!(out.soft.data, single.data);

    let mut empty = constant_model(-50.0);
    let out = cascade_predict(&vol, &mut empty, &units, &mut seg, &units, 2, &meta, 0.5).unwrap();
    assert!(out.bbox.is_none());
    assert_eq!(out.mask.shape3(), vol.shape3());
    assert_eq!(out.soft.data, single.data);
}
