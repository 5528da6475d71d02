use super::*;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vol(data: Array4<f32>, spacing: [f64; 3]) -> Volume {
    Volume::from_array(data, spacing).unwrap()
}

fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.random_range(-3.0..5.0))
}

fn blob(n: usize, depth: usize) -> Array4<f32> {
    let c = (n as f64 - 1.0) / 2.0;
    let cz = (depth as f64 - 1.0) / 2.0;
    Array4::from_shape_fn((1, n, n, depth), |(_, i, j, k)| {
        let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - cz).powi(2);
        (100.0 * (-r2 / (2.0 * (n as f64 / 7.0).powi(2))).exp()) as f32
    })
}

fn sample_of(image: Array4<f32>, label: Option<Array4<f32>>) -> Sample {
    Sample {
        image,
        label,
        spacing: [1.0; 3],
        affine: crate::volume::IDENTITY_AFFINE,
    }
}

#[test]
fn resample_shapes_and_constants() {
    let v = vol(random((1, 8, 8, 8), 1), [1.0; 3]);
    assert_eq!(resample(&v, [1.0; 3], 1).unwrap().data, v.data);
    let half = resample(&v, [2.0; 3], 1).unwrap();
    assert_eq!(half.shape3(), [4, 4, 4]);
    assert_eq!(half.affine[0][0], 2.0);
    let c = vol(Array4::from_elem((1, 7, 5, 3), 3.25), [1.0, 0.7, 2.0]);
    for order in 0..=2 {
        let r = resample(&c, [0.6, 1.3, 0.9], order).unwrap();
        assert!(r.data.iter().all(|x| (x - 3.25).abs() < 1e-4), "order {order}");
    }
    assert!(resample(&v, [0.0, 1.0, 1.0], 1).is_err());
}

#[test]
fn resample_interpolates_samples() {
    let v = vol(random((1, 9, 6, 1), 2), [1.0; 3]);
    for order in 0..=2u8 {
        let r = resample(&v, [0.5, 0.5, 1.0], order).unwrap();
        assert_eq!(r.shape3(), [18, 12, 1]);
        for i in 0..9 {
            for j in 0..6 {
                assert!((r.data[[0, 2 * i, 2 * j, 0]] - v.data[[0, i, j, 0]]).abs() < 1e-4, "order {order}");
            }
        }
    }
    // linear interpolation of a ramp is exact
    let ramp = vol(Array4::from_shape_fn((1, 10, 1, 1), |(_, i, _, _)| 2.0 * i as f32 + 1.0), [1.0; 3]);
    let r = resample(&ramp, [0.3, 1.0, 1.0], 1).unwrap();
    for (i, v) in r.data.iter().enumerate() {
        let x = (i as f64 * 0.3).min(9.0);
        assert!((*v as f64 - (2.0 * x + 1.0)).abs() < 1e-4);
    }
}

#[test]
fn crop_keeps_index_window_and_inverts() {
    let d = random((2, 8, 8, 8), 3);
    let v = vol(d.clone(), [1.0; 3]);
    let (same, _) = crop_or_pad(&v, [8, 8, 8], None).unwrap();
    assert_eq!(same.data, d);
    let (c, rec) = crop_or_pad(&v, [4, 4, 4], Some([4, 4, 4])).unwrap();
    for ((ch, i, j, k), x) in c.data.indexed_iter() {
        assert_eq!(*x, d[[ch, i + 2, j + 2, k + 2]]);
    }
    assert_eq!(c.affine[0][3], 2.0);
    let back = invert_records(&Sample::from_volume(&c, None), &[rec]).unwrap();
    assert_eq!(back.image.shape(), &[2, 8, 8, 8]);
    for ((ch, i, j, k), x) in back.image.indexed_iter() {
        let inside = (2..6).contains(&i) && (2..6).contains(&j) && (2..6).contains(&k);
        assert_eq!(*x, if inside { d[[ch, i, j, k]] } else { 0.0 });
    }
    assert_eq!(back.affine[0][3], 0.0);
    let (p, _) = crop_or_pad(&v, [10, 8, 8], None).unwrap();
    assert_eq!(p.data[[0, 0, 3, 3]], 0.0);
    assert_eq!(p.data[[0, 1, 3, 3]], d[[0, 0, 3, 3]]);
}

#[test]
fn zscore_properties() {
    let d = random((1, 6, 5, 4), 4);
    let v = vol(d.clone(), [1.0; 3]);
    let z = normalize_zscore(&v, false).unwrap();
    let n = z.data.len() as f64;
    let mean = z.data.iter().map(|x| *x as f64).sum::<f64>() / n;
    let std = (z.data.iter().map(|x| (*x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
    let again = normalize_zscore(&z, false).unwrap();
    assert!(again.data.iter().zip(z.data.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    let affine_map = vol(d.mapv(|x| 2.0 * x + 3.0), [1.0; 3]);
    let z2 = normalize_zscore(&affine_map, false).unwrap();
    assert!(z2.data.iter().zip(z.data.iter()).all(|(a, b)| (a - b).abs() < 1e-5));
    assert!(matches!(normalize_zscore(&vol(Array4::from_elem((1, 3, 3, 3), 2.0), [1.0; 3]), false), Err(TransformError::ConstantVolume(0))));
}

fn numpy_percentile(values: &[f32], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| *x as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor();
    v[lo as usize] + (h - lo) * (v[(lo as usize + 1).min(v.len() - 1)] - v[lo as usize])
}

#[test]
fn intensity_clip_and_equalize() {
    let mut d = random((1, 10, 10, 1), 5);
    assert_eq!(intensity_adjust(&vol(d.clone(), [1.0; 3]), (0.0, 100.0), false).unwrap().data, d);
    d[[0, 3, 3, 0]] = 1000.0;
    let flat: Vec<f32> = d.iter().copied().collect();
    let hi = numpy_percentile(&flat, 98.0);
    let lo = numpy_percentile(&flat, 1.0);
    let out = intensity_adjust(&vol(d.clone(), [1.0; 3]), (1.0, 98.0), false).unwrap();
    assert!((out.data[[0, 3, 3, 0]] as f64 - hi).abs() < 1e-4);
    assert!(out.data.iter().all(|x| (*x as f64) <= hi + 1e-4 && (*x as f64) >= lo - 1e-4));
    assert!(hi < 10.0);
    assert!(intensity_adjust(&vol(d.clone(), [1.0; 3]), (50.0, 50.0), false).is_err());

    let a = random((1, 64, 64, 4), 6);
    let b = random((1, 64, 64, 4), 7);
    let big = &a * &a.mapv(f32::abs) + &b;
    let vals: Vec<f64> = big.iter().map(|x| *x as f64).collect();
    let (mn, mx) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let mut hist = [0usize; 256];
    for v in &vals {
        hist[(((v - mn) / (mx - mn) * 256.0) as usize).min(255)] += 1;
    }
    let n = vals.len() as f64;
    let max_mass = *hist.iter().max().unwrap() as f64 / n;
    assert!(max_mass < 0.02);
    let eq = intensity_adjust(&vol(big, [1.0; 3]), (0.0, 100.0), true).unwrap();
    for t in 1..40 {
        let t = t as f64 / 40.0;
        let frac = eq.data.iter().filter(|x| (**x as f64) <= t).count() as f64 / n;
        assert!((frac - t).abs() <= max_mass + 1e-6, "{t}: {frac}");
    }
}

#[test]
fn affine_identity_double_rotation_and_round_trip() {
    let img = blob(24, 1);
    let s = sample_of(img.clone(), Some(img.mapv(|v| if v > 50.0 { 1.0 } else { 0.0 })));
    let (id, rec) = affine_augment(&s, [0.0; 2], [1.0; 2], [0.0; 2], 9, Scope::Both).unwrap();
    assert_eq!(id, s);
    assert!(rec.invertible);

    let r = random((1, 9, 7, 1), 7);
    let rs = sample_of(r.clone(), None);
    let (once, _) = affine_augment(&rs, [180.0; 2], [1.0; 2], [0.0; 2], 0, Scope::Both).unwrap();
    assert!((once.image[[0, 0, 0, 0]] - r[[0, 8, 6, 0]]).abs() < 1e-4);
    let (twice, _) = affine_augment(&once, [180.0; 2], [1.0; 2], [0.0; 2], 0, Scope::Both).unwrap();
    assert!(twice.image.iter().zip(r.iter()).all(|(a, b)| (a - b).abs() < 1e-4));

    for (seed, phantom) in [(1, blob(32, 1)), (2, blob(20, 20))] {
        let s = sample_of(phantom.clone(), None);
        let (aug, rec) = affine_augment(&s, [-20.0, 20.0], [0.9, 1.1], [-2.0, 2.0], seed, Scope::Both).unwrap();
        assert_ne!(aug.image, phantom);
        let back = invert_records(&aug, &[rec]).unwrap();
        let range = 100.0;
        let mae = back.image.iter().zip(phantom.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / phantom.len() as f64;
        assert!(mae <= 0.02 * range, "mae {mae}");
    }
}

#[test]
fn geometric_transforms_move_image_and_label_together() {
    let grid = Array4::from_shape_fn((1, 16, 12, 1), |(_, i, j, _)| (i * 12 + j) as f32 / 10.0);
    let s = sample_of(grid.clone(), Some(grid.clone()));
    let (a, _) = affine_augment(&s, [-30.0, 30.0], [0.8, 1.2], [-3.0, 3.0], 11, Scope::Both).unwrap();
    assert_eq!(a.image, a.label.unwrap());
    let (e, _) = elastic_augment(&s, 2.0, 3.0, 12, Scope::Both).unwrap();
    assert_eq!(e.image, e.label.unwrap());
}

fn components_2d(mask: &Array4<f32>) -> usize {
    let (_, h, w, _) = mask.dim();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || mask[[0, start / w, start % w, 0]] < 0.5 {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (i, j) = ((p / w) as i64, (p % w) as i64);
            for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (a, b) = (i + di, j + dj);
                if a < 0 || b < 0 || a >= h as i64 || b >= w as i64 {
                    continue;
                }
                let q = (a * w as i64 + b) as usize;
                if !seen[q] && mask[[0, a as usize, b as usize, 0]] >= 0.5 {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}

#[test]
fn elastic_properties() {
    let img = blob(32, 1);
    let label = img.mapv(|v| if v > 30.0 { 1.0 } else { 0.0 });
    let s = sample_of(img, Some(label.clone()));
    let (same, rec) = elastic_augment(&s, 0.0, 4.0, 3, Scope::Both).unwrap();
    assert_eq!(same, s);
    assert!(!rec.invertible);
    let (a, _) = elastic_augment(&s, 1.5, 4.0, 3, Scope::Both).unwrap();
    let (b, _) = elastic_augment(&s, 1.5, 4.0, 3, Scope::Both).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.image, s.image);
    for seed in 0..10 {
        let (e, _) = elastic_augment(&s, 1.5, 4.0, seed, Scope::Both).unwrap();
        assert_eq!(components_2d(e.label.as_ref().unwrap()), 1);
    }
    assert!(elastic_augment(&s, 1.0, 0.0, 1, Scope::Both).is_err());
}

#[test]
fn dilation_profile() {
    let mut label = Array4::<f32>::zeros((1, 21, 21, 1));
    label[[0, 10, 10, 0]] = 1.0;
    label[[0, 10, 11, 0]] = 1.0;
    assert_eq!(dilate_ground_truth(&label, [1.0; 3], 0.0).unwrap(), label);
    let soft = dilate_ground_truth(&label, [1.0; 3], 8.0).unwrap();
    assert!((soft[[0, 6, 10, 0]] - 0.5).abs() < 1e-6);
    assert!((soft[[0, 10, 15, 0]] - 0.5).abs() < 1e-6);
    for ((_, i, j, _), v) in soft.indexed_iter() {
        let d = ((i as f64 - 10.0).powi(2) + (j as f64 - 10.0).powi(2))
            .sqrt()
            .min(((i as f64 - 10.0).powi(2) + (j as f64 - 11.0).powi(2)).sqrt());
        let want = (1.0 - d / 8.0).max(0.0);
        assert!((*v as f64 - want).abs() < 1e-6);
        assert!((0.0..=1.0).contains(v));
    }
    assert_eq!(soft[[0, 10, 10, 0]], 1.0);
    let aniso = dilate_ground_truth(&label, [2.0, 1.0, 1.0], 8.0).unwrap();
    assert!((aniso[[0, 8, 10, 0]] - 0.5).abs() < 1e-6);
    assert!(dilate_ground_truth(&label, [1.0; 3], -1.0).is_err());
    assert!(dilate_ground_truth(&soft, [1.0; 3], 2.0).is_err());
}

fn spec(json: &str) -> TransformSpec {
    serde_json::from_str(json).unwrap()
}

#[test]
fn pipeline_determinism_and_records() {
    let img = blob(16, 1);
    let s = sample_of(img.clone(), Some(img.mapv(|v| if v > 40.0 { 1.0 } else { 0.0 })));
    let (same, recs) = apply_pipeline(&s, &[], 1).unwrap();
    assert_eq!(same, s);
    assert!(recs.is_empty());
    let specs = vec![
        spec(r#"{"name":"normalize_zscore"}"#),
        spec(r#"{"name":"affine_augment","params":{"rotation_deg":[-10,10],"translation_vox":[-1,1]}}"#),
        spec(r#"{"name":"elastic_augment","params":{"alpha":1,"sigma":3}}"#),
        spec(r#"{"name":"dilate_ground_truth","params":{"dilation_mm":2}}"#),
    ];
    assert_eq!(specs[0].scope, Scope::Image);
    assert_eq!(specs[3].scope, Scope::Label);
    let (a, ra) = apply_pipeline(&s, &specs, 5).unwrap();
    let (b, rb) = apply_pipeline(&s, &specs, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), specs.len());
    let (c, _) = apply_pipeline(&s, &specs, 6).unwrap();
    assert_ne!(a.image, c.image);
    match invert_records(&a, &ra) {
        Err(TransformError::NotInvertible(n)) => assert_eq!(n, "elastic_augment"),
        other => panic!("{other:?}"),
    }
    assert_ne!(derive_seed(1, "sub-01", 0), derive_seed(1, "sub-01", 1));
    assert_ne!(derive_seed(1, "sub-01", 0), derive_seed(1, "sub-02", 0));
}

#[test]
fn invertible_pipeline_round_trip() {
    let img = blob(20, 1);
    let s = sample_of(img.clone(), None);
    let specs = vec![
        spec(r#"{"name":"affine_augment","params":{"rotation_deg":[-15,15],"scale":[0.95,1.05]}}"#),
        spec(r#"{"name":"crop_or_pad","params":{"shape":[24,24,1]}}"#),
        spec(r#"{"name":"normalize_zscore"}"#),
    ];
    let (t, recs) = apply_pipeline(&s, &specs, 3).unwrap();
    assert_eq!(t.image.shape(), &[1, 24, 24, 1]);
    let back = invert_records(&t, &recs).unwrap();
    let mae = back.image.iter().zip(img.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / img.len() as f64;
    assert!(mae <= 2.0, "{mae}");
    let geo = invert_geometry(&t.image, &recs).unwrap();
    assert_eq!(geo.shape(), &[1, 20, 20, 1]);
}

#[test]
fn spec_validation() {
    for bad in [
        r#"{"name":"rotate"}"#,
        r#"{"name":"elastic_augment","params":{"alpha":1}}"#,
        r#"{"name":"elastic_augment","params":{"alpha":1,"sigma":0}}"#,
        r#"{"name":"affine_augment","params":{"rotation":[1,2]}}"#,
        r#"{"name":"intensity_adjust","params":{"clip_percentiles":[90,10]}}"#,
        r#"{"name":"resample","params":{"spacing":[1,1,1],"order":3}}"#,
        r#"{"name":"normalize_zscore","extra":1}"#,
    ] {
        assert!(serde_json::from_str::<TransformSpec>(bad).is_err(), "{bad}");
    }
    let s = spec(r#"{"name":"crop_or_pad","params":{"shape":[4,4,4]},"scope":"image"}"#);
    assert_eq!(s.scope, Scope::Image);
    let text = serde_json::to_string(&s).unwrap();
    assert_eq!(spec(&text), s);
}

