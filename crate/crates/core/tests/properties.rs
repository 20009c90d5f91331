use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use tch::{Kind, Tensor};

use trackgen::content_vae::content_weighted_loss;
use trackgen::eval::{bootstrap_ci, fid, match_boxes, motion_adherence};
use trackgen::generator::{Generator, GeneratorConfig};
use trackgen::latent::{LatentCode, LatentKind};
use trackgen::layers::ConvSpec;
use trackgen::motion_vae::{compute_balance_weights, compute_diff_weights, motion_weighted_loss, LossParams};
use trackgen::preprocess::{apply_motion_mask, extract_foreground_mask, rasterize_tracks};
use trackgen::synth::{generate_episode, oracle_detect, DetectOptions, WorldConfig};
use trackgen::tracks::{BBox, BoxTrackSet, TrackedObject};
use trackgen::video::{load_video, save_video, BinaryVideo, VideoTensor};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn binary_video(n: usize, h: usize, w: usize) -> impl Strategy<Value = BinaryVideo> {
    proptest::collection::vec(any::<bool>(), n * h * w).prop_map(move |bits| {
        let data = Array4::from_shape_vec((n, h, w, 1), bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        BinaryVideo::from_array(data).unwrap()
    })
}

fn bbox(w: i64, h: i64) -> impl Strategy<Value = BBox> {
    (0..w, 0..h).prop_flat_map(move |(x0, y0)| {
        (x0 + 1..=w, y0 + 1..=h).prop_map(move |(x1, y1)| BBox::new(x0, y0, x1, y1))
    })
}

fn track_set(n: usize, w: usize, h: usize) -> impl Strategy<Value = BoxTrackSet> {
    proptest::collection::vec(
        proptest::collection::vec(proptest::option::weighted(0.8, bbox(w as i64, h as i64)), n),
        0..4,
    )
    .prop_map(move |objs| {
        let objects = objs
            .into_iter()
            .enumerate()
            .map(|(i, boxes)| TrackedObject { id: i as i64, boxes })
            .collect();
        BoxTrackSet::new(n, w, h, objects).unwrap()
    })
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn balance_weights_sum_and_balance(m in binary_video(3, 6, 5), eps in 0.0f64..4.0) {
        let b = compute_balance_weights(&m, &m, eps).unwrap();
        let px = (3 * 6 * 5) as f64;
        prop_assert!((b.w_fg + b.w_bg - (1.0 + eps / px)).abs() < 1e-12);
        let fg: f64 = b.matrix.iter().zip(m.video().data().iter()).filter(|(_, &v)| v == 1.0).map(|(w, _)| *w).sum();
        let bg: f64 = b.matrix.iter().zip(m.video().data().iter()).filter(|(_, &v)| v == 0.0).map(|(w, _)| *w).sum();
        let n_fg = m.count_ones() as f64;
        let bound = eps * n_fg.max(px - n_fg) / (2.0 * px);
        prop_assert!((fg - bg).abs() <= bound + 1e-9, "fg {} bg {} bound {}", fg, bg, bound);
    }

    #[test]
    fn diff_weights_zero_on_first_frame_and_static_pixels(m in binary_video(4, 5, 5), lambda in 0.1f64..3.0) {
        let d = compute_diff_weights(&m, lambda).unwrap();
        let v = m.video().data();
        for t in 0..4 {
            for y in 0..5 {
                for x in 0..5 {
                    let w = d[[t, y, x]];
                    if t == 0 || v[[t, y, x, 0]] == v[[t - 1, y, x, 0]] {
                        prop_assert_eq!(w, 0.0);
                    } else {
                        prop_assert!((w - lambda).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn motion_loss_of_perfect_reconstruction_is_zero(m in binary_video(3, 4, 4)) {
        let l = motion_weighted_loss(&m, m.video(), &LossParams::default()).unwrap();
        prop_assert_eq!(l, 0.0);
    }

    #[test]
    fn content_loss_bounded_by_plain_l1(
        f in proptest::collection::vec(0.0f32..1.0, 4 * 4 * 3),
        g in proptest::collection::vec(0.0f32..1.0, 4 * 4 * 3),
        mask in proptest::collection::vec(any::<bool>(), 16),
    ) {
        let f = Array3::from_shape_vec((4, 4, 3), f).unwrap();
        let g = Array3::from_shape_vec((4, 4, 3), g).unwrap();
        let mask = Array2::from_shape_vec((4, 4), mask.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let l = content_weighted_loss(f.view(), g.view(), mask.view()).unwrap();
        let plain = f.iter().zip(g.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / 48.0;
        prop_assert!(l <= plain + 1e-12);
    }

    #[test]
    fn video_png_round_trip(values in proptest::collection::vec(0.0f32..=1.0, 2 * 5 * 7 * 3)) {
        let v = VideoTensor::new(Array4::from_shape_vec((2, 5, 7, 3), values).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_video(&v, dir.path()).unwrap();
        let back = load_video(dir.path()).unwrap();
        prop_assert!(back.max_abs_diff(&v) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn binary_png_round_trip_is_exact(m in binary_video(2, 6, 6)) {
        let dir = tempfile::tempdir().unwrap();
        save_video(m.video(), dir.path()).unwrap();
        let back = load_video(dir.path()).unwrap();
        prop_assert_eq!(back.max_abs_diff(m.video()), 0.0);
    }

    #[test]
    fn rasterizer_matches_point_in_box(t in track_set(3, 9, 7)) {
        let r = rasterize_tracks(&t, 3, 7, 9).unwrap();
        for f in 0..3 {
            for y in 0..7i64 {
                for x in 0..9i64 {
                    let inside = t.objects.iter().any(|o| o.boxes[f].is_some_and(|b| b.contains(x, y)));
                    prop_assert_eq!(r.get(f, y as usize, x as usize), inside);
                }
            }
        }
    }

    #[test]
    fn motion_mask_keeps_or_zeroes(values in proptest::collection::vec(0.0f32..=1.0, 2 * 4 * 4 * 3), m in binary_video(2, 4, 4)) {
        let v = VideoTensor::new(Array4::from_shape_vec((2, 4, 4, 3), values).unwrap()).unwrap();
        let out = apply_motion_mask(&v, &m).unwrap();
        for ((idx, &o), &orig) in out.data().indexed_iter().zip(v.data().iter()) {
            let keep = m.get(idx.0, idx.1, idx.2);
            prop_assert_eq!(o, if keep { orig } else { 0.0 });
        }
    }

    #[test]
    fn foreground_mask_monotone_in_kernel(
        f in proptest::collection::vec(0.0f32..=1.0, 12 * 12 * 3),
        k1 in 1usize..5,
        dk in 0usize..5,
    ) {
        let f = Array3::from_shape_vec((12, 12, 3), f).unwrap();
        let bg = Array3::from_elem((12, 12, 3), 0.5f32);
        let a = extract_foreground_mask(f.view(), bg.view(), 0.3, k1).unwrap();
        let b = extract_foreground_mask(f.view(), bg.view(), 0.3, k1 + dk).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!(*x <= *y);
        }
    }

    #[test]
    fn bootstrap_interval_contains_mean(scores in proptest::collection::vec(-1e3f64..1e3, 1..12), seed in any::<u64>()) {
        let s = bootstrap_ci(&scores, 200, 0.95, seed).unwrap();
        prop_assert!(s.lo <= s.mean && s.mean <= s.hi);
        prop_assert!(s.best <= s.mean && s.mean <= s.worst);
        prop_assert!(s.variance >= 0.0);
    }

    #[test]
    fn match_scores_lie_in_unit_interval(
        c in proptest::collection::vec(bbox(20, 20), 0..5),
        d in proptest::collection::vec(bbox(20, 20), 0..5),
    ) {
        let s = match_boxes(&c, &d);
        prop_assert_eq!(s.len(), c.len());
        for v in s {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn fid_is_symmetric_and_zero_on_self(
        a in proptest::collection::vec(-3.0f64..3.0, 20 * 3),
        b in proptest::collection::vec(-3.0f64..3.0, 25 * 3),
    ) {
        let a = Array2::from_shape_vec((20, 3), a).unwrap();
        let b = Array2::from_shape_vec((25, 3), b).unwrap();
        let ab = fid(a.view(), b.view()).unwrap();
        let ba = fid(b.view(), a.view()).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6, "{} vs {}", ab, ba);
        prop_assert!(fid(a.view(), a.view()).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn adherence_lies_in_unit_interval(seed in 0u64..1000, t in track_set(4, 32, 32)) {
        let world = WorldConfig { n: 4, h: 32, w: 32, sprite_size: 6, ..WorldConfig::default() };
        let ep = generate_episode(&world, seed).unwrap();
        let s = motion_adherence(&ep.video, &t, ep.background.view(), DetectOptions::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn synthetic_episodes_are_self_consistent(seed in 0u64..10_000) {
        let world = WorldConfig { n: 6, h: 32, w: 32, sprite_size: 6, ..WorldConfig::default() };
        let ep = generate_episode(&world, seed).unwrap();
        let s = motion_adherence(&ep.video, &ep.tracks, ep.background.view(), DetectOptions::default()).unwrap();
        prop_assert_eq!(s, 1.0);
        let det = oracle_detect(&ep.video, ep.background.view());
        let total: usize = (0..6).map(|f| det.frame_boxes(f).len()).sum();
        prop_assert_eq!(total, 6 * world.num_objects);
    }
}

fn small_generator(seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        n: 4,
        h: 8,
        w: 8,
        motion_latent_dim: 6,
        content_latent_dim: 5,
        noise_dim: 3,
        decoder_conv: ConvSpec::new(&[4, 8]),
        sr_hidden: 4,
        sr_noise_channels: 2,
    };
    Generator::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(cfg(24))]

    #[test]
    fn generated_values_stay_in_unit_range(
        seed in any::<u64>(),
        scale in 0.5f64..50.0,
        zm in proptest::collection::vec(-20.0f32..20.0, 6),
        zc in proptest::collection::vec(-20.0f32..20.0, 5),
        zn in proptest::collection::vec(-20.0f32..20.0, 3),
    ) {
        let g = small_generator(seed);
        tch::no_grad(|| {
            for (_, mut v) in g.var_store().variables() {
                let scaled = &v * scale + Tensor::ones_like(&v) * 0.1;
                v.copy_(&scaled);
            }
        });
        let m = LatentCode::new(LatentKind::Motion, zm).unwrap();
        let c = LatentCode::new(LatentKind::Content, zc).unwrap();
        let z = LatentCode::new(LatentKind::Noise, zn).unwrap();
        let v_hat = g.decode_video(&m, &c).unwrap();
        let out = g.super_resolve(&v_hat, &z).unwrap();
        let s = out.shape();
        prop_assert_eq!((s.n, s.h, s.w, s.c), (4, 8, 8, 3));
        let t = out.to_tensor(Kind::Float);
        prop_assert!(t.min().double_value(&[]) >= 0.0);
        prop_assert!(t.max().double_value(&[]) <= 1.0);
    }
}
