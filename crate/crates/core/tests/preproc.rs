mod common;

use foodwaste::preproc::{
    crop, mask_union, min_square_bbox, preprocess_pair, resize_bilinear, SquareBBox, UNetMasker, TARGET_SIZE,
};
use foodwaste::scenegen::{gen_episode, SceneConfig};
use foodwaste::segnet::{UNet, UNetConfig};
use foodwaste::Result;
use foodwaste_tensor::params::seeded_rng;
use foodwaste_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let density = rng.gen_range(0.001..0.2);
    // a few random rectangles plus salt, so extents vary widely
    let mut m = Tensor::<f32>::from_fn(&[1, h, w], |_| if rng.gen_bool(density / 10.0) { 1.0 } else { 0.0 });
    for _ in 0..rng.gen_range(0..3) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = (rng.gen_range(r0..h), rng.gen_range(c0..w));
        for r in r0..=r1 {
            for c in c0..=c1 {
                m.data_mut()[r * w + c] = 1.0;
            }
        }
    }
    m
}

fn contains_all(mask: &Tensor<f32>, b: SquareBBox) -> bool {
    let w = mask.shape()[2];
    mask.data()
        .iter()
        .enumerate()
        .all(|(i, &v)| v == 0.0 || b.contains((i / w) as i64, (i % w) as i64))
}

#[test]
fn bbox_contains_every_foreground_pixel() {
    let mut rng = seeded_rng(1);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..80), rng.gen_range(1..80));
        let m = random_mask(&mut rng, h, w);
        match min_square_bbox(&m).unwrap() {
            Some(b) => assert!(contains_all(&m, b), "{b:?}"),
            None => assert!(m.data().iter().all(|&v| v == 0.0)),
        }
    }
}

#[test]
fn bbox_is_minimal() {
    let mut rng = seeded_rng(2);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let m = random_mask(&mut rng, h, w);
        let Some(b) = min_square_bbox(&m).unwrap() else { continue };
        if b.side == 1 {
            continue;
        }
        let side = b.side - 1;
        let s = side as i64;
        for row in -s..h as i64 {
            for col in -s..w as i64 {
                let smaller = SquareBBox { row, col, side };
                assert!(!contains_all(&m, smaller), "{smaller:?} beats {b:?}");
            }
        }
    }
}

#[test]
fn crop_copies_in_bounds_pixels() {
    let mut rng = seeded_rng(3);
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..20), rng.gen_range(1..20));
        let img = Tensor::<f32>::uniform(&[c, h, w], 0.1, 1.0, &mut rng);
        let side = rng.gen_range(1..30);
        let b = SquareBBox {
            row: rng.gen_range(1 - side as i64..h as i64),
            col: rng.gen_range(1 - side as i64..w as i64),
            side,
        };
        let out = crop(&img, b).unwrap();
        assert_eq!(out.shape(), &[c, side, side]);
        for k in 0..c {
            for dr in 0..side {
                for dc in 0..side {
                    let (r, cc) = (b.row + dr as i64, b.col + dc as i64);
                    let got = out.data()[(k * side + dr) * side + dc];
                    let inside = r >= 0 && cc >= 0 && r < h as i64 && cc < w as i64;
                    let want = if inside {
                        img.data()[(k * h + r as usize) * w + cc as usize]
                    } else {
                        0.0
                    };
                    assert_eq!(got, want);
                }
            }
        }
    }
}

#[test]
fn resize_preserves_bounds() {
    let mut rng = seeded_rng(4);
    for _ in 0..100 {
        let s = rng.gen_range(1..24);
        let t = rng.gen_range(1..40);
        let img = Tensor::<f32>::uniform(&[3, s, s], -2.0, 3.0, &mut rng);
        let out = resize_bilinear(&img, t).unwrap();
        assert!(out.min_value() >= img.min_value() && out.max_value() <= img.max_value());
    }
}

fn ground_truth(mask: Tensor<f32>) -> impl Fn(&Tensor<f32>) -> Result<Tensor<f32>> {
    move |_: &Tensor<f32>| Ok(mask.clone())
}

#[test]
fn shared_geometry_for_both_images() {
    let mut rng = seeded_rng(5);
    for _ in 0..20 {
        let s = 48;
        let mask = random_mask(&mut rng, s, s);
        let Some(b) = min_square_bbox(&mask).unwrap() else { continue };
        let tag = |r: usize, c: usize| if (r, c) == (b.row.max(0) as usize, b.col.max(0) as usize) { 1.0 } else { 0.0 };
        // the sentinel sits at the same pixel in both images; the rest differs
        let before = Tensor::<f32>::from_fn(&[3, s, s], |i| if i < s * s { tag(i / s, i % s) } else { 0.25 });
        let after = Tensor::<f32>::from_fn(&[3, s, s], |i| if i < s * s { tag(i / s, i % s) } else { 0.75 });
        let out = preprocess_pair(&before, &after, &ground_truth(mask), TARGET_SIZE).unwrap().unwrap();
        assert_eq!(out.before.shape(), &[3, 224, 224]);
        assert_eq!(out.after.shape(), &[3, 224, 224]);
        let plane = 224 * 224;
        assert_eq!(out.before.data()[..plane], out.after.data()[..plane]);
        assert!(out.before.data()[..plane].iter().any(|&v| v > 0.0));
    }
}

#[test]
fn shared_bbox_covers_old_and_new_food() {
    let cfg = SceneConfig::new(5, 64);
    for bin in 0..10 {
        let ep = gen_episode(8, bin, 3, &cfg).unwrap();
        let (prev, cur) = (&ep.events[1], &ep.events[2]);
        let union = mask_union(&prev.cumulative_mask, &cur.cumulative_mask).unwrap();
        let out = preprocess_pair(&cur.before, &cur.after, &ground_truth(union.clone()), TARGET_SIZE)
            .unwrap()
            .unwrap();
        assert!(contains_all(&prev.cumulative_mask, out.bbox));
        assert!(contains_all(&cur.cumulative_mask, out.bbox));
    }
}

#[test]
fn unet_masker_maps_back_to_source_size() {
    let (net, params) = UNet::build(UNetConfig::toy(), 0).unwrap();
    let masker = UNetMasker {
        net: &net,
        params: &params,
        threshold: 0.5,
    };
    let img = Tensor::<f32>::uniform(&[3, 100, 100], 0.0, 1.0, &mut seeded_rng(6));
    if let Some(out) = preprocess_pair(&img, &img, &masker, 96).unwrap() {
        assert_eq!(out.before, out.after);
        assert_eq!(out.before.shape(), &[3, 96, 96]);
    }
    let empty = |_: &Tensor<f32>| -> Result<Tensor<f32>> { Ok(Tensor::zeros(&[1, 100, 100])) };
    assert!(preprocess_pair(&img, &img, &empty, 96).unwrap().is_none());
}
