use proptest::prelude::*;

use weakcount::autodiff::{forward, OpKind, Tape, Tensor};
use weakcount::datagen::{apply_label_deviation, generate_scene, subimage_count_oracle, DatasetSpec};
use weakcount::eval::mae_mse;
use weakcount::glc::{assemble_batch, glc_loss, partition_image, reassemble, resize_bilinear, PartitionGrid};
use weakcount::sfsl::{cosine_similarity, density_map};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn sim(f: &[f64], g: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(f.to_vec()));
    let b = tape.constant(Tensor::vector(g.to_vec()));
    let s = cosine_similarity(&mut tape, a, b).unwrap();
    tape.value(s).item().unwrap()
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-6
}

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * stride + a) as isize - pad as isize;
                            let xx = (j * stride + b) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += x.at(&[ic, y as usize, xx as usize]) * k.at(&[oc, ic, a, b]);
                            }
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn similarity_is_bounded_and_symmetric_in_sign((f, g) in (2usize..9).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))) {
        prop_assume!(nonzero(&f) && nonzero(&g));
        let s = sim(&f, &g);
        prop_assert!((0.0..=1.0).contains(&s));
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        prop_assert!((sim(&f, &neg) - (1.0 - s)).abs() < 1e-12);
        prop_assert!((sim(&f, &g) - sim(&g, &f)).abs() < 1e-12);
    }

    #[test]
    fn similarity_ignores_positive_scale(f in vec_strategy(6), g in vec_strategy(6), c in 0.01f64..100.0) {
        prop_assume!(nonzero(&f) && nonzero(&g));
        let cf: Vec<f64> = f.iter().map(|x| x * c).collect();
        let cg: Vec<f64> = g.iter().map(|x| x * c).collect();
        prop_assert!((sim(&cf, &g) - sim(&f, &g)).abs() < 1e-12);
        prop_assert!((sim(&f, &cg) - sim(&f, &g)).abs() < 1e-12);
    }

    #[test]
    fn unit_inverse_scale_passes_probabilities_through(p in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::vector(p.clone()));
        let ones = tape.constant(Tensor::full(&[p.len()], 1.0));
        let d = density_map(&mut tape, pv, ones).unwrap();
        prop_assert_eq!(tape.value(d).data(), &p[..]);
    }

    #[test]
    fn conv_matches_naive_loops(
        c in 1usize..4, o in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let kern = Tensor::new(vec![o, c, k, k], (0..o * c * k * k).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let y = forward(&OpKind::Conv2d { stride, padding: pad }, &[&x, &kern]).unwrap();
        for (a, b) in y.data().iter().zip(naive_conv(&x, &kern, stride, pad)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn partition_then_reassemble_is_identity(c in 1usize..3, h in 4usize..20, w in 4usize..20, r in 1usize..5, q in 1usize..5) {
        let grid = PartitionGrid::new(r, q).unwrap();
        let img = Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| i as f64).collect()).unwrap();
        let tiles = partition_image(&img, grid).unwrap();
        let pixels: usize = tiles.iter().map(|t| t.numel()).sum();
        prop_assert_eq!(pixels, img.numel());
        prop_assert_eq!(reassemble(&tiles, grid).unwrap(), img);
    }

    #[test]
    fn tile_counts_conserve_the_scene_count(seed in any::<u64>(), side in 1usize..6) {
        let spec = DatasetSpec::default();
        let scene = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let counts = subimage_count_oracle(&scene, PartitionGrid::square(side)).unwrap();
        prop_assert_eq!(counts.len(), side * side);
        prop_assert_eq!(counts.iter().sum::<usize>(), scene.count);
    }

    #[test]
    fn resize_keeps_constant_images_constant(v in 0.0f64..1.0, h in 2usize..12, w in 2usize..12, oh in 2usize..12, ow in 2usize..12) {
        let img = Tensor::full(&[1, h, w], v);
        let out = resize_bilinear(&img, oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn consistency_loss_vanishes_when_locals_sum_to_global(locals in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..5)) {
        let mut tape = Tape::new();
        let mut globals = Vec::new();
        let mut local_vars = Vec::new();
        for row in &locals {
            // the sum of the locals, computed in the same order as the loss
            let vs: Vec<_> = row.iter().map(|&x| tape.constant(Tensor::vector(vec![x]))).collect();
            let cat = tape.concat(&vs, 0).unwrap();
            let s = tape.sum(cat).unwrap();
            globals.push(tape.reshape(s, &[1]).unwrap());
            local_vars.push(vs);
        }
        let l = glc_loss(&mut tape, &globals, &local_vars).unwrap();
        prop_assert!(tape.value(l).item().unwrap().abs() < 1e-20);
    }

    #[test]
    fn label_deviation_is_nonnegative_and_exact_at_zero(c in 0.0f64..100.0, eps in -3.0f64..3.0) {
        prop_assert!(apply_label_deviation(c, eps) >= 0.0);
        prop_assert_eq!(apply_label_deviation(c, 0.0), c);
    }

    #[test]
    fn errors_are_zero_only_for_perfect_predictions(preds in prop::collection::vec(0.0f64..60.0, 1..30), shift in 0.1f64..5.0) {
        prop_assert_eq!(mae_mse(&preds, &preds).unwrap(), (0.0, 0.0));
        let counts: Vec<f64> = preds.iter().map(|p| p + shift).collect();
        let (mae, rmse) = mae_mse(&preds, &counts).unwrap();
        prop_assert!((mae - shift).abs() < 1e-9);
        prop_assert!(rmse >= mae - 1e-12);
    }

    #[test]
    fn batches_interleave_globals_and_tiles(b in 1usize..7, side in 1usize..4) {
        let images: Vec<Tensor> = (0..b).map(|i| Tensor::full(&[1, 16, 16], i as f64)).collect();
        let samples: Vec<(&Tensor, f64)> = images.iter().map(|t| (t, 1.0)).collect();
        let grid = PartitionGrid::square(side);
        let batch = assemble_batch(&samples, grid, 8).unwrap();
        prop_assert_eq!(batch.items.len(), b * (grid.tiles() + 1));
        for (k, item) in batch.items.iter().enumerate() {
            let owner = (k / (grid.tiles() + 1)) as f64;
            prop_assert!(item.data().iter().all(|&x| (x - owner).abs() < 1e-12));
        }
    }
}
