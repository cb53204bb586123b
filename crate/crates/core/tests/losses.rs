mod common;

use common::{conv_naive, randn, rng};
use rand::Rng;
use stereodrop::losses::{
    attention_consistency_loss, downsample_target, perceptual_loss, total_loss, CoarseTarget, FeatureExtractor,
    LossConfig, DEFAULT_ALPHA, DEFAULT_LAMBDAS,
};
use stereodrop::{Graph, Tensor};

fn images(seed: u64) -> [Tensor<f64>; 4] {
    [0, 1, 2, 3].map(|i| randn(&[1, 3, 16, 32], seed * 4 + i).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)))
}

fn lp(ext: &FeatureExtractor, imgs: &[Tensor<f64>; 4], lambdas: &[f64; 4]) -> f64 {
    let mut g = Graph::new();
    let w = ext.weights::<f64>(0).bind(&mut g, false);
    let [a, b, c, d] = imgs.clone().map(|t| g.constant(t));
    let l = perceptual_loss(&mut g, ext, &w, a, b, c, d, lambdas).unwrap();
    g.value(l).data()[0]
}

#[test]
fn defaults() {
    assert_eq!(DEFAULT_LAMBDAS, [1.0, 0.5, 0.4, 1.0]);
    assert_eq!(DEFAULT_ALPHA, 5e-4);
    let cfg = LossConfig::default();
    assert_eq!((cfg.lambdas, cfg.alpha), (DEFAULT_LAMBDAS, DEFAULT_ALPHA));
}

#[test]
fn extractor_weights_are_reproducible() {
    let ext = FeatureExtractor::default();
    let a = ext.weights::<f32>(0);
    let b = ext.weights::<f32>(0);
    assert_eq!(a, b);
    let bytes = |s: &stereodrop::ParamStore<f32>| -> Vec<u8> {
        s.iter().flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes())).collect()
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(a, ext.weights::<f32>(1));
}

#[test]
fn tap_shapes_halve_per_stage() {
    let ext = FeatureExtractor::default();
    let mut g = Graph::new();
    let w = ext.weights::<f32>(0).bind(&mut g, false);
    let img = g.constant(Tensor::full(&[1, 3, 48, 96], 0.5));
    let taps = ext.extract(&mut g, &w, img).unwrap();
    let dims: Vec<_> = taps.iter().map(|t| (g.shape(*t)[2], g.shape(*t)[3])).collect();
    assert_eq!(dims, vec![(48, 96), (24, 48), (12, 24), (6, 12)]);
}

#[test]
fn first_tap_matches_conv_oracle() {
    let ext = FeatureExtractor::default();
    let weights = ext.weights::<f64>(3);
    let img = randn(&[1, 3, 8, 8], 4);
    let mut g = Graph::new();
    let w = weights.bind(&mut g, false);
    let x = g.constant(img.clone());
    let taps = ext.extract(&mut g, &w, x).unwrap();
    let want = conv_naive(&img, weights.get("extractor.t0.w").unwrap(), None, 1, 1, 1).map(|v| v.max(0.0));
    assert!(g.value(taps[0]).max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn perceptual_identity_is_zero_and_positive_otherwise() {
    let ext = FeatureExtractor::default();
    let [a, b, _, _] = images(1);
    assert_eq!(lp(&ext, &[a.clone(), b.clone(), a.clone(), b.clone()], &DEFAULT_LAMBDAS), 0.0);
    assert!(lp(&ext, &images(2), &DEFAULT_LAMBDAS) > 0.0);
}

#[test]
fn perceptual_is_linear_in_lambda() {
    let ext = FeatureExtractor::default();
    let imgs = images(3);
    let base = lp(&ext, &imgs, &DEFAULT_LAMBDAS);
    let doubled = lp(&ext, &imgs, &DEFAULT_LAMBDAS.map(|l| 2.0 * l));
    assert!((doubled - 2.0 * base).abs() <= 1e-12 * base.abs().max(1.0));
    // sum of single-tap losses
    let parts: f64 = (0..4)
        .map(|t| {
            let mut l = [0.0; 4];
            l[t] = DEFAULT_LAMBDAS[t];
            lp(&ext, &imgs, &l)
        })
        .sum();
    assert!((parts - base).abs() <= 1e-12);
}

#[test]
fn perceptual_is_symmetric_in_output_and_target() {
    let ext = FeatureExtractor::default();
    for seed in 0..4 {
        let [a, b, c, d] = images(10 + seed);
        let x = lp(&ext, &[a.clone(), b.clone(), c.clone(), d.clone()], &DEFAULT_LAMBDAS);
        let y = lp(&ext, &[c, d, a, b], &DEFAULT_LAMBDAS);
        assert!((x - y).abs() <= 1e-14);
    }
}

#[test]
fn perceptual_rejects_mismatched_pairs() {
    let ext = FeatureExtractor::default();
    let mut g = Graph::new();
    let w = ext.weights::<f64>(0).bind(&mut g, false);
    let a = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
    let b = g.constant(Tensor::zeros(&[1, 3, 16, 32]));
    assert!(perceptual_loss(&mut g, &ext, &w, a, a, b, a, &DEFAULT_LAMBDAS).is_err());
}

fn full_target(d: Tensor<f64>) -> CoarseTarget<f64> {
    let n = d.numel();
    CoarseTarget { disparity: d, mask: vec![true; n] }
}

fn lc(d_l: &Tensor<f64>, d_r: &Tensor<f64>, tl: &CoarseTarget<f64>, tr: &CoarseTarget<f64>) -> (f64, Vec<String>) {
    let mut g = Graph::new();
    let (a, b) = (g.constant(d_l.clone()), g.constant(d_r.clone()));
    let l = attention_consistency_loss(&mut g, a, b, tl, tr).unwrap();
    (g.value(l).data()[0], g.warnings().to_vec())
}

#[test]
fn consistency_identity_offset_and_empty_mask() {
    let gt_l = randn(&[1, 1, 6, 12], 1).map(f64::abs);
    let gt_r = randn(&[1, 1, 6, 12], 2).map(f64::abs);
    let (tl, tr) = (full_target(gt_l.clone()), full_target(gt_r.clone()));
    assert_eq!(lc(&gt_l, &gt_r, &tl, &tr).0, 0.0);

    let delta = 0.375;
    let (v, _) = lc(&gt_l.map(|v| v + delta), &gt_r.map(|v| v + delta), &tl, &tr);
    assert!((v - 2.0 * delta).abs() <= 1e-14);

    let empty = |t: &Tensor<f64>| CoarseTarget { disparity: t.clone(), mask: vec![false; t.numel()] };
    let (v, warnings) = lc(&gt_l.map(|v| v + 5.0), &gt_r, &empty(&gt_l), &empty(&gt_r));
    assert_eq!(v, 0.0);
    assert_eq!(warnings.len(), 2);
}

#[test]
fn consistency_only_counts_masked_cells() {
    let mut r = rng(5);
    for _ in 0..10 {
        let gt = randn(&[1, 1, 4, 8], r.random());
        let pred = randn(&[1, 1, 4, 8], r.random());
        let mask: Vec<bool> = (0..32).map(|_| r.random_bool(0.6)).collect();
        let kept: Vec<usize> = (0..32).filter(|&i| mask[i]).collect();
        if kept.is_empty() {
            continue;
        }
        let want: f64 = kept.iter().map(|&i| (pred.data()[i] - gt.data()[i]).abs()).sum::<f64>() / kept.len() as f64;
        let t = CoarseTarget { disparity: gt.clone(), mask: mask.clone() };
        let full = full_target(pred.clone());
        let (v, _) = lc(&pred, &pred, &t, &full);
        assert!((v - want).abs() <= 1e-14);
    }
}

#[test]
fn total_is_weighted_sum() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(1.0));
    let b = g.constant(Tensor::scalar(2.0));
    let t = total_loss(&mut g, a, b, 0.5).unwrap();
    assert_eq!(g.value(t).data()[0], 2.0);
    let t = total_loss(&mut g, a, b, 0.0).unwrap();
    assert_eq!(g.value(t).data()[0], 1.0);
}

#[test]
fn downsampled_target_matches_block_oracle() {
    let mut r = rng(9);
    for case in 0..20 {
        let (h, w) = (8, 16);
        let disp = Tensor::<f32>::from_fn(&[1, 1, h, w], |_| r.random_range(0.0..12.0f32));
        let mask = Tensor::<f32>::from_fn(&[1, 1, h, w], |_| if r.random_bool(0.9) { 1.0 } else { 0.0 });
        let t: CoarseTarget<f64> = downsample_target(&disp, &mask, 4).unwrap();
        assert_eq!(t.disparity.shape(), &[1, 1, 2, 4]);
        for cy in 0..2 {
            for cx in 0..4 {
                let mut ok = true;
                let mut sum = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        ok = ok && mask.at4(0, 0, 4 * cy + dy, 4 * cx + dx) == 1.0;
                        sum += disp.at4(0, 0, 4 * cy + dy, 4 * cx + dx) as f64;
                    }
                }
                assert_eq!(t.mask[cy * 4 + cx], ok, "case {case}");
                if ok {
                    assert!((t.disparity.at4(0, 0, cy, cx) - sum / 64.0).abs() <= 1e-12);
                }
            }
        }
    }
    let d = Tensor::<f32>::zeros(&[1, 1, 6, 8]);
    assert!(downsample_target::<f64>(&d, &d, 4).is_err());
}

#[test]
fn invalid_weights_are_rejected() {
    let bad = LossConfig { alpha: -1.0, ..LossConfig::default() };
    assert!(bad.validate().is_err());
    let bad = LossConfig { lambdas: [1.0, f64::NAN, 0.0, 0.0], ..LossConfig::default() };
    assert!(bad.validate().is_err());
}
