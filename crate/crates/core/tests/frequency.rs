//! Band splitting, frequency-domain fusion and the alignment loss.

mod common;

use common::{alignment_closed_forms, band_identities, leaf, random_field};
use nutrifuse_core::fusion::{
    alignment_loss, build_lowpass_mask, fafm_fuse, hierarchical_fuse, split_bands, FusionLayer,
};
use nutrifuse_core::nn::{Builder, ParamStore};
use nutrifuse_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn band_identities_on_required_sizes() {
    let r = band_identities();
    assert!(r.reconstruction <= 1e-6, "reconstruction {:e}", r.reconstruction);
    assert!(r.energy <= 1e-6, "energy {:e}", r.energy);
    assert!(r.band_sum <= 1e-6, "band sum {:e}", r.band_sum);
    assert!(r.monotone);
}

/// Radial predicate written out from scratch on signed frequencies.
fn brute_force_mask(h: usize, w: usize, kappa: f64) -> Vec<f64> {
    let signed = |k: usize, n: usize| -> f64 {
        let k = k as i64;
        let n = n as i64;
        let s = if k > n / 2 { k - n } else { k };
        s as f64
    };
    let mut out = Vec::new();
    for u in 0..h {
        for v in 0..w {
            let fu = signed(u, h).abs() / (h / 2) as f64;
            let fv = signed(v, w).abs() / (w / 2) as f64;
            let rho = (fu * fu + fv * fv).sqrt() / 2f64.sqrt();
            out.push(if rho <= kappa { 1.0 } else { 0.0 });
        }
    }
    out
}

#[test]
fn mask_matches_exhaustive_predicate() {
    assert_eq!(build_lowpass_mask(8, 8, 0.5).unwrap().mask, brute_force_mask(8, 8, 0.5));
    for (h, w) in [(6, 10), (16, 4)] {
        for k in [0.2, 0.35, 0.7] {
            assert_eq!(build_lowpass_mask(h, w, k).unwrap().mask, brute_force_mask(h, w, k), "{h}x{w} kappa {k}");
        }
    }
}

#[test]
fn mask_is_conjugate_symmetric() {
    for (h, w) in [(3, 3), (4, 5), (8, 8), (7, 16)] {
        for k in [0.1, 0.3, 0.6] {
            let m = build_lowpass_mask(h, w, k).unwrap().mask;
            for u in 0..h {
                for v in 0..w {
                    assert_eq!(m[u * w + v], m[((h - u) % h) * w + (w - v) % w]);
                }
            }
        }
    }
}

#[test]
fn constant_image_is_all_low_band() {
    let x = Tensor::<f64>::full(&[1, 2, 5, 4], 0.8);
    let (lo, hi) = split_bands(&x, &build_lowpass_mask(5, 4, 0.2).unwrap()).unwrap();
    assert!(lo.to_vec().iter().all(|v| (v - 0.8).abs() < 1e-12));
    assert!(hi.to_vec().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn checkerboard_goes_to_high_band() {
    let (h, w) = (8, 8);
    let offset = 0.3;
    let x: Vec<f64> = (0..h * w).map(|i| offset + if (i / w + i % w) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let t = Tensor::from_vec(&[1, 1, h, w], x.clone()).unwrap();
    let (lo, hi) = split_bands(&t, &build_lowpass_mask(h, w, 0.1).unwrap()).unwrap();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    for ((l, hh), v) in lo.to_vec().iter().zip(hi.to_vec()).zip(&x) {
        assert!((l - mean).abs() < 1e-12);
        assert!((hh - (v - mean)).abs() < 1e-12);
    }
}

fn fusion_layer(channels: usize) -> (ParamStore<f64>, FusionLayer<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let l = FusionLayer::new(&mut Builder { store: &mut store, rng: &mut rng }, "f", channels).unwrap();
    (store, l)
}

#[test]
fn zero_depth_bands_sum_to_rgb() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = random_field(&mut rng, &[2, 3, 6, 5]);
    let d = Tensor::zeros(&[2, 3, 6, 5]);
    let (_s, layer) = fusion_layer(3);
    let out = fafm_fuse(&r, &d, &build_lowpass_mask(6, 5, 0.3).unwrap(), &layer).unwrap();
    let sum = out.high.add(&out.low).unwrap();
    for (a, b) in sum.to_vec().iter().zip(r.to_vec()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn hierarchy_of_one_stage_equals_single_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = random_field(&mut rng, &[1, 3, 4, 4]);
    let d = random_field(&mut rng, &[1, 3, 4, 4]);
    let (_s, layer) = fusion_layer(3);
    let mask = build_lowpass_mask(4, 4, 0.25).unwrap();
    let single = fafm_fuse(&r, &d, &mask, &layer).unwrap().fused.to_vec();
    let layers = [layer];
    let masks = [mask];
    let h = hierarchical_fuse(&[r], &[d], Some((&masks[..], &layers[..]))).unwrap();
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].to_vec(), single);
}

#[test]
fn four_stage_hierarchy_shapes_and_additive_fallback() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let widths = [2, 3, 4, 5];
    let sizes = [32, 16, 8, 4];
    let r: Vec<_> = widths.iter().zip(&sizes).map(|(&c, &s)| random_field(&mut rng, &[1, c, s, s])).collect();
    let d: Vec<_> = widths.iter().zip(&sizes).map(|(&c, &s)| random_field(&mut rng, &[1, c, s, s])).collect();
    let masks: Vec<_> = sizes.iter().map(|&s| build_lowpass_mask(s, s, 0.25).unwrap()).collect();
    let layers: Vec<_> = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| FusionLayer::new(&mut Builder { store: &mut store, rng: &mut rng }, &format!("f{i}"), c).unwrap())
        .collect();
    let fused = hierarchical_fuse(&r, &d, Some((&masks[..], &layers[..]))).unwrap();
    assert_eq!(fused.len(), 4);
    for (f, x) in fused.iter().zip(&r) {
        assert_eq!(f.shape(), x.shape());
    }
    let added = hierarchical_fuse(&r, &d, None).unwrap();
    for ((a, x), y) in added.iter().zip(&r).zip(&d) {
        let want: Vec<f64> = x.to_vec().iter().zip(y.to_vec()).map(|(p, q)| p + q).collect();
        assert_eq!(a.to_vec(), want);
    }
}

#[test]
fn alignment_closed_forms_hold() {
    let (single, uniform, ortho) = alignment_closed_forms();
    assert!(single.abs() < 1e-12, "N=1 gives {single}");
    assert!(uniform < 1e-9, "uniform off by {uniform:e}");
    assert!(ortho < 1e-9, "orthonormal off by {ortho:e}");
}

#[test]
fn alignment_loss_is_nonnegative_and_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = (leaf(&mut rng, &[6, 4]), leaf(&mut rng, &[6, 4]));
    let l = alignment_loss(&a, &b, 0.07).unwrap();
    assert!(l.item() >= 0.0);
    l.backward().unwrap();
    assert!(a.grad().unwrap().iter().any(|g| *g != 0.0));
    assert!(b.grad().unwrap().iter().any(|g| *g != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matched_pairing_beats_any_shuffle(n in 2usize..6, seed in any::<u64>(), shift in 1usize..5) {
        // candidates are noisy copies of the anchors, so matched pairs are the most similar
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let anchors = random_field(&mut rng, &[n, dim]).to_vec();
        let noise = random_field(&mut rng, &[n, dim]).to_vec();
        let cands: Vec<f64> = anchors.iter().zip(&noise).map(|(a, e)| a + 0.05 * e).collect();
        let a = Tensor::from_vec(&[n, dim], anchors).unwrap();
        let matched = Tensor::from_vec(&[n, dim], cands.clone()).unwrap();
        let k = shift % n;
        prop_assume!(k != 0);
        let rolled: Vec<f64> = (0..n).flat_map(|i| cands[((i + k) % n) * dim..((i + k) % n + 1) * dim].to_vec()).collect();
        let shuffled = Tensor::from_vec(&[n, dim], rolled).unwrap();
        let lm = alignment_loss(&a, &matched, 0.1).unwrap().item();
        let ls = alignment_loss(&a, &shuffled, 0.1).unwrap().item();
        prop_assert!(lm <= ls + 1e-12);
    }

    #[test]
    fn split_reconstructs_any_real_input(h in 1usize..12, w in 1usize..12, k in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_field(&mut rng, &[1, 2, h, w]);
        let (lo, hi) = split_bands(&x, &build_lowpass_mask(h, w, k).unwrap()).unwrap();
        for ((l, hh), v) in lo.to_vec().iter().zip(hi.to_vec()).zip(x.to_vec()) {
            prop_assert!((l + hh - v).abs() <= 1e-6);
        }
    }
}
