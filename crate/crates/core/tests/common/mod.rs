//! Checks shared by the per-module integration tests and the acceptance run.
#![allow(dead_code)]

use nutrifuse_core::config::Config;
use nutrifuse_core::dataset::Batch;
use nutrifuse_core::depth::{corrupt_depth, fit_affine_closed_form, Corruption, Ssra};
use nutrifuse_core::fusion::{alignment_loss, build_lowpass_mask, fafm_fuse, split_bands, FusionLayer};
use nutrifuse_core::head::{cross_attend, mask_channels, predict_head, unify, ChannelMask, CrossAttentionBlock, GatedFusion, PredictHead, Unifier};
use nutrifuse_core::losses::{nutri_loss, TaskWeights};
use nutrifuse_core::model::{ModelConfig, NutritionModel};
use nutrifuse_core::nn::{Builder, ParamStore};
use nutrifuse_core::optim::{cosine_lr, Adam};
use nutrifuse_core::synth::{compose_scene, gen_library, random_placements, NutrientDatabase, SynthConfig};
use nutrifuse_core::train::batch_objective;
use nutrifuse_tensor::gradcheck::{Directions, GradCheck, GradCheckReport};
use nutrifuse_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const MODEL_GRAD_TOL: f64 = 1e-3;

pub fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::parameter(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn constant(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Overwrites every parameter with uniform noise so zero-initialized layers
/// do not hide gradient paths.
pub fn randomize(store: &ParamStore<f64>, rng: &mut ChaCha8Rng, amplitude: f64) {
    for (_, t) in store.iter() {
        let v: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
        t.assign(&v).unwrap();
    }
}

/// Contracts a tensor against fixed random weights.
pub fn project(t: &Tensor<f64>, seed: u64) -> nutrifuse_tensor::Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(t.shape(), (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    t.mul(&w)?.sum()
}

fn run(leaves: &[Tensor<f64>], f: impl Fn() -> nutrifuse_core::Result<Tensor<f64>>) -> GradCheckReport {
    GradCheck::new(Directions::Random(20))
        .run(leaves, || f().map_err(|e| nutrifuse_tensor::TensorError::Contract(e.to_string())))
        .unwrap()
}

fn with_leaves(store: &ParamStore<f64>, extra: &[&Tensor<f64>]) -> Vec<Tensor<f64>> {
    store.tensors().into_iter().chain(extra.iter().map(|t| (*t).clone())).collect()
}

/// Finite-difference reports for every differentiable building block.
pub fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let mut out = Vec::new();

    let x = leaf(&mut rng, &[2, 3, 7, 6]);
    let w = leaf(&mut rng, &[4, 3, 3, 3]);
    let b = leaf(&mut rng, &[4]);
    out.push(("conv", run(&[x.clone(), w.clone(), b.clone()], || Ok(project(&x.conv2d(&w, Some(&b), 2, 1)?, 1)?))));

    let p = leaf(&mut rng, &[2, 3, 7, 5]);
    out.push(("pooling", run(&[p.clone()], || {
        let a = project(&p.adaptive_avg_pool(3, 2)?, 2)?;
        Ok(a.add(&project(&p.global_avg_pool()?, 3)?)?)
    })));

    let mut store = ParamStore::new();
    let block = CrossAttentionBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "a", 4, 3).unwrap();
    randomize(&store, &mut rng, 1.0);
    let (q, c) = (leaf(&mut rng, &[2, 3, 4]), leaf(&mut rng, &[2, 5, 4]));
    let leaves = with_leaves(&store, &[&q, &c]);
    out.push(("attention", run(&leaves, || Ok(project(&cross_attend(&q, &c, &block)?, 4)?))));

    let mut store = ParamStore::new();
    let gate = GatedFusion::new(&mut Builder { store: &mut store, rng: &mut rng }, "g", 4).unwrap();
    let (ga, gb) = (leaf(&mut rng, &[2, 3, 4]), leaf(&mut rng, &[2, 3, 4]));
    let leaves = with_leaves(&store, &[&ga, &gb]);
    out.push(("gated fusion", run(&leaves, || Ok(project(&gate.forward(&ga, &gb)?, 5)?))));

    let mut store = ParamStore::new();
    let cm = ChannelMask::new(&mut Builder { store: &mut store, rng: &mut rng }, "m", 8, 0.5).unwrap();
    randomize(&store, &mut rng, 1.0);
    let mx = leaf(&mut rng, &[2, 8, 3, 1]);
    let leaves = with_leaves(&store, &[&mx]);
    out.push(("channel mask", run(&leaves, || Ok(project(&mask_channels(&mx, &cm)?, 6)?))));

    let mut store = ParamStore::new();
    let (unifier, head) = {
        let mut bld = Builder { store: &mut store, rng: &mut rng };
        (Unifier::new(&mut bld, "u", &[3, 5], 4, 2).unwrap(), PredictHead::new(&mut bld, "h", 4).unwrap())
    };
    let (f0, f1) = (leaf(&mut rng, &[2, 3, 6, 6]), leaf(&mut rng, &[2, 5, 3, 3]));
    let leaves = with_leaves(&store, &[&f0, &f1]);
    out.push(("unify and head", run(&leaves, || {
        let u = unify(&[f0.clone(), f1.clone()], &unifier)?;
        Ok(project(&predict_head(&u[0].add(&u[1])?, &head)?, 7)?)
    })));

    let mut store = ParamStore::new();
    let ssra = Ssra::new(&mut Builder { store: &mut store, rng: &mut rng }, "s", Some(4)).unwrap();
    randomize(&store, &mut rng, 0.5);
    let d = leaf(&mut rng, &[2, 1, 6, 5]);
    let leaves = with_leaves(&store, &[&d]);
    out.push(("ssra", run(&leaves, || Ok(project(&ssra.forward(&d)?, 8)?))));

    let mut store = ParamStore::new();
    let layer = FusionLayer::new(&mut Builder { store: &mut store, rng: &mut rng }, "f", 3).unwrap();
    let mask = build_lowpass_mask(5, 6, 0.4).unwrap();
    let (r, dd) = (leaf(&mut rng, &[2, 3, 5, 6]), leaf(&mut rng, &[2, 3, 5, 6]));
    let leaves = with_leaves(&store, &[&r, &dd]);
    out.push(("fafm", run(&leaves, || Ok(project(&fafm_fuse(&r, &dd, &mask, &layer)?.fused, 9)?))));

    let (fr, fd) = (leaf(&mut rng, &[4, 6]), leaf(&mut rng, &[4, 6]));
    out.push(("alignment loss", run(&[fr.clone(), fd.clone()], || alignment_loss(&fr, &fd, 0.5))));

    let preds = Tensor::parameter(&[4, 5], (0..20).map(|_| rng.gen_range(0.5..3.0)).collect()).unwrap();
    let targets = constant(&mut rng, &[4, 5], 0.5, 3.0);
    let mut tw = TaskWeights::new(0.3).unwrap();
    tw.update([1.0, 2.0, 1.5, 1.2, 3.0]).unwrap();
    out.push(("nutri loss", run(&[preds.clone()], || nutri_loss(&preds, &targets, &tw))));
    out
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        widths: vec![4, 8],
        unify_width: 4,
        grid: 2,
        d_attn: 4,
        refiner_width: 4,
        ..ModelConfig::default()
    }
}

/// Full objective (task, alignment and auxiliary depth terms) of a tiny
/// model checked on 20 random parameter coordinates.
pub fn full_model_gradcheck() -> GradCheckReport {
    let mut cfg = Config::default();
    cfg.model = tiny_model_config();
    let model = NutritionModel::<f64>::new(&cfg.model, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    // Break the zero initializations (refiner output, attention values) so every path carries gradient.
    for (name, t) in model.params.iter() {
        if t.to_vec().iter().all(|&v| v == 0.0) || name.contains("alpha") {
            let v: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(0.2..0.6)).collect();
            t.assign(&v).unwrap();
        }
    }
    model.set_output_scale([300.0, 200.0, 10.0, 30.0, 12.0]).unwrap();
    let n = 3;
    let d_gt = constant(&mut rng, &[n, 1, 16, 16], 0.45, 0.6);
    let batch = Batch {
        rgb: constant(&mut rng, &[n, 3, 16, 16], 0.0, 1.0),
        d_mono: d_gt.scale_shift(0.5, -0.25).unwrap(),
        d_gt,
        targets: Tensor::from_vec(&[n, 5], (0..n * 5).map(|i| 10.0 + 37.0 * (i % 7) as f64).collect()).unwrap(),
    };
    let mut tw = TaskWeights::new(0.3).unwrap();
    tw.update([1.1, 1.4, 2.0, 1.3, 1.7]).unwrap();
    let params = model.params.tensors();
    GradCheck::new(Directions::Coordinates(20))
        .seed(7)
        .run(&params, || {
            batch_objective(&model, &batch, &tw, &cfg)
                .map(|(total, _, _)| total)
                .map_err(|e| nutrifuse_tensor::TensorError::Contract(e.to_string()))
        })
        .unwrap()
}

pub fn random_field(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    constant(rng, shape, -1.0, 1.0)
}

/// Worst deviations of the band identities over the required sizes.
#[derive(Debug, Default)]
pub struct BandReport {
    pub reconstruction: f64,
    pub energy: f64,
    pub band_sum: f64,
    pub monotone: bool,
}

pub const BAND_SIZES: [usize; 5] = [3, 4, 5, 8, 16];
pub const KAPPAS: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

pub fn band_identities() -> BandReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xba4d);
    let mut rep = BandReport { monotone: true, ..Default::default() };
    for &h in &BAND_SIZES {
        for &w in &BAND_SIZES {
            let x = random_field(&mut rng, &[2, 3, h, w]);
            let y = random_field(&mut rng, &[2, 3, h, w]);
            let xv = x.to_vec();
            let energy: f64 = xv.iter().map(|v| v * v).sum();
            let mut prev: Option<Vec<f64>> = None;
            for &k in &KAPPAS {
                let mask = build_lowpass_mask(h, w, k).unwrap();
                if let Some(p) = &prev {
                    rep.monotone &= p.iter().zip(&mask.mask).all(|(a, b)| a <= b);
                }
                prev = Some(mask.mask.clone());
                let (lo, hi) = split_bands(&x, &mask).unwrap();
                let (lo, hi) = (lo.to_vec(), hi.to_vec());
                for i in 0..xv.len() {
                    rep.reconstruction = rep.reconstruction.max((lo[i] + hi[i] - xv[i]).abs());
                }
                let parts: f64 = lo.iter().chain(&hi).map(|v| v * v).sum();
                rep.energy = rep.energy.max((parts - energy).abs() / energy);

                let (ylo, yhi) = split_bands(&y, &mask).unwrap();
                let yv = y.to_vec();
                let (ylo, yhi) = (ylo.to_vec(), yhi.to_vec());
                for i in 0..xv.len() {
                    let fh = hi[i] + yhi[i];
                    let fl = lo[i] + ylo[i];
                    rep.band_sum = rep.band_sum.max((fh + fl - xv[i] - yv[i]).abs());
                }
            }
        }
    }
    rep
}

/// `(N=1 value, |uniform - ln N|, |orthonormal - ln(1 + e^-1)|)`.
pub fn alignment_closed_forms() -> (f64, f64, f64) {
    let one = Tensor::<f64>::from_vec(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
    let other = Tensor::<f64>::from_vec(&[1, 3], vec![1.0, 0.5, 0.1]).unwrap();
    let single = alignment_loss(&one, &other, 0.07).unwrap().item();

    let n = 5;
    let same = Tensor::<f64>::full(&[n, 4], 0.7);
    let uniform = (alignment_loss(&same, &same, 0.3).unwrap().item() - (n as f64).ln()).abs();

    let eye = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let ortho = (alignment_loss(&eye, &eye, 1.0).unwrap().item() - expected).abs();
    (single, uniform, ortho)
}

/// Ground-truth depth planes rendered from synthetic scenes.
pub fn scene_depths(count: usize, canvas: usize) -> Tensor<f64> {
    let cfg = SynthConfig { canvas, height_range: [0.05, 0.2], radius_range: [0.12, 0.3], ..SynthConfig::default() };
    let db = NutrientDatabase::builtin();
    let lib = gen_library(&db, &cfg).unwrap();
    let mut planes = Vec::with_capacity(count * canvas * canvas);
    for i in 0..count {
        let pl = random_placements(&lib, &cfg, 900 + i as u64);
        planes.extend(compose_scene(&lib, &pl, &db, &cfg, 900 + i as u64).unwrap().depth);
    }
    Tensor::from_vec(&[count, 1, canvas, canvas], planes).unwrap()
}

#[derive(Debug)]
pub struct SsraRecovery {
    pub fitted: (f64, f64),
    pub oracle: (f64, f64),
    pub steps: usize,
    pub rmse_affine: f64,
    pub rmse_refined: f64,
}

fn rmse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (a, b) = (a.to_vec(), b.to_vec());
    (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Full-batch L2 training of the adapter toward ground truth.
pub fn fit_adapter(d_mono: &Tensor<f64>, d_gt: &Tensor<f64>, refiner: Option<usize>, steps: usize, lr: f64) -> (Ssra<f64>, f64) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ssra = Ssra::new(&mut Builder { store: &mut store, rng: &mut rng }, "ssra", refiner).unwrap();
    let params = store.tensors();
    let mut adam = Adam::new(&params, lr, 0.0);
    for step in 0..steps {
        adam.lr = cosine_lr(lr, step, steps);
        store.zero_grad();
        ssra.forward(d_mono).unwrap().sub(d_gt).unwrap().square().unwrap().mean().unwrap().backward().unwrap();
        adam.step(&params).unwrap();
    }
    let err = rmse(&nutrifuse_tensor::no_grad(|| ssra.forward(d_mono)).unwrap(), d_gt);
    (ssra, err)
}

pub const SSRA_STEPS: usize = 2000;
/// Peak rates: the two-parameter affine fit tolerates a much larger step than the convolutional refiner.
pub const AFFINE_LR: f64 = 0.1;
pub const REFINER_LR: f64 = 0.02;

pub fn ssra_recovery() -> SsraRecovery {
    let d_gt = scene_depths(4, 32);
    let affine = Corruption { scale: 2.0, shift: 0.5, distortion: 0.0, noise_sd: 0.0 };
    let d_mono = corrupt_depth(&d_gt, affine, 5).unwrap();
    let oracle = fit_affine_closed_form(&d_mono.to_vec(), &d_gt.to_vec()).unwrap();
    let (ssra, _) = fit_adapter(&d_mono, &d_gt, None, SSRA_STEPS, AFFINE_LR);
    let fitted = ssra.calibration.values();

    let distorted = corrupt_depth(&d_gt, Corruption { distortion: 0.01, ..affine }, 5).unwrap();
    let (_, rmse_affine) = fit_adapter(&distorted, &d_gt, None, SSRA_STEPS, AFFINE_LR);
    let (_, rmse_refined) = fit_adapter(&distorted, &d_gt, Some(16), SSRA_STEPS, REFINER_LR);
    SsraRecovery { fitted, oracle, steps: SSRA_STEPS, rmse_affine, rmse_refined }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[derive(Debug)]
pub struct LossMechanics {
    pub kpi_half: f64,
    pub fixed_point_moved: f64,
    /// Largest `||w_t - w*|| / ((1 - alpha)^t ||w_0 - w*||)` over 50 steps.
    pub worst_contraction: f64,
    pub distance_at_50: f64,
    /// Largest deviation over the PMAE hand cases.
    pub pmae_error: f64,
}

fn dist(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn loss_mechanics() -> LossMechanics {
    use nutrifuse_core::losses::{kpi, pmae, renormalized};

    let mut tw = TaskWeights::new(0.3).unwrap();
    tw.w = [0.5, 1.0, 1.0, 1.5, 1.0];
    let before = tw.w;
    tw.update(before).unwrap();
    let fixed_point_moved = dist(&tw.w, &before);

    let k = [1.0, 1.25, 2.0, 4.0, 1.5];
    let target = renormalized(k);
    let mut tw = TaskWeights::new(0.3).unwrap();
    let start = dist(&tw.w, &target);
    let mut worst_contraction = 0.0f64;
    for t in 1..=50 {
        tw.update(k).unwrap();
        worst_contraction = worst_contraction.max(dist(&tw.w, &target) / (0.7f64.powi(t) * start));
    }
    let distance_at_50 = dist(&tw.w, &target);

    let cases: [(&[f64], &[f64], f64); 3] =
        [(&[100.0], &[90.0], 0.1), (&[3.0, 7.0], &[3.0, 7.0], 0.0), (&[50.0, 150.0], &[60.0, 140.0], 0.1)];
    let pmae_error = cases
        .iter()
        .map(|(t, p, want)| (pmae(t, p).unwrap() - want).abs())
        .fold(0.0, f64::max);
    LossMechanics { kpi_half: kpi(0.5), fixed_point_moved, worst_contraction, distance_at_50, pmae_error }
}
