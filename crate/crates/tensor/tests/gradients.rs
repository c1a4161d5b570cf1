//! Finite-difference checks of every differentiable tensor operation.

use nutrifuse_tensor::gradcheck::{Directions, GradCheck};
use nutrifuse_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::parameter(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive_leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::parameter(shape, (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap()
}

/// Projects a tensor onto fixed random weights so every output element
/// contributes a distinct amount to the scalar loss.
fn project(t: &Tensor<f64>, seed: u64) -> nutrifuse_tensor::Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(t.shape(), (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    t.mul(&w)?.sum()
}

fn check(name: &str, leaves: &[Tensor<f64>], f: impl Fn() -> nutrifuse_tensor::Result<Tensor<f64>>) {
    let report = GradCheck::new(Directions::Random(20)).run(leaves, f).unwrap();
    assert!(report.passes(TOL), "{}: max rel err {:e} (worst {:?})", name, report.max_rel_err, report.worst);
    assert_eq!(report.checked, 20);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = leaf(&mut rng, &[2, 3, 4]);
    let b = leaf(&mut rng, &[2, 3, 4]);
    let p = positive_leaf(&mut rng, &[2, 3, 4]);
    check("add", &[a.clone(), b.clone()], || project(&a.add(&b)?, 1));
    check("sub", &[a.clone(), b.clone()], || project(&a.sub(&b)?, 2));
    check("mul", &[a.clone(), b.clone()], || project(&a.mul(&b)?, 3));
    check("sigmoid", &[a.clone()], || project(&a.sigmoid()?, 4));
    check("relu", &[a.clone()], || project(&a.relu()?, 5));
    check("softplus", &[a.clone()], || project(&a.softplus()?, 6));
    check("scale_shift", &[a.clone()], || project(&a.scale_shift(-1.5, 0.25)?, 7));
    check("exp", &[a.clone()], || project(&a.exp()?, 8));
    check("ln", &[p.clone()], || project(&p.ln()?, 9));
    check("abs", &[a.clone()], || project(&a.abs()?, 10));
    check("square", &[a.clone()], || project(&a.square()?, 11));
}

#[test]
fn affine_with_tensor_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = leaf(&mut rng, &[2, 1, 3, 3]);
    let alpha = leaf(&mut rng, &[1]);
    let beta = leaf(&mut rng, &[1]);
    check("affine", &[x.clone(), alpha.clone(), beta.clone()], || project(&x.affine(&alpha, &beta)?, 12));
}

#[test]
fn reductions_and_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = leaf(&mut rng, &[3, 4, 2]);
    let bias = leaf(&mut rng, &[4]);
    let m = leaf(&mut rng, &[3, 4]);
    check("sum_axis", &[x.clone()], || project(&x.sum_axis(1)?, 13));
    check("mean_axis", &[x.clone()], || project(&x.mean_axis(0)?, 14));
    check("mean", &[x.clone()], || x.square()?.mean());
    check("add_bias", &[x.clone(), bias.clone()], || project(&x.add_bias(&bias, 1)?, 15));
    check("mul_prefix", &[x.clone(), m.clone()], || project(&x.mul_prefix(&m)?, 16));
    check("minmax_normalize", &[x.clone()], || project(&x.minmax_normalize(1e-3)?, 17));
}

#[test]
fn convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = leaf(&mut rng, &[2, 3, 6, 5]);
    let w = leaf(&mut rng, &[4, 3, 3, 3]);
    let b = leaf(&mut rng, &[4]);
    check("conv2d s1 p1", &[x.clone(), w.clone(), b.clone()], || project(&x.conv2d(&w, Some(&b), 1, 1)?, 18));
    check("conv2d s2 p1", &[x.clone(), w.clone(), b.clone()], || project(&x.conv2d(&w, Some(&b), 2, 1)?, 19));
    let w1 = leaf(&mut rng, &[2, 3, 1, 1]);
    check("conv2d 1x1", &[x.clone(), w1.clone()], || project(&x.conv2d(&w1, None, 1, 0)?, 20));
}

#[test]
fn conv_sum_matches_coordinate_differences() {
    // d sum(conv2d(x, w)) checked coordinate by coordinate as well.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = leaf(&mut rng, &[1, 2, 4, 4]);
    let w = leaf(&mut rng, &[3, 2, 2, 2]);
    let report = GradCheck::new(Directions::Coordinates(40))
        .run(&[x.clone(), w.clone()], || x.conv2d(&w, None, 1, 0)?.sum())
        .unwrap();
    assert!(report.passes(TOL), "{:?}", report);
}

#[test]
fn pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = leaf(&mut rng, &[2, 3, 7, 5]);
    check("global_avg_pool", &[x.clone()], || project(&x.global_avg_pool()?, 21));
    check("adaptive_avg_pool", &[x.clone()], || project(&x.adaptive_avg_pool(3, 2)?, 22));
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = leaf(&mut rng, &[3, 4]);
    let b = leaf(&mut rng, &[4, 5]);
    check("matmul", &[a.clone(), b.clone()], || project(&a.matmul(&b)?, 23));
    let p = leaf(&mut rng, &[2, 3, 4]);
    let q = leaf(&mut rng, &[2, 4, 5]);
    let r = leaf(&mut rng, &[2, 5, 4]);
    check("bmm", &[p.clone(), q.clone()], || project(&p.bmm(&q)?, 24));
    check("bmm_bt", &[p.clone(), r.clone()], || project(&p.bmm_bt(&r)?, 25));
    check("softmax_rows", &[a.clone()], || project(&a.softmax_rows()?, 26));
    check("log_softmax_rows", &[a.clone()], || project(&a.log_softmax_rows()?, 27));
    check("l2_normalize", &[a.clone()], || project(&a.l2_normalize_rows()?, 28));
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = leaf(&mut rng, &[2, 2, 3, 3]);
    let b = leaf(&mut rng, &[2, 3, 3, 3]);
    check("concat_channels", &[a.clone(), b.clone()], || {
        project(&Tensor::concat_channels(&[a.clone(), b.clone()])?, 29)
    });
    check("permute", &[b.clone()], || project(&b.permute(&[0, 2, 3, 1])?, 30));
    check("reshape", &[b.clone()], || project(&b.reshape(&[6, 9])?, 31));
    let c = leaf(&mut rng, &[2, 4, 3]);
    let d = leaf(&mut rng, &[2, 1, 3]);
    check("concat axis 1", &[c.clone(), d.clone()], || project(&Tensor::concat(&[c.clone(), d.clone()], 1)?, 32));
}

#[test]
fn band_split_both_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = leaf(&mut rng, &[2, 2, 5, 6]);
    // conjugate-symmetric mask: keep |fy| <= 1 and |fx| <= 1
    let mut mask = vec![0.0; 30];
    for y in 0..5usize {
        for xx in 0..6usize {
            let fy = y.min(5 - y);
            let fx = xx.min(6 - xx);
            if fy <= 1 && fx <= 1 {
                mask[y * 6 + xx] = 1.0;
            }
        }
    }
    check("band_low", &[x.clone()], || project(&x.band_split(&mask, 1e-9)?.0, 33));
    check("band_high", &[x.clone()], || project(&x.band_split(&mask, 1e-9)?.1, 34));
}

#[test]
fn composite_chain() {
    // conv -> relu -> pool -> linear -> softmax -> log, all in one graph with fan-out
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = leaf(&mut rng, &[2, 1, 6, 6]);
    let w = leaf(&mut rng, &[3, 1, 3, 3]);
    let lin = leaf(&mut rng, &[3, 4]);
    check("composite", &[x.clone(), w.clone(), lin.clone()], || {
        let h = x.conv2d(&w, None, 1, 1)?.softplus()?;
        let pooled = h.global_avg_pool()?;
        let z = pooled.matmul(&lin)?;
        let y = z.add(&z.sigmoid()?)?.log_softmax_rows()?;
        project(&y, 35)
    });
}
