use nutrifuse_tensor::{fft2, ifft2, Tensor};
use proptest::prelude::*;

/// Direct O((HW)^2) DFT summation.
fn dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for y in 0..h {
                for xx in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    re[u * w + v] += x[y * w + xx] * phase.cos();
                    im[u * w + v] += x[y * w + xx] * phase.sin();
                }
            }
        }
    }
    (re, im)
}

fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn matches_direct_dft() {
    for (h, w) in [(3, 3), (4, 5), (5, 8), (6, 7)] {
        let data = pseudo_random(h * w, (h * 31 + w) as u64);
        let f = fft2(&Tensor::from_vec(&[h, w], data.clone()).unwrap()).unwrap();
        let (re, im) = dft2(&data, h, w);
        for i in 0..h * w {
            assert!((f.re()[i] - re[i]).abs() < 1e-10, "{}x{} bin {}", h, w, i);
            assert!((f.im()[i] - im[i]).abs() < 1e-10, "{}x{} bin {}", h, w, i);
        }
    }
}

#[test]
fn checkerboard_energy_sits_at_nyquist() {
    let data: Vec<f64> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let f = fft2(&Tensor::from_vec(&[4, 4], data.clone()).unwrap()).unwrap();
    let (re, _) = dft2(&data, 4, 4);
    let nyquist = 2 * 4 + 2;
    assert!((re[nyquist] - 16.0).abs() < 1e-12);
    for i in 0..16 {
        let expected = if i == nyquist { 16.0 } else { 0.0 };
        assert!((f.re()[i] - expected).abs() < 1e-12);
        assert!(f.im()[i].abs() < 1e-12);
    }
}

#[test]
fn round_trip_and_parseval_on_required_sizes() {
    for n in [3usize, 4, 5, 8] {
        let data = pseudo_random(2 * n * n, n as u64);
        let x = Tensor::from_vec(&[2, n, n], data.clone()).unwrap();
        let spec = fft2(&x).unwrap();
        let back = ifft2(&spec).unwrap();
        let max_err = back.re().iter().zip(&data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let max_im = back.im().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max_err < 1e-9 && max_im < 1e-9, "n={} err={} im={}", n, max_err, max_im);

        for p in 0..2 {
            let plane = &data[p * n * n..(p + 1) * n * n];
            let e_space: f64 = plane.iter().map(|v| v * v).sum();
            let e_freq: f64 = (p * n * n..(p + 1) * n * n)
                .map(|i| spec.re()[i].powi(2) + spec.im()[i].powi(2))
                .sum::<f64>()
                / (n * n) as f64;
            assert!((e_space - e_freq).abs() / e_space < 1e-8);
        }
    }
}

proptest! {
    #[test]
    fn inverse_undoes_forward(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let data = pseudo_random(h * w, seed);
        let x = Tensor::from_vec(&[h, w], data.clone()).unwrap();
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        for (a, b) in back.re().iter().zip(&data) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_file_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let t32 = Tensor::<f32>::from_vec(&shape, pseudo_random(n, seed).iter().map(|&v| v as f32).collect()).unwrap();
        let bytes = nutrifuse_tensor::io::encode(&t32);
        let (back, _, rest) = nutrifuse_tensor::io::decode::<f32>(&bytes).unwrap();
        prop_assert!(rest.is_empty());
        prop_assert_eq!(back.shape(), t32.shape());
        prop_assert_eq!(back.to_vec(), t32.to_vec());
    }
}
