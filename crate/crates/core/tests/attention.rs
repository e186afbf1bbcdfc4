use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdd_core::net::{fuse, gam, lam};
use tdd_tensor::{Graph, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eye(c: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![c, c, 1, 1]);
    for i in 0..c {
        t.data_mut()[i * c + i] = 1.0;
    }
    t
}

struct GamParams {
    q: (Tensor<f64>, Tensor<f64>),
    k: (Tensor<f64>, Tensor<f64>),
    w: Tensor<f64>,
}

impl GamParams {
    fn random(rng: &mut ChaCha8Rng, c: usize) -> Self {
        Self {
            q: (random(rng, vec![c, c, 1, 1]), random(rng, vec![c])),
            k: (random(rng, vec![c, c, 1, 1]), random(rng, vec![c])),
            w: random(rng, vec![c, c, 1, 1]),
        }
    }

    fn apply(&self, g: &mut Graph<f64>, x: Var, heads: usize) -> (Var, Vec<Var>) {
        let q = (g.input(self.q.0.clone()), g.input(self.q.1.clone()));
        let k = (g.input(self.k.0.clone()), g.input(self.k.1.clone()));
        let w = g.input(self.w.clone());
        gam(g, x, heads, q, k, w).unwrap()
    }
}

#[test]
fn gam_keeps_shape_and_weights_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(c, h, w, heads) in &[(8, 3, 3, 4), (4, 1, 1, 2), (6, 2, 5, 3), (8, 5, 5, 1)] {
        let p = GamParams::random(&mut rng, c);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, vec![c, h, w]));
        let (d2, weights) = p.apply(&mut g, x, heads);
        assert_eq!(g.shape(d2), &[c, h, w]);
        let fw = g.input(random(&mut rng, vec![c, 2 * c, 1, 1]));
        let fb = g.input(random(&mut rng, vec![c]));
        let out = fuse(&mut g, x, d2, fw, fb).unwrap();
        assert_eq!(g.shape(out), &[c, h, w]);
        assert_eq!(weights.len(), heads);
        for a in weights {
            let n = h * w;
            for row in g.value(a).chunks(n) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn gam_is_spatially_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10 {
        let (c, h, w, heads) = (8, 3 + trial % 3, 4, 2);
        let n = h * w;
        let p = GamParams::random(&mut rng, c);
        let x = random(&mut rng, vec![c, h, w]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; t.len()];
            for ch in 0..c {
                for (i, &src) in perm.iter().enumerate() {
                    out[ch * n + i] = t[ch * n + src];
                }
            }
            out
        };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (a, _) = p.apply(&mut g, xv, heads);
        let xp = g.input(Tensor::new(vec![c, h, w], permute(x.data())).unwrap());
        let (b, _) = p.apply(&mut g, xp, heads);
        let expect = permute(g.value(a));
        for (u, v) in g.value(b).iter().zip(&expect) {
            assert!((u - v).abs() < 1e-5);
        }
    }
}

#[test]
fn gam_single_location_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = GamParams::random(&mut rng, 4);
    p.w = eye(4);
    let mut g = Graph::new();
    let x = g.input(random(&mut rng, vec![4, 1, 1]));
    let (d2, _) = p.apply(&mut g, x, 2);
    assert_eq!(g.value(d2), g.value(x));
}

#[test]
fn gam_shared_value_vector_is_returned_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = GamParams::random(&mut rng, 4);
    p.w = eye(4);
    let v = [0.3, -0.7, 1.1, 0.25];
    let x = Tensor::new(vec![4, 3, 3], v.iter().flat_map(|&a| [a; 9]).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let (d2, _) = p.apply(&mut g, xv, 2);
    for (a, b) in g.value(d2).iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gam_zero_logits_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = GamParams::random(&mut rng, 2);
    p.q = (Tensor::zeros(vec![2, 2, 1, 1]), Tensor::zeros(vec![2]));
    p.w = eye(2);
    let x = random(&mut rng, vec![2, 2, 3]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let (d2, weights) = p.apply(&mut g, xv, 1);
    assert!(g.value(weights[0]).iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));
    for ch in 0..2 {
        let mean = x.data()[ch * 6..(ch + 1) * 6].iter().sum::<f64>() / 6.0;
        for &o in &g.value(d2)[ch * 6..(ch + 1) * 6] {
            assert!((o - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn gam_two_position_toy() {
    // Q = 1 everywhere, K = x, so logits are (x1, x2) = (0, ln 3)
    let p = GamParams {
        q: (Tensor::zeros(vec![1, 1, 1, 1]), Tensor::filled(vec![1], 1.0)),
        k: (Tensor::filled(vec![1, 1, 1, 1], 1.0), Tensor::zeros(vec![1])),
        w: eye(1),
    };
    let l3 = 3f64.ln();
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 1, 2], vec![0.0, l3]).unwrap());
    let (d2, weights) = p.apply(&mut g, x, 1);
    for row in g.value(weights[0]).chunks(2) {
        assert!((row[0] - 0.25).abs() < 1e-15 && (row[1] - 0.75).abs() < 1e-15);
    }
    for &o in g.value(d2) {
        assert!((o - 0.75 * l3).abs() < 1e-15);
    }
}

#[test]
fn lam_keeps_shape_and_weights_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &(c, h, w, win) in &[(4, 5, 5, (5, 5)), (3, 2, 7, (3, 5)), (8, 1, 1, (5, 5)), (2, 4, 3, (1, 3))] {
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, vec![c, h, w]));
        let a = lam(&mut g, x, win).unwrap();
        assert_eq!(g.shape(a), &[c, h, w]);
        let taps = win.0 * win.1;
        for row in g.attention_weights(a).unwrap().chunks(taps) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn lam_unit_window_passes_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.input(random(&mut rng, vec![3, 4, 4]));
    let a = lam(&mut g, x, (1, 1)).unwrap();
    assert_eq!(g.value(a), g.value(x));
    let fw = g.input(random(&mut rng, vec![3, 6, 1, 1]));
    let fb = g.input(random(&mut rng, vec![3]));
    let fused = fuse(&mut g, x, a, fw, fb).unwrap();
    let cat = g.concat(&[x, x], 0).unwrap();
    let direct = g.conv2d(cat, fw, Some(fb), Default::default()).unwrap();
    assert_eq!(g.value(fused), g.value(direct));
}

#[test]
fn lam_constant_field_interior_is_constant() {
    let mut g = Graph::new();
    let x = g.input(Tensor::filled(vec![2, 7, 7], 0.4f64));
    let a = lam(&mut g, x, (3, 3)).unwrap();
    for ch in 0..2 {
        for r in 1..6 {
            for c in 1..6 {
                assert!((g.value(a)[(ch * 7 + r) * 7 + c] - 0.4).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn lam_three_tap_hand_calculation() {
    let (a, b) = (1.0f64, 2.0f64);
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 1, 3], vec![a, b, a]).unwrap());
    let out = lam(&mut g, x, (1, 3)).unwrap();
    let (la, lb) = (b * a, b * b);
    let z = 2.0 * la.exp() + lb.exp();
    let (wa, wb) = (la.exp() / z, lb.exp() / z);
    let w = g.attention_weights(out).unwrap();
    assert!((w[3] - wa).abs() < 1e-15 && (w[4] - wb).abs() < 1e-15 && (w[5] - wa).abs() < 1e-15);
    assert!((g.value(out)[1] - (2.0 * wa * a + wb * b)).abs() < 1e-15);
}
