use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wrtsam::tensor_core::{attention_block, grad_check, Activation, AttentionBlockVars, Graph, StripOrientation, Var};
use wrtsam::{Error, Execution, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

fn run(inputs: &[Tensor], f: impl FnOnce(&mut Graph, &[Var]) -> wrtsam::Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).clone()
}

/// Zero-padded "same" depthwise convolution by direct summation.
fn depthwise_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let [_, _, kh, kw] = k.shape();
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    Tensor::from_fn([n, c, h, w], |ni, ci, y, xx| {
        let mut s = b.data()[ci];
        for i in 0..kh {
            for j in 0..kw {
                let (sy, sx) = (y as isize + i as isize - ph, xx as isize + j as isize - pw);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    s += k.at(ci, 0, i, j) * x.at(ni, ci, sy as usize, sx as usize);
                }
            }
        }
        s
    })
}

fn dense_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, _, kh, kw] = k.shape();
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    Tensor::from_fn([n, cout, h, w], |ni, co, y, xx| {
        let mut s = b.data()[co];
        for ci in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let (sy, sx) = (y as isize + i as isize - ph, xx as isize + j as isize - pw);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        s += k.at(co, ci, i, j) * x.at(ni, ci, sy as usize, sx as usize);
                    }
                }
            }
        }
        s
    })
}

fn delta_kernel(c: usize, kh: usize, kw: usize) -> Tensor {
    Tensor::from_fn([c, 1, kh, kw], |_, _, i, j| if i == kh / 2 && j == kw / 2 { 1.0 } else { 0.0 })
}

#[test]
fn depthwise_identity_annihilation_and_loop_oracle() {
    let mut r = rng(1);
    let x = rand([1, 2, 5, 5], &mut r);
    let zero_b = Tensor::zeros([1, 1, 1, 2]);
    assert_eq!(run(&[x.clone(), delta_kernel(2, 3, 3), zero_b.clone()], |g, v| g.conv2d_depthwise(v[0], v[1], v[2])), x);
    let z = run(&[x.clone(), Tensor::zeros([2, 1, 3, 3]), zero_b], |g, v| g.conv2d_depthwise(v[0], v[1], v[2]));
    assert!(z.data().iter().all(|&v| v == 0.0));
    let k = rand([2, 1, 3, 3], &mut r);
    let b = rand([1, 1, 1, 2], &mut r);
    let y = run(&[x.clone(), k.clone(), b.clone()], |g, v| g.conv2d_depthwise(v[0], v[1], v[2]));
    assert!(y.max_abs_diff(&depthwise_oracle(&x, &k, &b)) <= 1e-12);
}

#[test]
fn strip_pair_equals_outer_product_kernel() {
    let mut r = rng(2);
    for k in [3, 7] {
        let x = rand([1, 2, 8, 8], &mut r);
        let a = rand([2, 1, 1, k], &mut r);
        let bcol = rand([2, 1, k, 1], &mut r);
        let zero = Tensor::zeros([1, 1, 1, 2]);
        let y = run(&[x.clone(), a.clone(), bcol.clone(), zero.clone()], |g, v| {
            let h = g.conv2d_strip(v[0], v[1], v[3], StripOrientation::Horizontal)?;
            g.conv2d_strip(h, v[2], v[3], StripOrientation::Vertical)
        });
        let dense = Tensor::from_fn([2, 1, k, k], |c, _, i, j| bcol.at(c, 0, i, 0) * a.at(c, 0, 0, j));
        assert!(y.max_abs_diff(&depthwise_oracle(&x, &dense, &zero)) <= 1e-12);
        assert_eq!(
            run(&[x.clone(), delta_kernel(2, 1, k), zero.clone()], |g, v| g.conv2d_strip(v[0], v[1], v[2], StripOrientation::Horizontal)),
            x
        );
    }
}

#[test]
fn averaging_strip_attenuates_borders_by_overlap() {
    let (k, w) = (5, 9);
    let x = Tensor::full([1, 1, 3, w], 2.0);
    let kern = Tensor::full([1, 1, 1, k], 1.0 / k as f64);
    let y = run(&[x, kern, Tensor::zeros([1, 1, 1, 1])], |g, v| g.conv2d_strip(v[0], v[1], v[2], StripOrientation::Horizontal));
    for col in 0..w {
        let lo = col.saturating_sub(k / 2);
        let hi = (col + k / 2).min(w - 1);
        let overlap = (hi - lo + 1) as f64;
        assert!((y.at(0, 0, 1, col) - 2.0 * overlap / k as f64).abs() <= 1e-15);
    }
}

#[test]
fn dense_and_pointwise_match_oracles() {
    let mut r = rng(3);
    let x = rand([2, 3, 6, 7], &mut r);
    let k = rand([4, 3, 3, 3], &mut r);
    let b = rand([1, 1, 1, 4], &mut r);
    let y = run(&[x.clone(), k.clone(), b.clone()], |g, v| g.conv2d_dense(v[0], v[1], v[2]));
    assert!(y.max_abs_diff(&dense_oracle(&x, &k, &b)) <= 1e-12);

    let x = rand([1, 4, 2, 2], &mut r);
    let wt = rand([2, 4, 1, 1], &mut r);
    let b = rand([1, 1, 1, 2], &mut r);
    let y = run(&[x.clone(), wt.clone(), b.clone()], |g, v| g.conv2d_pointwise(v[0], v[1], v[2]));
    let oracle =
        Tensor::from_fn([1, 2, 2, 2], |_, o, i, j| b.data()[o] + (0..4).map(|c| wt.at(o, c, 0, 0) * x.at(0, c, i, j)).sum::<f64>());
    assert!(y.max_abs_diff(&oracle) <= 1e-12);
    let eye = Tensor::from_fn([4, 4, 1, 1], |o, c, _, _| if o == c { 1.0 } else { 0.0 });
    assert_eq!(run(&[x.clone(), eye, Tensor::zeros([1, 1, 1, 4])], |g, v| g.conv2d_pointwise(v[0], v[1], v[2])), x);
}

#[test]
fn fully_connected_matches_matrix_product() {
    let mut r = rng(4);
    let x = rand([1, 1, 3, 4], &mut r);
    let w = rand([1, 1, 4, 2], &mut r);
    let b = rand([1, 1, 1, 2], &mut r);
    let y = run(&[x.clone(), w.clone(), b.clone()], |g, v| g.fully_connected(v[0], v[1], v[2]));
    let oracle = Tensor::from_fn([1, 1, 3, 2], |_, _, i, j| b.data()[j] + (0..4).map(|k| x.at(0, 0, i, k) * w.at(0, 0, k, j)).sum::<f64>());
    assert!(y.max_abs_diff(&oracle) <= 1e-12);
    let y0 = run(&[Tensor::zeros([1, 1, 3, 4]), w, b.clone()], |g, v| g.fully_connected(v[0], v[1], v[2]));
    assert!((0..3).all(|i| (0..2).all(|j| y0.at(0, 0, i, j) == b.data()[j])));
    let eye = Tensor::from_fn([1, 1, 4, 4], |_, _, i, j| if i == j { 1.0 } else { 0.0 });
    assert_eq!(run(&[x.clone(), eye, Tensor::zeros([1, 1, 1, 4])], |g, v| g.fully_connected(v[0], v[1], v[2])), x);
}

#[test]
fn activations_match_closed_forms() {
    let x = Tensor::vector(vec![0.0, 3.0, -3.0]);
    let s = run(std::slice::from_ref(&x), |g, v| g.activation(v[0], Activation::Sigmoid));
    assert_eq!(s.data()[0], 0.5);
    let ge = run(std::slice::from_ref(&x), |g, v| g.activation(v[0], Activation::Gelu));
    // x * Phi(x) evaluated with 30-digit arithmetic.
    assert!((ge.data()[1] - 2.99595030590511).abs() <= 1e-10);
    assert!((ge.data()[2] + 0.00404969409489028).abs() <= 1e-10);
    let re = run(&[x], |g, v| g.activation(v[0], Activation::Relu));
    assert_eq!(re.data(), &[0.0, 3.0, 0.0]);
}

#[test]
fn two_token_single_head_attention_closed_form() {
    let d = 3;
    let mut r = rng(5);
    let qkv = rand([1, 1, 2, 3 * d], &mut r);
    let y = run(std::slice::from_ref(&qkv), |g, v| g.self_attention(v[0], 1));
    let row = |t: usize, off: usize| -> Vec<f64> { (0..d).map(|i| qkv.at(0, 0, t, off + i)).collect() };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for i in 0..2 {
        let q = row(i, 0);
        let s0 = dot(&q, &row(0, d)) / (d as f64).sqrt();
        let s1 = dot(&q, &row(1, d)) / (d as f64).sqrt();
        let p0 = 1.0 / (1.0 + (s1 - s0).exp());
        let (v0, v1) = (row(0, 2 * d), row(1, 2 * d));
        for c in 0..d {
            assert!((y.at(0, 0, i, c) - (p0 * v0[c] + (1.0 - p0) * v1[c])).abs() <= 1e-10);
        }
    }
}

#[test]
fn uniform_logits_average_the_values() {
    let (t, d) = (5, 4);
    let mut r = rng(6);
    let v = rand([1, 1, t, d], &mut r);
    let qkv = Tensor::from_fn([1, 1, t, 3 * d], |_, _, i, j| if j < 2 * d { 0.0 } else { v.at(0, 0, i, j - 2 * d) });
    let y = run(&[qkv], |g, vs| g.self_attention(vs[0], 2));
    for c in 0..d {
        let mean = (0..t).map(|i| v.at(0, 0, i, c)).sum::<f64>() / t as f64;
        assert!((0..t).all(|i| (y.at(0, 0, i, c) - mean).abs() <= 1e-14));
    }
}

fn block_inputs(d: usize, hidden: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let shapes = [
        [1, 1, 1, d],
        [1, 1, 1, d],
        [1, 1, d, 3 * d],
        [1, 1, 1, 3 * d],
        [1, 1, d, d],
        [1, 1, 1, d],
        [1, 1, 1, d],
        [1, 1, 1, d],
        [1, 1, d, hidden],
        [1, 1, 1, hidden],
        [1, 1, hidden, d],
        [1, 1, 1, d],
    ];
    shapes.iter().map(|s| rand(*s, r)).collect()
}

fn vars(v: &[Var]) -> AttentionBlockVars {
    AttentionBlockVars {
        ln1_gamma: v[0],
        ln1_beta: v[1],
        qkv_weight: v[2],
        qkv_bias: v[3],
        proj_weight: v[4],
        proj_bias: v[5],
        ln2_gamma: v[6],
        ln2_beta: v[7],
        mlp_in_weight: v[8],
        mlp_in_bias: v[9],
        mlp_out_weight: v[10],
        mlp_out_bias: v[11],
    }
}

#[test]
fn attention_block_keeps_token_shape() {
    let mut r = rng(7);
    let mut inputs = vec![rand([1, 1, 16, 32], &mut r)];
    inputs.extend(block_inputs(32, 64, &mut r));
    let y = run(&inputs, |g, v| attention_block(g, v[0], &vars(&v[1..]), 4, true));
    assert_eq!(y.shape(), [1, 1, 16, 32]);
    assert!(y.is_finite());
}

#[test]
fn backward_runs_once_in_reverse_order() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full([1, 1, 2, 2], 0.3), true);
    let a = g.activation(x, Activation::Gelu).unwrap();
    let b = g.mul(a, x).unwrap();
    let c = g.add(b, a).unwrap();
    let grads = g.backward(c, Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
    let order = grads.order().to_vec();
    let mut sorted = order.clone();
    sorted.sort_unstable_by(|p, q| q.cmp(p));
    assert_eq!(order, sorted);
    assert_eq!(grads.wrt(x).unwrap().shape(), [1, 1, 2, 2]);
    assert!(matches!(g.backward(c, Tensor::full([1, 1, 2, 2], 1.0)), Err(Error::GraphConsumed)));
}

#[test]
fn linear_op_gradient_is_exact() {
    let mut r = rng(8);
    let leaves = vec![
        ("x".to_string(), rand([1, 1, 3, 4], &mut r)),
        ("w".to_string(), rand([1, 1, 4, 2], &mut r)),
        ("b".to_string(), rand([1, 1, 1, 2], &mut r)),
    ];
    let report = grad_check(&leaves, |g, v| g.fully_connected(v[0], v[1], v[2]), 1e-5, Execution::Sequential).unwrap();
    assert!(report.max_rel_error <= 1e-9, "{}", report.max_rel_error);
}

proptest! {
    #[test]
    fn random_convolutions_match_direct_summation(
        n in 1usize..3, c in 1usize..5, h in 1usize..9, w in 1usize..9, kh in 0usize..3, kw in 0usize..3, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let (kh, kw) = (2 * kh + 1, 2 * kw + 1);
        let x = rand([n, c, h, w], &mut r);
        let k = rand([c, 1, kh, kw], &mut r);
        let b = rand([1, 1, 1, c], &mut r);
        let y = run(&[x.clone(), k.clone(), b.clone()], |g, v| g.conv2d_depthwise(v[0], v[1], v[2]));
        prop_assert!(y.max_abs_diff(&depthwise_oracle(&x, &k, &b)) <= 1e-12);
        let kd = rand([2, c, kh, kh], &mut r);
        let bd = rand([1, 1, 1, 2], &mut r);
        let y = run(&[x.clone(), kd.clone(), bd.clone()], |g, v| g.conv2d_dense(v[0], v[1], v[2]));
        prop_assert!(y.max_abs_diff(&dense_oracle(&x, &kd, &bd)) <= 1e-12);
    }

    #[test]
    fn mul_commutes_and_add_associates(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b, c) = (rand([1, 2, 3, 4], &mut r), rand([1, 2, 3, 4], &mut r), rand([1, 2, 3, 4], &mut r));
        let ab = run(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        let ba = run(&[b.clone(), a.clone()], |g, v| g.mul(v[0], v[1]));
        prop_assert_eq!(ab, ba);
        let left = run(&[a.clone(), b.clone(), c.clone()], |g, v| { let s = g.add(v[0], v[1])?; g.add(s, v[2]) });
        let right = run(&[a.clone(), b, c], |g, v| { let s = g.add(v[1], v[2])?; g.add(v[0], s) });
        prop_assert!(left.max_abs_diff(&right) <= 1e-12);
        let ones = run(&[a.clone(), Tensor::full([1, 2, 3, 4], 1.0)], |g, v| g.mul(v[0], v[1]));
        prop_assert_eq!(ones, a);
    }

    #[test]
    fn activations_stay_finite(x in -700.0f64..700.0) {
        for kind in [Activation::Sigmoid, Activation::Gelu, Activation::Relu] {
            let y = run(&[Tensor::vector(vec![x])], |g, v| g.activation(v[0], kind));
            prop_assert!(y.is_finite());
        }
    }
}
