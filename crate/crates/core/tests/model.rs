use std::sync::Arc;

use magn::graph_attention::{head_shapes, multi_head_graph_conv, GraphGenParams, HeadWeights};
use magn::model::network::{graph_block, patch_aggregate, pixel_aggregate, residual_block};
use magn::model::{self, layout, parameter_count, ModelConfig, ModelParams};
use magn::model::params::{Branch, GraphBlock, ResBlock};
use magn::patching::PatchGeometry;
use magn::{BranchMode, Eager, Exec, GradTape, MagnError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn image(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn arc(t: Tensor<f64>) -> Arc<Tensor<f64>> {
    Arc::new(t)
}

/// 3×3 "same" convolution by direct summation.
fn conv3(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[3];
    let mut out = Tensor::zeros(&[h, w, co]);
    for y in 0..h {
        for xx in 0..w {
            for o in 0..co {
                let mut s = b.data()[o];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for c in 0..ci {
                            s += x.at(&[sy as usize, sx as usize, c]) * k.at(&[dy, dx, c, o]);
                        }
                    }
                }
                out.set(&[y, xx, o], s);
            }
        }
    }
    out
}

fn prelu(v: f64, a: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        a * v
    }
}

fn random_heads(d: usize, node_dim: usize, d1: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<HeadWeights<Tensor<f64>>> {
    let shapes = head_shapes(d, node_dim, d1, n);
    (0..n).map(|_| shapes.map(|s| rand_tensor(s, 0.5, rng))).collect()
}

fn eager_branch(heads: &[HeadWeights<Tensor<f64>>], act: &Tensor<f64>) -> Branch<Arc<Tensor<f64>>> {
    Branch {
        heads: heads.iter().map(|h| h.map(|t| arc(t.clone()))).collect(),
        act: arc(act.clone()),
    }
}

/// Masked softmax of one score row.
fn masked_softmax(s: &[f64]) -> Vec<f64> {
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|&v| if v >= mean { (v - top).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[test]
fn residual_block_matches_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[5, 6, 3], 1.0, &mut rng);
    let p = ResBlock {
        conv1_w: rand_tensor(&[3, 3, 3, 3], 0.4, &mut rng),
        conv1_b: rand_tensor(&[3], 0.1, &mut rng),
        act: rand_tensor(&[3], 0.5, &mut rng),
        conv2_w: rand_tensor(&[3, 3, 3, 3], 0.4, &mut rng),
        conv2_b: rand_tensor(&[3], 0.1, &mut rng),
    };
    let mut h = conv3(&x, &p.conv1_w, &p.conv1_b);
    for (i, v) in h.data_mut().iter_mut().enumerate() {
        *v = prelu(*v, p.act.data()[i % 3]);
    }
    let expect = conv3(&h, &p.conv2_w, &p.conv2_b).add(&x).unwrap();

    let mut ex = Eager::new();
    let pe = ResBlock {
        conv1_w: arc(p.conv1_w.clone()),
        conv1_b: arc(p.conv1_b.clone()),
        act: arc(p.act.clone()),
        conv2_w: arc(p.conv2_w.clone()),
        conv2_b: arc(p.conv2_b.clone()),
    };
    let y = residual_block(&mut ex, &arc(x.clone()), &pe).unwrap();
    assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);

    let zero = ResBlock {
        conv1_w: arc(Tensor::zeros(&[3, 3, 3, 3])),
        conv1_b: arc(Tensor::zeros(&[3])),
        act: arc(Tensor::full(&[3], 0.25)),
        conv2_w: arc(Tensor::zeros(&[3, 3, 3, 3])),
        conv2_b: arc(Tensor::zeros(&[3])),
    };
    assert_eq!(*residual_block(&mut ex, &arc(x.clone()), &zero).unwrap(), x);
}

#[test]
fn pixel_aggregate_matches_flat_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[4, 4, 8], 1.0, &mut rng);
    let heads = random_heads(8, 8, 2, 4, &mut rng);
    let act = rand_tensor(&[8], 0.5, &mut rng);
    let flat = x.reshape(&[16, 8]).unwrap();
    let gp = GraphGenParams::new(heads.clone(), 8, 2).unwrap();
    let expect = multi_head_graph_conv(&flat, &gp, &act).unwrap().reshape(&[4, 4, 8]).unwrap();
    let mut ex = Eager::new();
    let y = pixel_aggregate(&mut ex, &arc(x.clone()), &eager_branch(&heads, &act), 4096).unwrap();
    assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);

    match pixel_aggregate(&mut ex, &arc(x), &eager_branch(&heads, &act), 15) {
        Err(MagnError::NodeBudget { nodes: 16, budget: 15 }) => {}
        other => panic!("expected a node budget error, got {other:?}"),
    }
}

#[test]
fn single_pixel_is_self_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 1, 4], 1.0, &mut rng);
    let heads = random_heads(4, 4, 1, 2, &mut rng);
    let act = Tensor::full(&[4], 0.25);
    let mut ex = Eager::new();
    let y = pixel_aggregate(&mut ex, &arc(x.clone()), &eager_branch(&heads, &act), 4096).unwrap();
    for (h, head) in heads.iter().enumerate() {
        for o in 0..2 {
            let v: f64 = (0..4).map(|c| x.data()[c] * head.w.at(&[c, o])).sum();
            assert!((y.data()[h * 2 + o] - prelu(v, 0.25)).abs() < 1e-14);
        }
    }
}

#[test]
fn patch_aggregate_matches_explicit_oracle() {
    let (size, win, stride, d, n, d1) = (15, 7, 4, 4, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[size, size, d], 1.0, &mut rng);
    let pd = win * win * d;
    let heads = random_heads(d, pd, d1, n, &mut rng);
    let act = rand_tensor(&[d], 0.5, &mut rng);
    let geom = PatchGeometry::square(size, size, d, win, stride).unwrap();
    assert_eq!(geom.count(), 9);

    let origins: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i * stride, j * stride))).collect();
    let pointwise = |w: &Tensor<f64>, b: &Tensor<f64>| {
        let mut c = Tensor::zeros(&[size, size, d]);
        for y in 0..size {
            for xx in 0..size {
                for o in 0..d {
                    let v = b.data()[o] + (0..d).map(|i| x.at(&[y, xx, i]) * w.at(&[i, o])).sum::<f64>();
                    c.set(&[y, xx, o], v);
                }
            }
        }
        c
    };
    let patch_vec = |m: &Tensor<f64>, (oy, ox): (usize, usize)| {
        let mut v = Vec::with_capacity(pd);
        for py in 0..win {
            for px in 0..win {
                for ch in 0..d {
                    v.push(m.at(&[oy + py, ox + px, ch]));
                }
            }
        }
        v
    };
    let reduce = |u: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| {
        (0..d1)
            .map(|o| b.data()[o] + u.iter().enumerate().map(|(i, &v)| v * w.at(&[i, o])).sum::<f64>())
            .collect::<Vec<f64>>()
    };

    // out[j][p][channel] before folding
    let width = d / n;
    let mut nodes = vec![vec![vec![0.0; d]; win * win]; 9];
    for (h, hw) in heads.iter().enumerate() {
        let c1 = pointwise(&hw.conv1_w, &hw.conv1_b);
        let c2 = pointwise(&hw.conv2_w, &hw.conv2_b);
        let q: Vec<Vec<f64>> = origins.iter().map(|&o| reduce(&patch_vec(&c1, o), &hw.fc1_w, &hw.fc1_b)).collect();
        let k: Vec<Vec<f64>> = origins.iter().map(|&o| reduce(&patch_vec(&c2, o), &hw.fc2_w, &hw.fc2_b)).collect();
        let a: Vec<Vec<f64>> = (0..9)
            .map(|u| {
                let s: Vec<f64> = (0..9)
                    .map(|v| q[u].iter().zip(&k[v]).map(|(a, b)| a * b).sum::<f64>() / (d1 as f64).sqrt())
                    .collect();
                masked_softmax(&s)
            })
            .collect();
        let raw: Vec<Vec<f64>> = origins.iter().map(|&o| patch_vec(&x, o)).collect();
        for j in 0..9 {
            for p in 0..win * win {
                for o in 0..width {
                    let mut acc = 0.0;
                    for (jj, rv) in raw.iter().enumerate() {
                        let xw: f64 = (0..d).map(|ch| rv[p * d + ch] * hw.w.at(&[ch, o])).sum();
                        acc += a[j][jj] * xw;
                    }
                    let ch = h * width + o;
                    nodes[j][p][ch] = prelu(acc, act.data()[ch]);
                }
            }
        }
    }
    let mut sum = Tensor::<f64>::zeros(&[size, size, d]);
    let mut count = vec![0.0; size * size];
    for (j, &(oy, ox)) in origins.iter().enumerate() {
        for py in 0..win {
            for px in 0..win {
                count[(oy + py) * size + ox + px] += 1.0;
                for ch in 0..d {
                    let idx = [oy + py, ox + px, ch];
                    sum.set(&idx, sum.at(&idx) + nodes[j][py * win + px][ch]);
                }
            }
        }
    }
    let expect = Tensor::from_fn(&[size, size, d], |i| sum.data()[i] / count[i / d]);

    let mut ex = Eager::new();
    let y = patch_aggregate(&mut ex, &arc(x), &eager_branch(&heads, &act), &geom).unwrap();
    assert_eq!(y.shape(), &[size, size, d]);
    assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn single_patch_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[7, 7, 2], 1.0, &mut rng);
    let heads = random_heads(2, 98, 3, 1, &mut rng);
    let act = Tensor::full(&[2], 0.25);
    let geom = PatchGeometry::square(7, 7, 2, 7, 3).unwrap();
    let mut ex = Eager::new();
    let y = patch_aggregate(&mut ex, &arc(x.clone()), &eager_branch(&heads, &act), &geom).unwrap();
    // adjacency [[1]]: the window itself, mapped channel-wise by W
    for p in 0..49 {
        for o in 0..2 {
            let v: f64 = (0..2).map(|c| x.data()[p * 2 + c] * heads[0].w.at(&[c, o])).sum();
            assert!((y.data()[p * 2 + o] - prelu(v, 0.25)).abs() < 1e-14);
        }
    }
}

fn micro_block(cfg: &ModelConfig, params: &ModelParams<f64>) -> GraphBlock<Arc<Tensor<f64>>> {
    model::eager_network(params, cfg).unwrap().graph[0].clone()
}

#[test]
fn zero_fusion_is_identity() {
    let cfg = ModelConfig::micro();
    let mut params = magn::gradcheck::random_params(&cfg, 6).unwrap();
    for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
        if name.contains("fuse") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let block = micro_block(&cfg, &params);
    let x = image(15, 15, 8, 7);
    let mut ex = Eager::new();
    assert_eq!(*graph_block(&mut ex, &arc(x.clone()), &block, &cfg).unwrap(), x);
}

#[test]
fn graph_block_preserves_desk_shape() {
    let cfg = ModelConfig::desk();
    let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let block = micro_block(&cfg, &params);
    let mut ex = Eager::new();
    let y = graph_block(&mut ex, &arc(image(31, 31, 16, 9)), &block, &cfg).unwrap();
    assert_eq!(y.shape(), &[31, 31, 16]);
}

#[test]
fn graph_block_input_gradient_matches_finite_differences() {
    let cfg = ModelConfig::micro();
    let params = magn::gradcheck::random_params(&cfg, 10).unwrap();
    let (slots, _) = layout(&cfg);
    let x = image(15, 15, 8, 11);

    let mut tape = GradTape::with_branches(BranchMode::Record(Vec::new()));
    let xv = tape.leaf(x.clone());
    let net = slots.map(|&i| tape.constant(params.tensors()[i].clone()));
    let y = graph_block(&mut tape, &xv, &net.graph[0], &cfg).unwrap();
    let s = tape.sum(&y).unwrap();
    let g = tape.backward(s).unwrap().get(xv);
    let log = std::mem::take(&mut tape.branches).into_log().unwrap();

    let block = micro_block(&cfg, &params);
    let eval = |x: &Tensor<f64>| {
        let mut ex = Eager::with_branches(BranchMode::replay(log.clone()));
        graph_block(&mut ex, &arc(x.clone()), &block, &cfg).unwrap().sum()
    };
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..60 {
        let i = rng.gen_range(0..x.len());
        let mut a = x.clone();
        a.data_mut()[i] += h;
        let mut b = x.clone();
        b.data_mut()[i] -= h;
        let n = (eval(&a) - eval(&b)) / (2.0 * h);
        let an = g.data()[i];
        let rel = (n - an).abs() / n.abs().max(an.abs()).max(1e-7);
        assert!(rel < 1e-4, "entry {i}: analytic {an} numeric {n}");
    }
}

#[test]
fn fresh_network_restores_input_exactly() {
    for cfg in [ModelConfig::micro(), ModelConfig::desk()] {
        let params = ModelParams::<f64>::init(&cfg, 13).unwrap();
        let x = image(15, 15, 3, 14);
        assert_eq!(model::restore(&x, &params, &cfg).unwrap(), x);
        assert_eq!(model::restore_image(&x, &params, &cfg, (64, 64)).unwrap(), x);
    }
}

#[test]
fn zero_network_is_identity_at_any_size() {
    let cfg = ModelConfig::micro();
    let params = ModelParams::<f64>::zeros(&cfg).unwrap();
    for (h, w) in [(15, 15), (40, 23), (9, 70)] {
        let x = image(h, w, 3, (h * w) as u64);
        assert_eq!(model::restore_image(&x, &params, &cfg, (19, 19)).unwrap(), x);
    }
}

#[test]
fn single_tile_equals_one_pass() {
    let cfg = ModelConfig::micro();
    let params = magn::gradcheck::random_params(&cfg, 15).unwrap();
    let x = image(19, 19, 3, 16);
    let whole = model::restore(&x, &params, &cfg).unwrap();
    assert_eq!(model::restore_image(&x, &params, &cfg, (19, 19)).unwrap(), whole);
    assert_eq!(model::restore_image(&x, &params, &cfg, (40, 40)).unwrap(), whole);
}

/// Initial weights with a small random tail, so the residual is modest.
fn small_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let tail = p.get_mut("tail.w").unwrap();
    *tail = rand_tensor(tail.shape(), 5e-4, &mut rng);
    p
}

#[test]
fn tiled_restore_matches_whole_image() {
    let cfg = ModelConfig {
        channels: 8,
        heads: 2,
        attn_dim: 2,
        patch_attn_dim: 4,
        res_blocks_before: 1,
        res_blocks_after: 1,
        graph_blocks: 1,
        window: 5,
        stride: 1,
        ..ModelConfig::micro()
    };
    let params = small_params(&cfg, 17);
    let x = image(62, 62, 3, 18);
    let whole = model::restore(&x, &params, &cfg).unwrap();
    let tiled = model::restore_image(&x, &params, &cfg, (31, 31)).unwrap();
    let mad = whole.sub(&tiled).unwrap().map(f64::abs).mean();
    assert!(mad < 1e-3, "mean absolute difference {mad}");
    assert_ne!(whole, x);
}

#[test]
fn tiling_is_deterministic() {
    let cfg = ModelConfig::micro();
    let params = magn::gradcheck::random_params(&cfg, 19).unwrap();
    let x = image(37, 41, 3, 20);
    let a = model::restore_image(&x, &params, &cfg, (19, 23)).unwrap();
    assert_eq!(a, model::restore_image(&x, &params, &cfg, (19, 23)).unwrap());
}

#[test]
fn tile_errors() {
    let cfg = ModelConfig::micro();
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let x = image(20, 20, 3, 1);
    assert!(model::restore_image(&x, &params, &cfg, (5, 5)).is_err());
    let wide = ModelConfig {
        node_budget: 100,
        ..ModelConfig::micro()
    };
    assert!(matches!(
        model::restore_image(&x, &params, &wide, (19, 19)),
        Err(MagnError::NodeBudget { .. })
    ));
}

#[test]
fn forward_rejects_bad_sizes_with_suggestion() {
    let cfg = ModelConfig::micro();
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let err = model::forward(&image(16, 15, 3, 1), &params, &cfg).unwrap_err();
    assert!(err.to_string().contains("15"), "{err}");
    assert!(model::forward(&image(15, 15, 1, 1), &params, &cfg).is_err());
}

#[test]
fn mse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&[4, 5, 3], 1.0, &mut rng);
    assert_eq!(model::mse_loss(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v + 0.3);
    assert!((model::mse_loss(&shifted, &a).unwrap() - 0.09).abs() < 1e-12);
    let b = rand_tensor(&[4, 5, 3], 1.0, &mut rng);
    let expect = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 60.0;
    assert!((model::mse_loss(&a, &b).unwrap() - expect).abs() < 1e-14);
    assert!(model::mse_loss(&a, &Tensor::zeros(&[3, 4, 5])).is_err());
}

#[test]
fn default_parameter_count_near_reported_size() {
    let n = parameter_count(&ModelConfig::default()) as f64;
    assert!((n - 5.22e6).abs() / 5.22e6 < 0.1, "{n}");
}

#[test]
fn parameter_shapes_follow_config() {
    for cfg in [ModelConfig::micro(), ModelConfig::desk(), ModelConfig::default()] {
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(p.count(), parameter_count(&cfg));
        assert!(p.all_finite());
    }
}

