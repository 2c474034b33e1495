mod common;

use std::collections::{HashMap, HashSet};

use common::BlockWeights;
use get_core::edsa::*;
use get_core::params::{Binder, Initializer, ParamSet};
use get_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_block(dim: usize, groups: usize, window: (usize, usize), rng: &mut ChaCha8Rng) -> EdsaParams<f64> {
    let mut params = EdsaParams::<f64>::init("", dim, groups, window, &mut Initializer::new(rng.random(), 0.3)).unwrap();
    for p in params.params_mut() {
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    params
}

fn weights(p: &EdsaParams<f64>) -> BlockWeights {
    BlockWeights {
        n1g: p.norm1_gamma.data.clone(),
        n1b: p.norm1_beta.data.clone(),
        q: p.spatial_q.data.clone(),
        k: p.spatial_k.data.clone(),
        v: p.spatial_v.data.clone(),
        gq: p.group_q.data.clone(),
        gk: p.group_k.data.clone(),
        gv: p.group_v.data.clone(),
        rpb: p.position_table.data.clone(),
        rgb: p.group_table.data.clone(),
        n2g: p.norm2_gamma.data.clone(),
        n2b: p.norm2_beta.data.clone(),
        w1: p.mlp_w1.data.clone(),
        b1: p.mlp_b1.data.clone(),
        w2: p.mlp_w2.data.clone(),
        b2: p.mlp_b2.data.clone(),
    }
}

#[test]
fn window_counts() {
    let l = WindowLayout::new((8, 8), (8, 8)).unwrap();
    assert_eq!((l.windows(), l.window_len()), (1, 64));
    assert_eq!(WindowLayout::new((32, 32), (8, 8)).unwrap().windows(), 16);
    assert!(WindowLayout::new((0, 4), (2, 2)).is_err());
}

#[test]
fn padded_window_slots_are_zero() {
    let l = WindowLayout::new((3, 3), (2, 2)).unwrap();
    let x = t(&[9, 2], (1..=18).map(f64::from).collect());
    let w = window_partition(&x, &l).unwrap();
    assert_eq!(w.shape(), [4, 4, 2]);
    let valid = l.valid();
    for (slot, ok) in valid.iter().enumerate() {
        let row = &w.data()[slot * 2..][..2];
        assert_eq!(row.iter().all(|&v| v == 0.0), !ok);
    }
}

#[test]
fn position_bias_examples() {
    let b = build_relative_position_bias(&t(&[1], vec![4.5]), (1, 1)).unwrap();
    assert_eq!(b.data(), &[4.5]);
    let b = build_relative_position_bias(&t(&[3], vec![10., 20., 30.]), (1, 2)).unwrap();
    assert_eq!(b.data(), &[20., 10., 30., 20.]);
    let used: HashSet<u64> = b.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(used.len(), 3);
    assert!(build_relative_position_bias(&t(&[4], vec![0.; 4]), (1, 2)).is_err());
}

#[test]
fn position_index_is_translation_consistent_and_mirrored() {
    for window in [(2, 3), (3, 3), (4, 2), (8, 8)] {
        let (wh, ww) = window;
        let s = wh * ww;
        let idx = relative_position_index(window);
        let centre = (wh - 1) * (2 * ww - 1) + (ww - 1);
        let mut by_offset: HashMap<(isize, isize), usize> = HashMap::new();
        for i in 0..s {
            for j in 0..s {
                let off = ((i / ww) as isize - (j / ww) as isize, (i % ww) as isize - (j % ww) as isize);
                let e = *by_offset.entry(off).or_insert(idx[i * s + j]);
                assert_eq!(e, idx[i * s + j]);
                assert_eq!(idx[i * s + j] + idx[j * s + i], 2 * centre);
            }
        }
        // every offset is a distinct entry and every entry is used
        let distinct: HashSet<usize> = by_offset.values().copied().collect();
        assert_eq!(distinct.len(), relative_position_table_len(window));
        assert_eq!(by_offset.len(), relative_position_table_len(window));
    }
}

#[test]
fn group_bias_examples() {
    let b = build_relative_group_bias(&t(&[1], vec![2.5]), 1, 3).unwrap();
    assert!(b.data().iter().all(|&v| v == 2.5));
    let b = build_relative_group_bias(&t(&[3], vec![1., 2., 3.]), 2, 1).unwrap();
    assert_eq!(b.data(), &[2., 1., 3., 2.]);
    assert!(build_relative_group_bias(&t(&[4], vec![0.; 4]), 2, 1).is_err());
}

#[test]
fn group_bias_has_2g_minus_1_values_constant_on_blocks() {
    for (g, c) in [(2, 3), (3, 2), (6, 1), (12, 4)] {
        let table: Vec<f64> = (0..2 * g - 1).map(|i| i as f64 * 1.5 - 7.0).collect();
        let b = build_relative_group_bias(&t(&[2 * g - 1], table.clone()), g, c).unwrap();
        let d = g * c;
        let distinct: HashSet<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), 2 * g - 1);
        for i in 0..d {
            for j in 0..d {
                assert_eq!(b.data()[i * d + j], table[i / c + g - 1 - j / c]);
            }
        }
    }
}

#[test]
fn single_token_attention_returns_values() {
    let x = t(&[1, 3], vec![1., -2., 0.5]);
    let w = t(&[3, 3], vec![0.2, 0.1, -1., 0.3, 0.5, 0.0, 1.0, -0.4, 0.2]);
    let v = spatial_self_attention(&x, &w, &w, &w, &t(&[1, 1], vec![3.0]), None).unwrap();
    assert!(common::max_abs_diff(v.data(), x.matmul(&w).unwrap().data()) < 1e-15);

    // one channel: the only group attention weight is 1
    let x = t(&[2, 1], vec![1., 3.]);
    let wg = t(&[2, 2], vec![1., 2., -1., 0.5]);
    let g = group_self_attention(&x, &wg, &wg, &wg, &t(&[1, 1], vec![0.7]), None).unwrap();
    assert!(common::max_abs_diff(g.data(), &[1. - 3., 2. + 1.5]) < 1e-15);
}

#[test]
fn constant_logits_average_the_values() {
    let mut rng = common::rng(1);
    let (s, d) = (4, 6);
    let x = t(&[s, d], common::randn(&mut rng, s * d, 1.0));
    let zero = t(&[d, d], vec![0.; d * d]);
    let wv = t(&[d, d], common::randn(&mut rng, d * d, 1.0));
    let y = spatial_self_attention(&x, &zero, &zero, &wv, &t(&[s, s], vec![0.; s * s]), None).unwrap();
    let v = x.matmul(&wv).unwrap();
    for c in 0..d {
        let mean = (0..s).map(|i| v.data()[i * d + c]).sum::<f64>() / s as f64;
        for i in 0..s {
            assert!((y.data()[i * d + c] - mean).abs() < 1e-12);
        }
    }

    let zs = t(&[s, s], vec![0.; s * s]);
    let wvg = t(&[s, s], common::randn(&mut rng, s * s, 1.0));
    let y = group_self_attention(&x, &zs, &zs, &wvg, &t(&[d, d], vec![0.; d * d]), None).unwrap();
    // every channel gets the mean over channels of V_g
    let vg = x.transpose_last2().unwrap().matmul(&wvg).unwrap();
    for j in 0..s {
        let mean = (0..d).map(|c| vg.data()[c * s + j]).sum::<f64>() / d as f64;
        for c in 0..d {
            assert!((y.data()[j * d + c] - mean).abs() < 1e-12);
        }
    }
}

struct Instance {
    s: usize,
    d: usize,
    x: Vec<f64>,
    w: [Vec<f64>; 3],
    wg: [Vec<f64>; 3],
    bp: Vec<f64>,
    bg: Vec<f64>,
}

fn instance(rng: &mut ChaCha8Rng, s: usize, g: usize, c: usize) -> Instance {
    let d = g * c;
    let mut r = |n| common::randn(rng, n, 1.0);
    Instance {
        s,
        d,
        x: r(s * d),
        w: [r(d * d), r(d * d), r(d * d)],
        wg: [r(s * s), r(s * s), r(s * s)],
        bp: r(s * s),
        bg: common::rgb_bias(&r(2 * g - 1), g, c),
    }
}

#[test]
fn attention_matches_double_loop_oracles() {
    let mut rng = common::rng(7);
    let mut cases = vec![(4, 2, 3)];
    while cases.len() < 50 {
        cases.push((rng.random_range(1..10), rng.random_range(1..4), rng.random_range(1..4)));
    }
    for (s, g, c) in cases {
        let i = instance(&mut rng, s, g, c);
        let (s, d) = (i.s, i.d);
        let all = vec![true; s];
        let x = t(&[s, d], i.x.clone());
        let w = |v: &Vec<f64>, n| t(&[n, n], v.clone());
        let got = spatial_self_attention(&x, &w(&i.w[0], d), &w(&i.w[1], d), &w(&i.w[2], d), &t(&[s, s], i.bp.clone()), None).unwrap();
        let want = common::oracle_ssa(&i.x, &i.w[0], &i.w[1], &i.w[2], &i.bp, s, d, &all);
        assert!(common::max_abs_diff(got.data(), &want) <= 1e-5);
        let got = group_self_attention(&x, &w(&i.wg[0], s), &w(&i.wg[1], s), &w(&i.wg[2], s), &t(&[d, d], i.bg.clone()), None).unwrap();
        let want = common::oracle_gsa(&i.x, &i.wg[0], &i.wg[1], &i.wg[2], &i.bg, s, d, &all);
        assert!(common::max_abs_diff(got.data(), &want) <= 1e-5);
    }
}

#[test]
fn batched_windows_match_per_window_calls() {
    let mut rng = common::rng(8);
    let (m, s, d) = (3, 4, 4);
    let x = common::randn(&mut rng, m * s * d, 1.0);
    let wq = t(&[d, d], common::randn(&mut rng, d * d, 1.0));
    let b = t(&[s, s], common::randn(&mut rng, s * s, 1.0));
    let all = spatial_self_attention(&t(&[m, s, d], x.clone()), &wq, &wq, &wq, &b, None).unwrap();
    for w in 0..m {
        let one = spatial_self_attention(&t(&[s, d], x[w * s * d..][..s * d].to_vec()), &wq, &wq, &wq, &b, None).unwrap();
        assert_eq!(&all.data()[w * s * d..][..s * d], one.data());
    }
}

#[test]
fn padded_slots_get_no_attention_mass() {
    let mut rng = common::rng(9);
    let (s, d) = (6, 4);
    let valid = [true, true, false, true, false, true];
    let base = common::randn(&mut rng, s * d, 1.0);
    let w: Vec<Tensor<f64>> = (0..3).map(|_| t(&[d, d], common::randn(&mut rng, d * d, 1.0))).collect();
    let wg: Vec<Tensor<f64>> = (0..3).map(|_| t(&[s, s], common::randn(&mut rng, s * s, 1.0))).collect();
    let bp = t(&[s, s], common::randn(&mut rng, s * s, 1.0));
    let bg = t(&[d, d], vec![0.; d * d]);
    let ssa = |x: &[f64]| spatial_self_attention(&t(&[s, d], x.to_vec()), &w[0], &w[1], &w[2], &bp, Some(&valid)).unwrap();
    let out = ssa(&base);
    let want = common::oracle_ssa(&base, w[0].data(), w[1].data(), w[2].data(), bp.data(), s, d, &valid);
    assert!(common::max_abs_diff(out.data(), &want) <= 1e-12);
    // changing what sits in a padded key slot must not move real rows
    let mut other = base.clone();
    other[2 * d..3 * d].iter_mut().for_each(|v| *v += 5.0);
    let moved = ssa(&other);
    for (slot, ok) in valid.iter().enumerate() {
        let (a, b) = (&out.data()[slot * d..][..d], &moved.data()[slot * d..][..d]);
        if *ok {
            assert!(common::max_abs_diff(a, b) < 1e-12);
        } else {
            assert!(a.iter().chain(b).all(|&v| v == 0.0));
        }
    }
    let g = group_self_attention(&t(&[s, d], base.clone()), &wg[0], &wg[1], &wg[2], &bg, Some(&valid)).unwrap();
    let want = common::oracle_gsa(&base, wg[0].data(), wg[1].data(), wg[2].data(), bg.data(), s, d, &valid);
    assert!(common::max_abs_diff(g.data(), &want) <= 1e-12);
}

#[test]
fn zero_block_is_a_fixed_point() {
    let mut rng = common::rng(10);
    let (grid, window, dim, groups) = ((4, 5), (2, 2), 6, 2);
    let mut params = EdsaParams::<f64>::init("", dim, groups, window, &mut Initializer::new(0, 0.02)).unwrap();
    for p in params.params_mut() {
        let keep_affine = p.name.ends_with("norm1.weight") || p.name.ends_with("norm2.weight");
        p.data.iter_mut().for_each(|v| *v = if keep_affine { 1.0 } else { 0.0 });
    }
    let layout = WindowLayout::new(grid, window).unwrap();
    let fs = t(&[20, dim], common::randn(&mut rng, 20 * dim, 1.0));
    let fg = t(&[20, dim], common::randn(&mut rng, 20 * dim, 1.0));
    for variant in BlockVariant::ALL {
        let out = edsa_block_forward(&EdsaState { spatial: fs.clone(), group: fg.clone() }, &params, &layout, variant, &Binder::inference()).unwrap();
        let merged_in = fs.add(&fg).unwrap();
        assert!(common::max_abs_diff(out.merged().unwrap().data(), merged_in.data()) < 1e-15, "{variant}");
        if variant == BlockVariant::Edsa {
            assert_eq!(out.spatial.data(), fs.data());
            assert_eq!(out.group.data(), fg.data());
        }
    }
}

#[test]
fn ssa_only_is_edsa_without_group_attention() {
    let mut rng = common::rng(11);
    let (grid, window, dim, groups) = ((6, 6), (3, 3), 6, 3);
    let mut params = random_block(dim, groups, window, &mut rng);
    params.group_v.data.iter_mut().for_each(|v| *v = 0.0);
    let layout = WindowLayout::new(grid, window).unwrap();
    let x = t(&[36, dim], common::randn(&mut rng, 36 * dim, 1.0));
    let b = Binder::inference();
    let edsa = edsa_block_forward(&EdsaState::enter(x.clone()), &params, &layout, BlockVariant::Edsa, &b).unwrap();
    let ssa = edsa_block_forward(&EdsaState::enter(x), &params, &layout, BlockVariant::SsaOnly, &b).unwrap();
    assert!(common::max_abs_diff(edsa.spatial.data(), ssa.spatial.data()) < 1e-12);
    assert!(edsa.group.data().iter().all(|&v| v == 0.0));
}

#[test]
fn edsa_block_matches_scripted_oracle() {
    let mut rng = common::rng(12);
    // 8x8 grid, G=2, C=3; one window layout that tiles and one that pads
    for window in [(4, 4), (8, 8), (3, 3), (2, 5)] {
        let (grid, groups, dim) = ((8, 8), 2, 6);
        let params = random_block(dim, groups, window, &mut rng);
        let layout = WindowLayout::new(grid, window).unwrap();
        let fs = common::randn(&mut rng, 64 * dim, 1.0);
        let fg = common::randn(&mut rng, 64 * dim, 0.5);
        let state = EdsaState {
            spatial: t(&[64, dim], fs.clone()),
            group: t(&[64, dim], fg.clone()),
        };
        let out = edsa_block_forward(&state, &params, &layout, BlockVariant::Edsa, &Binder::inference()).unwrap();
        let (ws, wg) = common::oracle_edsa_block(&fs, &fg, &weights(&params), grid, window, groups);
        assert!(common::max_abs_diff(out.spatial.data(), &ws) <= 1e-5, "{window:?}");
        assert!(common::max_abs_diff(out.group.data(), &wg) <= 1e-5, "{window:?}");
    }
}

#[test]
fn variants_differ_from_each_other() {
    let mut rng = common::rng(13);
    let params = random_block(4, 2, (2, 2), &mut rng);
    let layout = WindowLayout::new((4, 4), (2, 2)).unwrap();
    let x = t(&[16, 4], common::randn(&mut rng, 64, 1.0));
    let outs: Vec<Vec<f64>> = BlockVariant::ALL
        .iter()
        .map(|&v| edsa_block_forward(&EdsaState::enter(x.clone()), &params, &layout, v, &Binder::inference()).unwrap().merged().unwrap().to_vec())
        .collect();
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            assert!(common::max_abs_diff(&outs[i], &outs[j]) > 1e-6, "{} vs {}", BlockVariant::ALL[i], BlockVariant::ALL[j]);
        }
    }
}

#[test]
fn block_rejects_mismatched_shapes() {
    let params = EdsaParams::<f64>::init("", 4, 2, (2, 2), &mut Initializer::new(0, 0.02)).unwrap();
    let layout = WindowLayout::new((4, 4), (2, 2)).unwrap();
    let wrong = EdsaState::enter(Tensor::<f64>::zeros(vec![15, 4]));
    assert!(edsa_block_forward(&wrong, &params, &layout, BlockVariant::Edsa, &Binder::inference()).is_err());
    let other = WindowLayout::new((4, 4), (4, 4)).unwrap();
    let ok_state = EdsaState::enter(Tensor::<f64>::zeros(vec![16, 4]));
    assert!(edsa_block_forward(&ok_state, &params, &other, BlockVariant::Edsa, &Binder::inference()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_roundtrip(rows in 1usize..10, cols in 1usize..10, wh in 1usize..5, ww in 1usize..5, seed in any::<u64>()) {
        let l = WindowLayout::new((rows, cols), (wh, ww)).unwrap();
        let x = t(&[rows * cols, 3], common::randn(&mut common::rng(seed), rows * cols * 3, 1.0));
        let w = window_partition(&x, &l).unwrap();
        prop_assert_eq!(w.shape(), &[l.windows(), wh * ww, 3]);
        prop_assert_eq!(window_reverse(&w, &l).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn ssa_is_permutation_equivariant_without_bias(s in 1usize..8, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = common::randn(&mut rng, s * d, 1.0);
        let ws: Vec<Tensor<f64>> = (0..3).map(|_| t(&[d, d], common::randn(&mut rng, d * d, 1.0))).collect();
        let mut perm: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let xp: Vec<f64> = perm.iter().flat_map(|&r| x[r * d..][..d].to_vec()).collect();
        let zero = t(&[s, s], vec![0.; s * s]);
        let y = spatial_self_attention(&t(&[s, d], x), &ws[0], &ws[1], &ws[2], &zero, None).unwrap();
        let yp = spatial_self_attention(&t(&[s, d], xp), &ws[0], &ws[1], &ws[2], &zero, None).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            prop_assert!(common::max_abs_diff(&yp.data()[i * d..][..d], &y.data()[r * d..][..d]) < 1e-10);
        }
    }

    #[test]
    fn gsa_is_equivariant_to_group_permutations(s in 1usize..6, g in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let d = g * c;
        let x = common::randn(&mut rng, s * d, 1.0);
        let ws: Vec<Tensor<f64>> = (0..3).map(|_| t(&[s, s], common::randn(&mut rng, s * s, 1.0))).collect();
        let mut perm: Vec<usize> = (0..g).collect();
        for i in (1..g).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // column j of the permuted input is column src(j) of the original
        let src = |j: usize| perm[j / c] * c + j % c;
        let xp: Vec<f64> = (0..s * d).map(|i| x[(i / d) * d + src(i % d)]).collect();
        let zero = t(&[d, d], vec![0.; d * d]);
        let y = group_self_attention(&t(&[s, d], x), &ws[0], &ws[1], &ws[2], &zero, None).unwrap();
        let yp = group_self_attention(&t(&[s, d], xp), &ws[0], &ws[1], &ws[2], &zero, None).unwrap();
        for i in 0..s * d {
            prop_assert!((yp.data()[i] - y.data()[(i / d) * d + src(i % d)]).abs() < 1e-10);
        }
    }
}
