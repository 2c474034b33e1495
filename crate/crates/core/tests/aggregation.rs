mod common;

use get_core::gta::*;
use get_core::params::{Binder, Initializer, ParamSet};
use get_core::tensor::Tensor;
use get_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn random_params(geom: &GtaGeometry, seed: u64) -> GtaParams<f64> {
    let mut params = GtaParams::<f64>::init("", geom, &mut Initializer::new(seed, 0.3));
    let mut rng = common::rng(seed);
    for p in params.params_mut() {
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    params
}

fn run(x: &[f64], grid: (usize, usize), geom: &GtaGeometry, params: &GtaParams<f64>) -> (Vec<f64>, (usize, usize)) {
    let width = geom.groups_in * geom.channels_per_group;
    let x = Tensor::new(vec![grid.0 * grid.1, width], x.to_vec()).unwrap();
    let (y, g) = gta_forward(&x, grid, geom, params, &Binder::inference()).unwrap();
    (y.to_vec(), g)
}

#[test]
fn geometry_examples() {
    let g = GtaGeometry::new(12, 4).unwrap();
    assert_eq!((g.group_kernel, g.group_stride, g.groups_out, g.channels_out_per_group), (3, 2, 6, 16));
    assert_eq!((g.slots, g.padding_groups()), (13, 1));
    assert_eq!(g.input_slots(5), 10..13);

    let g = GtaGeometry::new(4, 2).unwrap();
    assert_eq!((g.group_kernel, g.group_stride, g.groups_out, g.slots, g.padding_groups()), (3, 1, 2, 4, 0));

    // one output group sees every input group
    for groups in [2, 3] {
        let g = GtaGeometry::new(groups, 5).unwrap();
        assert_eq!((g.groups_out, g.group_kernel, g.padding_groups()), (1, groups, 0));
    }
    assert!(matches!(GtaGeometry::new(1, 4), Err(Error::GroupArithmetic(_))));
    assert!(matches!(GtaGeometry::new(7, 1), Err(Error::GroupArithmetic(_))));
}

#[test]
fn default_stage_boundary_shapes() {
    let geom = GtaGeometry::new(12, 4).unwrap();
    let params = GtaParams::<f32>::init("", &geom, &mut Initializer::new(0, 0.02));
    let x = Tensor::<f32>::zeros(vec![32 * 32, 48]);
    let (y, grid) = gta_forward(&x, (32, 32), &geom, &params, &Binder::inference()).unwrap();
    assert_eq!(grid, (16, 16));
    assert_eq!(y.shape(), [256, 96]);
    assert_eq!(GtaGeometry::output_grid((8, 8)), (4, 4));
}

#[test]
fn overlapping_conv_matches_dense_conv_with_zero_padding_group() {
    let mut rng = common::rng(1);
    let geom = GtaGeometry::new(12, 2).unwrap();
    let params = random_params(&geom, 2);
    let (h, w) = (4, 3);
    let cin = 24;
    let x = common::randn(&mut rng, h * w * cin, 1.0);
    let xt = Tensor::new(vec![h * w, cin], x.clone()).unwrap();
    let y = overlapping_group_conv(&xt, (h, w), &geom, &params, &Binder::inference()).unwrap();

    // dense weights: output channel o of group j reads input channel
    // j·GS·C + i for i < GK·C, dropping the padding channels
    let cout = geom.channels_out();
    let span = geom.group_kernel * geom.channels_per_group;
    let mut dense = vec![0.0; cout * cin * 9];
    for o in 0..cout {
        let j = o / geom.channels_out_per_group;
        for i in 0..span {
            let c = j * geom.group_stride * geom.channels_per_group + i;
            if c < cin {
                dense[(o * cin + c) * 9..][..9].copy_from_slice(&params.conv_w.data[(o * span + i) * 9..][..9]);
            }
        }
    }
    let planes: Vec<f64> = (0..cin).flat_map(|c| (0..h * w).map(move |t| (c, t))).map(|(c, t)| x[t * cin + c]).collect();
    let want = common::dense_conv(&planes, &dense, cin, h, w, cout, 3);
    for t in 0..h * w {
        for o in 0..cout {
            let expect = want[o * h * w + t] + params.conv_b.data[o];
            assert!((y.data()[t * cout + o] - expect).abs() < 1e-10);
        }
    }
}

/// Output groups whose values moved when input group `i` was perturbed.
fn responding_groups(groups: usize, c: usize, i: usize, grid: (usize, usize), seed: u64) -> Vec<usize> {
    let geom = GtaGeometry::new(groups, c).unwrap();
    let params = random_params(&geom, seed);
    let mut rng = common::rng(seed + 1);
    let width = groups * c;
    let tokens = grid.0 * grid.1;
    let x = common::randn(&mut rng, tokens * width, 1.0);
    let mut xp = x.clone();
    for t in 0..tokens {
        for k in 0..c {
            xp[t * width + i * c + k] += rng.random_range(0.5..1.5);
        }
    }
    let (a, _) = run(&x, grid, &geom, &params);
    let (b, _) = run(&xp, grid, &geom, &params);
    let per = geom.channels_out_per_group;
    let cout = geom.channels_out();
    (0..geom.groups_out)
        .filter(|&j| {
            (0..a.len() / cout).any(|t| (0..per).any(|k| a[t * cout + j * per + k] != b[t * cout + j * per + k]))
        })
        .collect()
}

#[test]
fn aggregation_group_receptive_fields() {
    // conv output groups are independent, but the layer norm mixes every
    // channel of a token, so the test perturbs the conv stage directly
    for (groups, c) in [(12, 2), (4, 3), (6, 1), (3, 2), (9, 2)] {
        let geom = GtaGeometry::new(groups, c).unwrap();
        let params = random_params(&geom, 5);
        let grid = (3, 4);
        let width = groups * c;
        let mut rng = common::rng(6);
        let x = common::randn(&mut rng, 12 * width, 1.0);
        let conv = |x: &[f64]| {
            overlapping_group_conv(&Tensor::new(vec![12, width], x.to_vec()).unwrap(), grid, &geom, &params, &Binder::inference())
                .unwrap()
                .to_vec()
        };
        let base = conv(&x);
        let per = geom.channels_out_per_group;
        let cout = geom.channels_out();
        for i in 0..groups {
            let mut xp = x.clone();
            for t in 0..12 {
                xp[t * width + i * c] += 1.0;
            }
            let moved = conv(&xp);
            for j in 0..geom.groups_out {
                let changed = (0..12).any(|t| (0..per).any(|k| base[t * cout + j * per + k] != moved[t * cout + j * per + k]));
                assert_eq!(changed, geom.input_slots(j).contains(&i), "G={groups} in {i} out {j}");
            }
        }
    }
}

#[test]
fn full_aggregation_responds_to_every_group() {
    // after the layer norm every output group depends on every input group
    let hit = responding_groups(12, 2, 4, (4, 4), 3);
    assert_eq!(hit, (0..6).collect::<Vec<_>>());
}

#[test]
fn pooling_stride_translation_commutes_in_the_interior() {
    let geom = GtaGeometry::new(4, 2).unwrap();
    let params = random_params(&geom, 9);
    let (h, w, width) = (12, 12, 8);
    let mut rng = common::rng(10);
    let x = common::randn(&mut rng, h * w * width, 1.0);
    // shift by 2 rows and 2 columns, zero fill
    let mut shifted = vec![0.0; x.len()];
    for r in 2..h {
        for c in 2..w {
            shifted[(r * w + c) * width..][..width].copy_from_slice(&x[((r - 2) * w + c - 2) * width..][..width]);
        }
    }
    let (a, grid) = run(&x, (h, w), &geom, &params);
    let (b, _) = run(&shifted, (h, w), &geom, &params);
    let cout = geom.channels_out();
    // output i reads input rows 2i-2..=2i+2, so i+1 stays inside a 12-row grid for i <= 3
    for i in 1..=3 {
        for j in 1..=3 {
            let ya = &a[(i * grid.1 + j) * cout..][..cout];
            let yb = &b[((i + 1) * grid.1 + j + 1) * cout..][..cout];
            assert!(common::max_abs_diff(ya, yb) < 1e-12, "({i}, {j})");
        }
    }
}

#[test]
fn rejects_wrong_input_width() {
    let geom = GtaGeometry::new(4, 2).unwrap();
    let params = GtaParams::<f64>::init("", &geom, &mut Initializer::new(0, 0.02));
    let x = Tensor::<f64>::zeros(vec![16, 7]);
    assert!(matches!(gta_forward(&x, (4, 4), &geom, &params, &Binder::inference()), Err(Error::ShapeMismatch(_))));
}

proptest! {
    #[test]
    fn channels_double_and_groups_halve(groups in 2usize..64, c in 1usize..16) {
        match GtaGeometry::new(groups, c) {
            Ok(g) => {
                prop_assert_eq!(g.groups_out, groups / 2);
                prop_assert_eq!(g.channels_out(), 2 * groups * c);
                prop_assert!(g.slots >= groups);
                prop_assert_eq!(g.input_slots(g.groups_out - 1).end, g.slots);
                prop_assert!(g.group_kernel <= 3 || groups / 2 == 1);
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::GroupArithmetic(_)));
                prop_assert!((2 * groups * c) % (groups / 2) != 0);
            }
        }
    }

    #[test]
    fn pooled_grid_is_ceil_half(h in 1usize..20, w in 1usize..20) {
        prop_assert_eq!(GtaGeometry::output_grid((h, w)), (h.div_ceil(2), w.div_ceil(2)));
    }
}
