mod common;

use common::{
    brute_force_rq, mapper_config as config, max_relative_error, rng, scalar_quantization, scalar_recons, uniform,
    MapperRig,
};
use face_core::autograd::Tape;
use face_core::mapper::{map_loss, quantize_rows, MapperConfig};
use face_core::params::{Adam, AdamConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn setup(seed: u64, cfg: MapperConfig, cf_dim: usize, vocab: usize, llm_dim: usize) -> MapperRig {
    MapperRig::new(seed, cfg, cf_dim, vocab, llm_dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_losses_match_scalar_oracles(seed in any::<u64>(), batch in 1usize..5, n in 1usize..4, levels in 1usize..4) {
        let s = setup(seed, config(n, levels), 6, 12, 9);
        let e = uniform(&mut rng(seed ^ 1), batch, 6);
        let (tape, out) = s.forward(&e);
        let projected = s.projected();
        let z_e = tape.value(out.z_e).clone();
        for (row, codes) in out.codes.iter().enumerate() {
            let (oracle, _) = brute_force_rq(z_e.row(row).as_slice().unwrap(), &projected.matrix, levels);
            prop_assert_eq!(codes, &oracle);
        }
        let recons = scalar_recons(&e, tape.value(out.e_re));
        let quant = scalar_quantization(&z_e, &out.codes, &projected.matrix, 0.25, batch);
        prop_assert!((tape.scalar(out.recons) - recons).abs() < 1e-9);
        prop_assert!((tape.scalar(out.quantization) - quant).abs() < 1e-9);
        prop_assert!((tape.scalar(out.total) - recons - quant).abs() < 1e-9);
    }

    #[test]
    fn map_loss_matches_scalar_oracle(seed in any::<u64>(), n in 1usize..5, levels in 1usize..4, d in 1usize..6) {
        let mut g = rng(seed);
        let codebook = uniform(&mut g, 10, d);
        let z_e = uniform(&mut g, n, d);
        let e = uniform(&mut g, 1, 7);
        let e_re = uniform(&mut g, 1, 7);
        let aspects = quantize_rows(z_e.view(), codebook.view(), &face_core::codebook::squared_norms(codebook.view()), levels);
        let codes: Vec<Vec<usize>> = aspects.iter().map(|q| q.codes.clone()).collect();
        let got = map_loss(e.row(0), e_re.row(0), &aspects, 0.25);
        prop_assert!((got.recons - scalar_recons(&e, &e_re)).abs() < 1e-9);
        prop_assert!((got.quantization - scalar_quantization(&z_e, &codes, &codebook, 0.25, 1)).abs() < 1e-9);
    }
}

#[test]
fn recons_gradient_matches_finite_differences_on_decoder_parameters() {
    let s = setup(5, config(3, 2), 6, 15, 9);
    let e = uniform(&mut rng(6), 4, 6);
    // parameters downstream of the quantizer: the argmin does not move with them
    for name in ["mapper.projector.weight", "mapper.decoder.positions", "mapper.decoder.layer0.ff.out.weight"] {
        let id = s.store.lookup(name).unwrap();
        let err = max_relative_error(&s.recons_gradient(&e, id), &s.numeric_recons_gradient(&e, id));
        assert!(err < 1e-4, "{name}: {err}");
    }
}

/// The straight-through estimator hands the encoder exactly the gradient the
/// decoder would send to a free `z_q` input.
#[test]
fn encoder_gradient_equals_substituted_decoder_gradient() {
    let s = setup(8, config(3, 2), 6, 15, 9);
    let e = uniform(&mut rng(9), 5, 6);
    let (gap, compared) = s.straight_through_gap(&e);
    assert!(compared > 0);
    assert!(gap < 1e-9, "{gap}");
}

#[test]
fn reconstruction_is_trainable() {
    let mut s = setup(12, config(2, 2), 6, 40, 9);
    let e = uniform(&mut rng(13), 8, 6);
    let mut adam = Adam::new(AdamConfig { lr: 5e-3, ..AdamConfig::default() }, &s.store);
    let (t0, o0) = s.forward(&e);
    let start = t0.scalar(o0.total);
    let mut last = start;
    for _ in 0..200 {
        let projected = s.projected();
        let mut tape = Tape::new();
        let p = s.store.bind(&mut tape);
        let ev = tape.constant(e.clone());
        let out = s.mapper.forward(&mut tape, &p, ev, &s.frozen, p.var(s.projection), &projected);
        last = tape.scalar(out.total);
        let mut grads = tape.backward(out.total);
        let g = p.gradients(&mut grads);
        adam.step(&mut s.store, &g, |_, _| true);
    }
    assert!(last < 0.5 * start, "{start} -> {last}");
}

#[test]
fn inference_agrees_with_the_training_pass() {
    let s = setup(15, config(3, 3), 6, 20, 9);
    let e = uniform(&mut rng(16), 4, 6);
    let (tape, out) = s.forward(&e);
    let projected = s.projected();
    let inf = s.mapper.infer(&s.store, &projected, e.view());
    let codes: Vec<Vec<usize>> = inf.aspects.iter().map(|q| q.codes.clone()).collect();
    assert_eq!(codes, out.codes);
    assert_eq!(inf.descriptor_ids(), out.descriptor_ids(3));
    for (a, b) in inf.e_re.iter().zip(tape.value(out.e_re).iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn single_level_generation_reproduces_inference() {
    let s = setup(17, config(3, 1), 6, 20, 9);
    let e = uniform(&mut rng(18), 5, 6);
    let projected = s.projected();
    let inf = s.mapper.infer(&s.store, &projected, e.view());
    for (b, ids) in inf.descriptor_ids().iter().enumerate() {
        let g = s.mapper.generate_from_descriptors(&s.store, &projected, ids).unwrap();
        for (x, y) in g.iter().zip(inf.e_re.row(b)) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_input_projects_to_zero_aspects() {
    let s = setup(19, config(3, 2), 6, 10, 9);
    let mut tape = Tape::new();
    let p = s.store.bind(&mut tape);
    let zero = tape.constant(Array2::zeros((2, 6)));
    let proj = s.mapper.multi_project(&mut tape, &p, zero);
    assert_eq!(tape.shape(proj), (6, 4));
    assert!(tape.value(proj).iter().all(|&v| v == 0.0));
}

#[test]
fn projection_rows_follow_each_head() {
    let s = setup(20, config(3, 2), 6, 10, 9);
    let e = uniform(&mut rng(21), 2, 6);
    let mut tape = Tape::new();
    let p = s.store.bind(&mut tape);
    let ev = tape.constant(e.clone());
    let proj = s.mapper.multi_project(&mut tape, &p, ev);
    let v = tape.value(proj);
    for b in 0..2 {
        for i in 0..3 {
            let expect = s.mapper.head(&s.store, i).dot(&e.row(b));
            for (x, y) in v.row(b * 3 + i).iter().zip(expect.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn construction_is_deterministic_per_seed() {
    let a = setup(30, config(2, 2), 6, 10, 9);
    let b = setup(30, config(2, 2), 6, 10, 9);
    for ((_, na, ma), (_, nb, mb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ma, mb);
    }
    let e = uniform(&mut rng(31), 3, 6);
    let pa = a.projected();
    let pb = b.projected();
    assert_eq!(
        a.mapper.infer(&a.store, &pa, e.view()).z_e,
        b.mapper.infer(&b.store, &pb, e.view()).z_e
    );
    let c = setup(31, config(2, 2), 6, 10, 9);
    assert_ne!(a.store.get(a.mapper.heads_param()), c.store.get(c.mapper.heads_param()));
}
