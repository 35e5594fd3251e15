mod common;

use auroral::eval::{max_interior_jump, seam_jump};
use auroral::geomodel::{GridMap, GridSpec};
use auroral::ingest::{FeatureSchema, Normalization};
use auroral::models::{
    forward_baseline, forward_convdecoder, forward_multitask, load_checkpoint, save_checkpoint, select_flux, Arch,
    BaselineArch, ConvDecoderArch, Model, ModelError, MultiTaskArch, ParamStore,
};
use common::world::config;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Random parameters with nonzero biases.
fn jittered(arch: &Arch, seed: u64) -> ParamStore {
    let mut p = ParamStore::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in &mut p.blocks {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    p
}

fn permute_rows(x: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn decoder_schema() -> FeatureSchema {
    config("").schema().unwrap().without_spatial().unwrap()
}

fn identity_norm(d: usize) -> Normalization {
    Normalization { mean: vec![0.0; d], std: vec![1.0; d] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn baseline_is_batch_permutation_equivariant(seed in any::<u64>(), n in 1usize..40) {
        let d = 7;
        let arch = BaselineArch { widths: vec![d, 12, 9, 1], dropout: 0.5 };
        let p = jittered(&Arch::Baseline(arch.clone()), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = inputs(&mut rng, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let y = forward_baseline(&arch, &p, &x).unwrap();
        let yp = forward_baseline(&arch, &p, &permute_rows(&x, d, &perm)).unwrap();
        let expect: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(bits(&yp), bits(&expect));
    }

    #[test]
    fn multitask_is_batch_permutation_equivariant(seed in any::<u64>(), n in 1usize..40) {
        let d = 6;
        let arch = MultiTaskArch { trunk: vec![d, 10, 8], n_classes: 3, dropout: 0.5 };
        let p = jittered(&Arch::MultiTask(arch.clone()), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = inputs(&mut rng, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let y = forward_multitask(&arch, &p, &x).unwrap();
        let yp = forward_multitask(&arch, &p, &permute_rows(&x, d, &perm)).unwrap();
        prop_assert_eq!(bits(&yp.class_probs), bits(&permute_rows(&y.class_probs, 3, &perm)));
        prop_assert_eq!(bits(&yp.region_flux), bits(&permute_rows(&y.region_flux, 3, &perm)));
        let sel: Vec<f64> = perm.iter().map(|&i| y.selected_flux[i]).collect();
        prop_assert_eq!(bits(&yp.selected_flux), bits(&sel));
    }

    #[test]
    fn scaling_class_logits_keeps_selected_flux(seed in any::<u64>(), c in 0.05f64..20.0) {
        let d = 5;
        let arch = MultiTaskArch { trunk: vec![d, 8, 6], n_classes: 3, dropout: 0.5 };
        let p = jittered(&Arch::MultiTask(arch.clone()), seed);
        let mut scaled = p.clone();
        for (name, t) in &mut scaled.blocks {
            if name.starts_with("class.") {
                t.data_mut().iter_mut().for_each(|v| *v *= c);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = inputs(&mut rng, 25, d);
        let a = forward_multitask(&arch, &p, &x).unwrap();
        let b = forward_multitask(&arch, &scaled, &x).unwrap();
        prop_assert_eq!(bits(&a.selected_flux), bits(&b.selected_flux));
        prop_assert_eq!(a.regions(), b.regions());
    }
}

#[test]
fn inference_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = BaselineArch { widths: vec![6, 11, 1], dropout: 0.5 };
    let pb = jittered(&Arch::Baseline(base.clone()), 1);
    let x = inputs(&mut rng, 30, 6);
    assert_eq!(bits(&forward_baseline(&base, &pb, &x).unwrap()), bits(&forward_baseline(&base, &pb, &x).unwrap()));

    let d = decoder_schema().width();
    let dec = ConvDecoderArch::for_grid(d, GridSpec::new(16, 16).unwrap()).unwrap();
    let pd = jittered(&Arch::ConvDecoder(dec.clone()), 2);
    let g = inputs(&mut rng, 3, d);
    assert_eq!(bits(&forward_convdecoder(&dec, &pd, &g).unwrap()), bits(&forward_convdecoder(&dec, &pd, &g).unwrap()));
}

#[test]
fn selection_matches_argmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let arch = MultiTaskArch { trunk: vec![4, 9, 7], n_classes: 3, dropout: 0.5 };
    let p = jittered(&Arch::MultiTask(arch.clone()), 3);
    let y = forward_multitask(&arch, &p, &inputs(&mut rng, 200, 4)).unwrap();
    for i in 0..200 {
        let probs = &y.class_probs[3 * i..3 * i + 3];
        let mut k = 0;
        for j in 1..3 {
            if probs[j] > probs[k] {
                k = j;
            }
        }
        assert_eq!(y.selected_flux[i], y.region_flux[3 * i + k]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(select_flux(&y.class_probs, &y.region_flux, 3), y.selected_flux);
}

fn decoder_map(arch: &ConvDecoderArch, p: &ParamStore, x: &[f64]) -> GridMap {
    GridMap::dense(arch.grid(), forward_convdecoder(arch, p, x).unwrap())
}

#[test]
fn decoder_output_has_no_seam_discontinuity() {
    let d = decoder_schema().width();
    let arch = ConvDecoderArch::for_grid(d, GridSpec::new(32, 32).unwrap()).unwrap();
    for seed in 0..50u64 {
        let p = jittered(&Arch::ConvDecoder(arch.clone()), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = decoder_map(&arch, &p, &inputs(&mut rng, 1, d));
        let (seam, interior) = (seam_jump(&map), max_interior_jump(&map));
        assert!(interior > 0.0, "seed {seed}: flat output");
        assert!(seam <= interior, "seed {seed}: seam {seam} > interior {interior}");
    }
}

#[test]
fn rolling_final_kernel_columns_rolls_output_columns() {
    let d = decoder_schema().width();
    let arch = ConvDecoderArch::for_grid(d, GridSpec::new(16, 16).unwrap()).unwrap();
    let kw = arch.final_kernel;
    let (h, w) = (arch.n_lat, arch.n_mlt);
    for seed in 0..10u64 {
        let mut p = jittered(&Arch::ConvDecoder(arch.clone()), seed);
        let idx = p.blocks.iter().position(|(n, _)| n == "final.k").unwrap();
        // With the trailing kernel column zeroed, a right roll of the kernel
        // reads the periodic padding one column further along MLT.
        for row in p.blocks[idx].1.data_mut().chunks_exact_mut(kw) {
            row[kw - 1] = 0.0;
        }
        let mut rolled = p.clone();
        for row in rolled.blocks[idx].1.data_mut().chunks_exact_mut(kw) {
            row.rotate_right(1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = inputs(&mut rng, 2, d);
        let a = forward_convdecoder(&arch, &p, &x).unwrap();
        let b = forward_convdecoder(&arch, &rolled, &x).unwrap();
        for n in 0..2 {
            for r in 0..h {
                for c in 0..w {
                    let got = b[n * h * w + r * w + c];
                    let want = a[n * h * w + r * w + (c + 1) % w];
                    assert_eq!(got.to_bits(), want.to_bits(), "seed {seed} sample {n} cell ({r}, {c})");
                }
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let schema = config("").schema().unwrap();
    let d = schema.width();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let norm = Normalization { mean: inputs(&mut rng, 1, d), std: vec![1.5; d] };
    let dschema = decoder_schema();
    let dd = dschema.width();
    let dec = ConvDecoderArch::for_grid(dd, GridSpec::new(16, 16).unwrap()).unwrap();
    let models = [
        (Arch::Baseline(BaselineArch { widths: vec![d, 8, 1], dropout: 0.5 }), schema.clone(), norm.clone()),
        (Arch::MultiTask(MultiTaskArch { trunk: vec![d, 8, 4], n_classes: 3, dropout: 0.5 }), schema.clone(), norm),
        (Arch::ConvDecoder(dec), dschema, identity_norm(dd)),
    ];
    for (i, (arch, schema, norm)) in models.into_iter().enumerate() {
        let p = jittered(&arch, i as u64);
        let mut model = Model::new(arch.clone(), p, schema, norm).unwrap();
        model.params.round_to_f32();
        model.meta.push(("seed".into(), i.to_string()));
        let path = dir.path().join(format!("m{i}.aurn"));
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        let w = arch.input_width();
        let probe = inputs(&mut rng, 5, w);
        let out = |m: &Model| match &m.arch {
            Arch::Baseline(a) => forward_baseline(a, &m.params, &probe).unwrap(),
            Arch::MultiTask(a) => forward_multitask(a, &m.params, &probe).unwrap().selected_flux,
            Arch::ConvDecoder(a) => forward_convdecoder(a, &m.params, &probe).unwrap(),
        };
        assert_eq!(bits(&out(&back)), bits(&out(&model)));
    }
}

#[test]
fn parameters_of_another_architecture_are_rejected() {
    let a = Arch::Baseline(BaselineArch { widths: vec![4, 8, 1], dropout: 0.5 });
    let b = Arch::Baseline(BaselineArch { widths: vec![4, 6, 1], dropout: 0.5 });
    let pa = ParamStore::init(&a, 0).unwrap();
    assert!(matches!(pa.validate(&b), Err(ModelError::ShapeMismatch { .. })));
    let m = MultiTaskArch { trunk: vec![4, 8], n_classes: 3, dropout: 0.5 };
    assert!(pa.validate(&Arch::MultiTask(m)).is_err());
    assert!(matches!(
        forward_baseline(&BaselineArch { widths: vec![4, 6, 1], dropout: 0.5 }, &pa, &[0.0; 4]),
        Err(ModelError::ShapeMismatch { .. })
    ));
}
