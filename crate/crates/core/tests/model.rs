use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae_core::gradcheck::{check_forward, max_rel_error};
use tvae_core::graph::Var;
use tvae_core::model::layers::{Builder, Cpe, Forward, PatchEmbed};
use tvae_core::model::{init_class_centers, CentersMode, ModelConfig, ModelKind, SeqLen, StageConfig};
use tvae_core::params::ParamStore;
use tvae_core::tensor::Tensor;
use tvae_core::{Model32, Model64};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn one_hot(rows: &[usize], k: usize) -> Tensor<f64> {
    let mut v = vec![0.0; rows.len() * k];
    for (i, &c) in rows.iter().enumerate() {
        v[i * k + c] = 1.0;
    }
    Tensor::from_vec(&[rows.len(), k], v)
}

fn all(_: usize, n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Up to 12 evenly spread coordinates.
fn spread(_: usize, n: usize) -> Vec<usize> {
    let step = n.div_ceil(12).max(1);
    (0..n).step_by(step).collect()
}

#[test]
fn pyramid_lengths_halve_with_ceiling() {
    let cfg = ModelConfig::tv_ptst(8, 5);
    for t in [16usize, 17, 64, 73] {
        let expect: Vec<usize> = (1..=4).map(|i| t.div_ceil(1 << i)).collect();
        assert_eq!(cfg.pyramid_lengths(t), expect, "T={t}");
    }
    assert_eq!(cfg.pyramid_lengths(64), vec![32, 16, 8, 4]);
    assert_eq!(StageConfig::new(3, 2, 8, 1, 2, 1).out_len(1), 1);
}

#[test]
fn stage_config_validation() {
    assert!(StageConfig::new(2, 3, 8, 1, 2, 1).validate().is_err());
    assert!(StageConfig::new(3, 2, 9, 1, 2, 1).validate().is_err());
    assert!(StageConfig::new(3, 2, 8, 0, 2, 1).validate().is_err());
    let mut cfg = ModelConfig::tv_ptst(8, 5);
    cfg.latent_dim = 4;
    cfg.centers_mode = CentersMode::FixedOrthonormal;
    assert!(Model32::new(cfg, 0).is_err());
}

#[test]
fn patch_embed_with_centre_tap_is_a_per_position_linear_map() {
    let (cin, cout, t) = (3, 4, 7);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let pe = PatchEmbed::new(&mut Builder::new(&mut store, &mut r), cin, cout, 3, 1);
    let w = Tensor::<f64>::randn(&[cin, cout], 1.0, &mut r);
    let mut kernel = vec![0.0; 3 * cin * cout];
    kernel[cin * cout..2 * cin * cout].copy_from_slice(w.data());
    store.get_mut(pe.proj.w).value = Tensor::from_vec(&[3 * cin, cout], kernel);
    let bias = store.get(pe.proj.b.unwrap()).value.clone();

    let x = Tensor::<f64>::randn(&[1, t, cin], 1.0, &mut r);
    let mut f = Forward::eval(&store);
    let xv = f.constant(x.clone());
    let y = pe.forward(&mut f, xv);
    assert_eq!(f.g.shape(y), &[1, t, cout]);
    for ti in 0..t {
        for o in 0..cout {
            let direct: f64 =
                (0..cin).map(|i| x.data()[ti * cin + i] * w.data()[i * cout + o]).sum::<f64>() + bias.data()[o];
            assert!((f.g.value(y).data()[ti * cout + o] - direct).abs() < 1e-12);
        }
    }
}

fn cpe_setup(c: usize, seed: u64) -> (ParamStore<f64>, Cpe) {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(seed);
    let cpe = Cpe::new(&mut Builder::new(&mut store, &mut r), c);
    (store, cpe)
}

fn run_cpe(store: &ParamStore<f64>, cpe: &Cpe, x: &Tensor<f64>) -> Tensor<f64> {
    let mut f = Forward::eval(store);
    let xv = f.constant(x.clone());
    let y = cpe.forward(&mut f, xv);
    f.g.value(y).clone()
}

#[test]
fn cpe_zero_filters_is_identity() {
    let (mut store, cpe) = cpe_setup(5, 2);
    store.get_mut(cpe.w).value = Tensor::zeros(&[5, 3]);
    store.get_mut(cpe.b).value = Tensor::zeros(&[5]);
    let x = Tensor::<f64>::randn(&[2, 6, 5], 1.0, &mut rng(3));
    assert_eq!(run_cpe(&store, &cpe, &x), x);
}

#[test]
fn cpe_constant_sequence_stays_constant_inside() {
    let (store, cpe) = cpe_setup(4, 4);
    let row = [0.3, -1.0, 2.0, 0.5];
    let x = Tensor::from_vec(&[1, 8, 4], row.iter().cycle().take(32).copied().collect());
    let y = run_cpe(&store, &cpe, &x);
    for t in 2..7 {
        for c in 0..4 {
            assert!((y.data()[t * 4 + c] - y.data()[4 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn cpe_matches_direct_correlation() {
    let (c, t) = (3, 9);
    let (store, cpe) = cpe_setup(c, 5);
    let x = Tensor::<f64>::randn(&[2, t, c], 1.0, &mut rng(6));
    let y = run_cpe(&store, &cpe, &x);
    let w = &store.get(cpe.w).value;
    let b = &store.get(cpe.b).value;
    for bi in 0..2 {
        for ti in 0..t {
            for ch in 0..c {
                let mut acc = b.data()[ch];
                for j in 0..3 {
                    let src = ti as i64 + j as i64 - 1;
                    if (0..t as i64).contains(&src) {
                        acc += w.data()[ch * 3 + j] * x.data()[(bi * t + src as usize) * c + ch];
                    }
                }
                let expect = x.data()[(bi * t + ti) * c + ch] + acc;
                assert!((y.data()[(bi * t + ti) * c + ch] - expect).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn encoder_shapes_and_determinism() {
    let model = Model32::new(ModelConfig::tv_ptst(8, 5), 0).unwrap();
    let row = Tensor::<f32>::randn(&[1, 64, 8], 1.0, &mut rng(7));
    let mut both = row.data().to_vec();
    both.extend_from_slice(row.data());
    let (pooled, logits) = model.encoder_forward(&Tensor::from_vec(&[2, 64, 8], both)).unwrap();
    assert_eq!(pooled.shape(), &[2, 256]);
    assert_eq!(logits.shape(), &[2, 5]);
    assert_eq!(logits.row(0), logits.row(1));
    assert_eq!(pooled.row(0), pooled.row(1));

    let mut bad = row.clone();
    bad.data_mut()[3] = f32::NAN;
    assert!(model.encoder_forward(&bad).is_err());
    assert!(model.encoder_forward(&Tensor::zeros(&[1, 64, 7])).is_err());
}

#[test]
fn outputs_do_not_depend_on_batch_composition() {
    let model = Model64::new(ModelConfig::tiny(4, 3), 1).unwrap();
    let x = Tensor::<f64>::randn(&[3, 16, 4], 1.0, &mut rng(8));
    let (_, batch) = model.encoder_forward(&x).unwrap();
    for i in 0..3 {
        let single = Tensor::from_vec(&[1, 16, 4], x.data()[i * 64..(i + 1) * 64].to_vec());
        let (_, alone) = model.encoder_forward(&single).unwrap();
        for (a, b) in alone.data().iter().zip(batch.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let z = Tensor::<f64>::randn(&[3, 16], 1.0, &mut rng(9));
    let y = one_hot(&[0, 1, 2], 3);
    let full = model.decoder_forward(&z, &y, 16).unwrap();
    let one = model
        .decoder_forward(
            &Tensor::from_vec(&[1, 16], z.row(2).to_vec()),
            &Tensor::from_vec(&[1, 3], y.row(2).to_vec()),
            16,
        )
        .unwrap();
    for (a, b) in one.data().iter().zip(&full.data()[2 * 64..]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_input_gradient_matches_finite_differences() {
    let model = Model64::new(ModelConfig::tiny(4, 3), 2).unwrap();
    let x = Tensor::<f64>::randn(&[2, 16, 4], 1.0, &mut rng(10));
    let net = model.net.clone();
    let build = move |f: &mut Forward<'_, f64>, v: &[Var]| {
        let e = net.encode(f, v[0]);
        f.g.mean_all(e.y_logits)
    };
    let samples = check_forward(&model.store, &[x], &[], &build, &spread, 1e-6);
    assert!(max_rel_error(&samples, 1e-7) < 1e-4, "{samples:?}");
}

#[test]
fn every_encoder_parameter_passes_gradient_check() {
    let mut cfg = ModelConfig::tiny(4, 3);
    cfg.kind = ModelKind::Ptst;
    let model = Model64::new(cfg, 3).unwrap();
    let x = Tensor::<f64>::randn(&[2, 16, 4], 1.0, &mut rng(11));
    let w = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng(12));
    let net = model.net.clone();
    let params: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let build = move |f: &mut Forward<'_, f64>, v: &[Var]| {
        let e = net.encode(f, v[0]);
        let wv = f.constant(w.clone());
        let s = f.g.mul(e.y_logits, wv);
        f.g.sum_all(s)
    };
    let pick = |i: usize, n: usize| if i == 0 { vec![0, n / 2] } else { spread(i, n).into_iter().take(4).collect() };
    let samples = check_forward(&model.store, &[x], &params, &build, &pick, 1e-6);
    let worst = max_rel_error(&samples, 1e-7);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn latent_heads_condition_on_y_and_pass_gradient_check() {
    let model = Model64::new(ModelConfig::tiny(4, 3), 4).unwrap();
    let pooled = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng(13));
    let (m0, s0) = model.latent_heads(&pooled, &one_hot(&[0, 0], 3)).unwrap();
    let (m1, s1) = model.latent_heads(&pooled, &one_hot(&[1, 1], 3)).unwrap();
    assert_ne!(m0, m1);
    assert_ne!(s0, s1);
    assert_eq!(m0.shape(), &[2, 16]);

    let y = Tensor::from_vec(&[2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]);
    let net = model.net.clone();
    let heads = net.heads.clone().unwrap();
    let params = vec![heads.embed_y.w, heads.mean.w, heads.log_std.w];
    let build = move |f: &mut Forward<'_, f64>, v: &[Var]| {
        let (m, s) = net.latent(f, v[0], v[1]);
        let m2 = f.g.mul(m, m);
        let a = f.g.sum_all(m2);
        let b = f.g.sum_all(s);
        f.g.add(a, b)
    };
    let samples = check_forward(&model.store, &[pooled, y], &params, &build, &spread, 1e-6);
    assert!(max_rel_error(&samples, 1e-7) < 1e-4);
}

#[test]
fn zero_initialised_heads_output_their_bias() {
    let mut model = Model64::new(ModelConfig::tiny(4, 3), 5).unwrap();
    let heads = model.net.heads.clone().unwrap();
    for id in [heads.embed_y.w, heads.mean.w, heads.log_std.w] {
        let shape = model.store.get(id).value.shape().to_vec();
        model.store.get_mut(id).value = Tensor::zeros(&shape);
    }
    let bias = model.store.get(heads.mean.b.unwrap()).value.clone();
    let pooled = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng(14));
    let (m, _) = model.latent_heads(&pooled, &one_hot(&[0, 1, 2], 3)).unwrap();
    for r in 0..3 {
        assert_eq!(m.row(r), bias.data());
    }
}

#[test]
fn isotropic_heads_share_one_scale() {
    let mut cfg = ModelConfig::tiny(4, 3);
    cfg.isotropic = true;
    let model = Model64::new(cfg, 6).unwrap();
    let pooled = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng(15));
    let (_, s) = model.latent_heads(&pooled, &one_hot(&[0, 2], 3)).unwrap();
    for r in 0..2 {
        assert!(s.row(r).iter().all(|&v| v == s.row(r)[0]));
    }
}

#[test]
fn decoder_shapes_and_z_dependence() {
    let model = Model32::new(ModelConfig::tv_ptst(8, 5), 7).unwrap();
    let z = Tensor::<f32>::randn(&[2, 256], 1.0, &mut rng(16));
    let y = one_hot(&[3, 3], 5).cast::<f32>();
    let out = model.decoder_forward(&z, &y, 64).unwrap();
    assert_eq!(out.shape(), &[2, 64, 8]);
    let diff: f32 = out.row(0).iter().zip(out.row(64)).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
    assert!(model.decoder_forward(&z, &y, 129).is_err());
}

#[test]
fn reduced_decoder_upsamples_by_nearest_neighbour() {
    let mut cfg = ModelConfig::tiny(4, 3);
    cfg.decoder.seq_len = SeqLen::Reduced { factor: 4 };
    let model = Model64::new(cfg, 8).unwrap();
    let z = Tensor::<f64>::randn(&[1, 16], 1.0, &mut rng(17));
    let out = model.decoder_forward(&z, &one_hot(&[1], 3), 16).unwrap();
    assert_eq!(out.shape(), &[1, 16, 4]);
    for t in 0..16 {
        assert_eq!(out.row(t), out.row(t / 4 * 4));
    }
}

#[test]
fn decoder_gradient_wrt_z_matches_finite_differences() {
    let model = Model64::new(ModelConfig::tiny(4, 3), 9).unwrap();
    let z = Tensor::<f64>::randn(&[2, 16], 1.0, &mut rng(18));
    let x = Tensor::<f64>::randn(&[2, 16, 4], 1.0, &mut rng(19));
    let y = one_hot(&[0, 2], 3);
    let net = model.net.clone();
    let build = move |f: &mut Forward<'_, f64>, v: &[Var]| {
        let yv = f.constant(y.clone());
        let out = net.decode(f, v[0], yv, 16).unwrap();
        let xv = f.constant(x.clone());
        let d = f.g.sub(out, xv);
        let d2 = f.g.mul(d, d);
        f.g.mean_all(d2)
    };
    let params: Vec<_> = model.store.iter().filter(|(_, p)| p.name.starts_with("decoder.")).map(|(id, _)| id).collect();
    let pick = |i: usize, n: usize| if i == 0 { all(i, n) } else { spread(i, n).into_iter().take(3).collect() };
    let samples = check_forward(&model.store, &[z], &params, &build, &pick, 1e-5);
    let worst = max_rel_error(&samples, 1e-7);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn aux_classifier_shape_determinism_and_gradient() {
    let model = Model32::new(ModelConfig::tv_ptst(8, 5), 10).unwrap();
    let z = Tensor::<f32>::randn(&[2, 256], 1.0, &mut rng(20));
    let a = model.aux_classifier(&z).unwrap();
    assert_eq!(a.shape(), &[2, 5]);
    assert_eq!(a, model.aux_classifier(&z).unwrap());

    let model = Model64::new(ModelConfig::tiny(4, 3), 10).unwrap();
    let z = Tensor::<f64>::randn(&[2, 16], 1.0, &mut rng(21));
    let net = model.net.clone();
    let aux = net.aux.clone().unwrap();
    let build = move |f: &mut Forward<'_, f64>, v: &[Var]| {
        let l = net.aux(f, v[0]);
        let ls = f.g.log_softmax(l);
        f.g.sum_all(ls)
    };
    let params = vec![aux.fc1.w, aux.fc2.w, aux.fc2.b.unwrap()];
    let samples = check_forward(&model.store, &[z], &params, &build, &spread, 1e-6);
    assert!(max_rel_error(&samples, 1e-7) < 1e-4);
}

#[test]
fn cosine_scores_examples() {
    let mut cfg = ModelConfig::tv_ptst(8, 5);
    cfg.centers_mode = CentersMode::FixedOrthonormal;
    let model = Model64::new(cfg, 11).unwrap();
    let c = model.centers().unwrap().clone();
    let z = Tensor::from_vec(&[1, 256], c.row(0).to_vec());
    let s = model.cosine_scores(&z).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12);
    assert!(s.data()[1..].iter().all(|v| v.abs() < 1e-12));

    let model = Model64::new(ModelConfig::tiny(4, 3), 12).unwrap();
    let c = model.centers().unwrap().clone();
    let z = Tensor::<f64>::randn(&[4, 16], 1.0, &mut rng(22));
    let s = model.cosine_scores(&z).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for i in 0..4 {
        for k in 0..3 {
            let dot: f64 = z.row(i).iter().zip(c.row(k)).map(|(a, b)| a * b).sum();
            let expect = dot / (norm(z.row(i)) * norm(c.row(k)));
            assert!((s.row(i)[k] - expect).abs() < 1e-6);
            assert!((-1.0..=1.0).contains(&s.row(i)[k]));
        }
    }
    let z0 = Tensor::from_vec(&[1, 16], c.row(0).to_vec());
    assert!((model.cosine_scores(&z0).unwrap().data()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn class_center_initialisation() {
    let c: Tensor<f64> = init_class_centers(CentersMode::FixedOrthonormal, 5, 256, &mut rng(23)).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let dot: f64 = c.row(i).iter().zip(c.row(j)).map(|(a, b)| a * b).sum();
            assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
        }
    }
    let again: Tensor<f64> = init_class_centers(CentersMode::FixedOrthonormal, 5, 256, &mut rng(23)).unwrap();
    assert_eq!(c, again);
    assert!(init_class_centers::<f64>(CentersMode::FixedOrthonormal, 6, 4, &mut rng(0)).is_err());
    let l: Tensor<f64> = init_class_centers(CentersMode::Learnable, 6, 4, &mut rng(24)).unwrap();
    for i in 0..6 {
        let n: f64 = l.row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    let mut cfg = ModelConfig::tv_ptst(8, 5);
    cfg.centers_mode = CentersMode::FixedOrthonormal;
    let model = Model32::new(cfg, 0).unwrap();
    let id = model.net.centers.as_ref().unwrap().id;
    assert!(!model.store.get(id).trainable);
}

/// Independent count of the encoder layout.
fn encoder_param_oracle(f: usize, k: usize, stages: &[StageConfig]) -> usize {
    let mut cin = f;
    let mut total = 0;
    for s in stages {
        let c = s.channels;
        total += s.patch * cin * c + c;
        let layer =
            (3 * c + c) + 2 + 4 * (c * c + c) + (c * s.expansion * c + s.expansion * c) + (s.expansion * c * c + c);
        total += s.layers * layer + 1;
        cin = c;
    }
    total + cin * k + k
}

#[test]
fn parameter_counts() {
    let ptst = Model32::new(ModelConfig::ptst(8, 5), 0).unwrap();
    let count = ptst.param_count();
    assert_eq!(count.encoder, encoder_param_oracle(8, 5, &ModelConfig::default_stages()));
    assert_eq!(count.total, count.encoder);
    assert_eq!(Model32::new(ModelConfig::ptst(8, 5), 99).unwrap().param_count(), count);

    let tv = Model32::new(ModelConfig::tv_ptst(8, 5), 0).unwrap();
    let c = tv.param_count();
    assert_eq!(c.encoder, count.encoder);
    assert_eq!(c.aux, 256 * 256 + 256 + 256 * 5 + 5);
    assert_eq!(c.centers, 5 * 256);
    assert_eq!(c.latent_heads, 5 * 256 + 2 * (512 * 256 + 256));
    assert_eq!(c.total, c.encoder + c.latent_heads + c.decoder + c.aux + c.centers);
}
