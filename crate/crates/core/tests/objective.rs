use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae_core::gradcheck::{check_forward, max_rel_error};
use tvae_core::graph::Var;
use tvae_core::model::layers::Forward;
use tvae_core::model::{CentersMode, ModelConfig};
use tvae_core::objective::{
    cosine_loss, cosine_loss_soft, gamma2_schedule, gaussian_component_kl, objective, recon_loss, Batch, ClassPrior,
    Gamma2Schedule, KlAnneal, LossBreakdown, Noise, ObjectiveConfig, Progress,
};
use tvae_core::tensor::Tensor;
use tvae_core::Model64;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model_for(obj: &ObjectiveConfig, seed: u64) -> Model64 {
    let mut cfg = ModelConfig::tiny(4, 3);
    obj.configure_model(&mut cfg);
    Model64::new(cfg, seed).unwrap()
}

fn batch(labels: Vec<Option<usize>>, seed: u64) -> Batch<f64> {
    let x = Tensor::randn(&[labels.len(), 12, 4], 1.0, &mut rng(seed));
    Batch::new(x, labels).unwrap()
}

fn run(
    model: &Model64,
    obj: &ObjectiveConfig,
    b: &Batch<f64>,
    noise: &Noise<f64>,
    step: usize,
) -> (LossBreakdown, Vec<Tensor<f64>>) {
    let mut f = Forward::eval(&model.store);
    let out = objective(&mut f, &model.net, obj, b, noise, Progress { step, total_steps: 10 }).unwrap();
    let v = out.vars;
    let tensors = [Some(v.y_logits), v.mean, v.log_std, v.z, v.x_hat]
        .iter()
        .map(|o| o.map(|var| f.g.value(var).clone()).unwrap_or_else(|| Tensor::zeros(&[0])))
        .collect();
    (out.breakdown, tensors)
}

fn unit_rows(rows: &[&[f64]]) -> Tensor<f64> {
    let d = rows[0].len();
    Tensor::from_vec(&[rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())
}

#[test]
fn recon_examples() {
    let x = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng(1));
    assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
    let shifted = x.map(|v| v + 1.0);
    assert!((recon_loss(&x, &shifted).unwrap() - 1.0).abs() < 1e-12);
    let y = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng(2));
    let mut oracle = 0.0;
    for i in 0..15 {
        oracle += (x.data()[i] - y.data()[i]).powi(2);
    }
    assert!((recon_loss(&x, &y).unwrap() - oracle / 15.0).abs() < 1e-12);
    assert!(recon_loss(&x, &Tensor::zeros(&[3, 5])).is_err());
}

#[test]
fn cosine_loss_examples() {
    let centers = unit_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    assert!(cosine_loss(&[2.0, 0.0, 0.0], &centers, 0, 0.0).unwrap().abs() < 1e-12);

    // K = 2: cos with the true center is 1, with the negative 0.5
    let a = 0.5f64.acos();
    let centers2 = unit_rows(&[&[1.0, 0.0], &[a.cos(), a.sin()]]);
    let l = cosine_loss(&[1.0, 0.0], &centers2, 0, 0.2).unwrap();
    assert!((l - 0.3).abs() < 1e-12, "{l}");

    let centers4 = unit_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
    assert!((cosine_loss(&[0.0, 0.0, 1.0, 0.0], &centers4, 1, 0.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(cosine_loss(&[1.0, 0.0], &centers2, 2, 0.0).is_err());
}

#[test]
fn soft_cosine_loss_is_weighted_average_of_hard_losses() {
    let centers = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng(3));
    let z: Vec<f64> = Tensor::<f64>::randn(&[5], 1.0, &mut rng(4)).into_vec();
    let w = [0.2, 0.5, 0.3];
    let hard: Vec<f64> = (0..3).map(|y| cosine_loss(&z, &centers, y, 0.1).unwrap()).collect();
    let soft = cosine_loss_soft(&z, &centers, &w, 0.1).unwrap();
    assert!((soft - (0.2 * hard[0] + 0.5 * hard[1] + 0.3 * hard[2])).abs() < 1e-12);
}

#[test]
fn gaussian_component_kl_examples() {
    let centers = unit_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
    let kl = gaussian_component_kl(&[0.0, 1.0, 0.0], &[0.0; 3], &centers).unwrap();
    assert!(kl[1].abs() < 1e-12);
    let kl = gaussian_component_kl(&[0.0; 3], &[0.0; 3], &centers).unwrap();
    assert!(kl.iter().all(|v| (v - 0.5).abs() < 1e-12), "{kl:?}");
}

#[test]
fn gamma2_schedule_examples() {
    let m = Gamma2Schedule::Cosine;
    assert_eq!(gamma2_schedule(0, 40, m), 0.0);
    assert!((gamma2_schedule(40, 40, m) - 1.0).abs() < 1e-12);
    assert!((gamma2_schedule(20, 40, m) - 0.5).abs() < 1e-12);
    assert_eq!(gamma2_schedule(0, 0, m), 1.0);
}

#[test]
fn total_is_weighted_sum_for_every_ablation_column() {
    for name in ["I", "II", "III", "IV", "V", "VI", "VII"] {
        let obj = ObjectiveConfig::preset(name).unwrap();
        let model = model_for(&obj, 5);
        let b = batch(vec![Some(0), None, Some(2), None], 6);
        let noise = Noise::sample(&mut rng(7), 4, 16, 3);
        for step in [0, 3, 10] {
            let (bd, _) = run(&model, &obj, &b, &noise, step);
            assert!((bd.total - bd.weighted_sum()).abs() < 1e-6, "{name} step {step}: {bd:?}");
            assert!(bd.kl_yz_yx >= 0.0 && bd.kl_ycos_yx >= 0.0 && bd.kl_yx_prior >= 0.0);
            assert_eq!((bd.n_labelled, bd.n_unlabelled), (2, 2));
        }
    }
}

#[test]
fn column_toggles_match_ablation_matrix() {
    let p = |n: &str| ObjectiveConfig::preset(n).unwrap();
    assert!(!p("I").ce_on_z && !p("I").kl_yz_yx);
    assert!(p("II").ce_on_z && !p("II").kl_yz_yx);
    assert_eq!(p("III").gamma2_schedule, Gamma2Schedule::Constant(1.0));
    assert!(!p("IV").cos_with_ground_truth);
    assert!(!p("V").learnable_centers);
    assert!(p("VI").kl_ycos_yx);
    let vii = p("VII");
    assert!(vii.ce_on_z && vii.kl_yz_yx && vii.cos_with_ground_truth && vii.learnable_centers);
    assert!(vii.categorical_prior_kl && !vii.kl_ycos_yx && vii.gamma2_schedule == Gamma2Schedule::Cosine);
    assert_eq!(p("tvae"), vii);
    assert_eq!(p("cos-learnable-full"), vii);
    assert_eq!(p("cos-fixed-full"), p("V"));
    assert_eq!(p("cos-learnable"), p("I"));
    let dkl = p("dkl-learnable");
    assert!(dkl.use_dkl_gaussian_instead_of_cos && dkl.learnable_centers && !dkl.ce_on_z);
    assert!(matches!(dkl.kl_anneal, KlAnneal::Linear { .. }));
    assert!(p("dkl-fixed-full").ce_on_z && !p("dkl-fixed-full").learnable_centers);
}

#[test]
fn fully_labelled_column_vii_has_all_six_components() {
    let obj = ObjectiveConfig::preset("VII").unwrap();
    let model = model_for(&obj, 8);
    let b = batch(vec![Some(0), Some(1), Some(2)], 9);
    let noise = Noise::sample(&mut rng(10), 3, 16, 3);
    let (bd, _) = run(&model, &obj, &b, &noise, 5);
    for (name, v) in [
        ("recon", bd.recon),
        ("cos", bd.cos_or_kl_z),
        ("ce_yx", bd.ce_yx),
        ("ce_yz", bd.ce_yz),
        ("kl_yz_yx", bd.kl_yz_yx),
        ("kl_yx_prior", bd.kl_yx_prior),
    ] {
        assert!(v > 0.0, "{name} = {v}");
    }
    assert_eq!(bd.n_unlabelled, 0);
}

#[test]
fn unlabelled_batch_drops_cross_entropy() {
    let obj = ObjectiveConfig::preset("VII").unwrap();
    let model = model_for(&obj, 11);
    let b = batch(vec![None; 3], 12);
    let noise = Noise::sample(&mut rng(13), 3, 16, 3);
    let (bd, _) = run(&model, &obj, &b, &noise, 5);
    assert_eq!((bd.ce_yx, bd.ce_yz, bd.n_labelled), (0.0, 0.0, 0));
    assert!(bd.recon > 0.0 && bd.cos_or_kl_z > 0.0);
    assert!((bd.total - bd.weighted_sum()).abs() < 1e-9);
}

#[test]
fn reduced_objective_matches_independent_recomputation() {
    let obj = ObjectiveConfig {
        gamma1: 0.0,
        gamma2_schedule: Gamma2Schedule::Constant(0.0),
        categorical_prior_kl: false,
        margin: 0.1,
        ..ObjectiveConfig::preset("VII").unwrap()
    };
    let model = model_for(&obj, 14);
    let labels = vec![Some(1), None, Some(0), None];
    let b = batch(labels.clone(), 15);
    let noise = Noise::sample(&mut rng(16), 4, 16, 3);
    let (bd, t) = run(&model, &obj, &b, &noise, 4);
    let (y_logits, z, x_hat) = (&t[0], &t[3], &t[4]);

    let recon = recon_loss(&b.x, x_hat).unwrap();
    let centers = model.centers().unwrap();
    let mut cos_term = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let zi = z.row(i);
        cos_term += match l {
            Some(y) => cosine_loss(zi, centers, *y, 0.1).unwrap(),
            None => {
                let row = y_logits.row(i);
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let q: Vec<f64> = e.iter().map(|v| v / s).collect();
                cosine_loss_soft(zi, centers, &q, 0.1).unwrap()
            }
        };
    }
    cos_term /= 4.0;
    assert!((bd.recon - recon).abs() < 1e-10);
    assert!((bd.cos_or_kl_z - cos_term).abs() < 1e-10, "{} vs {cos_term}", bd.cos_or_kl_z);
    assert!((bd.total - (recon + cos_term)).abs() < 1e-9);
}

#[test]
fn gaussian_mixture_term_matches_component_oracle() {
    let obj = ObjectiveConfig::preset("dkl-fixed").unwrap();
    let model = model_for(&obj, 17);
    assert_eq!(model.cfg.centers_mode, CentersMode::FixedOrthonormal);
    let labels = vec![Some(2), None, None];
    let b = batch(labels.clone(), 18);
    let noise = Noise::sample(&mut rng(19), 3, 16, 3);
    let (bd, t) = run(&model, &obj, &b, &noise, 2);
    let (y_logits, mean, log_std) = (&t[0], &t[1], &t[2]);
    let centers = model.centers().unwrap();
    let mut oracle = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let kl = gaussian_component_kl(mean.row(i), log_std.row(i), centers).unwrap();
        oracle += match l {
            Some(y) => kl[*y],
            None => {
                let row = y_logits.row(i);
                let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().zip(&kl).map(|(p, k)| p / s * k).sum()
            }
        };
    }
    oracle /= 3.0;
    assert!((bd.cos_or_kl_z - oracle).abs() < 1e-9, "{} vs {oracle}", bd.cos_or_kl_z);
    assert!((bd.total - bd.weighted_sum()).abs() < 1e-9);
}

#[test]
fn learnable_mixture_term_is_annealed() {
    let obj = ObjectiveConfig::preset("dkl-learnable").unwrap();
    let model = model_for(&obj, 20);
    let b = batch(vec![Some(0), Some(1)], 21);
    let noise = Noise::sample(&mut rng(22), 2, 16, 3);
    let (bd, _) = run(&model, &obj, &b, &noise, 0);
    assert_eq!(bd.weights.cos_or_kl_z, 0.0);
    let (bd, _) = run(&model, &obj, &b, &noise, 10);
    assert_eq!(bd.weights.cos_or_kl_z, 1.0);
}

#[test]
fn empirical_prior_changes_prior_term() {
    let base = ObjectiveConfig::preset("VII").unwrap();
    let emp = ObjectiveConfig { prior_y: ClassPrior::empirical(&[8, 1, 1]), ..base.clone() };
    let model = model_for(&base, 23);
    let b = batch(vec![Some(0), None], 24);
    let noise = Noise::sample(&mut rng(25), 2, 16, 3);
    let (a, _) = run(&model, &base, &b, &noise, 1);
    let (c, _) = run(&model, &emp, &b, &noise, 1);
    assert_ne!(a.kl_yx_prior, c.kl_yx_prior);
    assert_eq!(a.recon, c.recon);
}

#[test]
fn ptst_objective_is_labelled_cross_entropy() {
    let obj = ObjectiveConfig::ptst();
    let model = model_for(&obj, 26);
    let b = batch(vec![Some(0), None, Some(1)], 27);
    let noise = Noise::zeros(3, 16, 3);
    let (bd, t) = run(&model, &obj, &b, &noise, 0);
    let y = &t[0];
    let ce = |i: usize, c: usize| {
        let row = y.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[c]
    };
    let oracle = (ce(0, 0) + ce(2, 1)) / 2.0;
    assert!((bd.total - oracle).abs() < 1e-10);
    assert_eq!(bd.recon, 0.0);
}

#[test]
fn generative_objective_rejects_classifier_only_model() {
    let model = model_for(&ObjectiveConfig::ptst(), 28);
    let b = batch(vec![Some(0)], 29);
    let mut f = Forward::eval(&model.store);
    let obj = ObjectiveConfig::default();
    let r = objective(&mut f, &model.net, &obj, &b, &Noise::zeros(1, 16, 3), Progress { step: 0, total_steps: 1 });
    assert!(r.is_err());
}

fn fd_check(name: &str, labels: Vec<Option<usize>>) {
    let obj = ObjectiveConfig { margin: 0.05, ..ObjectiveConfig::preset(name).unwrap() };
    let model = model_for(&obj, 30);
    let b = batch(labels.clone(), 31);
    let noise = Noise::sample(&mut rng(32), labels.len(), 16, 3);
    let net = model.net.clone();
    let build = |f: &mut Forward<'_, f64>, _: &[Var]| {
        objective(f, &net, &obj, &b, &noise, Progress { step: 4, total_steps: 10 }).unwrap().loss
    };
    // a few coordinates from every parameter tensor
    let params: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let pick = |_: usize, n: usize| vec![0, n / 2, n - 1];
    let samples = check_forward(&model.store, &[], &params, &build, &pick, 1e-5);
    let worst = max_rel_error(&samples, 1e-7);
    assert!(worst < 1e-4, "{name}: worst relative error {worst}");
}

#[test]
fn full_objective_passes_gradient_check() {
    fd_check("VII", vec![Some(0), None, Some(2)]);
}

#[test]
fn cosine_softmax_column_passes_gradient_check() {
    fd_check("VI", vec![None, Some(1)]);
}

#[test]
fn mixture_baseline_passes_gradient_check() {
    fd_check("dkl-learnable-full", vec![Some(1), None]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_loss_non_negative(
        z in prop::collection::vec(-3.0f64..3.0, 4),
        c in prop::collection::vec(-3.0f64..3.0, 12),
        y in 0usize..3,
        margin in 0.0f64..1.0,
    ) {
        let centers = Tensor::from_vec(&[3, 4], c);
        prop_assert!(cosine_loss(&z, &centers, y, margin).unwrap() >= -1e-12);
    }

    #[test]
    fn component_kl_non_negative(
        m in prop::collection::vec(-3.0f64..3.0, 3),
        s in prop::collection::vec(-3.0f64..3.0, 3),
        c in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let centers = Tensor::from_vec(&[2, 3], c);
        for v in gaussian_component_kl(&m, &s, &centers).unwrap() {
            prop_assert!(v >= -1e-12);
        }
    }

    #[test]
    fn gamma2_cosine_is_monotone(total in 1usize..500, a in 0usize..500, b in 0usize..500) {
        let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
        let m = Gamma2Schedule::Cosine;
        prop_assert!(gamma2_schedule(lo, total, m) <= gamma2_schedule(hi, total, m) + 1e-15);
    }
}
