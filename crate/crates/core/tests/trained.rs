//! Checks that need trained models. All tests share one seed-0 training run
//! with the default configuration.

use std::sync::OnceLock;

use advrestore::attack::{fim_attack, target_embedding, AttackConfig, FinalStepObjective, Variant};
use advrestore::data::{build_dataset, Dataset, DatasetParams, Split};
use advrestore::facerec::{
    adversarial_finetune, embedding_distance, sign, train_fr_model, verification_accuracy, Embedder, EmbeddingModel,
    FrTraining, Role,
};
use advrestore::metrics::psnr;
use advrestore::rldm::{
    train_autoencoder, train_rldm, AutoencoderConfig, AutoencoderTraining, Rldm, RldmTraining, ScheduleConfig,
    UnetConfig,
};
use advrestore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restore_autodiff::Graph;

const FAR: f64 = 0.01;
const RHO: f64 = 8.0 / 255.0;

struct Fixture {
    ds: Dataset,
    rldm: Rldm,
    rldm_losses: Vec<f64>,
    surrogate: EmbeddingModel,
    victim: EmbeddingModel,
    robust: EmbeddingModel,
}

fn pairs(p: &[advrestore::data::Pair]) -> Vec<(usize, usize)> {
    p.iter().map(|p| (p.a, p.b)).collect()
}

fn hq(ds: &Dataset) -> Vec<Tensor> {
    ds.records.iter().map(|r| r.hq.clone()).collect()
}

fn accuracy(m: &EmbeddingModel, ds: &Dataset) -> f64 {
    let images = hq(ds);
    let g = m.pair_distances(&images, &pairs(&ds.manifest.genuine_pairs)).unwrap();
    let i = m.pair_distances(&images, &pairs(&ds.manifest.impostor_pairs)).unwrap();
    verification_accuracy(&g, &i, &m.threshold().unwrap())
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = build_dataset(0, &DatasetParams::default()).unwrap();
        let train: Vec<_> = ds.split(Split::Train).collect();
        let images: Vec<Tensor> = train.iter().map(|r| r.hq.clone()).collect();
        let degraded: Vec<Tensor> = train.iter().map(|r| r.degraded.clone()).collect();
        let labels: Vec<usize> = train.iter().map(|r| r.identity).collect();

        let (ae, _) = train_autoencoder(
            &images,
            AutoencoderConfig::default(),
            &AutoencoderTraining::default(),
            10,
        )
        .unwrap();
        let (rldm, rldm_losses) = train_rldm(
            ae,
            &images,
            &degraded,
            UnetConfig::default(),
            ScheduleConfig::default(),
            &RldmTraining::default(),
            11,
        )
        .unwrap();

        let fr = FrTraining::default();
        let all = hq(&ds);
        let impostors = pairs(&ds.manifest.impostor_pairs);
        let mut surrogate = train_fr_model("surrogate", &images, &labels, Role::Surrogate, 3, &fr, 12).unwrap();
        let mut victim = train_fr_model("victim", &images, &labels, Role::Victim, 22, &fr, 13).unwrap();
        let robust_training = FrTraining {
            steps: 200,
            lr: 1e-3,
            ..fr
        };
        let mut robust = adversarial_finetune(&victim, &images, &labels, RHO, &robust_training, 14).unwrap();
        for m in [&mut surrogate, &mut victim, &mut robust] {
            m.calibrate(&all, &impostors, FAR).unwrap();
        }
        Fixture {
            ds,
            rldm,
            rldm_losses,
            surrogate,
            victim,
            robust,
        }
    })
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[test]
fn diffusion_loss_falls_during_training() {
    let l = &fixture().rldm_losses;
    assert!(l.len() >= 2050);
    let mean = |r: std::ops::Range<usize>| l[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let (early, late) = (mean(50..150), mean(1950..2050));
    assert!(late < early, "smoothed loss {early} at step 100, {late} at step 2000");
}

#[test]
fn restoration_is_deterministic_and_improves_psnr() {
    let f = fixture();
    let test: Vec<_> = f.ds.split(Split::Test).collect();
    let (mut restored, mut degraded) = (0.0, 0.0);
    for (k, r) in test.iter().enumerate() {
        let out = f.rldm.restore(&r.degraded, k as u64).unwrap();
        assert_eq!(out.unet_timesteps.len(), f.rldm.subsequence().len());
        restored += psnr(&out.image, &r.hq, 1.0).unwrap();
        degraded += psnr(&r.degraded, &r.hq, 1.0).unwrap();
    }
    assert!(restored > degraded, "restored {restored} vs degraded {degraded}");
    let x = &test[0].degraded;
    assert_eq!(f.rldm.restore(x, 5).unwrap(), f.rldm.restore(x, 5).unwrap());
}

#[test]
fn unet_conditioning_is_live_and_its_gradient_matches_finite_differences() {
    let f = fixture();
    let unet = f.rldm.unet();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = &f.ds.records[0];
    let c1 = f.rldm.encode(&x.degraded).unwrap();
    let c2 = f.rldm.encode(&f.ds.records[30].degraded).unwrap();
    let z = Tensor::randn(c1.shape(), &mut rng);
    let r = 500;
    assert!(
        unet.predict(&c1, &z, r)
            .unwrap()
            .max_abs_diff(&unet.predict(&c2, &z, r).unwrap())
            .unwrap()
            > 1e-6
    );

    let w = Tensor::randn(&[1, 4, 8, 8], &mut rng);
    let functional = |zn: &Tensor| -> (f64, Tensor) {
        let mut g = Graph::new();
        let p = unet.params().bind_constant(&mut g);
        let c = g.constant(c1.unsqueeze0());
        let zv = g.leaf(zn.unsqueeze0());
        let t = g.constant(unet.time_embedding().embed(r).unsqueeze0());
        let eps = unet.forward_graph(&mut g, &p, c, zv, t).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.mul(eps, wv).unwrap();
        let loss = g.sum(prod);
        let grad = g.backward(loss).unwrap().wrt(zv);
        (g.value(loss).data()[0], grad)
    };
    let (_, grad) = functional(&z);
    let scale = grad.max_abs();
    for _ in 0..24 {
        let j = rng.random_range(0..z.len());
        let (mut p, mut m) = (z.clone(), z.clone());
        p.data_mut()[j] += 1e-5;
        m.data_mut()[j] -= 1e-5;
        let numeric = (functional(&p).0 - functional(&m).0) / 2e-5;
        let e = rel_err(grad.data()[j], numeric, 1e-3 * scale);
        assert!(
            e <= 1e-4,
            "coordinate {j}: analytic {} numeric {numeric}",
            grad.data()[j]
        );
    }
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let f = fixture();
    let x = f.ds.records[3].hq.clone();
    let energy = |x: &Tensor| -> (f64, Tensor) {
        let mut g = Graph::new();
        let xv = g.leaf(x.unsqueeze0());
        let e = f.victim.embed_var(&mut g, xv).unwrap();
        let sq = g.mul(e, e).unwrap();
        let loss = g.sum(sq);
        let grad = g.backward(loss).unwrap().wrt(xv);
        (g.value(loss).data()[0], grad)
    };
    let (value, grad) = energy(&x);
    assert!((value - f.victim.embed(&x).unwrap().norm_sq()).abs() <= 1e-12 * value.max(1.0));
    let scale = grad.max_abs();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..32 {
        let j = rng.random_range(0..x.len());
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[j] += 1e-5;
        m.data_mut()[j] -= 1e-5;
        let numeric = (energy(&p).0 - energy(&m).0) / 2e-5;
        assert!(rel_err(grad.data()[j], numeric, 1e-3 * scale) <= 1e-4);
    }
}

#[test]
fn face_models_verify_and_differ() {
    let f = fixture();
    for m in [&f.surrogate, &f.victim, &f.robust] {
        let acc = accuracy(m, &f.ds);
        assert!(acc >= 0.90, "{} accuracy {acc}", m.name());
        assert!(m.threshold().unwrap().threshold > 0.0);
    }
    let images = hq(&f.ds);
    let imp = pairs(&f.ds.manifest.impostor_pairs);
    let ds_ = f.surrogate.pair_distances(&images, &imp).unwrap();
    let dv = f.victim.pair_distances(&images, &imp).unwrap();
    let (ts, tv) = (f.surrogate.threshold().unwrap(), f.victim.threshold().unwrap());
    let disagreements = ds_
        .iter()
        .zip(&dv)
        .filter(|(a, b)| ts.accepts(**a) != tv.accepts(**b))
        .count();
    assert!(disagreements > 0);

    let gen = f
        .surrogate
        .pair_distances(&images, &pairs(&f.ds.manifest.genuine_pairs))
        .unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&gen) < mean(&ds_));
    let recalibrated = advrestore::facerec::calibrate_threshold(&ds_, FAR).unwrap();
    assert_eq!(recalibrated, ts);
}

#[test]
fn adversarial_fine_tuning_lowers_transfer_success() {
    let f = fixture();
    assert_ne!(f.robust.params().fingerprint(), f.victim.params().fingerprint());
    let drop = accuracy(&f.victim, &f.ds) - accuracy(&f.robust, &f.ds);
    assert!(drop < 0.10, "accuracy drop {drop}");

    let cfg = AttackConfig {
        variant: Variant::Fim,
        ..Default::default()
    };
    let (mut plain, mut robust) = (0, 0);
    for p in &f.ds.manifest.attack_pairs {
        let x_t = &f.ds.records[p.target].hq;
        let adv = fim_attack(&f.ds.records[p.source].degraded, x_t, &f.surrogate, &cfg)
            .unwrap()
            .x_adv;
        for (m, count) in [(&f.victim, &mut plain), (&f.robust, &mut robust)] {
            let d = embedding_distance(&m.embed(&adv).unwrap(), &m.embed(x_t).unwrap()).unwrap();
            if m.threshold().unwrap().accepts(d) {
                *count += 1;
            }
        }
    }
    assert!(robust < plain, "robust {robust} vs plain {plain} successes");
}

#[test]
fn restoration_attack_gradient_signs_agree_with_finite_differences() {
    let f = fixture();
    let pair = f.ds.manifest.attack_pairs[1];
    let restoration = f.rldm.restore(&f.ds.records[pair.source].degraded, 3).unwrap();
    let target = target_embedding(&f.surrogate, &f.ds.records[pair.target].hq).unwrap();
    let cfg = AttackConfig::default();
    let obj = FinalStepObjective::from_restoration(
        &f.rldm,
        &restoration,
        cfg.rho,
        target.clone(),
        cfg.budget_gradient.into(),
    )
    .unwrap();
    let loss_at =
        |eps: &Tensor| embedding_distance(&f.surrogate.embed(&obj.image(eps).unwrap()).unwrap(), &target).unwrap();
    let eps = restoration.eps_final.clone();
    let (loss, grad) = obj.evaluate(&f.surrogate, &eps).unwrap();
    assert!((loss - loss_at(&eps)).abs() < 1e-12);
    let floor = 1e-3 * grad.max_abs();
    let (mut agree, mut counted) = (0, 0);
    for j in 0..eps.len() {
        if grad.data()[j].abs() < floor {
            continue;
        }
        let (mut p, mut m) = (eps.clone(), eps.clone());
        p.data_mut()[j] += 1e-5;
        m.data_mut()[j] -= 1e-5;
        let numeric = (loss_at(&p) - loss_at(&m)) / 2e-5;
        counted += 1;
        if sign(numeric) == sign(grad.data()[j]) {
            agree += 1;
        }
    }
    assert!(
        counted > 0 && agree as f64 >= 0.95 * counted as f64,
        "{agree}/{counted}"
    );
}

#[test]
fn restoration_attack_reduces_the_loss() {
    let f = fixture();
    let mut falls = 0;
    let pairs = &f.ds.manifest.attack_pairs[..6];
    for (k, p) in pairs.iter().enumerate() {
        let cfg = AttackConfig {
            variant: Variant::AdvrestoreFim,
            n_max: 60,
            seed: k as u64,
            ..Default::default()
        };
        let r = advrestore::attack::run_attack(
            &f.ds.records[p.source].degraded,
            &f.ds.records[p.target].hq,
            &f.rldm,
            &f.surrogate,
            &cfg,
        )
        .unwrap();
        if r.distance_trace.last() < r.distance_trace.first() {
            falls += 1;
        }
        assert!(r.budget_linf <= cfg.rho + 1e-9);
    }
    assert_eq!(falls, pairs.len());
}
