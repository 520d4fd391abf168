use omlc_core::codec::{crop_loss_and_grad, evaluate_rd, train_base, BaseModel, CodecDims, TrainConfig};
use omlc_core::data::texture_corpus;
use omlc_core::nn::Parameterized;
use omlc_core::{Error, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> CodecDims {
    CodecDims {
        hidden_channels: 8,
        latent_channels: 4,
        modulator_hidden: 4,
    }
}

fn cfg(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        crop_size: 32,
        learning_rate: lr,
        seed,
        holdout_fraction: 0.25,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_colour_is_learned() {
    let data: Vec<ImageTensor> = (0..8)
        .map(|i| ImageTensor::filled(32 + 16 * (i % 2), 32, [0.2, 0.55, 0.8]).unwrap())
        .collect();
    for lambda in [1.0, 4.0, 100.0] {
        let (_, report) = train_base(&data, lambda, tiny(), &cfg(300, 3e-3, 1)).unwrap();
        assert!(
            report.final_holdout.mse < 1e-3,
            "lambda {lambda}: held-out MSE {}",
            report.final_holdout.mse
        );
        assert!(report.final_holdout.loss < report.initial_holdout.loss);
    }
}

#[test]
fn seeded_training_is_deterministic() {
    let data = texture_corpus(6, 48, 48, 2);
    let (a, ra) = train_base(&data, 0.01, tiny(), &cfg(20, 1e-3, 9)).unwrap();
    let (b, rb) = train_base(&data, 0.01, tiny(), &cfg(20, 1e-3, 9)).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(a, b);
    let (_, rc) = train_base(&data, 0.01, tiny(), &cfg(20, 1e-3, 10)).unwrap();
    assert_ne!(ra.losses, rc.losses);
}

/// Two full desk-scale runs; tiny or briefly trained models are dominated by
/// optimisation noise and do not order reliably.
#[test]
fn larger_tradeoff_buys_quality_with_rate() {
    let data = texture_corpus(64, 96, 96, 11);
    let c = TrainConfig {
        steps: 2000,
        learning_rate: 1e-3,
        holdout_fraction: 0.25,
        ..TrainConfig::default()
    };
    let (_, low) = train_base(&data, 0.0018, CodecDims::default(), &c).unwrap();
    let (_, high) = train_base(&data, 0.18, CodecDims::default(), &c).unwrap();
    let (l, h) = (low.final_holdout, high.final_holdout);
    assert!(h.mse <= l.mse, "mse {} vs {}", h.mse, l.mse);
    assert!(h.bpp >= l.bpp, "bpp {} vs {}", h.bpp, l.bpp);
}

#[test]
fn training_errors() {
    assert!(matches!(
        train_base(&[], 0.01, tiny(), &cfg(1, 1e-3, 0)),
        Err(Error::EmptyDataset)
    ));
    let data = texture_corpus(2, 32, 32, 0);
    assert!(train_base(&data, 0.01, tiny(), &cfg(1, f64::NAN, 0)).is_err());
    assert!(train_base(&data, 0.0, tiny(), &cfg(1, 1e-3, 0)).is_err());
    let odd_crop = TrainConfig {
        crop_size: 40,
        ..cfg(1, 1e-3, 0)
    };
    assert!(train_base(&data, 0.01, tiny(), &odd_crop).is_err());
}

fn flat(m: &BaseModel) -> Vec<f64> {
    let mut v = m.encoder.to_flat();
    v.extend(m.decoder.to_flat());
    v.extend(m.entropy.to_flat());
    v
}

fn load(m: &mut BaseModel, v: &[f64]) {
    let (ne, nd) = (m.encoder.num_params(), m.decoder.num_params());
    m.encoder.load_flat(&v[..ne]).unwrap();
    m.decoder.load_flat(&v[ne..ne + nd]).unwrap();
    m.entropy.load_flat(&v[ne + nd..]).unwrap();
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let model = BaseModel::init(tiny(), 21);
    let crop = texture_corpus(1, 32, 32, 8).remove(0);
    let lambda_eff = 0.01 * 65025.0;
    let (_, grad) = crop_loss_and_grad(&model, &crop, lambda_eff, 4).unwrap();
    let g = flat(&grad);
    let p0 = flat(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // Steps of 1e-3 cross leaky-rectifier and clamp kinks for a few percent
    // of the parameters; 1e-4 stays on one linear piece.
    let h = 1e-4;
    let mut checked = 0;
    while checked < 5 {
        let i = rng.random_range(0..p0.len());
        if g[i].abs() < 1e-3 {
            continue;
        }
        let mut m = model.clone();
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        load(&mut m, &p);
        let up = crop_loss_and_grad(&m, &crop, lambda_eff, 4).unwrap().0;
        p[i] = p0[i] - h;
        load(&mut m, &p);
        let down = crop_loss_and_grad(&m, &crop, lambda_eff, 4).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs());
        assert!(rel < 1e-2, "parameter {i}: analytic {} vs fd {fd}", g[i]);
        checked += 1;
    }
}

#[test]
fn evaluation_is_reproducible() {
    let model = BaseModel::init(tiny(), 2);
    let data = texture_corpus(2, 40, 56, 1);
    let a = evaluate_rd(&model, &data, 0.01, 65025.0).unwrap();
    let b = evaluate_rd(&model, &data, 0.01, 65025.0).unwrap();
    assert_eq!(a, b);
    assert!(a.bpp > 0.0 && a.mse > 0.0);
    assert!(evaluate_rd(&model, &[], 0.01, 65025.0).is_err());
}
