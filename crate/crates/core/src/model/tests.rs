use super::joint::{flatten_layers, uniform_weights};
use super::*;
use crate::numcore::{grad_check, relative_errors, softmax_rows, Dense, Matrix, Rng};

fn small_config(input: usize, hidden: &[usize], latent: usize) -> ModelConfig {
    ModelConfig {
        input_dim: input,
        hidden: hidden.to_vec(),
        latent_dim: latent,
        beta: 0.1,
        class_weight: 1.0,
    }
}

fn random_batch(rng: &mut Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let x = Matrix::from_fn(n, dim, |_, _| rng.uniform());
    let y = (0..n).map(|i| i % classes).collect();
    Batch::new(x, y).unwrap()
}

fn zero_heads(model: &mut JointModel) {
    let (mu, lv) = model.encoder_heads_mut();
    *mu = Dense::zeros(mu.input_dim(), mu.output_dim());
    *lv = Dense::zeros(lv.input_dim(), lv.output_dim());
}

#[test]
fn zero_heads_give_prior_posterior() {
    let mut rng = Rng::new(1);
    let mut m = JointModel::new(small_config(6, &[8], 3), 2, &mut rng).unwrap();
    zero_heads(&mut m);
    let x = Matrix::from_fn(4, 6, |r, c| (r * 6 + c) as f64 / 24.0);
    let (mu, lv) = m.encode(&x).unwrap();
    assert!(mu.as_slice().iter().chain(lv.as_slice()).all(|&v| v == 0.0));
    let batch = Batch::new(x, vec![0, 1, 0, 1]).unwrap();
    assert_eq!(m.loss(&batch, &mut rng).unwrap().kl, 0.0);
}

#[test]
fn encode_is_deterministic_and_row_independent() {
    let mut rng = Rng::new(2);
    let m = JointModel::new(small_config(5, &[7, 7], 3), 2, &mut rng).unwrap();
    let row = [0.1, 0.9, 0.3, 0.0, 1.0];
    let x = Matrix::from_rows(&[row, row]).unwrap();
    let (a_mu, a_lv) = m.encode(&x).unwrap();
    let (b_mu, b_lv) = m.encode(&x).unwrap();
    assert_eq!(a_mu, b_mu);
    assert_eq!(a_lv, b_lv);
    assert_eq!(a_mu.row(0), a_mu.row(1));
    assert!(m.encode(&Matrix::zeros(1, 4)).is_err());
}

#[test]
fn reparameterize_collapses_with_tiny_variance() {
    let mut rng = Rng::new(3);
    let m = JointModel::new(small_config(4, &[4], 3), 2, &mut rng).unwrap();
    let mu = Matrix::from_fn(5, 3, |r, c| r as f64 - c as f64 * 0.5);
    let lv = Matrix::filled(5, 3, -60.0);
    let z = m.reparameterize(&mu, &lv, &mut rng).unwrap();
    assert!(z.max_abs_diff(&mu).unwrap() < 1e-12);
}

#[test]
fn reparameterize_standard_normal_moments() {
    let mut rng = Rng::new(4);
    let m = JointModel::new(small_config(4, &[4], 1), 2, &mut rng).unwrap();
    let n = 100_000;
    let z = m
        .reparameterize(&Matrix::zeros(n, 1), &Matrix::zeros(n, 1), &mut rng)
        .unwrap();
    let mean = z.as_slice().iter().sum::<f64>() / n as f64;
    let var = z.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((var - 1.0).abs() < 0.02, "{var}");
}

#[test]
fn reparameterize_gradient_wrt_mu_is_identity() {
    let lv = Matrix::from_rows(&[[0.3, -0.4]]).unwrap();
    let eps = Matrix::from_rows(&[[0.7, -1.1]]).unwrap();
    let coeff = [1.5, -0.25];
    let err = grad_check(
        |p| {
            let mu = Matrix::row_vector(p);
            let z = reparameterize_with(&mu, &lv, &eps).unwrap();
            let l = z.as_slice().iter().zip(&coeff).map(|(a, b)| a * b).sum();
            (l, coeff.to_vec())
        },
        &[0.2, -0.9],
        1e-5,
    );
    assert!(err < 1e-8, "{err}");
}

#[test]
fn decode_zero_output_layer_is_half() {
    let mut rng = Rng::new(5);
    let mut m = JointModel::new(small_config(6, &[5], 2), 2, &mut rng).unwrap();
    let out = m.decoder_output_mut();
    *out = Dense::zeros(out.input_dim(), out.output_dim());
    let probs = m.decode(&rng.normal_matrix(3, 2)).unwrap();
    assert!(probs.as_slice().iter().all(|&p| p == 0.5));
}

#[test]
fn decode_is_open_unit_interval() {
    let mut rng = Rng::new(6);
    let m = JointModel::new(small_config(6, &[5], 2), 2, &mut rng).unwrap();
    let z = rng.normal_matrix(20, 2);
    let p = m.decode(&z).unwrap();
    assert!(p.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(p, m.decode(&z).unwrap());
}

#[test]
fn classify_zero_weights_is_uniform() {
    let mut rng = Rng::new(7);
    let mut m = JointModel::new(small_config(4, &[4], 3), 5, &mut rng).unwrap();
    *m.classifier_mut() = Dense::zeros(3, 5);
    let probs = softmax_rows(&m.classify(&rng.normal_matrix(2, 3)).unwrap());
    assert!(probs.as_slice().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn classify_hand_set_sign_rule() {
    let mut rng = Rng::new(8);
    let mut m = JointModel::new(small_config(4, &[4], 2), 2, &mut rng).unwrap();
    *m.classifier_mut() = Dense {
        weight: Matrix::from_rows(&[[-1.0, 1.0], [0.0, 0.0]]).unwrap(),
        bias: Matrix::zeros(1, 2),
    };
    let z = Matrix::from_rows(&[[0.5, 3.0], [-0.2, -7.0], [2.0, 0.0]]).unwrap();
    let logits = m.classify(&z).unwrap();
    assert_eq!(logits.argmax_rows(), vec![1, 0, 1]);
    let shifted = logits.map(|v| v + 123.0);
    assert_eq!(shifted.argmax_rows(), logits.argmax_rows());
}

#[test]
fn kl_closed_form_values() {
    assert_eq!(kl_per_dim(&[1.0], &[0.0]), 0.5);
    assert_eq!(kl_per_dim(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
}

#[test]
fn kl_closed_form_matches_monte_carlo() {
    let mut rng = Rng::new(9);
    for _ in 0..3 {
        let mu: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let lv: Vec<f64> = (0..3).map(|_| rng.normal() * 0.5).collect();
        let closed = kl_per_dim(&mu, &lv) * 3.0;
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut log_q = 0.0;
            let mut log_p = 0.0;
            for j in 0..3 {
                let e = rng.normal();
                let z = mu[j] + (0.5 * lv[j]).exp() * e;
                log_q += -0.5 * (lv[j] + e * e);
                log_p += -0.5 * z * z;
            }
            acc += log_q - log_p;
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() / closed < 0.02, "mc {mc} vs closed {closed}");
    }
}

#[test]
fn recon_vanishes_at_target() {
    let target = [1.0, 0.0, 1.0, 0.0];
    let p: f64 = 1.0 - 1e-6;
    let logit = (p / (1.0 - p)).ln();
    let logits = [logit, -logit, logit, -logit];
    assert!(recon_per_pixel(&logits, &target) < 1e-5);
}

#[test]
fn label_out_of_range_is_rejected() {
    let mut rng = Rng::new(10);
    let m = JointModel::new(small_config(3, &[3], 2), 2, &mut rng).unwrap();
    let batch = Batch::new(Matrix::zeros(1, 3), vec![2]).unwrap();
    assert!(matches!(
        m.loss(&batch, &mut rng),
        Err(crate::Error::LabelOutOfRange { label: 2, .. })
    ));
}

/// Analytic gradients of the full loss (denoising noise and reparameterization
/// noise frozen) against central differences.
fn full_gradcheck(seed: u64, input: usize, hidden: &[usize], latent: usize, batch: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let classes = 3;
    let model = JointModel::new(small_config(input, hidden, latent), classes, &mut rng).unwrap();
    let b = random_batch(&mut rng, batch, input, classes);
    let mut noise = rng.normal_matrix(batch, input);
    noise.scale(0.25);
    let eps = rng.normal_matrix(batch, latent);
    let w = uniform_weights(batch);
    let flat = model.flatten_params();
    grad_check(
        |p| {
            let mut m = model.clone();
            m.load_flat_params(p).unwrap();
            let (loss, grads) = m.loss_and_grads(&b, &w, Some(&noise), &eps, None).unwrap();
            (loss.total, flatten_layers(grads.iter()))
        },
        &flat,
        1e-5,
    )
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let configs: [(u64, usize, &[usize], usize, usize); 6] = [
        (100, 6, &[16, 16], 8, 4),
        (101, 5, &[8], 4, 3),
        (102, 7, &[12, 10], 6, 4),
        (103, 4, &[16], 2, 2),
        (104, 9, &[6, 6], 8, 4),
        (105, 3, &[5, 4], 3, 1),
    ];
    for (seed, input, hidden, latent, batch) in configs {
        let err = full_gradcheck(seed, input, hidden, latent, batch);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn plain_autoencoder_limit_has_no_kl_gradient() {
    let mut rng = Rng::new(12);
    let mut cfg = small_config(5, &[6], 3);
    cfg.beta = 0.0;
    cfg.class_weight = 0.0;
    let model = JointModel::new(cfg, 2, &mut rng).unwrap();
    let b = random_batch(&mut rng, 3, 5, 2);
    let eps = rng.normal_matrix(3, 3);
    let w = uniform_weights(3);
    let flat = model.flatten_params();
    // The analytic gradient must be that of the reconstruction term alone.
    let errors = relative_errors(
        |p| {
            let mut m = model.clone();
            m.load_flat_params(p).unwrap();
            let (loss, grads) = m.loss_and_grads(&b, &w, None, &eps, None).unwrap();
            (loss.recon, flatten_layers(grads.iter()))
        },
        &flat,
        1e-5,
    );
    assert!(errors.iter().all(|&e| e < 1e-4));
    let (loss, grads) = model.loss_and_grads(&b, &w, None, &eps, None).unwrap();
    assert_eq!(loss.total, loss.recon);
    let classifier = grads.last().unwrap();
    assert!(classifier.weight.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn deterministic_limit_ignores_rng() {
    let mut rng = Rng::new(13);
    let mut m = JointModel::new(small_config(4, &[5], 3), 3, &mut rng).unwrap();
    let (_, lv) = m.encoder_heads_mut();
    lv.weight = Matrix::zeros(lv.input_dim(), lv.output_dim());
    lv.bias = Matrix::filled(1, lv.output_dim(), -60.0);
    let x = Matrix::from_fn(6, 4, |r, c| ((r + 2 * c) % 5) as f64 / 4.0);
    let (mu, lv) = m.encode(&x).unwrap();
    let a = m
        .classify(&m.reparameterize(&mu, &lv, &mut Rng::new(1)).unwrap())
        .unwrap();
    let b = m
        .classify(&m.reparameterize(&mu, &lv, &mut Rng::new(2)).unwrap())
        .unwrap();
    assert_eq!(a.argmax_rows(), b.argmax_rows());
    assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
}

#[test]
fn zero_noise_step_matches_loss() {
    let mut rng = Rng::new(14);
    let model = JointModel::new(small_config(5, &[6], 3), 2, &mut rng).unwrap();
    let b = random_batch(&mut rng, 4, 5, 2);
    let expected = model.loss(&b, &mut Rng::new(77)).unwrap();
    let mut trainer = Trainer::new(model, Default::default());
    let got = trainer.train_step(&b, 0.0, &mut Rng::new(77)).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let mut rng = Rng::new(15);
        let model = JointModel::new(small_config(5, &[6], 3), 2, &mut rng).unwrap();
        let b = random_batch(&mut rng, 8, 5, 2);
        let mut t = Trainer::new(model, Default::default());
        for _ in 0..10 {
            t.train_step(&b, 0.25, &mut rng).unwrap();
        }
        t.model.flatten_params()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn loss_decreases_on_two_blobs() {
    let mut rng = Rng::new(16);
    let dim = 8;
    let n = 64;
    let x = Matrix::from_fn(n, dim, |r, c| {
        let center = if (r % 2 == 0) == (c < dim / 2) { 0.8 } else { 0.2 };
        (center + 0.05 * rng.normal()).clamp(0.0, 1.0)
    });
    let y = (0..n).map(|r| r % 2).collect();
    let b = Batch::new(x, y).unwrap();
    let model = JointModel::new(small_config(dim, &[16, 16], 4), 2, &mut rng).unwrap();
    let mut t = Trainer::new(model, Default::default());
    let losses: Vec<f64> = (0..200)
        .map(|_| t.train_step(&b, 0.25, &mut rng).unwrap().total)
        .collect();
    let early: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let late: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(late < 0.8 * early, "early {early}, late {late}");
    // Smoothed curve trends down window over window.
    let windows: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn expand_classifier_preserves_old_logits() {
    let mut rng = Rng::new(17);
    let mut m = JointModel::new(small_config(4, &[4], 6), 2, &mut rng).unwrap();
    let z = rng.normal_matrix(10, 6);
    let before = m.classify(&z).unwrap();
    let w_before = m.classifier().weight.clone();
    m.expand_classifier(4, &mut rng).unwrap();
    let after = m.classify(&z).unwrap();
    assert_eq!(after.cols(), 4);
    assert_eq!(m.num_classes(), 4);
    for r in 0..10 {
        for c in 0..2 {
            assert_eq!(after.get(r, c).to_bits(), before.get(r, c).to_bits());
        }
        for c in 0..2 {
            assert_eq!(m.classifier().weight.get(r % 6, c), w_before.get(r % 6, c));
        }
    }
    assert_eq!(&m.classifier().bias.as_slice()[2..], &[0.0, 0.0]);
    // Restricting to old classes (new logits at -inf) keeps the argmax.
    let restricted = Matrix::from_fn(10, 2, |r, c| after.get(r, c));
    assert_eq!(restricted.argmax_rows(), before.argmax_rows());
    assert!(m.expand_classifier(3, &mut rng).is_err());
}

#[test]
fn expanded_rows_follow_he_scale() {
    let mut rng = Rng::new(18);
    let latent = 60;
    let mut m = JointModel::new(small_config(4, &[4], latent), 1, &mut rng).unwrap();
    m.expand_classifier(1001, &mut rng).unwrap();
    let w = &m.classifier().weight;
    let vals: Vec<f64> = (0..latent)
        .flat_map(|r| (1..1001).map(move |c| (r, c)))
        .map(|(r, c)| w.get(r, c))
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let expected = (2.0 / latent as f64).sqrt();
    assert!((std - expected).abs() / expected < 0.05, "{std} vs {expected}");
}

#[test]
fn trainer_expansion_keeps_optimizer_aligned() {
    let mut rng = Rng::new(19);
    let model = JointModel::new(small_config(4, &[4], 3), 2, &mut rng).unwrap();
    let mut t = Trainer::new(model, Default::default());
    let b = random_batch(&mut rng, 4, 4, 2);
    t.train_step(&b, 0.0, &mut rng).unwrap();
    t.expand_classifier(5, &mut rng).unwrap();
    let b = random_batch(&mut rng, 5, 4, 5);
    t.train_step(&b, 0.0, &mut rng).unwrap();
}

mod intro {
    use super::*;

    #[test]
    fn prior_matching_fakes_pay_full_margin() {
        let mut rng = Rng::new(20);
        let mut m = JointModel::new(small_config(4, &[4], 2), 2, &mut rng).unwrap();
        zero_heads(&mut m);
        let cfg = IntroConfig::enabled(1.5).unwrap();
        let fakes = Matrix::from_fn(3, 4, |r, c| ((r + c) % 2) as f64);
        let l = m.intro_losses(&fakes, &cfg).unwrap();
        assert_eq!(l.kl_fake, 0.0);
        assert!((l.encoder_extra + 0.1 * 1.5).abs() < 1e-15);
        assert_eq!(l.decoder_extra, 0.0);
    }

    #[test]
    fn hinge_saturates_above_margin() {
        let l = IntroLosses::from_kl(2.0, 0.1, 1.0);
        assert_eq!(l.encoder_extra, 0.0);
        assert!((l.decoder_extra + 0.2).abs() < 1e-15);
    }

    #[test]
    fn disabled_config_is_an_error() {
        let mut rng = Rng::new(21);
        let m = JointModel::new(small_config(4, &[4], 2), 2, &mut rng).unwrap();
        assert!(m.intro_losses(&Matrix::zeros(1, 4), &IntroConfig::default()).is_err());
    }

    struct Toy {
        model: JointModel,
        batch: Batch,
        noise: Matrix,
        eps: Matrix,
        cfg: IntroConfig,
    }

    fn toy() -> Toy {
        let mut rng = Rng::new(22);
        let model = JointModel::new(small_config(3, &[4], 2), 2, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, 3, 2);
        let mut noise = rng.normal_matrix(3, 3);
        noise.scale(0.25);
        let eps = rng.normal_matrix(3, 2);
        Toy {
            model,
            batch,
            noise,
            eps,
            cfg: IntroConfig::enabled(5.0).unwrap(),
        }
    }

    impl Toy {
        fn weights(&self) -> Vec<f64> {
            uniform_weights(self.batch.len())
        }

        fn fakes(&self, m: &JointModel) -> Matrix {
            let noisy = self.batch.x.zip_map(&self.noise, |a, b| a + b).unwrap();
            let (mu, lv) = m.encode(&noisy).unwrap();
            let z = reparameterize_with(&mu, &lv, &self.eps).unwrap();
            m.decode(&z).unwrap()
        }

        fn base(&self, m: &JointModel) -> f64 {
            m.loss_with_noise(&self.batch, &self.weights(), Some(&self.noise), &self.eps)
                .unwrap()
                .total
        }
    }

    #[test]
    fn intro_gradients_match_split_objectives() {
        let t = toy();
        let w = t.weights();
        let (_, grads) = t
            .model
            .loss_and_grads(&t.batch, &w, Some(&t.noise), &t.eps, Some(&t.cfg))
            .unwrap();
        let analytic = flatten_layers(grads.iter());
        let frozen_fakes = t.fakes(&t.model);
        let beta = t.model.beta();
        let flat = t.model.flatten_params();

        // Parameter index ranges per group.
        let layer_sizes: Vec<usize> = t.model.layers().iter().map(|l| l.weight.len() + l.bias.len()).collect();
        let enc_end: usize = layer_sizes[..t.model.encoder_layer_count()].iter().sum();
        let dec_end: usize = enc_end
            + layer_sizes[t.model.encoder_layer_count()..t.model.encoder_layer_count() + t.model.decoder_layer_count()]
                .iter()
                .sum::<usize>();

        let objective = |p: &[f64], i: usize| -> f64 {
            let mut m = t.model.clone();
            m.load_flat_params(p).unwrap();
            let base = t.base(&m);
            if i < enc_end {
                let kl = m.posterior_kl(&frozen_fakes, &w).unwrap();
                base + beta * (t.cfg.margin - kl).max(0.0)
            } else if i < dec_end {
                let kl = m.posterior_kl(&t.fakes(&m), &w).unwrap();
                base + beta * kl
            } else {
                base
            }
        };
        let h = 1e-5;
        let mut point = flat.clone();
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            point[i] = flat[i] + h;
            let plus = objective(&point, i);
            point[i] = flat[i] - h;
            let minus = objective(&point, i);
            point[i] = flat[i];
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn encoder_ascends_and_decoder_descends_fake_kl() {
        let t = toy();
        let w = t.weights();
        let (_, with) = t
            .model
            .loss_and_grads(&t.batch, &w, Some(&t.noise), &t.eps, Some(&t.cfg))
            .unwrap();
        let (_, without) = t
            .model
            .loss_and_grads(&t.batch, &w, Some(&t.noise), &t.eps, None)
            .unwrap();
        let g: Vec<f64> = flatten_layers(with.iter())
            .iter()
            .zip(flatten_layers(without.iter()))
            .map(|(a, b)| a - b)
            .collect();
        let sizes: Vec<usize> = t.model.layers().iter().map(|l| l.weight.len() + l.bias.len()).collect();
        let enc_end: usize = sizes[..t.model.encoder_layer_count()].iter().sum();
        let dec_end: usize = enc_end
            + sizes[t.model.encoder_layer_count()..t.model.encoder_layer_count() + t.model.decoder_layer_count()]
                .iter()
                .sum::<usize>();
        let flat = t.model.flatten_params();
        let fakes = t.fakes(&t.model);
        let kl0 = t.model.posterior_kl(&fakes, &w).unwrap();
        assert!(kl0 < t.cfg.margin);
        let lr = 1e-3;

        let mut enc_step = flat.clone();
        for i in 0..enc_end {
            enc_step[i] -= lr * g[i];
        }
        let mut m = t.model.clone();
        m.load_flat_params(&enc_step).unwrap();
        assert!(m.posterior_kl(&fakes, &w).unwrap() > kl0);

        let mut dec_step = flat.clone();
        for i in enc_end..dec_end {
            dec_step[i] -= lr * g[i];
        }
        let mut m = t.model.clone();
        m.load_flat_params(&dec_step).unwrap();
        assert!(m.posterior_kl(&t.fakes(&m), &w).unwrap() < kl0);
    }
}
