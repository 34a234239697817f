use serde::{Deserialize, Serialize};

use super::mlp::{Trunk, TrunkCache};
use super::{Batch, IntroConfig, IntroLosses, LossBreakdown, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{bce_with_logit, he_normal_init, log_softmax_rows, sigmoid, softmax_rows, Dense, Matrix, Rng};

/// Encoder `q(z|x)`, decoder `p(x|z)` and a single-layer linear classifier
/// `p(y|z)` sharing one latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    config: ModelConfig,
    num_classes: usize,
    enc_trunk: Trunk,
    enc_mu: Dense,
    enc_logvar: Dense,
    dec_trunk: Trunk,
    dec_out: Dense,
    classifier: Dense,
}

/// Everything the backward pass needs from one forward evaluation.
struct Forward {
    enc: TrunkCache,
    mu: Matrix,
    logvar: Matrix,
    eps: Matrix,
    dec: TrunkCache,
    dec_logits: Matrix,
    class_logits: Matrix,
    loss: LossBreakdown,
}

/// Per-sample KL divergence to the unit Gaussian, divided by the latent width.
pub fn kl_per_dim(mu: &[f64], logvar: &[f64]) -> f64 {
    let sum: f64 = mu.iter().zip(logvar).map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv).sum();
    0.5 * sum / mu.len() as f64
}

/// Mean Bernoulli negative log-likelihood per pixel of `target` under `sigmoid(logits)`.
pub fn recon_per_pixel(logits: &[f64], target: &[f64]) -> f64 {
    let sum: f64 = logits.iter().zip(target).map(|(&l, &t)| bce_with_logit(l, t)).sum();
    sum / logits.len() as f64
}

pub(crate) fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

impl JointModel {
    pub fn new(config: ModelConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::invalid("a model needs at least one class"));
        }
        let enc_trunk = Trunk::new(config.input_dim, &config.hidden, rng);
        let h = enc_trunk.output_dim(config.input_dim);
        let enc_mu = Dense::he_normal(h, config.latent_dim, rng);
        let enc_logvar = Dense::he_normal(h, config.latent_dim, rng);
        let dec_trunk = Trunk::new(config.latent_dim, &config.hidden, rng);
        let hd = dec_trunk.output_dim(config.latent_dim);
        let dec_out = Dense::he_normal(hd, config.input_dim, rng);
        let classifier = Dense::he_normal(config.latent_dim, num_classes, rng);
        Ok(Self {
            config,
            num_classes,
            enc_trunk,
            enc_mu,
            enc_logvar,
            dec_trunk,
            dec_out,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.config.beta = beta;
    }

    pub fn set_class_weight(&mut self, weight: f64) {
        self.config.class_weight = weight;
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Dense {
        &mut self.classifier
    }

    /// Final encoder heads, for tests that pin them.
    pub fn encoder_heads_mut(&mut self) -> (&mut Dense, &mut Dense) {
        (&mut self.enc_mu, &mut self.enc_logvar)
    }

    pub fn decoder_output_mut(&mut self) -> &mut Dense {
        &mut self.dec_out
    }

    /// Layer names in the fixed parameter order used by optimizers and checkpoints.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.enc_trunk.layers.len() {
            names.push(format!("encoder.{i}"));
        }
        names.push("encoder.mu".into());
        names.push("encoder.logvar".into());
        for i in 0..self.dec_trunk.layers.len() {
            names.push(format!("decoder.{i}"));
        }
        names.push("decoder.out".into());
        names.push("classifier".into());
        names
    }

    pub fn layers(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = self.enc_trunk.layers.iter().collect();
        out.push(&self.enc_mu);
        out.push(&self.enc_logvar);
        out.extend(self.dec_trunk.layers.iter());
        out.push(&self.dec_out);
        out.push(&self.classifier);
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.enc_trunk.layers.iter_mut().collect();
        out.push(&mut self.enc_mu);
        out.push(&mut self.enc_logvar);
        out.extend(self.dec_trunk.layers.iter_mut());
        out.push(&mut self.dec_out);
        out.push(&mut self.classifier);
        out
    }

    /// Number of encoder layers at the front of [`Self::layers`].
    pub fn encoder_layer_count(&self) -> usize {
        self.enc_trunk.layers.len() + 2
    }

    /// Number of decoder layers following the encoder in [`Self::layers`].
    pub fn decoder_layer_count(&self) -> usize {
        self.dec_trunk.layers.len() + 1
    }

    /// All parameters flattened in layer order (weight then bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        flatten_layers(self.layers().into_iter())
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for layer in self.layers_mut() {
            for m in [&mut layer.weight, &mut layer.bias] {
                let n = m.len();
                let src = flat
                    .get(offset..offset + n)
                    .ok_or_else(|| Error::invalid("flat parameter vector too short"))?;
                m.as_mut_slice().copy_from_slice(src);
                offset += n;
            }
        }
        if offset != flat.len() {
            return Err(Error::invalid("flat parameter vector too long"));
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: x.shape(),
                right: (x.rows(), self.config.input_dim),
            });
        }
        Ok(())
    }

    fn check_latent(&self, z: &Matrix, op: &'static str) -> Result<()> {
        if z.cols() != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                op,
                left: z.shape(),
                right: (z.rows(), self.config.latent_dim),
            });
        }
        Ok(())
    }

    /// Diagonal Gaussian posterior parameters `(mu, logvar)`.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        let h = self.enc_trunk.forward(x)?;
        Ok((self.enc_mu.forward(&h)?, self.enc_logvar.forward(&h)?))
    }

    pub fn reparameterize(&self, mu: &Matrix, logvar: &Matrix, rng: &mut Rng) -> Result<Matrix> {
        let eps = rng.normal_matrix(mu.rows(), mu.cols());
        reparameterize_with(mu, logvar, &eps)
    }

    pub fn decode_logits(&self, z: &Matrix) -> Result<Matrix> {
        self.check_latent(z, "decode")?;
        let h = self.dec_trunk.forward(z)?;
        self.dec_out.forward(&h)
    }

    /// Bernoulli pixel probabilities.
    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        Ok(sigmoid(&self.decode_logits(z)?))
    }

    pub fn classify(&self, z: &Matrix) -> Result<Matrix> {
        self.check_latent(z, "classify")?;
        self.classifier.forward(z)
    }

    /// Grows the classifier to `new_num_classes` outputs. Existing columns are
    /// untouched; new ones are He-initialized with fan-in equal to the latent width.
    pub fn expand_classifier(&mut self, new_num_classes: usize, rng: &mut Rng) -> Result<()> {
        if new_num_classes < self.num_classes {
            return Err(Error::invalid(format!(
                "cannot shrink classifier from {} to {new_num_classes} classes",
                self.num_classes
            )));
        }
        let extra = new_num_classes - self.num_classes;
        if extra == 0 {
            return Ok(());
        }
        let latent = self.config.latent_dim;
        let new_w = he_normal_init(latent, extra, latent, rng);
        self.classifier.weight = self.classifier.weight.hstack(&new_w)?;
        self.classifier.bias = self.classifier.bias.hstack(&Matrix::zeros(1, extra))?;
        self.num_classes = new_num_classes;
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&label) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Loss on a batch with uniform sample weights and one posterior sample
    /// per datum; no input noise.
    pub fn loss(&self, batch: &Batch, rng: &mut Rng) -> Result<LossBreakdown> {
        let eps = rng.normal_matrix(batch.x.rows(), self.config.latent_dim);
        let weights = uniform_weights(batch.len());
        Ok(self.forward(batch, &weights, None, eps)?.loss)
    }

    /// Loss with explicit sample weights and frozen noise.
    pub fn loss_with_noise(
        &self,
        batch: &Batch,
        weights: &[f64],
        input_noise: Option<&Matrix>,
        eps: &Matrix,
    ) -> Result<LossBreakdown> {
        Ok(self.forward(batch, weights, input_noise, eps.clone())?.loss)
    }

    fn forward(&self, batch: &Batch, weights: &[f64], input_noise: Option<&Matrix>, eps: Matrix) -> Result<Forward> {
        let x = &batch.x;
        self.check_input(x)?;
        self.check_labels(&batch.y)?;
        if batch.y.len() != x.rows() || weights.len() != x.rows() {
            return Err(Error::invalid(format!(
                "batch has {} rows, {} labels and {} weights",
                x.rows(),
                batch.y.len(),
                weights.len()
            )));
        }
        if eps.shape() != (x.rows(), self.config.latent_dim) {
            return Err(Error::ShapeMismatch {
                op: "reparameterize",
                left: eps.shape(),
                right: (x.rows(), self.config.latent_dim),
            });
        }

        let enc_input = match input_noise {
            Some(noise) => x.zip_map(noise, |a, b| a + b)?,
            None => x.clone(),
        };
        let enc = self.enc_trunk.forward_cached(enc_input)?;
        let mu = self.enc_mu.forward(enc.output())?;
        let logvar = self.enc_logvar.forward(enc.output())?;
        let z = reparameterize_with(&mu, &logvar, &eps)?;
        let dec = self.dec_trunk.forward_cached(z.clone())?;
        let dec_logits = self.dec_out.forward(dec.output())?;
        let class_logits = self.classifier.forward(&z)?;

        let log_probs = log_softmax_rows(&class_logits);
        let (mut recon, mut kl, mut class_loss) = (0.0, 0.0, 0.0);
        for (n, &w) in weights.iter().enumerate() {
            recon += w * recon_per_pixel(dec_logits.row(n), x.row(n));
            kl += w * kl_per_dim(mu.row(n), logvar.row(n));
            class_loss -= w * log_probs.get(n, batch.y[n]);
        }
        let total = recon + self.config.class_weight * class_loss + self.config.beta * kl;
        let loss = LossBreakdown {
            recon,
            kl,
            class_loss,
            total,
            intro: None,
        };
        Ok(Forward {
            enc,
            mu,
            logvar,
            eps,
            dec,
            dec_logits,
            class_logits,
            loss,
        })
    }

    /// Loss and gradients for every layer, in [`Self::layers`] order.
    ///
    /// `input_noise` perturbs only the encoder input; reconstruction targets the
    /// clean `batch.x`. `eps` is the frozen reparameterization noise.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        weights: &[f64],
        input_noise: Option<&Matrix>,
        eps: &Matrix,
        intro: Option<&IntroConfig>,
    ) -> Result<(LossBreakdown, Vec<Dense>)> {
        let mut fwd = self.forward(batch, weights, input_noise, eps.clone())?;
        let cfg = &self.config;
        let (d, l) = (cfg.input_dim as f64, cfg.latent_dim as f64);

        // Decoder logits: w (σ(L) − x) / D.
        let mut g_dec_logits = fwd.dec_logits.clone();
        for n in 0..g_dec_logits.rows() {
            let w = weights[n] / d;
            let x = batch.x.row(n);
            for (g, &t) in g_dec_logits.row_mut(n).iter_mut().zip(x) {
                *g = w * (crate::numcore::sigmoid_scalar(*g) - t);
            }
        }
        // Class logits: w c (softmax − onehot).
        let mut g_cls = softmax_rows(&fwd.class_logits);
        for n in 0..g_cls.rows() {
            let w = weights[n] * cfg.class_weight;
            let row = g_cls.row_mut(n);
            row[batch.y[n]] -= 1.0;
            for v in row.iter_mut() {
                *v *= w;
            }
        }

        let (g_dec_h, mut g_dec_out) = self
            .dec_out
            .backward(fwd.dec.output(), &g_dec_logits, true)
            .map(|(gx, gl)| (gx.unwrap(), gl))?;
        let (g_z_dec, mut g_dec_trunk) = self.dec_trunk.backward(&fwd.dec, g_dec_h, true)?;
        let (g_z_cls, g_classifier) = self
            .classifier
            .backward(&fwd.dec.activations[0], &g_cls, true)
            .map(|(gx, gl)| (gx.unwrap(), gl))?;
        let mut g_z = g_z_dec.unwrap();
        g_z.add_assign(&g_z_cls)?;

        // Through z = mu + exp(logvar / 2) eps, plus the KL term.
        let mut g_mu = g_z.clone();
        let mut g_lv = Matrix::zeros(g_z.rows(), g_z.cols());
        for n in 0..g_z.rows() {
            let kw = cfg.beta * weights[n] / l;
            for j in 0..g_z.cols() {
                let mu = fwd.mu.get(n, j);
                let lv = fwd.logvar.get(n, j);
                let gz = g_z.get(n, j);
                g_mu.set(n, j, gz + kw * mu);
                g_lv.set(
                    n,
                    j,
                    gz * fwd.eps.get(n, j) * 0.5 * (0.5 * lv).exp() + kw * 0.5 * (lv.exp() - 1.0),
                );
            }
        }
        let (mut g_enc_trunk, mut g_enc_mu, mut g_enc_lv) = self.encoder_backward(&fwd.enc, &g_mu, &g_lv, false)?.1;

        if let Some(intro) = intro {
            let extra = self.intro_backward(&mut fwd, weights, intro)?;
            for (acc, g) in g_enc_trunk.iter_mut().zip(&extra.enc_trunk) {
                add_dense(acc, g)?;
            }
            add_dense(&mut g_enc_mu, &extra.enc_mu)?;
            add_dense(&mut g_enc_lv, &extra.enc_logvar)?;
            for (acc, g) in g_dec_trunk.iter_mut().zip(&extra.dec_trunk) {
                add_dense(acc, g)?;
            }
            add_dense(&mut g_dec_out, &extra.dec_out)?;
        }

        let mut grads = g_enc_trunk;
        grads.push(g_enc_mu);
        grads.push(g_enc_lv);
        grads.extend(g_dec_trunk);
        grads.push(g_dec_out);
        grads.push(g_classifier);
        Ok((fwd.loss, grads))
    }

    /// Backward through both encoder heads and the trunk.
    #[allow(clippy::type_complexity)]
    fn encoder_backward(
        &self,
        cache: &TrunkCache,
        g_mu: &Matrix,
        g_lv: &Matrix,
        need_input_grad: bool,
    ) -> Result<(Option<Matrix>, (Vec<Dense>, Dense, Dense))> {
        let h = cache.output();
        let (gh_mu, g_head_mu) = self.enc_mu.backward(h, g_mu, true)?;
        let (gh_lv, g_head_lv) = self.enc_logvar.backward(h, g_lv, true)?;
        let mut gh = gh_mu.unwrap();
        gh.add_assign(&gh_lv.unwrap())?;
        let (g_x, g_trunk) = self.enc_trunk.backward(cache, gh, need_input_grad)?;
        Ok((g_x, (g_trunk, g_head_mu, g_head_lv)))
    }

    /// Weighted per-dimension KL of the posterior of `x` (no sampling).
    pub fn posterior_kl(&self, x: &Matrix, weights: &[f64]) -> Result<f64> {
        let (mu, lv) = self.encode(x)?;
        Ok(weights
            .iter()
            .enumerate()
            .map(|(n, w)| w * kl_per_dim(mu.row(n), lv.row(n)))
            .sum())
    }

    /// Introspection terms on generated images `generated_x`, reported in the
    /// maximization sign convention of the variational bound:
    /// `encoder_extra = −β·max(0, m − KL_fake)`, `decoder_extra = −β·KL_fake`.
    pub fn intro_losses(&self, generated_x: &Matrix, cfg: &IntroConfig) -> Result<IntroLosses> {
        if !cfg.enabled {
            return Err(Error::invalid("introspection losses requested but disabled"));
        }
        let w = uniform_weights(generated_x.rows());
        let kl_fake = self.posterior_kl(generated_x, &w)?;
        Ok(IntroLosses::from_kl(kl_fake, self.config.beta, cfg.margin))
    }

    /// Introspection gradients for the reconstructions produced in `fwd`.
    ///
    /// The encoder minimizes `β·max(0, m − KL(q(z|x̂)))` with `x̂` held fixed;
    /// the decoder minimizes `β·KL(q(z|x̂))` through `x̂ = σ(decoder(z))` with
    /// the encoder held fixed.
    fn intro_backward(&self, fwd: &mut Forward, weights: &[f64], intro: &IntroConfig) -> Result<IntroGrads> {
        if !intro.enabled {
            return Err(Error::invalid("introspection losses requested but disabled"));
        }
        let cfg = &self.config;
        let l = cfg.latent_dim as f64;
        let fakes = sigmoid(&fwd.dec_logits);
        let enc_f = self.enc_trunk.forward_cached(fakes.clone())?;
        let mu_f = self.enc_mu.forward(enc_f.output())?;
        let lv_f = self.enc_logvar.forward(enc_f.output())?;
        let kl_fake: f64 = weights
            .iter()
            .enumerate()
            .map(|(n, w)| w * kl_per_dim(mu_f.row(n), lv_f.row(n)))
            .sum();
        fwd.loss.intro = Some(IntroLosses::from_kl(kl_fake, cfg.beta, intro.margin));

        // dKL/dmu and dKL/dlogvar, weighted.
        let mut dk_mu = mu_f.clone();
        let mut dk_lv = lv_f.clone();
        for n in 0..mu_f.rows() {
            let w = weights[n] / l;
            for v in dk_mu.row_mut(n) {
                *v *= w;
            }
            for v in dk_lv.row_mut(n) {
                *v = w * 0.5 * (v.exp() - 1.0);
            }
        }

        // Encoder hinge: active while KL_fake < m.
        let (enc_trunk, enc_mu, enc_logvar) = if intro.margin - kl_fake > 0.0 {
            let mut g_mu = dk_mu.clone();
            let mut g_lv = dk_lv.clone();
            g_mu.scale(-cfg.beta);
            g_lv.scale(-cfg.beta);
            self.encoder_backward(&enc_f, &g_mu, &g_lv, false)?.1
        } else {
            (
                self.enc_trunk
                    .layers
                    .iter()
                    .map(|d| Dense::zeros(d.input_dim(), d.output_dim()))
                    .collect(),
                Dense::zeros(self.enc_mu.input_dim(), self.enc_mu.output_dim()),
                Dense::zeros(self.enc_logvar.input_dim(), self.enc_logvar.output_dim()),
            )
        };

        // Decoder term: gradient reaches the decoder only through the fakes.
        dk_mu.scale(cfg.beta);
        dk_lv.scale(cfg.beta);
        let g_fakes = self
            .encoder_backward(&enc_f, &dk_mu, &dk_lv, true)?
            .0
            .expect("input gradient requested");
        let g_logits = g_fakes.zip_map(&fakes, |g, s| g * s * (1.0 - s))?;
        let (g_h, dec_out) = self
            .dec_out
            .backward(fwd.dec.output(), &g_logits, true)
            .map(|(gx, gl)| (gx.unwrap(), gl))?;
        let (_, dec_trunk) = self.dec_trunk.backward(&fwd.dec, g_h, false)?;

        Ok(IntroGrads {
            enc_trunk,
            enc_mu,
            enc_logvar,
            dec_trunk,
            dec_out,
        })
    }
}

struct IntroGrads {
    enc_trunk: Vec<Dense>,
    enc_mu: Dense,
    enc_logvar: Dense,
    dec_trunk: Vec<Dense>,
    dec_out: Dense,
}

fn add_dense(acc: &mut Dense, g: &Dense) -> Result<()> {
    acc.weight.add_assign(&g.weight)?;
    acc.bias.add_assign(&g.bias)
}

pub(crate) fn flatten_layers<'a>(layers: impl Iterator<Item = &'a Dense>) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend_from_slice(layer.weight.as_slice());
        out.extend_from_slice(layer.bias.as_slice());
    }
    out
}

pub fn reparameterize_with(mu: &Matrix, logvar: &Matrix, eps: &Matrix) -> Result<Matrix> {
    let std_eps = logvar.zip_map(eps, |lv, e| (0.5 * lv).exp() * e)?;
    mu.zip_map(&std_eps, |m, s| m + s)
}
