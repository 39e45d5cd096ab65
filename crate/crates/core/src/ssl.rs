//! Contrastive and cosine-regression objectives, view augmentation and the
//! per-task self-supervised training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Mode, Model, Sgd};
use crate::scalar::Scalar;
use crate::seed::derive_rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// NT-Xent over `2N` projections. Row `i` of `za` and row `i` of `zb` are
/// positives; every other row in the concatenated batch is a negative.
pub fn info_nce<S: Scalar>(tape: &mut Tape<S>, za: Var, zb: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(contract_err!("temperature must be positive, got {temperature}"));
    }
    let (sa, sb) = (tape.shape(za).to_vec(), tape.shape(zb).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(shape_err!("info_nce needs two N×d projections, got {sa:?} and {sb:?}"));
    }
    let n = sa[0];
    let z = tape.concat(&[za, zb])?;
    let z = tape.l2_normalize_rows(z)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, S::lit(1.0 / temperature))?;
    let mut mask = vec![S::zero(); 4 * n * n];
    (0..2 * n).for_each(|i| mask[i * 2 * n + i] = S::neg_infinity());
    let mask = tape.constant(&[2 * n, 2 * n], mask)?;
    let logits = tape.add(logits, mask)?;
    let targets: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    tape.cross_entropy(logits, &targets)
}

/// `(1/N) Σ ‖â − b̂‖²` over L2-normalised rows.
pub fn mse_loss<S: Scalar>(tape: &mut Tape<S>, za: Var, zb: Var) -> Result<Var> {
    let sa = tape.shape(za).to_vec();
    if sa.len() != 2 || sa != tape.shape(zb) {
        return Err(shape_err!("mse_loss needs two N×d projections, got {sa:?} and {:?}", tape.shape(zb)));
    }
    let a = tape.l2_normalize_rows(za)?;
    let b = tape.l2_normalize_rows(zb)?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, S::one() / S::from_usize_lossy(sa[0]))
}

/// Self-supervised objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslMethod {
    #[default]
    InfoNce,
    Mse,
}

/// Stochastic view transformations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Smallest crop area as a fraction of the image.
    pub min_crop_scale: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { min_crop_scale: 0.5, flip_prob: 0.5, brightness: 0.2, contrast: 0.2, noise_std: 0.02 }
    }
}

fn bilinear(plane: &[f32], w: usize, h: usize, y: f64, x: f64) -> f32 {
    let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64).clamp(0.0, 1.0) as f32, (y - y0 as f64).clamp(0.0, 1.0) as f32);
    let p = |yy: usize, xx: usize| plane[yy * w + xx];
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// One augmented copy of a `c×h×w` image appended to `out`.
pub fn augment_image<R: Rng>(img: &[f32], [c, h, w]: [usize; 3], cfg: &AugmentConfig, rng: &mut R, out: &mut Vec<f32>) {
    let area = rng.gen_range(cfg.min_crop_scale.min(1.0)..=1.0);
    let ratio = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
    let cw = ((area * ratio).sqrt() * w as f64).clamp(1.0, w as f64);
    let ch = ((area / ratio).sqrt() * h as f64).clamp(1.0, h as f64);
    let ox = rng.gen_range(0.0..=(w as f64 - cw));
    let oy = rng.gen_range(0.0..=(h as f64 - ch));
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid std");
    let start = out.len();
    for chan in 0..c {
        let plane = &img[chan * h * w..(chan + 1) * h * w];
        let contrast = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast) as f32;
        let bright = rng.gen_range(-cfg.brightness..=cfg.brightness) as f32;
        let from = out.len();
        for y in 0..h {
            let sy = oy + (y as f64 + 0.5) * ch / h as f64 - 0.5;
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = ox + (xx as f64 + 0.5) * cw / w as f64 - 0.5;
                out.push(bilinear(plane, w, h, sy, sx));
            }
        }
        let seg = &mut out[from..];
        let mean = seg.iter().sum::<f32>() / seg.len() as f32;
        seg.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean + bright);
    }
    if cfg.noise_std > 0.0 {
        out[start..].iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
    }
    out[start..].iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Two independently augmented views of the samples at `indices`.
pub fn augment_pair<S: Scalar, R: Rng>(
    data: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let shape = data.image_shape();
    let mut views = [Vec::new(), Vec::new()];
    for &i in indices {
        for v in views.iter_mut() {
            augment_image(data.image(i), shape, cfg, rng, v);
        }
    }
    let dims = [indices.len(), shape[0], shape[1], shape[2]];
    let [a, b] = views;
    let cast = |v: Vec<f32>| v.into_iter().map(|x| S::lit(x as f64)).collect();
    Ok((Tensor::from_vec(&dims, cast(a))?, Tensor::from_vec(&dims, cast(b))?))
}

/// Hyper-parameters of one self-supervised training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    #[serde(default)]
    pub method: SslMethod,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub seed: u64,
}

fn default_temperature() -> f64 {
    0.5
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            method: SslMethod::InfoNce,
            temperature: 0.5,
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

/// Loss trace of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub samples_seen: usize,
    /// True when nothing in the encoder was trainable and training was skipped.
    pub skipped: bool,
}

/// Trains `model` in place on the images of `data`. Parameters follow their
/// `requires_grad` flags; the projector always trains.
pub fn ssl_train_task<S: Scalar>(model: &mut Model<S>, data: &Dataset, cfg: &SslConfig) -> Result<TrainReport> {
    if data.image_shape() != model.input_shape() {
        return Err(shape_err!("data images {:?} do not fit model input {:?}", data.image_shape(), model.input_shape()));
    }
    if model.trainable_encoder_params() == 0 {
        return Ok(TrainReport { skipped: true, ..TrainReport::default() });
    }
    if data.len() < 2 || cfg.batch_size < 2 {
        return Err(contract_err!("training needs at least 2 samples per batch"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut tape = Tape::new();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut derive_rng(cfg.seed, &[epoch as u64, u64::MAX]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut rng = derive_rng(cfg.seed, &[epoch as u64, b as u64]);
            let (va, vb) = augment_pair::<S, _>(data, idx, &cfg.augment, &mut rng)?;
            tape.clear();
            let xa = tape.leaf(&va);
            let xb = tape.leaf(&vb);
            let fa = model.forward(&mut tape, xa, Mode::Train, false)?;
            let fb = model.forward(&mut tape, xb, Mode::Train, false)?;
            let loss = match cfg.method {
                SslMethod::InfoNce => info_nce(&mut tape, fa.projection, fb.projection, cfg.temperature)?,
                SslMethod::Mse => mse_loss(&mut tape, fa.projection, fb.projection)?,
            };
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} at epoch {epoch}, batch {b}")));
            }
            let grads = tape.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&grads, &fa.bindings)?;
            model.accumulate_grads(&grads, &fb.bindings)?;
            opt.step(model);
            model.apply_bn_updates(&fa.bn_updates);
            model.apply_bn_updates(&fb.bn_updates);
            total += value;
            batches += 1;
            report.steps += 1;
            report.samples_seen += idx.len();
        }
        report.epoch_losses.push(total / batches.max(1) as f64);
    }
    model.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::nn::{BackboneSpec, FreezeStrategy};

    fn nce_value(za: &[f64], zb: &[f64], n: usize, d: usize, tau: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[n, d], za.to_vec()).unwrap();
        let b = tape.constant(&[n, d], zb.to_vec()).unwrap();
        let l = info_nce(&mut tape, a, b, tau).unwrap();
        tape.value(l)[0]
    }

    /// Direct evaluation of the contrastive loss from its definition.
    fn nce_oracle(za: &[f64], zb: &[f64], n: usize, d: usize, tau: f64) -> f64 {
        let rows: Vec<Vec<f64>> = za.chunks(d).chain(zb.chunks(d)).map(|r| r.to_vec()).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..2 * n {
            let pos = (i + n) % (2 * n);
            let num = (cos(&rows[i], &rows[pos]) / tau).exp();
            let den: f64 = (0..2 * n).filter(|&k| k != i).map(|k| (cos(&rows[i], &rows[k]) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / (2 * n) as f64
    }

    #[test]
    fn info_nce_matches_definition() {
        let za = Tensor::<f64>::randn(&[5, 4], 1, 1.0).unwrap();
        let zb = Tensor::<f64>::randn(&[5, 4], 2, 1.0).unwrap();
        for tau in [0.1, 0.5, 1.0] {
            let got = nce_value(za.data(), zb.data(), 5, 4, tau);
            let want = nce_oracle(za.data(), zb.data(), 5, 4, tau);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn info_nce_orthogonal_pairs_give_ln3() {
        // Two pairs of identical unit vectors, the pairs orthogonal to each other.
        let za = [1.0, 0.0, 0.0, 1.0];
        let v = nce_value(&za, &za, 2, 2, 1.0);
        let e = std::f64::consts::E;
        let want = -(e / (e + 2.0)).ln();
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");
        let same = [0.6, 0.8, 0.6, 0.8];
        assert!((nce_value(&same, &same, 2, 2, 1.0) - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn info_nce_perfect_alignment_vanishes_at_low_temperature() {
        let za = [1.0, 0.0, 0.0, 1.0];
        assert!(nce_value(&za, &za, 2, 2, 0.05) < 0.01);
    }

    #[test]
    fn info_nce_is_permutation_and_scale_invariant() {
        let za = Tensor::<f64>::randn(&[4, 3], 3, 1.0).unwrap();
        let zb = Tensor::<f64>::randn(&[4, 3], 4, 1.0).unwrap();
        let base = nce_value(za.data(), zb.data(), 4, 3, 0.5);
        let perm = [2, 0, 3, 1];
        let pa: Vec<f64> = perm.iter().flat_map(|&i| za.data()[i * 3..i * 3 + 3].to_vec()).collect();
        let pb: Vec<f64> = perm.iter().flat_map(|&i| zb.data()[i * 3..i * 3 + 3].to_vec()).collect();
        assert!((nce_value(&pa, &pb, 4, 3, 0.5) - base).abs() < 1e-9);
        let sa: Vec<f64> = za.data().iter().map(|v| v * 7.5).collect();
        assert!((nce_value(&sa, zb.data(), 4, 3, 0.5) - base).abs() < 1e-9);
    }

    #[test]
    fn info_nce_rejects_bad_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[2, 2], vec![1.0; 4]).unwrap();
        let b = tape.constant(&[3, 2], vec![1.0; 6]).unwrap();
        assert!(matches!(info_nce(&mut tape, a, b, 0.5), Err(Error::Shape(_))));
        assert!(matches!(info_nce(&mut tape, a, a, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn mse_loss_matches_cosine_form() {
        let za = Tensor::<f64>::randn(&[3, 4], 5, 1.0).unwrap();
        let zb = Tensor::<f64>::randn(&[3, 4], 6, 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[3, 4], za.data().to_vec()).unwrap();
        let b = tape.constant(&[3, 4], zb.data().to_vec()).unwrap();
        let l = mse_loss(&mut tape, a, b).unwrap();
        let want: f64 = za
            .data()
            .chunks(4)
            .zip(zb.data().chunks(4))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny: f64 = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                2.0 - 2.0 * dot / (nx * ny)
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(l)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn augmentation_is_seeded_and_bounded() {
        let s = gen_synthetic(&SyntheticSpec { num_classes: 2, train_per_class: 2, eval_per_class: 1, image_size: 16, seed: 1, noise: 0.05 })
            .unwrap();
        let cfg = AugmentConfig::default();
        let (a1, b1) = augment_pair::<f32, _>(&s.train, &[0, 1], &cfg, &mut derive_rng(3, &[])).unwrap();
        let (a2, _) = augment_pair::<f32, _>(&s.train, &[0, 1], &cfg, &mut derive_rng(3, &[])).unwrap();
        assert!(a1.bitwise_eq(&a2));
        assert!(!a1.bitwise_eq(&b1));
        assert!(a1.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn training_reduces_loss_and_fixed_models_are_skipped() {
        let spec = BackboneSpec { input_size: 16, ..BackboneSpec::toy() };
        let data = gen_synthetic(&SyntheticSpec { num_classes: 4, train_per_class: 8, eval_per_class: 1, image_size: 16, seed: 2, noise: 0.05 })
            .unwrap()
            .train;
        let cfg = SslConfig { epochs: 6, batch_size: 16, lr: 0.05, seed: 4, ..SslConfig::default() };
        let mut model = Model::<f32>::build(&spec, 1).unwrap();
        model.set_strategy(FreezeStrategy::FineTuneAll);
        let r = ssl_train_task(&mut model, &data, &cfg).unwrap();
        assert_eq!(r.epoch_losses.len(), 6);
        assert_eq!(r.samples_seen, 6 * 32);
        assert!(r.epoch_losses[5] < r.epoch_losses[0], "{:?}", r.epoch_losses);

        let mut again = Model::<f32>::build(&spec, 1).unwrap();
        again.set_strategy(FreezeStrategy::FineTuneAll);
        ssl_train_task(&mut again, &data, &cfg).unwrap();
        assert_eq!(model, again);

        let mut fixed = Model::<f32>::build(&spec, 1).unwrap();
        fixed.set_strategy(FreezeStrategy::FixedAll);
        let before = fixed.clone();
        assert!(ssl_train_task(&mut fixed, &data, &cfg).unwrap().skipped);
        assert_eq!(fixed, before);
    }
}
