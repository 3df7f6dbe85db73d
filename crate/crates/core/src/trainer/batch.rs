//! H2R / HI2R training batch construction and the masked training loss.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{GenMode, TrainError};
use crate::model::{self, ModelParams, TokenBatch, TokenOpts};
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::video::{encode_clip, LatentSeq, VideoClip};
use rand_distr::StandardNormal;

/// A paired clip, pre-encoded to latent tokens.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub human: LatentSeq,
    pub robot: LatentSeq,
}

impl EncodedPair {
    pub fn from_clips(human: &VideoClip, robot: &VideoClip, patch: usize) -> Result<Self, TrainError> {
        if human.shape() != robot.shape() {
            return Err(TrainError::GeometryMismatch(format!(
                "human {:?} vs robot {:?}",
                human.shape(),
                robot.shape()
            )));
        }
        Ok(Self { human: encode_clip(human, patch)?, robot: encode_clip(robot, patch)? })
    }
}

/// One training instance: embedded tokens plus the epsilon target and the
/// rows that contribute to the loss.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub batch: TokenBatch,
    pub target: Array2<f64>,
    pub loss_mask: Vec<bool>,
}

/// Anchor mask for a latent layout: true on frame-0 tokens.
pub(crate) fn frame0_mask(lat: &LatentSeq) -> Vec<bool> {
    lat.layout.positions().iter().map(|p| p.frame == 0).collect()
}

/// Build per-sample training items. Draw order per item is (t, eps, dropout),
/// all from `rng`, so batches are reproducible from the stream position.
///
/// HI2R keeps frame-0 robot tokens clean (they are anchors, excluded from the
/// loss); with probability `cond_dropout` an item trains against the learned
/// null condition instead of the human latents.
pub fn make_batch(
    pairs: &[&EncodedPair],
    mode: GenMode,
    sch: &NoiseSchedule,
    cond_dropout: f64,
    params: &ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainItem>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut items = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let t = rng.gen_range(1..=sch.steps());
        let eps_tokens: Array2<f64> =
            Array2::from_shape_fn(pair.robot.tokens.dim(), |_| rng.sample(StandardNormal));
        let eps = LatentSeq { tokens: eps_tokens, layout: pair.robot.layout, noised: true };
        let dropped = cond_dropout > 0.0 && rng.gen::<f64>() < cond_dropout;

        let mut x = forward_noise(&pair.robot, t, &eps, sch)?;
        let anchor_mask = match mode {
            GenMode::H2r => vec![false; x.n_tokens()],
            GenMode::Hi2r => {
                let mask = frame0_mask(&pair.robot);
                for (i, &anchored) in mask.iter().enumerate() {
                    if anchored {
                        for j in 0..x.tokens.ncols() {
                            x.tokens[[i, j]] = pair.robot.tokens[[i, j]];
                        }
                    }
                }
                mask
            }
        };
        let batch = model::make_tokens_with(
            &pair.human,
            &x,
            t,
            &anchor_mask,
            params,
            TokenOpts { null_condition: dropped },
        )?;
        let loss_mask: Vec<bool> = anchor_mask.iter().map(|&a| !a).collect();
        items.push(TrainItem { batch, target: eps.tokens, loss_mask });
    }
    Ok(items)
}

/// Mean squared epsilon error over unmasked rows.
pub fn loss(eps_hat: &Array2<f64>, eps: &Array2<f64>, loss_mask: &[bool]) -> Result<f64, TrainError> {
    Ok(model::masked_mse(eps_hat, eps, loss_mask)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::rng;
    use crate::schedule::build_schedule;

    fn setup() -> (Vec<EncodedPair>, ModelParams, NoiseSchedule) {
        let pairs = crate::trainer::tests::toy_pairs(3);
        let cfg = ModelConfig {
            width: 16,
            layers: 1,
            heads: 2,
            d_lat: 12,
            mlp_ratio: 2,
            embed_scale: 1.0,
        };
        let params = init_params(&cfg, 3).unwrap();
        let sch = build_schedule(50, 1e-4, 0.02, crate::schedule::ScheduleKind::Linear).unwrap();
        (pairs, params, sch)
    }

    #[test]
    fn h2r_has_no_anchors() {
        let (pairs, params, sch) = setup();
        let refs: Vec<&EncodedPair> = pairs.iter().collect();
        let mut r = rng::derive(1, &[1]);
        let items = make_batch(&refs, GenMode::H2r, &sch, 0.0, &params, &mut r).unwrap();
        for it in items {
            assert!(it.batch.anchor_mask.iter().all(|&a| !a));
            assert!(it.loss_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn hi2r_anchor_rows_stay_clean() {
        let (pairs, params, sch) = setup();
        let refs: Vec<&EncodedPair> = pairs.iter().collect();
        for seed in 0..20 {
            let mut r = rng::derive(seed, &[2]);
            let items = make_batch(&refs, GenMode::Hi2r, &sch, 0.0, &params, &mut r).unwrap();
            for (it, pair) in items.iter().zip(&pairs) {
                let mask = &it.batch.anchor_mask;
                assert!(mask.iter().zip(pair.robot.layout.positions()).all(
                    |(&a, p)| a == (p.frame == 0)
                ));
                for (i, &anchored) in mask.iter().enumerate() {
                    if anchored {
                        for j in 0..pair.robot.tokens.ncols() {
                            assert_eq!(it.batch.den_latents[[i, j]], pair.robot.tokens[[i, j]]);
                        }
                        assert!(!it.loss_mask[i]);
                    } else {
                        assert!(it.loss_mask[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn full_dropout_always_null() {
        let (pairs, params, sch) = setup();
        let refs: Vec<&EncodedPair> = pairs.iter().collect();
        let mut r = rng::derive(3, &[3]);
        let items = make_batch(&refs, GenMode::H2r, &sch, 1.0, &params, &mut r).unwrap();
        assert!(items.iter().all(|it| it.batch.null_condition));
        let mut r = rng::derive(3, &[3]);
        let items = make_batch(&refs, GenMode::H2r, &sch, 0.0, &params, &mut r).unwrap();
        assert!(items.iter().all(|it| !it.batch.null_condition));
    }

    #[test]
    fn loss_trivia() {
        let a = Array2::from_elem((3, 4), 0.5);
        assert_eq!(loss(&a, &a, &[true; 3]).unwrap(), 0.0);
        let b = a.mapv(|v| v + 1.0);
        let l = loss(&b, &a, &[true; 3]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_matches_loop_oracle() {
        // halving the contributing rows of a known offset pattern
        let mut r = rng::derive(9, &[4]);
        let eps_hat = Array2::from_shape_fn((6, 5), |_| r.gen::<f64>());
        let eps = Array2::from_shape_fn((6, 5), |_| r.gen::<f64>());
        let mask = [true, false, true, false, true, false];
        let got = loss(&eps_hat, &eps, &mask).unwrap();
        let mut want = 0.0;
        let mut n = 0.0;
        for i in [0, 2, 4] {
            for j in 0..5 {
                let d: f64 = eps_hat[[i, j]] - eps[[i, j]];
                want += d * d;
                n += 1.0;
            }
        }
        want /= n;
        assert!((got - want).abs() < 1e-12);
        // anchor targets never reach the loss: perturbing masked rows is a no-op
        let mut perturbed = eps.clone();
        for j in 0..5 {
            perturbed[[1, j]] += 123.0;
        }
        assert_eq!(loss(&eps_hat, &perturbed, &mask).unwrap(), got);
    }
}
