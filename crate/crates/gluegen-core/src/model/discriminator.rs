//! Adversarial discriminator: one residual mixer module over the consumer
//! extents, mean-pooled over the token axis, scored by a two-layer MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParameterStore, Tape, ValueId};

use super::config::GlueNetConfig;
use super::gluenet::square_dims;
use super::mixer::{block_param_count, init_block, init_linear, mixer_block};

/// Discriminator D over `token_out x dim_out` sequences. It scores how
/// plausibly a sequence lives in the consumer space; training drives real
/// consumer embeddings toward positive logits and translated ones toward
/// negative.
#[derive(Clone, Debug)]
pub struct Discriminator<E: Element> {
    pub config: GlueNetConfig,
    pub params: ParameterStore<E>,
}

/// Build a seeded discriminator for the consumer-side extents of `cfg`.
/// Two builds from the same seed are bit-identical.
pub fn build_discriminator<E: Element>(
    cfg: &GlueNetConfig,
    seed: u64,
) -> Result<Discriminator<E>> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    init_block(&mut rng, &mut store, "rm", square_dims(cfg), true, true)?;
    init_linear(&mut rng, &mut store, "mlp", 1, cfg.dim_out, cfg.dim_out)?;
    init_linear(&mut rng, &mut store, "mlp", 2, cfg.dim_out, 1)?;
    Ok(Discriminator { config: cfg.clone(), params: store })
}

/// Score one sequence, producing a single `[1 x 1]` logit.
pub fn forward_discriminator<E: Element>(
    tape: &mut Tape<E>,
    disc: &Discriminator<E>,
    x: ValueId,
) -> Result<ValueId> {
    let cfg = &disc.config;
    let shape = tape.value(x).shape();
    if shape.dims() != [cfg.token_out, cfg.dim_out] {
        return Err(Error::ShapeMismatch {
            op: "discriminator",
            detail: format!(
                "input {} does not match configured {}x{}",
                shape, cfg.token_out, cfg.dim_out
            ),
        });
    }
    let h = mixer_block(tape, &disc.params, "rm", x, true, true)?;
    let pooled = tape.mean_axis(h, 0)?;
    let w1 = tape.param(&disc.params, "mlp.w1")?;
    let b1 = tape.param(&disc.params, "mlp.b1")?;
    let z = tape.matmul(pooled, w1)?;
    let z = tape.add_bias(z, b1)?;
    let z = tape.gelu(z)?;
    let w2 = tape.param(&disc.params, "mlp.w2")?;
    let b2 = tape.param(&disc.params, "mlp.b2")?;
    let logit = tape.matmul(z, w2)?;
    tape.add_bias(logit, b2)
}

/// Closed-form count of the discriminator's parameters.
pub fn discriminator_param_count(cfg: &GlueNetConfig) -> u64 {
    let c = cfg.dim_out as u64;
    block_param_count(square_dims(cfg), true, true) + (c * c + c) + (c + 1)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::model::mixer::test_support::{oracle_block, zero_weights};
    use crate::tensor::{Array, Shape};

    fn rand_input(seed: u64, l: usize, c: usize) -> Array<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..l * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array::matrix(l, c, &data).unwrap()
    }

    #[test]
    fn zero_weights_give_exactly_zero_logit() {
        let cfg = GlueNetConfig::new(5, 5, 7, 7, 1);
        let mut disc: Discriminator<f64> = build_discriminator(&cfg, 3).unwrap();
        zero_weights(&mut disc.params, &["rm", "mlp"]);
        let mut tape = Tape::new();
        let x = tape.constant(rand_input(4, 5, 7));
        let logit = forward_discriminator(&mut tape, &disc, x).unwrap();
        assert_eq!(tape.value(logit).shape().dims(), &[1, 1]);
        assert_eq!(tape.value(logit).as_slice()[0], 0.0);
    }

    #[test]
    fn zero_input_matches_straight_line_oracle() {
        let cfg = GlueNetConfig::new(3, 3, 4, 4, 1);
        let disc: Discriminator<f64> = build_discriminator(&cfg, 11).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Array::zeros(Shape::matrix(3, 4).unwrap()));
        let logit = forward_discriminator(&mut tape, &disc, x).unwrap();

        // Oracle: block on zero rows, mean-pool, two-layer MLP by hand.
        let zero_rows = vec![vec![0.0; 4]; 3];
        let block = oracle_block(&disc.params, "rm", &zero_rows, true, true);
        let pooled: Vec<f64> = (0..4)
            .map(|j| block.iter().map(|row| row[j]).sum::<f64>() / 3.0)
            .collect();
        let get = |name: &str| disc.params.get(name).unwrap().value().clone();
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let (w1, b1) = (get("mlp.w1"), get("mlp.b1"));
        let hidden: Vec<f64> = (0..4)
            .map(|j| {
                let pre = b1.as_slice()[j]
                    + (0..4).map(|k| pooled[k] * w1.at2(k, j)).sum::<f64>();
                gelu(pre)
            })
            .collect();
        let (w2, b2) = (get("mlp.w2"), get("mlp.b2"));
        let want =
            b2.as_slice()[0] + (0..4).map(|k| hidden[k] * w2.at2(k, 0)).sum::<f64>();

        let got = tape.value(logit).as_slice()[0];
        assert!((got - want).abs() < 1e-9, "logit {got} vs oracle {want}");
    }

    #[test]
    fn random_input_scores_to_finite_scalar() {
        let cfg = GlueNetConfig::new(6, 6, 9, 9, 1);
        let disc: Discriminator<f32> = build_discriminator(&cfg, 19).unwrap();
        let mut tape = Tape::new_inference();
        let x = tape.constant(rand_input(20, 6, 9).cast());
        let logit = forward_discriminator(&mut tape, &disc, x).unwrap();
        assert_eq!(tape.value(logit).shape().dims(), &[1, 1]);
        assert!(tape.value(logit).as_slice()[0].is_finite());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = GlueNetConfig::new(4, 4, 8, 8, 1);
        let disc: Discriminator<f64> = build_discriminator(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Array::zeros(Shape::matrix(4, 7).unwrap()));
        assert!(matches!(
            forward_discriminator(&mut tape, &disc, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn param_count_matches_enumeration() {
        for (l, c) in [(3, 4), (5, 7), (8, 8)] {
            let cfg = GlueNetConfig::new(l, l, c, c, 2);
            let disc: Discriminator<f32> = build_discriminator(&cfg, 7).unwrap();
            assert_eq!(
                disc.params.num_elements() as u64,
                discriminator_param_count(&cfg),
                "extents {l}x{c}"
            );
        }
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let cfg = GlueNetConfig::new(3, 3, 5, 5, 1);
        let mut disc: Discriminator<f64> = build_discriminator(&cfg, 29).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_input(30, 3, 5));
        let logit = forward_discriminator(&mut tape, &disc, x).unwrap();
        let loss = tape.sum_all(logit).unwrap();
        tape.backward(loss, &mut [&mut disc.params]).unwrap();
        for group in ["rm.token_mlp.w1", "rm.channel_mlp.w3", "mlp.w1", "mlp.w2", "mlp.b2"] {
            assert!(
                disc.params.get(group).unwrap().grad().is_some(),
                "no gradient on {group}"
            );
        }
    }
}
