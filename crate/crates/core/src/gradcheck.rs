//! Central finite-difference oracle for tape gradients.

use crate::corpus::{LabelIndex, Vocabulary};
use crate::encoder::{EncoderConfig, Mode, TaskKind};
use crate::ensemble::{AugmentationPolicy, Placement, ScaleMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{AttentionLayout, Tape, Tensor, Var};

/// Step used by the standard suite.
pub const STEP: f64 = 1e-4;

/// Gradients with norm below this are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-6;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
///
/// The floor matters for gradients that vanish identically, such as the key
/// bias of attention (softmax ignores a per-query constant).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`, input by input. Returns one relative error per input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(Error::InvalidArgument("gradient check needs a scalar output".into()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *num = (plus - minus) / (2.0 * h);
        }
        errors.push(relative_error(&analytic[i], &numeric));
    }
    Ok(errors)
}

fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("sized by construction")
}

/// Weighted sum `Σ w ⊙ y` with fixed random weights, reducing any output to a scalar.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::stream(seed, "probe");
    let w = (0..t.value(y).len()).map(|_| rng.normal()).collect();
    let z = t.mul_const(y, w)?;
    t.sum(z)
}

/// Worst relative error of every differentiable tape op and of a full
/// two-layer encoder forward with offsets on both placements.
pub fn standard_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::stream(seed, "gradcheck");
    let worst = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    let mut out = Vec::new();

    let (a, b) = (random(vec![3, 4], &mut rng), random(vec![4, 2], &mut rng));
    out.push((
        "matmul",
        worst(check_gradients(&[a, b], STEP, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 1)
        })?),
    ));
    let (a, b) = (random(vec![2, 3], &mut rng), random(vec![2, 3], &mut rng));
    out.push((
        "add",
        worst(check_gradients(&[a, b], STEP, |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 2)
        })?),
    ));
    let (a, b) = (random(vec![3, 2], &mut rng), random(vec![2], &mut rng));
    out.push((
        "add_row",
        worst(check_gradients(&[a, b], STEP, |t, v| {
            let y = t.add_row(v[0], v[1])?;
            probe(t, y, 3)
        })?),
    ));
    let c = random(vec![2, 3], &mut rng);
    let m: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    out.push((
        "add_const+mul_const+scale",
        worst(check_gradients(&[random(vec![2, 3], &mut rng)], STEP, |t, v| {
            let y = t.add_const(v[0], &c)?;
            let y = t.mul_const(y, m.clone())?;
            let y = t.scale(y, -1.7)?;
            probe(t, y, 4)
        })?),
    ));
    out.push((
        "gelu",
        worst(check_gradients(&[random(vec![3, 3], &mut rng)], STEP, |t, v| {
            let y = t.gelu(v[0])?;
            probe(t, y, 5)
        })?),
    ));
    for (name, shape, axis) in [
        ("softmax(last axis)", vec![3, 4], 1),
        ("softmax(first axis)", vec![3, 4], 0),
        ("softmax(middle axis)", vec![2, 3, 2], 1),
    ] {
        let x = random(shape, &mut rng);
        out.push((
            name,
            worst(check_gradients(&[x], STEP, |t, v| {
                let y = t.softmax(v[0], axis)?;
                probe(t, y, 6)
            })?),
        ));
    }
    let (x, g, b) = (
        random(vec![3, 5], &mut rng),
        random(vec![5], &mut rng),
        random(vec![5], &mut rng),
    );
    out.push((
        "layer_norm",
        worst(check_gradients(&[x, g, b], STEP, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, 7)
        })?),
    ));
    out.push((
        "gather_rows",
        worst(check_gradients(&[random(vec![5, 3], &mut rng)], STEP, |t, v| {
            let y = t.gather_rows(v[0], &[4, 1, 4, 0])?;
            probe(t, y, 8)
        })?),
    ));
    out.push((
        "select_rows",
        worst(check_gradients(&[random(vec![4, 3], &mut rng)], STEP, |t, v| {
            let y = t.select_rows(v[0], &[3, 0, 3])?;
            probe(t, y, 9)
        })?),
    ));
    let layout = AttentionLayout {
        batch: 2,
        seq: 3,
        heads: 2,
        key_mask: vec![true, true, true, true, true, false],
    };
    let drop: Vec<f64> = (0..2 * 2 * 3 * 3)
        .map(|_| if rng.bernoulli(0.2) { 0.0 } else { 1.25 })
        .collect();
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| random(vec![6, 4], &mut rng)).collect();
    out.push((
        "attention",
        worst(check_gradients(&qkv, STEP, |t, v| {
            let y = t.attention(v[0], v[1], v[2], &layout, None)?;
            probe(t, y, 10)
        })?),
    ));
    out.push((
        "attention(dropout)",
        worst(check_gradients(&qkv, STEP, |t, v| {
            let y = t.attention(v[0], v[1], v[2], &layout, Some(drop.clone()))?;
            probe(t, y, 11)
        })?),
    ));
    out.push((
        "cross_entropy_smoothed",
        worst(check_gradients(&[random(vec![4, 3], &mut rng)], STEP, |t, v| {
            t.cross_entropy_smoothed(v[0], &[0, 2, 1, 2], 0.1)
        })?),
    ));
    out.push(("encoder+offsets", encoder_check(seed)?));
    Ok(out)
}

/// Two-layer encoder (`D = 8`, `T = 3` content tokens plus tag) with offsets
/// at both placements, dropout masks fixed by a reseeded generator, padded batch.
pub fn encoder_check(seed: u64) -> Result<f64> {
    let toks: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::build([toks.as_slice()], 1, 2);
    let labels = LabelIndex::from_names(vec!["x".into(), "y".into(), "z".into()]);
    let cfg = EncoderConfig {
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        ff_dim: 12,
        max_seq_len: 8,
        ..Default::default()
    };
    let policy = AugmentationPolicy {
        placement: Placement::EmbPlusHidden,
        scale_mode: ScaleMode::Fixed(0.7),
        ..Default::default()
    };
    let model = Model::<f64>::new(cfg, TaskKind::TokenLabeling, vocab, labels, Some((2, policy)), seed)?;
    let mut rng = Rng::new(seed);
    let inputs = vec![
        model.training_input(&[2, 3, 4], 1, &mut rng)?,
        model.training_input(&[5, 2], 2, &mut rng)?,
    ];
    let batch = model.batch(&inputs)?;
    let targets = [0, 2, 1, 1, 0];
    let params: Vec<Tensor<f64>> = model.store().iter().map(|p| p.tensor.clone()).collect();
    let errs = check_gradients(&params, STEP, |t, v| {
        let mut drop = Rng::new(seed ^ 7);
        let z = model.forward(t, v, &batch, &mut Mode::Train(&mut drop))?;
        t.cross_entropy_smoothed(z, &targets, 0.1)
    })?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_composition_matches() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let errs = check_gradients(&[x], 1e-4, |t, v| {
            let g = t.gelu(v[0])?;
            let y = t.mul_const(g, vec![1.0, 2.0, 3.0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(errs[0] < 1e-8, "{errs:?}");
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!(relative_error(&[1e-17], &[3e-13]) < 1e-6);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn suite_passes() {
        for (name, err) in standard_suite(3).unwrap() {
            assert!(err <= 1e-4, "{name}: {err:e}");
        }
    }
}
