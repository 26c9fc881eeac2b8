use super::{insert_linear, ModelSpec, IN_CHANNELS};
use crate::error::Result;
use crate::params::{Bindings, ParameterRegistry};
use crate::rng::SeededRng;
use crate::tensor::Var;

const NORM_EPS: f64 = 1e-5;

pub(super) fn init(s: &ModelSpec, r: &mut ParameterRegistry, rng: &mut SeededRng) -> Result<()> {
    let mut prev = IN_CHANNELS;
    for (i, &c) in s.stage_widths.iter().enumerate() {
        let fan_in = 9 * prev;
        // He-uniform for the ReLU stack
        r.insert_uniform(format!("stage{}.conv.weight", i + 1), &[c, prev, 3, 3], (6.0 / fan_in as f64).sqrt(), rng)?;
        r.insert_const(format!("stage{}.conv.bias", i + 1), &[c], 0.0)?;
        prev = c;
    }
    insert_linear(r, "head", prev, s.num_classes, rng)
}

pub(super) fn forward<'t>(s: &ModelSpec, b: &Bindings<'t>, images: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let mut x = images;
    let mut taps = Vec::with_capacity(4);
    for i in 1..=s.stage_widths.len() {
        x = x
            .conv2d(
                b.get(&format!("stage{i}.conv.weight"))?,
                b.get(&format!("stage{i}.conv.bias"))?,
                2,
                1,
            )?;
        let shape = x.shape();
        x = x
            .reshape(&[shape[0], shape[1..].iter().product()])?
            .standardize(NORM_EPS)?
            .reshape(&shape)?
            .relu()?;
        taps.push(x);
    }
    let pooled = x.mean(&[2, 3])?;
    let logits = pooled.matmul(b.get("head.weight")?)?.add(b.get("head.bias")?)?;
    Ok((logits, taps))
}
