use super::{init_token_common, insert_linear, insert_norm, layer_norm, linear, token_backbone, ModelSpec};
use crate::error::Result;
use crate::params::{Bindings, ParameterRegistry};
use crate::rng::SeededRng;
use crate::tensor::Var;

pub(super) fn init(s: &ModelSpec, r: &mut ParameterRegistry, rng: &mut SeededRng) -> Result<()> {
    init_token_common(s, r, rng)?;
    let t = s.tokens();
    for (i, &d) in s.stage_widths.iter().enumerate() {
        let p = format!("stage{}", i + 1);
        insert_norm(r, &format!("{p}.norm1"), d)?;
        insert_linear(r, &format!("{p}.token.fc1"), t, s.mlp_ratio * t, rng)?;
        insert_linear(r, &format!("{p}.token.fc2"), s.mlp_ratio * t, t, rng)?;
        insert_norm(r, &format!("{p}.norm2"), d)?;
        insert_linear(r, &format!("{p}.channel.fc1"), d, s.mlp_ratio * d, rng)?;
        insert_linear(r, &format!("{p}.channel.fc2"), s.mlp_ratio * d, d, rng)?;
    }
    Ok(())
}

fn block<'t>(x: Var<'t>, b: &Bindings<'t>, p: &str) -> Result<Var<'t>> {
    let h = layer_norm(x, b, &format!("{p}.norm1"))?.transpose()?;
    let h = linear(linear(h, b, &format!("{p}.token.fc1"))?.gelu()?, b, &format!("{p}.token.fc2"))?;
    let x = x.add(h.transpose()?)?;
    let h = layer_norm(x, b, &format!("{p}.norm2"))?;
    let h = linear(linear(h, b, &format!("{p}.channel.fc1"))?.gelu()?, b, &format!("{p}.channel.fc2"))?;
    x.add(h)
}

pub(super) fn forward<'t>(s: &ModelSpec, b: &Bindings<'t>, images: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    token_backbone(s, b, images, |x, stage| block(x, b, &format!("stage{stage}")))
}
