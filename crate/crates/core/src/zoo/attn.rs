use super::{init_token_common, insert_linear, insert_norm, layer_norm, linear, token_backbone, ModelSpec};
use crate::error::Result;
use crate::params::{Bindings, ParameterRegistry};
use crate::rng::SeededRng;
use crate::tensor::{Tensor, Var};

pub(super) fn init(s: &ModelSpec, r: &mut ParameterRegistry, rng: &mut SeededRng) -> Result<()> {
    init_token_common(s, r, rng)?;
    let pos = Tensor::randn([s.tokens(), s.stage_widths[0]], rng).map(|v| 0.02 * v);
    r.insert("pos", pos, true)?;
    for (i, &d) in s.stage_widths.iter().enumerate() {
        let p = format!("stage{}", i + 1);
        insert_norm(r, &format!("{p}.norm1"), d)?;
        for m in ["q", "k", "v", "o"] {
            insert_linear(r, &format!("{p}.attn.{m}"), d, d, rng)?;
        }
        insert_norm(r, &format!("{p}.norm2"), d)?;
        insert_linear(r, &format!("{p}.mlp.fc1"), d, s.mlp_ratio * d, rng)?;
        insert_linear(r, &format!("{p}.mlp.fc2"), s.mlp_ratio * d, d, rng)?;
    }
    Ok(())
}

fn block<'t>(x: Var<'t>, b: &Bindings<'t>, p: &str, d: usize) -> Result<Var<'t>> {
    let h = layer_norm(x, b, &format!("{p}.norm1"))?;
    let q = linear(h, b, &format!("{p}.attn.q"))?;
    let k = linear(h, b, &format!("{p}.attn.k"))?;
    let v = linear(h, b, &format!("{p}.attn.v"))?;
    let att = q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?.softmax()?;
    let x = x.add(linear(att.matmul(v)?, b, &format!("{p}.attn.o"))?)?;
    let h = layer_norm(x, b, &format!("{p}.norm2"))?;
    let h = linear(linear(h, b, &format!("{p}.mlp.fc1"))?.gelu()?, b, &format!("{p}.mlp.fc2"))?;
    x.add(h)
}

pub(super) fn forward<'t>(s: &ModelSpec, b: &Bindings<'t>, images: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    token_backbone(s, b, images, |x, stage| {
        block(x, b, &format!("stage{stage}"), s.stage_widths[stage - 1])
    })
}
