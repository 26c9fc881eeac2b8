#![allow(dead_code)]

use uhkd::{Result, SeededRng, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// Worst mismatch between analytic and central-difference gradients.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub failures: usize,
    pub checked: usize,
}

fn close(a: f64, n: f64) -> bool {
    let d = (a - n).abs();
    d <= ABS_FLOOR || d <= REL_TOL * a.abs().max(n.abs())
}

/// Checks `sum(w * f(inputs))` for a fixed random `w`, against every input.
pub fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> GradReport
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = SeededRng::new(seed ^ 0x9e37);
    let eval = |xs: &[Tensor], w: Option<&Tensor>| -> (f64, Option<Tensor>) {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&vars).expect("forward");
        let w = w.cloned().unwrap_or_else(|| Tensor::ones(out.shape()));
        let v: f64 = out.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        (v, Some(w))
    };
    // weights matching the output shape
    let w = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let shape = f(&vars).expect("forward").shape();
        Tensor::uniform(shape, 0.5, 1.5, &mut rng)
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&vars).expect("forward");
    let loss = out.mul(tape.constant(w.clone())).unwrap().sum_all().unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut rep = GradReport::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let n = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * FD_EPS);
            let a = analytic.data()[j];
            let d = (a - n).abs();
            rep.checked += 1;
            rep.worst_abs = rep.worst_abs.max(d);
            if d > ABS_FLOOR {
                rep.worst_rel = rep.worst_rel.max(d / a.abs().max(n.abs()));
            }
            if !close(a, n) {
                rep.failures += 1;
            }
        }
    }
    rep
}

/// Random values kept at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape.to_vec(), rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

pub fn positive(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.5, 2.0, rng)
}

pub type OpFn = Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn case(name: impl Into<String>, inputs: Vec<Tensor>, f: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'static) -> Case {
    Case {
        name: name.into(),
        inputs,
        f: Box::new(f),
    }
}

/// Every differentiable tape operation, each on three or more shapes.
pub fn op_cases() -> Vec<Case> {
    use uhkd::Layout;
    let mut rng = SeededRng::new(2024);
    let r = &mut rng;
    let mut v = Vec::new();
    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];
    for s in shapes {
        v.push(case(format!("exp{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].exp()));
        v.push(case(format!("log{s:?}"), vec![positive(s, r)], |x| x[0].log()));
        v.push(case(format!("sqrt{s:?}"), vec![positive(s, r)], |x| x[0].sqrt()));
        v.push(case(format!("square{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].square()));
        v.push(case(format!("relu{s:?}"), vec![away_from_zero(s, 1e-2, r)], |x| x[0].relu()));
        v.push(case(format!("gelu{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].gelu()));
        v.push(case(format!("abs{s:?}"), vec![away_from_zero(s, 1e-2, r)], |x| x[0].abs()));
        v.push(case(format!("scale_offset_neg{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| {
            x[0].scale(-1.7)?.offset(0.3)?.neg()
        }));
        let two = || vec![Tensor::randn(s.to_vec(), &mut SeededRng::new(s.len() as u64)), Tensor::randn(s.to_vec(), &mut SeededRng::new(7 + s.len() as u64))];
        v.push(case(format!("add{s:?}"), two(), |x| x[0].add(x[1])));
        v.push(case(format!("sub{s:?}"), two(), |x| x[0].sub(x[1])));
        v.push(case(format!("mul{s:?}"), two(), |x| x[0].mul(x[1])));
        v.push(case(
            format!("div{s:?}"),
            vec![Tensor::randn(s.to_vec(), r), away_from_zero(s, 0.5, r)],
            |x| x[0].div(x[1]),
        ));
        let last = *s.last().unwrap();
        v.push(case(
            format!("broadcast_suffix{s:?}"),
            vec![Tensor::randn(s.to_vec(), r), away_from_zero(&[last], 0.5, r)],
            |x| x[0].mul(x[1])?.add(x[1])?.div(x[1]),
        ));
        v.push(case(
            format!("broadcast_scalar{s:?}"),
            vec![Tensor::randn(s.to_vec(), r), Tensor::randn([1], r)],
            |x| x[0].sub(x[1])?.mul(x[1]),
        ));
        v.push(case(format!("sum_all{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].sum_all()));
        v.push(case(format!("mean_all{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].mean_all()));
        v.push(case(format!("max0{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].max(&[0])));
        v.push(case(format!("softmax{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].softmax()));
        v.push(case(format!("log_softmax{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].log_softmax()));
    }
    for s in [vec![2usize, 8], vec![3, 5], vec![2, 3, 10]] {
        v.push(case(format!("standardize{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].standardize(1e-7)));
    }
    for s in [[2usize, 3, 4], [4, 2, 3], [2, 2, 5]] {
        v.push(case(format!("sum_axes{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].sum(&[0, 2])));
        v.push(case(format!("mean_axis1{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].mean(&[1])));
        v.push(case(format!("max_axis2{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| x[0].max(&[2])));
        v.push(case(format!("permute{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| {
            x[0].permute(&[2, 0, 1])?.square()
        }));
        v.push(case(format!("transpose_reshape{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| {
            let n: usize = x[0].shape().iter().product();
            x[0].transpose()?.reshape(&[n])?.square()
        }));
    }
    for (m, k, n) in [(2usize, 3, 4), (5, 7, 3), (1, 4, 1)] {
        v.push(case(
            format!("matmul[{m}x{k}x{n}]"),
            vec![Tensor::randn([m, k], r), Tensor::randn([k, n], r)],
            |x| x[0].matmul(x[1]),
        ));
        v.push(case(
            format!("matmul_batched[2x{m}x{k}x{n}]"),
            vec![Tensor::randn([2, m, k], r), Tensor::randn([2, k, n], r)],
            |x| x[0].matmul(x[1]),
        ));
        v.push(case(
            format!("matmul_shared[3x{m}x{k}x{n}]"),
            vec![Tensor::randn([3, m, k], r), Tensor::randn([k, n], r)],
            |x| x[0].matmul(x[1]),
        ));
    }
    for s in [[1usize, 2, 2, 2], [2, 3, 2, 4], [1, 4, 3, 3]] {
        v.push(case(format!("grid_to_seq{s:?}"), vec![Tensor::randn(s.to_vec(), r)], |x| {
            x[0].grid_to_seq()?.square()
        }));
    }
    for (x, w, stride, pad) in [
        ([1usize, 2, 5, 5], [3usize, 2, 3, 3], 1usize, 1usize),
        ([2, 3, 6, 6], [2, 3, 3, 3], 2, 1),
        ([1, 1, 4, 5], [2, 1, 2, 2], 1, 0),
    ] {
        let o = w[0];
        v.push(case(
            format!("conv2d{x:?}*{w:?}/s{stride}p{pad}"),
            vec![Tensor::randn(x.to_vec(), r), Tensor::randn(w.to_vec(), r), Tensor::randn([o], r)],
            move |v| v[0].conv2d(v[1], v[2], stride, pad),
        ));
    }
    for (s, layout, f) in [
        (vec![2usize, 8, 3], Layout::Seq, 2usize),
        (vec![1, 2, 4, 4], Layout::Grid, 2),
        (vec![2, 2, 6, 3], Layout::Grid, 3),
    ] {
        v.push(case(format!("avg_pool{s:?}/{f}"), vec![Tensor::randn(s.clone(), r)], move |x| {
            x[0].avg_pool(layout, f)
        }));
    }
    for (s, layout) in [
        (vec![2usize, 8, 3], Layout::Seq),
        (vec![1, 5, 2], Layout::Seq),
        (vec![1, 2, 4, 4], Layout::Grid),
        (vec![2, 1, 3, 6], Layout::Grid),
    ] {
        v.push(case(format!("spectral_magnitude{s:?}"), vec![Tensor::randn(s.clone(), r)], move |x| {
            x[0].spectral_magnitude(layout)
        }));
    }
    v
}

/// The adapter, frequency MSE and combined objective differentiated
/// together, with respect to the student feature, every adapter weight and
/// the student logits.
pub fn pipeline_cases() -> Vec<Case> {
    use uhkd::losses::total_loss;
    use uhkd::{fam_forward, fam_init, Bindings, FamSpec, FtmOutput, Layout, LossWeights, Source, StageFeature};

    let mut rng = SeededRng::new(77);
    let mut out = Vec::new();
    for (shape, layout, n_t, c_t) in [
        (vec![2usize, 8, 3], Layout::Seq, 4usize, 5usize),
        (vec![2, 3, 4, 4], Layout::Grid, 8, 6),
        (vec![1, 2, 4, 2], Layout::Grid, 4, 4),
    ] {
        let spec = FamSpec::for_feature(&shape, layout, n_t, c_t, true).unwrap();
        let p = fam_init(spec, &mut rng).unwrap();
        let names: Vec<String> = p.registry.iter().map(|(k, _)| k.to_string()).collect();
        let batch = shape[0];
        let target = FtmOutput {
            tensor: Tensor::randn([batch, n_t, c_t], &mut rng),
            stage: 2,
        };
        let z_t = Tensor::randn([batch, 5], &mut rng);
        let labels: Vec<usize> = (0..batch).map(|i| (3 * i + 1) % 5).collect();
        let mut inputs = vec![Tensor::randn(shape.clone(), &mut rng)];
        inputs.extend(p.registry.iter().map(|(_, q)| q.tensor.clone()));
        inputs.push(Tensor::randn([batch, 5], &mut rng));
        let k = names.len();
        out.push(case(format!("fam_freq_mse_total{shape:?}"), inputs, move |x| {
            let b: Bindings<'_> = names.iter().cloned().zip(x[1..=k].iter().copied()).collect();
            let f = StageFeature::new(x[0], layout, 2, Source::Student)?;
            let s = fam_forward(&f, &p, &b)?;
            let pairs = [(target.clone(), s)];
            Ok(total_loss(&pairs, &z_t, x[k + 1], &labels, &LossWeights::default())?.0)
        }));
    }
    out
}
