use zsq_core::tensor::{Conv2dCfg, Padding};

use super::*;

/// Finite-difference reports for every differentiable engine op on the
/// random instance numbered `t`.
pub fn op_gradchecks(t: u64) -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    {
        let mut r = rng(100 + t);
        let a = rand_away_from_zero(&[2, 3], 0.05, &mut r);
        let b = rand_away_from_zero(&[2, 3], 0.3, &mut r);
        let s = t;
        out.push((
            "add",
            gradcheck(&[a.clone(), b.clone()], |tp, v| {
                probe(tp, v[0].add(v[1]).unwrap(), s)
            }),
        ));
        out.push((
            "sub",
            gradcheck(&[a.clone(), b.clone()], |tp, v| {
                probe(tp, v[0].sub(v[1]).unwrap(), s)
            }),
        ));
        out.push((
            "mul",
            gradcheck(&[a.clone(), b.clone()], |tp, v| {
                probe(tp, v[0].mul(v[1]).unwrap(), s)
            }),
        ));
        out.push((
            "div",
            gradcheck(&[a.clone(), b.clone()], |tp, v| {
                probe(tp, v[0].div(v[1]).unwrap(), s)
            }),
        ));
        out.push((
            "scale",
            gradcheck(std::slice::from_ref(&a), |tp, v| {
                probe(tp, v[0].scale(-1.7).add_scalar(0.3), s)
            }),
        ));
        out.push((
            "neg",
            gradcheck(std::slice::from_ref(&a), |tp, v| probe(tp, v[0].neg(), s)),
        ));
        out.push((
            "exp",
            gradcheck(std::slice::from_ref(&a), |tp, v| probe(tp, v[0].exp(), s)),
        ));
        let pos = a.map(|x| x.abs() + 0.2);
        out.push((
            "ln",
            gradcheck(std::slice::from_ref(&pos), |tp, v| probe(tp, v[0].ln(), s)),
        ));
        out.push(("sqrt", gradcheck(&[pos], |tp, v| probe(tp, v[0].sqrt(), s))));
        out.push((
            "cos",
            gradcheck(std::slice::from_ref(&a), |tp, v| probe(tp, v[0].cos(), s)),
        ));
        let inside = a.map(|x| 0.9 * x);
        out.push((
            "acos",
            gradcheck(&[inside], |tp, v| probe(tp, v[0].acos(), s)),
        ));
        out.push((
            "tanh",
            gradcheck(std::slice::from_ref(&a), |tp, v| probe(tp, v[0].tanh(), s)),
        ));
        out.push((
            "sigmoid",
            gradcheck(std::slice::from_ref(&a), |tp, v| {
                probe(tp, v[0].sigmoid(), s)
            }),
        ));
        out.push((
            "relu",
            gradcheck(std::slice::from_ref(&a), |tp, v| probe(tp, v[0].relu(), s)),
        ));
        out.push((
            "leaky_relu",
            gradcheck(std::slice::from_ref(&a), |tp, v| {
                probe(tp, v[0].leaky_relu(0.2), s)
            }),
        ));
        out.push((
            "clamp",
            gradcheck(std::slice::from_ref(&a), |tp, v| {
                probe(tp, v[0].clamp(-0.5, 0.5), s)
            }),
        ));
    }
    {
        let mut r = rng(200 + t);
        let a = randn(&[3, 4, 2], &mut r);
        let s = t;
        out.push((
            "sum",
            gradcheck(std::slice::from_ref(&a), |_tp, v| {
                v[0].mul(v[0]).unwrap().sum()
            }),
        ));
        out.push((
            "mean",
            gradcheck(std::slice::from_ref(&a), |_tp, v| v[0].tanh().mean()),
        ));
        for axis in 0..3 {
            out.push((
                "sum_axis",
                gradcheck(std::slice::from_ref(&a), |tp, v| {
                    probe(tp, v[0].sum_axis(axis).unwrap(), s)
                }),
            ));
            out.push((
                "softmax",
                gradcheck(std::slice::from_ref(&a), |tp, v| {
                    probe(tp, v[0].softmax(axis).unwrap(), s)
                }),
            ));
            out.push((
                "log_softmax",
                gradcheck(std::slice::from_ref(&a), |tp, v| {
                    probe(tp, v[0].log_softmax(axis).unwrap(), s)
                }),
            ));
            out.push((
                "logsumexp",
                gradcheck(std::slice::from_ref(&a), |tp, v| {
                    probe(tp, v[0].logsumexp(axis).unwrap(), s)
                }),
            ));
        }
        let b = randn(&[4], &mut r);
        out.push((
            "repeat_last",
            gradcheck(&[b], |tp, v| probe(tp, v[0].repeat_last(3), s)),
        ));
        out.push((
            "reshape",
            gradcheck(std::slice::from_ref(&a), |tp, v| {
                probe(tp, v[0].reshape(&[6, 4]).unwrap(), s)
            }),
        ));
    }
    {
        let mut r = rng(300 + t);
        let s = t;
        let (a, b) = (randn(&[3, 4], &mut r), randn(&[4, 2], &mut r));
        out.push((
            "matmul",
            gradcheck(&[a.clone(), b], |tp, v| {
                probe(tp, v[0].matmul(v[1]).unwrap(), s)
            }),
        ));
        let (w, bias) = (randn(&[5, 4], &mut r), randn(&[5], &mut r));
        out.push((
            "linear",
            gradcheck(&[a.clone(), w, bias], |tp, v| {
                probe(tp, v[0].linear(v[1], Some(v[2])).unwrap(), s)
            }),
        ));
        let c = randn(&[3, 2], &mut r);
        out.push((
            "concat_cols",
            gradcheck(&[a.clone(), c], |tp, v| {
                probe(tp, v[0].concat_cols(v[1]).unwrap(), s)
            }),
        ));
        let rows = [2usize, 0, 2, 1];
        out.push((
            "gather_rows",
            gradcheck(&[a], |tp, v| probe(tp, v[0].gather_rows(&rows).unwrap(), s)),
        ));
    }
    {
        let mut r = rng(400 + t);
        let s = t;
        let x = randn(&[2, 4, 5, 5], &mut r);
        let (cfg, wshape) = match t % 4 {
            0 => (Conv2dCfg::new(1, 1), [3, 4, 3, 3]),
            1 => (Conv2dCfg::new(2, 1), [2, 4, 3, 3]),
            2 => (
                Conv2dCfg {
                    stride: 1,
                    padding: Padding::same(2),
                    dilation: 2,
                    groups: 4,
                },
                [4, 1, 3, 3],
            ),
            _ => (
                Conv2dCfg {
                    stride: 1,
                    padding: Padding { begin: 1, end: 2 },
                    dilation: 1,
                    groups: 2,
                },
                [4, 2, 4, 4],
            ),
        };
        let w = randn(&wshape, &mut r);
        let b = randn(&[wshape[0]], &mut r);
        out.push((
            "conv2d",
            gradcheck(&[x, w, b], |tp, v| {
                probe(tp, v[0].conv2d(v[1], Some(v[2]), cfg).unwrap(), s)
            }),
        ));
    }
    {
        let mut r = rng(500 + t);
        let s = t;
        let x = randn(&[3, 2, 3, 3], &mut r);
        let (g, b) = (randn(&[2], &mut r), randn(&[2], &mut r));
        out.push((
            "batch_norm(train)",
            gradcheck(&[x.clone(), g.clone(), b.clone()], |tp, v| {
                let m = v[0].channel_mean().unwrap();
                let var = v[0].channel_var(m).unwrap();
                let y = v[0].bn_apply(m, var, v[1], v[2], 1e-5).unwrap();
                probe(tp, y, s)
                    .add(probe(tp, m, s + 1).add(probe(tp, var, s + 2)).unwrap())
                    .unwrap()
            }),
        ));
        let (rm, rv) = (
            randn(&[2], &mut r),
            randn(&[2], &mut r).map(|v| v.abs() + 0.5),
        );
        out.push((
            "batch_norm(eval)",
            gradcheck(&[x.clone(), rm, rv, g, b], |tp, v| {
                probe(tp, v[0].bn_apply(v[1], v[2], v[3], v[4], 1e-5).unwrap(), s)
            }),
        ));
        out.push((
            "upsample",
            gradcheck(std::slice::from_ref(&x), |tp, v| {
                probe(tp, v[0].upsample_nearest(2).unwrap(), s)
            }),
        ));
        out.push((
            "global_avg_pool",
            gradcheck(std::slice::from_ref(&x), |tp, v| {
                probe(tp, v[0].global_avg_pool().unwrap(), s)
            }),
        ));
    }
    out
}
