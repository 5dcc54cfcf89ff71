use advtta_tensor::{Adam, Param, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A small UNet-shaped graph touching every differentiable op used by the models.
fn loss(tape: &Tape, x: &Tensor, w1: &Tensor, w2: &Tensor, target: &Tensor) -> f64 {
    let (x, w1, w2) = (tape.var(x.clone()), tape.var(w1.clone()), tape.var(w2.clone()));
    graph(tape, x, w1, w2, target).item()
}

fn graph<'t>(tape: &'t Tape, x: Var<'t>, w1: Var<'t>, w2: Var<'t>, target: &Tensor) -> Var<'t> {
    let c = w1.shape()[0];
    let gamma = tape.constant(Tensor::full(&[c], 1.3));
    let beta = tape.constant(Tensor::full(&[c], 0.1));
    let (h, _) = x.conv2d(w1, None, 1, 1).batch_norm_train(gamma, beta, 1e-5);
    let skip = h.tanh();
    let down = skip.maxpool2().leaky_relu(0.2).upsample2();
    let logits = skip.concat_channels(down).conv2d(w2, None, 1, 1);
    let p = logits.softmax_channels();
    p.ln_eps(1e-12).mul_const(target).sum().mul_scalar(-1.0 / target.len() as f64)
}

#[test]
fn composite_graph_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[2, 1, 6, 6], 1.0, &mut rng);
    let w1 = Tensor::randn(&[3, 1, 3, 3], 0.5, &mut rng);
    let w2 = Tensor::randn(&[2, 6, 3, 3], 0.3, &mut rng);
    let mut target = Tensor::zeros(&[2, 2, 6, 6]);
    for i in 0..72 {
        let k = usize::from(x.data()[i] > 0.0);
        let (n, p) = (i / 36, i % 36);
        target.data_mut()[n * 72 + k * 36 + p] = 1.0;
    }
    let tape = Tape::new();
    let (xv, w1v, w2v) = (tape.var(x.clone()), tape.var(w1.clone()), tape.var(w2.clone()));
    let grads = tape.backward(graph(&tape, xv, w1v, w2v, &target));
    let h = 1e-5;
    for (which, base, g) in [(0, &x, grads.wrt(xv)), (1, &w1, grads.wrt(w1v)), (2, &w2, grads.wrt(w2v))] {
        let g = g.unwrap();
        for i in 0..base.len() {
            let perturb = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += d;
                let args = match which {
                    0 => (t, w1.clone(), w2.clone()),
                    1 => (x.clone(), t, w2.clone()),
                    _ => (x.clone(), w1.clone(), t),
                };
                loss(&Tape::new(), &args.0, &args.1, &args.2, &target)
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            let err = (g.data()[i] - fd).abs() / g.data()[i].abs().max(fd.abs()).max(1e-7);
            assert!(err < 1e-4, "input {which} element {i}: analytic {} vs fd {fd}", g.data()[i]);
        }
    }
}

#[test]
fn adam_fits_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[16, 4], 1.0, &mut rng);
    let truth = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let y = {
        let tape = Tape::new();
        tape.constant(x.clone()).linear(tape.constant(truth.clone()), None).value().as_ref().clone()
    };
    let mut params = vec![Param::weight("w", Tensor::zeros(&[2, 4]))];
    let mut opt = Adam::new(0.05);
    let mut last = f64::INFINITY;
    for _ in 0..400 {
        let tape = Tape::new();
        let w = tape.param(&params[0], true);
        let err = tape.constant(x.clone()).linear(w, None).sub(tape.constant(y.clone()));
        let l = err.square().mean();
        last = l.item();
        let g = tape.backward(l);
        opt.step(params.iter_mut(), &g);
    }
    assert!(last < 1e-6, "final mse {last}");
    assert_eq!(opt.steps(), 400);
}
