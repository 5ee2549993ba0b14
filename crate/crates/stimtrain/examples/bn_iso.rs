// scratch: isolated BN train-mode FD check (smooth loss, no ReLU)
use ndarray::{Array1, Array4};
use rand::Rng;
use stimtrain::nn::{BatchNorm2d, Mode, ParameterSet};
use stimtrain::rng::{stream, Stream};

fn main() {
    let mut rng = stream(1, Stream::Probe, 0, 0);
    let c = 3;
    let bn = BatchNorm2d::new("t.bn", c);
    let mut ps = ParameterSet::<f64>::new();
    bn.register(&mut ps);
    // non-trivial gamma/beta
    ps.get_mut("t.bn.scale").assign(&Array1::from_vec(vec![1.3, 0.7, 2.0]).into_dyn());
    ps.get_mut("t.bn.bias").assign(&Array1::from_vec(vec![0.2, -0.1, 0.5]).into_dyn());

    let x = Array4::from_shape_fn((2, 4, 5, c), |_| rng.random_range(-2.0..2.0));
    let wloss = Array4::from_shape_fn((2, 4, 5, c), |_| rng.random_range(-1.0..1.0));

    let loss = |ps: &ParameterSet<f64>, x: &Array4<f64>, mode: Mode| -> f64 {
        let mut sink = Vec::new();
        let (y, _) = bn.forward(ps, x.clone(), mode, &mut sink);
        (&y * &wloss).sum()
    };

    for mode in [Mode::Train, Mode::Eval] {
        let mut sink = Vec::new();
        ps.zero_grads();
        let (y, cache) = bn.forward(&ps, x.clone(), mode, &mut sink);
        let _ = y;
        let dx = bn.backward(&mut ps, cache, &wloss);
        // FD wrt x
        let mut xm = x.clone();
        let mut max_err: f64 = 0.0;
        for _ in 0..60 {
            let idx = (rng.random_range(0..2), rng.random_range(0..4), rng.random_range(0..5), rng.random_range(0..c));
            let orig = xm[idx];
            let h = 1e-6;
            xm[idx] = orig + h; let up = loss(&ps, &xm, mode);
            xm[idx] = orig - h; let down = loss(&ps, &xm, mode);
            xm[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = dx[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            max_err = max_err.max((fd - an).abs() / denom);
        }
        // FD wrt gamma/beta
        let mut gerr: f64 = 0.0;
        for name in ["t.bn.scale", "t.bn.bias"] {
            for i in 0..c {
                let orig = ps.get(name)[ndarray::IxDyn(&[i])];
                let h = 1e-6;
                ps.get_mut(name)[ndarray::IxDyn(&[i])] = orig + h; let up = loss(&ps, &x, mode);
                ps.get_mut(name)[ndarray::IxDyn(&[i])] = orig - h; let down = loss(&ps, &x, mode);
                ps.get_mut(name)[ndarray::IxDyn(&[i])] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = ps.grad(name)[ndarray::IxDyn(&[i])];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                gerr = gerr.max((fd - an).abs() / denom);
            }
        }
        println!("{mode:?}: dx max rel err {max_err:.3e}, dparam max rel err {gerr:.3e}");
    }
}
