//! Central finite-difference verification of analytic gradients.
//!
//! Every suite runs in f64: losses are probed with respect to student
//! logits, networks with respect to parameters of each layer kind and to the
//! input. The checks evaluate the forward path only, so they are independent
//! of the backward implementation they verify.

use ndarray::{Array2, Array4};
use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::losses;
use crate::nn::{build_network, DepthMask, Mode, Network, NetworkSpec, ParamKind, ParameterSet};
use crate::rng::{stream, Stream};

pub const REL_TOL: f64 = 1e-4;
pub const MIN_PROBES: usize = 20;

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.probes >= MIN_PROBES && self.max_rel_err < self.tol
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            s.push_str(&format!(
                "{:<36} probes={:<3} max_rel_err={:.3e} tol={:.0e} {}\n",
                c.name,
                c.probes,
                c.max_rel_err,
                c.tol,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

fn rel_err(fd: f64, an: f64) -> f64 {
    let denom = fd.abs().max(an.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (fd - an).abs() / denom
    }
}

// ---------------------------------------------------------------------------
// Loss gradients with respect to student logits
// ---------------------------------------------------------------------------

fn check_loss_grad(
    name: &str,
    value_fn: &dyn Fn(&Array2<f64>) -> f64,
    analytic: &Array2<f64>,
    z: &Array2<f64>,
    rng: &mut impl Rng,
) -> CaseReport {
    let n = z.len();
    let picks = index_sample(rng, n, MIN_PROBES.min(n));
    let mut max_err = 0.0f64;
    let mut z = z.clone();
    let cols = z.dim().1;
    for flat in picks {
        let idx = (flat / cols, flat % cols);
        let orig = z[idx];
        let h = 1e-5 * orig.abs().max(1.0);
        z[idx] = orig + h;
        let up = value_fn(&z);
        z[idx] = orig - h;
        let down = value_fn(&z);
        z[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        max_err = max_err.max(rel_err(fd, analytic[idx]));
    }
    CaseReport { name: name.into(), probes: MIN_PROBES.min(n), max_rel_err: max_err, tol: REL_TOL }
}

pub fn losses_suite() -> SuiteReport {
    let mut rng = stream(101, Stream::Probe, 0, 0);
    let (b, n) = (5, 7);
    let z_t = Array2::from_shape_fn((b, n), |_| rng.random_range(-3.0..3.0));
    let z_s = Array2::from_shape_fn((b, n), |_| rng.random_range(-3.0..3.0));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();

    let mut report = SuiteReport::default();

    let (_, g) = losses::cross_entropy_with_grad(&z_s, &labels).unwrap();
    report.cases.push(check_loss_grad(
        "loss.cross_entropy",
        &|z| losses::cross_entropy(z, &labels).unwrap(),
        &g,
        &z_s,
        &mut rng,
    ));

    let (_, g) = losses::kl_grad_student(&z_t, &z_s).unwrap();
    report.cases.push(check_loss_grad(
        "loss.kl",
        &|z| losses::kl_batch(&z_t, z).unwrap(),
        &g,
        &z_s,
        &mut rng,
    ));

    let (_, g) = losses::kl_minus_grad_student(&z_t, &z_s).unwrap();
    report.cases.push(check_loss_grad(
        "loss.kl_minus",
        &|z| losses::kl_minus(&z_t, z).unwrap(),
        &g,
        &z_s,
        &mut rng,
    ));

    report
}

// ---------------------------------------------------------------------------
// Network gradients, grouped by layer kind
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum NetLoss {
    /// Sum of all logits, eval mode (frozen normalization statistics).
    SumLogitsEval,
    /// Cross entropy in train mode (gradients flow through batch statistics).
    CeTrain,
}

fn net_loss_value(
    net: &Network,
    ps: &ParameterSet<f64>,
    mask: &DepthMask,
    x: &Array4<f64>,
    labels: &[usize],
    kind: NetLoss,
) -> f64 {
    match kind {
        NetLoss::SumLogitsEval => {
            let (logits, _) = net.forward(ps, mask, x, Mode::Eval).unwrap();
            logits.iter().sum()
        }
        NetLoss::CeTrain => {
            let (logits, _) = net.forward(ps, mask, x, Mode::Train).unwrap();
            losses::cross_entropy(&logits, labels).unwrap()
        }
    }
}

fn net_analytic_grads(
    net: &Network,
    ps: &mut ParameterSet<f64>,
    mask: &DepthMask,
    x: &Array4<f64>,
    labels: &[usize],
    kind: NetLoss,
) -> Array4<f64> {
    ps.zero_grads();
    match kind {
        NetLoss::SumLogitsEval => {
            let (logits, tape) = net.forward(ps, mask, x, Mode::Eval).unwrap();
            let dlogits = Array2::<f64>::ones(logits.dim());
            net.backward(ps, tape, &dlogits).unwrap()
        }
        NetLoss::CeTrain => {
            let (logits, tape) = net.forward(ps, mask, x, Mode::Train).unwrap();
            let (_, dlogits) = losses::cross_entropy_with_grad(&logits, labels).unwrap();
            net.backward(ps, tape, &dlogits).unwrap()
        }
    }
}

fn set_flat(ps: &mut ParameterSet<f64>, name: &str, flat: usize, v: f64) {
    let arr = ps.get_mut(name);
    *arr.iter_mut().nth(flat).unwrap() = v;
}

#[allow(clippy::too_many_arguments)]
fn probe_params(
    label: &str,
    net: &Network,
    ps: &mut ParameterSet<f64>,
    mask: &DepthMask,
    x: &Array4<f64>,
    labels: &[usize],
    kind: NetLoss,
    select: &dyn Fn(&str, ParamKind) -> bool,
    rng: &mut impl Rng,
) -> CaseReport {
    net_analytic_grads(net, ps, mask, x, labels, kind);
    let mut candidates: Vec<(String, usize, f64)> = Vec::new();
    for (name, p) in ps.iter() {
        if p.kind.trainable() && select(name, p.kind) {
            for (i, &g) in p.grad.iter().enumerate() {
                candidates.push((name.to_string(), i, g));
            }
        }
    }
    let picks = index_sample(rng, candidates.len(), MIN_PROBES.min(candidates.len()));
    let mut max_err = 0.0f64;
    for pi in picks {
        let (name, flat, an) = candidates[pi].clone();
        let orig = *ps.get(&name).iter().nth(flat).unwrap();
        let h = 1e-5 * orig.abs().max(1.0);
        set_flat(ps, &name, flat, orig + h);
        let up = net_loss_value(net, ps, mask, x, labels, kind);
        set_flat(ps, &name, flat, orig - h);
        let down = net_loss_value(net, ps, mask, x, labels, kind);
        set_flat(ps, &name, flat, orig);
        let fd = (up - down) / (2.0 * h);
        max_err = max_err.max(rel_err(fd, an));
    }
    CaseReport {
        name: label.into(),
        probes: MIN_PROBES.min(candidates.len()),
        max_rel_err: max_err,
        tol: REL_TOL,
    }
}

#[allow(clippy::too_many_arguments)]
fn probe_input(
    label: &str,
    net: &Network,
    ps: &mut ParameterSet<f64>,
    mask: &DepthMask,
    x: &Array4<f64>,
    labels: &[usize],
    kind: NetLoss,
    rng: &mut impl Rng,
) -> CaseReport {
    let dinput = net_analytic_grads(net, ps, mask, x, labels, kind);
    let mut x = x.clone();
    let n = x.len();
    let picks = index_sample(rng, n, MIN_PROBES.min(n));
    let dims = x.dim();
    let mut max_err = 0.0f64;
    for flat in picks {
        let idx = unflatten4(flat, dims);
        let orig = x[idx];
        let h = 1e-5 * orig.abs().max(1.0);
        x[idx] = orig + h;
        let up = net_loss_value(net, ps, mask, &x, labels, kind);
        x[idx] = orig - h;
        let down = net_loss_value(net, ps, mask, &x, labels, kind);
        x[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        max_err = max_err.max(rel_err(fd, dinput[idx]));
    }
    CaseReport { name: label.into(), probes: MIN_PROBES.min(n), max_rel_err: max_err, tol: REL_TOL }
}

fn unflatten4(flat: usize, (_, d1, d2, d3): (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
    let i3 = flat % d3;
    let r = flat / d3;
    let i2 = r % d2;
    let r = r / d2;
    let i1 = r % d1;
    (r / d1, i1, i2, i3)
}

pub fn network_suite() -> SuiteReport {
    let mut report = SuiteReport::default();
    let mut rng = stream(202, Stream::Probe, 0, 0);

    let specs = [
        (
            "basic",
            NetworkSpec {
                stage_blocks: vec![2, 2],
                stage_widths: vec![4, 6],
                num_classes: 5,
                stem: Default::default(),
                block_kind: crate::nn::BlockKind::Basic,
                input_channels: 3,
            },
        ),
        (
            "bottleneck",
            NetworkSpec {
                stage_blocks: vec![2, 2],
                stage_widths: vec![3, 4],
                num_classes: 5,
                stem: Default::default(),
                block_kind: crate::nn::BlockKind::Bottleneck,
                input_channels: 3,
            },
        ),
    ];

    for (tag, spec) in specs {
        let (net, mut ps) = build_network::<f64>(&spec, 7).unwrap();
        let x = Array4::from_shape_fn((3, 3, 9, 9), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
        let full = DepthMask::full(&spec);

        for (kname, kselect) in [
            ("conv", ParamKind::ConvWeight),
            ("norm_scale", ParamKind::NormScale),
            ("norm_bias", ParamKind::NormBias),
            ("linear_weight", ParamKind::LinearWeight),
            ("linear_bias", ParamKind::LinearBias),
        ] {
            report.cases.push(probe_params(
                &format!("{tag}.{kname}.sum_logits_eval"),
                &net,
                &mut ps,
                &full,
                &x,
                &labels,
                NetLoss::SumLogitsEval,
                &move |_, kind| kind == kselect,
                &mut rng,
            ));
        }
        // train mode exercises the batch-statistics backward path
        report.cases.push(probe_params(
            &format!("{tag}.all_params.ce_train"),
            &net,
            &mut ps,
            &full,
            &x,
            &labels,
            NetLoss::CeTrain,
            &|_, _| true,
            &mut rng,
        ));
        // subnet mask: parameters of the active blocks still match
        let sub = DepthMask::new(vec![1, 1], &spec).unwrap();
        report.cases.push(probe_params(
            &format!("{tag}.all_params.masked_ce_train"),
            &net,
            &mut ps,
            &sub,
            &x,
            &labels,
            NetLoss::CeTrain,
            &|name, _| !name.contains("block1"),
            &mut rng,
        ));
        // input gradient (the quantity ERF maps are built from)
        report.cases.push(probe_input(
            &format!("{tag}.input.sum_logits_eval"),
            &net,
            &mut ps,
            &full,
            &x,
            &labels,
            NetLoss::SumLogitsEval,
            &mut rng,
        ));
    }
    report
}

/// All finite-difference suites; the CLI `gradcheck` subcommand and the
/// acceptance gate run exactly this.
pub fn run_full_suite() -> SuiteReport {
    let mut report = losses_suite();
    report.cases.extend(network_suite().cases);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_pass_finite_differences() {
        let report = losses_suite();
        assert!(report.all_passed(), "\n{}", report.summary());
    }
}
