//! Central-difference gradient checks for every differentiable op and for
//! the full training loss of a small two-layer grouped network with
//! replayed sampling noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sfg_core::concrete::{entropy_rows, gsm_sample_with_noise, gumbel_noise, GroupingParams};
use sfg_core::objective;
use sfg_core::sfg::{sfg_forward, MergeSpec, SfgLayer};
use sfg_core::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

pub fn rand_vec(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Compare autodiff gradients of `f` (rebuilt per call) against central
/// finite differences for every listed parameter.
pub fn gradcheck(params: &[&Tensor], f: &dyn Fn() -> Tensor, label: &str) {
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    loss.backward().unwrap();
    for (pi, p) in params.iter().enumerate() {
        let analytic = p
            .grad()
            .unwrap_or_else(|| panic!("{label}: param {pi} got no gradient"));
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += H;
            p.set_data(plus).unwrap();
            let fp = f().item();
            let mut minus = base.clone();
            minus[i] -= H;
            p.set_data(minus).unwrap();
            let fm = f().item();
            p.set_data(base.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * H);
            let denom = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
            assert!(
                (analytic[i] - numeric).abs() / denom <= TOL,
                "{label}: param {pi} index {i}: analytic {} vs numeric {}",
                analytic[i],
                numeric
            );
        }
        p.zero_grad();
    }
}

pub fn param(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(rand_vec(rng, n, lo, hi), shape).unwrap()
}

pub fn elementwise_ops() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let a = param(&mut rng, &[2, 3], -1.0, 1.0);
    let b = param(&mut rng, &[2, 3], 0.5, 1.5);
    gradcheck(&[&a, &b], &|| a.add(&b).unwrap().sum().unwrap(), "add");
    gradcheck(&[&a, &b], &|| a.sub(&b).unwrap().sum().unwrap(), "sub");
    gradcheck(&[&a, &b], &|| a.mul(&b).unwrap().sum().unwrap(), "mul");
    gradcheck(&[&a, &b], &|| a.div(&b).unwrap().sum().unwrap(), "div");
    gradcheck(&[&a], &|| a.neg().unwrap().mul(&a).unwrap().sum().unwrap(), "neg");
    gradcheck(&[&a], &|| a.add_scalar(0.7).unwrap().mul(&a).unwrap().sum().unwrap(), "add_scalar");
    gradcheck(&[&a], &|| a.mul_scalar(-1.3).unwrap().mul(&a).unwrap().sum().unwrap(), "mul_scalar");
    gradcheck(&[&b], &|| b.ln().unwrap().sum().unwrap(), "ln");
    gradcheck(&[&a], &|| a.exp().unwrap().sum().unwrap(), "exp");
    gradcheck(&[&b], &|| b.sqrt().unwrap().sum().unwrap(), "sqrt");
    gradcheck(&[&a], &|| a.softplus().unwrap().sum().unwrap(), "softplus");
}

pub fn reductions_and_shapes() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let a = param(&mut rng, &[3, 4], -1.0, 1.0);
    let sq = |t: &Tensor| t.mul(t).unwrap();
    gradcheck(&[&a], &|| sq(&a).mean().unwrap(), "mean");
    gradcheck(&[&a], &|| sq(&a).sum_lastdim().unwrap().mul(&sq(&a).sum_lastdim().unwrap()).unwrap().sum().unwrap(), "sum_lastdim");
    let p = param(&mut rng, &[3, 3], 0.2, 1.5);
    let w = param(&mut rng, &[3, 3], -1.0, 1.0);
    gradcheck(
        &[&p, &w],
        &|| p.normalize_lastdim().unwrap().mul(&w).unwrap().sum().unwrap(),
        "normalize_lastdim",
    );
    gradcheck(
        &[&a],
        &|| a.reshape(&[4, 3]).unwrap().mul(&a.reshape(&[4, 3]).unwrap()).unwrap().sum().unwrap(),
        "reshape",
    );
}

pub fn linalg_ops() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let a = param(&mut rng, &[2, 3], -1.0, 1.0);
    let b = param(&mut rng, &[3, 4], -1.0, 1.0);
    let bias = param(&mut rng, &[4], -0.5, 0.5);
    gradcheck(
        &[&a, &b, &bias],
        &|| {
            let y = a.matmul(&b).unwrap().add_rowvec(&bias).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "matmul_add_rowvec",
    );
}

pub fn nn_ops() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let logits = param(&mut rng, &[3, 4], -1.0, 1.0);
    let w = param(&mut rng, &[3, 4], -1.0, 1.0);
    gradcheck(
        &[&logits, &w],
        &|| logits.softmax().unwrap().mul(&w).unwrap().sum().unwrap(),
        "softmax",
    );
    gradcheck(
        &[&logits, &w],
        &|| logits.log_softmax().unwrap().mul(&w).unwrap().sum().unwrap(),
        "log_softmax",
    );
    gradcheck(
        &[&logits],
        &|| {
            logits
                .log_softmax()
                .unwrap()
                .nll_from_log_probs(&[1, 0, 3])
                .unwrap()
        },
        "nll_from_log_probs",
    );

    let x = param(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let slope = param(&mut rng, &[3], 0.1, 0.9);
    gradcheck(
        &[&x, &slope],
        &|| {
            let y = x.prelu(&slope).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "prelu",
    );
    let sc = param(&mut rng, &[3], 0.2, 1.2);
    gradcheck(
        &[&x, &sc],
        &|| {
            let y = x.scale_channels(&sc).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "scale_channels",
    );
    let s = param(&mut rng, &[1], 0.5, 1.5);
    gradcheck(
        &[&x, &s],
        &|| {
            let y = x.scale_by(&s).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "scale_by",
    );
    let x2 = param(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    gradcheck(
        &[&x, &x2],
        &|| {
            let y = Tensor::concat_channels(&[x.clone(), x2.clone()]).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "concat_channels",
    );
    gradcheck(
        &[&x],
        &|| {
            let y = x.sum_per_channel().unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "sum_per_channel",
    );

    let gamma = param(&mut rng, &[3], 0.5, 1.5);
    let beta = param(&mut rng, &[3], -0.3, 0.3);
    gradcheck(
        &[&x, &gamma, &beta],
        &|| {
            let y = x.batch_norm(&gamma, &beta).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "batch_norm",
    );

    let p = param(&mut rng, &[4, 3], 0.1, 0.9);
    gradcheck(
        &[&p],
        &|| entropy_rows(&p.normalize_lastdim().unwrap()).unwrap().sum().unwrap(),
        "entropy_rows",
    );
}

pub fn conv_and_pool_ops() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let x = param(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let k = param(&mut rng, &[3, 2, 3, 3], -0.7, 0.7);
    gradcheck(
        &[&x, &k],
        &|| {
            let y = x.conv2d(&k, 1, 1).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "conv2d_pad1",
    );
    gradcheck(
        &[&x, &k],
        &|| {
            let y = x.conv2d(&k, 2, 0).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "conv2d_stride2",
    );
    // keep pooling argmax stable under the probe by separating entries
    let base: Vec<f64> = (0..2 * 2 * 4 * 4)
        .map(|i| (i as f64 * 0.37).sin() * 3.0)
        .collect();
    let xp = Tensor::param(base, &[2, 2, 4, 4]).unwrap();
    gradcheck(
        &[&xp],
        &|| {
            let y = xp.max_pool2d(2, 2).unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "max_pool2d",
    );
    gradcheck(
        &[&x],
        &|| {
            let y = x.global_avg_pool().unwrap();
            y.mul(&y).unwrap().sum().unwrap()
        },
        "global_avg_pool",
    );
}

pub fn loss_ops() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let pred = param(&mut rng, &[4, 1], -1.0, 1.0);
    let target = Tensor::from_vec(rand_vec(&mut rng, 4, 0.0, 1.0), &[4, 1]).unwrap();
    gradcheck(
        &[&pred],
        &|| objective::nll_regression(&pred, &target).unwrap(),
        "nll_regression",
    );
    let logits = param(&mut rng, &[4, 2], -1.0, 1.0);
    gradcheck(
        &[&logits],
        &|| objective::nll_classification(&logits, &[0, 1, 1, 0]).unwrap(),
        "nll_classification",
    );
    let seg = param(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    let labels = [0usize, 1, 2, 0, 1, 1, 0, 2];
    gradcheck(
        &[&seg],
        &|| objective::dice_ce(&seg, &labels).unwrap(),
        "dice_ce",
    );
}

/// Full objective on a two-layer grouped net with learned distributions:
/// the sampling noise is drawn once and replayed on every evaluation, so
/// the loss is a deterministic function of the parameters.
pub fn full_loss_two_layer_net_with_replayed_noise() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let k1 = param(&mut rng, &[4, 1, 3, 3], -0.5, 0.5);
    let k2 = param(&mut rng, &[4, 4, 3, 3], -0.3, 0.3);
    let g1 = GroupingParams::learned(4, [0.2, 0.6, 0.2]).unwrap();
    let g2 = GroupingParams::learned(4, [0.3, 0.4, 0.3]).unwrap();
    let noise1 = gumbel_noise(4, &mut rng);
    let noise2 = gumbel_noise(4, &mut rng);
    let images = Tensor::from_vec(rand_vec(&mut rng, 2 * 36, 0.0, 1.0), &[2, 1, 6, 6]).unwrap();
    let reg_target = Tensor::from_vec(rand_vec(&mut rng, 2, 0.0, 1.0), &[2, 1]).unwrap();
    let head1 = param(&mut rng, &[4, 1], -0.5, 0.5);
    let head2 = param(&mut rng, &[4, 2], -0.5, 0.5);

    let l1 = SfgLayer::new(k1.clone(), g1, 1, 1).unwrap();
    let l2 = SfgLayer::new(k2.clone(), g2, 1, 1).unwrap();

    let loss = {
        let l1 = &l1;
        let l2 = &l2;
        let noise1 = noise1.clone();
        let noise2 = noise2.clone();
        let images = images.clone();
        let reg_target = reg_target.clone();
        let head1 = head1.clone();
        let head2 = head2.clone();
        move || {
            let s1 = gsm_sample_with_noise(&l1.grouping, 0.8, &noise1, false).unwrap();
            let s2 = gsm_sample_with_noise(&l2.grouping, 0.8, &noise2, false).unwrap();
            let t1 = sfg_forward(l1, &images, &s1).unwrap();
            // Sum-merge routing with identity transforms
            let in1 = t1.f1.add(&t1.fs).unwrap();
            let ins = t1.fs.clone();
            let in2 = t1.f2.add(&t1.fs).unwrap();
            let r = sfg_core::sfg::sfg_forward_routed(l2, &in1, &ins, &in2, &s2).unwrap();
            let (m1, m2) = sfg_core::sfg::head_merge(&r.triple, &MergeSpec::Sum).unwrap();
            let o1 = m1.global_avg_pool().unwrap().matmul(&head1).unwrap();
            let o2 = m2.global_avg_pool().unwrap().matmul(&head2).unwrap();
            let nll1 = objective::nll_regression(&o1, &reg_target).unwrap();
            let nll2 = objective::nll_classification(&o2, &[0, 1]).unwrap();
            objective::assemble(nll1, nll2, &[l1, l2], 1e-6, 1e-5, 64, 2)
                .unwrap()
                .total
        }
    };

    let logits1 = l1.grouping.logits().unwrap().clone();
    let logits2 = l2.grouping.logits().unwrap().clone();
    gradcheck(
        &[&k1, &k2, &logits1, &logits2, &head1, &head2],
        &loss,
        "full_objective",
    );
}

/// Run every gradient check in one call (used by the acceptance suite).
#[allow(dead_code)]
pub fn full_suite() {
    elementwise_ops();
    reductions_and_shapes();
    linalg_ops();
    nn_ops();
    conv_and_pool_ops();
    loss_ops();
    full_loss_two_layer_net_with_replayed_noise();
}
