mod common;

use common::{check_hypercut_loss, check_loss_order_invariant, check_loss_rec, check_total_loss, random_tensor};
use hypercut::blur2vid::{PairNorm, Regime};
use hypercut::diffcore::{gradcheck, Feed, Graph, GradcheckConfig, NodeId, Tensor};

fn assert_op(build: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId, a_shape: &[usize], b_shape: &[usize]) {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(a_shape, 1, -1.0, 1.0), true);
    let b = g.param("b", random_tensor(b_shape, 2, -1.0, 1.0), true);
    let y = build(&mut g, a, b);
    // weight the output so every coordinate gets a distinct adjoint
    let shape = g.value(y).map(|t| t.shape().to_vec());
    let out_shape = match shape {
        Some(s) => s,
        None => {
            g.evaluate(&Feed::new()).unwrap();
            g.value(y).unwrap().shape().to_vec()
        }
    };
    let w = g.constant(random_tensor(&out_shape, 3, -1.0, 1.0));
    let weighted = g.mul(y, w);
    let loss = g.sum(weighted);
    let report = gradcheck(&mut g, &Feed::new(), loss, &GradcheckConfig::default()).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn elementwise_ops() {
    assert_op(|g, a, b| g.add(a, b), &[3, 4], &[3, 4]);
    assert_op(|g, a, b| g.sub(a, b), &[3, 4], &[3, 4]);
    assert_op(|g, a, b| g.mul(a, b), &[3, 4], &[3, 4]);
    assert_op(|g, a, _| g.scale(a, -2.5), &[5], &[1]);
    assert_op(|g, a, _| g.offset(a, 0.7), &[5], &[1]);
    assert_op(|g, a, _| g.leaky_relu(a, 0.2), &[4, 6], &[1]);
    assert_op(|g, a, _| g.softplus(a), &[4, 6], &[1]);
    assert_op(|g, a, _| g.sigmoid(a), &[4, 6], &[1]);
    assert_op(|g, a, _| g.abs(a), &[4, 6], &[1]);
}

#[test]
fn reductions_and_norms() {
    assert_op(|g, a, _| g.sum(a), &[2, 3, 2], &[1]);
    assert_op(|g, a, _| g.mean(a), &[2, 3, 2], &[1]);
    assert_op(|g, a, _| g.row_norm(a), &[3, 2, 2, 2], &[1]);
    assert_op(|g, a, _| g.l2_normalize(a), &[3, 5], &[1]);
    assert_op(|g, a, _| g.global_avg_pool(a), &[2, 3, 4, 4], &[1]);
}

#[test]
fn linear_algebra() {
    assert_op(|g, a, b| g.matmul(a, b), &[3, 4], &[4, 2]);
    assert_op(|g, a, b| g.add_bias(a, b), &[3, 4], &[4]);
    assert_op(|g, a, b| g.add_bias(a, b), &[2, 3, 4, 4], &[3]);
}

#[test]
fn convolutions() {
    assert_op(|g, x, w| g.conv2d(x, w, 1, 1), &[2, 3, 5, 5], &[4, 3, 3, 3]);
    assert_op(|g, x, w| g.conv2d(x, w, 2, 1), &[2, 2, 6, 6], &[3, 2, 3, 3]);
    assert_op(|g, x, w| g.conv_transpose2d(x, w, 2, 1), &[2, 3, 3, 3], &[3, 2, 4, 4]);
}

#[test]
fn shape_ops() {
    assert_op(|g, a, b| g.concat(&[a, b], 1), &[2, 3, 2, 2], &[2, 1, 2, 2]);
    assert_op(|g, a, b| g.concat(&[a, b], 0), &[2, 3], &[1, 3]);
    assert_op(|g, a, _| g.slice(a, 1, 1, 2), &[2, 4, 3], &[1]);
    assert_op(|g, a, _| g.reshape(a, &[6, 2]), &[3, 4], &[1]);
    assert_op(|g, a, _| g.flatten(a), &[2, 3, 2, 2], &[1]);
}

#[test]
fn hypercut_loss_gradients() {
    for seed in 0..3 {
        let r = check_hypercut_loss(seed);
        assert!(r.passed(), "seed {seed}\n{r}");
    }
}

#[test]
fn reconstruction_loss_gradients() {
    let r = check_loss_rec(5);
    assert!(r.passed(), "{r}");
}

#[test]
fn order_invariant_loss_gradients() {
    for norm in [PairNorm::L2, PairNorm::L1] {
        let r = check_loss_order_invariant(9, norm);
        assert!(r.passed(), "{norm:?}\n{r}");
    }
}

#[test]
fn total_loss_gradients() {
    for regime in [Regime::OiHypercut, Regime::RecHypercut] {
        let r = check_total_loss(11, regime);
        assert!(r.passed(), "{regime}\n{r}");
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut g = Graph::new();
    let a = g.param("a", Tensor::from_vec(vec![0.4, -0.9, 1.3]), true);
    let off = g.grad_scale(a, 1.001);
    let sq = g.softplus(off);
    let loss = g.sum(sq);
    let r = gradcheck(&mut g, &Feed::new(), loss, &GradcheckConfig::default()).unwrap();
    assert!(!r.passed());
}
