//! Reverse-mode gradients against central finite differences.

#[path = "support/gradcases.rs"]
mod gradcases;

use gradcases::*;

fn assert_op(name: &str) {
    let c = op_cases().into_iter().find(|c| c.name == name).unwrap();
    let worst = worst_op_error(&c);
    assert!(worst < OP_TOL, "{name}: worst relative error {worst:.3e}");
}

#[test]
fn add() {
    assert_op("add");
}

#[test]
fn sub() {
    assert_op("sub");
}

#[test]
fn mul() {
    assert_op("mul");
}

#[test]
fn div() {
    assert_op("div");
}

#[test]
fn scalar_broadcast() {
    assert_op("broadcast");
}

#[test]
fn scale() {
    assert_op("scale");
}

#[test]
fn matmul() {
    assert_op("matmul");
}

#[test]
fn add_row() {
    assert_op("add_row");
}

#[test]
fn relu() {
    assert_op("relu");
}

#[test]
fn tanh() {
    assert_op("tanh");
}

#[test]
fn sigmoid() {
    assert_op("sigmoid");
}

#[test]
fn soft_clip() {
    assert_op("soft_clip");
}

#[test]
fn square() {
    assert_op("square");
}

#[test]
fn sqrt() {
    assert_op("sqrt");
}

#[test]
fn sum_and_mean() {
    assert_op("sum");
}

#[test]
fn sum_rows() {
    assert_op("sum_rows");
}

#[test]
fn l2norm() {
    assert_op("l2norm");
}

#[test]
fn normalize_rows() {
    assert_op("normalize_rows");
}

#[test]
fn concat_reshape_slice() {
    assert_op("concat");
}

#[test]
fn cross_entropy() {
    assert_op("cross_entropy");
}

fn assert_guidance(label: &str) {
    let (_, decoder, teacher, lo, hi) =
        guidance_cases().into_iter().find(|c| c.0 == label).unwrap();
    let worst = worst_guidance_error(&decoder, &teacher, label, lo, hi);
    assert!(
        worst < COMPOSED_TOL,
        "{label}: worst relative error {worst:.3e}"
    );
}

#[test]
fn guidance_gradient_identity_decoder() {
    assert_guidance("identity");
}

#[test]
fn guidance_gradient_autoencoder_decoder() {
    assert_guidance("autoencoder");
}
