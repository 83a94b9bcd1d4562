mod common;

use common::grad;

#[test]
fn matmul_variants() {
    grad::matmul_variants();
}

#[test]
fn elementwise_binary() {
    grad::elementwise_binary();
}

#[test]
fn shape_ops() {
    grad::shape_ops();
}

#[test]
fn reductions() {
    grad::reductions();
}

#[test]
fn nonlinearities() {
    grad::nonlinearities();
}

#[test]
fn convolutions() {
    grad::convolutions();
}

#[test]
fn bilinear_sampling() {
    grad::bilinear_sampling();
}

#[test]
fn full_toy_model_total_loss() {
    grad::full_toy_model_total_loss();
}

#[test]
fn full_toy_model_with_adapters() {
    grad::full_toy_model_with_adapters();
}

#[test]
fn three_layer_composition() {
    grad::three_layer_composition();
}
