//! Finite-difference checks of the full objective through encoder and predictor.

mod common;

use common::check_network_gradients;
use rejepa::losses::VicregConfig;

#[test]
fn full_objective_without_regularizer() {
    let worst = check_network_gradients(VicregConfig::disabled(), 60, 1e-4);
    println!("worst relative error {worst:.2e}");
}

#[test]
fn full_objective_with_regularizer() {
    let worst = check_network_gradients(VicregConfig::default(), 60, 1e-4);
    println!("worst relative error {worst:.2e}");
}
