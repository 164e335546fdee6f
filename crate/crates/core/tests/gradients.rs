#[path = "support/gradient_suite.rs"]
mod suite;

#[test]
fn surface_normals_match_sdf_differences() {
    suite::surface_normals_match_sdf_differences();
}

#[test]
fn l2_and_l1_gradients() {
    suite::l2_and_l1_gradients();
}

#[test]
fn geometry_loss_gradient_through_generator() {
    suite::geometry_loss_gradient_through_generator();
}

#[test]
fn code_loss_gradient() {
    suite::code_loss_gradient();
}

#[test]
fn reconstruction_loss_gradient_including_proxies() {
    suite::reconstruction_loss_gradient_including_proxies();
}

#[test]
fn adversarial_and_critic_gradients_wrt_images() {
    suite::adversarial_and_critic_gradients_wrt_images();
}

#[test]
fn adversarial_losses_wrt_logits() {
    suite::adversarial_losses_wrt_logits();
}

#[test]
fn r1_penalty_gradient_wrt_critic_parameters() {
    suite::r1_penalty_gradient_wrt_critic_parameters();
}

#[test]
fn ada_residual_gradient() {
    suite::ada_residual_gradient();
}

#[test]
fn film_gradient_wrt_target_and_condition() {
    suite::film_gradient_wrt_target_and_condition();
}

#[test]
fn every_check_is_listed_once() {
    let mut names: Vec<&str> = suite::CHECKS.iter().map(|c| c.0).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 10);
}
