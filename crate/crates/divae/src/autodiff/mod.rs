//! Reverse-mode AD over dense f64 tensors, plus Adam.

mod adam;
mod tape;

pub use adam::AdamState;
pub use tape::{Tape, Var};

pub mod gradcheck {
    //! Central finite-difference verification of tape gradients.
    //!
    //! Used by unit and acceptance tests; lives in the library so that
    //! integration tests can drive it against composite losses.

    use super::{Tape, Var};
    use crate::tensor::Tensor;

    /// Result of a finite-difference sweep over all parameter coordinates.
    #[derive(Debug, Clone, Copy)]
    pub struct GradCheck {
        pub max_rel_err: f64,
        pub coords_checked: usize,
    }

    /// Evaluate the loss once with the given parameter values. `build` must
    /// construct the loss from the supplied leaves and must not keep state.
    fn eval_loss(params: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    }

    /// Compare reverse-mode gradients against central finite differences with
    /// step `eps`. The relative error per coordinate is
    /// `|ad - fd| / max(1, |ad|, |fd|)`.
    pub fn check(
        params: &[Tensor],
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        eps: f64,
    ) -> GradCheck {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).expect("backward failed during gradient check");
        let ad_grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

        let mut max_rel_err: f64 = 0.0;
        let mut coords = 0;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.numel() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[j] += eps;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[j] -= eps;
                let fd = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * eps);
                let ad = ad_grads[pi].data()[j];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
                if rel > max_rel_err {
                    max_rel_err = rel;
                }
                coords += 1;
            }
        }
        GradCheck { max_rel_err, coords_checked: coords }
    }
}
