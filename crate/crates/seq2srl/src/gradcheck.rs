//! Central finite-difference gradient checking.
//!
//! The checker reruns the forward closure with each input element nudged
//! by ±h and compares the slope against the tape's analytic gradient. The
//! reported figure is the normalized error
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1)`, which behaves
//! as a relative error for gradients of order one and larger and as an
//! absolute error below that, where finite differences run out of digits.

use crate::tensor::{ParamStore, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

fn normalized_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check a closure of free inputs, given as `(rows, cols, data)` triples.
/// Returns the worst normalized error over all input elements.
pub fn finite_diff_check(
    inputs: &[(usize, usize, Vec<f64>)],
    f: impl Fn(&Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |datas: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(datas)
            .map(|((r, c, _), d)| tape.leaf(*r, *c, d.clone()))
            .collect();
        tape.scalar(f(&tape, &vars))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, d)| d.clone()).collect();

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(r, c, d)| tape.leaf(*r, *c, d.clone()))
        .collect();
    let loss = f(&tape, &vars);
    tape.backward(loss);
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (r, c, _))| tape.grad(*v).unwrap_or_else(|| vec![0.0; r * c]))
        .collect();
    drop(tape);

    let h = DEFAULT_STEP;
    let mut worst = 0.0f64;
    for (vi, (_, _, data)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = base.clone();
            plus[vi][ei] += h;
            let mut minus = base.clone();
            minus[vi][ei] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(normalized_err(grads[vi][ei], numeric));
        }
    }
    worst
}

/// Check every parameter owned by `subject` against finite differences
/// of `loss_of`. Works for anything that exposes its [`ParamStore`]
/// (typically a model); `loss_of` must be deterministic. Returns the
/// worst normalized error over all parameter elements.
pub fn finite_diff_check_on<S>(
    subject: &mut S,
    store_of: impl Fn(&mut S) -> &mut ParamStore,
    loss_of: impl Fn(&Tape, &S) -> Var,
) -> f64 {
    store_of(subject).zero_grads();
    {
        let tape = Tape::new();
        let loss = loss_of(&tape, subject);
        tape.backward(loss);
        tape.fold_param_grads(store_of(subject));
    }
    let (analytic, ids): (Vec<Vec<f64>>, Vec<_>) = {
        let store = store_of(subject);
        (
            store.iter().map(|(_, p)| p.grad.clone()).collect(),
            store.iter().map(|(id, _)| id).collect(),
        )
    };

    let h = DEFAULT_STEP;
    let mut worst = 0.0f64;
    for (pi, &id) in ids.iter().enumerate() {
        let len = store_of(subject).get(id).len();
        for ei in 0..len {
            let orig = store_of(subject).get(id).data()[ei];
            store_of(subject).values_mut(id)[ei] = orig + h;
            let plus = {
                let tape = Tape::new();
                tape.scalar(loss_of(&tape, subject))
            };
            store_of(subject).values_mut(id)[ei] = orig - h;
            let minus = {
                let tape = Tape::new();
                tape.scalar(loss_of(&tape, subject))
            };
            store_of(subject).values_mut(id)[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(normalized_err(analytic[pi][ei], numeric));
        }
    }
    worst
}

/// Check every parameter of a bare store against finite differences of
/// `f`. `f` must be deterministic. Returns the worst normalized error.
pub fn finite_diff_check_params(
    store: &mut ParamStore,
    f: impl Fn(&Tape, &ParamStore) -> Var,
) -> f64 {
    store.zero_grads();
    {
        let tape = Tape::new();
        let loss = f(&tape, store);
        tape.backward(loss);
        tape.fold_param_grads(store);
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();

    let h = DEFAULT_STEP;
    let mut worst = 0.0f64;
    for (pi, &id) in ids.iter().enumerate() {
        for ei in 0..store.get(id).len() {
            let orig = store.get(id).data()[ei];
            store.values_mut(id)[ei] = orig + h;
            let plus = {
                let tape = Tape::new();
                tape.scalar(f(&tape, store))
            };
            store.values_mut(id)[ei] = orig - h;
            let minus = {
                let tape = Tape::new();
                tape.scalar(f(&tape, store))
            };
            store.values_mut(id)[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(normalized_err(analytic[pi][ei], numeric));
        }
    }
    worst
}
