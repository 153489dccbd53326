//! Finite-difference gradient oracle.
//!
//! Any scalar-valued tape program can be checked: the reverse-mode gradient
//! with respect to one input tensor is compared against central differences
//! (f(x+h) - f(x-h)) / 2h, coordinate by coordinate.

use super::{NodeId, Tape, Tensor, TensorError};
use crate::rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_coords: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Outcome of one named check in a verification suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub trials: usize,
    pub pass: bool,
}

/// Relative error with a floor on the denominator so near-zero gradient pairs
/// compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-4, a.abs() + b.abs())
}

/// Checks d(f)/d(x) for a scalar-valued tape program `f`.
///
/// `f` receives a fresh tape plus the node holding `x` and must return the
/// scalar output node. It is re-run twice per coordinate for the central
/// differences, so keep programs small.
pub fn finite_diff_check<F>(
    f: F,
    x: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TensorError>,
{
    finite_diff_check_opts(f, x, step, tol, false)
}

/// As [`finite_diff_check`], with an optional fault injection into the GELU
/// backward rule (negative control: a corrupted rule must make the check
/// fail).
pub fn finite_diff_check_opts<F>(
    f: F,
    x: &Tensor,
    step: f64,
    tol: f64,
    inject_backward_fault: bool,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TensorError>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(TensorError::BadStep(step));
    }

    // Reverse-mode gradient.
    let mut tape = Tape::new();
    if inject_backward_fault {
        tape.inject_gelu_backward_fault();
    }
    let xid = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xid)?;
    let ov = tape.value(out);
    if ov.numel() != 1 {
        return Err(TensorError::NonScalarOutput {
            shape: ov.shape.clone(),
        });
    }
    let grads = tape.backward(out)?;
    let g_rev = grads.get(xid).expect("leaf requires grad").to_vec();

    // Central differences, one coordinate at a time. The fault (if any) only
    // affects backward rules, so plain tapes evaluate the true function.
    let eval = |xp: &Tensor| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let id = t.constant(xp.clone());
        let o = f(&mut t, id)?;
        Ok(t.value(o).data[0])
    };

    let mut max_rel = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data[i];
        xp.data[i] = orig + step;
        let fp = eval(&xp)?;
        xp.data[i] = orig - step;
        let fm = eval(&xp)?;
        xp.data[i] = orig;
        let g_fd = (fp - fm) / (2.0 * step);
        max_rel = max_rel.max(rel_err(g_rev[i], g_fd));
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        n_coords: x.numel(),
        tol,
        pass: max_rel <= tol,
    })
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng::uniform(r, -2.0, 2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Weights the output elementwise by a fixed random tensor and sums, so every
/// output coordinate contributes a distinct gradient signal.
fn weighted_sum(tape: &mut Tape, out: NodeId, w: &Tensor) -> Result<NodeId, TensorError> {
    let wid = tape.constant(w.clone());
    let prod = tape.mul(out, wid)?;
    Ok(tape.sum_all(prod))
}

/// Seeded gradient checks for every differentiable primitive: random inputs
/// in [-2, 2], central differences at step 1e-5, relative error bound 1e-5.
///
/// `inject_fault` corrupts the GELU backward rule (negative control).
pub fn primitive_gradient_suite(trials: usize, seed: u64, inject_fault: bool) -> Vec<SuiteEntry> {
    let step = 1e-5;
    let tol = 1e-5;
    let mut entries = Vec::new();

    let mut run = |name: &str, f: &mut dyn FnMut(&mut ChaCha8Rng, bool) -> f64| {
        let mut max_err = 0.0f64;
        for t in 0..trials {
            let mut r = rng::stream(seed, "grad-suite", &[name, &t.to_string()]);
            max_err = max_err.max(f(&mut r, inject_fault));
        }
        entries.push(SuiteEntry {
            name: name.to_string(),
            max_rel_err: max_err,
            tol,
            trials,
            pass: max_err <= tol,
        });
    };

    // matmul: gradient w.r.t. each operand, for all transpose layouts.
    for (name, ta, tb, check_a) in [
        ("matmul d/da", false, false, true),
        ("matmul d/db", false, false, false),
        ("matmul aT d/da", true, false, true),
        ("matmul bT d/db", false, true, false),
        ("matmul aT.bT d/da", true, true, true),
    ] {
        run(name, &mut |r, fault| {
            let (m, k, n) = (3, 4, 2);
            let ash = if ta { vec![k, m] } else { vec![m, k] };
            let bsh = if tb { vec![n, k] } else { vec![k, n] };
            let a = rand_tensor(r, ash);
            let b = rand_tensor(r, bsh);
            let w = rand_tensor(r, vec![m, n]);
            let x = if check_a { a.clone() } else { b.clone() };
            let rep = finite_diff_check_opts(
                |tape, xid| {
                    let other = tape.constant(if check_a { b.clone() } else { a.clone() });
                    let (ai, bi) = if check_a { (xid, other) } else { (other, xid) };
                    let mm = tape.matmul_t(ai, ta, bi, tb)?;
                    weighted_sum(tape, mm, &w)
                },
                &x,
                step,
                tol,
                fault,
            )
            .unwrap();
            rep.max_rel_err
        });
    }

    // binary elementwise ops, including a broadcast layout.
    for (name, which) in [("add", 0usize), ("sub", 1), ("mul", 2)] {
        run(name, &mut |r, fault| {
            let a = rand_tensor(r, vec![3, 4]);
            let b = rand_tensor(r, vec![4]); // broadcast over rows
            let w = rand_tensor(r, vec![3, 4]);
            let rep = finite_diff_check_opts(
                |tape, xid| {
                    let bi = tape.constant(b.clone());
                    let out = match which {
                        0 => tape.add(xid, bi)?,
                        1 => tape.sub(bi, xid)?, // x as subtrahend: sign path
                        _ => tape.mul(xid, bi)?,
                    };
                    weighted_sum(tape, out, &w)
                },
                &a,
                step,
                tol,
                fault,
            )
            .unwrap();
            rep.max_rel_err
        });
    }

    run("relu", &mut |r, fault| {
        let mut x = rand_tensor(r, vec![12]);
        // keep points away from the kink at 0 where the derivative jumps
        for v in &mut x.data {
            if v.abs() < 1e-3 {
                *v += 0.01;
            }
        }
        let w = rand_tensor(r, vec![12]);
        let rep = finite_diff_check_opts(
            |tape, xid| {
                let y = tape.relu(xid);
                weighted_sum(tape, y, &w)
            },
            &x,
            step,
            tol,
            fault,
        )
        .unwrap();
        rep.max_rel_err
    });

    run("gelu", &mut |r, fault| {
        let x = rand_tensor(r, vec![12]);
        let w = rand_tensor(r, vec![12]);
        let rep = finite_diff_check_opts(
            |tape, xid| {
                let y = tape.gelu(xid);
                weighted_sum(tape, y, &w)
            },
            &x,
            step,
            tol,
            fault,
        )
        .unwrap();
        rep.max_rel_err
    });

    run("softplus", &mut |r, fault| {
        let x = rand_tensor(r, vec![12]);
        let w = rand_tensor(r, vec![12]);
        let rep = finite_diff_check_opts(
            |tape, xid| {
                let y = tape.softplus(xid);
                weighted_sum(tape, y, &w)
            },
            &x,
            step,
            tol,
            fault,
        )
        .unwrap();
        rep.max_rel_err
    });

    run("scale", &mut |r, fault| {
        let x = rand_tensor(r, vec![8]);
        let w = rand_tensor(r, vec![8]);
        let c = rng::uniform(r, -2.0, 2.0);
        let rep = finite_diff_check_opts(
            |tape, xid| {
                let y = tape.scale(xid, c);
                weighted_sum(tape, y, &w)
            },
            &x,
            step,
            tol,
            fault,
        )
        .unwrap();
        rep.max_rel_err
    });

    run("softmax", &mut |r, fault| {
        let x = rand_tensor(r, vec![2, 5]);
        let w = rand_tensor(r, vec![2, 5]);
        let rep = finite_diff_check_opts(
            |tape, xid| {
                let y = tape.softmax(xid, 1)?;
                weighted_sum(tape, y, &w)
            },
            &x,
            step,
            tol,
            fault,
        )
        .unwrap();
        rep.max_rel_err
    });

    for (name, which) in [
        ("layernorm d/dx", 0usize),
        ("layernorm d/dgain", 1),
        ("layernorm d/dbias", 2),
    ] {
        run(name, &mut |r, fault| {
            let x = rand_tensor(r, vec![3, 6]);
            let gain = rand_tensor(r, vec![6]);
            let bias = rand_tensor(r, vec![6]);
            let w = rand_tensor(r, vec![3, 6]);
            let probe = match which {
                0 => x.clone(),
                1 => gain.clone(),
                _ => bias.clone(),
            };
            let rep = finite_diff_check_opts(
                |tape, pid| {
                    let mk = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());
                    let (xi, gi, bi) = match which {
                        0 => {
                            let g = mk(tape, &gain);
                            let b = mk(tape, &bias);
                            (pid, g, b)
                        }
                        1 => {
                            let xi = mk(tape, &x);
                            let b = mk(tape, &bias);
                            (xi, pid, b)
                        }
                        _ => {
                            let xi = mk(tape, &x);
                            let g = mk(tape, &gain);
                            (xi, g, pid)
                        }
                    };
                    let y = tape.layernorm(xi, gi, bi, 1e-5)?;
                    weighted_sum(tape, y, &w)
                },
                &probe,
                step,
                tol,
                fault,
            )
            .unwrap();
            rep.max_rel_err
        });
    }

    run("mean_pool", &mut |r, fault| {
        let x = rand_tensor(r, vec![2, 5, 3]);
        let w = rand_tensor(r, vec![2, 3]);
        let rep = finite_diff_check_opts(
            |tape, xid| {
                let y = tape.mean_pool(xid, 1)?;
                weighted_sum(tape, y, &w)
            },
            &x,
            step,
            tol,
            fault,
        )
        .unwrap();
        rep.max_rel_err
    });

    run("slice+concat+reshape", &mut |r, fault| {
        let x = rand_tensor(r, vec![2, 6]);
        let w = rand_tensor(r, vec![4, 3]);
        let rep = finite_diff_check_opts(
            |tape, xid| {
                let a = tape.slice_last(xid, 0, 2)?;
                let b = tape.slice_last(xid, 2, 4)?;
                let bg = tape.gelu(b);
                let cat = tape.concat_last(&[a, bg])?;
                let rs = tape.reshape(cat, vec![4, 3])?;
                weighted_sum(tape, rs, &w)
            },
            &x,
            step,
            tol,
            fault,
        )
        .unwrap();
        rep.max_rel_err
    });

    entries
}
