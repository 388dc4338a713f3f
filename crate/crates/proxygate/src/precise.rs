//! Double-double evaluation of the proxy network for finite differences.
//!
//! A central difference at step `h` carries roundoff of roughly
//! `eps * |L| / h`; in `f64` that swamps gradient entries near 1e-8. The
//! forward pass here keeps about 32 significant digits instead.

use proxygate_core::ProxyParams;
use twofloat::TwoFloat;

/// `grad_logits · logits + grad_value · value` in double-double precision.
pub fn probe(p: &ProxyParams, f: &[f64], grad_logits: [f64; 2], grad_value: f64) -> TwoFloat {
    let trunk: Vec<TwoFloat> = (0..p.h)
        .map(|j| {
            let row = &p.w1[j * p.d..(j + 1) * p.d];
            let z = row
                .iter()
                .zip(f)
                .fold(TwoFloat::from(p.b1[j]), |acc, (&w, &x)| {
                    acc + TwoFloat::new_mul(w, x)
                });
            z.tanh()
        })
        .collect();
    let head = |row: &[f64], b: f64| {
        row.iter()
            .zip(&trunk)
            .fold(TwoFloat::from(b), |acc, (&w, &t)| acc + t * w)
    };
    let l0 = head(&p.w_act[..p.h], p.b_act[0]);
    let l1 = head(&p.w_act[p.h..], p.b_act[1]);
    let v = head(&p.w_val, p.b_val);
    l0 * grad_logits[0] + l1 * grad_logits[1] + v * grad_value
}

/// Secant slope for [`proxygate_core::proxy::gradient_check_with`].
pub fn slope(
    f: &[f64],
    grad_logits: [f64; 2],
    grad_value: f64,
) -> impl Fn(&ProxyParams, &ProxyParams, f64, f64) -> f64 + '_ {
    move |up, down, x_up, x_down| {
        let rise = probe(up, f, grad_logits, grad_value) - probe(down, f, grad_logits, grad_value);
        let run = TwoFloat::from(x_up) - TwoFloat::from(x_down);
        f64::from(rise / run)
    }
}
