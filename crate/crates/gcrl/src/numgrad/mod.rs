//! Dense f64 tensor arithmetic with reverse-mode autodiff, Adam, and
//! learning-rate schedules. 64-bit floats throughout: the log-determinant
//! and finite-difference oracles need the headroom.

pub mod adam;
pub mod graph;
pub mod params;
pub mod rng;
pub mod schedule;

pub use adam::{adam_update, AdamState};
pub use graph::{Graph, GraphBuild, Tensor, TensorId};
pub use params::{Branch, ParamEntry, ParamStore, SlotId};
pub use rng::{derive_seed, derived_rng, seed_rng, RunRng};
pub use schedule::LrSchedule;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{finite_diff_grads, rel_err};
    use std::rc::Rc;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 1, vec![3.0], Branch::Adaptable);
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let y = g.mul(xn, xn);
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(x), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 1, vec![3.0], Branch::Adaptable);
        let mut g = Graph::new();
        let _xn = g.param(&store, x);
        let c = g.scalar_const(5.0);
        let y = g.mul_const(c, 2.0);
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(x), &[0.0]);
    }

    #[test]
    fn detached_path_stays_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 1, vec![2.0], Branch::Adaptable);
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let d = g.detach(xn);
        let y = g.mul(d, d);
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(x), &[0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 1, vec![3.0], Branch::Adaptable);
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let y = g.mul(xn, xn);
        g.backward(y, &mut store).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(x), &[12.0]);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 2, vec![1.0, 2.0], Branch::Adaptable);
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        assert!(g.backward(xn, &mut store).is_err());
    }

    /// One composed graph touching every op, validated against central
    /// finite differences. This is the gradient-soundness oracle for the
    /// engine itself; the model-level loss gets its own check.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = seed_rng(42);
        let mut store = ParamStore::new();
        let w = store.add("w", 4, 3, rng::normal_vec(&mut rng, 12, 0.7), Branch::Adaptable);
        let b = store.add("b", 1, 3, rng::normal_vec(&mut rng, 3, 0.5), Branch::Adaptable);
        let u = store.add("u", 6, 4, rng::normal_vec(&mut rng, 24, 0.6), Branch::Adaptable);
        let s = store.add("s", 1, 3, rng::normal_vec(&mut rng, 3, 0.4), Branch::ZBranch);

        let groups = Rc::new(vec![0usize, 0, 0, 1, 1, 1]);
        let picks = Rc::new(vec![1usize, 4, 2]);

        let build = |store: &ParamStore| -> (Graph, TensorId) {
            let mut g = Graph::new();
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let un = g.param(store, u);
            let sn = g.param(store, s);

            let h = g.matmul(un, wn); // 6x3
            let h = g.add_row(h, bn);
            let h = g.mul_row(h, sn);
            let t = g.tanh(h);
            let sg = g.sigmoid(h);
            let lr = g.leaky_relu(h, 0.2);
            let mix = g.add(t, sg);
            let mix = g.sub(mix, lr);
            let e = g.exp(mix);
            let e1 = g.add_const(e, 1.5);
            let l = g.ln(e1);
            let cl = g.clamp(l, -0.8, 0.8);
            let q = g.mul(cl, cl);
            let d = g.div(q, e1);
            let cm = g.group_co_mean(d, groups.clone());
            let cat = g.concat_cols(&[d, cm]); // 6x6
            let sl = g.slice_cols(cat, 1, 4); // 6x4
            let cs = g.cumsum_pairs(sl);
            let rep = g.repeat_rows(cs, 2); // 12x4
            let rs = g.reshape(rep, 6, 8);
            let lse = g.logsumexp_row(rs); // 6x1
            let rm = g.row_mean(rs);
            let both = g.concat_cols(&[lse, rm]);
            let sel = g.select_rows(both, picks.clone()); // 3x2
            let rsum = g.row_sum(sel);
            let m1 = g.mean_all(rsum);
            let s1 = g.sum_all(cs);
            let s1 = g.mul_const(s1, 0.05);
            let loss = g.add(m1, s1);
            (g, loss)
        };

        let (mut g, loss) = build(&store);
        store.zero_grads();
        g.backward(loss, &mut store).unwrap();
        let ad: Vec<Vec<f64>> = store.slots().map(|sl| store.grad(sl).to_vec()).collect();

        let fd = finite_diff_grads(&mut store, 1e-5, |st| {
            let (g, l) = build(st);
            g.scalar(l)
        });

        for (slot, (a, f)) in ad.iter().zip(&fd).enumerate() {
            for (i, (&ai, &fi)) in a.iter().zip(f).enumerate() {
                assert!(
                    rel_err(ai, fi) < 1e-4,
                    "slot {slot} idx {i}: autodiff {ai} vs fd {fi}"
                );
            }
        }
    }

    #[test]
    fn deterministic_values_and_grads() {
        let run = || {
            let mut rng = seed_rng(9);
            let mut store = ParamStore::new();
            let w = store.add("w", 3, 3, rng::normal_vec(&mut rng, 9, 1.0), Branch::Adaptable);
            let mut g = Graph::new();
            let wn = g.param(&store, w);
            let h = g.matmul(wn, wn);
            let t = g.tanh(h);
            let l = g.sum_all(t);
            g.backward(l, &mut store).unwrap();
            (g.scalar(l).to_bits(), store.grad(w).iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
