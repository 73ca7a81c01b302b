mod common;

use common::*;
use proptest::prelude::*;
use pulse_core::autodiff::{Graph, Tensor, Var};
use pulse_core::losses::{alignment_hinge, decorrelation, final_embedding_kd, hidden_kd, reconstruction_mse, LossWeights};
use pulse_core::mae::make_mask_plan;

fn mat(b: usize, d: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), b)
}

/// 2–4 modalities of `[b, d]` embeddings.
fn modalities() -> impl Strategy<Value = Vec<Mat>> {
    (2usize..=4, 2usize..=5, 2usize..=6).prop_flat_map(|(m, b, d)| prop::collection::vec(mat(b, d), m))
}

fn tokens(b: usize, s: usize, d: usize) -> impl Strategy<Value = Tokens> {
    prop::collection::vec(prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), s), b)
}

fn hinge_lib(mods: &[Mat], alpha: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let (b, d) = (mods[0].len(), mods[0][0].len());
    let vars: Vec<Var> = mods.iter().map(|m| g.constant(to_tensor(m, &[b, d]))).collect();
    let out = alignment_hinge(&mut g, &vars, alpha).unwrap();
    value(&g, out.loss)
}

fn tokens_var(g: &mut Graph<f64>, t: &Tokens) -> Var {
    let (b, s, d) = (t.len(), t[0].len(), t[0][0].len());
    let flat: Vec<f64> = t.iter().flatten().flatten().copied().collect();
    g.constant(Tensor::new(vec![b, s, d], flat).unwrap())
}

proptest! {
    #[test]
    fn hinge_matches_scalar_oracle(mods in modalities(), alpha in 0.0f64..0.5) {
        prop_assert!(rel_err(hinge_lib(&mods, alpha), hinge(&mods, alpha)) < 1e-6 || hinge(&mods, alpha) < 1e-12);
    }

    #[test]
    fn hinge_ignores_common_rescaling(mods in modalities(), alpha in 0.0f64..0.5) {
        let scaled: Vec<Mat> = mods.iter().map(|m| m.iter().map(|r| r.iter().map(|v| 3.0 * v).collect()).collect()).collect();
        prop_assert!((hinge_lib(&scaled, alpha) - hinge_lib(&mods, alpha)).abs() < 1e-5);
    }

    #[test]
    fn hinge_is_symmetric_in_modality_order(mut mods in modalities(), alpha in 0.0f64..0.5, rot in 1usize..4) {
        let before = hinge_lib(&mods, alpha);
        let k = rot % mods.len();
        mods.rotate_left(k);
        mods.swap(0, 1);
        prop_assert!((hinge_lib(&mods, alpha) - before).abs() < 1e-12);
    }

    #[test]
    fn kd_terms_lie_in_zero_two(f in tokens(2, 3, 4), t in tokens(2, 3, 4)) {
        let mut g = Graph::<f64>::new();
        let (fv, tv) = (tokens_var(&mut g, &f), tokens_var(&mut g, &t));
        let h = hidden_kd(&mut g, &[fv], &[tv]).unwrap();
        let e = final_embedding_kd(&mut g, fv, tv).unwrap();
        for v in [value(&g, h), value(&g, e)] {
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v), "{}", v);
        }
        prop_assert!((value(&g, h) - hidden_kd_oracle(&f, &t)).abs() < 1e-9);
        prop_assert!((value(&g, e) - final_kd(&f, &t)).abs() < 1e-9);
    }

    #[test]
    fn decorrelation_matches_covariance_loop(s in mat(8, 4), p in mat(8, 3)) {
        let mut g = Graph::<f64>::new();
        let (sv, pv) = (g.constant(to_tensor(&s, &[8, 4])), g.constant(to_tensor(&p, &[8, 3])));
        let d = decorrelation(&mut g, sv, pv);
        prop_assert!(value(&g, d) >= 0.0);
        prop_assert!((value(&g, d) - common::decorrelation(&s, &p)).abs() < 1e-12);
    }

    #[test]
    fn masked_mse_matches_double_loop(x in mat(3, 24), y in mat(3, 24), ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let plan = make_mask_plan(6, ratio, seed);
        let mut g = Graph::<f64>::new();
        let (xv, yv) = (g.constant(to_tensor(&x, &[3, 24])), g.constant(to_tensor(&y, &[3, 24])));
        let l = reconstruction_mse(&mut g, xv, yv, &plan, 4);
        prop_assert!((value(&g, l) - masked_mse(&x, &y, &plan.masked, 4)).abs() < 1e-12);
    }

    #[test]
    fn weighted_totals_are_linear(a in 0.0f64..2.0, r in 0.0f64..2.0, k in 0.0f64..3.0) {
        let w = LossWeights::default();
        prop_assert!((w.pretrain_total(k * a, k * r) - k * w.pretrain_total(a, r)).abs() < 1e-12);
        prop_assert!((w.kd_total(a, r, a, r) - (a + r + 0.1 * a)).abs() < 1e-12);
    }
}

fn hidden_kd_oracle(f: &Tokens, t: &Tokens) -> f64 {
    common::hidden_kd(std::slice::from_ref(f), std::slice::from_ref(t))
}
