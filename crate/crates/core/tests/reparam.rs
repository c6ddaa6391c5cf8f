mod common;

use proptest::prelude::*;
use qelim_core::attention::{blockwise_product, causal_block_softmax, mha_scores, AttnWeights, HeadLayout};
use qelim_core::linalg::{gaussian_matrix, invert};
use qelim_core::model::{forward, random_model, ArchConfig, LmHead, NormMode, Sharing, SkipMode, TokenSeq};
use qelim_core::reparam::{
    eliminate_query_attn_skip, eliminate_query_weight_shared, merge_qk_single_head, reparametrize_triplet,
    verify_equivalence, EliminationMode, EliminationOptions,
};
use qelim_core::{Error, Matrix, Rng};

fn conditioned(d: usize, max_cond: f64, rng: &mut Rng) -> Matrix {
    loop {
        let a = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), rng).unwrap();
        if common::svd_cond(&a) <= max_cond {
            return a;
        }
    }
}

fn lemma_gap(d: usize, heads: usize, n: usize, rng: &mut Rng) -> f64 {
    let layout = HeadLayout::new(d, heads).unwrap();
    let wq = conditioned(d, 100.0, rng);
    let wk = gaussian_matrix(d, d, 1.0, rng).unwrap();
    let wv = gaussian_matrix(d, d, 1.0, rng).unwrap();
    let (theta, wk2, wv2) = reparametrize_triplet(&wq, &wk, &wv).unwrap();
    let x = gaussian_matrix(n, d, 1.0, rng).unwrap();
    let lhs = common::naive_scores(&x, &wq, &wk, &wv, heads, layout.default_scale());
    let xt = x.matmul(&theta).unwrap();
    let rw = AttnWeights::new(Matrix::identity(d), wk2, wv2, Matrix::identity(d)).unwrap();
    let rhs = mha_scores(&xt, &rw, &layout, layout.default_scale()).unwrap();
    lhs.max_abs_diff(&rhs).unwrap()
}

#[test]
fn lemma_holds_on_random_d8() {
    let mut rng = Rng::seed_from(1);
    for _ in 0..100 {
        assert!(lemma_gap(8, 2, 6, &mut rng) <= 1e-10);
    }
}

#[test]
fn merged_single_head_agrees() {
    let d = 6;
    let layout = HeadLayout::new(d, 1).unwrap();
    let mut rng = Rng::seed_from(2);
    let g = |rng: &mut Rng| gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), rng).unwrap();
    let w = AttnWeights::new(g(&mut rng), g(&mut rng), g(&mut rng), g(&mut rng)).unwrap();
    let merged = merge_qk_single_head(&w.w_q, &w.w_k).unwrap();
    let wm = AttnWeights::new(Matrix::identity(d), merged, w.w_v.clone(), w.w_o.clone()).unwrap();
    for _ in 0..100 {
        let x = gaussian_matrix(5, d, 1.0, &mut rng).unwrap();
        let a = qelim_core::attention::attn_forward(&x, &w, &layout, 0.5).unwrap();
        let b = qelim_core::attention::attn_forward(&x, &wm, &layout, 0.5).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-11);

        let probs = |q: &Matrix, k: &Matrix| {
            let logits = blockwise_product(&x.matmul(q).unwrap(), &x.matmul(k).unwrap().transpose(), &layout).unwrap();
            causal_block_softmax(&logits).unwrap().remove(0)
        };
        let pa = probs(&w.w_q, &w.w_k);
        let pb = probs(&wm.w_q, &wm.w_k);
        for i in 0..5 {
            let arg = |p: &Matrix| (0..=i).max_by(|&a, &b| p[(i, a)].total_cmp(&p[(i, b)])).unwrap();
            assert_eq!(arg(&pa), arg(&pb));
        }
    }
}

fn attn_only(d: usize, h: usize, layers: usize, vocab: usize, max_seq: usize, tied: bool) -> ArchConfig {
    ArchConfig { tied_lm_head: tied, ..ArchConfig::new(HeadLayout::new(d, h).unwrap(), layers, vocab, max_seq) }
}

fn shared_both(d: usize, h: usize, layers: usize, vocab: usize, max_seq: usize, tied: bool) -> ArchConfig {
    ArchConfig { skips: SkipMode::Both, sharing: Sharing::Shared, ..attn_only(d, h, layers, vocab, max_seq, tied) }
}

fn max_err_fixed_len(
    a: &qelim_core::model::ModelWeights,
    ca: &ArchConfig,
    b: &qelim_core::model::ModelWeights,
    cb: &ArchConfig,
    len: usize,
    trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = Rng::seed_from(seed);
    (0..trials)
        .map(|_| {
            let t = TokenSeq::random(len, ca, &mut rng).unwrap();
            common::max_rel_diff(&forward(&t, a, ca).unwrap(), &forward(&t, b, cb).unwrap())
        })
        .fold(0.0, f64::max)
}

#[test]
fn attn_skip_small_untied() {
    let c = attn_only(4, 2, 1, 7, 6, false);
    let m = random_model(&c, &mut Rng::seed_from(3), 100.0).unwrap();
    let out = eliminate_query_attn_skip(&m, &c, &EliminationOptions::default()).unwrap();
    assert!(max_err_fixed_len(&m, &c, &out.weights, &out.config, 6, 50, 30) <= 1e-9);
    assert_eq!(out.report.mode, EliminationMode::AttnSkipOnly);
    assert!(!out.report.original_tied);
}

#[test]
fn attn_skip_tied_three_layers() {
    let c = attn_only(16, 4, 3, 20, 8, true);
    let m = random_model(&c, &mut Rng::seed_from(4), 100.0).unwrap();
    let out = eliminate_query_attn_skip(&m, &c, &EliminationOptions::default()).unwrap();
    assert!(!out.config.tied_lm_head);
    assert!(matches!(out.weights.lm_head, LmHead::Untied(_)));
    assert!(out.report.original_tied);
    assert!(max_err_fixed_len(&m, &c, &out.weights, &out.config, 8, 50, 40) <= 1e-8);
    for b in &out.weights.blocks {
        assert_eq!(b.attn.w_q, Matrix::identity(16));
    }
}

#[test]
fn attn_skip_weights_follow_recurrences() {
    for tied in [false, true] {
        let c = attn_only(6, 3, 2, 5, 4, tied);
        let m = random_model(&c, &mut Rng::seed_from(5), 100.0).unwrap();
        let r = eliminate_query_attn_skip(&m, &c, &EliminationOptions { verify_trials: 0, ..Default::default() })
            .unwrap()
            .weights;
        let t1 = &m.blocks[0].attn.w_q;
        let t2 = &m.blocks[1].attn.w_q;
        let t3 = if tied { invert(&t1.transpose()).unwrap() } else { Matrix::identity(6) };
        let close = |a: &Matrix, b: &Matrix| assert!(a.max_abs_diff(b).unwrap() <= 1e-10 * (1.0 + b.max_abs()));
        close(&r.e, &common::naive_matmul(&m.e, t1));
        close(&r.e_p, &common::naive_matmul(&m.e_p, t1));
        for (i, (ti, tn)) in [(t1, t2), (t2, &t3)].into_iter().enumerate() {
            let inv = invert(ti).unwrap();
            let (b, rb) = (&m.blocks[i], &r.blocks[i]);
            close(&rb.attn.w_k, &common::naive_matmul(&inv, &b.attn.w_k));
            close(&rb.attn.w_v, &common::naive_matmul(&inv, &b.attn.w_v));
            close(&rb.attn.w_o, &common::naive_matmul(&b.attn.w_o, ti));
            close(&rb.w_up, &common::naive_matmul(&inv, &b.w_up));
            close(&rb.w_down, &common::naive_matmul(&b.w_down, tn));
        }
        let want_lm = if tied { common::naive_matmul(&t1.transpose(), &m.e.transpose()) } else { m.lm_head_matrix() };
        close(&r.lm_head_matrix(), &want_lm);
    }
}

#[test]
fn weight_shared_depth_four() {
    let c = shared_both(8, 2, 4, 10, 6, false);
    let m = random_model(&c, &mut Rng::seed_from(6), 100.0).unwrap();
    let out = eliminate_query_weight_shared(&m, &c, &EliminationOptions::default()).unwrap();
    assert_eq!(out.report.mode, EliminationMode::WeightShared);
    assert!(max_err_fixed_len(&m, &c, &out.weights, &out.config, 6, 50, 60) <= 1e-8);
}

#[test]
fn weight_shared_reduction_telescopes_across_depths() {
    let c4 = shared_both(8, 2, 4, 10, 6, true);
    let m = random_model(&c4, &mut Rng::seed_from(7), 100.0).unwrap();
    let out =
        eliminate_query_weight_shared(&m, &c4, &EliminationOptions { verify_trials: 0, ..Default::default() }).unwrap();
    for depth in [1, 4, 7] {
        let orig = ArchConfig { n_layers: depth, ..c4.clone() };
        let red = ArchConfig { n_layers: depth, ..out.config.clone() };
        assert!(verify_equivalence(&m, &orig, &out.weights, &red, 30, 6, 8).unwrap() <= 1e-8, "depth {depth}");
    }
}

#[test]
fn identity_query_shared_is_identity_transform() {
    let c = shared_both(4, 2, 2, 5, 4, false);
    let mut m = random_model(&c, &mut Rng::seed_from(9), 100.0).unwrap();
    m.blocks[0].attn.w_q = Matrix::identity(4);
    let out = eliminate_query_weight_shared(&m, &c, &EliminationOptions::default()).unwrap();
    assert_eq!(out.weights, m);
}

#[test]
fn verify_detects_small_perturbation() {
    let c = attn_only(8, 2, 2, 9, 6, false);
    let m = random_model(&c, &mut Rng::seed_from(10), 100.0).unwrap();
    let mut p = m.clone();
    p.blocks[1].w_down[(3, 2)] += 1e-3;
    assert!(verify_equivalence(&m, &c, &p, &c, 20, 6, 1).unwrap() > 1e-6);
    let mut q = m.clone();
    q.blocks[0].attn.w_q[(0, 0)] += 1e-3;
    assert!(verify_equivalence(&m, &c, &q, &c, 20, 6, 1).unwrap() > 1e-6);
}

#[test]
fn verify_rejects_incompatible_models() {
    let a = attn_only(4, 1, 1, 5, 4, false);
    let b = attn_only(4, 1, 1, 6, 4, false);
    let ma = random_model(&a, &mut Rng::seed_from(0), 100.0).unwrap();
    let mb = random_model(&b, &mut Rng::seed_from(0), 100.0).unwrap();
    assert!(matches!(verify_equivalence(&ma, &a, &mb, &b, 1, 4, 0), Err(Error::ConfigMismatch(_))));
}

#[test]
fn eliminations_reject_out_of_scope_configs() {
    let opts = EliminationOptions::default();
    let ln = ArchConfig { norm: NormMode::LayerNorm { eps: 1e-5 }, ..attn_only(4, 2, 1, 5, 4, false) };
    let m = random_model(&ln, &mut Rng::seed_from(1), 100.0).unwrap();
    assert!(matches!(eliminate_query_attn_skip(&m, &ln, &opts), Err(Error::ConfigMismatch(_))));

    let shared_attn_only = ArchConfig { sharing: Sharing::Shared, ..attn_only(4, 2, 2, 5, 4, false) };
    let m = random_model(&shared_attn_only, &mut Rng::seed_from(1), 100.0).unwrap();
    assert!(matches!(eliminate_query_attn_skip(&m, &shared_attn_only, &opts), Err(Error::ConfigMismatch(_))));
    assert!(matches!(eliminate_query_weight_shared(&m, &shared_attn_only, &opts), Err(Error::ConfigMismatch(_))));
}

#[test]
fn ill_conditioned_query_is_rejected() {
    let c = attn_only(4, 2, 1, 5, 4, false);
    let mut m = random_model(&c, &mut Rng::seed_from(2), 100.0).unwrap();
    m.blocks[0].attn.w_q = Matrix::from_diag(&[1.0, 1.0, 1.0, 1e-6]);
    assert!(matches!(
        eliminate_query_attn_skip(&m, &c, &EliminationOptions::default()),
        Err(Error::SingularMatrix { .. })
    ));
}

#[test]
fn halved_logit_scale_is_preserved() {
    let mut c = attn_only(8, 2, 2, 9, 6, true);
    c.attn_scale = 0.5 * c.layout.default_scale();
    let m = random_model(&c, &mut Rng::seed_from(11), 100.0).unwrap();
    let out = eliminate_query_attn_skip(&m, &c, &EliminationOptions::default()).unwrap();
    assert_eq!(out.config.attn_scale, c.attn_scale);
    assert!(out.report.max_logit_rel_err.unwrap() <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lemma_property(seed in any::<u64>(), dk in 1usize..9, heads in 1usize..5, n in 1usize..17) {
        let d = (dk * heads).min(32);
        let heads = if d % heads == 0 { heads } else { 1 };
        prop_assert!(lemma_gap(d, heads, n, &mut Rng::seed_from(seed)) <= 1e-10);
    }

    #[test]
    fn attn_skip_equivalence(seed in any::<u64>(), layers in 1usize..4, tied in any::<bool>(), halve in any::<bool>()) {
        let mut c = attn_only(8, 2, layers, 13, 8, tied);
        if halve {
            c.attn_scale *= 0.5;
        }
        let m = random_model(&c, &mut Rng::seed_from(seed), 100.0).unwrap();
        let opts = EliminationOptions { verify_trials: 10, seed, ..Default::default() };
        let out = eliminate_query_attn_skip(&m, &c, &opts).unwrap();
        prop_assert!(out.report.max_logit_rel_err.unwrap() <= 1e-8);
        prop_assert_eq!(out.report.per_layer_cond.len(), layers);
        prop_assert!(out.report.per_layer_cond.iter().all(|&k| k <= 100.0 * (1.0 + 1e-9)));
    }

    #[test]
    fn weight_shared_equivalence(seed in any::<u64>(), depth in prop::sample::select(vec![1usize, 2, 4]), tied in any::<bool>()) {
        let c = shared_both(8, 2, depth, 13, 8, tied);
        let m = random_model(&c, &mut Rng::seed_from(seed), 100.0).unwrap();
        let opts = EliminationOptions { verify_trials: 10, seed, ..Default::default() };
        let out = eliminate_query_weight_shared(&m, &c, &opts).unwrap();
        prop_assert!(out.report.max_logit_rel_err.unwrap() <= 1e-8);
    }

    #[test]
    fn elimination_is_idempotent(seed in any::<u64>(), layers in 1usize..4, tied in any::<bool>()) {
        let c = attn_only(8, 2, layers, 7, 5, tied);
        let m = random_model(&c, &mut Rng::seed_from(seed), 100.0).unwrap();
        let opts = EliminationOptions { verify_trials: 0, ..Default::default() };
        let once = eliminate_query_attn_skip(&m, &c, &opts).unwrap();
        let twice = eliminate_query_attn_skip(&once.weights, &once.config, &opts).unwrap();
        let pairs = [
            (&once.weights.e, &twice.weights.e),
            (&once.weights.e_p, &twice.weights.e_p),
        ];
        for (a, b) in pairs {
            prop_assert!(a.max_abs_diff(b).unwrap() <= 1e-12);
        }
        for (a, b) in once.weights.blocks.iter().zip(&twice.weights.blocks) {
            for (x, y) in [(&a.attn.w_k, &b.attn.w_k), (&a.attn.w_v, &b.attn.w_v), (&a.attn.w_o, &b.attn.w_o), (&a.w_up, &b.w_up), (&a.w_down, &b.w_down)] {
                prop_assert!(x.max_abs_diff(y).unwrap() <= 1e-12);
            }
        }
        prop_assert!(once.weights.lm_head_matrix().max_abs_diff(&twice.weights.lm_head_matrix()).unwrap() <= 1e-12);
    }
}
