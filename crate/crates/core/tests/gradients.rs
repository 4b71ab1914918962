//! Analytic gradients against central finite differences.

use fact_crs::corpus::{AttrSet, ItemId};
use fact_crs::embeddings::{
    bpr_term_grad, ce_term_grad, OptimizerConfig, PartitionProblem, TrainingExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn vec_in(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize) -> f64 {
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[k] += H;
    lo[k] -= H;
    (f(&hi) - f(&lo)) / (2.0 * H)
}

fn worst(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    (0..x.len())
        .map(|k| rel_err(analytic[k], central(f, x, k)))
        .fold(0.0, f64::max)
}

#[test]
fn cross_entropy_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max = 0.0f64;
    for _ in 0..50 {
        let d = rng.gen_range(1..6);
        let s = vec_in(&mut rng, d);
        let v = vec_in(&mut rng, d);
        let (_, ds, dv) = ce_term_grad(&s, &v);
        let v2 = v.clone();
        max = max.max(worst(&|x| ce_term_grad(x, &v2).0, &s, &ds));
        let s2 = s.clone();
        max = max.max(worst(&|x| ce_term_grad(&s2, x).0, &v, &dv));
    }
    assert!(max <= TOL, "max relative error {max:e}");
}

#[test]
fn bpr_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut max = 0.0f64;
    for _ in 0..50 {
        let d = rng.gen_range(1..6);
        let s = vec_in(&mut rng, d);
        let vt = vec_in(&mut rng, d);
        let vn = vec_in(&mut rng, d);
        let (_, ds, dvt, dvn) = bpr_term_grad(&s, &vt, &vn);
        let (a, b, c) = (s.clone(), vt.clone(), vn.clone());
        max = max.max(worst(&|x| bpr_term_grad(x, &b, &c).0, &s, &ds));
        max = max.max(worst(&|x| bpr_term_grad(&a, x, &c).0, &vt, &dvt));
        max = max.max(worst(&|x| bpr_term_grad(&a, &b, x).0, &vn, &dvn));
    }
    assert!(max <= TOL, "max relative error {max:e}");
}

fn random_examples(rng: &mut ChaCha8Rng, n_items: usize, count: usize) -> Vec<TrainingExample> {
    (0..count)
        .map(|_| {
            let item = rng.gen_range(0..n_items) as ItemId;
            let negatives = (0..rng.gen_range(0..3))
                .map(|_| loop {
                    let j = rng.gen_range(0..n_items) as ItemId;
                    if j != item {
                        break j;
                    }
                })
                .collect();
            TrainingExample {
                item,
                mentions: AttrSet::empty(1),
                negatives,
            }
        })
        .collect()
}

#[test]
fn full_split_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut max = 0.0f64;
    for _ in 0..50 {
        let d = rng.gen_range(1..5);
        let n_items = rng.gen_range(2..7);
        let count = rng.gen_range(1..9);
        let examples = random_examples(&mut rng, n_items, count);
        let cut = rng.gen_range(0..=count);
        let pos: Vec<usize> = (0..cut).collect();
        let neg: Vec<usize> = (cut..count).collect();
        let penalties = OptimizerConfig {
            lambda_bpr: rng.gen_range(0.0..1.0),
            lambda_s: rng.gen_range(0.0..0.5),
            lambda_v: rng.gen_range(0.0..0.5),
            ..Default::default()
        }
        .penalties();
        let problem = PartitionProblem::new(&examples, &pos, &neg, n_items, d, penalties);
        let rows = problem.touched_items().len() * d;
        let mut params = problem.initial_params(&fact_crs::embeddings::ItemEmbeddingTable::zeros(n_items, d));
        params.s_pos = vec_in(&mut rng, d);
        params.s_neg = vec_in(&mut rng, d);
        params.rows = vec_in(&mut rng, rows);
        let (_, grad) = problem.gradient(&params);

        // Flatten (s_pos, s_neg, rows) into one parameter vector.
        let flat: Vec<f64> = params
            .s_pos
            .iter()
            .chain(&params.s_neg)
            .chain(&params.rows)
            .copied()
            .collect();
        let analytic: Vec<f64> = grad
            .s_pos
            .iter()
            .chain(&grad.s_neg)
            .chain(&grad.rows)
            .copied()
            .collect();
        let template = params.clone();
        let f = |x: &[f64]| {
            let mut p = template.clone();
            p.s_pos.copy_from_slice(&x[..d]);
            p.s_neg.copy_from_slice(&x[d..2 * d]);
            p.rows.copy_from_slice(&x[2 * d..]);
            problem.objective(&p)
        };
        max = max.max(worst(&f, &flat, &analytic));
    }
    assert!(max <= TOL, "max relative error {max:e}");
}
