use nester::features::StructuredWeights;
use nester::glyph::{render_glyph, NoiseConfig};
use nester::gradcheck::{check_soft_margin, GradCheckReport};
use nester::nn::{CnnConfig, CnnParams};
use nester::solver::{for_each_valid, Split};
use nester::symbol::Symbol;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn valid_sequences(m: usize) -> Vec<Vec<Symbol>> {
    let mut all = Vec::new();
    for_each_valid(&Split::enumerate(m, 2), |y| all.push(y.to_vec()));
    all
}

/// He init with non-zero biases, so blank regions are not parked on a ReLU kink.
fn random_params(rng: &mut ChaCha8Rng) -> CnnParams {
    let mut p = CnnParams::init(&CnnConfig::default(), rng);
    for t in [&mut p.conv1_bias, &mut p.conv2_bias, &mut p.dense_bias, &mut p.output_bias] {
        for v in t.data_mut() {
            *v = rng.random_range(-0.1..0.3);
        }
    }
    p
}

#[test]
fn soft_margin_gradient_reaches_every_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let noise = NoiseConfig { flip_prob: 0.05, max_shift: 1 };
    let mut report = GradCheckReport::default();
    for i in 0..50 {
        let m = 5 + i % 3;
        let pool = valid_sequences(m);
        let gold = pool.choose(&mut rng).unwrap().clone();
        let y_star = pool.choose(&mut rng).unwrap().clone();
        let x: Vec<_> = gold.iter().map(|s| render_glyph(s.id(), &noise, &mut rng).unwrap()).collect();
        let mut w = StructuredWeights::zeros();
        for v in w.values_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let params = random_params(&mut rng);
        report.merge(check_soft_margin(&params, &w, &x, &gold, &y_star, 3, 1e-4, 1e-4, 1e-6, &mut rng).unwrap());
    }
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
    assert!(report.declined * 2 < report.checked, "{report:?}");
    assert!(report.starved.len() <= 20, "{:#?}", report.starved);
    eprintln!(
        "checked {}, declined {}, starved {}, max relative error {:e}",
        report.checked,
        report.declined,
        report.starved.len(),
        report.max_rel_error
    );
}
