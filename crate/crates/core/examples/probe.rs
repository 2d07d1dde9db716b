use hpclement::study::*;
fn main() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Approximation);
    cfg.k_max = 3;
    cfg.levels = vec![2, 3, 4, 5, 6];
    cfg.targets.r = 4.0;
    let rep = run(&cfg).unwrap();
    for r in &rep.rows { println!("level {} h {:.4e} err {:.6e}", r.level, r.h, r.value); }
    println!("{:?}", rep.rate);
}
