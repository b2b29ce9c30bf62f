// Scratch diagnostic: inter-correlation behavior on the benchmark. Not part
// of the deliverable surface; run with `cargo run --release --example diag -- <run_dir>`.

use fod::autodiff::Tape;
use fod::config::RunConfig;
use fod::model::{extract_features, forward, Level};
use fod::pipeline::{load_banks, load_dataset, load_models};
use fod::scoring::{patch_scores, Criterion, EvalTrace};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let run_dir = args.get(1).map(String::as_str).unwrap_or("/tmp/fodtest/run_full");
    let data_dir = args.get(2).map(String::as_str).unwrap_or("/tmp/fodtest/data");
    let cfg = RunConfig::default();
    let data = load_dataset(std::path::Path::new(data_dir)).unwrap();
    let banks = load_banks(&std::path::Path::new(run_dir).join("bank.fodt")).unwrap();
    let models = load_models(
        &cfg,
        &std::path::Path::new(run_dir).join("model.fodt"),
        banks,
    )
    .unwrap();
    let rt = &models.levels[0]; // 8x
    assert_eq!(rt.level, Level::Eight);

    for idx in [0usize, 20, 21, 22] {
        let t = &data.test[idx];
        let (f8, _) = extract_features(&t.image, cfg.seed, cfg.feature_dim).unwrap();
        let geom = f8.geom;
        let bank = rt.bank.bank_for(&f8).unwrap();
        let tape = Tape::new();
        let trace = forward(&tape, &rt.store, &f8, &bank, &rt.model).unwrap();
        print!("img {idx} {:?}:", t.kind);
        for (k, se) in trace.se.iter().enumerate() {
            let sev = tape.value(*se);
            let n = sev.rows();
            let mut hits = 0;
            let mut dist = 0.0;
            let mut ent = 0.0;
            for i in 0..n {
                let row = sev.row(i);
                ent -= row
                    .iter()
                    .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                    .sum::<f64>();
                let am = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if am == i {
                    hits += 1;
                }
                let (r1, c1) = geom.position(i);
                let (r2, c2) = geom.position(am.min(n - 1));
                dist += ((r1 as f64 - r2 as f64).powi(2) + (c1 as f64 - c2 as f64).powi(2)).sqrt();
            }
            print!(
                " L{k}[hits {hits}/{n} d {:.2} H {:.2}]",
                dist / n as f64,
                ent / n as f64
            );
        }
        let eval = EvalTrace {
            x: tape.value(trace.x),
            xhat: tape.value(trace.xhat),
            te: trace.te.iter().map(|&v| tape.value(v)).collect(),
            se: trace.se.iter().map(|&v| tape.value(v)).collect(),
        };
        let div = patch_scores(&eval, Criterion::Div);
        let rec = patch_scores(&eval, Criterion::Rec);
        let mstat = |t: &fod::tensor::Tensor| {
            let mn = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let me = t.data().iter().sum::<f64>() / t.len() as f64;
            format!("{mn:.3}/{me:.3}/{mx:.3}")
        };
        println!(" div {} rec {}", mstat(&div), mstat(&rec));
    }
}
