// Scratch: print one S^e row against its T^e target after training.

use fod::autodiff::Tape;
use fod::config::RunConfig;
use fod::model::extract_features;
use fod::model::forward;
use fod::pipeline::{load_banks, load_dataset, load_models};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let run_dir = args.get(1).map(String::as_str).unwrap_or("/tmp/fodtest/runX2");
    let data_dir = args.get(2).map(String::as_str).unwrap_or("/tmp/fodtest/datan");
    let cfg = RunConfig::default();
    let data = load_dataset(std::path::Path::new(data_dir)).unwrap();
    let banks = load_banks(&std::path::Path::new(run_dir).join("bank.fodt")).unwrap();
    let models = load_models(
        &cfg,
        &std::path::Path::new(run_dir).join("model.fodt"),
        banks,
    )
    .unwrap();
    let rt = &models.levels[0];

    // A normal TRAINING image: content at position p should match bank at p.
    let (f8, _) = extract_features(&data.train[0], cfg.seed, cfg.feature_dim).unwrap();
    let bank = rt.bank.bank_for(&f8).unwrap();

    // How well does raw feature similarity identify position?
    let mut raw_hits = 0;
    for i in 0..64 {
        let q = f8.features.row(i);
        let mut best = (0usize, f64::INFINITY);
        for j in 0..bank.features.rows() {
            let d = fod::tensor::euclidean_distance(q, bank.features.row(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        if best.0 == i {
            raw_hits += 1;
        }
    }
    println!("raw feature nearest-bank self-hits: {raw_hits}/64");

    let tape = Tape::new();
    let trace = forward(&tape, &rt.store, &f8, &bank, &rt.model).unwrap();
    for k in 0..trace.se.len() {
        let se = tape.value(trace.se[k]);
        let te = tape.value(trace.te[k]);
        let row = 27;
        let fmt = |r: &[f64]| -> String {
            r.iter().map(|v| format!("{:.3}", v)).collect::<Vec<_>>().join(" ")
        };
        println!("L{k} T^e[27]: {}", fmt(&te.row(row)[19..36]));
        println!("L{k} S^e[27]: {}", fmt(&se.row(row)[19..36]));
        let am = se
            .row(row)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        println!("L{k} argmax at {} (want 27), p={:.4}", am.0, am.1);
    }
}
