// Scratch: per-loss-term gradient norms on the inter projections at init.

use fod::autodiff::Tape;
use fod::bank::{mean_bank, FeatureStack};
use fod::config::RunConfig;
use fod::correlation::{divergence_total, entropy_measure};
use fod::model::forward;
use fod::pipeline::{extract_set, init_models};
use fod::synth::generate_dataset;
use fod::training::reconstruction_loss;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.texture = fod::synth::TextureFamily::ValueNoise;
    let ds = generate_dataset(&cfg.synthetic_spec()).unwrap();
    let feats = extract_set(&ds.train, cfg.seed, cfg.feature_dim).unwrap();
    let stack = FeatureStack::from_sequences(&feats[0]).unwrap();
    let bank = mean_bank(&stack);
    let (_, model, mut store) = init_models(&cfg).unwrap().into_iter().next().unwrap();

    let grad_norm_for = |store: &mut fod::param::ParamStore, which: usize| -> (f64, f64) {
        store.zero_grads();
        let tape = Tape::new();
        let trace = forward(&tape, store, &feats[0][0], &bank, &model).unwrap();
        let loss = match which {
            0 => reconstruction_loss(&tape, trace.xhat, trace.x).unwrap(),
            1 => {
                let frozen: Vec<_> = trace.te.iter().map(|&t| tape.stop_gradient(t)).collect();
                let d = divergence_total(&tape, &frozen, &trace.se).unwrap();
                tape.scale(d, 0.5)
            }
            _ => tape.scale(entropy_measure(&tape, &trace.se).unwrap(), 0.5),
        };
        tape.backward_params(loss, store).unwrap();
        let mut wq_norm = 0.0;
        let mut wk_norm = 0.0;
        for h in &model.layers[0].inter_heads {
            wq_norm += store.get(h.wq).grad.data().iter().map(|g| g * g).sum::<f64>();
            wk_norm += store.get(h.wk).grad.data().iter().map(|g| g * g).sum::<f64>();
        }
        (wq_norm.sqrt(), wk_norm.sqrt())
    };

    for (name, which) in [("rec", 0), ("0.5*div_e(phase2)", 1), ("0.5*ent_e", 2)] {
        let (q, k) = grad_norm_for(&mut store, which);
        println!("{name:>20}: |dL/dWq_e| = {q:.5e}  |dL/dWk_e| = {k:.5e}");
    }
}
