//! End-to-end pipeline shared by the command-line tool and the acceptance
//! suite: dataset IO, per-level feature extraction, bank construction and
//! serialization, training, checkpointing, scoring and the ablation grid.

use std::fs;
use std::path::Path;

use crate::autodiff::Tape;
use crate::bank::{build_bank_source, BankKind, BankSource, FeatureStack, ReferenceBank};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{extract_features, forward, FeatureSequence, Level, LevelModel};
use crate::param::ParamStore;
use crate::rng::derive_seed;
use crate::scoring::{
    auroc, fuse_levels, image_score, level_range, patch_scores, smooth_map, to_map, AnomalyMap,
    Criterion, EvalRecord, EvalTrace,
};
use crate::synth::{generate_dataset, AnomalyKind};
use crate::tensor::Tensor;
use crate::tensorfile::{find_entry, read_container, read_tensor, write_container, write_tensor};
use crate::training::{train_level, EpochStats, OptMode, TrainSettings};

const SEED_TAG_MODEL: u64 = 0x6d6f_6465;
const SEED_TAG_BANK: u64 = 0x6261_6e6b;

#[derive(Clone, Debug)]
pub struct TestImage {
    pub id: String,
    pub image: Tensor,
    pub label: u8,
    pub mask: Tensor,
    pub kind: Option<AnomalyKind>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub train: Vec<Tensor>,
    pub test: Vec<TestImage>,
}

// ---- dataset IO ---------------------------------------------------------

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_dataset(&cfg.synthetic_spec())?;
    let train_dir = out.join("train");
    let test_dir = out.join("test");
    fs::create_dir_all(&train_dir)?;
    fs::create_dir_all(&test_dir)?;
    for (i, img) in ds.train.iter().enumerate() {
        write_tensor(&train_dir.join(format!("img_{i:04}.fodt")), img)?;
    }
    let mut labels = String::from("id,label,kind\n");
    for (i, t) in ds.test.iter().enumerate() {
        let id = format!("img_{i:04}");
        write_tensor(&test_dir.join(format!("{id}.fodt")), &t.image)?;
        write_tensor(&test_dir.join(format!("mask_{i:04}.fodt")), &t.mask)?;
        let kind = t.kind.map(|k| k.as_str()).unwrap_or("none");
        labels.push_str(&format!("{id},{},{kind}\n", t.label));
    }
    fs::write(test_dir.join("labels.csv"), labels)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let train_dir = dir.join("train");
    let test_dir = dir.join("test");
    let mut train_files: Vec<_> = fs::read_dir(&train_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "fodt").unwrap_or(false))
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::config(format!(
            "no training images under {}",
            train_dir.display()
        )));
    }
    let train = train_files
        .iter()
        .map(|p| read_tensor(p))
        .collect::<Result<Vec<_>>>()?;

    let labels_text = fs::read_to_string(test_dir.join("labels.csv"))?;
    let mut test = Vec::new();
    for (lineno, line) in labels_text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::config(format!("labels.csv line {}: bad row", lineno + 1)));
        }
        let id = fields[0].to_string();
        let label: u8 = fields[1]
            .parse()
            .map_err(|_| Error::config(format!("labels.csv line {}: bad label", lineno + 1)))?;
        let kind = match fields[2] {
            "none" => None,
            k => Some(AnomalyKind::parse(k)?),
        };
        let index = id.trim_start_matches("img_");
        let image = read_tensor(&test_dir.join(format!("{id}.fodt")))?;
        let mask = read_tensor(&test_dir.join(format!("mask_{index}.fodt")))?;
        test.push(TestImage {
            id,
            image,
            label,
            mask,
            kind,
        });
    }
    if test.is_empty() {
        return Err(Error::config("labels.csv lists no test images"));
    }
    Ok(LoadedDataset { train, test })
}

// ---- features & banks ---------------------------------------------------

/// Per-level feature sequences for a set of images, in [`Level::ALL`] order.
pub fn extract_set(
    images: &[Tensor],
    seed: u64,
    feature_dim: usize,
) -> Result<[Vec<FeatureSequence>; 2]> {
    let mut eight = Vec::with_capacity(images.len());
    let mut sixteen = Vec::with_capacity(images.len());
    for img in images {
        let (f8, f16) = extract_features(img, seed, feature_dim)?;
        eight.push(f8);
        sixteen.push(f16);
    }
    Ok([eight, sixteen])
}

pub fn build_banks(
    cfg: &RunConfig,
    kind: BankKind,
    train_features: &[Vec<FeatureSequence>; 2],
) -> Result<Vec<(Level, BankSource)>> {
    let mut out = Vec::with_capacity(2);
    for (idx, level) in Level::ALL.iter().enumerate() {
        let stack = FeatureStack::from_sequences(&train_features[idx])?;
        let source = build_bank_source(
            kind,
            &stack,
            cfg.coreset_budget.min(stack.images * stack.geom.patch_count()),
            cfg.nearest_window,
            cfg.prototypes_per_position,
            cfg.prototype_iters,
            cfg.codebook_size.min(stack.images * stack.geom.patch_count()),
            cfg.codebook_epochs,
            derive_seed(cfg.seed, SEED_TAG_BANK + idx as u64),
        )?;
        out.push((*level, source));
    }
    Ok(out)
}

pub fn banks_to_entries(banks: &[(Level, BankSource)]) -> Result<Vec<(String, Tensor)>> {
    let mut entries = Vec::new();
    for (level, source) in banks {
        let tag = level.label();
        entries.push((format!("{tag}/kind"), Tensor::scalar(source.kind().code())));
        match source {
            BankSource::Static(bank) => {
                entries.push((format!("{tag}/features"), bank.features.clone()));
                if let Some(pos) = &bank.positions {
                    let table = Tensor::from_fn(vec![pos.len(), 2], |i| {
                        let (r, c) = pos[i / 2];
                        if i % 2 == 0 {
                            r as f64
                        } else {
                            c as f64
                        }
                    });
                    entries.push((format!("{tag}/positions"), table));
                }
            }
            BankSource::PerQuery { stack, window } => {
                entries.push((format!("{tag}/stack"), stack.as_tensor().clone()));
                entries.push((format!("{tag}/window"), Tensor::scalar(*window as f64)));
            }
        }
    }
    Ok(entries)
}

pub fn banks_from_entries(entries: &[(String, Tensor)]) -> Result<Vec<(Level, BankSource)>> {
    let mut out = Vec::new();
    for level in Level::ALL {
        let tag = level.label();
        let kind = BankKind::from_code(find_entry(entries, &format!("{tag}/kind"))?.item())?;
        let source = if kind == BankKind::Nearest {
            let stack = FeatureStack::from_tensor(
                find_entry(entries, &format!("{tag}/stack"))?.clone(),
            )?;
            let window = find_entry(entries, &format!("{tag}/window"))?.item() as usize;
            BankSource::PerQuery { stack, window }
        } else {
            let features = find_entry(entries, &format!("{tag}/features"))?.clone();
            let positions = entries
                .iter()
                .find(|(n, _)| n == &format!("{tag}/positions"))
                .map(|(_, t)| {
                    (0..t.rows())
                        .map(|i| (t.at2(i, 0) as usize, t.at2(i, 1) as usize))
                        .collect::<Vec<_>>()
                });
            BankSource::Static(ReferenceBank {
                kind,
                features,
                positions,
            })
        };
        out.push((level, source));
    }
    Ok(out)
}

pub fn save_banks(banks: &[(Level, BankSource)], path: &Path) -> Result<()> {
    write_container(path, &banks_to_entries(banks)?)
}

pub fn load_banks(path: &Path) -> Result<Vec<(Level, BankSource)>> {
    banks_from_entries(&read_container(path)?)
}

// ---- training & checkpoints ---------------------------------------------

pub struct LevelRuntime {
    pub level: Level,
    pub model: LevelModel,
    pub store: ParamStore,
    pub bank: BankSource,
}

pub struct TrainedModels {
    pub levels: Vec<LevelRuntime>,
    pub histories: Vec<(Level, Vec<EpochStats>)>,
}

/// Fresh per-level models with seeded initialization.
pub fn init_models(cfg: &RunConfig) -> Result<Vec<(Level, LevelModel, ParamStore)>> {
    let mut out = Vec::with_capacity(2);
    for (idx, level) in Level::ALL.iter().enumerate() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::Rng::new(derive_seed(cfg.seed, SEED_TAG_MODEL + idx as u64));
        let model = LevelModel::init(
            &mut store,
            *level,
            cfg.feature_dim,
            cfg.d_model,
            cfg.heads,
            cfg.layers,
            &mut rng,
        )?;
        out.push((*level, model, store));
    }
    Ok(out)
}

/// Trains both level models; `settings` lets callers override epochs,
/// entropy, optimization mode or seed relative to the config.
pub fn train_models(
    cfg: &RunConfig,
    train_features: &[Vec<FeatureSequence>; 2],
    banks: Vec<(Level, BankSource)>,
    settings: &TrainSettings,
) -> Result<TrainedModels> {
    let mut levels = Vec::with_capacity(2);
    let mut histories = Vec::with_capacity(2);
    for ((idx, (level, model, mut store)), (bank_level, bank)) in
        init_models(cfg)?.into_iter().enumerate().zip(banks)
    {
        debug_assert_eq!(level, bank_level);
        let history = train_level(&mut store, &model, &train_features[idx], &bank, settings)?;
        histories.push((level, history));
        levels.push(LevelRuntime {
            level,
            model,
            store,
            bank,
        });
    }
    Ok(TrainedModels { levels, histories })
}

pub fn save_models(models: &TrainedModels, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = vec![
        ("meta/d_model".into(), Tensor::scalar(cfg.d_model as f64)),
        ("meta/layers".into(), Tensor::scalar(cfg.layers as f64)),
        ("meta/heads".into(), Tensor::scalar(cfg.heads as f64)),
        (
            "meta/feature_dim".into(),
            Tensor::scalar(cfg.feature_dim as f64),
        ),
    ];
    for rt in &models.levels {
        for p in rt.store.iter() {
            entries.push((p.name.clone(), p.value.clone()));
        }
    }
    write_container(path, &entries)
}

/// Rebuilds the model structure from the config and fills parameter values
/// from a checkpoint; banks are loaded separately.
pub fn load_models(
    cfg: &RunConfig,
    checkpoint: &Path,
    banks: Vec<(Level, BankSource)>,
) -> Result<TrainedModels> {
    let entries = read_container(checkpoint)?;
    for (key, expect) in [
        ("meta/d_model", cfg.d_model),
        ("meta/layers", cfg.layers),
        ("meta/heads", cfg.heads),
        ("meta/feature_dim", cfg.feature_dim),
    ] {
        let got = find_entry(&entries, key)?.item() as usize;
        if got != expect {
            return Err(Error::config(format!(
                "checkpoint {key}={got} does not match config value {expect}"
            )));
        }
    }
    let mut levels = Vec::with_capacity(2);
    for ((level, model, mut store), (bank_level, bank)) in
        init_models(cfg)?.into_iter().zip(banks)
    {
        debug_assert_eq!(level, bank_level);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name.clone();
            let value = find_entry(&entries, &name)?;
            if value.shape() != store.get(id).value.shape() {
                return Err(Error::config(format!(
                    "checkpoint entry {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    store.get(id).value.shape()
                )));
            }
            store.get_mut(id).value = value.clone();
        }
        levels.push(LevelRuntime {
            level,
            model,
            store,
            bank,
        });
    }
    Ok(TrainedModels {
        levels,
        histories: Vec::new(),
    })
}

// ---- scoring & evaluation ------------------------------------------------

pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
}

/// Scores every test image under the criterion and computes image- and
/// pixel-level AUROC against the ground truth.
pub fn evaluate(
    cfg: &RunConfig,
    models: &TrainedModels,
    test: &[TestImage],
    criterion: Criterion,
) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let (h, w) = (test[0].image.shape()[1], test[0].image.shape()[2]);
    // Per level, per image maps.
    let mut level_maps: Vec<Vec<AnomalyMap>> = Vec::with_capacity(models.levels.len());
    for rt in &models.levels {
        let mut maps = Vec::with_capacity(test.len());
        for t in test {
            let (f8, f16) = extract_features(&t.image, cfg.seed, cfg.feature_dim)?;
            let feats = match rt.level {
                Level::Eight => f8,
                Level::Sixteen => f16,
            };
            let bank = rt.bank.bank_for(&feats)?;
            let tape = Tape::new();
            let trace = forward(&tape, &rt.store, &feats, &bank, &rt.model)?;
            let eval = EvalTrace {
                x: tape.value(trace.x),
                xhat: tape.value(trace.xhat),
                te: trace.te.iter().map(|&v| tape.value(v)).collect(),
                se: trace.se.iter().map(|&v| tape.value(v)).collect(),
            };
            let scores = patch_scores(&eval, criterion);
            let mut map = to_map(&scores, &feats.geom, h, w, rt.level)?;
            if cfg.smooth_sigma > 0.0 {
                map = smooth_map(&map, cfg.smooth_sigma);
            }
            maps.push(map);
        }
        level_maps.push(maps);
    }
    // Min-max statistics per level over the whole test set, then fuse.
    let ranges: Vec<(f64, f64)> = level_maps.iter().map(|maps| level_range(maps)).collect();
    let mut records = Vec::with_capacity(test.len());
    for (i, t) in test.iter().enumerate() {
        let per_level: Vec<AnomalyMap> =
            level_maps.iter().map(|maps| maps[i].clone()).collect();
        let fused = fuse_levels(&per_level, &ranges)?;
        records.push(EvalRecord {
            id: t.id.clone(),
            label: t.label,
            score: image_score(&fused),
            map: fused,
            mask: t.mask.clone(),
        });
    }
    let image_scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let image_labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let image_auroc = auroc(&image_scores, &image_labels)?;

    let mut pixel_scores = Vec::with_capacity(records.len() * h * w);
    let mut pixel_labels = Vec::with_capacity(records.len() * h * w);
    for r in &records {
        pixel_scores.extend_from_slice(r.map.values.data());
        pixel_labels.extend(r.mask.data().iter().map(|&m| (m > 0.5) as u8));
    }
    let pixel_auroc = auroc(&pixel_scores, &pixel_labels)?;

    Ok(EvalOutcome {
        records,
        image_auroc,
        pixel_auroc,
    })
}

pub fn eval_line(outcome: &EvalOutcome) -> String {
    format!(
        "image_auroc={:.6} pixel_auroc={:.6}",
        outcome.image_auroc, outcome.pixel_auroc
    )
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from(EpochStats::csv_header());
    text.push('\n');
    for row in history {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_eval_report(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    let mut text = String::from("id,label,score\n");
    for r in &outcome.records {
        text.push_str(&format!("{},{},{:.12}\n", r.id, r.label, r.score));
    }
    text.push_str(&format!("# {}\n", eval_line(outcome)));
    fs::write(path, text)?;
    Ok(())
}

pub fn write_score_maps(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    let entries: Vec<(String, Tensor)> = outcome
        .records
        .iter()
        .map(|r| (format!("map/{}", r.id), r.map.values.clone()))
        .collect();
    write_container(path, &entries)
}

// ---- full workflows -------------------------------------------------------

/// gen + extract + banks + train in one call (the `train` subcommand and the
/// acceptance benchmark path).
pub fn train_from_dataset(
    cfg: &RunConfig,
    data: &LoadedDataset,
    settings: &TrainSettings,
    bank_kind: BankKind,
) -> Result<TrainedModels> {
    let features = extract_set(&data.train, cfg.seed, cfg.feature_dim)?;
    let banks = build_banks(cfg, bank_kind, &features)?;
    train_models(cfg, &features, banks, settings)
}

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub views: &'static str,
    pub entropy: bool,
    pub bank: BankKind,
    pub opt: OptMode,
    pub criterion: Criterion,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
}

fn views_of(criterion: Criterion) -> &'static str {
    match criterion {
        Criterion::Rec => "patchwise",
        Criterion::Div => "intra+inter",
        Criterion::RecAndDiv => "patchwise+intra+inter",
    }
}

/// Runs the ablation grid (bank x entropy x optimization) x scoring
/// criterion on one dataset; one training per (bank, entropy, opt) triple.
pub fn run_ablate(cfg: &RunConfig, data: &LoadedDataset) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::new();
    for &bank_kind in &cfg.ablate_banks {
        for &entropy in &cfg.ablate_entropy {
            for &opt in &cfg.ablate_opts {
                let mut settings = cfg.train_settings();
                settings.entropy = entropy;
                settings.opt = opt;
                let models = train_from_dataset(cfg, data, &settings, bank_kind)?;
                for &criterion in &cfg.ablate_criteria {
                    let outcome = evaluate(cfg, &models, &data.test, criterion)?;
                    rows.push(AblateRow {
                        views: views_of(criterion),
                        entropy,
                        bank: bank_kind,
                        opt,
                        criterion,
                        image_auroc: outcome.image_auroc,
                        pixel_auroc: outcome.pixel_auroc,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_ablate_csv(path: &Path, rows: &[AblateRow]) -> Result<()> {
    let mut text = String::from("views,entropy,bank,opt,criterion,image_auroc,pixel_auroc\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.views,
            if r.entropy { "on" } else { "off" },
            r.bank.as_str(),
            r.opt.as_str(),
            r.criterion.as_str(),
            r.image_auroc,
            r.pixel_auroc
        ));
    }
    fs::write(path, text)?;
    Ok(())
}
