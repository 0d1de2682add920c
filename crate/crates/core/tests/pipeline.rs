mod common;

use std::collections::BTreeMap;
use std::path::Path;

use think3d::checkpoint::{load_checkpoint, params_hash, read_manifest, save_checkpoint};
use think3d::model::Models;
use think3d::sft::{train_sft_until, RunOutput, TrainState};
use think3d::config::{RunConfig, Split};
use think3d::error::Error;
use think3d::pipeline::{
    cmd_ablate, cmd_datagen, cmd_eval, cmd_export, cmd_train_rl, cmd_train_sft, load_split, AblationAxis,
};
use think3d::task::{read_dataset, Answer};
use think3d_autograd::{AdamW, ParamStore};

fn set(cfg: &RunConfig, assignment: &str) -> RunConfig {
    let mut table: toml::Table = toml::from_str(&cfg.to_toml()).unwrap();
    think3d::config::apply_override(&mut table, assignment).unwrap();
    RunConfig::from_toml(&toml::to_string(&table).unwrap()).unwrap()
}

fn data_config(dir: &Path) -> RunConfig {
    set(&common::tiny_run(), &format!("paths.data={:?}", dir.display().to_string()))
}

#[test]
fn datagen_is_reproducible_and_audited() {
    let cfg = common::tiny_run();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let summary = cmd_datagen(&cfg, a.path()).unwrap();
    cmd_datagen(&cfg, b.path()).unwrap();
    for name in ["train.jsonl", "test.jsonl", "config.toml"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let text = std::fs::read_to_string(a.path().join("train.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["manifest"]["count"], 16);

    // Independent recount against the printed audit.
    for split in ["train.jsonl", "test.jsonl"] {
        let data = read_dataset(&a.path().join(split)).unwrap();
        let mut counts: BTreeMap<&str, (usize, [usize; 4])> = BTreeMap::new();
        for ex in &data {
            let e = counts.entry(ex.question.kind.name()).or_default();
            e.0 += 1;
            if let Answer::Label(l) = &ex.question.answer {
                e.1[(l.as_bytes()[0] - b'A') as usize] += 1;
            }
        }
        let section = summary.split(&format!("{split}: ")).nth(1).unwrap();
        for (kind, (n, labels)) in counts {
            let line = section.lines().find(|l| l.split_whitespace().next() == Some(kind)).unwrap();
            let cols: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(cols[1], n.to_string(), "{line}");
            if cols[2] != "-" {
                for i in 0..4 {
                    assert_eq!(cols[2 + i], labels[i].to_string(), "{line}");
                }
            }
        }
    }
}

#[test]
fn datasets_from_another_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    cmd_datagen(&common::tiny_run(), dir.path()).unwrap();
    let cfg = data_config(dir.path());
    assert_eq!(load_split(&cfg, Split::Train).unwrap().len(), 16);
    let other = set(&cfg, "data.generator.scene.max_objects=3");
    assert!(matches!(load_split(&other, Split::Train), Err(Error::ConfigHashMismatch { .. })));
}

#[test]
fn stages_chain_and_report() {
    let root = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run();
    let sft = cmd_train_sft(&cfg, &root.path().join("sft"), false).unwrap();
    assert_eq!(sft.step, 6);
    let m = read_manifest(&sft.latest).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    assert!(sft.best.exists());

    let rl_cfg = set(&cfg, &format!("paths.checkpoint={:?}", sft.latest.display().to_string()));
    let rl = cmd_train_rl(&rl_cfg, &root.path().join("rl"), false).unwrap();
    assert_eq!(rl.step, 2);
    let (s1, s2) = (load_checkpoint(&sft.latest).unwrap(), load_checkpoint(&rl.latest).unwrap());
    assert_eq!(params_hash(&s1.params, "proj."), params_hash(&s2.params, "proj."));

    let ev_cfg = set(&cfg, &format!("paths.checkpoint={:?}", rl.latest.display().to_string()));
    let out = root.path().join("eval");
    let report = cmd_eval(&ev_cfg, &out).unwrap();
    assert_eq!(report.count, 8);
    assert_eq!(report.config_hash, ev_cfg.hash());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(json["average"].as_f64().unwrap(), report.average);
    assert!(std::fs::read_to_string(out.join("eval_report.txt")).unwrap().contains("Avg."));
    assert!(out.join("config.toml").exists());
    // Greedy evaluation is reproducible.
    let again = cmd_eval(&ev_cfg, &root.path().join("eval2")).unwrap();
    assert_eq!(again.to_json(), report.to_json());

    let dumps = cmd_export(&ev_cfg, &root.path().join("export")).unwrap();
    assert_eq!(dumps.len(), 2);
    for d in &dumps {
        let path = root.path().join("export/latents").join(format!("{:06}.dump", d.question_id));
        let back = think3d::export::deserialize_dump(&path).unwrap();
        assert_eq!(back.config_hash, ev_cfg.hash());
    }
}

#[test]
fn rerunning_a_stage_is_idempotent() {
    let root = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run();
    let a = cmd_train_sft(&cfg, &root.path().join("a"), false).unwrap();
    let b = cmd_train_sft(&cfg, &root.path().join("b"), false).unwrap();
    let (a, b) = (load_checkpoint(&a.latest).unwrap(), load_checkpoint(&b.latest).unwrap());
    assert_eq!(params_hash(&a.params, ""), params_hash(&b.params, ""));
}

#[test]
fn resume_continues_bit_exactly_and_checks_the_config() {
    let root = tempfile::tempdir().unwrap();
    let full = common::tiny_run();
    let straight = cmd_train_sft(&full, &root.path().join("straight"), false).unwrap();

    // An interrupted run of the same config, stopped after step 3.
    let dir = root.path().join("resumed");
    let out = RunOutput {
        dir: dir.clone(),
        config_hash: full.hash(),
        model_hash: full.model_hash(),
    };
    let (models, params) = Models::init(full.model.clone(), full.projector.clone()).unwrap();
    let mut state = TrainState {
        optimizer: AdamW::new(&params, full.sft.weight_decay),
        params,
        step: 0,
    };
    let train = load_split(&full, Split::Train).unwrap();
    train_sft_until(&models, &mut state, &train, &full.sft, Some(&out), 3).unwrap();
    // Resuming under a different config is refused.
    let changed = set(&full, "sft.lr=5e-4");
    assert!(matches!(cmd_train_sft(&changed, &dir, true), Err(Error::ConfigHashMismatch { .. })));
    let resumed = cmd_train_sft(&full, &dir, true).unwrap();
    assert_eq!(resumed.step, 6);
    let (a, b) = (load_checkpoint(&straight.latest).unwrap(), load_checkpoint(&resumed.latest).unwrap());
    assert_eq!(params_hash(&a.params, ""), params_hash(&b.params, ""));
}

#[test]
fn stage_two_requires_projector_weights() {
    let root = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run();
    let sft = cmd_train_sft(&cfg, &root.path().join("sft"), false).unwrap();
    let ck = load_checkpoint(&sft.latest).unwrap();
    let mut vlm_only = ParamStore::new();
    for (_, name, t) in ck.params.iter().filter(|(_, n, _)| n.starts_with("vlm.")) {
        vlm_only.insert(name, t.clone());
    }
    let stripped = root.path().join("vlm_only");
    save_checkpoint(&stripped, &vlm_only, None, ck.manifest.clone()).unwrap();
    let rl_cfg = set(&cfg, &format!("paths.checkpoint={:?}", stripped.display().to_string()));
    let err = cmd_train_rl(&rl_cfg, &root.path().join("rl"), false).unwrap_err();
    assert!(matches!(err, Error::MissingComponent { .. }), "{err}");
    // Without any checkpoint configured the command is a usage error.
    assert!(matches!(cmd_train_rl(&cfg, &root.path().join("rl2"), false), Err(Error::Config(_))));
}

#[test]
fn ablation_axes() {
    assert!(matches!(AblationAxis::parse("depth"), Err(Error::UnknownAxis(_))));
    let root = tempfile::tempdir().unwrap();
    let cfg = set(&set(&common::tiny_run(), "ablation.latent_sizes=[2,4]"), "ablation.seeds=[0,1]");
    let r = cmd_ablate(&cfg, "latent-size", root.path()).unwrap();
    let labels: Vec<&str> = r.rows.iter().map(|x| x.label.as_str()).collect();
    assert_eq!(labels, ["k=2", "k=4"]);
    for row in &r.rows {
        assert_eq!(row.seeds, vec![0, 1]);
        assert_eq!(row.degenerate_rate.len(), 2);
    }
    assert!(root.path().join("ablation_latent-size.json").exists());
    assert!(std::fs::read_to_string(root.path().join("ablation_latent-size.txt")).unwrap().contains("degenerate"));

    let r = cmd_ablate(&set(&cfg, "ablation.seeds=[3]"), "reward-removal", root.path()).unwrap();
    let labels: Vec<&str> = r.rows.iter().map(|x| x.label.as_str()).collect();
    assert_eq!(labels, ["full", "w/o r_format", "w/o r_ans", "w/o r_3d"]);
    assert!(r.rows.iter().all(|x| x.seeds == vec![3]));
    assert!(matches!(cmd_ablate(&cfg, "nope", root.path()), Err(Error::UnknownAxis(_))));
}
