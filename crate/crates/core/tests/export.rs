mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use think3d::checkpoint::params_hash;
use think3d::error::Error;
use think3d::export::{deserialize_dump, extract_and_project, patch_cosines, serialize_dump, LatentDump};
use think3d::model::SamplingSpec;
use think3d::projector::project_latents;
use think3d::sft::{train_sft, LossWeights, SftConfig, TrainState};
use think3d::trajectory::FormatGrammar;
use think3d::vocab::Vocab;
use think3d_autograd::{AdamW, Graph, ParamStore, Tensor};

fn sample_dump(flagged: bool) -> LatentDump {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = |r: usize, c: usize| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    LatentDump {
        question_id: 42,
        config_hash: "0123456789abcdef".into(),
        trajectory_text: "<think> there are 3 objects </think>".into(),
        no_latent_block: flagged,
        n_views: 2,
        patches: 4,
        latents: (!flagged).then(|| t(4, 16)),
        projected: (!flagged).then(|| t(8, 64)),
        cosine_map: (!flagged).then(|| vec![0.25, -0.5, 0.0, 1.0, 0.125, 0.3, -1.0, 0.7]),
    }
}

#[test]
fn dumps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for flagged in [false, true] {
        let d = sample_dump(flagged);
        let path = dir.path().join(format!("{flagged}.dump"));
        serialize_dump(&d, &path).unwrap();
        let back = deserialize_dump(&path).unwrap();
        assert_eq!(back.question_id, d.question_id);
        assert_eq!(back.config_hash, d.config_hash);
        assert_eq!(back.no_latent_block, flagged);
        assert_eq!(back.trajectory_text, d.trajectory_text);
        // Arrays are stored as float32.
        let close = |a: &Option<Tensor>, b: &Option<Tensor>| match (a, b) {
            (Some(a), Some(b)) => a.shape() == b.shape() && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-6),
            (None, None) => true,
            _ => false,
        };
        assert!(close(&back.latents, &d.latents));
        assert!(close(&back.projected, &d.projected));
        assert_eq!(back.cosine_map.is_some(), !flagged);
    }
}

#[test]
fn unknown_versions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dump");
    serialize_dump(&sample_dump(false), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[0] = "think3d-latent-dump 99";
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(deserialize_dump(&path), Err(Error::Format { .. })));
}

#[test]
fn cosine_map_oracles() {
    let t = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 2.0, 3.0, 4.0]);
    let p = Tensor::from_vec(3, 2, vec![2.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(patch_cosines(&p, &t).unwrap(), vec![1.0, 0.0, 0.0]);
    assert!(patch_cosines(&Tensor::zeros(2, 2), &t).is_err());
}

#[test]
fn missing_latent_block_is_flagged() {
    // An untrained model does not open a latent block on its own.
    let (models, params) = common::tiny_models();
    let data = common::tiny_data(10, 1);
    let grammar = FormatGrammar::new(common::K);
    let sp = Vocab::standard().specials();
    let mut flagged = 0;
    for ex in &data {
        let d = extract_and_project(&models, &params, ex, &grammar, &SamplingSpec::default(), 0).unwrap();
        let has_block = d.trajectory_text.contains(Vocab::standard().surface(sp.latent_start));
        if d.no_latent_block {
            flagged += 1;
            assert!(d.latents.is_none() && d.cosine_map.is_none());
        } else {
            assert!(has_block);
            assert_eq!(d.cosine_map.as_ref().unwrap().len(), d.n_views * d.patches);
        }
    }
    assert!(flagged > 0);
}

/// Teacher-forced latents of the reference trajectory.
fn forced_latents(models: &think3d::model::Models, params: &ParamStore, ex: &think3d::task::TrainingExample) -> (Tensor, Tensor) {
    let v = Vocab::standard();
    let q = v.encode(&ex.question.prompt()).unwrap();
    let mut text = q.clone();
    text.extend_from_slice(&ex.reference_trajectory.tokens);
    let mut g = Graph::new(params);
    let fw = models.vlm.forward(&mut g, &ex.views, &text).unwrap();
    let rows: Vec<usize> = ex
        .reference_trajectory
        .latent_pad_indices()
        .map(|i| fw.text_offset + q.len() + i)
        .collect();
    let lat = g.select_rows(fw.hidden, &rows);
    (g.value(lat).clone(), g.value(fw.image_features).clone())
}

#[test]
fn random_projection_has_near_zero_cosine() {
    let (models, mut params) = common::tiny_models();
    // Random output layer: the zero-initialised one would give exactly 0.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["proj.out.w", "proj.out.b"] {
        let id = params.id(name).unwrap();
        for x in params.get_mut(id).data.iter_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    let data = common::tiny_data(100, 6);
    let mut sum = 0.0;
    let mut n = 0;
    for ex in &data {
        let (lat, feats) = forced_latents(&models, &params, ex);
        let proj = project_latents(&models.projector, &params, &lat, &feats).unwrap();
        let c = patch_cosines(&proj, &ex.teacher.to_tensor()).unwrap();
        sum += c.iter().sum::<f64>();
        n += c.len();
    }
    let mean = sum / n as f64;
    assert!(mean.abs() < 0.2, "{mean}");
}

#[test]
fn trained_latents_align_better_and_export_is_read_only() {
    let (models, params) = common::tiny_models();
    let data = common::tiny_data(8, 7);
    let cfg = SftConfig {
        steps: 300,
        batch_size: 4,
        lr: 3e-3,
        weights: LossWeights::default(),
        ..Default::default()
    };
    let mut state = TrainState {
        optimizer: AdamW::new(&params, cfg.weight_decay),
        params,
        step: 0,
    };
    train_sft(&models, &mut state, &data, &cfg, None).unwrap();
    let trained = state.params;
    let before = params_hash(&trained, "");
    let grammar = FormatGrammar::new(common::K);
    let mut cos = Vec::new();
    for ex in &data {
        let d = extract_and_project(&models, &trained, ex, &grammar, &SamplingSpec::default(), 0).unwrap();
        assert!(!d.no_latent_block, "{}", d.trajectory_text);
        cos.push(d.mean_cosine().unwrap());
    }
    assert_eq!(params_hash(&trained, ""), before);
    // Untrained: zero output layer, so every cosine is exactly 0.
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    assert!(mean > 0.0, "{cos:?}");
}
