#![allow(dead_code)]

use think3d::config::RunConfig;
use think3d::model::{ModelConfig, Models};
use think3d::projector::ProjectorConfig;
use think3d::task::{generate_dataset, DatasetConfig, SceneConfig, TrainingExample};
use think3d::teacher::TeacherSpec;
use think3d_autograd::ParamStore;

pub const K: usize = 4;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        image_side: 16,
        patch_size: 8,
        max_seq_len: 160,
        latent_size: K,
        max_new_tokens: 60,
        ..Default::default()
    }
}

pub fn tiny_projector() -> ProjectorConfig {
    ProjectorConfig {
        depth: 3,
        hidden: 16,
        attn_dim: 8,
        ..Default::default()
    }
}

pub fn tiny_dataset(count: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        count,
        image_side: 16,
        latent_size: K,
        scene: SceneConfig {
            width: 4,
            height: 4,
            ..Default::default()
        },
        teacher: TeacherSpec {
            patch_size: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn tiny_data(count: usize, seed: u64) -> Vec<TrainingExample> {
    generate_dataset(&tiny_dataset(count, seed)).unwrap()
}

pub fn tiny_models() -> (Models, ParamStore) {
    Models::init(tiny_model(), tiny_projector()).unwrap()
}

/// A run config matching the tiny helpers.
pub fn tiny_run() -> RunConfig {
    RunConfig::load(
        None,
        &[
            format!("latent_size={K}"),
            "data.train_count=16".into(),
            "data.test_count=8".into(),
            "data.generator.scene.width=4".into(),
            "data.generator.scene.height=4".into(),
            "model.d_model=16".into(),
            "model.n_layers=2".into(),
            "model.n_heads=2".into(),
            "model.d_ff=32".into(),
            "model.image_side=16".into(),
            "model.max_seq_len=160".into(),
            "model.max_new_tokens=60".into(),
            "projector.depth=3".into(),
            "projector.hidden=16".into(),
            "projector.attn_dim=8".into(),
            "sft.steps=6".into(),
            "sft.batch_size=2".into(),
            "sft.lr=1e-3".into(),
            "rl.steps=2".into(),
            "rl.group_size=2".into(),
            "export.count=2".into(),
            "ablation.seeds=[0]".into(),
            "ablation.with_rl=false".into(),
        ],
    )
    .unwrap()
}
