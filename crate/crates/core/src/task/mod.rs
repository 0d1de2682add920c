//! Procedural multi-view spatial question answering: scenes, renders,
//! questions with oracle answers, templated reference trajectories and the
//! dataset file format.

pub mod cot;
pub mod dataset;
pub mod question;
pub mod render;
pub mod scene;

use serde::{Deserialize, Serialize};

pub use cot::{synthesize_cot, synthesize_cot_at};
pub use dataset::{read_dataset, write_dataset, DatasetManifest};
pub use question::{generate_question_answer, Answer, QuestionKind, SpatialQuestion};
pub use render::{render_views, ViewId, ViewImage};
pub use scene::{generate_scene, GridScene, SceneConfig};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::teacher::{teacher_features, TeacherFeatures, TeacherSpec};
use crate::trajectory::{LatentPosition, ReasoningTrajectory};

/// Bumped whenever generated content changes for a fixed config.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub scene: SceneConfig,
    pub image_side: usize,
    pub views: Vec<ViewId>,
    pub kinds: Vec<QuestionKind>,
    pub latent_size: usize,
    pub position: LatentPosition,
    pub teacher: TeacherSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 1000,
            scene: SceneConfig::default(),
            image_side: 32,
            views: ViewId::ALL.to_vec(),
            kinds: QuestionKind::ALL.to_vec(),
            latent_size: 12,
            position: LatentPosition::Beginning,
            teacher: TeacherSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: u64,
    pub question: SpatialQuestion,
    pub views: Vec<ViewImage>,
    pub reference_trajectory: ReasoningTrajectory,
    pub scene: GridScene,
    pub teacher: TeacherFeatures,
}

/// SplitMix64 finaliser, used to derive independent per-item seeds.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_SCENE_RETRIES: u64 = 64;

/// Builds one example; kinds that the sampled scene cannot support are
/// retried on a fresh scene.
pub fn generate_example(cfg: &DatasetConfig, index: usize) -> Result<TrainingExample> {
    if cfg.kinds.is_empty() || cfg.views.is_empty() {
        return Err(Error::InfeasibleConfig("no question kinds or views".into()));
    }
    if cfg.latent_size == 0 {
        return Err(Error::InfeasibleConfig("latent size must be positive".into()));
    }
    let kind = cfg.kinds[index % cfg.kinds.len()];
    let item_seed = mix_seed(cfg.seed, index as u64);
    for attempt in 0..MAX_SCENE_RETRIES {
        let scene = generate_scene(mix_seed(item_seed, 2 * attempt), &cfg.scene)?;
        let question = match generate_question_answer(&scene, kind, mix_seed(item_seed, 2 * attempt + 1)) {
            Ok(q) => q,
            Err(Error::UnsupportedKindForScene { .. }) => continue,
            Err(e) => return Err(e),
        };
        // Questions about a view that is not rendered cannot be answered.
        if question.view.is_some_and(|v| !cfg.views.contains(&v)) {
            continue;
        }
        let views = render_views(&scene, &cfg.views, cfg.image_side);
        let teacher = teacher_features(&scene, &views, None, &cfg.teacher)?;
        let reference_trajectory = synthesize_cot_at(&question, &scene, cfg.latent_size, cfg.position);
        return Ok(TrainingExample {
            id: index as u64,
            question,
            views,
            reference_trajectory,
            scene,
            teacher,
        });
    }
    Err(Error::InfeasibleConfig(format!(
        "no scene supporting {} after {MAX_SCENE_RETRIES} attempts",
        kind.name()
    )))
}

/// A pure function of the config: kinds are assigned round-robin.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<TrainingExample>> {
    (0..cfg.count).map(|i| generate_example(cfg, i)).collect()
}

pub fn dataset_manifest(cfg: &DatasetConfig, count: usize) -> DatasetManifest {
    DatasetManifest {
        generator_version: GENERATOR_VERSION,
        vocab_version: crate::vocab::Vocab::standard().version(),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        count,
    }
}

/// Per-kind histogram of correct option labels (A..D), in `QuestionKind::ALL`
/// order; numeric kinds have an all-zero row.
pub fn label_balance(examples: &[TrainingExample]) -> Vec<(QuestionKind, [usize; 4])> {
    QuestionKind::ALL
        .iter()
        .map(|&k| {
            let mut counts = [0usize; 4];
            for ex in examples.iter().filter(|e| e.question.kind == k) {
                if let Answer::Label(l) = &ex.question.answer {
                    if let Some(i) = question::LABELS.iter().position(|x| x == l) {
                        counts[i] += 1;
                    }
                }
            }
            (k, counts)
        })
        .collect()
}
