//! Latent dumps: the latent block read out during generation, its
//! projection into teacher space and a per-patch cosine map against the
//! cached teacher features.
//!
//! File layout (UTF-8 lines):
//!
//! ```text
//! think3d-latent-dump 1
//! {"question_id":..,"config_hash":..,"trajectory":"..","no_latent_block":..,"n_views":..,"patches":..}
//! {"latents":{..array..},"projected":{..},"cosine":{..}}     (absent when flagged)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use think3d_autograd::{Graph, ParamStore, Tensor};

use crate::codec::EncodedArray;
use crate::error::{Error, Result};
use crate::model::{generate_with_latents, Models, SamplingSpec};
use crate::projector::project_latents;
use crate::task::{mix_seed, TrainingExample};
use crate::trajectory::FormatGrammar;
use crate::vocab::Vocab;

pub const DUMP_MAGIC: &str = "think3d-latent-dump";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub question_id: u64,
    /// Hash of the run config that produced the dump; empty when unknown.
    pub config_hash: String,
    pub trajectory_text: String,
    /// Set when generation produced no complete latent block; the feature
    /// fields are then empty.
    pub no_latent_block: bool,
    pub n_views: usize,
    pub patches: usize,
    pub latents: Option<Tensor>,
    pub projected: Option<Tensor>,
    /// `n_views * patches` cosines, view-major.
    pub cosine_map: Option<Vec<f64>>,
}

impl LatentDump {
    pub fn mean_cosine(&self) -> Option<f64> {
        self.cosine_map
            .as_ref()
            .map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64)
    }
}

/// Row-wise cosine similarity; rows where either side is zero score 0.
pub fn patch_cosines(proj: &Tensor, teacher: &Tensor) -> Result<Vec<f64>> {
    if proj.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", proj.shape(), teacher.shape())));
    }
    Ok((0..proj.rows)
        .map(|r| {
            let (a, b) = (proj.row(r), teacher.row(r));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Generates a trajectory, reads out its first latent block and projects it.
/// The same `(decoding seed, example id)` gives the same latents as
/// evaluation.
pub fn extract_and_project(
    models: &Models,
    params: &ParamStore,
    example: &TrainingExample,
    grammar: &FormatGrammar,
    sampling: &SamplingSpec,
    seed: u64,
) -> Result<LatentDump> {
    let vocab = Vocab::standard();
    let q = vocab.encode(&example.question.prompt())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, example.id));
    let gen = generate_with_latents(&models.vlm, params, &q, &example.views, grammar, sampling, &mut rng)?;
    let k = models.vlm.config.latent_size;
    let teacher = example.teacher.to_tensor();
    let mut dump = LatentDump {
        question_id: example.id,
        config_hash: String::new(),
        trajectory_text: gen.trajectory.text(vocab),
        no_latent_block: true,
        n_views: example.teacher.n_views,
        patches: example.teacher.patches,
        latents: None,
        projected: None,
        cosine_map: None,
    };
    let complete = gen
        .trajectory
        .latent_span
        .is_some_and(|(s, e)| e - s - 1 == k && gen.latents.rows >= k);
    if !complete {
        return Ok(dump);
    }
    let d = gen.latents.cols;
    let latents = Tensor::from_vec(k, d, gen.latents.data[..k * d].to_vec());
    let feats = {
        let mut g = Graph::new(params);
        let f = models.vlm.encode_images(&mut g, &example.views)?;
        g.value(f).clone()
    };
    let projected = project_latents(&models.projector, params, &latents, &feats)?;
    dump.cosine_map = Some(patch_cosines(&projected, &teacher)?);
    dump.no_latent_block = false;
    dump.latents = Some(latents);
    dump.projected = Some(projected);
    Ok(dump)
}

#[derive(Serialize, Deserialize)]
struct Header {
    question_id: u64,
    #[serde(default)]
    config_hash: String,
    trajectory: String,
    no_latent_block: bool,
    n_views: usize,
    patches: usize,
}

#[derive(Serialize, Deserialize)]
struct Arrays {
    latents: EncodedArray,
    projected: EncodedArray,
    cosine: EncodedArray,
}

fn enc(t: &Tensor) -> EncodedArray {
    EncodedArray::from_f64(vec![t.rows, t.cols], &t.data)
}

fn dec(a: &EncodedArray, path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if a.shape.len() != 2 {
        return Err(bad(format!("expected a 2-d array, got shape {:?}", a.shape)));
    }
    Ok(Tensor::from_vec(a.shape[0], a.shape[1], a.to_f64().map_err(bad)?))
}

pub fn serialize_dump(dump: &LatentDump, path: &Path) -> Result<()> {
    let mut text = format!("{DUMP_MAGIC} {DUMP_VERSION}\n");
    text.push_str(&serde_json::to_string(&Header {
        question_id: dump.question_id,
        config_hash: dump.config_hash.clone(),
        trajectory: dump.trajectory_text.clone(),
        no_latent_block: dump.no_latent_block,
        n_views: dump.n_views,
        patches: dump.patches,
    })?);
    text.push('\n');
    if let (Some(l), Some(p), Some(c)) = (&dump.latents, &dump.projected, &dump.cosine_map) {
        text.push_str(&serde_json::to_string(&Arrays {
            latents: enc(l),
            projected: enc(p),
            cosine: EncodedArray::from_f64(vec![dump.n_views, dump.patches], c),
        })?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn deserialize_dump(path: &Path) -> Result<LatentDump> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| bad("empty file"))?;
    match first.split_once(' ') {
        Some((DUMP_MAGIC, v)) if v.trim() == DUMP_VERSION.to_string() => {}
        _ => return Err(bad("missing or unsupported version line")),
    }
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| bad("missing header"))?)?;
    let mut dump = LatentDump {
        question_id: header.question_id,
        config_hash: header.config_hash,
        trajectory_text: header.trajectory,
        no_latent_block: header.no_latent_block,
        n_views: header.n_views,
        patches: header.patches,
        latents: None,
        projected: None,
        cosine_map: None,
    };
    if let Some(line) = lines.next() {
        let arrays: Arrays = serde_json::from_str(line)?;
        dump.latents = Some(dec(&arrays.latents, path)?);
        dump.projected = Some(dec(&arrays.projected, path)?);
        dump.cosine_map = Some(dec(&arrays.cosine, path)?.data);
    }
    Ok(dump)
}
