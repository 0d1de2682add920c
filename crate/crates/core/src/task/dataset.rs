//! Newline-delimited dataset file: a manifest line, then one self-describing
//! record per example. Pixels and cached teacher features are base-64 raw
//! little-endian `f32` blocks, so the round trip is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::question::{Answer, QuestionKind, SpatialQuestion};
use super::render::{ViewId, ViewImage, CHANNELS};
use super::scene::GridScene;
use super::TrainingExample;
use crate::codec::EncodedArray;
use crate::error::{Error, Result};
use crate::teacher::TeacherFeatures;
use crate::trajectory::ReasoningTrajectory;
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub vocab_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    manifest: DatasetManifest,
}

#[derive(Serialize, Deserialize)]
struct ViewRecord {
    view: ViewId,
    azimuth_deg: f64,
    pixels: EncodedArray,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    kind: QuestionKind,
    question: String,
    options: Option<Vec<String>>,
    answer: Answer,
    targets: Vec<usize>,
    view: Option<ViewId>,
    views: Vec<ViewRecord>,
    trajectory: Vec<TokenId>,
    scene: GridScene,
    teacher: EncodedArray,
}

impl Record {
    fn from_example(ex: &TrainingExample) -> Self {
        let q = &ex.question;
        Record {
            id: ex.id,
            kind: q.kind,
            question: q.text.clone(),
            options: q.options.clone(),
            answer: q.answer.clone(),
            targets: q.targets.clone(),
            view: q.view,
            views: ex
                .views
                .iter()
                .map(|v| ViewRecord {
                    view: v.view,
                    azimuth_deg: v.azimuth_deg,
                    pixels: EncodedArray::from_f32(vec![CHANNELS, v.side, v.side], &v.pixels),
                })
                .collect(),
            trajectory: ex.reference_trajectory.tokens.clone(),
            scene: ex.scene.clone(),
            teacher: EncodedArray::from_f32(
                vec![ex.teacher.n_views, ex.teacher.patches, ex.teacher.dim],
                &ex.teacher.data,
            ),
        }
    }

    fn into_example(self) -> std::result::Result<TrainingExample, String> {
        let vocab = Vocab::standard();
        let views = self
            .views
            .into_iter()
            .map(|v| {
                let shape = &v.pixels.shape;
                if shape.len() != 3 || shape[0] != CHANNELS || shape[1] != shape[2] {
                    return Err(format!("bad pixel shape {shape:?}"));
                }
                Ok(ViewImage {
                    view: v.view,
                    azimuth_deg: v.azimuth_deg,
                    side: shape[1],
                    pixels: v.pixels.to_f32()?,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        if let Some(&bad) = self.trajectory.iter().find(|&&t| t >= vocab.size()) {
            return Err(format!("token id {bad} outside vocabulary"));
        }
        let shape = &self.teacher.shape;
        if shape.len() != 3 {
            return Err(format!("bad teacher shape {shape:?}"));
        }
        let teacher = TeacherFeatures {
            n_views: shape[0],
            patches: shape[1],
            dim: shape[2],
            data: self.teacher.to_f32()?,
        };
        Ok(TrainingExample {
            id: self.id,
            question: SpatialQuestion {
                kind: self.kind,
                text: self.question,
                options: self.options,
                answer: self.answer,
                targets: self.targets,
                view: self.view,
            },
            views,
            reference_trajectory: ReasoningTrajectory::new(self.trajectory, &vocab.specials()),
            scene: self.scene,
            teacher,
        })
    }
}

pub fn write_dataset(examples: &[TrainingExample], manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(
        &mut w,
        &ManifestLine {
            manifest: manifest.clone(),
        },
    )?;
    w.write_all(b"\n").map_err(io)?;
    for ex in examples {
        serde_json::to_writer(&mut w, &Record::from_example(ex))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a dataset file. An empty file yields no manifest and no examples.
pub fn read_dataset_with_manifest(path: &Path) -> Result<(Option<DatasetManifest>, Vec<TrainingExample>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |reason: String| Error::CorruptRecord { line: lineno, reason };
        if lineno == 1 {
            if let Ok(m) = serde_json::from_str::<ManifestLine>(&line) {
                manifest = Some(m.manifest);
                continue;
            }
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        out.push(rec.into_example().map_err(corrupt)?);
    }
    Ok((manifest, out))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingExample>> {
    read_dataset_with_manifest(path).map(|(_, ex)| ex)
}
