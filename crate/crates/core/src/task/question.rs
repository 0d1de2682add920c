use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::ViewId;
use super::scene::GridScene;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    RelativeDirection,
    Rotation,
    Count,
    NumericDistance,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] = [
        Self::RelativeDirection,
        Self::Rotation,
        Self::Count,
        Self::NumericDistance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RelativeDirection => "relative-direction",
            Self::Rotation => "rotation",
            Self::Count => "count",
            Self::NumericDistance => "numeric-distance",
        }
    }

    pub fn is_multiple_choice(self) -> bool {
        !matches!(self, Self::NumericDistance)
    }
}

/// Option labels, in presentation order.
pub const LABELS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Label(String),
    Number(f64),
}

impl Answer {
    /// Surface text as it appears inside the answer block.
    pub fn text(&self) -> String {
        match self {
            Answer::Label(l) => l.clone(),
            Answer::Number(v) => format_number(*v),
        }
    }
}

/// Numeric answers carry one decimal.
pub fn format_number(v: f64) -> String {
    format!("{v:.1}")
}

/// Spatial relation of a subject to a reference object as seen from a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Self::LeftOf, Self::RightOf, Self::InFrontOf, Self::Behind];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::LeftOf => "left of",
            Self::RightOf => "right of",
            Self::InFrontOf => "in front of",
            Self::Behind => "behind",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialQuestion {
    pub kind: QuestionKind,
    pub text: String,
    /// Option texts, labelled `A`, `B`, ... in order. Absent for numeric kinds.
    pub options: Option<Vec<String>>,
    pub answer: Answer,
    /// Indices of the queried objects in the scene.
    pub targets: Vec<usize>,
    /// The view a relational question is posed from.
    pub view: Option<ViewId>,
}

impl SpatialQuestion {
    /// Question text followed by labelled options, as fed to the model.
    pub fn prompt(&self) -> String {
        let mut s = self.text.clone();
        if let Some(opts) = &self.options {
            for (label, opt) in LABELS.iter().zip(opts) {
                s.push(' ');
                s.push_str(label);
                s.push(' ');
                s.push_str(opt);
            }
        }
        s
    }

    /// Text of the correct option (multiple choice only).
    pub fn correct_option(&self) -> Option<&str> {
        let Answer::Label(l) = &self.answer else {
            return None;
        };
        let idx = LABELS.iter().position(|x| x == l)?;
        self.options.as_ref()?.get(idx).map(String::as_str)
    }
}

/// Relation oracle on raw grid coordinates. `None` when the camera-frame
/// offsets tie and the relation is ambiguous.
pub fn relation_in_view(scene: &GridScene, subject: usize, reference: usize, view: ViewId) -> Option<Relation> {
    let a = &scene.objects[subject];
    let b = &scene.objects[reference];
    let (ua, da, _, _) = view.project(a.x, a.y, scene.width, scene.height);
    let (ub, db, _, _) = view.project(b.x, b.y, scene.width, scene.height);
    let du = ua as i64 - ub as i64;
    let dd = da as i64 - db as i64;
    if du.abs() == dd.abs() {
        return None;
    }
    Some(if du.abs() > dd.abs() {
        if du > 0 {
            Relation::RightOf
        } else {
            Relation::LeftOf
        }
    } else if dd < 0 {
        Relation::InFrontOf
    } else {
        Relation::Behind
    })
}

/// Depth of an object from each camera; the view with the unique minimum is
/// the one where the object stands closest to the camera.
pub fn closest_view(scene: &GridScene, idx: usize) -> Option<ViewId> {
    let o = &scene.objects[idx];
    let depths: Vec<(ViewId, usize)> = ViewId::ALL
        .iter()
        .map(|&v| (v, v.project(o.x, o.y, scene.width, scene.height).1))
        .collect();
    let min = depths.iter().map(|d| d.1).min()?;
    let winners: Vec<_> = depths.iter().filter(|d| d.1 == min).collect();
    (winners.len() == 1).then(|| winners[0].0)
}

/// Planar distance between two objects, rounded to one decimal.
pub fn planar_distance(scene: &GridScene, a: usize, b: usize) -> f64 {
    let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
    let dx = oa.x as f64 - ob.x as f64;
    let dy = oa.y as f64 - ob.y as f64;
    (dx.hypot(dy) * 10.0).round() / 10.0
}

fn unsupported(kind: QuestionKind, reason: &str) -> Error {
    Error::UnsupportedKindForScene {
        kind: kind.name().into(),
        reason: reason.into(),
    }
}

fn shuffled_options(
    correct: String,
    mut distractors: Vec<String>,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, String) {
    distractors.shuffle(rng);
    distractors.truncate(3);
    let mut opts = distractors;
    let pos = rng.gen_range(0..=opts.len());
    opts.insert(pos, correct);
    (opts, LABELS[pos].to_string())
}

pub fn generate_question_answer(scene: &GridScene, kind: QuestionKind, seed: u64) -> Result<SpatialQuestion> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scene.objects.len();
    if n < 2 && kind != QuestionKind::Count {
        return Err(unsupported(kind, "needs at least two objects"));
    }
    match kind {
        QuestionKind::RelativeDirection => {
            let mut cands = Vec::new();
            for a in 0..n {
                for b in 0..n {
                    if a == b {
                        continue;
                    }
                    for v in ViewId::ALL {
                        if let Some(rel) = relation_in_view(scene, a, b, v) {
                            cands.push((a, b, v, rel));
                        }
                    }
                }
            }
            let &(a, b, view, rel) = cands
                .choose(&mut rng)
                .ok_or_else(|| unsupported(kind, "every pair is ambiguous"))?;
            let distractors = Relation::ALL
                .iter()
                .filter(|&&r| r != rel)
                .map(|r| r.phrase().to_string())
                .collect();
            let (options, label) = shuffled_options(rel.phrase().to_string(), distractors, &mut rng);
            Ok(SpatialQuestion {
                kind,
                text: format!(
                    "from the {} view where is the {} relative to the {} ?",
                    view.word(),
                    scene.objects[a].name(),
                    scene.objects[b].name()
                ),
                options: Some(options),
                answer: Answer::Label(label),
                targets: vec![a, b],
                view: Some(view),
            })
        }
        QuestionKind::Rotation => {
            let cands: Vec<(usize, ViewId)> = (0..n)
                .filter_map(|i| closest_view(scene, i).map(|v| (i, v)))
                .collect();
            let &(i, view) = cands
                .choose(&mut rng)
                .ok_or_else(|| unsupported(kind, "no object has a unique closest view"))?;
            let distractors = ViewId::ALL
                .iter()
                .filter(|&&v| v != view)
                .map(|v| v.word().to_string())
                .collect();
            let (options, label) = shuffled_options(view.word().to_string(), distractors, &mut rng);
            Ok(SpatialQuestion {
                kind,
                text: format!(
                    "in which view is the {} closest to the camera ?",
                    scene.objects[i].name()
                ),
                options: Some(options),
                answer: Answer::Label(label),
                targets: vec![i],
                view: None,
            })
        }
        QuestionKind::Count => {
            let distractors = (super::scene::MIN_OBJECTS..=super::scene::MAX_OBJECTS)
                .filter(|&c| c != n)
                .map(|c| c.to_string())
                .collect();
            let (options, label) = shuffled_options(n.to_string(), distractors, &mut rng);
            Ok(SpatialQuestion {
                kind,
                text: "how many objects are in the scene ?".into(),
                options: Some(options),
                answer: Answer::Label(label),
                targets: (0..n).collect(),
                view: None,
            })
        }
        QuestionKind::NumericDistance => {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            Ok(SpatialQuestion {
                kind,
                text: format!(
                    "how far is the {} from the {} ?",
                    scene.objects[a].name(),
                    scene.objects[b].name()
                ),
                options: None,
                answer: Answer::Number(planar_distance(scene, a, b)),
                targets: vec![a, b],
                view: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::scene::{ColorClass, SceneObject, ShapeClass};
    use super::*;

    fn two(a: (usize, usize), b: (usize, usize)) -> GridScene {
        GridScene {
            width: 8,
            height: 8,
            objects: vec![
                SceneObject {
                    shape: ShapeClass::Cube,
                    color: ColorClass::Red,
                    x: a.0,
                    y: a.1,
                    z: 0,
                },
                SceneObject {
                    shape: ShapeClass::Sphere,
                    color: ColorClass::Blue,
                    x: b.0,
                    y: b.1,
                    z: 1,
                },
            ],
        }
    }

    #[test]
    fn north_view_mirrors_east_west() {
        let s = two((1, 1), (5, 1));
        assert_eq!(relation_in_view(&s, 0, 1, ViewId::North), Some(Relation::RightOf));
        assert_eq!(relation_in_view(&s, 0, 1, ViewId::South), Some(Relation::LeftOf));
        assert_eq!(relation_in_view(&s, 0, 1, ViewId::West), Some(Relation::InFrontOf));
        assert_eq!(relation_in_view(&s, 0, 1, ViewId::East), Some(Relation::Behind));
    }

    #[test]
    fn count_answer_is_object_count() {
        let s = super::super::scene::generate_scene(
            4,
            &super::super::scene::SceneConfig {
                min_objects: 3,
                max_objects: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let q = generate_question_answer(&s, QuestionKind::Count, 9).unwrap();
        assert_eq!(q.correct_option(), Some("3"));
        assert_eq!(q.options.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn three_four_five() {
        let s = two((0, 0), (3, 4));
        assert_eq!(planar_distance(&s, 0, 1), 5.0);
        let q = generate_question_answer(&s, QuestionKind::NumericDistance, 1).unwrap();
        assert_eq!(q.answer, Answer::Number(5.0));
        assert_eq!(q.answer.text(), "5.0");
    }

    #[test]
    fn single_object_relational_kinds_fail() {
        let mut s = two((0, 0), (3, 4));
        s.objects.pop();
        assert!(matches!(
            generate_question_answer(&s, QuestionKind::RelativeDirection, 0),
            Err(Error::UnsupportedKindForScene { .. })
        ));
    }
}
