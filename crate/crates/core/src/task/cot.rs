//! Templated reasoning trajectories: the latent placeholder block, a think
//! block naming the queried objects and their relation, and the answer.

use super::question::{closest_view, relation_in_view, QuestionKind, SpatialQuestion};
use super::scene::GridScene;
use crate::trajectory::{LatentPosition, ReasoningTrajectory};
use crate::vocab::{TokenId, Vocab};

fn think_text(question: &SpatialQuestion, scene: &GridScene) -> String {
    let name = |i: usize| scene.objects[i].name();
    match question.kind {
        QuestionKind::RelativeDirection => {
            let (a, b) = (question.targets[0], question.targets[1]);
            let view = question.view.expect("relational question has a view");
            let rel = relation_in_view(scene, a, b, view).expect("question built from unambiguous pair");
            format!(
                "in the {} view the {} is {} the {}",
                view.word(),
                name(a),
                rel.phrase(),
                name(b)
            )
        }
        QuestionKind::Rotation => {
            let a = question.targets[0];
            let view = closest_view(scene, a).expect("question built from unique closest view");
            format!("the {} is nearest the {} side", name(a), view.word())
        }
        QuestionKind::Count => format!("there are {} objects", scene.objects.len()),
        QuestionKind::NumericDistance => {
            let (a, b) = (question.targets[0], question.targets[1]);
            let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
            format!(
                "the {} is at column {} row {} and the {} is at column {} row {}",
                name(a),
                oa.x,
                oa.y,
                name(b),
                ob.x,
                ob.y
            )
        }
    }
}

/// Reference trajectory with the latent block at the beginning.
pub fn synthesize_cot(question: &SpatialQuestion, scene: &GridScene, k: usize) -> ReasoningTrajectory {
    synthesize_cot_at(question, scene, k, LatentPosition::Beginning)
}

pub fn synthesize_cot_at(
    question: &SpatialQuestion,
    scene: &GridScene,
    k: usize,
    position: LatentPosition,
) -> ReasoningTrajectory {
    assert!(k >= 1, "latent size must be positive");
    let vocab = Vocab::standard();
    let sp = vocab.specials();
    let encode = |s: &str| vocab.encode(s).expect("templates use table words only");
    let think = encode(&think_text(question, scene));
    let answer = encode(&question.answer.text());

    let mut block: Vec<TokenId> = vec![sp.latent_start];
    block.extend(std::iter::repeat(sp.latent_pad).take(k));
    block.push(sp.latent_end);

    let mut tokens = Vec::with_capacity(think.len() + answer.len() + k + 8);
    if position == LatentPosition::Beginning {
        tokens.extend_from_slice(&block);
    }
    tokens.push(sp.think_open);
    if position == LatentPosition::Middle {
        let mid = think.len() / 2;
        tokens.extend_from_slice(&think[..mid]);
        tokens.extend_from_slice(&block);
        tokens.extend_from_slice(&think[mid..]);
    } else {
        tokens.extend_from_slice(&think);
    }
    tokens.push(sp.think_close);
    tokens.push(sp.answer_open);
    tokens.extend_from_slice(&answer);
    tokens.push(sp.answer_close);
    if position == LatentPosition::End {
        tokens.extend_from_slice(&block);
    }
    ReasoningTrajectory::new(tokens, &sp)
}

#[cfg(test)]
mod tests {
    use super::super::question::generate_question_answer;
    use super::super::scene::{generate_scene, SceneConfig};
    use super::*;
    use crate::trajectory::{validate_format, FormatGrammar};

    #[test]
    fn every_position_validates_under_its_grammar() {
        let sp = Vocab::standard().specials();
        let scene = generate_scene(3, &SceneConfig::default()).unwrap();
        for kind in QuestionKind::ALL {
            let q = generate_question_answer(&scene, kind, 5).unwrap();
            for pos in LatentPosition::ALL {
                let t = synthesize_cot_at(&q, &scene, 12, pos);
                let g = FormatGrammar {
                    latent_size: 12,
                    position: pos,
                };
                assert!(validate_format(&t, &g, &sp), "{kind:?} {pos:?}");
                let pads = t.tokens.iter().filter(|&&x| x == sp.latent_pad).count();
                assert_eq!(pads, 12);
            }
        }
    }

    #[test]
    fn smallest_block() {
        let sp = Vocab::standard().specials();
        let scene = generate_scene(1, &SceneConfig::default()).unwrap();
        let q = generate_question_answer(&scene, QuestionKind::Count, 0).unwrap();
        let t = synthesize_cot(&q, &scene, 1);
        assert_eq!(&t.tokens[..3], &[sp.latent_start, sp.latent_pad, sp.latent_end]);
    }
}
