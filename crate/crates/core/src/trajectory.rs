//! Reasoning trajectories: a latent block of `k` placeholder tokens plus a
//! think block and an answer block, in a fixed order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{SpecialTokenSet, TokenId, Vocab};

/// Where the latent block sits relative to the think/answer scaffold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LatentPosition {
    /// Before `<think>`.
    #[default]
    Beginning,
    /// Inside the think block.
    Middle,
    /// After `</answer>`.
    End,
}

impl LatentPosition {
    pub const ALL: [LatentPosition; 3] = [Self::Beginning, Self::Middle, Self::End];

    pub fn name(self) -> &'static str {
        match self {
            Self::Beginning => "beginning",
            Self::Middle => "middle",
            Self::End => "end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatGrammar {
    pub latent_size: usize,
    #[serde(default)]
    pub position: LatentPosition,
}

impl FormatGrammar {
    pub fn new(latent_size: usize) -> Self {
        Self {
            latent_size,
            position: LatentPosition::Beginning,
        }
    }

    /// The token after which generation stops.
    pub fn terminal_token(&self, specials: &SpecialTokenSet) -> TokenId {
        match self.position {
            LatentPosition::End => specials.latent_end,
            _ => specials.answer_close,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrajectory {
    pub tokens: Vec<TokenId>,
    /// Inclusive indices of `latent_start` and `latent_end` of the first
    /// well-formed latent block, if any.
    pub latent_span: Option<(usize, usize)>,
}

impl ReasoningTrajectory {
    /// Wraps a raw token sequence, locating the first well-formed latent
    /// block (a start token, only pads, then an end token).
    pub fn new(tokens: Vec<TokenId>, specials: &SpecialTokenSet) -> Self {
        let latent_span = first_block(&tokens, specials);
        Self {
            tokens,
            latent_span,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Indices of pad tokens inside the located latent block.
    pub fn latent_pad_indices(&self) -> std::ops::Range<usize> {
        match self.latent_span {
            Some((s, e)) => s + 1..e,
            None => 0..0,
        }
    }

    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.decode(&self.tokens)
    }
}

fn first_block(tokens: &[TokenId], sp: &SpecialTokenSet) -> Option<(usize, usize)> {
    let start = tokens.iter().position(|&t| t == sp.latent_start)?;
    let mut i = start + 1;
    while i < tokens.len() && tokens[i] == sp.latent_pad {
        i += 1;
    }
    (i < tokens.len() && tokens[i] == sp.latent_end).then_some((start, i))
}

/// The three parts of a trajectory: text before the block, the block
/// itself (start, pads, end), and text after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposed {
    pub pre: Vec<TokenId>,
    pub latent: Vec<TokenId>,
    pub post: Vec<TokenId>,
}

/// Splits `pre ++ latent ++ post`. Requires zero or exactly one balanced
/// block whose interior is all pads, and no pads elsewhere.
pub fn decompose_trajectory(
    traj: &ReasoningTrajectory,
    specials: &SpecialTokenSet,
) -> Result<Decomposed> {
    let toks = &traj.tokens;
    let starts: Vec<usize> = positions(toks, specials.latent_start);
    let ends: Vec<usize> = positions(toks, specials.latent_end);
    let pads = positions(toks, specials.latent_pad);
    match (starts.as_slice(), ends.as_slice()) {
        ([], []) => {
            if !pads.is_empty() {
                return Err(Error::MalformedLatentBlock(format!(
                    "latent_pad at index {} outside a block",
                    pads[0]
                )));
            }
            Ok(Decomposed {
                pre: toks.clone(),
                latent: Vec::new(),
                post: Vec::new(),
            })
        }
        ([s], [e]) if s < e => {
            if let Some(bad) = (s + 1..*e).find(|&i| toks[i] != specials.latent_pad) {
                return Err(Error::MalformedLatentBlock(format!(
                    "non-pad token inside block at index {bad}"
                )));
            }
            if let Some(p) = pads.iter().find(|&&p| p < *s || p > *e) {
                return Err(Error::MalformedLatentBlock(format!(
                    "latent_pad at index {p} outside the block"
                )));
            }
            Ok(Decomposed {
                pre: toks[..*s].to_vec(),
                latent: toks[*s..=*e].to_vec(),
                post: toks[e + 1..].to_vec(),
            })
        }
        _ => Err(Error::MalformedLatentBlock(format!(
            "{} latent_start and {} latent_end tokens",
            starts.len(),
            ends.len()
        ))),
    }
}

fn positions(toks: &[TokenId], t: TokenId) -> Vec<usize> {
    toks.iter()
        .enumerate()
        .filter_map(|(i, &x)| (x == t).then_some(i))
        .collect()
}

/// Builds `pre ++ [start, pad x k, end] ++ post`.
pub fn compose_trajectory(
    pre: &[TokenId],
    k: usize,
    post: &[TokenId],
    specials: &SpecialTokenSet,
) -> Result<ReasoningTrajectory> {
    if k == 0 {
        return Err(Error::MalformedLatentBlock("latent size must be >= 1".into()));
    }
    let vocab = Vocab::standard();
    if let Some(&t) = pre.iter().chain(post).find(|&&t| specials.is_latent(t)) {
        return Err(Error::IllegalTokenInText {
            token: vocab.surface(t).to_string(),
        });
    }
    let mut tokens = Vec::with_capacity(pre.len() + k + 2 + post.len());
    tokens.extend_from_slice(pre);
    tokens.push(specials.latent_start);
    tokens.extend(std::iter::repeat(specials.latent_pad).take(k));
    tokens.push(specials.latent_end);
    tokens.extend_from_slice(post);
    Ok(ReasoningTrajectory::new(tokens, specials))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Text,
    Special(TokenId),
    Pads(usize),
}

#[derive(Debug, Clone, Copy)]
enum Expect {
    OptText,
    Text,
    Special(TokenId),
    Block,
}

fn segments(tokens: &[TokenId], sp: &SpecialTokenSet) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for &t in tokens {
        let seg = if t == sp.latent_pad {
            Segment::Pads(1)
        } else if sp.is_special(t) {
            Segment::Special(t)
        } else {
            Segment::Text
        };
        match (out.last_mut(), seg) {
            (Some(Segment::Text), Segment::Text) => {}
            (Some(Segment::Pads(n)), Segment::Pads(_)) => *n += 1,
            _ => out.push(seg),
        }
    }
    out
}

/// True iff the trajectory matches the grammar exactly, including the pad
/// count and the absence of any other special token.
pub fn validate_format(
    traj: &ReasoningTrajectory,
    grammar: &FormatGrammar,
    specials: &SpecialTokenSet,
) -> bool {
    use Expect::*;
    let sp = specials;
    let scaffold_tail = [
        Special(sp.think_close),
        Special(sp.answer_open),
        Text,
        Special(sp.answer_close),
    ];
    let mut pattern: Vec<Expect> = Vec::with_capacity(12);
    match grammar.position {
        LatentPosition::Beginning => {
            pattern.extend([OptText, Block, OptText, Special(sp.think_open), OptText]);
            pattern.extend(scaffold_tail);
        }
        LatentPosition::Middle => {
            pattern.extend([OptText, Special(sp.think_open), OptText, Block, OptText]);
            pattern.extend(scaffold_tail);
        }
        LatentPosition::End => {
            pattern.extend([OptText, Special(sp.think_open), OptText]);
            pattern.extend(scaffold_tail);
            pattern.extend([OptText, Block]);
        }
    }

    let segs = segments(&traj.tokens, sp);
    let mut i = 0;
    for exp in pattern {
        match exp {
            OptText => {
                if segs.get(i) == Some(&Segment::Text) {
                    i += 1;
                }
            }
            Text => {
                if segs.get(i) != Some(&Segment::Text) {
                    return false;
                }
                i += 1;
            }
            Special(t) => {
                if segs.get(i) != Some(&Segment::Special(t)) {
                    return false;
                }
                i += 1;
            }
            Block => {
                let ok = segs.get(i) == Some(&Segment::Special(sp.latent_start))
                    && segs.get(i + 1) == Some(&Segment::Pads(grammar.latent_size))
                    && segs.get(i + 2) == Some(&Segment::Special(sp.latent_end));
                if !ok {
                    return false;
                }
                i += 3;
            }
        }
    }
    i == segs.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp() -> SpecialTokenSet {
        Vocab::standard().specials()
    }

    fn t(text: &str) -> Vec<TokenId> {
        Vocab::standard().encode(text).unwrap()
    }

    #[test]
    fn decompose_splits_block() {
        let s = sp();
        let (t1, t2) = (0, 1);
        let traj = ReasoningTrajectory::new(
            vec![t1, s.latent_start, s.latent_pad, s.latent_pad, s.latent_end, t2],
            &s,
        );
        let d = decompose_trajectory(&traj, &s).unwrap();
        assert_eq!(d.pre, vec![t1]);
        assert_eq!(
            d.latent,
            vec![s.latent_start, s.latent_pad, s.latent_pad, s.latent_end]
        );
        assert_eq!(d.post, vec![t2]);
        assert_eq!(traj.latent_span, Some((1, 4)));
    }

    #[test]
    fn decompose_without_block() {
        let s = sp();
        let traj = ReasoningTrajectory::new(vec![3, 4], &s);
        let d = decompose_trajectory(&traj, &s).unwrap();
        assert_eq!(d.pre, vec![3, 4]);
        assert!(d.latent.is_empty() && d.post.is_empty());
    }

    #[test]
    fn decompose_rejects_unbalanced() {
        let s = sp();
        let traj = ReasoningTrajectory::new(
            vec![s.latent_start, s.latent_pad, s.latent_end, s.latent_start],
            &s,
        );
        assert!(matches!(
            decompose_trajectory(&traj, &s),
            Err(Error::MalformedLatentBlock(_))
        ));
        let stray = ReasoningTrajectory::new(
            vec![s.latent_pad, s.latent_start, s.latent_pad, s.latent_end],
            &s,
        );
        assert!(decompose_trajectory(&stray, &s).is_err());
        let bad_interior = ReasoningTrajectory::new(vec![s.latent_start, 0, s.latent_end], &s);
        assert!(decompose_trajectory(&bad_interior, &s).is_err());
    }

    #[test]
    fn compose_minimal_and_illegal() {
        let s = sp();
        let traj = compose_trajectory(&[], 2, &[], &s).unwrap();
        assert_eq!(
            traj.tokens,
            vec![s.latent_start, s.latent_pad, s.latent_pad, s.latent_end]
        );
        assert!(matches!(
            compose_trajectory(&[s.latent_pad], 2, &[], &s),
            Err(Error::IllegalTokenInText { .. })
        ));
    }

    fn scaffold(s: &SpecialTokenSet, k: usize, answer: bool) -> Vec<TokenId> {
        let mut v = vec![s.latent_start];
        v.extend(std::iter::repeat(s.latent_pad).take(k));
        v.push(s.latent_end);
        v.push(s.think_open);
        v.extend(t("the red cube is left of the blue sphere"));
        v.push(s.think_close);
        if answer {
            v.push(s.answer_open);
        }
        v.extend(t("A"));
        v.push(s.answer_close);
        v
    }

    #[test]
    fn format_accepts_reference_shape() {
        let s = sp();
        let g = FormatGrammar::new(12);
        assert!(validate_format(&ReasoningTrajectory::new(scaffold(&s, 12, true), &s), &g, &s));
        assert!(!validate_format(&ReasoningTrajectory::new(scaffold(&s, 12, false), &s), &g, &s));
        assert!(!validate_format(&ReasoningTrajectory::new(scaffold(&s, 11, true), &s), &g, &s));
    }

    #[test]
    fn format_rejects_block_inside_think() {
        let s = sp();
        let mut v = vec![s.think_open];
        v.extend(t("the red cube"));
        v.push(s.latent_start);
        v.extend(std::iter::repeat(s.latent_pad).take(12));
        v.push(s.latent_end);
        v.push(s.think_close);
        v.push(s.answer_open);
        v.extend(t("A"));
        v.push(s.answer_close);
        let traj = ReasoningTrajectory::new(v, &s);
        assert!(!validate_format(&traj, &FormatGrammar::new(12), &s));
        let middle = FormatGrammar {
            latent_size: 12,
            position: LatentPosition::Middle,
        };
        assert!(validate_format(&traj, &middle, &s));
    }

    #[test]
    fn format_allows_text_before_and_after_block() {
        let s = sp();
        let mut v = t("the");
        v.extend(scaffold(&s, 3, true));
        // insert text between latent_end and <think>
        v.insert(6, t("so")[0]);
        assert!(validate_format(&ReasoningTrajectory::new(v.clone(), &s), &FormatGrammar::new(3), &s));
        v.push(t("the")[0]);
        assert!(!validate_format(&ReasoningTrajectory::new(v, &s), &FormatGrammar::new(3), &s));
    }
}
