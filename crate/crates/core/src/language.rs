//! Prompt composition over a closed phrase vocabulary and the prompt encoder.
//!
//! Tokens are whole phrases ("target agent", "yields to", "turning left"), so
//! every label the synthesizer emits maps to a fixed token sequence.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DenoiserParams;
use crate::nn::{Mat, Tape, Var};
use crate::synth::{InteractionKind, InteractionLabel, LanePos, Subtype, Tag};

/// Largest "other agentK" index in the vocabulary.
pub const MAX_OTHER_AGENTS: usize = 7;
/// Tokens beyond this position are dropped by the encoder.
pub const MAX_PROMPT_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

fn lane_word(p: LanePos) -> &'static str {
    match p {
        LanePos::Rightmost => "rightmost",
        LanePos::Middle => "middle",
        LanePos::Leftmost => "leftmost",
    }
}

fn tag_phrases(tag: &Tag) -> Vec<String> {
    match tag {
        Tag::Parked => vec!["parked".into()],
        Tag::OffRoad => vec!["off road".into()],
        Tag::Static => vec!["static".into()],
        Tag::MovingSlowly => vec!["moving slowly".into()],
        Tag::SpeedingUp => vec!["speeding up".into()],
        Tag::SlowingDown => vec!["slowing down".into()],
        Tag::ConstantSpeed => vec!["moving at a constant speed".into()],
        Tag::TurningRight => vec!["turning right".into()],
        Tag::TurningLeft => vec!["turning left".into()],
        Tag::GoingStraight => vec!["going straight".into()],
        Tag::CrossingIntersection => vec!["crossing the intersection".into()],
        Tag::ApproachingIntersection => vec!["approaching the intersection".into()],
        Tag::LanePosition(p) => vec![format!("in the {} lane", lane_word(*p))],
        Tag::LaneChange { from, to } => vec![
            "changing lanes".into(),
            format!("from the {} lane", lane_word(*from)),
            format!("to the {} lane", lane_word(*to)),
        ],
    }
}

/// Verb phrase and optional trailing phrase for an interaction clause.
fn interaction_phrases(label: &InteractionLabel) -> (&'static str, Option<&'static str>) {
    use Subtype::*;
    match label.subtype {
        IntersectionYielding => ("yields to", Some("at the intersection")),
        MaintainingSpeed | PassingIntersectionWithYielders => ("goes before", Some("at the intersection")),
        StoppingBehindLead | StoppingBeforeIntersection => ("stops behind", None),
        FollowingLead | FollowingSlowLead | Tailgating => ("follows", None),
        HighSpeedOvertaking | StandardOvertaking | CarAvoidance => ("overtakes", None),
        OnRampAcceleratingMerge => ("accelerates to merge ahead of", None),
        s => match s.kind() {
            InteractionKind::LaneChange => ("changes lanes near", None),
            InteractionKind::FollowingStopping => ("follows", None),
            InteractionKind::Yielding => ("yields to", None),
            InteractionKind::Passing => ("goes before", None),
            InteractionKind::Overtaking => ("overtakes", None),
            InteractionKind::Merging => ("merges ahead of", None),
        },
    }
}

impl Vocabulary {
    /// The vocabulary covering every template phrase.
    pub fn standard() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| {
            let mut t: Vec<String> = vec!["target agent".into()];
            t.extend((1..=MAX_OTHER_AGENTS).map(|k| format!("other agent{k}")));
            for w in ["is", "and", "and is"] {
                t.push(w.into());
            }
            for w in [
                "yields to",
                "goes before",
                "stops behind",
                "follows",
                "overtakes",
                "accelerates to merge ahead of",
                "merges ahead of",
                "changes lanes near",
                "at the intersection",
            ] {
                t.push(w.into());
            }
            let lanes = [LanePos::Rightmost, LanePos::Middle, LanePos::Leftmost];
            let mut tags = vec![
                Tag::Parked,
                Tag::OffRoad,
                Tag::Static,
                Tag::MovingSlowly,
                Tag::SpeedingUp,
                Tag::SlowingDown,
                Tag::ConstantSpeed,
                Tag::TurningRight,
                Tag::TurningLeft,
                Tag::GoingStraight,
                Tag::CrossingIntersection,
                Tag::ApproachingIntersection,
            ];
            tags.extend(lanes.iter().map(|p| Tag::LanePosition(*p)));
            t.extend(tags.iter().flat_map(tag_phrases));
            t.push("changing lanes".into());
            for p in lanes {
                t.push(format!("from the {} lane", lane_word(p)));
            }
            for p in lanes {
                t.push(format!("to the {} lane", lane_word(p)));
            }
            Vocabulary { tokens: t }
        })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, a) in tokens.iter().enumerate() {
            if a.is_empty() || a.contains('\n') || tokens[..i].contains(a) {
                return Err(Error::Format(format!("bad or duplicate vocabulary entry {a:?}")));
            }
        }
        Ok(Self { tokens })
    }

    /// One token per line; the line index is the token id.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).filter(|l| !l.is_empty()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, phrase: &str) -> Result<u32> {
        self.tokens.iter().position(|t| t == phrase).map(|i| i as u32).ok_or_else(|| Error::UnknownToken(phrase.into()))
    }

    pub fn phrase(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Greedy longest-phrase tokenization of free text built from vocabulary
    /// phrases. Fails on any uncovered word.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let mut best = None;
            for j in (i + 1..=words.len()).rev() {
                if let Ok(id) = self.id(&words[i..j].join(" ")) {
                    best = Some((id, j));
                    break;
                }
            }
            let (id, j) = best.ok_or_else(|| Error::UnknownToken(words[i].into()))?;
            out.push(id);
            i = j;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub tokens: Vec<u32>,
    pub raw: String,
    pub target_agent: usize,
}

impl PromptText {
    pub fn from_phrases(phrases: &[String], target_agent: usize) -> Result<Self> {
        let vocab = Vocabulary::standard();
        let tokens = phrases.iter().map(|p| vocab.id(p)).collect::<Result<_>>()?;
        Ok(Self { tokens, raw: phrases.join(" "), target_agent })
    }

    pub fn parse(text: &str, target_agent: usize) -> Result<Self> {
        let tokens = Vocabulary::standard().tokenize(text)?;
        Ok(Self { tokens, raw: text.split_whitespace().collect::<Vec<_>>().join(" "), target_agent })
    }
}

/// Role phrase for `agent` when `target` is the conditioned agent. Other
/// agents are numbered from 1 in id order, skipping the target.
pub fn role(agent: usize, target: usize) -> Result<String> {
    if agent == target {
        return Ok("target agent".into());
    }
    let k = if agent < target { agent + 1 } else { agent };
    if k > MAX_OTHER_AGENTS {
        return Err(Error::UnknownToken(format!("other agent{k}")));
    }
    Ok(format!("other agent{k}"))
}

/// Prompt for `target`: every interaction clause with roles rephrased
/// relative to the target, followed by the target's own behavior tags.
pub fn compose_prompt(tags: &[Vec<Tag>], interactions: &[InteractionLabel], target: usize, n: usize) -> Result<PromptText> {
    if target >= n || tags.len() != n {
        return Err(Error::InvalidInput(format!("prompt target {target} or tag rows {} invalid for {n} agents", tags.len())));
    }
    let mut phrases: Vec<String> = Vec::new();
    let mut last_actor = None;
    for (k, label) in interactions.iter().enumerate() {
        if label.actor >= n || label.other >= n {
            return Err(Error::InvalidInput("interaction references an unknown agent".into()));
        }
        if k > 0 {
            phrases.push("and".into());
        }
        let (verb, tail) = interaction_phrases(label);
        phrases.push(role(label.actor, target)?);
        phrases.push(verb.into());
        phrases.push(role(label.other, target)?);
        if let Some(t) = tail {
            phrases.push(t.into());
        }
        last_actor = Some(label.actor);
    }
    let own = &tags[target];
    if !own.is_empty() {
        match last_actor {
            Some(a) if a == target => phrases.push("and is".into()),
            Some(_) => {
                phrases.push("and".into());
                phrases.push("target agent".into());
                phrases.push("is".into());
            }
            None => {
                phrases.push("target agent".into());
                phrases.push("is".into());
            }
        }
        for (k, tag) in own.iter().enumerate() {
            if k > 0 {
                phrases.push("and".into());
            }
            phrases.extend(tag_phrases(tag));
        }
    }
    PromptText::from_phrases(&phrases, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangEmbedding {
    pub vector: Vec<f64>,
    pub is_null: bool,
}

/// Records the prompt encoder on `t`: `FF(mean_i tanh(E[tok_i] + P[i]))`,
/// or the learned null vector for `None` or an empty prompt. Output `1 × d_lang`.
pub fn encode_prompt_on(t: &mut Tape, prompt: Option<&PromptText>) -> Result<Var> {
    let tokens = match prompt {
        Some(p) if !p.tokens.is_empty() => &p.tokens,
        _ => return Ok(t.named("lang.null")),
    };
    let emb = t.named("lang.tok");
    let vocab = t.value(emb).rows;
    let ids: Vec<usize> = tokens.iter().take(MAX_PROMPT_LEN).map(|&i| i as usize).collect();
    if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::UnknownToken(format!("token id {bad}")));
    }
    let pos_ids: Vec<usize> = (0..ids.len()).collect();
    let e = t.gather_rows(emb, &ids);
    let pos = t.named("lang.pos");
    let p = t.gather_rows(pos, &pos_ids);
    let s = t.add(e, p);
    let s = t.tanh(s);
    let m = t.mean_rows(s);
    let h = t.linear(m, "lang.l1");
    let h = t.gelu(h);
    Ok(t.linear(h, "lang.l2"))
}

pub fn encode_prompt(prompt: Option<&PromptText>, params: &DenoiserParams) -> Result<LangEmbedding> {
    let mut t = Tape::new(&params.store);
    let v = encode_prompt_on(&mut t, prompt)?;
    let is_null = prompt.is_none_or(|p| p.tokens.is_empty());
    Ok(LangEmbedding { vector: t.value(v).data.clone(), is_null })
}

/// `z_lang = W [e_lang; z_enc] + b`, rowwise for `n × d_lang` and `n × d_model` inputs.
pub fn fuse_on(t: &mut Tape, e_lang: Var, z_enc: Var) -> Var {
    let x = t.concat_cols(&[e_lang, z_enc]);
    t.linear(x, "fuse")
}

pub fn fuse_language(e_lang: &LangEmbedding, z_enc: &[f64], params: &DenoiserParams) -> Result<Vec<f64>> {
    let c = &params.config;
    if e_lang.vector.len() != c.d_lang || z_enc.len() != c.d_model {
        return Err(Error::Shape(format!(
            "fuse expects {} + {} dims, got {} + {}",
            c.d_lang,
            c.d_model,
            e_lang.vector.len(),
            z_enc.len()
        )));
    }
    let mut t = Tape::new(&params.store);
    let e = t.leaf(Mat::from_vec(1, c.d_lang, e_lang.vector.clone()));
    let z = t.leaf(Mat::from_vec(1, c.d_model, z_enc.to_vec()));
    let out = fuse_on(&mut t, e, z);
    Ok(t.value(out).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn yield01() -> InteractionLabel {
        InteractionLabel::new(0, 1, Subtype::IntersectionYielding).unwrap()
    }

    #[test]
    fn yield_roles() {
        let tags = vec![vec![], vec![]];
        let p0 = compose_prompt(&tags, &[yield01()], 0, 2).unwrap();
        assert_eq!(p0.raw, "target agent yields to other agent1 at the intersection");
        let p1 = compose_prompt(&tags, &[yield01()], 1, 2).unwrap();
        assert_eq!(p1.raw, "other agent1 yields to target agent at the intersection");
        assert_eq!(p1.target_agent, 1);
    }

    #[test]
    fn compositional_prompt_is_one_sentence() {
        let tags = vec![vec![Tag::SlowingDown], vec![]];
        let p = compose_prompt(&tags, &[yield01()], 0, 2).unwrap();
        assert_eq!(p.raw, "target agent yields to other agent1 at the intersection and is slowing down");
        let p = compose_prompt(&vec![vec![], vec![Tag::SlowingDown, Tag::TurningLeft]], &[yield01()], 1, 2).unwrap();
        assert_eq!(p.raw, "other agent1 yields to target agent at the intersection and target agent is slowing down and turning left");
    }

    #[test]
    fn prompts_round_trip_through_tokenizer() {
        let tags = vec![vec![Tag::LaneChange { from: LanePos::Rightmost, to: LanePos::Leftmost }], vec![Tag::ConstantSpeed]];
        let label = InteractionLabel::new(0, 1, Subtype::HighSpeedOvertaking).unwrap();
        for target in 0..2 {
            let p = compose_prompt(&tags, &[label], target, 2).unwrap();
            assert_eq!(Vocabulary::standard().tokenize(&p.raw).unwrap(), p.tokens);
        }
        assert!(matches!(Vocabulary::standard().tokenize("target agent flies"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn too_many_agents_is_unknown_token() {
        let tags = vec![vec![]; 10];
        let label = InteractionLabel::new(9, 0, Subtype::FollowingLead).unwrap();
        assert!(matches!(compose_prompt(&tags, &[label], 0, 10), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::standard();
        assert_eq!(&Vocabulary::parse(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::parse("a\nb\na\n").is_err());
    }

    fn small() -> DenoiserParams {
        init_params(7, &ModelConfig { d_model: 16, d_lang: 8, heads: 2, ..ModelConfig::default() }).unwrap()
    }

    #[test]
    fn null_and_determinism() {
        let p = small();
        let null = encode_prompt(None, &p).unwrap();
        assert!(null.is_null);
        assert_eq!(null.vector, p.store.values[p.store.index("lang.null").unwrap()].data);
        let empty = PromptText { tokens: vec![], raw: String::new(), target_agent: 0 };
        assert_eq!(encode_prompt(Some(&empty), &p).unwrap(), null);
        let q = compose_prompt(&[vec![Tag::TurningLeft]], &[], 0, 1).unwrap();
        let a = encode_prompt(Some(&q), &p).unwrap();
        let b = encode_prompt(Some(&q), &p).unwrap();
        assert!(!a.is_null);
        assert_eq!(a.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    /// Every template over a small label universe, with both role assignments.
    #[test]
    fn role_swaps_and_templates_are_distinct() {
        let p = small();
        let mut seen: Vec<(String, Vec<f64>)> = Vec::new();
        let subtypes = [
            Subtype::IntersectionYielding,
            Subtype::MaintainingSpeed,
            Subtype::FollowingLead,
            Subtype::StoppingBehindLead,
            Subtype::HighSpeedOvertaking,
            Subtype::LaneChangeWithLeadOrTrail,
            Subtype::StandardMerge,
            Subtype::OnRampAcceleratingMerge,
        ];
        let tag_sets = [vec![], vec![Tag::TurningLeft], vec![Tag::TurningRight], vec![Tag::SlowingDown, Tag::GoingStraight]];
        for sub in subtypes {
            for (a, b) in [(0, 1), (1, 0)] {
                for tags in &tag_sets {
                    for target in 0..2 {
                        let mut rows = vec![vec![], vec![]];
                        rows[target] = tags.clone();
                        let q = compose_prompt(&rows, &[InteractionLabel::new(a, b, sub).unwrap()], target, 2).unwrap();
                        if seen.iter().any(|(r, _)| *r == q.raw) {
                            continue;
                        }
                        let e = encode_prompt(Some(&q), &p).unwrap().vector;
                        for (r, other) in &seen {
                            assert!(other != &e, "{r:?} and {:?} collide", q.raw);
                        }
                        seen.push((q.raw, e));
                    }
                }
            }
        }
        assert!(seen.len() >= 60, "{}", seen.len());
    }

    #[test]
    fn fuse_bias_path_and_sensitivity() {
        let p = small();
        let c = &p.config;
        let mut null = encode_prompt(None, &p).unwrap();
        null.vector = vec![0.0; c.d_lang];
        let out = fuse_language(&null, &vec![0.0; c.d_model], &p).unwrap();
        assert_eq!(out, p.store.values[p.store.index("fuse.b").unwrap()].data);
        let z: Vec<f64> = (0..c.d_model).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = compose_prompt(&[vec![Tag::TurningLeft]], &[], 0, 1).unwrap();
        let e = encode_prompt(Some(&q), &p).unwrap();
        let base = fuse_language(&e, &z, &p).unwrap();
        let mut bumped = e.clone();
        bumped.vector[0] += 1e-4;
        let moved = fuse_language(&bumped, &z, &p).unwrap();
        let sens = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / 1e-4;
        assert!(sens > 0.0);
        assert!(fuse_language(&e, &z[1..], &p).is_err());
    }
}
