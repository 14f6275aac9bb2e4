//! The three manipulation-instruction families: a finite template grammar,
//! a generator that enumerates the instruction corpus, and the tokenizer and
//! vocabulary consumed by the language encoder.
//!
//! | family         | surface form                                                   |
//! |----------------|----------------------------------------------------------------|
//! | existence      | `Find the bottle with the <obj>, put it in the <dest> bowl.`    |
//! | classification | `Find all the <objs> and put them in the <dest> bowl.`          |
//! | exploratory    | `Check the bottle <relation> the <landmark> for <obj>.`          |
//!
//! `<dest>` is either a spatial relation (left, right, middle, front, back)
//! or a bowl color, never both.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classes::{Color, Landmark, ObjectClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Existence,
    Classification,
    Exploratory,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Existence, TaskKind::Classification, TaskKind::Exploratory];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Existence => "existence",
            TaskKind::Classification => "classification",
            TaskKind::Exploratory => "exploratory",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            TaskKind::Existence => "Existence",
            TaskKind::Classification => "Classification",
            TaskKind::Exploratory => "Exploratory",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown instruction type `{s}`"))
    }
}

/// Spatial relation naming a bowl among the bowls on the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DestRelation {
    Left,
    Right,
    Middle,
    Front,
    Back,
}

impl DestRelation {
    pub const ALL: [DestRelation; 5] = [
        DestRelation::Left,
        DestRelation::Right,
        DestRelation::Middle,
        DestRelation::Front,
        DestRelation::Back,
    ];

    pub fn word(self) -> &'static str {
        match self {
            DestRelation::Left => "left",
            DestRelation::Right => "right",
            DestRelation::Middle => "middle",
            DestRelation::Front => "front",
            DestRelation::Back => "back",
        }
    }
}

/// Relation between the referred bottle and a landmark object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRelation {
    On,
    NextTo,
    LeftOf,
    RightOf,
    Behind,
    InFrontOf,
}

impl AnchorRelation {
    pub const ALL: [AnchorRelation; 6] = [
        AnchorRelation::On,
        AnchorRelation::NextTo,
        AnchorRelation::LeftOf,
        AnchorRelation::RightOf,
        AnchorRelation::Behind,
        AnchorRelation::InFrontOf,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            AnchorRelation::On => "on",
            AnchorRelation::NextTo => "next to",
            AnchorRelation::LeftOf => "left of",
            AnchorRelation::RightOf => "right of",
            AnchorRelation::Behind => "behind",
            AnchorRelation::InFrontOf => "in front of",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Relation(DestRelation),
    Color(Color),
}

impl Destination {
    /// All destinations, relations first.
    pub fn all() -> Vec<Destination> {
        DestRelation::ALL
            .iter()
            .map(|r| Destination::Relation(*r))
            .chain(Color::ALL.iter().map(|c| Destination::Color(*c)))
            .collect()
    }

    pub fn word(self) -> &'static str {
        match self {
            Destination::Relation(r) => r.word(),
            Destination::Color(c) => c.name(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Anchor {
    pub relation: AnchorRelation,
    pub landmark: Landmark,
}

/// Parsed instruction frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Intent {
    pub kind: TaskKind,
    pub target: ObjectClass,
    pub destination: Option<Destination>,
    pub anchor: Option<Anchor>,
}

impl Intent {
    pub fn existence(target: ObjectClass, destination: Destination) -> Self {
        Self {
            kind: TaskKind::Existence,
            target,
            destination: Some(destination),
            anchor: None,
        }
    }

    pub fn classification(target: ObjectClass, destination: Destination) -> Self {
        Self {
            kind: TaskKind::Classification,
            target,
            destination: Some(destination),
            anchor: None,
        }
    }

    pub fn exploratory(target: ObjectClass, relation: AnchorRelation, landmark: Landmark) -> Self {
        Self {
            kind: TaskKind::Exploratory,
            target,
            destination: None,
            anchor: Some(Anchor { relation, landmark }),
        }
    }

    /// Existence and classification carry a destination only; exploratory an anchor only.
    pub fn validate(&self) -> Result<(), InstructionError> {
        let ok = match self.kind {
            TaskKind::Existence | TaskKind::Classification => self.destination.is_some() && self.anchor.is_none(),
            TaskKind::Exploratory => self.anchor.is_some() && self.destination.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(InstructionError::InvalidSlots(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstructionError {
    #[error("no instruction template matches (furthest match stopped at token {position}: `{token}`)")]
    Parse { position: usize, token: String },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("invalid slot combination: {0}")]
    InvalidSlots(String),
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\''))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Elem {
    Word(&'static str),
    OptWord(&'static str),
    /// One of several single words.
    Choice(&'static [&'static str]),
    Object,
    Dest,
    Relation,
    Landmark,
}

const EXISTENCE: &[Elem] = &[
    Elem::Word("find"),
    Elem::Word("the"),
    Elem::Word("bottle"),
    Elem::Word("with"),
    Elem::Word("the"),
    Elem::Object,
    Elem::OptWord("and"),
    Elem::Word("put"),
    Elem::Word("it"),
    Elem::Word("in"),
    Elem::Word("the"),
    Elem::Dest,
    Elem::Word("bowl"),
];

const CLASSIFICATION: &[Elem] = &[
    Elem::Word("find"),
    Elem::Word("all"),
    Elem::Word("the"),
    Elem::Object,
    Elem::OptWord("and"),
    Elem::Word("put"),
    Elem::Choice(&["them", "it"]),
    Elem::Word("in"),
    Elem::Word("the"),
    Elem::Dest,
    Elem::Word("bowl"),
];

const EXPLORATORY: &[Elem] = &[
    Elem::Word("check"),
    Elem::Word("the"),
    Elem::Word("bottle"),
    Elem::Relation,
    Elem::Word("the"),
    Elem::Landmark,
    Elem::Word("for"),
    Elem::Object,
];

#[derive(Clone, Copy, Default)]
struct Slots {
    object: Option<ObjectClass>,
    dest: Option<Destination>,
    relation: Option<AnchorRelation>,
    landmark: Option<Landmark>,
}

struct Furthest {
    position: usize,
    at_object_slot: bool,
}

fn phrase_matches(tokens: &[String], at: usize, phrase: &str) -> Option<usize> {
    let words: Vec<&str> = phrase.split(' ').collect();
    if at + words.len() > tokens.len() {
        return None;
    }
    words
        .iter()
        .zip(&tokens[at..])
        .all(|(w, t)| *w == t)
        .then_some(words.len())
}

/// Candidate (slot value, token length) pairs at `at` for a slot element.
fn slot_options(elem: Elem, tokens: &[String], at: usize) -> Vec<(Slots, usize)> {
    let mut out = Vec::new();
    match elem {
        Elem::Object => {
            for c in ObjectClass::ALL {
                let (s, p) = c.surface();
                let mut forms = vec![s];
                if p != s {
                    forms.push(p);
                }
                for f in forms {
                    if let Some(n) = phrase_matches(tokens, at, f) {
                        out.push((
                            Slots {
                                object: Some(c),
                                ..Slots::default()
                            },
                            n,
                        ));
                    }
                }
            }
        }
        Elem::Dest => {
            for d in Destination::all() {
                if let Some(n) = phrase_matches(tokens, at, d.word()) {
                    out.push((
                        Slots {
                            dest: Some(d),
                            ..Slots::default()
                        },
                        n,
                    ));
                }
            }
        }
        Elem::Relation => {
            for r in AnchorRelation::ALL {
                if let Some(n) = phrase_matches(tokens, at, r.phrase()) {
                    out.push((
                        Slots {
                            relation: Some(r),
                            ..Slots::default()
                        },
                        n,
                    ));
                }
            }
        }
        Elem::Landmark => {
            for l in Landmark::ALL {
                if let Some(n) = phrase_matches(tokens, at, l.name()) {
                    out.push((
                        Slots {
                            landmark: Some(l),
                            ..Slots::default()
                        },
                        n,
                    ));
                }
            }
        }
        _ => unreachable!("not a slot"),
    }
    // Longest phrase first ("wax pill" before "pill").
    out.sort_by_key(|e| std::cmp::Reverse(e.1));
    out
}

fn merge(a: Slots, b: Slots) -> Slots {
    Slots {
        object: a.object.or(b.object),
        dest: a.dest.or(b.dest),
        relation: a.relation.or(b.relation),
        landmark: a.landmark.or(b.landmark),
    }
}

fn match_template(elems: &[Elem], tokens: &[String], at: usize, slots: Slots, furthest: &mut Furthest) -> Option<Slots> {
    if at > furthest.position || (at == furthest.position && !furthest.at_object_slot) {
        furthest.position = at;
        furthest.at_object_slot = matches!(elems.first(), Some(Elem::Object | Elem::Landmark));
    }
    let Some((&head, rest)) = elems.split_first() else {
        return (at == tokens.len()).then_some(slots);
    };
    match head {
        Elem::Word(w) => {
            if tokens.get(at).map(String::as_str) == Some(w) {
                match_template(rest, tokens, at + 1, slots, furthest)
            } else {
                None
            }
        }
        Elem::OptWord(w) => {
            if tokens.get(at).map(String::as_str) == Some(w) {
                if let Some(s) = match_template(rest, tokens, at + 1, slots, furthest) {
                    return Some(s);
                }
            }
            match_template(rest, tokens, at, slots, furthest)
        }
        Elem::Choice(ws) => {
            if tokens.get(at).is_some_and(|t| ws.contains(&t.as_str())) {
                match_template(rest, tokens, at + 1, slots, furthest)
            } else {
                None
            }
        }
        slot => {
            for (value, n) in slot_options(slot, tokens, at) {
                if let Some(s) = match_template(rest, tokens, at + n, merge(slots, value), furthest) {
                    return Some(s);
                }
            }
            None
        }
    }
}

/// Parses one instruction line into an [`Intent`].
pub fn parse(text: &str) -> Result<Intent, InstructionError> {
    let tokens = normalize(text);
    let mut best = Furthest {
        position: 0,
        at_object_slot: false,
    };
    let families = [
        (TaskKind::Existence, EXISTENCE),
        (TaskKind::Classification, CLASSIFICATION),
        (TaskKind::Exploratory, EXPLORATORY),
    ];
    for (kind, elems) in families {
        let mut furthest = Furthest {
            position: 0,
            at_object_slot: false,
        };
        if let Some(s) = match_template(elems, &tokens, 0, Slots::default(), &mut furthest) {
            let target = s.object.expect("object slot filled");
            let intent = match kind {
                TaskKind::Existence => Intent::existence(target, s.dest.expect("dest slot")),
                TaskKind::Classification => Intent::classification(target, s.dest.expect("dest slot")),
                TaskKind::Exploratory => {
                    Intent::exploratory(target, s.relation.expect("relation slot"), s.landmark.expect("landmark slot"))
                }
            };
            return Ok(intent);
        }
        if furthest.position > best.position {
            best = furthest;
        }
    }
    let token = tokens.get(best.position).cloned().unwrap_or_default();
    if best.at_object_slot && !token.is_empty() {
        Err(InstructionError::UnknownObject(token))
    } else {
        Err(InstructionError::Parse {
            position: best.position,
            token,
        })
    }
}

/// Number of surface variants for a family.
pub fn variant_count(kind: TaskKind) -> usize {
    match kind {
        TaskKind::Existence | TaskKind::Classification => 2,
        TaskKind::Exploratory => 1,
    }
}

/// Deterministic surface form of an intent.
pub fn render(intent: &Intent, variant: usize) -> Result<String, InstructionError> {
    intent.validate()?;
    if variant >= variant_count(intent.kind) {
        return Err(InstructionError::InvalidSlots(format!("variant {variant} for {}", intent.kind)));
    }
    let (singular, plural) = intent.target.surface();
    Ok(match intent.kind {
        TaskKind::Existence => {
            let dest = intent.destination.expect("validated").word();
            let joiner = if variant == 0 { "," } else { " and" };
            format!("Find the bottle with the {singular}{joiner} put it in the {dest} bowl.")
        }
        TaskKind::Classification => {
            let dest = intent.destination.expect("validated").word();
            let joiner = if variant == 0 { "" } else { "," };
            format!("Find all the {plural}{joiner} and put them in the {dest} bowl.")
        }
        TaskKind::Exploratory => {
            let a = intent.anchor.expect("validated");
            format!(
                "Check the bottle {} the {} for {singular}.",
                a.relation.phrase(),
                a.landmark.name()
            )
        }
    })
}

/// Renders an intent with a seeded choice of surface variant.
pub fn generate(intent: &Intent, seed: u64) -> Result<String, InstructionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = rng.gen_range(0..variant_count(intent.kind));
    render(intent, variant)
}

/// Exploratory corpus: every landmark and relation, each paired with two
/// target classes (`i` and `i + 6` for the relation with ordinal `i`), so all
/// twelve classes appear for every landmark: 3 × 6 × 2 = 36.
fn exploratory_intents() -> Vec<Intent> {
    let mut out = Vec::new();
    for landmark in Landmark::ALL {
        for relation in AnchorRelation::ALL {
            for offset in [0, 6] {
                let target = ObjectClass::ALL[relation.ordinal() + offset];
                out.push(Intent::exploratory(target, relation, landmark));
            }
        }
    }
    out
}

/// Every (intent, variant) of one family: 12 targets × 12 destinations × 2
/// variants for existence and classification, 36 for exploratory.
pub fn enumerate(kind: TaskKind) -> Vec<(Intent, usize)> {
    match kind {
        TaskKind::Exploratory => exploratory_intents().into_iter().map(|i| (i, 0)).collect(),
        _ => {
            let mut out = Vec::new();
            for target in ObjectClass::ALL {
                for dest in Destination::all() {
                    let intent = if kind == TaskKind::Existence {
                        Intent::existence(target, dest)
                    } else {
                        Intent::classification(target, dest)
                    };
                    for v in 0..variant_count(kind) {
                        out.push((intent, v));
                    }
                }
            }
            out
        }
    }
}

/// The full 612-sentence corpus.
pub fn corpus() -> Vec<(Intent, String)> {
    TaskKind::ALL
        .iter()
        .flat_map(|k| enumerate(*k))
        .map(|(intent, v)| {
            let text = render(&intent, v).expect("enumerated intents are valid");
            (intent, text)
        })
        .collect()
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Word list with dense indices; index 0 is reserved for unknown words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words.into_iter().filter(|w| w != UNKNOWN_TOKEN).collect();
        let mut list = vec![UNKNOWN_TOKEN.to_string()];
        list.extend(set);
        Self::from_list(list)
    }

    fn from_list(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Every word any template can produce.
    pub fn from_templates() -> Self {
        let mut words: Vec<String> = Vec::new();
        for elems in [EXISTENCE, CLASSIFICATION, EXPLORATORY] {
            for e in elems {
                match e {
                    Elem::Word(w) | Elem::OptWord(w) => words.push(w.to_string()),
                    Elem::Choice(ws) => words.extend(ws.iter().map(|w| w.to_string())),
                    _ => {}
                }
            }
        }
        let phrases = ObjectClass::ALL
            .iter()
            .flat_map(|c| [c.surface().0, c.surface().1])
            .chain(Destination::all().into_iter().map(|d| d.word()))
            .chain(AnchorRelation::ALL.iter().map(|r| r.phrase()))
            .chain(Landmark::ALL.iter().map(|l| l.name()));
        for p in phrases {
            words.extend(p.split(' ').map(str::to_string));
        }
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        normalize(text).iter().map(|w| self.index_of(w)).collect()
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_list(self.words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_existence_example() {
        let i = parse("Find the bottle with the hawthorn, put it in the left bowl.").unwrap();
        assert_eq!(i, Intent::existence(ObjectClass::Hawthorn, Destination::Relation(DestRelation::Left)));
    }

    #[test]
    fn parses_exploratory_example() {
        let i = parse("Check the bottle on the banana for hawthorn.").unwrap();
        assert_eq!(i, Intent::exploratory(ObjectClass::Hawthorn, AnchorRelation::On, Landmark::Banana));
    }

    #[test]
    fn parses_classification_example_and_template_forms() {
        let expected = Intent::classification(ObjectClass::Hawthorn, Destination::Color(Color::Green));
        assert_eq!(parse("Find all the hawthorns and put them in the green bowl.").unwrap(), expected);
        assert_eq!(parse("Find all the hawthorn, and put it in the green bowl .").unwrap(), expected);
    }

    #[test]
    fn parse_is_case_and_whitespace_insensitive() {
        let a = parse("  FIND the   Bottle with THE wax pill ,put it in the middle bowl").unwrap();
        assert_eq!(a, Intent::existence(ObjectClass::WaxPill, Destination::Relation(DestRelation::Middle)));
    }

    #[test]
    fn multiword_relations_and_objects() {
        let a = parse("Check the bottle in front of the book for cicada slough.").unwrap();
        assert_eq!(a, Intent::exploratory(ObjectClass::CicadaSlough, AnchorRelation::InFrontOf, Landmark::Book));
    }

    #[test]
    fn unknown_object_is_reported() {
        let e = parse("Find the bottle with the spoon, put it in the left bowl.").unwrap_err();
        assert_eq!(e, InstructionError::UnknownObject("spoon".into()));
        let e = parse("Check the bottle on the laptop for pill.").unwrap_err();
        assert_eq!(e, InstructionError::UnknownObject("laptop".into()));
    }

    #[test]
    fn malformed_instruction_reports_furthest_position() {
        let e = parse("Find the bottle with the pill, put it in the purple bowl.").unwrap_err();
        assert_eq!(
            e,
            InstructionError::Parse {
                position: 10,
                token: "purple".into()
            }
        );
        assert!(matches!(parse(""), Err(InstructionError::Parse { position: 0, .. })));
    }

    #[test]
    fn generate_examples() {
        let i = Intent::existence(ObjectClass::Pill, Destination::Color(Color::Green));
        assert_eq!(render(&i, 0).unwrap(), "Find the bottle with the pill, put it in the green bowl.");
        let g = generate(&i, 3).unwrap();
        assert_eq!(parse(&g).unwrap(), i);
        let c = Intent::classification(ObjectClass::Pill, Destination::Relation(DestRelation::Left));
        for v in 0..variant_count(TaskKind::Classification) {
            assert!(render(&c, v).unwrap().contains("put them"));
        }
    }

    #[test]
    fn invalid_slots_are_rejected() {
        let mut i = Intent::existence(ObjectClass::Pill, Destination::Color(Color::Red));
        i.anchor = Some(Anchor {
            relation: AnchorRelation::On,
            landmark: Landmark::Apple,
        });
        assert!(matches!(generate(&i, 0), Err(InstructionError::InvalidSlots(_))));
    }

    #[test]
    fn corpus_counts_and_round_trip() {
        assert_eq!(enumerate(TaskKind::Existence).len(), 288);
        assert_eq!(enumerate(TaskKind::Classification).len(), 288);
        assert_eq!(enumerate(TaskKind::Exploratory).len(), 36);
        let corpus = corpus();
        assert_eq!(corpus.len(), 612);
        let mut ok = 0;
        for (intent, text) in &corpus {
            if parse(text).as_ref() == Ok(intent) {
                ok += 1;
            }
        }
        assert_eq!(ok, 612);
        let distinct: BTreeSet<&String> = corpus.iter().map(|(_, t)| t).collect();
        assert_eq!(distinct.len(), 612);
    }

    #[test]
    fn tokenize_normalizes() {
        let v = Vocabulary::from_templates();
        assert!(v.tokenize("").is_empty());
        let t = v.tokenize("Left, left LEFT");
        assert_eq!(t.len(), 3);
        assert!(t[0] != 0 && t[0] == t[1] && t[1] == t[2]);
        assert_eq!(v.tokenize("zebra"), vec![0]);
    }

    #[test]
    fn corpus_has_no_unknown_tokens() {
        let v = Vocabulary::from_templates();
        for (_, text) in corpus() {
            assert!(!v.tokenize(&text).contains(&0), "{text}");
        }
    }

    #[test]
    fn vocabulary_survives_serialization() {
        let v = Vocabulary::from_templates();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str::<Vocabulary>(&s).unwrap().reindex();
        assert_eq!(back.words(), v.words());
        assert_eq!(back.index_of("bottle"), v.index_of("bottle"));
    }
}
