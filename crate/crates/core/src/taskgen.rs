//! Deterministic generator for a desk-scale compositional reasoning
//! task: symbolic scenes of attributed objects on a small grid,
//! templated questions of five types, and ground-truth answers computed
//! by executing a predicate program against the scene.
//!
//! Scenes hold [`SCENE_OBJECTS`] objects with color, shape, size, and
//! material drawn from closed vocabularies plus a distinct 2-D grid
//! position. The knowledge base fed to the models is the per-object
//! one-hot attribute blocks plus scaled position scalars; a learned
//! affine projects them to model width at the model input.

use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TaskError;
use crate::tensor::Tensor;

pub const SCENE_OBJECTS: usize = 4;
pub const GRID: i64 = 4;
pub const MAX_QUESTION_LEN: usize = 20;

pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SHAPES: [&str; 3] = ["cube", "ball", "cylinder"];
pub const SHAPES_PLURAL: [&str; 3] = ["cubes", "balls", "cylinders"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 2] = ["metal", "rubber"];

/// One-hot attribute blocks plus two scaled position scalars.
pub const FEAT_DIM: usize = COLORS.len() + SHAPES.len() + SIZES.len() + MATERIALS.len() + 2;

/// Closed word list for questions. Order is the token id assignment.
pub const WORDS: [&str; 41] = [
    "is", "there", "a", "how", "many", "are", "more", "fewer", "than", "what", "do", "the",
    "and", "have", "same", "left", "of", "right", "behind", "in", "front", "color", "shape",
    "size", "material", "thing", "things", "cube", "cubes", "ball", "balls", "cylinder",
    "cylinders", "red", "blue", "green", "yellow", "small", "large", "metal", "rubber",
];

/// Closed answer list. Order is the answer id assignment.
pub const ANSWERS: [&str; 24] = [
    "yes", "no", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "red", "blue",
    "green", "yellow", "cube", "ball", "cylinder", "small", "large", "metal", "rubber",
];

pub fn token_id(word: &str) -> Result<usize, TaskError> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| TaskError::UnknownWord(word.to_string()))
}

pub fn answer_id(answer: &str) -> Result<usize, TaskError> {
    ANSWERS
        .iter()
        .position(|w| *w == answer)
        .ok_or_else(|| TaskError::UnknownAnswer(answer.to_string()))
}

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn n_answers() -> usize {
    ANSWERS.len()
}

// ── scenes ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
    pub material: usize,
    pub x: i64,
    pub y: i64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    /// Order-independent hash used for the train/val disjointness
    /// check.
    pub fn content_hash(&self) -> u64 {
        let mut sorted = self.objects.clone();
        sorted.sort();
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        sorted.hash(&mut hasher);
        hasher.finish()
    }
}

fn gen_scene(rng: &mut ChaCha8Rng) -> Scene {
    let mut cells: Vec<i64> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let objects = cells
        .into_iter()
        .take(SCENE_OBJECTS)
        .map(|cell| Object {
            color: rng.gen_range(0..COLORS.len()),
            shape: rng.gen_range(0..SHAPES.len()),
            size: rng.gen_range(0..SIZES.len()),
            material: rng.gen_range(0..MATERIALS.len()),
            x: cell % GRID,
            y: cell / GRID,
        })
        .collect();
    Scene { objects }
}

// ── programs ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrKind {
    Color,
    Shape,
    Size,
    Material,
}

impl AttrKind {
    pub const ALL: [AttrKind; 4] = [
        AttrKind::Color,
        AttrKind::Shape,
        AttrKind::Size,
        AttrKind::Material,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            AttrKind::Color => "color",
            AttrKind::Shape => "shape",
            AttrKind::Size => "size",
            AttrKind::Material => "material",
        }
    }

    pub fn value_word(&self, obj: &Object) -> &'static str {
        match self {
            AttrKind::Color => COLORS[obj.color],
            AttrKind::Shape => SHAPES[obj.shape],
            AttrKind::Size => SIZES[obj.size],
            AttrKind::Material => MATERIALS[obj.material],
        }
    }

    fn values(&self) -> usize {
        match self {
            AttrKind::Color => COLORS.len(),
            AttrKind::Shape => SHAPES.len(),
            AttrKind::Size => SIZES.len(),
            AttrKind::Material => MATERIALS.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Filter {
    pub color: Option<usize>,
    pub shape: Option<usize>,
    pub size: Option<usize>,
    pub material: Option<usize>,
}

impl Filter {
    pub fn matches(&self, o: &Object) -> bool {
        self.color.map_or(true, |c| o.color == c)
            && self.shape.map_or(true, |s| o.shape == s)
            && self.size.map_or(true, |s| o.size == s)
            && self.material.map_or(true, |m| o.material == m)
    }

    pub fn constrains(&self, attr: AttrKind) -> bool {
        match attr {
            AttrKind::Color => self.color.is_some(),
            AttrKind::Shape => self.shape.is_some(),
            AttrKind::Size => self.size.is_some(),
            AttrKind::Material => self.material.is_some(),
        }
    }

    pub fn num_constraints(&self) -> usize {
        AttrKind::ALL.iter().filter(|a| self.constrains(**a)).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    Behind,
    Front,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Left,
        Relation::Right,
        Relation::Behind,
        Relation::Front,
    ];

    pub fn holds(&self, target: &Object, anchor: &Object) -> bool {
        match self {
            Relation::Left => target.x < anchor.x,
            Relation::Right => target.x > anchor.x,
            Relation::Behind => target.y < anchor.y,
            Relation::Front => target.y > anchor.y,
        }
    }

    fn tokens(&self) -> &'static [&'static str] {
        match self {
            Relation::Left => &["left", "of"],
            Relation::Right => &["right", "of"],
            Relation::Behind => &["behind"],
            Relation::Front => &["in", "front", "of"],
        }
    }
}

/// Executable ground-truth predicate tree. Internal only; never
/// serialized into the dataset.
#[derive(Clone, Debug)]
pub enum Program {
    Exist {
        filter: Filter,
    },
    ExistRel {
        rel: Relation,
        target: Filter,
        anchor: Filter,
    },
    Count {
        filter: Filter,
    },
    CountRel {
        rel: Relation,
        target: Filter,
        anchor: Filter,
    },
    CompareNum {
        more: bool,
        left: Filter,
        right: Filter,
    },
    QueryAttr {
        attr: AttrKind,
        target: Filter,
    },
    CompareAttr {
        attr: AttrKind,
        left: Filter,
        right: Filter,
    },
}

fn unique_match<'s>(scene: &'s Scene, filter: &Filter) -> Result<&'s Object, TaskError> {
    let mut it = scene.objects.iter().filter(|o| filter.matches(o));
    match (it.next(), it.next()) {
        (Some(o), None) => Ok(o),
        (None, _) => Err(TaskError::MalformedProgram(
            "referent matches no object".into(),
        )),
        _ => Err(TaskError::MalformedProgram(
            "referent is not unique".into(),
        )),
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Execute a program on a scene, giving the answer word.
pub fn execute_program(program: &Program, scene: &Scene) -> Result<String, TaskError> {
    match program {
        Program::Exist { filter } => Ok(yes_no(scene.objects.iter().any(|o| filter.matches(o)))),
        Program::ExistRel {
            rel,
            target,
            anchor,
        } => {
            let a = unique_match(scene, anchor)?;
            Ok(yes_no(scene
                .objects
                .iter()
                .any(|o| target.matches(o) && rel.holds(o, a))))
        }
        Program::Count { filter } => Ok(scene
            .objects
            .iter()
            .filter(|o| filter.matches(o))
            .count()
            .to_string()),
        Program::CountRel {
            rel,
            target,
            anchor,
        } => {
            let a = unique_match(scene, anchor)?;
            Ok(scene
                .objects
                .iter()
                .filter(|o| target.matches(o) && rel.holds(o, a))
                .count()
                .to_string())
        }
        Program::CompareNum { more, left, right } => {
            let cl = scene.objects.iter().filter(|o| left.matches(o)).count();
            let cr = scene.objects.iter().filter(|o| right.matches(o)).count();
            Ok(yes_no(if *more { cl > cr } else { cl < cr }))
        }
        Program::QueryAttr { attr, target } => {
            if target.constrains(*attr) {
                return Err(TaskError::MalformedProgram(
                    "queried attribute is constrained by the referent".into(),
                ));
            }
            let o = unique_match(scene, target)?;
            Ok(attr.value_word(o).to_string())
        }
        Program::CompareAttr { attr, left, right } => {
            if left.constrains(*attr) || right.constrains(*attr) {
                return Err(TaskError::MalformedProgram(
                    "compared attribute is constrained by a referent".into(),
                ));
            }
            let a = unique_match(scene, left)?;
            let b = unique_match(scene, right)?;
            Ok(yes_no(attr.value_word(a) == attr.value_word(b)))
        }
    }
}

// ── question rendering ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionType {
    Count,
    Exist,
    CompareNumbers,
    QueryAttribute,
    CompareAttribute,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::Count,
        QuestionType::Exist,
        QuestionType::CompareNumbers,
        QuestionType::QueryAttribute,
        QuestionType::CompareAttribute,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionType::Count => "count",
            QuestionType::Exist => "exist",
            QuestionType::CompareNumbers => "compare_numbers",
            QuestionType::QueryAttribute => "query_attribute",
            QuestionType::CompareAttribute => "compare_attribute",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TaskError> {
        QuestionType::ALL
            .iter()
            .copied()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| TaskError::UnknownQuestionType(s.to_string()))
    }
}

fn np_tokens(filter: &Filter, plural: bool) -> Vec<&'static str> {
    let mut toks = Vec::new();
    if let Some(s) = filter.size {
        toks.push(SIZES[s]);
    }
    if let Some(c) = filter.color {
        toks.push(COLORS[c]);
    }
    if let Some(m) = filter.material {
        toks.push(MATERIALS[m]);
    }
    match filter.shape {
        Some(s) => toks.push(if plural { SHAPES_PLURAL[s] } else { SHAPES[s] }),
        None => toks.push(if plural { "things" } else { "thing" }),
    }
    toks
}

/// Question tokens for a program. The comparative templates contain
/// two noun phrases by construction.
pub fn render_tokens(program: &Program) -> Vec<String> {
    let mut toks: Vec<&'static str> = Vec::new();
    match program {
        Program::Exist { filter } => {
            toks.extend(["is", "there", "a"]);
            toks.extend(np_tokens(filter, false));
        }
        Program::ExistRel {
            rel,
            target,
            anchor,
        } => {
            toks.extend(["is", "there", "a"]);
            toks.extend(np_tokens(target, false));
            toks.extend(rel.tokens());
            toks.push("the");
            toks.extend(np_tokens(anchor, false));
        }
        Program::Count { filter } => {
            toks.extend(["how", "many"]);
            toks.extend(np_tokens(filter, true));
            toks.extend(["are", "there"]);
        }
        Program::CountRel {
            rel,
            target,
            anchor,
        } => {
            toks.extend(["how", "many"]);
            toks.extend(np_tokens(target, true));
            toks.push("are");
            toks.extend(rel.tokens());
            toks.push("the");
            toks.extend(np_tokens(anchor, false));
        }
        Program::CompareNum { more, left, right } => {
            toks.extend(["are", "there"]);
            toks.push(if *more { "more" } else { "fewer" });
            toks.extend(np_tokens(left, true));
            toks.push("than");
            toks.extend(np_tokens(right, true));
        }
        Program::QueryAttr { attr, target } => {
            toks.extend(["what", attr.word(), "is", "the"]);
            toks.extend(np_tokens(target, false));
        }
        Program::CompareAttr { attr, left, right } => {
            toks.extend(["do", "the"]);
            toks.extend(np_tokens(left, false));
            toks.extend(["and", "the"]);
            toks.extend(np_tokens(right, false));
            toks.extend(["have", "the", "same", attr.word()]);
        }
    }
    debug_assert!(toks.len() <= MAX_QUESTION_LEN);
    toks.into_iter().map(String::from).collect()
}

// ── dataset records ─────────────────────────────────────────────────

/// One JSONL line. Field order is the wire order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub tokens: Vec<String>,
    #[serde(rename = "type")]
    pub question_type: String,
    pub answer: String,
    /// Per object: [color, shape, size, material, x, y].
    pub objects: Vec<Vec<i64>>,
}

impl ExampleRecord {
    fn new(scene: &Scene, program: &Program, qtype: QuestionType, answer: String) -> Self {
        ExampleRecord {
            tokens: render_tokens(program),
            question_type: qtype.as_str().to_string(),
            answer,
            objects: scene
                .objects
                .iter()
                .map(|o| {
                    vec![
                        o.color as i64,
                        o.shape as i64,
                        o.size as i64,
                        o.material as i64,
                        o.x,
                        o.y,
                    ]
                })
                .collect(),
        }
    }
}

/// Model-ready example: token ids, the raw knowledge-base feature
/// matrix, and the answer id.
#[derive(Clone, Debug)]
pub struct EncodedExample {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub kb: Tensor,
    pub answer: String,
    pub answer_id: usize,
    pub question_type: QuestionType,
}

pub fn encode(record: &ExampleRecord) -> Result<EncodedExample, TaskError> {
    let token_ids = record
        .tokens
        .iter()
        .map(|w| token_id(w))
        .collect::<Result<Vec<_>, _>>()?;
    let answer_id = answer_id(&record.answer)?;
    let question_type = QuestionType::parse(&record.question_type)?;

    let s = record.objects.len();
    let mut feats = vec![0.0; s * FEAT_DIM];
    for (i, o) in record.objects.iter().enumerate() {
        if o.len() != 6 {
            return Err(TaskError::BadScene(format!(
                "object row has {} fields, expected 6",
                o.len()
            )));
        }
        let row = &mut feats[i * FEAT_DIM..(i + 1) * FEAT_DIM];
        let (c, sh, sz, m, x, y) = (o[0], o[1], o[2], o[3], o[4], o[5]);
        let bounds = [
            (c, COLORS.len()),
            (sh, SHAPES.len()),
            (sz, SIZES.len()),
            (m, MATERIALS.len()),
        ];
        if bounds.iter().any(|&(v, n)| v < 0 || v as usize >= n) {
            return Err(TaskError::BadScene(format!("attribute out of range: {o:?}")));
        }
        let mut off = 0;
        row[off + c as usize] = 1.0;
        off += COLORS.len();
        row[off + sh as usize] = 1.0;
        off += SHAPES.len();
        row[off + sz as usize] = 1.0;
        off += SIZES.len();
        row[off + m as usize] = 1.0;
        off += MATERIALS.len();
        row[off] = x as f64 / (GRID - 1) as f64;
        row[off + 1] = y as f64 / (GRID - 1) as f64;
    }
    Ok(EncodedExample {
        tokens: record.tokens.clone(),
        token_ids,
        kb: Tensor::from_vec(vec![s, FEAT_DIM], feats)
            .map_err(|e| TaskError::BadScene(e.to_string()))?,
        answer: record.answer.clone(),
        answer_id,
        question_type,
    })
}

// ── generation ──────────────────────────────────────────────────────

const MAX_TRIES: usize = 500;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ExampleRecord>,
    pub val: Vec<ExampleRecord>,
}

/// Deterministic under `seed`. Question types cycle so the five types
/// stay balanced; per-type answer targets cycle so no answer dominates
/// its template. Validation scenes never collide with training scenes.
pub fn generate_dataset(n_train: usize, n_val: usize, seed: u64) -> Dataset {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_hashes = HashSet::new();
    let train = gen_split(n_train, &mut rng, None, Some(&mut train_hashes));
    let val = gen_split(n_val, &mut rng, Some(&train_hashes), None);
    Dataset { train, val }
}

fn gen_split(
    n: usize,
    rng: &mut ChaCha8Rng,
    forbidden: Option<&HashSet<u64>>,
    mut record_hashes: Option<&mut HashSet<u64>>,
) -> Vec<ExampleRecord> {
    let mut out = Vec::with_capacity(n);
    let mut type_counters = [0usize; 5];
    for idx in 0..n {
        let qtype = QuestionType::ALL[idx % QuestionType::ALL.len()];
        let type_idx = idx % QuestionType::ALL.len();
        let counter = type_counters[type_idx];
        type_counters[type_idx] += 1;

        let mut fallback: Option<(Scene, Program, String)> = None;
        let mut chosen: Option<(Scene, Program, String)> = None;
        for _try in 0..MAX_TRIES {
            let scene = gen_scene(rng);
            if let Some(f) = forbidden {
                if f.contains(&scene.content_hash()) {
                    continue;
                }
            }
            let program = match draw_program(qtype, counter, &scene, rng) {
                Some(p) => p,
                None => continue,
            };
            let answer = match execute_program(&program, &scene) {
                Ok(a) => a,
                Err(_) => continue,
            };
            if fallback.is_none() {
                fallback = Some((scene.clone(), program.clone(), answer.clone()));
            }
            if answer_matches_target(qtype, counter, &answer) {
                chosen = Some((scene, program, answer));
                break;
            }
        }
        let (scene, program, answer) = chosen
            .or(fallback)
            .expect("question generation never produced a candidate");
        if let Some(hashes) = record_hashes.as_deref_mut() {
            hashes.insert(scene.content_hash());
        }
        out.push(ExampleRecord::new(&scene, &program, qtype, answer));
    }
    out
}

/// The answer each template slot is aiming for, cycling per type so
/// the per-template answer distribution stays near uniform.
fn answer_matches_target(qtype: QuestionType, counter: usize, answer: &str) -> bool {
    match qtype {
        QuestionType::Exist
        | QuestionType::CompareNumbers
        | QuestionType::CompareAttribute => {
            let want = if counter % 2 == 0 { "yes" } else { "no" };
            answer == want
        }
        QuestionType::Count => answer == (counter % SCENE_OBJECTS).to_string(),
        QuestionType::QueryAttribute => {
            let attr = AttrKind::ALL[counter % 4];
            let value_idx = (counter / 4) % attr.values();
            let want = match attr {
                AttrKind::Color => COLORS[value_idx],
                AttrKind::Shape => SHAPES[value_idx],
                AttrKind::Size => SIZES[value_idx],
                AttrKind::Material => MATERIALS[value_idx],
            };
            answer == want
        }
    }
}

fn random_filter(rng: &mut ChaCha8Rng, min_constraints: usize) -> Filter {
    loop {
        let mut f = Filter::default();
        if rng.gen_bool(0.45) {
            f.color = Some(rng.gen_range(0..COLORS.len()));
        }
        if rng.gen_bool(0.45) {
            f.shape = Some(rng.gen_range(0..SHAPES.len()));
        }
        if rng.gen_bool(0.25) {
            f.size = Some(rng.gen_range(0..SIZES.len()));
        }
        if rng.gen_bool(0.25) {
            f.material = Some(rng.gen_range(0..MATERIALS.len()));
        }
        if f.num_constraints() >= min_constraints {
            return f;
        }
    }
}

/// A filter constraining exactly one attribute family; counting
/// questions use these so the task stays desk-learnable.
fn random_single_filter(rng: &mut ChaCha8Rng) -> Filter {
    let mut f = Filter::default();
    match rng.gen_range(0..4) {
        0 => f.color = Some(rng.gen_range(0..COLORS.len())),
        1 => f.shape = Some(rng.gen_range(0..SHAPES.len())),
        2 => f.size = Some(rng.gen_range(0..SIZES.len())),
        _ => f.material = Some(rng.gen_range(0..MATERIALS.len())),
    }
    f
}

/// Attribute subsets tried when building a unique referent, smallest
/// first. A filter without shape renders its noun as "thing".
const SUBSET_ORDER: [[bool; 4]; 15] = [
    // color, shape, size, material
    [false, true, false, false],
    [true, false, false, false],
    [false, false, true, false],
    [false, false, false, true],
    [true, true, false, false],
    [false, true, true, false],
    [false, true, false, true],
    [true, false, true, false],
    [true, false, false, true],
    [false, false, true, true],
    [true, true, true, false],
    [true, true, false, true],
    [true, false, true, true],
    [false, true, true, true],
    [true, true, true, true],
];

fn unique_referent(
    scene: &Scene,
    rng: &mut ChaCha8Rng,
    exclude: Option<AttrKind>,
) -> Option<(Filter, usize)> {
    let obj_idx = rng.gen_range(0..scene.objects.len());
    let obj = &scene.objects[obj_idx];
    for mask in SUBSET_ORDER {
        let f = Filter {
            color: mask[0].then_some(obj.color),
            shape: mask[1].then_some(obj.shape),
            size: mask[2].then_some(obj.size),
            material: mask[3].then_some(obj.material),
        };
        if let Some(ex) = exclude {
            if f.constrains(ex) {
                continue;
            }
        }
        if scene.objects.iter().filter(|o| f.matches(o)).count() == 1 {
            return Some((f, obj_idx));
        }
    }
    None
}

fn draw_program(
    qtype: QuestionType,
    counter: usize,
    scene: &Scene,
    rng: &mut ChaCha8Rng,
) -> Option<Program> {
    match qtype {
        QuestionType::Exist => Some(Program::Exist {
            filter: random_filter(rng, 1),
        }),
        QuestionType::Count => Some(Program::Count {
            filter: random_single_filter(rng),
        }),
        QuestionType::CompareNumbers => {
            let left = random_single_filter(rng);
            let right = random_single_filter(rng);
            if left == right {
                return None;
            }
            Some(Program::CompareNum {
                more: counter % 4 < 2,
                left,
                right,
            })
        }
        QuestionType::QueryAttribute => {
            let attr = AttrKind::ALL[counter % 4];
            let (target, _) = unique_referent(scene, rng, Some(attr))?;
            Some(Program::QueryAttr { attr, target })
        }
        QuestionType::CompareAttribute => {
            let attr = AttrKind::ALL[counter % 4];
            let (left, li) = unique_referent(scene, rng, Some(attr))?;
            let (right, ri) = unique_referent(scene, rng, Some(attr))?;
            if li == ri {
                return None;
            }
            Some(Program::CompareAttr { attr, left, right })
        }
    }
}

// ── JSONL I/O ───────────────────────────────────────────────────────

pub fn write_jsonl<W: Write>(records: &[ExampleRecord], mut w: W) -> Result<(), TaskError> {
    for r in records {
        let line = serde_json::to_string(r).expect("record serialization is infallible");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<ExampleRecord>, TaskError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|source| TaskError::BadRecord {
                line: i + 1,
                source,
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: &std::path::Path) -> Result<Vec<ExampleRecord>, TaskError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

pub fn load_encoded(path: &std::path::Path) -> Result<Vec<EncodedExample>, TaskError> {
    load_jsonl(path)?.iter().map(encode).collect()
}
