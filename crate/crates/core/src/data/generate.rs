use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::text::{tokenize, Embeddings, MAX_TOKENS};
use super::{Dataset, DatasetMeta, ImageGrid, QuestionType, VqaSample, NUM_ANSWERS};
use crate::error::{bail, Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "what color is the {shape}"
    Color,
    /// "what shape is the {color} object"
    Shape,
    /// "how many {shape}s are there" / "how many {color} objects are there"
    Count,
    /// "is there a {color} {shape}"
    Presence,
    /// "is the {color} {shape} on the left or right" / "... at the top or bottom"
    Position,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::Color,
        Template::Shape,
        Template::Count,
        Template::Presence,
        Template::Position,
    ];

    pub fn qtype(self) -> QuestionType {
        match self {
            Template::Color => QuestionType::Color,
            Template::Shape => QuestionType::ObjectRecognition,
            Template::Count => QuestionType::Counting,
            Template::Presence => QuestionType::ObjectPresence,
            Template::Position => QuestionType::PositionalReasoning,
        }
    }
}

fn default_shapes() -> Vec<String> {
    ["circle", "square", "triangle", "diamond"].map(String::from).to_vec()
}

fn default_colors() -> Vec<String> {
    ["red", "green", "blue", "yellow", "purple"].map(String::from).to_vec()
}

fn default_templates() -> BTreeMap<Template, f64> {
    Template::ALL.into_iter().map(|t| (t, 1.0)).collect()
}

/// Generator settings. Every field has a desk-scale default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub num_images: usize,
    pub rows: usize,
    pub cols: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub num_questions: usize,
    /// 0 gives uniform oracle priors, 1 puts all mass on referenced positions.
    pub prior_informativeness: f64,
    pub val_fraction: f64,
    pub d_x: usize,
    pub d_emb: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Per-question annotator agreement is drawn from `[agree_min, agree_max]`.
    pub agree_min: f64,
    pub agree_max: f64,
    /// Standard deviation of Gaussian noise on every feature.
    pub feature_noise: f64,
    /// Probability of wrapping a question in filler words.
    pub filler_prob: f64,
    /// Probability of opening with "ignoring the {color} {shape}", naming a
    /// color and shape the question is not about.
    pub distractor_prob: f64,
    pub templates: BTreeMap<Template, f64>,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_images: 1000,
            rows: 4,
            cols: 6,
            shapes: default_shapes(),
            colors: default_colors(),
            num_questions: 5000,
            prior_informativeness: 1.0,
            val_fraction: 0.2,
            d_x: 32,
            d_emb: 32,
            min_objects: 3,
            max_objects: 6,
            agree_min: 0.8,
            agree_max: 1.0,
            feature_noise: 0.05,
            filler_prob: 0.5,
            distractor_prob: 0.0,
            templates: default_templates(),
        }
    }
}

const PREFIXES: [&str; 3] = ["tell me", "look at the picture and tell me", "in this image"];
const SUFFIXES: [&str; 2] = ["in the picture", "in this grid"];
const FRAME_WORDS: &str = "what color is the shape object how many s are there a on left or right at top bottom ignoring";

impl GenSpec {
    fn feature_width(&self) -> usize {
        1 + self.shapes.len() + self.colors.len() + self.rows + self.cols
    }

    fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_images == 0 || self.num_questions == 0 {
            bad.push("num_images and num_questions must be positive".to_string());
        }
        if self.rows == 0 || self.cols == 0 {
            bad.push(format!("grid {}x{} is empty", self.rows, self.cols));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            bad.push("need at least one shape and one color".into());
        }
        let distinct = |v: &[String]| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if !distinct(&self.shapes) || !distinct(&self.colors) {
            bad.push("shape and color names must be distinct".into());
        }
        if !(0.0..=1.0).contains(&self.prior_informativeness) {
            bad.push(format!("prior_informativeness {} outside [0, 1]", self.prior_informativeness));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bad.push(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > self.rows * self.cols {
            bad.push(format!(
                "objects per image {}..={} do not fit a {}x{} grid",
                self.min_objects, self.max_objects, self.rows, self.cols
            ));
        }
        if !(0.0 <= self.agree_min && self.agree_min <= self.agree_max && self.agree_max <= 1.0) {
            bad.push(format!("agreement range {}..{} invalid", self.agree_min, self.agree_max));
        }
        if self.d_x < self.feature_width() {
            bad.push(format!("d_x {} is below the {} feature slots needed", self.d_x, self.feature_width()));
        }
        if self.d_emb == 0 {
            bad.push("d_emb must be positive".into());
        }
        for (name, p) in [("filler_prob", self.filler_prob), ("distractor_prob", self.distractor_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            bad.push(format!("feature_noise {} invalid", self.feature_noise));
        }
        if self.templates.values().any(|w| !(*w >= 0.0 && w.is_finite())) || self.templates.values().sum::<f64>() <= 0.0 {
            bad.push("template weights must be nonnegative with a positive total".into());
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        for (&t, &w) in &self.templates {
            if w == 0.0 {
                continue;
            }
            let why = match t {
                Template::Color if self.colors.len() < 2 => Some("at least 2 colors"),
                Template::Shape if self.shapes.len() < 2 => Some("at least 2 shapes"),
                Template::Count if self.shapes.len() < 2 => Some("at least 2 shapes"),
                Template::Count if self.max_objects < 2 => Some("at least 2 objects per image"),
                Template::Presence if self.shapes.len() * self.colors.len() < 2 => {
                    Some("at least 2 shape-color combinations")
                }
                Template::Position if self.rows < 2 && self.cols < 2 => Some("a grid wider or taller than one cell"),
                _ => None,
            };
            if let Some(why) = why {
                bail!(Config, "template {:?} is unsatisfiable: it needs {}", t, why);
            }
        }
        Ok(())
    }

    /// Answer vocabulary in classifier order.
    pub fn answer_vocab(&self) -> Vec<String> {
        let mut v: Vec<String> = self.colors.clone();
        v.extend(self.shapes.iter().cloned());
        v.extend((0..=self.max_objects).map(|i| i.to_string()));
        v.extend(["yes", "no", "left", "right", "top", "bottom"].map(String::from));
        let mut seen = BTreeSet::new();
        v.retain(|a| seen.insert(a.clone()));
        v
    }

    fn words(&self) -> BTreeSet<String> {
        let mut w: BTreeSet<String> = FRAME_WORDS.split(' ').map(String::from).collect();
        for t in PREFIXES.iter().chain(&SUFFIXES) {
            w.extend(tokenize(t));
        }
        w.extend(self.colors.iter().cloned());
        for s in &self.shapes {
            w.insert(s.clone());
            w.insert(format!("{s}s"));
        }
        w
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    cell: usize,
    shape: usize,
    color: usize,
}

/// Generator's own record of what a question is about.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTruth {
    pub id: u32,
    pub template: Template,
    /// Grid cells the question refers to (possibly none).
    pub referenced_cells: Vec<usize>,
    /// Token positions carrying the question's content.
    pub key_tokens: Vec<usize>,
    pub answer: String,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    /// Same order as `train` followed by `val`.
    pub truth: Vec<SampleTruth>,
}

const IMAGE_STREAM: u64 = 1 << 40;
const QUESTION_STREAM: u64 = 2 << 40;
const ATTEMPTS: usize = 64;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Blend of uniform and mass spread evenly over `hot`.
fn blended_prior(len: usize, hot: &[usize], kappa: f64) -> Vec<f64> {
    let u = 1.0 / len as f64;
    if hot.is_empty() || kappa == 0.0 {
        return vec![f32_round(u); len];
    }
    let mut p = vec![(1.0 - kappa) * u; len];
    for &h in hot {
        p[h] += kappa / hot.len() as f64;
    }
    p.into_iter().map(f32_round).collect()
}

struct Draft {
    template: Template,
    question: String,
    answer: String,
    distractors: Vec<String>,
    refs: Vec<usize>,
    keys: Vec<String>,
}

fn unique_by<K: Ord + Copy>(objs: &[Object], key: impl Fn(&Object) -> K) -> Vec<Object> {
    let mut counts = BTreeMap::new();
    for o in objs {
        *counts.entry(key(o)).or_insert(0) += 1;
    }
    objs.iter().filter(|o| counts[&key(o)] == 1).copied().collect()
}

fn others(all: &[String], keep: &str) -> Vec<String> {
    all.iter().filter(|a| *a != keep).cloned().collect()
}

fn draft(spec: &GenSpec, t: Template, objs: &[Object], rng: &mut ChaCha8Rng) -> Option<Draft> {
    let (shapes, colors) = (&spec.shapes, &spec.colors);
    match t {
        Template::Color => {
            let c = unique_by(objs, |o| o.shape);
            let o = *c.get(rng.random_range(0..c.len().max(1)))?;
            Some(Draft {
                template: t,
                question: format!("what color is the {}", shapes[o.shape]),
                answer: colors[o.color].clone(),
                distractors: others(colors, &colors[o.color]),
                refs: vec![o.cell],
                keys: vec!["color".into(), shapes[o.shape].clone()],
            })
        }
        Template::Shape => {
            let c = unique_by(objs, |o| o.color);
            let o = *c.get(rng.random_range(0..c.len().max(1)))?;
            Some(Draft {
                template: t,
                question: format!("what shape is the {} object", colors[o.color]),
                answer: shapes[o.shape].clone(),
                distractors: others(shapes, &shapes[o.shape]),
                refs: vec![o.cell],
                keys: vec!["shape".into(), colors[o.color].clone()],
            })
        }
        Template::Count => {
            let by_shape = rng.random_bool(0.5);
            let (question, word, refs): (String, String, Vec<usize>) = if by_shape {
                let s = rng.random_range(0..shapes.len());
                let word = format!("{}s", shapes[s]);
                let refs = objs.iter().filter(|o| o.shape == s).map(|o| o.cell).collect();
                (format!("how many {word} are there"), word, refs)
            } else {
                let c = rng.random_range(0..colors.len());
                let refs = objs.iter().filter(|o| o.color == c).map(|o| o.cell).collect();
                (format!("how many {} objects are there", colors[c]), colors[c].clone(), refs)
            };
            let n = refs.len();
            let mut distractors = vec![(n + 1).to_string()];
            if n > 0 {
                distractors.push((n - 1).to_string());
            }
            Some(Draft {
                template: t,
                question,
                answer: n.to_string(),
                distractors,
                refs,
                keys: vec!["many".into(), word],
            })
        }
        Template::Presence => {
            let (s, c, yes) = if rng.random_bool(0.5) {
                let o = objs[rng.random_range(0..objs.len())];
                (o.shape, o.color, true)
            } else {
                let absent: Vec<(usize, usize)> = (0..shapes.len())
                    .flat_map(|s| (0..colors.len()).map(move |c| (s, c)))
                    .filter(|&(s, c)| !objs.iter().any(|o| o.shape == s && o.color == c))
                    .collect();
                let &(s, c) = absent.get(rng.random_range(0..absent.len().max(1)))?;
                (s, c, false)
            };
            let refs = if yes {
                objs.iter().filter(|o| o.shape == s && o.color == c).map(|o| o.cell).collect()
            } else {
                objs.iter().filter(|o| o.shape == s || o.color == c).map(|o| o.cell).collect()
            };
            let (a, d) = if yes { ("yes", "no") } else { ("no", "yes") };
            Some(Draft {
                template: t,
                question: format!("is there a {} {}", colors[c], shapes[s]),
                answer: a.into(),
                distractors: vec![d.into()],
                refs,
                keys: vec![colors[c].clone(), shapes[s].clone()],
            })
        }
        Template::Position => {
            let horizontal = if spec.rows < 2 {
                true
            } else if spec.cols < 2 {
                false
            } else {
                rng.random_bool(0.5)
            };
            let (len, pick): (usize, fn(usize, usize) -> usize) = if horizontal {
                (spec.cols, |cell, cols| cell % cols)
            } else {
                (spec.rows, |cell, cols| cell / cols)
            };
            let side = |o: &Object| {
                let k = pick(o.cell, spec.cols);
                if 2 * k + 1 < len {
                    Some(0)
                } else if 2 * k + 1 > len {
                    Some(1)
                } else {
                    None
                }
            };
            let c: Vec<Object> = unique_by(objs, |o| (o.shape, o.color))
                .into_iter()
                .filter(|o| side(o).is_some())
                .collect();
            let o = *c.get(rng.random_range(0..c.len().max(1)))?;
            let names = if horizontal { ["left", "right"] } else { ["top", "bottom"] };
            let s = side(&o).expect("filtered");
            let question = if horizontal {
                format!("is the {} {} on the left or right", colors[o.color], shapes[o.shape])
            } else {
                format!("is the {} {} at the top or bottom", colors[o.color], shapes[o.shape])
            };
            Some(Draft {
                template: t,
                question,
                answer: names[s].into(),
                distractors: vec![names[1 - s].into()],
                refs: vec![o.cell],
                keys: vec![
                    colors[o.color].clone(),
                    shapes[o.shape].clone(),
                    names[0].into(),
                    names[1].into(),
                ],
            })
        }
    }
}

fn make_image(spec: &GenSpec, seed: u64, id: usize) -> (Vec<Object>, Vec<f64>) {
    let mut rng = stream(seed, IMAGE_STREAM + id as u64);
    let m = spec.rows * spec.cols;
    let k = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut cells: Vec<usize> = sample_indices(&mut rng, m, k).into_vec();
    cells.sort_unstable();
    let objs: Vec<Object> = cells
        .into_iter()
        .map(|cell| Object {
            cell,
            shape: rng.random_range(0..spec.shapes.len()),
            color: rng.random_range(0..spec.colors.len()),
        })
        .collect();
    let (ns, nc) = (spec.shapes.len(), spec.colors.len());
    let mut feats = vec![0.0; m * spec.d_x];
    for cell in 0..m {
        let f = &mut feats[cell * spec.d_x..(cell + 1) * spec.d_x];
        match objs.iter().find(|o| o.cell == cell) {
            Some(o) => {
                f[1 + o.shape] = 1.0;
                f[1 + ns + o.color] = 1.0;
            }
            None => f[0] = 1.0,
        }
        f[1 + ns + nc + cell / spec.cols] = 1.0;
        f[1 + ns + nc + spec.rows + cell % spec.cols] = 1.0;
    }
    if spec.feature_noise > 0.0 {
        let noise = Normal::new(0.0, spec.feature_noise).expect("validated");
        for v in feats.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    (objs, feats.into_iter().map(f32_round).collect())
}

fn pick_template(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Template {
    let total: f64 = spec.templates.values().sum();
    let mut x = rng.random_range(0.0..total);
    for (&t, &w) in &spec.templates {
        if x < w {
            return t;
        }
        x -= w;
    }
    *spec.templates.keys().next_back().expect("nonempty")
}

/// Builds the whole dataset in memory. The result is a pure function of
/// `(seed, spec)`; each image and question draws from its own random stream.
pub fn generate_dataset(seed: u64, spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let m = spec.rows * spec.cols;

    let mut erng = stream(seed, 0);
    let mut embeddings = Embeddings::new(spec.d_emb);
    let scale = 1.0 / (spec.d_emb as f64).sqrt();
    for w in spec.words() {
        let v: Vec<f64> = (0..spec.d_emb)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut erng);
                f32_round(scale * z)
            })
            .collect();
        embeddings.insert(&w, v)?;
    }

    let mut images = BTreeMap::new();
    let mut objects = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let (objs, feats) = make_image(spec, seed, i);
        let id = i as u32;
        images.insert(
            id,
            ImageGrid {
                id,
                rows: spec.rows,
                cols: spec.cols,
                features: Arc::new(Tensor::new(vec![m, spec.d_x], feats)?),
            },
        );
        objects.push(objs);
    }
    let n_train_img = if spec.num_images == 1 {
        1
    } else {
        ((spec.num_images as f64 * (1.0 - spec.val_fraction)).round() as usize).clamp(1, spec.num_images - 1)
    };
    let n_train_q = ((spec.num_questions as f64 * (1.0 - spec.val_fraction)).round() as usize).max(1);

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut truth_train = Vec::new();
    let mut truth_val = Vec::new();
    let answers = spec.answer_vocab();
    for q in 0..spec.num_questions {
        let mut rng = stream(seed, QUESTION_STREAM + q as u64);
        let is_train = q < n_train_q || spec.num_images == 1;
        let (lo, hi) = if is_train { (0, n_train_img) } else { (n_train_img, spec.num_images) };
        let mut made = None;
        let mut last = Template::Presence;
        for _ in 0..ATTEMPTS {
            let img = rng.random_range(lo..hi);
            last = pick_template(spec, &mut rng);
            if let Some(d) = draft(spec, last, &objects[img], &mut rng) {
                made = Some((img, d));
                break;
            }
        }
        let Some((img, d)) = made else {
            bail!(Data, "template {:?} could not be realised for question {}", last, q);
        };
        let distractor = if spec.distractor_prob > 0.0 && rng.random_bool(spec.distractor_prob) {
            let cs: Vec<&String> = spec.colors.iter().filter(|c| !d.keys.contains(c)).collect();
            let ss: Vec<&String> = spec.shapes.iter().filter(|s| !d.keys.contains(s)).collect();
            if cs.is_empty() || ss.is_empty() {
                None
            } else {
                Some(format!(
                    "ignoring the {} {}",
                    cs[rng.random_range(0..cs.len())],
                    ss[rng.random_range(0..ss.len())]
                ))
            }
        } else {
            None
        };
        let question = if let Some(dis) = distractor {
            if rng.random_bool(spec.filler_prob) {
                format!("{} {} {}", dis, d.question, SUFFIXES[rng.random_range(0..SUFFIXES.len())])
            } else {
                format!("{} {}", dis, d.question)
            }
        } else if rng.random_bool(spec.filler_prob) {
            match rng.random_range(0..3) {
                0 => format!("{} {}", PREFIXES[rng.random_range(0..PREFIXES.len())], d.question),
                1 => format!("{} {}", d.question, SUFFIXES[rng.random_range(0..SUFFIXES.len())]),
                _ => format!(
                    "{} {} {}",
                    PREFIXES[rng.random_range(0..PREFIXES.len())],
                    d.question,
                    SUFFIXES[rng.random_range(0..SUFFIXES.len())]
                ),
            }
        } else {
            d.question.clone()
        };
        let tokens = tokenize(&question);
        let n = tokens.len().min(MAX_TOKENS);
        let key_tokens: Vec<usize> = (0..n).filter(|&i| d.keys.contains(&tokens[i])).collect();
        let p_agree = rng.random_range(spec.agree_min..=spec.agree_max);
        let ans: Vec<String> = (0..NUM_ANSWERS)
            .map(|_| {
                if rng.random_bool(p_agree) || d.distractors.is_empty() {
                    d.answer.clone()
                } else {
                    d.distractors[rng.random_range(0..d.distractors.len())].clone()
                }
            })
            .collect();
        let kappa = spec.prior_informativeness;
        let sample = VqaSample {
            id: q as u32,
            question,
            answers: ans,
            image: img as u32,
            qtype: d.template.qtype(),
            text_prior: Some(blended_prior(n, &key_tokens, kappa)),
            image_prior: Some(blended_prior(m, &d.refs, kappa)),
        };
        let truth = SampleTruth {
            id: q as u32,
            template: d.template,
            referenced_cells: d.refs,
            key_tokens,
            answer: d.answer,
        };
        if is_train {
            train.push(sample);
            truth_train.push(truth);
        } else {
            val.push(sample);
            truth_val.push(truth);
        }
    }
    truth_train.extend(truth_val);
    Ok(Generated {
        dataset: Dataset {
            meta: DatasetMeta {
                seed: Some(seed),
                spec: Some(spec.clone()),
                d_x: spec.d_x,
                d_emb: spec.d_emb,
            },
            answers,
            embeddings,
            images,
            train,
            val,
        },
        truth: truth_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_endpoints() {
        assert_eq!(blended_prior(4, &[1], 0.0), vec![0.25; 4]);
        assert_eq!(blended_prior(4, &[1], 1.0), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(blended_prior(4, &[], 1.0), vec![0.25; 4]);
    }

    #[test]
    fn unsatisfiable_template_is_named() {
        let spec = GenSpec {
            shapes: vec!["circle".into()],
            ..Default::default()
        };
        let err = generate_dataset(0, &spec).unwrap_err().to_string();
        assert!(err.contains("Shape") || err.contains("Count"), "{err}");
    }

    #[test]
    fn answers_cover_every_truth() {
        let spec = GenSpec {
            num_images: 20,
            num_questions: 200,
            ..Default::default()
        };
        let g = generate_dataset(3, &spec).unwrap();
        for t in &g.truth {
            assert!(g.dataset.answer_index(&t.answer).is_some(), "{}", t.answer);
        }
    }
}
